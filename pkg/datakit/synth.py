"""
程序化合成数据集: 每个类别对应一种解析几何体，用经典球面追踪渲染 RGBA 图像。

目录结构:
    root/images/<id>.png        RGBA 8 位图像
    root/gt/<object>.obj        真值网格 (仅评估使用)
    root/gt/<id>.pose.json      真值视角 (仅评估使用)
    root/manifest.json
"""
import json
import logging
import os
from multiprocessing import Pool

import numpy as np
import torch
from PIL import Image
from tqdm import tqdm

from model.camera import ViewPrior, angles_to_view, focal_from_fov, generate_rays, sample_view_prior
from model.renderer import sphere_trace_reference
from .manifest import DatasetManifest, SampleRecord, make_splits
from .primitives import PRIMITIVE_KINDS, primitive_mesh, primitive_sdf, primitive_texture, sample_primitive

logger = logging.getLogger(__name__)

# 合成渲染时球面追踪的参数
TRACE_STEPS = 128
TRACE_EPS = 1e-4


def render_primitive(spec, pose, image_size, fov_deg=30.0, camera_distance=2.7):
    """
    用球面追踪渲染一个解析几何体。alpha 为二值，掩码外的 RGB 为 0。
    :return: (H, W, 4) float64 numpy 数组，取值 [0, 1]
    """
    sdf_fn = primitive_sdf(spec)
    color_fn = primitive_texture(spec)
    rays = generate_rays(pose, image_size, focal_from_fov(image_size, fov_deg), camera_distance)
    depth, hit = sphere_trace_reference(sdf_fn, rays, max_steps=TRACE_STEPS, eps=TRACE_EPS)
    points = rays.origins + depth[..., None] * rays.directions
    alpha = hit.to(points.dtype)
    rgb = color_fn(points) * alpha[..., None]
    rgba = torch.cat([rgb, alpha[..., None]], dim=-1)[0]
    return rgba.reshape(image_size, image_size, 4).cpu().numpy()


def save_rgba_png(rgba, path):
    pixels = np.clip(np.rint(rgba * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(pixels).save(path, format="PNG")


def _object_tasks(categories, per_category, seed):
    """为每个物体生成独立的随机种子，保证结果与进程调度顺序无关。"""
    tasks = []
    for label, kind in enumerate(categories):
        for index in range(per_category):
            tasks.append((label, kind, index, [seed, label, index]))
    return tasks


def _render_object(task):
    """
    在独立进程中渲染一个物体的全部视角并写盘。
    :return: (状态, 记录列表, 错误信息)
    """
    label, kind, index, entropy, options = task
    out_dir = options["out_dir"]
    try:
        rng = np.random.default_rng(entropy)
        spec = sample_primitive(kind, rng, texture_seed=int(rng.integers(0, 2 ** 31 - 1)))
        object_id = f"{kind}_{index:04d}"
        mesh_ref = os.path.join("gt", f"{object_id}.obj")
        primitive_mesh(spec).export(os.path.join(out_dir, mesh_ref))

        views = options["views_per_object"]
        primary = int(rng.integers(0, views))
        generator = torch.Generator().manual_seed(int(rng.integers(0, 2 ** 63 - 1)))
        _, euler_deg = sample_view_prior(options["prior"], generator, views, options["camera_distance"])

        records = []
        for view in range(views):
            sample_id = f"{object_id}_v{view:02d}"
            angles = [float(a) for a in euler_deg[view]]
            pose = angles_to_view(torch.deg2rad(torch.tensor(angles, dtype=torch.float64)),
                                  options["camera_distance"])
            rgba = render_primitive(spec, pose, options["image_size"], options["fov_deg"], options["camera_distance"])
            image_ref = os.path.join("images", f"{sample_id}.png")
            save_rgba_png(rgba, os.path.join(out_dir, image_ref))

            pose_ref = os.path.join("gt", f"{sample_id}.pose.json")
            with open(os.path.join(out_dir, pose_ref), "w", encoding="utf-8") as f:
                json.dump({"euler_deg": angles, "distance": options["camera_distance"]}, f, sort_keys=True)

            records.append(SampleRecord(
                sample_id=sample_id, path=image_ref, label=label, split="train", object_id=object_id,
                primary=view == primary, gt_mesh_ref=mesh_ref, gt_pose_ref=pose_ref, primitive=spec.to_dict(),
            ))
        return "success", records, None
    except Exception as e:
        return "failed", [], f"{kind}#{index}: {e}"


def generate_primitive_dataset(out_dir, categories=("sphere", "box", "cylinder"), per_category=100,
                               views_per_object=1, image_size=64, seed=0, prior=None, fov_deg=30.0,
                               camera_distance=2.7, split_ratios=(0.7, 0.1, 0.2), workers=1):
    """
    合成一个多类别数据集并写出 manifest.json。相同的参数和 seed 得到逐字节相同的输出。
    每个物体只有一个预选视角 (primary) 参与单视角训练。
    """
    if image_size < 32:
        raise ValueError("image_size 必须 >= 32")
    if per_category < 1 or views_per_object < 1:
        raise ValueError("per_category 和 views_per_object 必须 >= 1")
    unknown = [k for k in categories if k not in PRIMITIVE_KINDS]
    if unknown:
        raise ValueError(f"不支持的几何体类型: {unknown}")

    try:
        os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
        os.makedirs(os.path.join(out_dir, "gt"), exist_ok=True)
    except OSError as e:
        raise OSError(f"无法写入输出目录 {out_dir}: {e}") from e
    if not os.access(out_dir, os.W_OK):
        raise OSError(f"输出目录不可写: {out_dir}")

    options = {
        "out_dir": out_dir,
        "views_per_object": views_per_object,
        "image_size": image_size,
        "fov_deg": fov_deg,
        "camera_distance": camera_distance,
        "prior": prior or ViewPrior(),
    }
    tasks = [(*t, options) for t in _object_tasks(list(categories), per_category, seed)]
    logger.info(f"准备合成 {len(tasks)} 个物体，每个物体 {views_per_object} 个视角...")

    results = []
    with tqdm(total=len(tasks), desc="合成进度") as pbar:
        if workers > 1:
            with Pool(processes=workers) as pool:
                for result in pool.imap_unordered(_render_object, tasks):
                    results.append(result)
                    pbar.update(1)
        else:
            for task in tasks:
                results.append(_render_object(task))
                pbar.update(1)

    records = []
    for status, object_records, error in results:
        if status == "success":
            records.extend(object_records)
        else:
            logger.error(f"合成失败: {error}")
    failed_count = len([r for r in results if r[0] != "success"])
    logger.info(f"合成完成。成功: {len(results) - failed_count}, 失败: {failed_count}")
    if failed_count:
        raise RuntimeError(f"{failed_count} 个物体合成失败，详见日志")

    records.sort(key=lambda r: r.sample_id)
    manifest = DatasetManifest(
        records=records,
        categories=list(categories),
        meta={
            "seed": seed,
            "image_size": image_size,
            "views_per_object": views_per_object,
            "fov_deg": fov_deg,
            "camera_distance": camera_distance,
        },
    )
    manifest = make_splits(manifest, split_ratios, seed)
    manifest.save(out_dir)
    return manifest
