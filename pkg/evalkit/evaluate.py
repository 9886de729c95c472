"""
模型评估: 编码 -> 超网络 -> SDF 网格 -> marching cubes -> 表面采样 -> 变换到评估坐标系
-> Chamfer + 各阈值的 F-score，按类别和整体汇总。另外提供隐向量导出与网格导出。
"""
import json
import logging
import math
import os
from dataclasses import dataclass, field
from multiprocessing import Pool

import numpy as np
import pandas as pd
import torch
from tqdm import tqdm

from datakit.loader import decode_image, read_pose
from datakit.manifest import DatasetManifest
from model.camera import view_to_rotation
from model.fields import shape_sdf_fn
from training.checkpoint import Checkpoint, load_checkpoint, restore_modules
from training.errors import DatasetError, EmptyMeshError
from .geometry import TriMesh, grid_points, icp_align, marching_cubes, sample_surface
from .metrics import chamfer, fscore, threshold_key, threshold_to_units

logger = logging.getLogger(__name__)

# 空网格的惩罚值: Chamfer 取场景 [-1,1]^3 对角线的 2 倍，F-score 取 0
SCENE_DIAGONAL = 2.0 * math.sqrt(3.0)
EMPTY_CD = 2.0 * SCENE_DIAGONAL
ALIGN_MODES = ("none", "view", "icp")
GRID_CHUNK = 262_144


@torch.no_grad()
def sample_sdf_grid(sdf_fn, resolution=128, bounds=(-1.0, 1.0), dtype=None, device="cpu"):
    """
    在 resolution^3 的规则网格上分块求 SDF。
    :param sdf_fn: points (1, N, 3) -> sdf (1, N)
    """
    dtype = dtype or torch.get_default_dtype()
    points = torch.as_tensor(grid_points(resolution, bounds), dtype=dtype, device=device)
    values = [sdf_fn(chunk[None])[0] for chunk in points.split(GRID_CHUNK)]
    return torch.cat(values).reshape(resolution, resolution, resolution).double().cpu().numpy()


def extract_mesh(params, resolution=128, bounds=(-1.0, 1.0)):
    """单个样本 (batch 维为 1) 的 FieldParams -> TriMesh。"""
    ref = params.shape[0][0]
    grid = sample_sdf_grid(shape_sdf_fn(params.shape), resolution, bounds, ref.dtype, ref.device)
    return marching_cubes(grid, bounds)


def _empty_row(thresholds):
    row = {"cd": EMPTY_CD}
    row.update({threshold_key(t): 0.0 for t in thresholds})
    return row


def score_meshes(pred_mesh: TriMesh, gt_mesh: TriMesh, thresholds=(1.0, 5.0, 10.0), n_points=100_000,
                 align="view", pred_rotation=None, gt_rotation=None, seed=0, icp_iters=50):
    """
    比较一对网格。align="view" 时预测网格用预测视角旋转、真值网格用真值视角旋转 (相机朝向坐标系)；
    align="icp" 在此基础上再用 ICP 把预测点云配准到真值。
    :return: (状态, 指标字典)，空网格返回 ("empty", 惩罚值)
    """
    if align not in ALIGN_MODES:
        raise ValueError(f"未知的对齐方式: {align}")
    if gt_mesh.is_empty:
        raise EmptyMeshError("真值网格为空")
    if pred_mesh.is_empty:
        return "empty", _empty_row(thresholds)

    pred = sample_surface(pred_mesh, n_points, seed=[seed, 0])
    gt = sample_surface(gt_mesh, n_points, seed=[seed, 1])
    if align in ("view", "icp"):
        if pred_rotation is not None:
            pred = pred.transformed(pred_rotation)
        if gt_rotation is not None:
            gt = gt.transformed(gt_rotation)
    if align == "icp":
        pred = icp_align(pred, gt, max_iters=icp_iters).aligned

    row = {"cd": chamfer(pred, gt)}
    for t in thresholds:
        row[threshold_key(t)] = fscore(pred, gt, threshold_to_units(t))
    return "success", row


def _score_task(task):
    """在独立进程中计算一个样本的指标。"""
    sample_id, category, label, pred_mesh, gt_path, pred_rotation, gt_rotation, options = task
    base = {"sample_id": sample_id, "category": category, "label": label}
    try:
        gt_mesh = TriMesh.load(gt_path)
        status, row = score_meshes(pred_mesh, gt_mesh, options["thresholds"], options["n_points"], options["align"],
                                   pred_rotation, gt_rotation, options["seed"], options["icp_iters"])
        return status, {**base, "status": status, **row}
    except Exception as e:
        logger.error(f"评估失败 ({sample_id}): {e}")
        return "failed", {**base, "status": "failed", **_empty_row(options["thresholds"]), "error": str(e)}


@dataclass
class MetricsReport:
    samples: pd.DataFrame
    thresholds: tuple = (1.0, 5.0, 10.0)
    meta: dict = field(default_factory=dict)

    @property
    def metric_columns(self):
        return ["cd"] + [threshold_key(t) for t in self.thresholds]

    def per_category(self):
        grouped = self.samples.groupby("category", sort=True)
        table = grouped[self.metric_columns].mean()
        table["count"] = grouped.size()
        return table

    def overall(self):
        means = {c: float(self.samples[c].mean()) for c in self.metric_columns}
        means["count"] = int(len(self.samples))
        return means

    def status_counts(self):
        return {k: int(v) for k, v in self.samples["status"].value_counts().items()}

    def to_dict(self):
        per_category = {
            str(name): {k: (int(v) if k == "count" else float(v)) for k, v in row.items()}
            for name, row in self.per_category().iterrows()
        }
        return {
            "thresholds": list(self.thresholds),
            "overall": self.overall(),
            "per_category": per_category,
            "status": self.status_counts(),
            "samples": json.loads(self.samples.to_json(orient="records")),
            "meta": self.meta,
        }

    def save(self, out_dir, stem="metrics"):
        os.makedirs(out_dir, exist_ok=True)
        json_path = os.path.join(out_dir, f"{stem}.json")
        csv_path = os.path.join(out_dir, f"{stem}.csv")
        with open(json_path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, ensure_ascii=False, indent=2, sort_keys=True)
        self.samples.to_csv(csv_path, index=False)
        return json_path, csv_path


def _as_checkpoint(checkpoint, device):
    return checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint, map_location=device)


def _chunks(items, size):
    for start in range(0, len(items), size):
        yield items[start:start + size]


@torch.no_grad()
def encode_records(model, manifest: DatasetManifest, records, batch_size=12, device="cpu"):
    """逐批编码，产出 (record, LatentCodes, FieldParams, 预测视角旋转)，每个样本 batch 维为 1。"""
    for chunk in _chunks(records, batch_size):
        images = torch.stack([decode_image(manifest.resolve(r.path), r.sample_id) for r in chunk]).to(device)
        codes, params = model.infer_fields(images)
        rotations = view_to_rotation(model.view_predictor(images))
        for i, record in enumerate(chunk):
            yield record, codes.shape[i], params.select(i), rotations[i]


def check_ground_truth(manifest: DatasetManifest, split="test", align="view"):
    """评估前检查 split 中每个预选视角样本都有真值网格 (对齐时还需要真值视角)，返回这些样本。"""
    if align not in ALIGN_MODES:
        raise ValueError(f"未知的对齐方式: {align}")
    records = manifest.split_records(split, primary_only=True)
    for r in records:
        if not r.gt_mesh_ref or not os.path.exists(manifest.resolve(r.gt_mesh_ref)):
            raise DatasetError("缺少真值网格", r.sample_id)
        if align != "none" and (not r.gt_pose_ref or not os.path.exists(manifest.resolve(r.gt_pose_ref))):
            raise DatasetError("缺少真值视角", r.sample_id)
    return records


def evaluate_model(checkpoint, manifest: DatasetManifest, split="test", thresholds=(1.0, 5.0, 10.0), align="view",
                   grid_resolution=128, surface_points=100_000, icp_iters=50, workers=1, seed=0, device="cpu"):
    """
    评估 checkpoint 在某个 split 上的重建质量。每个物体只评估其预选视角。
    空网格记为惩罚值而不是报错；缺少真值网格在开始计算前就报错。
    """
    records = check_ground_truth(manifest, split, align)
    _, model, _ = restore_modules(_as_checkpoint(checkpoint, device), device)
    options = {"thresholds": tuple(thresholds), "n_points": surface_points, "align": align,
               "seed": seed, "icp_iters": icp_iters}

    tasks = []
    for record, _, params, rotation in tqdm(encode_records(model, manifest, records, device=device),
                                            total=len(records), desc="提取网格"):
        mesh = extract_mesh(params, grid_resolution)
        gt_rotation = None
        if align != "none":
            gt_rotation = read_pose(manifest.resolve(record.gt_pose_ref), record.sample_id).rotation[0]
            gt_rotation = gt_rotation.double().cpu().numpy()
        tasks.append((record.sample_id, manifest.categories[record.label], record.label, mesh,
                      manifest.resolve(record.gt_mesh_ref), rotation.double().cpu().numpy(), gt_rotation, options))

    results = []
    with tqdm(total=len(tasks), desc="计算指标") as pbar:
        if workers > 1:
            with Pool(processes=workers) as pool:
                for result in pool.imap_unordered(_score_task, tasks):
                    results.append(result)
                    pbar.update(1)
        else:
            for task in tasks:
                results.append(_score_task(task))
                pbar.update(1)

    success_count = len([r for r in results if r[0] == "success"])
    empty_count = len([r for r in results if r[0] == "empty"])
    failed_count = len(results) - success_count - empty_count
    logger.info(f"评估完成。成功: {success_count}, 空网格: {empty_count}, 失败: {failed_count}")

    rows = sorted((row for _, row in results), key=lambda row: row["sample_id"])
    frame = pd.DataFrame(rows, columns=["sample_id", "category", "label", "status", "cd",
                                        *[threshold_key(t) for t in thresholds]])
    return MetricsReport(frame, tuple(thresholds), {"split": split, "align": align, "grid_resolution": grid_resolution,
                                                    "surface_points": surface_points})


def export_embeddings(checkpoint, manifest: DatasetManifest, split="test", out_path=None, device="cpu"):
    """
    导出 split 中每个样本的原始形状隐向量 (不做降维)。
    列: sample_id, label, category, s_0 ... s_{l-1}
    """
    _, model, _ = restore_modules(_as_checkpoint(checkpoint, device), device)
    records = manifest.split_records(split, primary_only=True)
    rows = []
    for record, shape_code, _, _ in encode_records(model, manifest, records, device=device):
        code = shape_code.double().cpu().numpy()
        rows.append({"sample_id": record.sample_id, "label": record.label,
                     "category": manifest.categories[record.label],
                     **{f"s_{i}": float(x) for i, x in enumerate(code)}})
    frame = pd.DataFrame(rows)
    if out_path is not None:
        os.makedirs(os.path.dirname(out_path) or ".", exist_ok=True)
        frame.to_csv(out_path, index=False)
    return frame


def code_matrix(frame):
    return frame[[c for c in frame.columns if c.startswith("s_")]].to_numpy(dtype=np.float64)


def nearest_centroid_accuracy(reference: pd.DataFrame, held_out: pd.DataFrame):
    """用 reference 中每个类别归一化隐向量的均值作为中心，按余弦相似度给 held_out 分类。"""
    if reference.empty or held_out.empty:
        raise ValueError("隐向量表不能为空")

    def normalized(frame):
        codes = code_matrix(frame)
        return codes / np.clip(np.linalg.norm(codes, axis=1, keepdims=True), 1e-12, None)

    ref_codes = normalized(reference)
    labels = np.sort(reference["label"].unique())
    centroids = np.stack([ref_codes[reference["label"].to_numpy() == k].mean(axis=0) for k in labels])
    centroids /= np.clip(np.linalg.norm(centroids, axis=1, keepdims=True), 1e-12, None)
    predicted = labels[np.argmax(normalized(held_out) @ centroids.T, axis=1)]
    return float((predicted == held_out["label"].to_numpy()).mean())


def export_mesh(checkpoint, image_path, out_path, resolution=128, device="cpu"):
    """从单张 RGBA 图像重建网格并写成 OBJ。"""
    _, model, _ = restore_modules(_as_checkpoint(checkpoint, device), device)
    image = decode_image(image_path)[None].to(device)
    _, params = model.infer_fields(image)
    mesh = extract_mesh(params, resolution)
    if mesh.is_empty:
        logger.warning(f"提取到的网格为空: {image_path}")
    os.makedirs(os.path.dirname(out_path) or ".", exist_ok=True)
    mesh.save_obj(out_path)
    return mesh
