"""
批数据加载。

训练用的 ImageBatch 只包含图像和类别标签；已知视角模式下使用单独的 PosedBatch，
两者类型分离，保证单视角训练代码拿不到真值视角或网格。
"""
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from model.camera import ViewPose, angles_to_view
from training.errors import DatasetError
from .manifest import DatasetManifest

logger = logging.getLogger(__name__)


@dataclass
class ImageBatch:
    images: torch.Tensor   # (B, 4, H, W)，取值 [0, 1]
    labels: torch.Tensor   # (B,)
    sample_ids: list

    def __len__(self):
        return self.labels.shape[0]

    def to(self, device):
        return ImageBatch(self.images.to(device), self.labels.to(device), self.sample_ids)


@dataclass
class PosedBatch:
    """已知视角模式的批数据，可选地附带同一物体的第二视角。"""
    images: torch.Tensor
    labels: torch.Tensor
    sample_ids: list
    poses: ViewPose
    second_images: torch.Tensor | None = None
    second_poses: ViewPose | None = None
    second_index: torch.Tensor | None = None  # second_images 对应 batch 中的位置

    def __len__(self):
        return self.labels.shape[0]


def decode_image(path, sample_id=None, image_size=None):
    """读取 RGBA PNG，返回 (4, H, W) float 张量。"""
    try:
        with Image.open(path) as img:
            img.load()
            if img.mode != "RGBA":
                img = img.convert("RGBA")
            pixels = np.asarray(img, dtype=np.float32) / 255.0
    except FileNotFoundError as e:
        raise DatasetError(f"图片不存在: {path}", sample_id) from e
    except (UnidentifiedImageError, OSError, SyntaxError) as e:
        raise DatasetError(f"图片损坏或无法解码: {path} ({e})", sample_id) from e
    if image_size is not None and pixels.shape[:2] != (image_size, image_size):
        raise DatasetError(f"图片尺寸 {pixels.shape[:2]} 与配置的 {image_size} 不一致", sample_id)
    return torch.from_numpy(pixels).permute(2, 0, 1).contiguous().to(torch.get_default_dtype())


def read_pose(path, sample_id=None):
    try:
        with open(path, encoding="utf-8") as f:
            payload = json.load(f)
        euler = torch.deg2rad(torch.tensor(payload["euler_deg"], dtype=torch.get_default_dtype()))
        return angles_to_view(euler, float(payload["distance"]))
    except (OSError, KeyError, json.JSONDecodeError) as e:
        raise DatasetError(f"真值视角读取失败: {path} ({e})", sample_id) from e


def _decode_all(manifest, records, num_workers, image_size=None):
    def decode(record):
        return decode_image(manifest.resolve(record.path), record.sample_id, image_size)

    if num_workers > 0:
        with ThreadPoolExecutor(max_workers=num_workers) as pool:
            return list(pool.map(decode, records))
    return [decode(r) for r in records]


def epoch_order(n, seed, epoch):
    """每个 epoch 的打乱顺序只由 (seed, epoch) 决定。"""
    return np.random.default_rng([seed, epoch]).permutation(n)


def num_batches(n, batch_size):
    return math.ceil(n / batch_size)


def load_batch(manifest: DatasetManifest, split, batch_size, seed, epoch, num_workers=0, image_size=None):
    """
    按 epoch 打乱并逐批解码。训练集只使用每个物体预选的那一个视角。
    :return: ImageBatch 的生成器
    """
    if batch_size < 1:
        raise ValueError("batch_size 必须 >= 1")
    records = manifest.split_records(split, primary_only=True)
    order = epoch_order(len(records), seed, epoch)
    for start in range(0, len(records), batch_size):
        chunk = [records[i] for i in order[start:start + batch_size]]
        images = torch.stack(_decode_all(manifest, chunk, num_workers, image_size))
        labels = torch.tensor([r.label for r in chunk], dtype=torch.long)
        yield ImageBatch(images=images, labels=labels, sample_ids=[r.sample_id for r in chunk])


def multi_view_objects(manifest: DatasetManifest, split, fraction, seed):
    """按 seed 预先选出拥有第二视角监督的物体集合。"""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("multi_view_fraction 必须在 [0, 1] 内")
    objects = sorted(manifest.object_views(split))
    count = int(round(fraction * len(objects)))
    chosen = np.random.default_rng([seed, 7919]).permutation(len(objects))[:count]
    return {objects[i] for i in chosen}


def load_posed_batch(manifest: DatasetManifest, split, batch_size, seed, epoch, multi_view_fraction=0.0,
                     num_workers=0, image_size=None):
    """
    已知视角模式的加载器。被选中的物体在每个 epoch 随机抽取一个非预选视角作为第二视角。
    被选中的物体没有其他视角时报错。
    """
    if batch_size < 1:
        raise ValueError("batch_size 必须 >= 1")
    views = manifest.object_views(split)
    paired = multi_view_objects(manifest, split, multi_view_fraction, seed)
    records = manifest.split_records(split, primary_only=True)
    order = epoch_order(len(records), seed, epoch)
    rng = np.random.default_rng([seed, epoch, 104729])

    for start in range(0, len(records), batch_size):
        chunk = [records[i] for i in order[start:start + batch_size]]
        images = torch.stack(_decode_all(manifest, chunk, num_workers, image_size))
        poses = [read_pose(manifest.resolve(r.gt_pose_ref), r.sample_id) for r in chunk]

        second, second_index = [], []
        for i, r in enumerate(chunk):
            if r.object_id not in paired:
                continue
            others = [v for v in views[r.object_id] if v.sample_id != r.sample_id]
            if not others:
                raise DatasetError("缺少第二视角，无法进行多视角监督", r.sample_id)
            second.append(others[int(rng.integers(0, len(others)))])
            second_index.append(i)

        batch = PosedBatch(
            images=images,
            labels=torch.tensor([r.label for r in chunk], dtype=torch.long),
            sample_ids=[r.sample_id for r in chunk],
            poses=_stack_poses(poses),
        )
        if second:
            batch.second_images = torch.stack(_decode_all(manifest, second, num_workers, image_size))
            batch.second_poses = _stack_poses([read_pose(manifest.resolve(r.gt_pose_ref), r.sample_id) for r in second])
            batch.second_index = torch.tensor(second_index, dtype=torch.long)
        yield batch


def _stack_poses(poses):
    return ViewPose(
        v=torch.cat([p.v for p in poses]),
        rotation=torch.cat([p.rotation for p in poses]),
        camera_distance=poses[0].camera_distance,
    )
