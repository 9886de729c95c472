"""
数据集清单 (manifest.json) 的读写、分层划分与类别均衡。
"""
import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from training.errors import DatasetError

logger = logging.getLogger(__name__)

MANIFEST_FILENAME = "manifest.json"
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    path: str
    label: int
    split: str = "train"
    object_id: str = ""
    primary: bool = True
    # 以下字段只允许评估代码读取
    gt_mesh_ref: str | None = None
    gt_pose_ref: str | None = None
    primitive: dict | None = None

    def __post_init__(self):
        if self.split not in SPLITS:
            raise DatasetError(f"非法的 split: {self.split}", self.sample_id)
        if not self.object_id:
            object.__setattr__(self, "object_id", self.sample_id)


@dataclass
class DatasetManifest:
    records: list
    categories: list
    root: str | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [r.sample_id for r in self.records]
        if len(ids) != len(set(ids)):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise DatasetError(f"manifest 中存在重复的 sample_id: {dup[:5]}")
        for r in self.records:
            if not 0 <= r.label < len(self.categories):
                raise DatasetError(f"标签 {r.label} 超出类别数 {len(self.categories)}", r.sample_id)

    @property
    def num_categories(self):
        return len(self.categories)

    @property
    def per_category_counts(self):
        counts = {name: 0 for name in self.categories}
        for r in self.records:
            counts[self.categories[r.label]] += 1
        return counts

    def to_frame(self):
        columns = [f.name for f in dataclasses.fields(SampleRecord)]
        return pd.DataFrame([dataclasses.asdict(r) for r in self.records], columns=columns)

    def split_records(self, split, primary_only=False):
        if split not in SPLITS:
            raise DatasetError(f"不存在的 split: {split}")
        return [r for r in self.records if r.split == split and (r.primary or not primary_only)]

    def object_views(self, split):
        """object_id -> 该物体在 split 中的全部记录 (按 sample_id 排序)。"""
        views = {}
        for r in self.records:
            if r.split == split:
                views.setdefault(r.object_id, []).append(r)
        return views

    def resolve(self, relative_path):
        return relative_path if self.root is None else os.path.join(self.root, relative_path)

    def replace_records(self, records):
        return DatasetManifest(records=records, categories=list(self.categories), root=self.root, meta=dict(self.meta))

    def to_json(self):
        payload = {
            "categories": self.categories,
            "meta": self.meta,
            "records": [dataclasses.asdict(r) for r in self.records],
        }
        return json.dumps(payload, ensure_ascii=False, indent=2, sort_keys=True)

    def save(self, root):
        os.makedirs(root, exist_ok=True)
        with open(os.path.join(root, MANIFEST_FILENAME), "w", encoding="utf-8") as f:
            f.write(self.to_json())
        self.root = root

    @classmethod
    def load(cls, root):
        path = os.path.join(root, MANIFEST_FILENAME)
        if not os.path.exists(path):
            raise DatasetError(f"找不到数据集清单: {path}")
        try:
            with open(path, encoding="utf-8") as f:
                payload = json.load(f)
        except json.JSONDecodeError as e:
            raise DatasetError(f"数据集清单解析失败: {path}: {e}") from e
        records = [SampleRecord(**r) for r in payload.get("records", [])]
        return cls(records=records, categories=payload["categories"], root=root, meta=payload.get("meta", {}))


def _split_counts(n, ratios):
    n_train = int(round(n * ratios[0]))
    n_val = min(int(round(n * ratios[1])), n - n_train)
    return n_train, n_val, n - n_train - n_val


def make_splits(manifest: DatasetManifest, ratios=(0.7, 0.1, 0.2), seed=0):
    """
    按类别分层划分 train/val/test。同一物体的所有视角落在同一个 split 中。
    物体数少于 3 的类别全部划入 train 并给出警告。
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-6:
        raise ValueError(f"split 比例必须是三个非负数且和为 1: {ratios}")

    frame = manifest.to_frame()
    assignment = {}
    for label, group in frame.groupby("label", sort=True):
        objects = sorted(group["object_id"].unique())
        if len(objects) < 3:
            logger.warning(f"类别 '{manifest.categories[label]}' 只有 {len(objects)} 个物体，全部划入 train")
            assignment.update({obj: "train" for obj in objects})
            continue
        rng = np.random.default_rng([seed, int(label)])
        order = [objects[i] for i in rng.permutation(len(objects))]
        n_train, n_val, _ = _split_counts(len(objects), ratios)
        for i, obj in enumerate(order):
            assignment[obj] = "train" if i < n_train else "val" if i < n_train + n_val else "test"

    records = [dataclasses.replace(r, split=assignment[r.object_id]) for r in manifest.records]
    return manifest.replace_records(records)


def balance_categories(manifest: DatasetManifest, cap=500, seed=0):
    """每个类别最多保留 cap 个物体，不放回随机抽样，结果由 seed 决定。"""
    if cap < 1:
        raise ValueError("cap 必须 >= 1")
    frame = manifest.to_frame()
    keep = set()
    for label, group in frame.groupby("label", sort=True):
        objects = sorted(group["object_id"].unique())
        if len(objects) > cap:
            rng = np.random.default_rng([seed, int(label)])
            chosen = rng.choice(len(objects), size=cap, replace=False)
            objects = [objects[i] for i in sorted(chosen)]
            logger.info(f"类别 '{manifest.categories[label]}' 从 {group['object_id'].nunique()} 个物体抽样到 {cap} 个")
        keep.update(objects)
    return manifest.replace_records([r for r in manifest.records if r.object_id in keep])
