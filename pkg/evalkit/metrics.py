"""
Chamfer 距离与 F-score。最近邻查询默认用 KD 树，brute 模式是 O(n²) 的对照实现。
"""
import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from training.errors import EmptyMeshError
from .geometry import PointCloud

NN_METHODS = ("kdtree", "brute")


def _points(cloud):
    points = cloud.points if isinstance(cloud, PointCloud) else PointCloud(cloud).points
    if len(points) == 0:
        raise EmptyMeshError("点集不能为空")
    return points


def nearest_distances(query, reference, method="kdtree"):
    """query 中每个点到 reference 的最近欧氏距离。"""
    q, r = _points(query), _points(reference)
    if method == "kdtree":
        return cKDTree(r).query(q, k=1)[0]
    if method == "brute":
        return cdist(q, r).min(axis=1)
    raise ValueError(f"未知的最近邻方法: {method}")


def chamfer(s1, s2, method="kdtree"):
    """0.5 · mean_x min_y |x - y| + 0.5 · mean_y min_x |y - x| (不取平方)。"""
    return 0.5 * float(nearest_distances(s1, s2, method).mean()) + 0.5 * float(nearest_distances(s2, s1, method).mean())


def precision_recall(pred, gt, d, method="kdtree"):
    if d <= 0:
        raise ValueError("阈值 d 必须 > 0")
    precision = float((nearest_distances(pred, gt, method) < d).mean())
    recall = float((nearest_distances(gt, pred, method) < d).mean())
    return precision, recall


def fscore(pred, gt, d, method="kdtree"):
    """精确率与召回率的调和平均，距离严格小于 d 才算匹配；P = R = 0 时为 0。"""
    precision, recall = precision_recall(pred, gt, d, method)
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def threshold_to_units(threshold):
    """评估阈值以 0.01 世界单位计: F@1.0 对应距离 0.01。"""
    return threshold / 100.0


def threshold_key(threshold):
    return f"f@{float(threshold)!r}"
