"""
网格与点云: 等值面提取、表面采样、刚体配准 (ICP)。
"""
import logging
from dataclasses import dataclass, field

import numpy as np
import trimesh
from scipy.spatial import cKDTree
from skimage import measure

from training.errors import EmptyMeshError

logger = logging.getLogger(__name__)

# 面积低于该值的三角形视为退化
DEGENERATE_AREA = 1e-14


@dataclass
class PointCloud:
    points: np.ndarray  # (n, 3)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.isfinite(self.points).all():
            raise ValueError("点云中存在非有限值")

    def __len__(self):
        return self.points.shape[0]

    def transformed(self, rotation, translation=None):
        moved = self.points @ np.asarray(rotation, dtype=np.float64).T
        if translation is not None:
            moved = moved + np.asarray(translation, dtype=np.float64)
        return PointCloud(moved)


@dataclass
class TriMesh:
    vertices: np.ndarray  # (m, 3)
    faces: np.ndarray     # (f, 3)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("面索引超出顶点范围")

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    @property
    def is_empty(self):
        return len(self.faces) == 0

    def face_areas(self):
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def cleaned(self):
        """去掉零面积三角形和不再被引用的顶点。"""
        if self.is_empty:
            return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
        faces = self.faces[self.face_areas() > DEGENERATE_AREA]
        used, inverse = np.unique(faces.ravel(), return_inverse=True)
        return TriMesh(self.vertices[used], inverse.reshape(-1, 3))

    def transformed(self, rotation, translation=None):
        moved = self.vertices @ np.asarray(rotation, dtype=np.float64).T
        if translation is not None:
            moved = moved + np.asarray(translation, dtype=np.float64)
        return TriMesh(moved, self.faces)

    def to_trimesh(self):
        return trimesh.Trimesh(vertices=self.vertices, faces=self.faces, process=False)

    @classmethod
    def from_trimesh(cls, mesh):
        return cls(np.asarray(mesh.vertices), np.asarray(mesh.faces))

    def save_obj(self, path):
        if self.is_empty:
            with open(path, "w", encoding="utf-8") as f:
                f.write("# empty mesh\n")
            return path
        self.to_trimesh().export(path, file_type="obj")
        return path

    @classmethod
    def load(cls, path):
        return cls.from_trimesh(trimesh.load(path, force="mesh", process=False))


def grid_points(resolution, bounds=(-1.0, 1.0)):
    """[lo, hi]^3 上 resolution^3 个格点，顺序与 (i, j, k) -> (x, y, z) 一致。"""
    lo, hi = bounds
    axis = np.linspace(lo, hi, resolution)
    xx, yy, zz = np.meshgrid(axis, axis, axis, indexing="ij")
    return np.stack([xx, yy, zz], axis=-1).reshape(-1, 3)


def marching_cubes(sdf_grid, bounds=(-1.0, 1.0), iso=0.0):
    """
    提取 iso 等值面，顶点坐标为世界坐标。
    全正或全负的网格返回空网格；网格中有 NaN 时报错。
    """
    grid = np.asarray(sdf_grid, dtype=np.float64)
    if grid.ndim != 3 or min(grid.shape) < 2:
        raise ValueError(f"SDF 网格必须是三维且每维至少 2 个点，得到 {grid.shape}")
    if np.isnan(grid).any():
        raise ValueError("SDF 网格中存在 NaN")
    if grid.min() > iso or grid.max() < iso:
        return TriMesh.empty()

    lo, hi = bounds
    spacing = tuple((hi - lo) / (n - 1) for n in grid.shape)
    verts, faces, _, _ = measure.marching_cubes(grid, level=iso, spacing=spacing, gradient_direction="ascent")
    return TriMesh(verts + lo, faces).cleaned()


def sample_surface(mesh: TriMesh, n=100_000, seed=0):
    """按面积加权在三角形上均匀采样，结果由 seed 决定。"""
    if mesh.is_empty:
        raise EmptyMeshError("空网格无法采样")
    if n < 1:
        raise ValueError("采样点数必须 >= 1")
    areas = mesh.face_areas()
    total = areas.sum()
    if total <= 0:
        raise EmptyMeshError("网格总面积为 0")
    rng = np.random.default_rng(seed)
    face_index = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))[:, None]
    r2 = rng.random(n)[:, None]
    a, b, c = (mesh.vertices[mesh.faces[face_index, i]] for i in range(3))
    return PointCloud((1 - r1) * a + r1 * (1 - r2) * b + r1 * r2 * c)


@dataclass
class ICPResult:
    rotation: np.ndarray
    translation: np.ndarray
    aligned: PointCloud
    errors: list = field(default_factory=list)

    @property
    def transform(self):
        matrix = np.eye(4)
        matrix[:3, :3] = self.rotation
        matrix[:3, 3] = self.translation
        return matrix


def rigid_fit(src, dst, rank_tol=1e-10):
    """
    Kabsch/SVD: 最小化 Σ|R src_i + t - dst_i|²。
    对应点退化 (秩 < 2) 时退回单位旋转并给出警告。
    """
    src_center = src.mean(axis=0)
    dst_center = dst.mean(axis=0)
    h = (src - src_center).T @ (dst - dst_center)
    u, s, vt = np.linalg.svd(h)
    if s[0] <= 0 or s[1] <= rank_tol * s[0]:
        logger.warning("ICP 对应点退化 (秩不足)，使用单位旋转")
        return np.eye(3), dst_center - src_center
    d = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
    rotation = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return rotation, dst_center - rotation @ src_center


def _principal_axes(points):
    centered = points - points.mean(axis=0)
    _, vecs = np.linalg.eigh(centered.T @ centered)
    return vecs[:, ::-1]


def _initial_rotations(src, dst):
    """单位旋转 + 主轴对齐的 4 个符号组合 (det = +1)。"""
    candidates = [np.eye(3)]
    ps, pd = _principal_axes(src), _principal_axes(dst)
    for signs in ((1, 1, 1), (1, -1, -1), (-1, 1, -1), (-1, -1, 1)):
        rotation = pd @ np.diag(signs) @ ps.T
        if np.linalg.det(rotation) < 0:
            rotation = pd @ np.diag([signs[0], signs[1], -signs[2]]) @ ps.T
        candidates.append(rotation)
    return candidates


def _run_icp(src, dst, tree, rotation, translation, max_iters, tol):
    errors = []
    best = (rotation, translation)
    for _ in range(max_iters + 1):
        moved = src @ rotation.T + translation
        dist, index = tree.query(moved)
        error = float(np.mean(dist ** 2))
        if errors and error > errors[-1]:
            break
        best = (rotation, translation)
        errors.append(error)
        if len(errors) > 1 and errors[-2] - error < tol:
            break
        rotation, translation = rigid_fit(src, dst[index])
    return best[0], best[1], errors


def icp_align(src: PointCloud, dst: PointCloud, max_iters=50, tol=1e-12, init="auto"):
    """
    点到点 ICP。init="auto" 时从单位旋转和主轴对齐候选分别出发，取最终误差最小者。
    返回的误差序列单调不增。
    """
    if len(src) == 0 or len(dst) == 0:
        raise EmptyMeshError("ICP 的输入点云不能为空")
    if init not in ("auto", "identity"):
        raise ValueError(f"未知的 ICP 初始化方式: {init}")
    tree = cKDTree(dst.points)
    s, d = src.points, dst.points
    starts = _initial_rotations(s, d) if init == "auto" else [np.eye(3)]

    best = None
    for i, rotation in enumerate(starts):
        # 单位旋转从零平移出发，主轴候选先对齐质心
        translation = np.zeros(3) if i == 0 else d.mean(axis=0) - rotation @ s.mean(axis=0)
        result = _run_icp(s, d, tree, rotation, translation, max_iters, tol)
        if best is None or result[2][-1] < best[2][-1]:
            best = result
    rotation, translation, errors = best
    return ICPResult(rotation, translation, src.transformed(rotation, translation), errors)
