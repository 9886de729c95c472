"""
解析几何体: 有符号距离函数 (torch)、真值网格 (trimesh) 与程序化纹理。

所有几何体以原点为中心、y 轴为对称轴，包围半径不超过 0.6，保证完全落在单位立方体内。
"""
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import trimesh

PRIMITIVE_KINDS = ("sphere", "box", "cylinder", "torus", "cone")

# 每种几何体的尺寸采样范围
SIZE_RANGES = {
    "sphere": {"radius": (0.35, 0.55)},
    "box": {"hx": (0.2, 0.34), "hy": (0.2, 0.34), "hz": (0.2, 0.34)},
    "cylinder": {"radius": (0.2, 0.35), "half_height": (0.2, 0.45)},
    "torus": {"major": (0.3, 0.42), "minor": (0.08, 0.16)},
    "cone": {"half_height": (0.25, 0.42), "radius": (0.25, 0.42)},
}

MAX_BOUND_RADIUS = 0.6

# trimesh 的旋转体以 z 为轴，这里统一转到 y 轴
_Z_TO_Y = trimesh.transformations.rotation_matrix(-math.pi / 2, [1, 0, 0])


@dataclass(frozen=True)
class PrimitiveSpec:
    kind: str
    sizes: dict = field(default_factory=dict)
    texture_seed: int = 0

    def __post_init__(self):
        if self.kind not in PRIMITIVE_KINDS:
            raise ValueError(f"不支持的几何体类型: {self.kind}")
        missing = set(SIZE_RANGES[self.kind]) - set(self.sizes)
        if missing:
            raise ValueError(f"{self.kind} 缺少尺寸参数: {sorted(missing)}")
        if any(v <= 0 for v in self.sizes.values()):
            raise ValueError(f"{self.kind} 的尺寸必须为正: {self.sizes}")
        if self.bound_radius() > MAX_BOUND_RADIUS + 1e-9:
            raise ValueError(f"{self.kind} 超出单位立方体: 包围半径 {self.bound_radius():.3f}")

    def bound_radius(self):
        s = self.sizes
        if self.kind == "sphere":
            return s["radius"]
        if self.kind == "box":
            return math.sqrt(s["hx"] ** 2 + s["hy"] ** 2 + s["hz"] ** 2)
        if self.kind == "cylinder":
            return math.hypot(s["radius"], s["half_height"])
        if self.kind == "torus":
            return s["major"] + s["minor"]
        return math.hypot(s["radius"], s["half_height"])

    def to_dict(self):
        return {"kind": self.kind, "sizes": dict(self.sizes), "texture_seed": self.texture_seed}


def sample_primitive(kind, rng: np.random.Generator, texture_seed):
    """在该类型的尺寸范围内均匀采样一个实例。"""
    if kind not in SIZE_RANGES:
        raise ValueError(f"不支持的几何体类型: {kind}")
    sizes = {name: float(rng.uniform(lo, hi)) for name, (lo, hi) in SIZE_RANGES[kind].items()}
    return PrimitiveSpec(kind=kind, sizes=sizes, texture_seed=int(texture_seed))


def _length2(a, b):
    return torch.sqrt(a ** 2 + b ** 2)


def sdf_sphere(p, radius):
    return p.norm(dim=-1) - radius


def sdf_box(p, half_extents):
    b = torch.as_tensor(half_extents, dtype=p.dtype, device=p.device)
    q = p.abs() - b
    outside = q.clamp_min(0.0).norm(dim=-1)
    inside = q.max(dim=-1).values.clamp_max(0.0)
    return outside + inside


def sdf_cylinder(p, radius, half_height):
    dx = _length2(p[..., 0], p[..., 2]) - radius
    dy = p[..., 1].abs() - half_height
    outside = _length2(dx.clamp_min(0.0), dy.clamp_min(0.0))
    return outside + torch.maximum(dx, dy).clamp_max(0.0)


def sdf_torus(p, major, minor):
    qx = _length2(p[..., 0], p[..., 2]) - major
    return _length2(qx, p[..., 1]) - minor


def sdf_cone(p, radius, half_height):
    """底面半径 radius 位于 y = -h，顶点位于 y = +h 的圆锥 (精确距离)。"""
    qx = _length2(p[..., 0], p[..., 2])
    qy = p[..., 1]
    h, r1 = half_height, radius
    # 侧母线方向 k2 = (r2 - r1, 2h)，r2 = 0
    k2x, k2y = -r1, 2.0 * h
    ca_x = qx - torch.minimum(qx, torch.where(qy < 0, torch.full_like(qx, r1), torch.zeros_like(qx)))
    ca_y = qy.abs() - h
    t = (((0.0 - qx) * k2x + (h - qy) * k2y) / (k2x ** 2 + k2y ** 2)).clamp(0.0, 1.0)
    cb_x = qx + k2x * t
    cb_y = qy - h + k2y * t
    sign = torch.where((cb_x < 0) & (ca_y < 0), -torch.ones_like(qx), torch.ones_like(qx))
    return sign * torch.sqrt(torch.minimum(ca_x ** 2 + ca_y ** 2, cb_x ** 2 + cb_y ** 2))


def primitive_sdf(spec: PrimitiveSpec):
    """返回 points (..., 3) -> sdf (...) 的解析函数。"""
    s = spec.sizes
    if spec.kind == "sphere":
        return lambda p: sdf_sphere(p, s["radius"])
    if spec.kind == "box":
        return lambda p: sdf_box(p, (s["hx"], s["hy"], s["hz"]))
    if spec.kind == "cylinder":
        return lambda p: sdf_cylinder(p, s["radius"], s["half_height"])
    if spec.kind == "torus":
        return lambda p: sdf_torus(p, s["major"], s["minor"])
    return lambda p: sdf_cone(p, s["radius"], s["half_height"])


def primitive_mesh(spec: PrimitiveSpec) -> trimesh.Trimesh:
    """与解析 SDF 对应的真值网格，仅供评估使用。"""
    s = spec.sizes
    if spec.kind == "sphere":
        return trimesh.creation.icosphere(subdivisions=5, radius=s["radius"])
    if spec.kind == "box":
        return trimesh.creation.box(extents=[2 * s["hx"], 2 * s["hy"], 2 * s["hz"]])
    if spec.kind == "cylinder":
        mesh = trimesh.creation.cylinder(radius=s["radius"], height=2 * s["half_height"], sections=96)
    elif spec.kind == "torus":
        mesh = trimesh.creation.torus(major_radius=s["major"], minor_radius=s["minor"],
                                      major_sections=96, minor_sections=48)
    else:
        mesh = trimesh.creation.cone(radius=s["radius"], height=2 * s["half_height"], sections=96)
        mesh.apply_translation([0.0, 0.0, -s["half_height"]])
    mesh.apply_transform(_Z_TO_Y)
    return mesh


def texture_colors(spec: PrimitiveSpec):
    """由 texture_seed 确定的底色与条纹色。"""
    rng = np.random.default_rng(spec.texture_seed)
    base = rng.uniform(0.2, 0.9, size=3)
    stripe = np.clip(base * rng.uniform(0.4, 0.7), 0.0, 1.0)
    frequency = float(rng.integers(2, 6))
    return base, stripe, frequency


def primitive_texture(spec: PrimitiveSpec):
    """points (..., 3) -> rgb (..., 3)，沿 y 轴的条纹纹理。"""
    base, stripe, frequency = texture_colors(spec)

    def color_fn(p):
        base_t = torch.as_tensor(base, dtype=p.dtype, device=p.device)
        stripe_t = torch.as_tensor(stripe, dtype=p.dtype, device=p.device)
        mix = (torch.sin(frequency * math.pi * p[..., 1]) > 0).to(p.dtype)[..., None]
        return base_t * (1 - mix) + stripe_t * mix

    return color_fn
