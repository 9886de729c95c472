"""
视角表示、先验采样与光线生成。

约定:
- 视角向量 v = [cos γ1, cos γ2, cos γ3, sin γ1, sin γ2, sin γ3]
- γ1 为仰角 (绕 X 轴)，γ2 为方位角 (绕 Y 轴)，γ3 为倾斜角 (绕 Z 轴)
- R = Rz(γ3) · Ry(γ2) · Rx(γ1)，x_cam = R · x_world + (0, 0, d)
- 相机看向 +z，图像 y 轴向下 (OpenCV)，相机中心 c = -Rᵀ (0, 0, d)
"""
import math
from dataclasses import dataclass

import torch
import torchvision
from torch import nn

from training.errors import DegenerateViewError

# (cos, sin) 对的最小模长，低于它认为无法归一化
DEGENERATE_EPS = 1e-8


@dataclass
class ViewPose:
    v: torch.Tensor          # (B, 6)
    rotation: torch.Tensor   # (B, 3, 3)
    camera_distance: float

    @property
    def batch_size(self):
        return self.v.shape[0]

    def detach(self):
        return ViewPose(self.v.detach(), self.rotation.detach(), self.camera_distance)


@dataclass(frozen=True)
class ViewPrior:
    """视角先验，所有角度单位为度。"""
    azimuth_lo: float = 0.0
    azimuth_hi: float = 360.0
    elevation_dist: str = "uniform"
    elevation_lo: float = 20.0
    elevation_hi: float = 40.0
    elevation_mean: float = 30.0
    elevation_std: float = 0.0
    tilt_dist: str = "fixed"
    tilt_lo: float = 0.0
    tilt_hi: float = 0.0
    tilt_mean: float = 0.0
    tilt_std: float = 0.0

    def __post_init__(self):
        if self.azimuth_lo > self.azimuth_hi or self.elevation_lo > self.elevation_hi or self.tilt_lo > self.tilt_hi:
            raise ValueError(f"视角先验的区间顺序错误: {self}")
        if self.elevation_std < 0 or self.tilt_std < 0:
            raise ValueError("视角先验的标准差必须 >= 0")

    @classmethod
    def from_config(cls, config):
        return cls(**{name: getattr(config, name) for name in cls.__dataclass_fields__})

    @classmethod
    def point_mass(cls, elevation, azimuth, tilt=0.0):
        return cls(azimuth_lo=azimuth, azimuth_hi=azimuth, elevation_lo=elevation, elevation_hi=elevation,
                   tilt_dist="fixed", tilt_lo=tilt, tilt_hi=tilt)

    def contains(self, euler_deg, atol=1e-6):
        """只检查均匀/固定分量的硬边界 (高斯分量无界)。"""
        elevation, azimuth, tilt = euler_deg
        ok = self.azimuth_lo - atol <= azimuth <= self.azimuth_hi + atol
        if self.elevation_dist == "uniform":
            ok = ok and self.elevation_lo - atol <= elevation <= self.elevation_hi + atol
        if self.tilt_dist != "gaussian":
            ok = ok and self.tilt_lo - atol <= tilt <= self.tilt_hi + atol
        return ok


@dataclass
class RayBundle:
    origins: torch.Tensor     # (B, H*W, 3)
    directions: torch.Tensor  # (B, H*W, 3)，单位向量
    pixels: torch.Tensor      # (H*W, 2)，像素中心 (u, v)
    image_size: int


def _axis_rotations(cos, sin):
    """由 (B, 3) 的 cos/sin 组装 Rz·Ry·Rx。"""
    one = torch.ones_like(cos[:, 0])
    zero = torch.zeros_like(cos[:, 0])
    c1, c2, c3 = cos.unbind(-1)
    s1, s2, s3 = sin.unbind(-1)
    rx = torch.stack([one, zero, zero, zero, c1, -s1, zero, s1, c1], -1).reshape(-1, 3, 3)
    ry = torch.stack([c2, zero, s2, zero, one, zero, -s2, zero, c2], -1).reshape(-1, 3, 3)
    rz = torch.stack([c3, -s3, zero, s3, c3, zero, zero, zero, one], -1).reshape(-1, 3, 3)
    return rz @ ry @ rx


def normalize_view(v):
    """把每一对 (cos γi, sin γi) 归一化到单位长度，退化对直接报错。"""
    cos, sin = v[..., :3], v[..., 3:]
    norm = torch.sqrt(cos ** 2 + sin ** 2)
    if bool((norm < DEGENERATE_EPS).any()):
        raise DegenerateViewError("视角向量中存在 (cos, sin) 均接近 0 的退化对")
    return torch.cat([cos / norm, sin / norm], dim=-1)


def view_to_rotation(v):
    """
    :param v: (B, 6) 或 (6,) 未归一化的视角向量
    :return: (B, 3, 3) 或 (3, 3) 旋转矩阵
    """
    squeeze = v.dim() == 1
    v = normalize_view(v.reshape(-1, 6))
    rotation = _axis_rotations(v[:, :3], v[:, 3:])
    return rotation[0] if squeeze else rotation


def angles_to_view(gamma, camera_distance=2.7):
    """
    :param gamma: (B, 3) 或 (3,) 欧拉角 (弧度)
    :return: ViewPose
    """
    gamma = torch.as_tensor(gamma, dtype=torch.get_default_dtype()) if not torch.is_tensor(gamma) else gamma
    gamma = gamma.reshape(-1, 3)
    v = torch.cat([torch.cos(gamma), torch.sin(gamma)], dim=-1)
    return ViewPose(v=v, rotation=_axis_rotations(v[:, :3], v[:, 3:]), camera_distance=camera_distance)


def view_to_angles(v):
    """视角向量 -> 欧拉角 (弧度，范围 (-π, π])。"""
    v = normalize_view(v.reshape(-1, 6))
    return torch.atan2(v[:, 3:], v[:, :3])


def pose_from_view(v, camera_distance):
    return ViewPose(v=v, rotation=view_to_rotation(v), camera_distance=camera_distance)


def euler_deg_to_gamma(euler_deg):
    """[仰角, 方位角, 倾斜角] (度) -> γ (弧度)。"""
    return torch.deg2rad(torch.as_tensor(euler_deg, dtype=torch.get_default_dtype()))


def sample_view_prior(prior: ViewPrior, generator, batch_size=1, camera_distance=2.7):
    """
    从先验中独立采样方位角、仰角和倾斜角。随机数完全由 generator 决定。
    :return: (ViewPose, (B, 3) 的欧拉角，单位度)
    """
    def uniform(lo, hi):
        return lo + (hi - lo) * torch.rand(batch_size, generator=generator, dtype=torch.float64)

    def gaussian(mean, std):
        return mean + std * torch.randn(batch_size, generator=generator, dtype=torch.float64)

    azimuth = uniform(prior.azimuth_lo, prior.azimuth_hi)
    if prior.elevation_dist == "gaussian":
        elevation = gaussian(prior.elevation_mean, prior.elevation_std)
    else:
        elevation = uniform(prior.elevation_lo, prior.elevation_hi)
    if prior.tilt_dist == "gaussian":
        tilt = gaussian(prior.tilt_mean, prior.tilt_std)
    elif prior.tilt_dist == "uniform":
        tilt = uniform(prior.tilt_lo, prior.tilt_hi)
    else:
        tilt = torch.full((batch_size,), float(prior.tilt_lo), dtype=torch.float64)

    euler_deg = torch.stack([elevation, azimuth, tilt], dim=-1)
    gamma = torch.deg2rad(euler_deg).to(torch.get_default_dtype())
    return angles_to_view(gamma, camera_distance), euler_deg


def focal_from_fov(image_size, fov_deg):
    return (image_size / 2.0) / math.tan(math.radians(fov_deg) / 2.0)


def generate_rays(pose: ViewPose, image_size, focal, camera_distance=None, weak_perspective=False):
    """
    针孔相机: 相机位于旋转后的光轴上距原点 camera_distance 处，看向原点。
    弱透视模式下所有光线平行于光轴，像平面按 camera_distance / focal 缩放。
    """
    if focal <= 0:
        raise ValueError("focal 必须 > 0")
    distance = pose.camera_distance if camera_distance is None else camera_distance
    rotation = pose.rotation
    dtype, device = rotation.dtype, rotation.device
    batch = rotation.shape[0]

    coords = torch.arange(image_size, dtype=dtype, device=device) + 0.5
    vv, uu = torch.meshgrid(coords, coords, indexing="ij")
    pixels = torch.stack([uu.flatten(), vv.flatten()], dim=-1)
    x = (pixels[:, 0] - image_size / 2.0) / focal
    y = (pixels[:, 1] - image_size / 2.0) / focal

    rot_t = rotation.transpose(1, 2)
    center = -(rot_t @ torch.tensor([0.0, 0.0, distance], dtype=dtype, device=device))  # (B, 3)
    if weak_perspective:
        offsets = torch.stack([x * distance, y * distance, torch.zeros_like(x)], dim=-1)
        origins = center[:, None, :] + offsets[None] @ rotation
        axis = rot_t[:, :, 2]
        directions = axis[:, None, :].expand(-1, pixels.shape[0], -1)
    else:
        local = torch.stack([x, y, torch.ones_like(x)], dim=-1)
        local = local / local.norm(dim=-1, keepdim=True)
        directions = local[None] @ rotation
        origins = center[:, None, :].expand(-1, pixels.shape[0], -1)
    return RayBundle(origins=origins, directions=directions, pixels=pixels, image_size=image_size)


def resnet18_trunk(in_channels=4):
    """4 通道 (RGB + 掩码) 输入的 ResNet-18 主干，输出 512 维特征。"""
    net = torchvision.models.resnet18(weights=None)
    net.conv1 = nn.Conv2d(in_channels, 64, kernel_size=7, stride=2, padding=3, bias=False)
    net.fc = nn.Identity()
    return net


class ViewPredictor(nn.Module):
    """视角预测网络 V(I; θ_V)，输出未归一化的 6 维视角向量。"""

    def __init__(self):
        super().__init__()
        self.trunk = resnet18_trunk()
        self.head = nn.Linear(512, 6)
        with torch.no_grad():
            # 初始输出接近 γ = 0，避免一开始就出现退化的 (cos, sin) 对
            self.head.weight.mul_(1e-2)
            self.head.bias.copy_(torch.tensor([1.0, 1.0, 1.0, 0.0, 0.0, 0.0]))

    def forward(self, images):
        return self.head(self.trunk(images))


def predict_view(images, view_predictor):
    """
    :param images: (B, 4, H, W)，取值 [0, 1]
    :return: (B, 6) 原始视角向量，归一化留给 view_to_rotation
    """
    return view_predictor(images)
