"""
可微渲染器: (f_S, f_T, v) -> RGBA 图像。

ray_march 用一个 LSTM 控制器预测每一步的步长，沿途记录最小 SDF；
alpha = sigmoid(-k * min_sdf)，RGB 由纹理场在最终步进位置上给出。
sphere_trace_reference 是不可学习的经典球面追踪，供数据合成和测试使用。
"""
import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .camera import ViewPose, focal_from_fov, generate_rays, sample_view_prior
from .fields import SOFTPLUS_BETA, eval_shape_field, eval_texture_field

# 光线起点在包围 [-1,1]^3 的球面上
BOUND_RADIUS = math.sqrt(3.0)


@dataclass
class MarchState:
    depth: torch.Tensor        # (B, R)
    min_sdf: torch.Tensor      # (B, R)
    sdf: torch.Tensor          # (B, R)，最终位置的 SDF
    features: torch.Tensor     # (B, R, C)，最终位置的形状特征
    hidden: tuple | None
    step: int
    depth_history: list = field(default_factory=list)

    def points(self, rays):
        return rays.origins + self.depth[..., None] * rays.directions


@dataclass
class RenderOutput:
    rgb: torch.Tensor             # (B, H, W, 3)
    alpha: torch.Tensor           # (B, H, W)
    surface_points: torch.Tensor  # (B, H*W, 3)
    hit_depth: torch.Tensor       # (B, H*W)
    min_sdf: torch.Tensor         # (B, H*W)
    state: MarchState = None
    rays: object = None

    def rgba(self, background=1.0):
        """合成到纯色背景上，返回 (B, 4, H, W)。"""
        alpha = self.alpha[..., None]
        rgb = self.rgb * alpha + background * (1.0 - alpha)
        return torch.cat([rgb, alpha], dim=-1).permute(0, 3, 1, 2)


@dataclass(frozen=True)
class RenderSettings:
    image_size: int = 64
    fov_deg: float = 30.0
    camera_distance: float = 2.7
    march_steps: int = 10
    alpha_scale: float = 30.0
    weak_perspective: bool = False
    background: float = 1.0

    @classmethod
    def from_config(cls, config):
        return cls(
            image_size=config.image_size,
            fov_deg=config.fov_deg,
            camera_distance=config.camera_distance,
            march_steps=config.march_steps,
            alpha_scale=config.alpha_scale,
            weak_perspective=config.weak_perspective,
            background=config.background,
        )

    @property
    def focal(self):
        return focal_from_fov(self.image_size, self.fov_deg)


def composite_target(images, background=1.0):
    """把数据集中的 RGBA 图像 (B, 4, H, W) 按同样的方式合成到背景上。"""
    rgb, alpha = images[:, :3], images[:, 3:4]
    return torch.cat([rgb * alpha + background * (1.0 - alpha), alpha], dim=1)


class RayMarcher(nn.Module):
    """
    可学习的光线步进控制器 R(θ_R)。
    learned: step = clamp(softplus(sdf + Δ), 0, max_step)，Δ 由 LSTM 给出并初始化为 0
    sphere:  step = clamp(sdf, 0, max_step)，即经典球面追踪
    """

    def __init__(self, feature_dim, hidden=16, max_step=0.5, controller="learned"):
        super().__init__()
        if controller not in ("learned", "sphere"):
            raise ValueError(f"未知的步长控制器: {controller}")
        self.feature_dim = feature_dim
        self.max_step = max_step
        self.controller = controller
        self.cell = nn.LSTMCell(1 + feature_dim, hidden)
        self.head = nn.Linear(hidden, 1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def step_length(self, sdf, features, hidden):
        if self.controller == "sphere":
            return sdf.clamp(0.0, self.max_step), hidden
        inputs = torch.cat([sdf[..., None], features], dim=-1).reshape(-1, 1 + self.feature_dim)
        h, c = self.cell(inputs, hidden)
        delta = self.head(h).reshape(sdf.shape)
        step = F.softplus(sdf + delta, beta=SOFTPLUS_BETA).clamp(max=self.max_step)
        return step, (h, c)


def _as_field(theta_S, feature_dim):
    """theta_S 可以是超网络生成的参数，也可以是 points -> sdf 的解析函数。"""
    if callable(theta_S):
        def field_fn(points):
            sdf = theta_S(points)
            return sdf, points.new_zeros(*sdf.shape, feature_dim)
        return field_fn
    return lambda points: eval_shape_field(theta_S, points)


def start_depth(rays, bound_radius=BOUND_RADIUS):
    centers_dist = rays.origins.norm(dim=-1)
    return (centers_dist - bound_radius).clamp_min(0.0)


def ray_march(theta_S, rays, marcher: RayMarcher, n_steps):
    """
    :param theta_S: FieldParams.shape 或解析 SDF 函数
    :param rays: RayBundle
    :param marcher: RayMarcher (θ_R)
    :param n_steps: 步进次数 (>= 1)
    :return: MarchState
    """
    if n_steps < 1:
        raise ValueError("n_steps 必须 >= 1")
    field_fn = _as_field(theta_S, marcher.feature_dim)
    depth = start_depth(rays)
    sdf, features = field_fn(rays.origins + depth[..., None] * rays.directions)
    min_sdf = sdf
    hidden = None
    history = [depth]
    for _ in range(n_steps):
        step, hidden = marcher.step_length(sdf, features, hidden)
        depth = depth + step
        history.append(depth)
        sdf, features = field_fn(rays.origins + depth[..., None] * rays.directions)
        min_sdf = torch.minimum(min_sdf, sdf)
    return MarchState(depth=depth, min_sdf=min_sdf, sdf=sdf, features=features,
                      hidden=hidden, step=n_steps, depth_history=history)


@torch.no_grad()
def sphere_trace_reference(sdf_fn, rays, max_steps=128, eps=1e-4, bound_radius=BOUND_RADIUS):
    """
    经典球面追踪: 每步前进当前点的 SDF 值。
    :param sdf_fn: points (B, R, 3) -> sdf (B, R)
    :return: (hit_depth (B, R), hit_mask (B, R))
    """
    if eps <= 0:
        raise ValueError("eps 必须 > 0")
    depth = start_depth(rays, bound_radius)
    far = rays.origins.norm(dim=-1) + bound_radius
    sdf = sdf_fn(rays.origins + depth[..., None] * rays.directions)
    for _ in range(max_steps):
        active = (sdf.abs() >= eps) & (depth < far)
        if not bool(active.any()):
            break
        depth = torch.where(active, depth + sdf, depth)
        sdf = sdf_fn(rays.origins + depth[..., None] * rays.directions)
    hit = (sdf.abs() < eps) & (depth < far)
    return depth, hit


def render(params, pose: ViewPose, marcher: RayMarcher, settings: RenderSettings):
    """
    :param params: FieldParams (θ_S, θ_T)
    :param pose: ViewPose
    :return: RenderOutput
    """
    size = settings.image_size
    rays = generate_rays(pose, size, settings.focal, settings.camera_distance, settings.weak_perspective)
    state = ray_march(params.shape, rays, marcher, settings.march_steps)
    surface = state.points(rays)
    rgb = eval_texture_field(params.texture, surface, state.features)
    alpha = torch.sigmoid(-settings.alpha_scale * state.min_sdf)
    batch = rgb.shape[0]
    return RenderOutput(
        rgb=rgb.reshape(batch, size, size, 3),
        alpha=alpha.reshape(batch, size, size),
        surface_points=surface,
        hit_depth=state.depth,
        min_sdf=state.min_sdf,
        state=state,
        rays=rays,
    )


def render_random_view(params, prior, generator, marcher: RayMarcher, settings: RenderSettings):
    """
    从先验中采样视角 v' 并渲染 I_rnd。
    :return: (RenderOutput, ViewPose, 欧拉角 (B, 3)，单位度)
    """
    pose, euler_deg = sample_view_prior(prior, generator, params.batch_size, settings.camera_distance)
    dtype = params.shape[0][0].dtype
    device = params.shape[0][0].device
    pose = ViewPose(pose.v.to(dtype=dtype, device=device), pose.rotation.to(dtype=dtype, device=device),
                    pose.camera_distance)
    return render(params, pose, marcher, settings), pose, euler_deg
