"""
全部训练损失: 重建、类别度量学习、条件对抗 (非饱和 + R1)、视角循环一致性、
soft IoU 掩码损失、SDF 正则项，以及加权总损失。
"""
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils.parametrizations import spectral_norm

from model.camera import ViewPose, normalize_view
from .errors import NonFiniteLossError

# 余弦相似度中认为是零向量的模长阈值
ZERO_NORM_EPS = 1e-12


@dataclass(frozen=True)
class LossWeights:
    lambda_metric: float = 0.0
    lambda_gan: float = 0.2
    lambda_cam: float = 0.03
    lambda_sdf: float = 1.0
    soft_iou: float = 0.1

    def __post_init__(self):
        for name in self.__dataclass_fields__:
            if getattr(self, name) < 0:
                raise ValueError(f"损失权重 {name} 必须 >= 0")

    @classmethod
    def from_config(cls, config):
        return cls(
            lambda_metric=config.lambda_metric or 0.0,
            lambda_gan=config.lambda_gan,
            lambda_cam=config.lambda_cam,
            lambda_sdf=config.lambda_sdf,
            soft_iou=config.soft_iou,
        )


# 总损失中各部分对应的权重字段，recon 固定为 1
PART_WEIGHTS = {
    "recon": None,
    "metric": "lambda_metric",
    "gan": "lambda_gan",
    "cam": "lambda_cam",
    "sdf": "lambda_sdf",
    "soft_iou": "soft_iou",
}


class CategoryCenters(nn.Module):
    """可学习的类别中心 {c_k} 与温度 τ，中心直接通过梯度下降更新。"""

    def __init__(self, centers, temperature=0.3):
        super().__init__()
        if temperature <= 0:
            raise ValueError("temperature 必须 > 0")
        self.centers = nn.Parameter(centers)
        self.temperature = temperature

    @property
    def num_categories(self):
        return self.centers.shape[0]


def init_centers(num_categories, latent_dim, seed=0, temperature=0.3):
    """中心的每个分量独立服从 U[-1/√l, 1/√l]。"""
    if num_categories < 1:
        raise ValueError("类别数必须 >= 1")
    generator = torch.Generator().manual_seed(seed)
    bound = 1.0 / math.sqrt(latent_dim)
    centers = (torch.rand(num_categories, latent_dim, generator=generator) * 2 - 1) * bound
    return CategoryCenters(centers, temperature)


def _check_nonzero(x, what):
    if bool((x.norm(dim=-1) < ZERO_NORM_EPS).any()):
        raise ValueError(f"{what} 中存在零向量，余弦相似度无定义")


def cosine_similarity(a, b):
    """a·b / (|a||b|)，沿最后一维计算。"""
    _check_nonzero(a, "a")
    _check_nonzero(b, "b")
    return (a * b).sum(-1) / (a.norm(dim=-1) * b.norm(dim=-1))


def metric_loss(shape_codes, labels, centers: CategoryCenters):
    """
    基于代理 (类别中心) 的度量损失:
    mean_i -log softmax_k(cos(s_i, c_k) / τ)[y_i]
    """
    if shape_codes.shape[0] < 1:
        raise ValueError("batch 不能为空")
    _check_nonzero(shape_codes, "shape_codes")
    _check_nonzero(centers.centers, "centers")
    logits = F.normalize(shape_codes, dim=-1) @ F.normalize(centers.centers, dim=-1).T
    return F.cross_entropy(logits / centers.temperature, labels)


def recon_loss(image, image_recon):
    """4 通道图像上的均方误差 (mean 归约)。"""
    if image.shape != image_recon.shape:
        raise ValueError(f"重建损失的输入形状不一致: {tuple(image.shape)} vs {tuple(image_recon.shape)}")
    return F.mse_loss(image_recon, image)


class Discriminator(nn.Module):
    """
    5 层步长卷积判别器，所有层谱归一化，投影式类别条件:
    logit = head(φ(x)) + <embed(y), φ(x)>
    """

    def __init__(self, num_classes, channels=(32, 64, 128, 256, 256), conditional=True):
        super().__init__()
        blocks = []
        prev = 4
        for i, ch in enumerate(channels):
            stride = 2 if i < len(channels) - 1 else 1
            blocks += [spectral_norm(nn.Conv2d(prev, ch, 3, stride, 1)), nn.LeakyReLU(0.2)]
            prev = ch
        self.convs = nn.Sequential(*blocks)
        self.head = spectral_norm(nn.Linear(prev, 1))
        self.embed = spectral_norm(nn.Embedding(num_classes, prev)) if conditional else None

    def features(self, images):
        return self.convs(images).sum(dim=(2, 3))

    def forward(self, images, labels):
        feat = self.features(images)
        logit = self.head(feat).squeeze(-1)
        if self.embed is not None:
            logit = logit + (self.embed(labels) * feat).sum(-1)
        return logit

    def normalized_weights(self):
        """所有被谱归一化的权重 (已除以估计的谱范数)，reshape 成矩阵。"""
        mods = [m for m in self.modules() if hasattr(m, "parametrizations")]
        return [m.weight.reshape(m.weight.shape[0], -1) for m in mods]


def discriminator_forward(discriminator, image, label):
    return discriminator(image, label)


def r1_penalty(discriminator, real, labels, gamma=10.0):
    """(γ/2) E[|∇_x D(x)|²]，只在真实图像上计算。"""
    real = real.detach().requires_grad_(True)
    logits = discriminator(real, labels)
    if not logits.requires_grad:
        return real.new_zeros(())
    (grad,) = torch.autograd.grad(logits.sum(), real, create_graph=True, allow_unused=True)
    if grad is None:
        return real.new_zeros(())
    return 0.5 * gamma * grad.pow(2).flatten(1).sum(1).mean()


def discriminator_loss_parts(discriminator, real, real_labels, fake, fake_labels, r1_gamma=10.0):
    if real.shape[0] == 0 or fake.shape[0] == 0:
        raise ValueError("判别器损失的 batch 不能为空")
    fake = fake.detach()
    base = F.softplus(-discriminator(real, real_labels)).mean() + F.softplus(discriminator(fake, fake_labels)).mean()
    parts = {"d_base": base}
    if r1_gamma > 0:
        parts["r1"] = r1_penalty(discriminator, real, real_labels, r1_gamma)
    return parts


def gan_discriminator_loss(discriminator, real, real_labels, fake, fake_labels, r1_gamma=10.0):
    """
    -E[log σ(D(real))] - E[log(1 - σ(D(fake)))] + R1。
    fake 为 [I_recon, I_rnd] 在 batch 维上的拼接，这里会先 detach。
    """
    return sum(discriminator_loss_parts(discriminator, real, real_labels, fake, fake_labels, r1_gamma).values())


def gan_generator_loss(discriminator, fake, fake_labels):
    """非饱和生成器损失: -E[log σ(D(fake))]。"""
    return F.softplus(-discriminator(fake, fake_labels)).mean()


def camera_cycle_loss(v_sampled, v_predicted):
    """
    1 - (1/3) Σ_i cos(γ_i - γ̂_i)，每一对 (cos, sin) 先归一化，再对 batch 取平均。
    调用方负责切断到形状/纹理/渲染模块的梯度 (传入 detach 之后的图像)。
    """
    if isinstance(v_sampled, ViewPose):
        v_sampled = v_sampled.v
    a = normalize_view(v_sampled.reshape(-1, 6))
    b = normalize_view(v_predicted.reshape(-1, 6))
    per_angle = a[:, :3] * b[:, :3] + a[:, 3:] * b[:, 3:]
    return (1.0 - per_angle.mean(dim=-1)).mean()


def soft_iou_loss(pred_alpha, gt_mask):
    """
    1 - Σ(p·g) / Σ(p + g - p·g)，逐图计算后取平均；两者都全 0 时该图损失为 0。
    """
    if pred_alpha.shape != gt_mask.shape:
        raise ValueError("soft IoU 的输入形状不一致")
    if pred_alpha.dim() == 2:
        pred_alpha, gt_mask = pred_alpha[None], gt_mask[None]
    p = pred_alpha.flatten(1)
    g = gt_mask.to(p.dtype).flatten(1)
    inter = (p * g).sum(1)
    union = (p + g - p * g).sum(1)
    safe = torch.where(union > 0, union, torch.ones_like(union))
    loss = torch.where(union > 0, 1.0 - inter / safe, torch.zeros_like(union))
    return loss.mean()


def eikonal_loss(sdf_fn, points, weight_mask=None):
    """E[(|∇_x f(x)| - 1)²]，weight_mask 为 (B, N) 的近表面掩码。"""
    points = points.detach().requires_grad_(True)
    sdf = sdf_fn(points)
    (grad,) = torch.autograd.grad(sdf.sum(), points, create_graph=True)
    residual = (grad.norm(dim=-1) - 1.0) ** 2
    if weight_mask is None:
        return residual.mean()
    weight = weight_mask.to(residual.dtype)
    return (residual * weight).sum() / weight.sum().clamp_min(1.0)


def _masked_mean(values, mask):
    weight = mask.to(values.dtype)
    return (values * weight).sum() / weight.sum().clamp_min(1.0)


def sdf_regularizers(sdf_fn, rays, state, gt_mask, weights=(0.1, 1.0, 1.0), margin=0.01, near_surface=0.1):
    """
    SDF 射线正则项:
    (a) eikonal: 在最终步进位置附近 (|sdf| < near_surface) 的点上约束梯度模长为 1
    (b) 掩码外: hinge 使 min_sdf >= margin
    (c) 掩码内: hinge 使 min_sdf <= 0
    :param gt_mask: (B, R) 或 (B, H, W) 的布尔掩码
    :return: (加权和, 各部分字典)
    """
    gt_mask = gt_mask.reshape(state.min_sdf.shape).bool()
    points = state.points(rays).detach()
    near = state.sdf.detach().abs() < near_surface
    if not bool(near.any()):
        near = torch.ones_like(near)
    parts = {
        "eikonal": eikonal_loss(sdf_fn, points, near),
        "outside": _masked_mean(F.relu(margin - state.min_sdf), ~gt_mask),
        "inside": _masked_mean(F.relu(state.min_sdf), gt_mask),
    }
    w_eik, w_out, w_in = weights
    total = w_eik * parts["eikonal"] + w_out * parts["outside"] + w_in * parts["inside"]
    return total, parts


def total_loss(parts, weights: LossWeights):
    """
    L = recon + λ1 metric + λ2 gan + λ3 cam + λ4 sdf + c_iou soft_iou。
    缺失的部分按 0 处理；任何一项不是有限值都会报错并指出是哪一项。
    """
    total = None
    for name, value in parts.items():
        if name not in PART_WEIGHTS:
            continue
        value = torch.as_tensor(value)
        if not bool(torch.isfinite(value).all()):
            raise NonFiniteLossError(name)
        weight_name = PART_WEIGHTS[name]
        weight = 1.0 if weight_name is None else getattr(weights, weight_name)
        term = weight * value
        total = term if total is None else total + term
    return torch.zeros(()) if total is None else total
