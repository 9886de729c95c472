"""
隐式形状场 f_S、纹理场 f_T、位置编码，以及从隐向量生成两者参数的超网络。

形状场与纹理场本身没有可训练参数，参数全部由超网络按样本生成 (FieldParams)，
因此所有前向计算都是 "参数 + 点" 的纯函数。
"""
import logging
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from training.errors import ConfigError

logger = logging.getLogger(__name__)

# softplus 的 beta，足够大时接近 ReLU，但处处可导
SOFTPLUS_BETA = 100.0


@dataclass(frozen=True)
class FieldArchitecture:
    pe_freqs: int = 6
    shape_hidden: tuple[int, ...] = (64, 64, 64, 64, 32)
    texture_hidden: int = 128
    latent_dim: int = 256
    hyper_hidden: int = 512
    hyper_layers: int = 6

    def __post_init__(self):
        widths = (*self.shape_hidden, self.texture_hidden, self.latent_dim, self.hyper_hidden)
        if self.pe_freqs < 0 or any(w <= 0 for w in widths) or self.hyper_layers < 1:
            raise ConfigError([f"非法的场结构: {self}"])

    @classmethod
    def from_config(cls, config):
        return cls(
            pe_freqs=config.pe_freqs,
            shape_hidden=tuple(config.shape_hidden),
            texture_hidden=config.texture_hidden,
            latent_dim=config.latent_dim,
            hyper_hidden=config.hyper_hidden,
            hyper_layers=config.hyper_layers,
        )

    @property
    def pe_dim(self):
        return 3 + 6 * self.pe_freqs

    @property
    def feature_dim(self):
        """传给纹理场的形状特征维度 (形状 MLP 最后一个隐藏层)。"""
        return self.shape_hidden[-1]

    def shape_layer_shapes(self):
        dims = [self.pe_dim, *self.shape_hidden, 1]
        return [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]

    def texture_layer_shapes(self):
        return [(self.texture_hidden, self.pe_dim + self.feature_dim), (3, self.texture_hidden)]

    def shape_param_count(self):
        return sum(o * i + o for o, i in self.shape_layer_shapes())

    def texture_param_count(self):
        return sum(o * i + o for o, i in self.texture_layer_shapes())


@dataclass
class LatentCodes:
    shape: torch.Tensor    # (B, l)
    texture: torch.Tensor  # (B, l)

    def detach(self):
        return LatentCodes(self.shape.detach(), self.texture.detach())


@dataclass
class FieldParams:
    """
    单个 batch 的形状/纹理 MLP 参数。
    shape / texture 都是 [(W, b), ...]，W: (B, out, in)，b: (B, out)。
    """
    shape: list
    texture: list

    @property
    def batch_size(self):
        return self.shape[0][0].shape[0]

    def detach(self):
        return FieldParams(
            [(w.detach(), b.detach()) for w, b in self.shape],
            [(w.detach(), b.detach()) for w, b in self.texture],
        )

    def select(self, index):
        """取出 batch 中的一个样本 (保持 batch 维度为 1)。"""
        pick = slice(index, index + 1)
        return FieldParams(
            [(w[pick], b[pick]) for w, b in self.shape],
            [(w[pick], b[pick]) for w, b in self.texture],
        )

    def tensors(self):
        return [t for layer in (*self.shape, *self.texture) for t in layer]


def positional_encode(x, pe_freqs):
    """
    [x, sin(2^0 πx), cos(2^0 πx), ..., sin(2^{L-1} πx), cos(2^{L-1} πx)]
    每个频率先放 3 个坐标的 sin，再放 3 个坐标的 cos。输出长度 3 + 6L。
    """
    if pe_freqs < 0:
        raise ValueError("pe_freqs 必须 >= 0")
    if pe_freqs == 0:
        return x
    freqs = (2.0 ** torch.arange(pe_freqs, dtype=x.dtype, device=x.device)) * math.pi
    scaled = x[..., None, :] * freqs[:, None]
    enc = torch.cat([torch.sin(scaled), torch.cos(scaled)], dim=-1)
    return torch.cat([x, enc.flatten(-2)], dim=-1)


def _pe_freqs_from_params(theta_S):
    in_dim = theta_S[0][0].shape[-1]
    return (in_dim - 3) // 6


def _linear(h, weight, bias):
    return torch.baddbmm(bias[:, None, :], h, weight.transpose(1, 2))


def eval_shape_field(theta_S, points):
    """
    :param theta_S: FieldParams.shape
    :param points: (B, N, 3)
    :return: (sdf (B, N), 最后一个隐藏层特征 (B, N, C))
    """
    h = positional_encode(points, _pe_freqs_from_params(theta_S))
    for weight, bias in theta_S[:-1]:
        h = F.softplus(_linear(h, weight, bias), beta=SOFTPLUS_BETA)
    weight, bias = theta_S[-1]
    sdf = _linear(h, weight, bias).squeeze(-1)
    return sdf, h


def eval_texture_field(theta_T, points, shape_features):
    """
    纹理场以位置编码和形状特征为输入，输出经过 sigmoid 压到 [0, 1] 的 RGB。
    """
    pe_freqs = (theta_T[0][0].shape[-1] - shape_features.shape[-1] - 3) // 6
    h = torch.cat([positional_encode(points, pe_freqs), shape_features], dim=-1)
    for weight, bias in theta_T[:-1]:
        h = F.softplus(_linear(h, weight, bias), beta=SOFTPLUS_BETA)
    weight, bias = theta_T[-1]
    return torch.sigmoid(_linear(h, weight, bias))


def shape_sdf_fn(theta_S):
    """把 theta_S 包装成 points -> sdf 的闭包，供球面追踪和正则项使用。"""
    return lambda points: eval_shape_field(theta_S, points)[0]


def _geometric_init(shapes, radius, generator=None):
    """
    形状 MLP 的几何初始化: 初始时近似于半径为 radius 的球的 SDF。
    第一层只连接原始坐标，位置编码部分的权重为 0。
    """
    layers = []
    for k, (out_dim, in_dim) in enumerate(shapes):
        if k == len(shapes) - 1:
            weight = torch.randn(out_dim, in_dim, generator=generator) * 1e-4 + math.sqrt(math.pi) / math.sqrt(in_dim)
            bias = torch.full((out_dim,), -radius)
        else:
            weight = torch.randn(out_dim, in_dim, generator=generator) * (math.sqrt(2.0) / math.sqrt(out_dim))
            if k == 0:
                weight[:, 3:] = 0.0
            bias = torch.zeros(out_dim)
        layers.append((weight, bias))
    return layers


def _default_init(shapes, generator=None):
    layers = []
    for out_dim, in_dim in shapes:
        bound = 1.0 / math.sqrt(in_dim)
        weight = (torch.rand(out_dim, in_dim, generator=generator) * 2 - 1) * bound
        bias = (torch.rand(out_dim, generator=generator) * 2 - 1) * bound
        layers.append((weight, bias))
    return layers


class HyperHead(nn.Module):
    """一个目标层对应一个头: MLP(code) -> 展平的 (W, b)。"""

    def __init__(self, in_features, hidden, n_layers, target_shape, init_weight, init_bias):
        super().__init__()
        out_dim, in_dim = target_shape
        self.target_shape = target_shape
        dims = [in_features] + [hidden] * (n_layers - 1) + [out_dim * in_dim + out_dim]
        blocks = []
        for i in range(n_layers):
            blocks.append(nn.Linear(dims[i], dims[i + 1]))
            if i < n_layers - 1:
                blocks.append(nn.ReLU())
        self.net = nn.Sequential(*blocks)

        last = self.net[-1]
        if last.out_features != out_dim * in_dim + out_dim:
            raise ConfigError([f"超网络头输出 {last.out_features} 与目标层 {target_shape} 不匹配"])
        with torch.no_grad():
            last.weight.mul_(1e-2)
            last.bias.copy_(torch.cat([init_weight.flatten(), init_bias]))

    def forward(self, code):
        out_dim, in_dim = self.target_shape
        flat = self.net(code)
        weight = flat[:, : out_dim * in_dim].reshape(-1, out_dim, in_dim)
        bias = flat[:, out_dim * in_dim:]
        return weight, bias


class HyperNetwork(nn.Module):
    """
    超网络 H: 形状头读取 s，纹理头读取 t，每个头生成目标 MLP 一层的权重和偏置。
    """

    def __init__(self, arch: FieldArchitecture, init_radius=0.5):
        super().__init__()
        self.arch = arch
        shape_shapes = arch.shape_layer_shapes()
        texture_shapes = arch.texture_layer_shapes()
        shape_init = _geometric_init(shape_shapes, init_radius)
        texture_init = _default_init(texture_shapes)
        self.shape_heads = nn.ModuleList(
            HyperHead(arch.latent_dim, arch.hyper_hidden, arch.hyper_layers, s, w, b)
            for s, (w, b) in zip(shape_shapes, shape_init)
        )
        self.texture_heads = nn.ModuleList(
            HyperHead(arch.latent_dim, arch.hyper_hidden, arch.hyper_layers, s, w, b)
            for s, (w, b) in zip(texture_shapes, texture_init)
        )

    def forward(self, codes: LatentCodes) -> FieldParams:
        return FieldParams(
            shape=[head(codes.shape) for head in self.shape_heads],
            texture=[head(codes.texture) for head in self.texture_heads],
        )


def hypernet_forward(codes: LatentCodes, hypernet: HyperNetwork) -> FieldParams:
    params = hypernet(codes)
    expected = hypernet.arch.shape_layer_shapes() + hypernet.arch.texture_layer_shapes()
    emitted = [tuple(w.shape[1:]) for w, _ in (*params.shape, *params.texture)]
    if emitted != expected:
        raise ConfigError([f"超网络输出层形状 {emitted} 与声明的结构 {expected} 不一致"])
    return params


def sphere_fit_error(theta_S, radius, n_points=4096, generator=None):
    """在 [-1,1]^3 内均匀采样，返回 mean |f_S(x) - (|x| - r)|。"""
    ref = theta_S[0][0]
    with torch.no_grad():
        points = torch.rand(1, n_points, 3, generator=generator, dtype=ref.dtype) * 2 - 1
        points = points.to(ref.device).expand(theta_S[0][0].shape[0], -1, -1)
        sdf, _ = eval_shape_field(theta_S, points)
        target = points.norm(dim=-1) - radius
        return (sdf - target).abs().mean().item()


def pretrain_sphere(target, radius=0.5, iters=2000, tol=1e-2, lr=1e-4, n_points=4096, seed=0):
    """
    用球体 SDF 预训练形状场。
    :param target: HyperNetwork (训练超网络本身) 或 FieldParams (直接训练参数张量)
    :param radius: 球半径
    :param iters: 迭代次数，0 表示不做任何修改
    :param tol: 最终拟合误差容忍度，超出时只打警告
    :return: 更新后的 target
    """
    if radius <= 0:
        raise ValueError("radius 必须 > 0")
    if iters <= 0:
        return target

    generator = torch.Generator().manual_seed(seed)
    if isinstance(target, HyperNetwork):
        params = list(target.parameters())
        ref = params[0]
        latent_dim = target.arch.latent_dim

        def current_theta_S():
            codes = torch.randn(4, latent_dim, generator=generator, dtype=ref.dtype).to(ref.device)
            return [head(codes) for head in target.shape_heads]
    elif isinstance(target, FieldParams):
        target = FieldParams(
            [(w.detach().clone().requires_grad_(True), b.detach().clone().requires_grad_(True)) for w, b in target.shape],
            [(w.detach().clone(), b.detach().clone()) for w, b in target.texture],
        )
        params = [t for layer in target.shape for t in layer]
        ref = params[0]

        def current_theta_S():
            return target.shape
    else:
        raise TypeError(f"不支持的预训练对象: {type(target).__name__}")

    optimizer = torch.optim.Adam(params, lr=lr)
    for _ in range(iters):
        theta_S = current_theta_S()
        batch = theta_S[0][0].shape[0]
        points = (torch.rand(batch, n_points, 3, generator=generator, dtype=ref.dtype) * 2 - 1).to(ref.device)
        points.requires_grad_(True)
        sdf, _ = eval_shape_field(theta_S, points)
        norm = points.norm(dim=-1, keepdim=True).clamp_min(1e-6)
        value_loss = (sdf - (norm.squeeze(-1) - radius)).abs().mean()
        grad = torch.autograd.grad(sdf.sum(), points, create_graph=True)[0]
        grad_loss = (grad - points / norm).norm(dim=-1).mean()
        loss = value_loss + 0.1 * grad_loss
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()

    with torch.no_grad():
        error = sphere_fit_error(current_theta_S(), radius, n_points, generator)
    if error > tol:
        logger.warning(f"球体预训练未收敛: {iters} 次迭代后平均误差 {error:.4f} (容忍度 {tol:.4f})")
    else:
        logger.info(f"球体预训练完成: 平均误差 {error:.4f}")
    if isinstance(target, FieldParams):
        target = FieldParams(
            [(w.detach(), b.detach()) for w, b in target.shape],
            [(w, b) for w, b in target.texture],
        )
    return target
