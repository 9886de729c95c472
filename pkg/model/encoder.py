import torch
from torch import nn

from .camera import ViewPredictor, resnet18_trunk
from .fields import FieldArchitecture, HyperNetwork, LatentCodes
from .renderer import RayMarcher


class ImageEncoder(nn.Module):
    """图像编码器 E: (B, 4, H, W) -> 形状隐向量 s 与纹理隐向量 t。"""

    def __init__(self, latent_dim):
        super().__init__()
        self.latent_dim = latent_dim
        self.trunk = resnet18_trunk()
        self.head = nn.Linear(512, 2 * latent_dim)

    def forward(self, images):
        shape_code, texture_code = self.head(self.trunk(images)).split(self.latent_dim, dim=-1)
        return LatentCodes(shape=shape_code, texture=texture_code)


class MCSVModel(nn.Module):
    """
    除判别器外的全部可训练模块: E, V, H, R。
    推理时只需要 encoder + hypernet。
    """

    def __init__(self, arch: FieldArchitecture, controller="learned", controller_hidden=16, max_step=0.5):
        super().__init__()
        self.arch = arch
        self.encoder = ImageEncoder(arch.latent_dim)
        self.view_predictor = ViewPredictor()
        self.hypernet = HyperNetwork(arch)
        self.marcher = RayMarcher(arch.feature_dim, controller_hidden, max_step, controller)

    @classmethod
    def from_config(cls, config):
        return cls(FieldArchitecture.from_config(config), config.controller, config.controller_hidden, config.max_step)

    def encode(self, images):
        return self.encoder(images)

    def fields(self, codes):
        return self.hypernet(codes)

    def forward(self, images):
        codes = self.encoder(images)
        return codes, self.hypernet(codes), self.view_predictor(images)

    @torch.no_grad()
    def infer_fields(self, images):
        codes = self.encoder(images)
        return codes, self.hypernet(codes)
