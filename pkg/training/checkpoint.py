"""
Checkpoint 的保存与恢复。

一个 checkpoint 是单个 torch.save 归档: 全部模块参数、优化器状态、epoch、
配置快照、随机数状态，以及一段 JSON 元数据 (类别名、数据集、时间戳等)。
"""
import json
import logging
import os
from dataclasses import dataclass, field

import torch

from .config import config_from_sections, config_to_sections
from .errors import MCSVError

logger = logging.getLogger(__name__)

CHECKPOINT_DIRNAME = "checkpoints"
FINAL_NAME = "final.pt"


@dataclass
class Checkpoint:
    model: dict
    centers: dict
    discriminator: dict
    optimizer: dict | None = None
    optimizer_d: dict | None = None
    epoch: int = -1
    step: int = 0
    config: dict = field(default_factory=dict)
    rng: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    path: str | None = None

    @property
    def categories(self):
        return self.metadata.get("categories", [])

    def train_config(self):
        return config_from_sections(self.config)


def capture_rng(generator=None):
    state = {"torch": torch.get_rng_state()}
    if generator is not None:
        state["prior"] = generator.get_state()
    return state


def restore_rng(state, generator=None):
    if "torch" in state:
        torch.set_rng_state(state["torch"])
    if generator is not None and "prior" in state:
        generator.set_state(state["prior"])


def checkpoint_path(run_dir, epoch=None):
    name = FINAL_NAME if epoch is None else f"epoch_{epoch:04d}.pt"
    return os.path.join(run_dir, CHECKPOINT_DIRNAME, name)


def save_checkpoint(path, checkpoint: Checkpoint):
    """先写临时文件再原子替换，避免中断时留下半个 checkpoint。"""
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    payload = {
        "model": checkpoint.model,
        "centers": checkpoint.centers,
        "discriminator": checkpoint.discriminator,
        "optimizer": checkpoint.optimizer,
        "optimizer_d": checkpoint.optimizer_d,
        "epoch": checkpoint.epoch,
        "step": checkpoint.step,
        "config": checkpoint.config,
        "rng": checkpoint.rng,
        "metadata_json": json.dumps(checkpoint.metadata, ensure_ascii=False, sort_keys=True),
    }
    tmp_path = path + ".tmp"
    torch.save(payload, tmp_path)
    os.replace(tmp_path, path)
    checkpoint.path = path
    logger.info(f"checkpoint 已保存: {path}")
    return path


def load_checkpoint(path, map_location="cpu"):
    if not os.path.exists(path):
        raise MCSVError(f"checkpoint 不存在: {path}")
    try:
        payload = torch.load(path, map_location=map_location, weights_only=True)
    except Exception as e:
        raise MCSVError(f"checkpoint 读取失败: {path} ({e})") from e
    return Checkpoint(
        model=payload["model"],
        centers=payload["centers"],
        discriminator=payload["discriminator"],
        optimizer=payload.get("optimizer"),
        optimizer_d=payload.get("optimizer_d"),
        epoch=payload.get("epoch", -1),
        step=payload.get("step", 0),
        config=payload.get("config", {}),
        rng=payload.get("rng", {}),
        metadata=json.loads(payload.get("metadata_json", "{}")),
        path=path,
    )


def snapshot(state, epoch, metadata):
    """从 TrainingState 生成 Checkpoint (不写盘)。"""
    return Checkpoint(
        model=state.model.state_dict(),
        centers=state.centers.state_dict(),
        discriminator=state.discriminator.state_dict(),
        optimizer=state.optimizer.state_dict(),
        optimizer_d=state.optimizer_d.state_dict(),
        epoch=epoch,
        step=state.step,
        config=config_to_sections(state.config),
        rng=capture_rng(state.generator),
        metadata=dict(metadata),
    )


def restore_modules(checkpoint: Checkpoint, device="cpu"):
    """
    只为推理重建模型: 返回 (config, model, centers)。
    训练恢复请使用 trainer.build_training_state + restore_training_state。
    """
    from model.encoder import MCSVModel
    from .objectives import CategoryCenters

    config = checkpoint.train_config()
    model = MCSVModel.from_config(config)
    model.load_state_dict(checkpoint.model)
    centers = CategoryCenters(checkpoint.centers["centers"].clone(), config.temperature)
    model.to(device).eval()
    return config, model, centers.to(device)
