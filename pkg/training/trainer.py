"""
交替训练循环: 重建步 (E, V, H, R 与类别中心) 与对抗步 (只更新判别器)。

已知视角模式 (trainer.camera_supervised) 下改用 multiview_step: 使用真值视角渲染，
不使用视角预测器与对抗正则，可选地对一部分物体加上第二视角的重建监督。
"""
import logging
import math
import os
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import datetime

import torch
from tqdm import tqdm

from datakit.loader import load_batch, load_posed_batch, num_batches
from datakit.manifest import DatasetManifest
from model.camera import ViewPrior, pose_from_view
from model.encoder import MCSVModel
from model.fields import pretrain_sphere, shape_sdf_fn
from model.renderer import RenderSettings, composite_target, render, render_random_view
from .checkpoint import checkpoint_path, load_checkpoint, restore_rng, save_checkpoint, snapshot
from .errors import ConfigError, DatasetError, NonFiniteLossError, TrainingDivergedError
from .logbook import LossLog
from .objectives import (
    Discriminator,
    LossWeights,
    camera_cycle_loss,
    discriminator_loss_parts,
    gan_generator_loss,
    init_centers,
    metric_loss,
    recon_loss,
    sdf_regularizers,
    soft_iou_loss,
    total_loss,
)

logger = logging.getLogger(__name__)


@dataclass
class TrainingState:
    config: object
    model: MCSVModel
    centers: object
    discriminator: Discriminator
    optimizer: torch.optim.Optimizer
    optimizer_d: torch.optim.Optimizer
    prior: ViewPrior
    settings: RenderSettings
    weights: LossWeights
    generator: torch.Generator
    step: int = 0
    last_fakes: tuple | None = field(default=None, repr=False)

    def generator_parameters(self):
        return [*self.model.parameters(), *self.centers.parameters()]


def build_training_state(config, num_categories, device="cpu"):
    """
    按配置构建全部模块和两个 Adam 优化器 (同一学习率，无权重衰减，无学习率调度)。
    判别器在独立的随机数上下文中初始化，λ2 = 0 时训练结果与判别器初始化无关。
    """
    torch.manual_seed(config.seed)
    model = MCSVModel.from_config(config).to(device)
    centers = init_centers(num_categories, config.latent_dim, seed=config.seed,
                           temperature=config.temperature).to(device)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed + 1)
        discriminator = Discriminator(num_categories, conditional=config.conditional_discriminator).to(device)

    betas = (config.adam_beta1, config.adam_beta2)
    optimizer = torch.optim.Adam([*model.parameters(), *centers.parameters()], lr=config.learning_rate, betas=betas)
    optimizer_d = torch.optim.Adam(discriminator.parameters(), lr=config.learning_rate, betas=betas)
    return TrainingState(
        config=config,
        model=model,
        centers=centers,
        discriminator=discriminator,
        optimizer=optimizer,
        optimizer_d=optimizer_d,
        prior=ViewPrior.from_config(config),
        settings=RenderSettings.from_config(config),
        weights=LossWeights.from_config(config),
        generator=torch.Generator().manual_seed(config.seed),
    )


@contextmanager
def frozen(module):
    """临时关闭梯度并切到 eval 模式 (谱归一化的幂迭代缓冲区也保持不变)。"""
    flags = [p.requires_grad for p in module.parameters()]
    was_training = module.training
    module.requires_grad_(False)
    module.eval()
    try:
        yield module
    finally:
        for p, flag in zip(module.parameters(), flags):
            p.requires_grad_(flag)
        module.train(was_training)


def _scalar_parts(parts):
    return {name: float(value.detach()) if torch.is_tensor(value) else float(value) for name, value in parts.items()}


def _render_losses(params, pose, images, state: TrainingState):
    """单个视角上的重建、soft IoU 与 SDF 正则项。"""
    cfg = state.config
    out = render(params, pose, state.model.marcher, state.settings)
    rendered = out.rgba(state.settings.background)
    target = composite_target(images, state.settings.background)
    gt_mask = images[:, 3] > 0.5
    sdf_total, sdf_parts = sdf_regularizers(
        shape_sdf_fn(params.shape), out.rays, out.state, gt_mask,
        weights=(cfg.eikonal_weight, cfg.outside_weight, cfg.inside_weight),
        margin=cfg.outside_margin,
    )
    parts = {
        "recon": recon_loss(target, rendered),
        "soft_iou": soft_iou_loss(out.alpha, gt_mask),
        "sdf": sdf_total,
    }
    return parts, sdf_parts, rendered


def _step(optimizer, loss):
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()


def reconstruction_step(batch, state: TrainingState):
    """
    编码 -> (s, t, v)，在预测视角下渲染 I_recon，在先验采样视角 v' 下渲染 I_rnd，
    计算总损失 (判别器冻结) 并对 E, V, H, R 和类别中心做一步优化。
    视角循环损失只经过视角预测器: 渲染图像和目标视角都被 detach。
    :return: 各损失分项 (float)
    """
    model, weights, settings = state.model, state.weights, state.settings
    model.train()
    codes = model.encode(batch.images)
    params = model.fields(codes)
    v = model.view_predictor(batch.images)
    pose = pose_from_view(v, settings.camera_distance)

    parts, sdf_parts, recon_img = _render_losses(params, pose, batch.images, state)
    if weights.lambda_metric > 0:
        parts["metric"] = metric_loss(codes.shape, batch.labels, state.centers)

    rnd_out, rnd_pose, _ = render_random_view(params, state.prior, state.generator, model.marcher, settings)
    rnd_img = rnd_out.rgba(settings.background)
    fake = torch.cat([recon_img, rnd_img])
    fake_labels = torch.cat([batch.labels, batch.labels])
    if weights.lambda_gan > 0:
        with frozen(state.discriminator):
            parts["gan"] = gan_generator_loss(state.discriminator, fake, fake_labels)
    if weights.lambda_cam > 0:
        v_recon = model.view_predictor(recon_img.detach())
        v_rnd = model.view_predictor(rnd_img.detach())
        parts["cam"] = 0.5 * (camera_cycle_loss(v.detach(), v_recon) + camera_cycle_loss(rnd_pose.v, v_rnd))

    loss = total_loss(parts, weights)
    _step(state.optimizer, loss)
    state.last_fakes = (fake.detach(), fake_labels)

    logged = _scalar_parts({**parts, **{f"sdf_{k}": v for k, v in sdf_parts.items()}})
    logged["total"] = float(loss.detach())
    return logged


def adversarial_step(batch, state: TrainingState):
    """
    只更新判别器。假图像优先复用上一次重建步 detach 后的 [I_recon, I_rnd]，
    没有时在 no_grad 下重新生成。λ2 = 0 时整个步骤跳过。
    :return: 判别器损失分项
    """
    weights, settings = state.weights, state.settings
    if weights.lambda_gan == 0:
        return {}
    if state.last_fakes is not None and state.last_fakes[0].shape[0] == 2 * len(batch):
        fake, fake_labels = state.last_fakes
    else:
        with torch.no_grad():
            model = state.model
            codes = model.encode(batch.images)
            params = model.fields(codes)
            pose = pose_from_view(model.view_predictor(batch.images), settings.camera_distance)
            recon_img = render(params, pose, model.marcher, settings).rgba(settings.background)
            rnd_img = render_random_view(params, state.prior, state.generator, model.marcher,
                                         settings)[0].rgba(settings.background)
            fake = torch.cat([recon_img, rnd_img])
            fake_labels = torch.cat([batch.labels, batch.labels])

    state.discriminator.train()
    real = composite_target(batch.images, settings.background)
    parts = discriminator_loss_parts(state.discriminator, real, batch.labels, fake, fake_labels,
                                     state.config.r1_gamma)
    loss = weights.lambda_gan * sum(parts.values())
    if not bool(torch.isfinite(loss)):
        raise NonFiniteLossError("discriminator")
    _step(state.optimizer_d, loss)
    state.last_fakes = None
    logged = _scalar_parts(parts)
    logged["d_total"] = float(loss.detach())
    return logged


def multiview_step(batch, state: TrainingState):
    """
    已知视角模式: 用真值视角渲染，不使用视角预测器和对抗正则。
    batch 中带有第二视角的物体再加上第二视角上的重建监督。
    """
    model, weights, settings = state.model, state.weights, state.settings
    model.train()
    codes = model.encode(batch.images)
    params = model.fields(codes)
    parts, sdf_parts, _ = _render_losses(params, batch.poses, batch.images, state)

    if batch.second_images is not None:
        if batch.second_poses is None or batch.second_index is None:
            raise DatasetError("第二视角缺少对应的真值视角")
        index = batch.second_index
        second_params = type(params)(
            [(w[index], b[index]) for w, b in params.shape],
            [(w[index], b[index]) for w, b in params.texture],
        )
        second_parts, _, _ = _render_losses(second_params, batch.second_poses, batch.second_images, state)
        for name, value in second_parts.items():
            parts[name] = parts[name] + value
    if weights.lambda_metric > 0:
        parts["metric"] = metric_loss(codes.shape, batch.labels, state.centers)

    loss = total_loss(parts, weights)
    _step(state.optimizer, loss)
    logged = _scalar_parts({**parts, **{f"sdf_{k}": v for k, v in sdf_parts.items()}})
    logged["second_views"] = 0 if batch.second_index is None else int(batch.second_index.numel())
    logged["total"] = float(loss.detach())
    return logged


def configure_determinism(strict):
    if strict:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")
    else:
        torch.use_deterministic_algorithms(False)


def check_dataset(config):
    """在任何计算之前校验数据集。"""
    if not config.dataset_root:
        raise ConfigError(["data.dataset_root 未设置"])
    manifest = DatasetManifest.load(config.dataset_root)
    train_records = manifest.split_records("train", primary_only=True)
    if not train_records:
        raise DatasetError(f"数据集 {config.dataset_root} 中没有训练样本")
    size = manifest.meta.get("image_size")
    if size is not None and size != config.image_size:
        raise DatasetError(f"数据集图片尺寸 {size} 与 data.image_size={config.image_size} 不一致")
    return manifest


def restore_training_state(state: TrainingState, checkpoint):
    state.model.load_state_dict(checkpoint.model)
    state.centers.load_state_dict(checkpoint.centers)
    state.discriminator.load_state_dict(checkpoint.discriminator)
    if checkpoint.optimizer is not None:
        state.optimizer.load_state_dict(checkpoint.optimizer)
    if checkpoint.optimizer_d is not None:
        state.optimizer_d.load_state_dict(checkpoint.optimizer_d)
    restore_rng(checkpoint.rng, state.generator)
    state.step = checkpoint.step
    return checkpoint.epoch + 1


def train(config, run_dir, resume=None, manifest=None):
    """
    完整训练: 球体预训练 -> epochs 轮交替优化，定期和最后各写一次 checkpoint。
    :param resume: 从该 checkpoint 继续 (恢复参数、优化器、epoch 与随机数状态)
    :return: 最终的 Checkpoint
    """
    if config.lambda_metric is None:
        raise ConfigError(["loss.lambda_metric 未设置"])
    manifest = manifest or check_dataset(config)
    configure_determinism(config.strict)

    device = torch.device(config.device)
    state = build_training_state(config, manifest.num_categories, device)
    metadata = {
        "categories": manifest.categories,
        "dataset_root": config.dataset_root,
        "started_at": datetime.now().isoformat(timespec="seconds"),
    }

    start_epoch = 0
    last_checkpoint = None
    if resume:
        start_epoch = restore_training_state(state, load_checkpoint(resume, map_location=device))
        last_checkpoint = resume
        logger.info(f"从 {resume} 恢复训练，起始 epoch {start_epoch}")
    elif config.pretrain_iters > 0:
        logger.info(f"球体预训练 (r={config.pretrain_radius}, {config.pretrain_iters} 次迭代)...")
        pretrain_sphere(state.model.hypernet, radius=config.pretrain_radius, iters=config.pretrain_iters,
                        lr=config.learning_rate, seed=config.seed)

    loss_log = LossLog(run_dir, resume=bool(resume))
    n_train = len(manifest.split_records("train", primary_only=True))
    mode = "已知视角" if config.camera_supervised else "单视角"
    logger.info(f"开始训练 ({mode})：{n_train} 个训练样本，每轮 {num_batches(n_train, config.batch_size)} 批")

    try:
        with tqdm(total=max(config.epochs - start_epoch, 0), desc="训练进度") as pbar:
            for epoch in range(start_epoch, config.epochs):
                if config.camera_supervised:
                    batches = load_posed_batch(manifest, "train", config.batch_size, config.seed, epoch,
                                               config.multi_view_fraction, config.num_workers, config.image_size)
                else:
                    batches = load_batch(manifest, "train", config.batch_size, config.seed, epoch,
                                         config.num_workers, config.image_size)
                for batch in batches:
                    batch = _to_device(batch, device)
                    try:
                        if config.camera_supervised:
                            parts = multiview_step(batch, state)
                        else:
                            parts = reconstruction_step(batch, state)
                            if state.weights.lambda_gan > 0 and state.step % config.adversarial_every == 0:
                                parts.update(adversarial_step(batch, state))
                    except NonFiniteLossError as e:
                        raise TrainingDivergedError(
                            f"第 {epoch} 轮第 {state.step} 步损失项 '{e.part}' 出现 NaN/Inf，训练终止",
                            last_checkpoint,
                        ) from e
                    loss_log.log_step(state.step, epoch, parts)
                    state.step += 1

                summary = loss_log.end_epoch(epoch)
                recon = summary["mean"].get("recon", math.nan)
                pbar.set_postfix(recon=f"{recon:.4f}")
                pbar.update(1)
                if (epoch + 1) % config.checkpoint_every == 0 and epoch + 1 < config.epochs:
                    last_checkpoint = save_checkpoint(checkpoint_path(run_dir, epoch),
                                                      snapshot(state, epoch, metadata))
    finally:
        loss_log.close()

    metadata["finished_at"] = datetime.now().isoformat(timespec="seconds")
    final = snapshot(state, config.epochs - 1, metadata)
    save_checkpoint(checkpoint_path(run_dir), final)
    logger.info(f"训练完成，共 {state.step} 步。最终 checkpoint: {final.path}")
    return final


def _to_device(batch, device):
    if device.type == "cpu":
        return batch
    batch.images = batch.images.to(device)
    batch.labels = batch.labels.to(device)
    if getattr(batch, "poses", None) is not None:
        batch.poses = _pose_to(batch.poses, device)
    if getattr(batch, "second_images", None) is not None:
        batch.second_images = batch.second_images.to(device)
        batch.second_poses = _pose_to(batch.second_poses, device)
        batch.second_index = batch.second_index.to(device)
    return batch


def _pose_to(pose, device):
    return type(pose)(pose.v.to(device), pose.rotation.to(device), pose.camera_distance)

