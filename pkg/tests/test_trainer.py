import json

import pytest
import torch

import training.trainer as trainer_module
from datakit.loader import load_batch, load_posed_batch
from datakit.manifest import DatasetManifest
from training.checkpoint import (
    checkpoint_path,
    load_checkpoint,
    restore_modules,
    save_checkpoint,
    snapshot,
)
from training.config import load_config
from training.errors import ConfigError, DatasetError, NonFiniteLossError, TrainingDivergedError
from training.logbook import EPOCH_SUMMARY, read_loss_log
from training.trainer import (
    adversarial_step,
    build_training_state,
    check_dataset,
    configure_determinism,
    multiview_step,
    reconstruction_step,
    restore_training_state,
    train,
)

from .conftest import tiny_sections


def _state_copy(module):
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def _same(module, saved):
    return all(torch.equal(v, saved[k]) for k, v in module.state_dict().items())


@pytest.fixture
def manifest(tiny_dataset):
    return DatasetManifest.load(str(tiny_dataset))


@pytest.fixture
def batch(manifest):
    return next(load_batch(manifest, "train", 4, seed=0, epoch=0))


@pytest.fixture
def restore_torch_globals():
    threads = torch.get_num_threads()
    yield
    configure_determinism(False)
    torch.set_num_threads(threads)


def test_parameter_partition(tiny_config_factory, tiny_dataset):
    state = build_training_state(tiny_config_factory(tiny_dataset), num_categories=3)
    generator_ids = {id(p) for p in state.generator_parameters()}
    disc_ids = {id(p) for p in state.discriminator.parameters()}
    assert generator_ids.isdisjoint(disc_ids)
    assert {id(p) for g in state.optimizer.param_groups for p in g["params"]} == generator_ids
    assert {id(p) for g in state.optimizer_d.param_groups for p in g["params"]} == disc_ids
    for group in (*state.optimizer.param_groups, *state.optimizer_d.param_groups):
        assert group["lr"] == pytest.approx(1e-4)
        assert group["betas"] == (0.0, 0.9)
        assert group["weight_decay"] == 0


def test_reconstruction_step_leaves_discriminator(tiny_config_factory, tiny_dataset, batch):
    state = build_training_state(tiny_config_factory(tiny_dataset), num_categories=3)
    disc_before = _state_copy(state.discriminator)
    model_before = _state_copy(state.model)
    parts = reconstruction_step(batch, state)
    assert _same(state.discriminator, disc_before)
    assert not _same(state.model, model_before)
    assert {"recon", "metric", "gan", "cam", "sdf", "soft_iou", "total"} <= set(parts)
    assert all(p.requires_grad for p in state.discriminator.parameters())
    assert state.last_fakes[0].shape == (8, 4, 32, 32)


def test_adversarial_step_leaves_generator(tiny_config_factory, tiny_dataset, batch):
    state = build_training_state(tiny_config_factory(tiny_dataset), num_categories=3)
    model_before = _state_copy(state.model)
    centers_before = _state_copy(state.centers)
    disc_before = _state_copy(state.discriminator)
    parts = adversarial_step(batch, state)
    assert set(parts) == {"d_base", "r1", "d_total"}
    assert _same(state.model, model_before)
    assert _same(state.centers, centers_before)
    assert not _same(state.discriminator, disc_before)


def test_camera_loss_only_reaches_view_predictor(tiny_config_factory, tiny_dataset, batch, monkeypatch):
    config = tiny_config_factory(tiny_dataset, loss={"lambda_gan": 0.0})
    state = build_training_state(config, num_categories=3)
    monkeypatch.setattr(trainer_module, "total_loss", lambda parts, weights: parts["cam"])
    reconstruction_step(batch, state)
    model = state.model
    for module in (model.encoder, model.hypernet, model.marcher):
        assert all(p.grad is None for p in module.parameters())
    assert any(p.grad is not None and float(p.grad.abs().sum()) > 0 for p in model.view_predictor.parameters())


def test_zero_gan_weight_ignores_discriminator(tiny_config_factory, tiny_dataset, batch):
    config = tiny_config_factory(tiny_dataset, loss={"lambda_gan": 0.0})
    a = build_training_state(config, num_categories=3)
    parts_a = reconstruction_step(batch, a)
    b = build_training_state(config, num_categories=3)
    with torch.no_grad(), torch.random.fork_rng(devices=[]):
        torch.manual_seed(1234)
        for p in b.discriminator.parameters():
            p.add_(torch.randn_like(p))
    parts_b = reconstruction_step(batch, b)
    assert "gan" not in parts_a
    assert parts_a == parts_b
    assert _same(a.model, _state_copy(b.model))
    disc_before = _state_copy(b.discriminator)
    assert adversarial_step(batch, b) == {}
    assert _same(b.discriminator, disc_before)


def test_strict_mode_is_repeatable(tiny_config_factory, tiny_dataset, batch, restore_torch_globals):
    config = tiny_config_factory(tiny_dataset, trainer={"strict": True})
    configure_determinism(True)
    runs = []
    for _ in range(2):
        state = build_training_state(config, num_categories=3)
        runs.append([reconstruction_step(batch, state), adversarial_step(batch, state),
                     reconstruction_step(batch, state)])
    assert runs[0] == runs[1]


def test_checkpoint_round_trip(tiny_config_factory, tiny_dataset, batch, tmp_path):
    config = tiny_config_factory(tiny_dataset)
    state = build_training_state(config, num_categories=3)
    reconstruction_step(batch, state)
    adversarial_step(batch, state)
    state.step = 2
    path = save_checkpoint(checkpoint_path(str(tmp_path), 0), snapshot(state, 0, {"categories": ["a", "b", "c"]}))
    assert path.endswith("epoch_0000.pt")

    loaded = load_checkpoint(path)
    assert loaded.categories == ["a", "b", "c"]
    assert loaded.train_config() == config
    fresh = build_training_state(config, num_categories=3)
    assert restore_training_state(fresh, loaded) == 1
    assert fresh.step == 2
    assert _same(fresh.model, _state_copy(state.model))
    assert _same(fresh.centers, _state_copy(state.centers))
    assert _same(fresh.discriminator, _state_copy(state.discriminator))
    assert torch.equal(fresh.generator.get_state(), state.generator.get_state())

    _, model, centers = restore_modules(loaded)
    assert not model.training
    assert torch.equal(centers.centers, state.centers.centers.detach())


def test_load_checkpoint_errors(tmp_path):
    from training.errors import MCSVError

    with pytest.raises(MCSVError):
        load_checkpoint(str(tmp_path / "missing.pt"))
    broken = tmp_path / "broken.pt"
    broken.write_bytes(b"garbage")
    with pytest.raises(MCSVError):
        load_checkpoint(str(broken))


def test_train_writes_outputs(tiny_run):
    run_dir, final = tiny_run
    assert final.path == checkpoint_path(str(run_dir))
    assert final.step == 3
    assert final.categories == ["sphere", "box", "cylinder"]
    log = read_loss_log(str(run_dir))
    parts = set(log["part"])
    assert {"recon", "metric", "gan", "cam", "sdf", "soft_iou", "d_base", "r1", "total"} <= parts
    assert sorted(log["step"].unique()) == [0, 1, 2]
    lines = (run_dir / EPOCH_SUMMARY).read_text(encoding="utf-8").splitlines()
    assert len(lines) == 1
    assert json.loads(lines[0])["steps"] == 3


def test_resume_continues(tiny_run, tiny_dataset, tmp_path):
    _, final = tiny_run
    config = load_config(tiny_sections(tiny_dataset, trainer={"epochs": 2}), environ={}, require_training=True)
    resumed = train(config, str(tmp_path), resume=final.path)
    assert resumed.epoch == 1
    assert resumed.step == 6
    assert sorted(read_loss_log(str(tmp_path))["epoch"].unique()) == [1]


def test_nan_loss_stops_training(tiny_config_factory, tiny_dataset, manifest, tmp_path, monkeypatch):
    config = tiny_config_factory(tiny_dataset)
    monkeypatch.setattr(trainer_module, "recon_loss", lambda a, b: torch.tensor(float("nan")))
    with pytest.raises(TrainingDivergedError) as info:
        train(config, str(tmp_path), manifest=manifest)
    assert isinstance(info.value.__cause__, NonFiniteLossError)
    assert info.value.__cause__.part == "recon"
    assert info.value.checkpoint is None


def test_multiview_step(tiny_config_factory, tiny_dataset, manifest):
    config = tiny_config_factory(tiny_dataset, trainer={"camera_supervised": True, "multi_view_fraction": 1.0})
    state = build_training_state(config, num_categories=3)
    posed = next(load_posed_batch(manifest, "train", 4, seed=0, epoch=0, multi_view_fraction=1.0))
    parts = multiview_step(posed, state)
    assert parts["second_views"] == 4
    assert "gan" not in parts and "cam" not in parts
    assert {"recon", "metric", "sdf", "soft_iou"} <= set(parts)


def test_check_dataset(tiny_dataset, tmp_path):
    with pytest.raises(ConfigError):
        check_dataset(load_config({}, environ={}))
    with pytest.raises(DatasetError):
        check_dataset(load_config({"data": {"dataset_root": str(tmp_path)}}, environ={}))
    with pytest.raises(DatasetError):
        check_dataset(load_config({"data": {"dataset_root": str(tiny_dataset), "image_size": 64}}, environ={}))
    assert check_dataset(load_config({"data": {"dataset_root": str(tiny_dataset), "image_size": 32}},
                                     environ={})).num_categories == 3


def test_train_requires_lambda_metric(tiny_dataset, tmp_path):
    sections = tiny_sections(tiny_dataset)
    del sections["loss"]["lambda_metric"]
    with pytest.raises(ConfigError):
        train(load_config(sections, environ={}), str(tmp_path))


@pytest.mark.slow
def test_desk_scale_training_reduces_reconstruction_loss(tmp_path):
    from datakit.synth import generate_primitive_dataset

    root = tmp_path / "desk"
    generate_primitive_dataset(str(root), categories=("sphere", "box", "cylinder"), per_category=30,
                               image_size=64, seed=7, workers=4)
    sections = {"data": {"dataset_root": str(root)}, "loss": {"lambda_metric": 0.05},
                "trainer": {"epochs": 20, "checkpoint_every": 20}}
    run_dir = tmp_path / "run"
    train(load_config(sections, environ={}, require_training=True), str(run_dir))
    lines = (run_dir / EPOCH_SUMMARY).read_text(encoding="utf-8").splitlines()
    recon = [json.loads(line)["mean"]["recon"] for line in lines]
    assert len(recon) == 20
    assert recon[-1] <= 0.5 * recon[0]
