import os

import hypothesis
import pytest
import torch

from datakit.synth import generate_primitive_dataset
from model.fields import FieldArchitecture
from training.config import load_config
from training.trainer import train

hypothesis.settings.register_profile("fast", max_examples=25, deadline=None)
hypothesis.settings.register_profile("thorough", max_examples=200, deadline=None)
hypothesis.settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "fast"))

RUN_SLOW = os.getenv("MCSV_RUN_SLOW") == "1"

# 测试用的小模型，所有测试共享
TINY_SECTIONS = {
    "data": {"image_size": 32},
    "model": {"latent_dim": 8, "pe_freqs": 2, "shape_hidden": [16, 16], "texture_hidden": 16,
              "hyper_hidden": 16, "hyper_layers": 2},
    "render": {"march_steps": 3},
    "loss": {"lambda_metric": 0.05},
    "trainer": {"batch_size": 4, "epochs": 2, "pretrain_iters": 5, "checkpoint_every": 1, "seed": 3},
    "eval": {"grid_resolution": 24, "surface_points": 2000, "icp_iters": 5},
}


def pytest_collection_modifyitems(config, items):
    if RUN_SLOW:
        return
    skip_slow = pytest.mark.skip(reason="设置 MCSV_RUN_SLOW=1 运行桌面规模测试")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def float64():
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield torch.float64
    torch.set_default_dtype(previous)


@pytest.fixture
def tiny_arch():
    return FieldArchitecture(pe_freqs=2, shape_hidden=(16, 16), texture_hidden=16, latent_dim=8,
                             hyper_hidden=16, hyper_layers=2)


def tiny_sections(dataset_root="", **overrides):
    """复制一份小模型配置，overrides 形如 trainer={"epochs": 1}。"""
    sections = {name: dict(body) for name, body in TINY_SECTIONS.items()}
    sections["data"]["dataset_root"] = str(dataset_root)
    for section, body in overrides.items():
        sections.setdefault(section, {}).update(body)
    return sections


def write_toml(path, sections):
    lines = []
    for section, body in sections.items():
        lines.append(f"[{section}]")
        for key, value in body.items():
            if isinstance(value, bool):
                text = "true" if value else "false"
            elif isinstance(value, str):
                text = '"' + value.replace("\\", "\\\\") + '"'
            else:
                text = repr(list(value)) if isinstance(value, (list, tuple)) else repr(value)
            lines.append(f"{key} = {text}")
        lines.append("")
    path.write_text("\n".join(lines), encoding="utf-8")
    return path


@pytest.fixture
def tiny_config_factory():
    def make(dataset_root="", **overrides):
        return load_config(tiny_sections(dataset_root, **overrides), environ={}, require_training=True)
    return make


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """3 类 × 6 个物体，每个物体 2 个视角，32×32。"""
    root = tmp_path_factory.mktemp("tiny_dataset")
    generate_primitive_dataset(str(root), categories=("sphere", "box", "cylinder"), per_category=6,
                               views_per_object=2, image_size=32, seed=11)
    return root


@pytest.fixture(scope="session")
def tiny_run(tiny_dataset, tmp_path_factory):
    """在 tiny_dataset 上训练 1 个 epoch，返回 (run_dir, 最终 Checkpoint)。"""
    run_dir = tmp_path_factory.mktemp("tiny_run")
    config = load_config(tiny_sections(tiny_dataset, trainer={"epochs": 1}), environ={}, require_training=True)
    return run_dir, train(config, str(run_dir))
