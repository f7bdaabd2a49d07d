import numpy as np
import pytest
import torch

from config import load_config

TINY_OVERRIDES = [
    "dataset.patch=32",
    "dataset.rho=4",
    "training.batch_size=2",
    "training.alternations=2",
    "model.timesteps=10",
    "model.unet_base=8",
    "model.mim_width=8",
    "model.mim_depth=2",
    "model.reg_width=8",
    "model.reg_hidden=8",
    "model.radius=1",
    "model.n_scales=2",
    "model.n_orient=2",
]


def tiny_overrides(tmp_path, budget: int = 1) -> list[str]:
    budgets = [f"training.budgets.{name}={budget}" for name in ("diff_bootstrap", "reg_s_bootstrap", "mim_t", "mim_s", "diff", "reg_s", "reg_c")]
    return TINY_OVERRIDES + budgets + [f"output.root={tmp_path / 'runs'}", f"dataset.root={tmp_path / 'toy'}"]


@pytest.fixture
def tiny_config(tmp_path):
    return load_config(None, tiny_overrides(tmp_path), env={})


@pytest.fixture
def gradient_image():
    """(1, 1, 32, 32) float64 image, linear in x and y"""
    ys, xs = torch.meshgrid(torch.arange(32, dtype=torch.float64), torch.arange(32, dtype=torch.float64), indexing="ij")
    return ((xs + 2.0 * ys) / (3.0 * 31.0))[None, None]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
