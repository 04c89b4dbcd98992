import numpy as np
import pytest
import torch

from promptad.config import Config, DatasetConfig, EncoderConfig, TextEncoderConfig


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def tiny_config(seed: int = 0) -> Config:
    """Small but fully wired config for fast pipeline tests."""
    cfg = Config(seed=seed)
    cfg.encoder = EncoderConfig(embed_dim=32, depth=4, heads=4, patch_size=8,
                                tap_layers=(1, 2, 4), vv_start_layer=2)
    cfg.text_encoder = TextEncoderConfig(width=32, depth=2, heads=2, max_len=96)
    cfg.prompts.n_prefix = 4
    cfg.interaction.kernels = ("3x3", "1x3")
    cfg.dataset = DatasetConfig(
        image_size=64,
        train_categories=("plate", "band"),
        test_categories=("disc",),
        normal_per_category=4,
        abnormal_per_category=4,
    )
    cfg.training.epochs_phase1 = 1
    cfg.training.epochs_phase2 = 1
    cfg.training.seed = seed
    return cfg


@pytest.fixture
def small_cfg():
    return tiny_config()


def unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def embedding_with_distance(distance: float, dim: int = 8) -> torch.Tensor:
    """Unit vector whose cosine distance to e1 is ``distance`` (in [0, 2])."""
    sim = 1.0 - distance
    out = np.zeros(dim)
    out[0] = sim
    out[1] = np.sqrt(max(0.0, 1.0 - sim * sim))
    return torch.tensor(out, dtype=torch.float64)
