"""Fixtures and configuration for pytest."""

from pathlib import Path

import numpy as np
import pytest

from peftscout.backbone import Backbone, BackboneConfig, build_backbone, pretrain_backbone
from peftscout.data_io.tasks import SplitData, SyntheticTask, generate_task
from peftscout.search import BudgetConfig
from peftscout.supernet import SpaceConfig

# extents of the tiny backbone used throughout the tests
TINY_BACKBONE = dict(
    num_layers=1,
    model_dim=8,
    ffn_dim=16,
    num_heads=2,
    vocab_size=8,
    max_seq_len=6,
    num_classes=2,
)

TINY_TASK = dict(
    kind="copy-class",
    vocab_size=8,
    seq_len=6,
    num_classes=2,
    num_train=64,
    num_val=32,
    num_test=32,
    seed=0,
)


# FIXTURES #


@pytest.fixture(scope="function")
def tiny_config() -> BackboneConfig:
    """Configuration of a one-layer backbone with 730 parameters."""
    return BackboneConfig(**TINY_BACKBONE)


@pytest.fixture(scope="function")
def tiny_backbone(tiny_config) -> Backbone:
    """Frozen tiny backbone (no pretraining steps, only frozen)."""
    backbone = build_backbone(tiny_config, seed=0)
    return pretrain_backbone(backbone, SyntheticTask(**TINY_TASK), steps=0)


@pytest.fixture(scope="function")
def tiny_task() -> SyntheticTask:
    """Small copy-class task that fits the tiny backbone."""
    return SyntheticTask(**TINY_TASK)


@pytest.fixture(scope="function")
def tiny_data(tiny_task) -> SplitData:
    """Split data of the tiny task."""
    return generate_task(tiny_task)


@pytest.fixture(scope="function")
def tiny_space() -> SpaceConfig:
    """Full search space: 16 sites on the tiny backbone."""
    return SpaceConfig()


@pytest.fixture(scope="function")
def tiny_budget() -> BudgetConfig:
    """Short search that fires a trigger every third step (tau = 0, H = 2)."""
    return BudgetConfig(
        budget_ratio=0.05, Z=3, tau=0.0, H=2, T=12, batch_size=8, seed=0
    )


@pytest.fixture(scope="function")
def tiny_config_file(tmp_path) -> Path:
    """Write a TOML run configuration for the tiny setup and return its path."""
    backbone = "\n".join(f"{key} = {value}" for key, value in TINY_BACKBONE.items())
    text = f"""
[backbone]
{backbone}

[task]
kind = "copy-class"
vocab_size = 8
seq_len = 6
num_classes = 2
num_train = 64
num_val = 32
num_test = 32

[pretrain]
steps = 2

[budget]
budget_ratio = 0.05
Z = 2
tau = 0.0
H = 2
T = 6
batch_size = 8

[retrain]
steps = 2
batch_size = 8

[output]
directory = "{(tmp_path / 'run').as_posix()}"
"""
    fname = tmp_path / "config.toml"
    fname.write_text(text, encoding="utf-8")
    return fname


@pytest.fixture(scope="function")
def rng() -> np.random.Generator:
    """Seeded random generator."""
    return np.random.default_rng(42)
