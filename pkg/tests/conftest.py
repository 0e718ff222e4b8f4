from __future__ import annotations

import numpy as np
import pytest

from sagnet.model import ModelConfig, SAGNet
from sagnet.shapes import Box6, PartMask, ShapeSample, VoxelGrid


def make_random_sample(rng: np.random.Generator, k: int = 2, r: int = 8,
                       mask=None, class_id: str = "test") -> ShapeSample:
    """Random binary sample with valid boxes; absent parts zeroed."""
    flags = np.ones(k, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    parts, boxes = [], []
    for i in range(k):
        if flags[i]:
            occ = (rng.random(r**3) < 0.4).astype(np.float32)
            center = rng.uniform(0.25, 0.75, size=3).astype(np.float32)
            extents = rng.uniform(0.1, 0.4, size=3).astype(np.float32)
            parts.append(VoxelGrid(r, occ))
            boxes.append(Box6(center, extents))
        else:
            parts.append(VoxelGrid.empty(r))
            boxes.append(Box6.zero())
    return ShapeSample(class_id=class_id, parts=parts, boxes=boxes, mask=PartMask(flags))


def tiny_config(k: int = 2, r: int = 8, seed: int = 0, **kw) -> ModelConfig:
    defaults = dict(
        k=k, resolution=r, hidden_dim=16, latent_dim=8,
        exchange_iters=2, channels=(2, 3, 4)[: r.bit_length() - 1], seed=seed,
        class_name="test",
    )
    defaults.update(kw)
    return ModelConfig(**defaults)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model() -> SAGNet:
    return SAGNet(tiny_config())
