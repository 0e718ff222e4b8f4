"""Downstream procedures on a trained model: sampling, latent interpolation,
iterative shape completion, and geometry<->structure mapping.

The completion and mapping loops follow the same recipe: randomize the
unknown data, then repeatedly encode the full sample through the latent mean
and overwrite only the unknown data with the decoded output (voxels
re-binarized at 0.5 each round so the encoder keeps seeing in-distribution
input). Fixed data is never touched.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError
from .model import SAGNet
from .shapes import Box6, PartMask, ShapeSample, VoxelGrid

log = logging.getLogger(__name__)

RANDOM_EXTENT_RANGE = (0.1, 0.5)


@dataclass
class CompletionProblem:
    partial: ShapeSample
    missing: set[int] = field(default_factory=set)
    iterations: int = 300


def _task_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(3,)))


def _random_box(rng: np.random.Generator) -> Box6:
    return Box6(
        rng.uniform(0.0, 1.0, size=3).astype(np.float32),
        rng.uniform(*RANDOM_EXTENT_RANGE, size=3).astype(np.float32),
    )


def _random_voxels(rng: np.random.Generator, r: int) -> VoxelGrid:
    return VoxelGrid(r, (rng.random(r**3) < 0.5).astype(np.float32))


def sample_shapes(
    model: SAGNet,
    count: int,
    seed: int,
    mask_policy: str | np.ndarray = "full",
    binarize: bool = True,
) -> list[ShapeSample]:
    """Draw latent codes from N(0, I) and decode `count` shapes.

    mask_policy is either "full" (all parts present) or an (m, k) boolean pool
    whose rows are drawn uniformly (the empirical training distribution).
    Voxels are binarized at 0.5 on export.
    """
    rng = _task_rng(seed)
    k = model.config.k
    out = []
    for _ in range(count):
        z = rng.standard_normal(model.config.latent_dim)
        if isinstance(mask_policy, str):
            if mask_policy != "full":
                raise ContractError(f"unknown mask policy '{mask_policy}'")
            mask = PartMask.full(k)
        else:
            pool = np.asarray(mask_policy, dtype=bool)
            if pool.ndim != 2 or pool.shape[1] != k:
                raise ContractError(f"mask pool must be (m, {k}), got {pool.shape}")
            mask = PartMask(pool[int(rng.integers(0, len(pool)))].copy())
        sample, _ = model.generate(z, mask)
        out.append(sample.binarize() if binarize else sample)
    return out


def interpolate(model: SAGNet, sample_a: ShapeSample, sample_b: ShapeSample, steps: int) -> list[ShapeSample]:
    """Decode `steps` uniform points on the latent segment between two samples.

    Endpoints use each sample's own latent mean, so t=0 and t=1 reproduce the
    direct reconstructions bit-for-bit. Outputs keep real-valued voxels.
    """
    if steps < 2:
        raise ContractError(f"interpolation needs at least 2 steps, got {steps}")
    za = model.fuse(model.analyze(sample_a), sample_a.mask).mu
    zb = model.fuse(model.analyze(sample_b), sample_b.mask).mu
    out = []
    for t in np.linspace(0.0, 1.0, steps):
        z = (1.0 - t) * za + t * zb
        mask = sample_a.mask if t < 0.5 else sample_b.mask
        sample, _ = model.generate(z, mask)
        out.append(sample)
    return out


def _encode_decode(model: SAGNet, sample: ShapeSample, mask: PartMask) -> ShapeSample:
    work = sample.copy()
    work.mask = mask
    state = model.analyze(work)
    dist = model.fuse(state, mask)
    decoded, _ = model.generate(dist.mu, mask)
    return decoded


def complete(model: SAGNet, problem: CompletionProblem, seed: int = 0) -> ShapeSample:
    """Iteratively restore the missing parts; fixed parts stay bit-identical."""
    partial = problem.partial
    missing = sorted(problem.missing)
    if not missing:
        return partial.copy()
    if any(m < 0 or m >= partial.k for m in missing):
        raise ContractError(f"missing indices {missing} out of range for k={partial.k}")
    if len(missing) >= partial.k:
        raise ContractError("all parts missing; use sample_shapes instead")
    rng = _task_rng(seed)
    mask = PartMask(
        np.array([f or (i in missing) for i, f in enumerate(partial.mask.flags)], dtype=bool)
    )
    cur = partial.copy()
    for m in missing:
        cur.parts[m] = _random_voxels(rng, cur.resolution)
        cur.boxes[m] = _random_box(rng)
    for it in range(problem.iterations):
        decoded = _encode_decode(model, cur, mask)
        change = 0.0
        for m in missing:
            new_vox = decoded.parts[m].binarize()
            change += float(np.abs(new_vox.occupancy - cur.parts[m].occupancy).sum())
            change += float(
                np.linalg.norm(decoded.boxes[m].as_array() - cur.boxes[m].as_array())
            )
            cur.parts[m] = new_vox
            cur.boxes[m] = decoded.boxes[m]
        log.debug("complete iter %d: change norm %.4f", it, change)
    cur.mask = mask
    return cur


def map_modality(
    model: SAGNet,
    sample: ShapeSample,
    direction: str,
    iterations: int = 300,
    seed: int = 0,
) -> ShapeSample:
    """Infer one modality from the other by iterated encode-decode feedback.

    G2S: keep voxels, randomize then repeatedly overwrite all boxes.
    S2G: keep boxes, randomize then repeatedly overwrite all voxels.
    """
    direction = direction.lower()
    if direction not in ("g2s", "s2g"):
        raise ContractError(f"direction must be 'g2s' or 's2g', got '{direction}'")
    rng = _task_rng(seed)
    cur = sample.copy()
    present = [i for i in range(cur.k) if cur.mask.flags[i]]
    for i in present:
        if direction == "g2s":
            cur.boxes[i] = _random_box(rng)
        else:
            cur.parts[i] = _random_voxels(rng, cur.resolution)
    for it in range(iterations):
        decoded = _encode_decode(model, cur, cur.mask)
        change = 0.0
        for i in present:
            if direction == "g2s":
                change += float(
                    np.linalg.norm(decoded.boxes[i].as_array() - cur.boxes[i].as_array())
                )
                cur.boxes[i] = decoded.boxes[i]
            else:
                new_vox = decoded.parts[i].binarize()
                change += float(np.abs(new_vox.occupancy - cur.parts[i].occupancy).sum())
                cur.parts[i] = new_vox
        log.debug("map_modality(%s) iter %d: change norm %.4f", direction, it, change)
    return cur


# ---------------------------------------------------------------------------
# OBJ export: one cube per occupied voxel, parts as named groups
# ---------------------------------------------------------------------------

_CUBE_CORNERS = np.array(
    [(0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0), (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1)],
    dtype=np.float64,
)
_CUBE_FACES = [
    (0, 3, 2, 1), (4, 5, 6, 7), (0, 1, 5, 4), (2, 3, 7, 6), (1, 2, 6, 5), (0, 4, 7, 3),
]


def export_obj(sample: ShapeSample, path: str | Path, threshold: float = 0.5) -> None:
    """Write the sample as an OBJ with one group per present part."""
    lines = []
    vert_base = 0
    for i in range(sample.k):
        if not sample.mask.flags[i]:
            continue
        lines.append(f"g part_{i}")
        grid = sample.parts[i].binarize(threshold)
        box = sample.boxes[i]
        r = grid.resolution
        idx = np.flatnonzero(grid.occupancy)
        cells = np.stack([idx % r, (idx // r) % r, idx // (r * r)], axis=1).astype(np.float64)
        lo = box.lo.astype(np.float64)
        ext = box.extents.astype(np.float64)
        for cell in cells:
            corners = lo + (cell + _CUBE_CORNERS) / r * ext
            for cx, cy, cz in corners:
                lines.append(f"v {cx:.6f} {cy:.6f} {cz:.6f}")
            for face in _CUBE_FACES:
                a, b, c, d = (vert_base + f + 1 for f in face)
                lines.append(f"f {a} {b} {c} {d}")
            vert_base += 8
    Path(path).write_text("\n".join(lines) + "\n")
