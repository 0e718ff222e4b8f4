"""Procedural tenon-mortise joints and the exact cavity-fit oracle.

Each joint has two parts: part 0 is a solid rectangular tenon, part 1 is a
solid mortise block minus a cavity congruent to the tenon. The cavity is
carved on the mortise's own voxel grid and the tenon box is placed exactly
over the carved cells, so the fit oracle scores generator output (R_o, R_e)
= (0, 1) exactly.

Eight connection modes: the tenon enters through each of the six block faces
(modes 0-5, axis = mode // 2, low/high side = mode % 2), plus an edge notch
along the x-low/y-low edge (mode 6) and a corner notch at the low corner
(mode 7). This enumeration is a convention of this package.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, JointSpecError
from .shapes import Box6, PartMask, ShapeSample, VoxelGrid

JOINT_CLASS = "joint"
N_MODES = 8
LATTICE = 32  # construction lattice resolution of the unit world cube
BLOCK_SIDE_RANGE = (16, 24)  # mortise block side, in lattice cells
CROSS_FRACTION = (0.25, 0.5)  # tenon cross-section, fraction of grid side
DEPTH_FRACTION = (0.4, 0.8)  # tenon protrusion depth, fraction of grid side


@dataclass(frozen=True)
class JointSpec:
    """Integer-exact construction plan for one joint.

    Sizes and offsets are in cells of the mortise's r^3 voxel grid; the block
    position and extents are in cells of the world lattice.
    """

    mode: int
    resolution: int
    tenon_size: tuple[int, int, int]
    tenon_offset: tuple[int, int]
    block_origin: tuple[int, int, int]
    block_extents: tuple[int, int, int]

    def __post_init__(self):
        if not 0 <= self.mode < N_MODES:
            raise JointSpecError(f"mode {self.mode} not in 0..{N_MODES - 1}")
        r = self.resolution
        if r < 8:
            raise JointSpecError(f"resolution {r} too small for a carved joint")
        if any(s < 1 for s in self.tenon_size):
            raise JointSpecError("tenon sizes must be positive")
        if any(e < 1 for e in self.block_extents):
            raise JointSpecError("block extents must be positive")
        for o, e in zip(self.block_origin, self.block_extents):
            if o < 0 or o + e > LATTICE:
                raise JointSpecError("block does not fit the world lattice")
        lo, hi = _tenon_cell_range(self)
        span = hi - lo
        if np.any(span < 1) or np.any(lo < 0) or np.any(hi > r):
            raise JointSpecError("tenon larger than block or outside its grid")
        if int(np.prod(span)) >= r**3:
            raise JointSpecError("tenon must not consume the whole block")
        # walls: every axis range that does not deliberately touch a face must
        # leave at least one cell on each side
        touches = _mode_face_touches(self.mode)
        for a in range(3):
            lo_ok = lo[a] >= 1 or touches[a][0]
            hi_ok = hi[a] <= r - 1 or touches[a][1]
            if not (lo_ok and hi_ok):
                raise JointSpecError(f"tenon breaches the block wall on axis {a}")

    @property
    def mortise_box(self) -> Box6:
        o = np.asarray(self.block_origin, dtype=np.float64)
        e = np.asarray(self.block_extents, dtype=np.float64)
        return Box6((o + e / 2) / LATTICE, e / LATTICE)

    @property
    def tenon_box(self) -> Box6:
        lo, hi = _tenon_cell_range(self)
        blo = self.mortise_box.lo.astype(np.float64)
        bext = self.mortise_box.extents.astype(np.float64)
        r = self.resolution
        tlo = blo + lo / r * bext
        text = (hi - lo) / r * bext
        return Box6(tlo + text / 2, text)


def _mode_face_touches(mode: int) -> list[tuple[bool, bool]]:
    """Per axis, whether the tenon is allowed to touch the (low, high) face."""
    if mode < 6:
        axis, side = mode // 2, mode % 2
        t = [(False, False)] * 3
        t[axis] = (side == 0, side == 1)
        return t
    if mode == 6:
        return [(True, False), (True, False), (False, False)]
    return [(True, False), (True, False), (True, False)]


def _tenon_cell_range(spec: JointSpec) -> tuple[np.ndarray, np.ndarray]:
    """Carved cell range [lo, hi) per axis on the mortise grid."""
    r = spec.resolution
    s = spec.tenon_size
    lo = np.zeros(3, dtype=np.int64)
    hi = np.zeros(3, dtype=np.int64)
    if spec.mode < 6:
        axis, side = spec.mode // 2, spec.mode % 2
        depth = s[axis]
        lo[axis], hi[axis] = (0, depth) if side == 0 else (r - depth, r)
        cross_axes = [a for a in range(3) if a != axis]
        for off, a in zip(spec.tenon_offset, cross_axes):
            lo[a], hi[a] = off, off + s[a]
    elif spec.mode == 6:
        lo[:] = (0, 0, spec.tenon_offset[0])
        hi[:] = (s[0], s[1], spec.tenon_offset[0] + s[2])
    else:
        lo[:] = 0
        hi[:] = s
    return lo, hi


def generate_joint(spec: JointSpec) -> ShapeSample:
    """Build the two-part sample for a spec. Deterministic."""
    r = spec.resolution
    lo, hi = _tenon_cell_range(spec)
    mortise = np.ones((r, r, r), dtype=np.float32)
    mortise[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]] = 0.0
    tenon = np.ones((r, r, r), dtype=np.float32)
    return ShapeSample(
        class_id=JOINT_CLASS,
        parts=[VoxelGrid.from_dense(tenon), VoxelGrid.from_dense(mortise)],
        boxes=[spec.tenon_box, spec.mortise_box],
        mask=PartMask.full(2),
    )


def random_spec(rng: np.random.Generator, resolution: int = 32, mode: int | None = None) -> JointSpec:
    """Draw a spec from the documented uniform ranges."""
    r = resolution
    if mode is None:
        mode = int(rng.integers(0, N_MODES))
    cross_lo, cross_hi = (max(1, round(f * r)) for f in CROSS_FRACTION)
    depth_lo, depth_hi = (max(2, round(f * r)) for f in DEPTH_FRACTION)
    depth_hi = min(depth_hi, r - 2)

    def cross() -> int:
        return int(rng.integers(cross_lo, cross_hi + 1))

    def depth() -> int:
        return int(rng.integers(depth_lo, depth_hi + 1))

    def interior_offset(size: int) -> int:
        return int(rng.integers(1, r - 1 - size + 1))

    size = [0, 0, 0]
    offset = (0, 0)
    if mode < 6:
        axis = mode // 2
        for a in range(3):
            size[a] = depth() if a == axis else cross()
        cross_axes = [a for a in range(3) if a != axis]
        offset = tuple(interior_offset(size[a]) for a in cross_axes)
    elif mode == 6:
        size = [cross(), cross(), depth()]
        offset = (interior_offset(size[2]), 0)
    else:
        size = [cross(), cross(), cross()]

    extents = tuple(int(rng.integers(BLOCK_SIDE_RANGE[0], BLOCK_SIDE_RANGE[1] + 1)) for _ in range(3))
    origin = tuple(int(rng.integers(0, LATTICE - e + 1)) for e in extents)
    return JointSpec(
        mode=mode,
        resolution=r,
        tenon_size=tuple(size),
        tenon_offset=offset,
        block_origin=origin,
        block_extents=extents,
    )


def _index_rng(seed: int, index: int) -> np.random.Generator:
    # independent stream per (seed, index) so generation parallelizes
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(index,)))


def generate_dataset(
    count: int,
    seed: int,
    resolution: int = 32,
    stratified: bool = False,
) -> tuple[list[ShapeSample], list[int]]:
    """Generate `count` joints with uniform (or stratified) connection modes.

    Returns (samples, mode labels). Pure function of (count, seed, resolution).
    """
    if count < 1:
        raise ContractError(f"count must be >= 1, got {count}")
    samples, labels = [], []
    for i in range(count):
        rng = _index_rng(seed, i)
        mode = i % N_MODES if stratified else None
        spec = random_spec(rng, resolution=resolution, mode=mode)
        samples.append(generate_joint(spec))
        labels.append(spec.mode)
    return samples, labels


def write_labels(labels: list[int], path: str | Path) -> None:
    """Sidecar labels.json: array of u8 connection modes."""
    Path(path, "labels.json").write_text(json.dumps([int(m) for m in labels]))


def read_labels(path: str | Path) -> list[int]:
    return [int(m) for m in json.loads(Path(path, "labels.json").read_text())]


# ---------------------------------------------------------------------------
# Fit oracle
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FitCounts:
    """World-grid voxel counts behind the cavity-fit ratios."""

    overlap_occ: int  # tenon-occupied & mortise-occupied
    mortise_occ_in_tenon_box: int  # denominator of R_o
    tenon_in_cavity: int  # tenon-occupied & inside mortise box & mortise-empty
    tenon_occ: int  # denominator of R_e

    @property
    def r_o(self) -> float:
        return self.overlap_occ / self.mortise_occ_in_tenon_box if self.mortise_occ_in_tenon_box else 0.0

    @property
    def r_e(self) -> float:
        return self.tenon_in_cavity / self.tenon_occ if self.tenon_occ else 0.0


def _world_occupancy(
    part: VoxelGrid, box: Box6, hull_lo: np.ndarray, hull_ext: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Sample a part onto the common world grid; returns (occupied, inside-box)."""
    r = part.resolution
    centers = [hull_lo[a] + (np.arange(r) + 0.5) / r * hull_ext[a] for a in range(3)]
    blo = box.lo.astype(np.float64)
    bext = box.extents.astype(np.float64)
    inside_ax, index_ax = [], []
    for a in range(3):
        if bext[a] <= 0:
            inside_ax.append(np.zeros(r, dtype=bool))
            index_ax.append(np.zeros(r, dtype=np.int64))
            continue
        t = centers[a]
        inside_ax.append((t >= blo[a]) & (t < blo[a] + bext[a]))
        index_ax.append(np.clip(((t - blo[a]) / bext[a] * r).astype(np.int64), 0, r - 1))
    inside = (
        inside_ax[0][:, None, None] & inside_ax[1][None, :, None] & inside_ax[2][None, None, :]
    )
    occ = part.dense()[np.ix_(index_ax[0], index_ax[1], index_ax[2])] != 0
    return occ & inside, inside


def world_grids(sample: ShapeSample) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Resample a 2-part sample into a shared world grid over the box hull.

    Returns boolean r^3 arrays (tenon occupied, inside tenon box,
    mortise occupied, inside mortise box), indexed [x, y, z].
    """
    if sample.k != 2:
        raise ContractError(f"fit oracle needs exactly 2 parts, got k={sample.k}")
    for i, p in enumerate(sample.parts):
        if not p.is_binary():
            raise ContractError(f"fit oracle needs binary voxels (part {i})")
    r = sample.resolution
    tenon_box, mortise_box = sample.boxes
    boxes = [b for b in (tenon_box, mortise_box) if np.all(b.extents > 0)]
    empty = np.zeros((r, r, r), dtype=bool)
    if not boxes:
        return empty, empty, empty.copy(), empty.copy()
    hull_lo = np.min([b.lo for b in boxes], axis=0).astype(np.float64)
    hull_hi = np.max([b.hi for b in boxes], axis=0).astype(np.float64)
    hull_ext = hull_hi - hull_lo
    if np.any(hull_ext <= 0):
        return empty, empty, empty.copy(), empty.copy()
    tenon_occ, tenon_in = _world_occupancy(sample.parts[0], tenon_box, hull_lo, hull_ext)
    mort_occ, mort_in = _world_occupancy(sample.parts[1], mortise_box, hull_lo, hull_ext)
    return tenon_occ, tenon_in, mort_occ, mort_in


def fit_counts(sample: ShapeSample) -> FitCounts:
    """Count fit voxels of a 2-part sample on the shared world grid."""
    tenon_occ, tenon_in, mort_occ, mort_in = world_grids(sample)
    return FitCounts(
        overlap_occ=int((tenon_occ & mort_occ).sum()),
        mortise_occ_in_tenon_box=int((mort_occ & tenon_in).sum()),
        tenon_in_cavity=int((tenon_occ & mort_in & ~mort_occ).sum()),
        tenon_occ=int(tenon_occ.sum()),
    )


def fit_oracle(sample: ShapeSample) -> tuple[float, float]:
    """(R_o, R_e): wrongly-overlapped and correctly-filled cavity fractions.

    R_o = |tenon-occ & mortise-occ| / |mortise-occ inside the tenon box|;
    R_e = |tenon-occ on empty cells inside the mortise box| / |tenon-occ|.
    Zero denominators score 0.
    """
    c = fit_counts(sample)
    return c.r_o, c.r_e


def recover_mode(sample: ShapeSample) -> int:
    """Infer the connection mode from the mortise cavity footprint."""
    if sample.k != 2:
        raise ContractError("mode recovery needs a 2-part joint")
    dense = sample.parts[1].dense()
    r = sample.parts[1].resolution
    empty = np.argwhere(dense == 0)
    if empty.size == 0:
        raise ContractError("mortise has no cavity")
    lo, hi = empty.min(axis=0), empty.max(axis=0) + 1
    touches = [(int(lo[a]) == 0, int(hi[a]) == r) for a in range(3)]
    n_touch = sum(t_lo + t_hi for t_lo, t_hi in touches)
    if n_touch == 1:
        for a in range(3):
            if touches[a][0]:
                return 2 * a
            if touches[a][1]:
                return 2 * a + 1
    if n_touch == 2 and touches[0][0] and touches[1][0]:
        return 6
    if n_touch == 3 and touches[0][0] and touches[1][0] and touches[2][0]:
        return 7
    raise ContractError(f"cavity footprint matches no known mode (touches={touches})")
