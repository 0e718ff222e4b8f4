"""Quantitative evaluation: point-cloud distances, MMD/COV, symmetry,
coplanarity, cavity-fit scores, mode-classifier inception score, retrieval.

Point clouds are built per part (one point per occupied voxel, placed in the
part's bounding box) and resampled with replacement to a fixed 256-point
budget so summed distances are comparable across parts.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from . import autodiff as ad
from . import layers
from .autodiff import Tape
from .errors import ContractError, DegenerateGeometryError
from .layers import ParamSet
from .parallel import thread_map
from .shapes import Box6, ShapeSample, VoxelGrid, voxel_to_points
from .synthjoints import N_MODES, fit_counts, world_grids

log = logging.getLogger(__name__)

POINT_BUDGET = 256


@dataclass
class EvalPointCloud:
    """Points in normalized shape coordinates with per-point part labels."""

    points: np.ndarray  # (n, 3) float64
    part_id: np.ndarray  # (n,) int

    def __post_init__(self):
        if not np.all(np.isfinite(self.points)):
            raise ContractError("point cloud contains non-finite coordinates")


def _pts(cloud) -> np.ndarray:
    p = cloud.points if isinstance(cloud, EvalPointCloud) else np.asarray(cloud, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != 3:
        raise ContractError(f"expected an (n, 3) point array, got shape {p.shape}")
    return p


def _resample(points: np.ndarray, budget: int) -> np.ndarray:
    # seeded by the input size so identical clouds resample identically
    if len(points) == budget:
        return points
    rng = np.random.default_rng(len(points))
    return points[rng.integers(0, len(points), size=budget)]


def part_point_cloud(sample: ShapeSample, part: int, budget: int = POINT_BUDGET) -> np.ndarray:
    """Budgeted point cloud of one part; empty (0, 3) if absent or unoccupied."""
    if not sample.mask.flags[part]:
        return np.zeros((0, 3), dtype=np.float64)
    box = sample.boxes[part]
    # model output can carry degenerate extents; clamp so points stay defined
    ext = np.maximum(box.extents, 1e-6).astype(np.float32)
    pts = voxel_to_points(sample.parts[part].binarize(), Box6(box.center, ext))
    if len(pts) == 0:
        return pts
    return _resample(pts, budget)


def shape_point_cloud(sample: ShapeSample, budget: int = POINT_BUDGET) -> EvalPointCloud:
    """All present parts' budgeted clouds, labeled by part index."""
    chunks, labels = [], []
    for i in range(sample.k):
        pts = part_point_cloud(sample, i, budget)
        if len(pts):
            chunks.append(pts)
            labels.append(np.full(len(pts), i, dtype=np.int64))
    if not chunks:
        raise ContractError("sample has no occupied present parts")
    return EvalPointCloud(np.concatenate(chunks), np.concatenate(labels))


def chamfer(a, b) -> float:
    """Summed two-sided nearest-neighbor Euclidean distance."""
    pa, pb = _pts(a), _pts(b)
    if len(pa) == 0 or len(pb) == 0:
        raise ContractError("chamfer distance needs two non-empty clouds")
    d = cdist(pa, pb)
    return float(d.min(axis=1).sum() + d.min(axis=0).sum())


def emd(a, b, max_points: int = POINT_BUDGET) -> float:
    """Exact minimum-cost perfect matching (earth mover's) distance.

    Clouds are resampled with replacement to a common size n <= max_points
    when they differ or exceed the cap; the value is the total matching cost.
    """
    pa, pb = _pts(a), _pts(b)
    if len(pa) == 0 or len(pb) == 0:
        raise ContractError("earth mover's distance needs two non-empty clouds")
    if len(pa) != len(pb) or len(pa) > max_points:
        n = min(max_points, max(len(pa), len(pb)))
        pa, pb = _resample(pa, n), _resample(pb, n)
    if len(pa) != len(pb):
        raise ContractError("clouds still differ in size after resampling")
    cost = cdist(pa, pb)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum())


def shape_distance(x: ShapeSample, y: ShapeSample, budget: int = POINT_BUDGET) -> float:
    """Box Euclidean distances plus part-wise Chamfer distances, summed.

    Parts missing from either sample are skipped pairwise.
    """
    if x.k != y.k:
        raise ContractError(f"shape_distance needs matching k, got {x.k} and {y.k}")
    total = 0.0
    for i in range(x.k):
        if not (x.mask.flags[i] and y.mask.flags[i]):
            continue
        bx = x.boxes[i].as_array().astype(np.float64)
        by = y.boxes[i].as_array().astype(np.float64)
        total += float(np.linalg.norm(bx - by))
        ca, cb = part_point_cloud(x, i, budget), part_point_cloud(y, i, budget)
        if len(ca) and len(cb):
            total += chamfer(ca, cb)
    return total


def knn_retrieve(query: ShapeSample, dataset: list[ShapeSample], n: int = 3) -> list[int]:
    """Indices of the n nearest dataset samples by shape_distance, ascending.

    Ties break deterministically by dataset index.
    """
    if not dataset:
        raise ContractError("retrieval dataset is empty")
    if n > len(dataset):
        log.warning("knn_retrieve: n=%d clamped to dataset size %d", n, len(dataset))
        n = len(dataset)
    dists = np.array([shape_distance(query, s) for s in dataset])
    return list(np.argsort(dists, kind="stable")[:n])


# ---------------------------------------------------------------------------
# MMD / COV over parts
# ---------------------------------------------------------------------------


def _part_metric(ground: str):
    ground = ground.lower()
    if ground == "cd":
        return chamfer
    if ground == "emd":
        return emd
    raise ContractError(f"ground metric must be 'cd' or 'emd', got '{ground}'")


def mmd_cov(
    generated: list[ShapeSample],
    training: list[ShapeSample],
    ground: str = "cd",
    budget: int = POINT_BUDGET,
    threads: int | None = 1,
) -> tuple[float, float]:
    """Part-wise fidelity (MMD) and diversity (COV) of a generated set.

    Parts are matched within the same canonical slot. COV: fraction of training
    shapes owning at least one generated part's nearest training part. MMD:
    mean over training shapes of the mean per-part minimum distance to the
    generated set. `threads` parallelizes the distance matrix rows without
    affecting the result.
    """
    if not generated or not training:
        raise ContractError("mmd_cov needs non-empty generated and training sets")
    k = training[0].k
    metric = _part_metric(ground)
    gen_clouds = [[part_point_cloud(s, i, budget) for i in range(k)] for s in generated]
    train_clouds = [[part_point_cloud(s, i, budget) for i in range(k)] for s in training]

    def row(args) -> np.ndarray:
        slot, gc = args
        out = np.full(len(training), np.inf)
        if len(gc[slot]) == 0:
            return out
        for ti, tc in enumerate(train_clouds):
            if len(tc[slot]):
                out[ti] = metric(gc[slot], tc[slot])
        return out

    # distance matrices per part slot (rows: generated, cols: training)
    dmats: list[np.ndarray] = []
    for slot in range(k):
        rows = thread_map(row, [(slot, gc) for gc in gen_clouds], threads)
        dmats.append(np.stack(rows))

    covered: set[int] = set()
    for slot in range(k):
        d = dmats[slot]
        for gi in range(len(generated)):
            if np.isfinite(d[gi]).any():
                covered.add(int(np.argmin(d[gi])))
    cov = len(covered) / len(training)

    shape_scores = []
    for ti in range(len(training)):
        part_scores = [
            dmats[slot][:, ti].min()
            for slot in range(k)
            if np.isfinite(dmats[slot][:, ti]).any()
        ]
        if part_scores:
            shape_scores.append(float(np.mean(part_scores)))
    if not shape_scores:
        raise ContractError("no comparable parts between generated and training sets")
    return float(np.mean(shape_scores)), float(cov)


# ---------------------------------------------------------------------------
# Symmetry / coplanarity
# ---------------------------------------------------------------------------


def default_mirror_plane(sample: ShapeSample, axis: int = 0) -> tuple[int, float]:
    """Mid-sagittal plane of the enclosing box of all present parts."""
    los, his = [], []
    for i in range(sample.k):
        if sample.mask.flags[i]:
            los.append(sample.boxes[i].lo[axis])
            his.append(sample.boxes[i].hi[axis])
    if not los:
        raise ContractError("sample has no present parts")
    return axis, float((min(los) + max(his)) / 2.0)


def reflect_part(sample: ShapeSample, part: int, plane: tuple[int, float]) -> tuple[VoxelGrid, Box6]:
    """Mirror one part: box center across the plane, voxels flipped in-box."""
    axis, offset = plane
    box = sample.boxes[part]
    center = box.center.astype(np.float64).copy()
    center[axis] = 2.0 * offset - center[axis]
    dense = np.flip(sample.parts[part].dense(), axis=axis)
    return VoxelGrid.from_dense(np.ascontiguousarray(dense)), Box6(center, box.extents)


def symmetry_score(
    sample: ShapeSample,
    part_pair: tuple[int, int],
    mirror_plane: tuple[int, float] | None = None,
    budget: int = POINT_BUDGET,
) -> float:
    """Single-part distance between part i reflected across a plane and part j."""
    i, j = part_pair
    if not (sample.mask.flags[i] and sample.mask.flags[j]):
        raise ContractError("symmetry_score needs both parts present")
    plane = mirror_plane if mirror_plane is not None else default_mirror_plane(sample)
    grid_r, box_r = reflect_part(sample, i, plane)
    box_j = sample.boxes[j]
    total = float(np.linalg.norm(box_r.as_array().astype(np.float64) - box_j.as_array().astype(np.float64)))
    ca = _resample(voxel_to_points(grid_r.binarize(), _positive_box(box_r)), budget)
    cb = part_point_cloud(sample, j, budget)
    if len(ca) and len(cb):
        total += chamfer(ca, cb)
    return total


def _positive_box(box: Box6) -> Box6:
    return Box6(box.center, np.maximum(box.extents, 1e-6).astype(np.float32))


def coplanarity_score(sample: ShapeSample, part_indices: tuple[int, int, int, int]) -> float:
    """Distance of the fourth part's box centroid to the plane of the first three."""
    if len(part_indices) != 4:
        raise ContractError("coplanarity_score needs exactly 4 part indices")
    for i in part_indices:
        if not sample.mask.flags[i]:
            raise ContractError(f"part {i} is absent")
    c = [sample.boxes[i].center.astype(np.float64) for i in part_indices]
    normal = np.cross(c[1] - c[0], c[2] - c[0])
    scale = max(np.linalg.norm(c[1] - c[0]), np.linalg.norm(c[2] - c[0]), 1e-12)
    if np.linalg.norm(normal) <= 1e-9 * scale * scale:
        raise DegenerateGeometryError("first three centroids are collinear")
    normal /= np.linalg.norm(normal)
    return float(abs(np.dot(c[3] - c[0], normal)))


# ---------------------------------------------------------------------------
# Cavity scores
# ---------------------------------------------------------------------------


@dataclass
class CavityRecord:
    r_o: float
    r_e: float
    r: float
    flags: list[str] = field(default_factory=list)


@dataclass
class CavityReport:
    records: list[CavityRecord]
    r_over: float  # mean(R_e) - mean(R_o)

    @property
    def r_values(self) -> np.ndarray:
        return np.array([rec.r for rec in self.records])


def cavity_scores(samples: list[ShapeSample]) -> CavityReport:
    """Per-sample (R_o, R_e, R = 1 - (R_e - R_o)) and the aggregate R_over."""
    if not samples:
        raise ContractError("cavity_scores needs at least one sample")
    records = []
    for s in samples:
        counts = fit_counts(s.binarize())
        flags = []
        if counts.tenon_occ == 0:
            flags.append("empty_tenon")
        r_o, r_e = counts.r_o, counts.r_e
        records.append(CavityRecord(r_o=r_o, r_e=r_e, r=1.0 - (r_e - r_o), flags=flags))
    r_over = float(np.mean([rec.r_e for rec in records]) - np.mean([rec.r_o for rec in records]))
    return CavityReport(records=records, r_over=r_over)


def voxel_iou(a: VoxelGrid, b: VoxelGrid, threshold: float = 0.5) -> float:
    """Intersection-over-union of two grids binarized at a threshold."""
    av = a.occupancy >= threshold
    bv = b.occupancy >= threshold
    union = np.logical_or(av, bv).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(av, bv).sum() / union)


# ---------------------------------------------------------------------------
# Connection-mode classifier and inception-style score
# ---------------------------------------------------------------------------


class ModeClassifier:
    """Small 3-conv-layer network over the two-part world grid -> 8 modes."""

    def __init__(self, resolution: int, seed: int = 0, channels: tuple[int, int, int] = (8, 16, 32)):
        if resolution % 8:
            raise ContractError("classifier needs a resolution divisible by 8")
        self.resolution = resolution
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(4,)))
        ps = ParamSet(rng, dtype=np.float32)
        self.convs = []
        c_prev = 2
        for i, c in enumerate(channels):
            self.convs.append(layers.Conv3d(ps, f"cls.conv{i}", c_prev, c))
            c_prev = c
        self.flat_dim = channels[-1] * (resolution // 8) ** 3
        self.fc = layers.Linear(ps, "cls.fc", self.flat_dim, N_MODES)
        self.params = ps.params
        self.val_accuracy: float | None = None

    def logits(self, grids: np.ndarray) -> ad.Tensor:
        b = grids.shape[0]
        h = ad.constant(grids, dtype=np.float32)
        for conv in self.convs:
            h = ad.tanh(conv(h))
        return self.fc(ad.reshape(h, (b, self.flat_dim)))

    def predict_proba(self, grids: np.ndarray) -> np.ndarray:
        z = self.logits(grids).data.astype(np.float64)
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)


def sample_world_grids(samples: list[ShapeSample]) -> np.ndarray:
    """(N, 2, r, r, r) world-grid occupancies for 2-part samples."""
    grids = []
    for s in samples:
        tenon_occ, _, mort_occ, _ = world_grids(s.binarize())
        grids.append(np.stack([tenon_occ, mort_occ]).astype(np.float32))
    return np.stack(grids)


def _softmax_xent(logits: ad.Tensor, onehot: np.ndarray) -> ad.Tensor:
    shift = logits.data.max(axis=1, keepdims=True)  # constant: exact logsumexp gradient
    e = ad.exp(ad.sub(logits, ad.constant(shift)))
    log_z = ad.add(ad.log(ad.tsum(e, axis=1)), ad.constant(shift[:, 0]))
    picked = ad.tsum(ad.mul(logits, ad.constant(onehot, dtype=np.float32)), axis=1)
    return ad.tmean(ad.sub(log_z, picked))


def train_mode_classifier(
    samples: list[ShapeSample],
    labels: list[int],
    seed: int = 0,
    holdout_fraction: float = 0.25,
    lr: float = 0.05,
    batch_size: int = 32,
    max_epochs: int = 60,
    target_accuracy: float = 0.95,
) -> ModeClassifier:
    """Fit the mode classifier; stops once held-out accuracy reaches the target."""
    if len(samples) != len(labels):
        raise ContractError("samples and labels must align")
    grids = sample_world_grids(samples)
    y = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(5,)))
    order = rng.permutation(len(samples))
    n_hold = max(1, int(len(samples) * holdout_fraction))
    hold, tr = order[:n_hold], order[n_hold:]
    if len(tr) == 0:
        raise ContractError("no training samples left after holdout split")
    clf = ModeClassifier(samples[0].resolution, seed=seed)
    params = list(clf.params.values())
    onehot = np.eye(N_MODES, dtype=np.float32)[y]
    for epoch in range(max_epochs):
        perm = rng.permutation(len(tr))
        for start in range(0, len(tr), batch_size):
            idx = tr[perm[start : start + batch_size]]
            with Tape() as tape:
                loss = _softmax_xent(clf.logits(grids[idx]), onehot[idx])
            grads = tape.gradients(loss, params)
            for p, g in zip(params, grads):
                np.multiply(g, lr, out=g)
                np.subtract(p.data, g, out=p.data)
        pred = clf.predict_proba(grids[hold]).argmax(axis=1)
        acc = float((pred == y[hold]).mean())
        clf.val_accuracy = acc
        log.debug("mode classifier epoch %d: holdout accuracy %.3f", epoch, acc)
        if acc >= target_accuracy:
            break
    return clf


def inception_mode_score(samples: list[ShapeSample], classifier: ModeClassifier) -> float:
    """exp(E_x KL(p(mode|x) || marginal)): 1 (uninformative) .. N_MODES."""
    if classifier.val_accuracy is None:
        raise ContractError("classifier has not been trained")
    if not samples:
        raise ContractError("inception score needs at least one sample")
    p = classifier.predict_proba(sample_world_grids(samples))
    marginal = p.mean(axis=0, keepdims=True)
    kl = (p * (np.log(p) - np.log(marginal))).sum(axis=1)
    return float(np.exp(kl.mean()))
