"""Two-phase training: reconstruction warm-up, then annealed KL and feature
regularization, optimized with plain SGD.

Phase 1 minimizes the reconstruction loss only (this warms the autoencoder up
and avoids posterior collapse). Phase 2 adds the KL term and the encoder/
decoder feature regularizer, with both weights ramped linearly from 0 to 0.8.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import ContractError, NumericFault
from .model import DecodedBatch, DecodedFeatures, ExchangeState, LatentDistribution, SAGNet
from .shapes import ShapeSample

log = logging.getLogger(__name__)

BCE_EPS = 1e-6


@dataclass
class AnnealSchedule:
    """Linear 0 -> max ramp of the KL and regularizer weights in phase 2."""

    lambda_max: float = 0.8
    eta_max: float = 0.8
    ramp_iters: int = 60000
    phase1_iters: int = 0
    phase2_iters: int = 0

    def _ramp(self, i: int, top: float) -> float:
        if i <= 0:
            return 0.0
        if i >= self.ramp_iters:
            return top
        return top * (i / self.ramp_iters)

    def lambda_at(self, i: int) -> float:
        """KL weight at phase-2 iteration i."""
        return self._ramp(i, self.lambda_max)

    def eta_at(self, i: int) -> float:
        """Feature-regularizer weight at phase-2 iteration i."""
        return self._ramp(i, self.eta_max)


@dataclass
class LossReport:
    iter: int
    l_f: float
    l_kl: float
    r_reg: float
    total: float
    lam: float
    eta: float

    CSV_HEADER = ("iter", "l_f", "l_kl", "r_reg", "total", "lambda", "eta")

    def csv_row(self) -> list:
        return [self.iter, self.l_f, self.l_kl, self.r_reg, self.total, self.lam, self.eta]


@dataclass
class TrainConfig:
    iters: int = 2000
    phase1_iters: int | None = None  # default: 20% of iters
    batch_size: int = 10
    lr: float = 0.001
    momentum: float = 0.0
    clip_norm: float = 5.0
    ramp_iters: int = 60000
    lambda_max: float = 0.8
    eta_max: float = 0.8
    checkpoint_every: int = 1000
    seed: int = 0

    def resolved_phase1(self) -> int:
        return round(0.2 * self.iters) if self.phase1_iters is None else self.phase1_iters

    def schedule(self) -> AnnealSchedule:
        p1 = self.resolved_phase1()
        return AnnealSchedule(
            lambda_max=self.lambda_max,
            eta_max=self.eta_max,
            ramp_iters=self.ramp_iters,
            phase1_iters=p1,
            phase2_iters=self.iters - p1,
        )


# ---------------------------------------------------------------------------
# Loss terms (tape versions operate on batches; plain-number versions provide
# the documented per-sample surface)
# ---------------------------------------------------------------------------


def batch_reconstruction_loss(
    model: SAGNet,
    decoded: DecodedBatch,
    voxels: np.ndarray,
    pair12: np.ndarray,
    mask: np.ndarray,
) -> Tensor:
    """Mean over the batch of: sum_i mask_i * meanBCE(vox_i) + w_b * sum_p ||d12_p||^2."""
    k = model.config.k
    size = model.config.resolution**3
    total = None
    for i in range(k):
        p = ad.clip(decoded.voxels[i], BCE_EPS, 1.0 - BCE_EPS)
        t = ad.constant(voxels[:, i], dtype=model.dtype)
        ll = ad.add(ad.mul(t, ad.log(p)), ad.mul(ad.sub(1.0, t), ad.log(ad.sub(1.0, p))))
        per_sample = ad.mul(ad.tsum(ll, axis=1), -1.0 / size)
        term = ad.mul(per_sample, ad.constant(mask[:, i], dtype=model.dtype))
        total = term if total is None else ad.add(total, term)
    w_b = model.config.box_loss_weight
    for p_idx, (i, j) in enumerate(model.pairs):
        d = ad.sub(decoded.pair12[p_idx], ad.constant(pair12[:, p_idx], dtype=model.dtype))
        per_sample = ad.tsum(ad.square(d), axis=1)
        pm = ad.constant(mask[:, i] * mask[:, j], dtype=model.dtype)
        total = ad.add(total, ad.mul(ad.mul(per_sample, pm), w_b))
    return ad.tmean(total)


def batch_kl_loss(mu: Tensor, logsigma: Tensor) -> Tensor:
    """Mean over the batch of KL(N(mu, sigma) || N(0, I)), closed form."""
    inner = ad.sub(
        ad.add(ad.square(mu), ad.exp(ad.mul(logsigma, 2.0))),
        ad.add(ad.mul(logsigma, 2.0), 1.0),
    )
    return ad.tmean(ad.mul(ad.tsum(inner, axis=1), 0.5))


def batch_feature_reg(
    model: SAGNet, state: ExchangeState, decoded: DecodedBatch, mask: np.ndarray
) -> Tensor:
    """Mean over the batch of summed squared feature distances (present only)."""
    total = None
    for i in range(model.config.k):
        d = ad.tsum(ad.square(ad.sub(decoded.hg_prime[i], state.h[i])), axis=1)
        term = ad.mul(d, ad.constant(mask[:, i], dtype=model.dtype))
        total = term if total is None else ad.add(total, term)
    for p, (i, j) in enumerate(model.pairs):
        d = ad.tsum(ad.square(ad.sub(decoded.hs_prime[p], state.s[p])), axis=1)
        total = ad.add(total, ad.mul(d, ad.constant(mask[:, i] * mask[:, j], dtype=model.dtype)))
    return ad.tmean(total)


def loss_reconstruction(sample: ShapeSample, decoded: ShapeSample, w_b: float = 10.0) -> float:
    """Per-sample reconstruction loss between a target and a decoded sample.

    Voxel term: per-part binary cross-entropy averaged over voxels (decoded
    probabilities clamped to [1e-6, 1-1e-6]); box term: squared error on the
    12-D vector of each present pair, weighted by w_b.
    """
    if decoded.k != sample.k:
        raise ContractError(f"decoded k={decoded.k} != sample k={sample.k}")
    total = 0.0
    for i in range(sample.k):
        if not sample.mask.flags[i]:
            continue
        p = np.clip(decoded.parts[i].occupancy.astype(np.float64), BCE_EPS, 1.0 - BCE_EPS)
        t = sample.parts[i].occupancy.astype(np.float64)
        total += float(-(t * np.log(p) + (1.0 - t) * np.log(1.0 - p)).mean())
    from .shapes import pair_index_list

    for i, j in pair_index_list(sample.k):
        if sample.mask.flags[i] and sample.mask.flags[j]:
            target = np.concatenate([sample.boxes[i].as_array(), sample.boxes[j].as_array()])
            pred = np.concatenate([decoded.boxes[i].as_array(), decoded.boxes[j].as_array()])
            total += w_b * float(((pred.astype(np.float64) - target.astype(np.float64)) ** 2).sum())
    return total


def loss_kl(dist: LatentDistribution) -> float:
    """Closed-form KL of the latent Gaussian to N(0, I)."""
    mu = dist.mu.astype(np.float64)
    sigma = dist.sigma.astype(np.float64)
    return float(0.5 * np.sum(mu**2 + sigma**2 - 1.0 - 2.0 * np.log(sigma)))


def loss_feature_reg(state: ExchangeState, decoded: DecodedFeatures,
                     mask: np.ndarray | None = None) -> float:
    """Sum of squared L2 feature distances over present parts and pairs."""
    h = np.stack([t.data[0] for t in state.h]).astype(np.float64)
    s = np.stack([t.data[0] for t in state.s]).astype(np.float64)
    if decoded.hg_prime.shape != h.shape or decoded.hs_prime.shape != s.shape:
        raise ContractError("decoded feature dims do not match encoder state")
    k = h.shape[0]
    part_on = np.ones(k, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    from .shapes import pair_index_list

    total = 0.0
    for i in range(k):
        if part_on[i]:
            total += float(((decoded.hg_prime[i].astype(np.float64) - h[i]) ** 2).sum())
    for p, (i, j) in enumerate(pair_index_list(k)):
        if part_on[i] and part_on[j]:
            total += float(((decoded.hs_prime[p].astype(np.float64) - s[p]) ** 2).sum())
    return total


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def dataset_arrays(samples: list[ShapeSample], model: SAGNet):
    """Stack a dataset into (voxels, boxes, pair12, mask) training arrays."""
    if not samples:
        raise ContractError("training dataset is empty")
    k, r = model.config.k, model.config.resolution
    for s in samples:
        if s.k != k or s.resolution != r:
            raise ContractError("dataset sample does not match the model's k/r")
    voxels = np.stack([[p.occupancy for p in s.parts] for s in samples]).astype(model.dtype)
    boxes = np.stack([[b.as_array() for b in s.boxes] for s in samples]).astype(model.dtype)
    mask = np.stack([s.mask.flags for s in samples]).astype(model.dtype)
    pair12 = np.concatenate(
        [boxes[:, [i for i, _ in model.pairs]], boxes[:, [j for _, j in model.pairs]]], axis=2
    )
    return voxels, boxes, pair12, mask


class _BatchSampler:
    """Fixed-size batches drawn from repeated seeded permutations."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n = n
        self.batch_size = batch_size
        self.rng = rng
        self._order = rng.permutation(n)
        self._ptr = 0

    def next(self) -> np.ndarray:
        out = []
        while len(out) < self.batch_size:
            if self._ptr >= self.n:
                self._order = self.rng.permutation(self.n)
                self._ptr = 0
            take = min(self.batch_size - len(out), self.n - self._ptr)
            out.extend(self._order[self._ptr : self._ptr + take])
            self._ptr += take
        return np.asarray(out)


@dataclass
class TrainResult:
    model: SAGNet
    reports: list[LossReport]
    out_dir: Path | None
    aborted: bool = False


def write_loss_log(reports: list[LossReport], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(LossReport.CSV_HEADER)
        for r in reports:
            writer.writerow(r.csv_row())


def train(
    samples: list[ShapeSample],
    model: SAGNet,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
) -> TrainResult:
    """Run the two-phase loop; writes checkpoint.sagw / config.json / loss_log.csv.

    Deterministic for a fixed seed. On a numeric fault the loop aborts and the
    last periodic checkpoint on disk is left as the recovery point.
    """
    voxels, boxes, pair12, mask = dataset_arrays(samples, model)
    n = voxels.shape[0]
    schedule = cfg.schedule()
    phase1 = cfg.resolved_phase1()
    batch_rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(0,)))
    noise_rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(2,)))
    sampler = _BatchSampler(n, cfg.batch_size, batch_rng)

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    def save_checkpoint():
        if out_path is not None:
            model.save(out_path)

    save_checkpoint()  # guarantees a recovery point exists
    params = list(model.params.values())
    velocity = [np.zeros_like(p.data) for p in params] if cfg.momentum else None
    reports: list[LossReport] = []
    aborted = False

    for it in range(cfg.iters):
        idx = sampler.next()
        vb, bb, pb, mb = voxels[idx], boxes[idx], pair12[idx], mask[idx]
        in_phase2 = it >= phase1
        lam = schedule.lambda_at(it - phase1) if in_phase2 else 0.0
        eta = schedule.eta_at(it - phase1) if in_phase2 else 0.0
        try:
            with Tape() as tape:
                enc = model.encode_batch(vb, bb, mb)
                if in_phase2:
                    # phase 2 samples the latent; phase 1 is a deterministic
                    # autoencoder warm-up through the mean
                    noise = noise_rng.standard_normal((cfg.batch_size, model.config.latent_dim))
                    sigma = ad.exp(enc.logsigma)
                    z = ad.add(enc.mu, ad.mul(sigma, ad.constant(noise, dtype=model.dtype)))
                else:
                    z = enc.mu
                dec = model.decode_batch(z, mb)
                l_f = batch_reconstruction_loss(model, dec, vb, pb, mb)
                l_kl = batch_kl_loss(enc.mu, enc.logsigma)
                r_reg = batch_feature_reg(model, enc.state, dec, mb)
                if in_phase2:
                    total = ad.add(l_f, ad.add(ad.mul(l_kl, lam), ad.mul(r_reg, eta)))
                else:
                    total = l_f
            grads = tape.gradients(total, params)
            gn = float(np.sqrt(sum(float(np.vdot(g, g)) for g in grads)))
            if not np.isfinite(gn):
                raise NumericFault("non-finite gradient norm")
            scale = 1.0
            if cfg.clip_norm and gn > cfg.clip_norm:
                log.debug("iter %d: clipping gradient norm %.3f -> %.3f", it, gn, cfg.clip_norm)
                scale = cfg.clip_norm / gn
            if velocity is None:
                # gradient arrays are owned here; scale them in place
                for p, g in zip(params, grads):
                    np.multiply(g, cfg.lr * scale, out=g)
                    np.subtract(p.data, g, out=p.data)
            else:
                for p, g, v in zip(params, grads, velocity):
                    v *= cfg.momentum
                    v += g * scale
                    p.data -= (cfg.lr * v).astype(p.data.dtype, copy=False)
        except NumericFault as e:
            log.error("iter %d: numeric fault, aborting (last checkpoint kept): %s", it, e)
            aborted = True
            break
        lf_v, lkl_v, rr_v = l_f.item(), l_kl.item(), r_reg.item()
        total_v = lf_v + lam * lkl_v + eta * rr_v if in_phase2 else lf_v
        reports.append(LossReport(it, lf_v, lkl_v, rr_v, total_v, lam, eta))
        if not aborted and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            save_checkpoint()

    if not aborted:
        save_checkpoint()
    if out_path is not None:
        write_loss_log(reports, out_path / "loss_log.csv")
    result = TrainResult(model=model, reports=reports, out_dir=out_path, aborted=aborted)
    if aborted:
        raise NumericFault(
            f"training aborted at iteration {len(reports)}; "
            f"last good checkpoint retained{f' in {out_path}' if out_path else ''}"
        )
    return result
