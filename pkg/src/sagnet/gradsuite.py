"""Finite-difference gradient checks for every layer and the full loss.

Checks run at float64 on tiny dimensions so whole parameter tensors can be
probed element by element. Shared by the `grad-check` CLI command and the
acceptance suite.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import layers, training
from .autodiff import GradCheckReport, Tensor
from .layers import ParamSet
from .model import ModelConfig, SAGNet
from .shapes import pair_index_list

LAYER_TOL = 1e-4
END_TO_END_TOL = 1e-3


def _ps(seed: int) -> ParamSet:
    return ParamSet(np.random.default_rng(seed), dtype=np.float64)


def _data(rng: np.random.Generator, *shape) -> np.ndarray:
    return rng.standard_normal(shape)


def _named(ps: ParamSet) -> list[tuple[str, Tensor]]:
    return list(ps.params.items())


def check_conv3d(seed: int, tol: float = LAYER_TOL) -> GradCheckReport:
    ps = _ps(seed)
    conv = layers.Conv3d(ps, "conv", 1, 2)
    rng = np.random.default_rng(seed + 100)
    x = ad.constant(_data(rng, 2, 1, 4, 4, 4), dtype=np.float64)
    return ad.grad_check(lambda: ad.tsum(ad.square(conv(x))), _named(ps), tol)


def check_conv3d_transpose(seed: int, tol: float = LAYER_TOL) -> GradCheckReport:
    ps = _ps(seed)
    tconv = layers.ConvTranspose3d(ps, "tconv", 2, 1)
    rng = np.random.default_rng(seed + 100)
    x = ad.constant(_data(rng, 2, 2, 2, 2, 2), dtype=np.float64)
    return ad.grad_check(lambda: ad.tsum(ad.square(tconv(x))), _named(ps), tol)


def check_gru_step(seed: int, tol: float = LAYER_TOL) -> GradCheckReport:
    ps = _ps(seed)
    gru = layers.GRUCell(ps, "gru", 5, 5)
    rng = np.random.default_rng(seed + 100)
    h0 = ad.constant(_data(rng, 2, 5), dtype=np.float64)
    x = ad.constant(_data(rng, 2, 5), dtype=np.float64)
    return ad.grad_check(lambda: ad.tsum(ad.square(gru.step(h0, x))), _named(ps), tol)


def check_gru_chain(seed: int, tol: float = LAYER_TOL) -> GradCheckReport:
    ps = _ps(seed)
    gru = layers.GRUCell(ps, "gru", 4, 4)
    rng = np.random.default_rng(seed + 100)
    xs = [ad.constant(_data(rng, 2, 4), dtype=np.float64) for _ in range(3)]

    def fn():
        return ad.tsum(ad.square(gru.fold(xs)))

    return ad.grad_check(fn, _named(ps), tol)


def check_geo_encoder(seed: int, tol: float = LAYER_TOL) -> GradCheckReport:
    ps = _ps(seed)
    enc = layers.GeoEncoder(ps, "enc", 4, (2, 3), 5)
    rng = np.random.default_rng(seed + 100)
    x = ad.constant(rng.random((2, 64)), dtype=np.float64)
    return ad.grad_check(lambda: ad.tsum(ad.square(enc(x))), _named(ps), tol)


def check_geo_decoder(seed: int, tol: float = LAYER_TOL) -> GradCheckReport:
    ps = _ps(seed)
    dec = layers.GeoDecoder(ps, "dec", 4, (2, 3), 5)
    rng = np.random.default_rng(seed + 100)
    f = ad.constant(_data(rng, 2, 5), dtype=np.float64)
    return ad.grad_check(lambda: ad.tsum(ad.square(dec(f))), _named(ps), tol)


def check_str_coders(seed: int, tol: float = LAYER_TOL) -> GradCheckReport:
    ps = _ps(seed)
    enc = layers.StrEncoder(ps, "senc", 5)
    dec = layers.StrDecoder(ps, "sdec", 5)
    rng = np.random.default_rng(seed + 100)
    pair = ad.constant(rng.random((2, 12)), dtype=np.float64)
    return ad.grad_check(lambda: ad.tsum(ad.square(dec(enc(pair)))), _named(ps), tol)


def check_attention(seed: int, tol: float = LAYER_TOL) -> GradCheckReport:
    ps = _ps(seed)
    hd, k = 4, 3
    gate_g = layers.AttentionGate(ps, "fg", hd)
    gate_s = layers.AttentionGate(ps, "fs", hd)
    pairs = pair_index_list(k)
    rng = np.random.default_rng(seed + 100)
    h = [ad.constant(_data(rng, 2, hd), dtype=np.float64) for _ in range(k)]
    s = [ad.constant(_data(rng, 2, hd), dtype=np.float64) for _ in range(len(pairs))]

    def fn():
        mg, ms = layers.attention_messages(gate_g, gate_s, h, s, pairs)
        total = None
        for m in mg + ms:
            term = ad.tsum(ad.square(m))
            total = term if total is None else ad.add(total, term)
        return total

    return ad.grad_check(fn, _named(ps), tol)


LAYER_CHECKS = {
    "conv3d": check_conv3d,
    "conv3d_transpose": check_conv3d_transpose,
    "gru_step": check_gru_step,
    "gru_chain3": check_gru_chain,
    "geo_encoder": check_geo_encoder,
    "geo_decoder": check_geo_decoder,
    "str_coders": check_str_coders,
    "attention_messages": check_attention,
}


def tiny_model(seed: int, k: int = 2) -> SAGNet:
    config = ModelConfig(
        k=k,
        resolution=4,
        hidden_dim=4,
        latent_dim=3,
        exchange_iters=2,
        channels=(2, 2),
        seed=seed,
    )
    return SAGNet(config, dtype=np.float64)


def check_end_to_end(seed: int, tol: float = END_TO_END_TOL) -> GradCheckReport:
    """FD check of the full phase-2 training loss through a tiny model."""
    model = tiny_model(seed)
    rng = np.random.default_rng(seed + 200)
    b, k, r = 1, model.config.k, model.config.resolution
    voxels = (rng.random((b, k, r**3)) < 0.5).astype(np.float64)
    boxes = rng.random((b, k, 6))
    mask = np.ones((b, k))
    pair12 = np.concatenate(
        [boxes[:, [i for i, _ in model.pairs]], boxes[:, [j for _, j in model.pairs]]], axis=2
    )
    noise = rng.standard_normal((b, model.config.latent_dim))

    def fn():
        enc = model.encode_batch(voxels, boxes, mask)
        sigma = ad.exp(enc.logsigma)
        z = ad.add(enc.mu, ad.mul(sigma, ad.constant(noise, dtype=np.float64)))
        dec = model.decode_batch(z, mask)
        l_f = training.batch_reconstruction_loss(model, dec, voxels, pair12, mask)
        l_kl = training.batch_kl_loss(enc.mu, enc.logsigma)
        r_reg = training.batch_feature_reg(model, enc.state, dec, mask)
        return ad.add(l_f, ad.add(ad.mul(l_kl, 0.5), ad.mul(r_reg, 0.5)))

    return ad.grad_check(fn, list(model.params.items()), tol)


def run_suite(seeds=(0, 1, 2)) -> list[tuple[str, GradCheckReport]]:
    """All layer checks plus the end-to-end check, for each seed."""
    results = []
    for seed in seeds:
        for name, check in LAYER_CHECKS.items():
            results.append((f"{name}[seed {seed}]", check(seed)))
        results.append((f"end_to_end[seed {seed}]", check_end_to_end(seed)))
    return results
