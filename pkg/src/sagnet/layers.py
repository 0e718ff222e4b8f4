"""Neural building blocks: conv voxel coders, box coders, GRU cell, attention.

All parameters are created through a ParamSet in a fixed order from one seeded
generator, so initialization is deterministic. Weights are Glorot-uniform
(+-sqrt(6/(fan_in+fan_out))), biases zero.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, FormatError
from .shapes import PairIndex

CKPT_MAGIC = b"SAGW"
CKPT_VERSION = 1


class ParamSet:
    """Ordered registry of named parameters."""

    def __init__(self, rng: np.random.Generator, dtype=np.float32):
        self.rng = rng
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.params:
            raise ContractError(f"duplicate parameter name '{name}'")
        t = ad.parameter(data.astype(self.dtype))
        self.params[name] = t
        return t

    def glorot(self, name: str, shape: tuple[int, ...], fan_in: int, fan_out: int) -> Tensor:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return self.add(name, self.rng.uniform(-limit, limit, size=shape))

    def zeros(self, name: str, shape: tuple[int, ...]) -> Tensor:
        return self.add(name, np.zeros(shape))


def zeros_like_batch(batch: int, dim: int, dtype=np.float32) -> Tensor:
    return ad.constant(np.zeros((batch, dim), dtype=dtype), dtype=dtype)


class Linear:
    """Fully-connected layer; activation is applied by the caller."""

    def __init__(self, ps: ParamSet, name: str, in_dim: int, out_dim: int):
        self.w = ps.glorot(f"{name}.w", (in_dim, out_dim), in_dim, out_dim)
        self.b = ps.zeros(f"{name}.b", (out_dim,))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.bias_add(ad.matmul(x, self.w), self.b)


class GRUCell:
    """Standard GRU; update gate u keeps the old hidden: h' = u*h + (1-u)*c."""

    def __init__(self, ps: ParamSet, name: str, in_dim: int, hidden: int):
        self.hidden = hidden
        limit_x = np.sqrt(6.0 / (in_dim + hidden))
        limit_h = np.sqrt(6.0 / (hidden + hidden))
        wx = np.concatenate(
            [ps.rng.uniform(-limit_x, limit_x, size=(in_dim, hidden)) for _ in range(3)], axis=1
        )
        wh_ru = np.concatenate(
            [ps.rng.uniform(-limit_h, limit_h, size=(hidden, hidden)) for _ in range(2)], axis=1
        )
        wh_c = ps.rng.uniform(-limit_h, limit_h, size=(hidden, hidden))
        self.wx = ps.add(f"{name}.wx", wx)  # gate order [r, u, c]
        self.bx = ps.zeros(f"{name}.bx", (3 * hidden,))
        self.wh_ru = ps.add(f"{name}.wh_ru", wh_ru)
        self.wh_c = ps.add(f"{name}.wh_c", wh_c)

    def step(self, h: Tensor, x: Tensor) -> Tensor:
        hd = self.hidden
        gx = ad.bias_add(ad.matmul(x, self.wx), self.bx)
        gh = ad.matmul(h, self.wh_ru)
        r = ad.sigmoid(ad.add(ad.slice_last(gx, 0, hd), ad.slice_last(gh, 0, hd)))
        u = ad.sigmoid(ad.add(ad.slice_last(gx, hd, 2 * hd), ad.slice_last(gh, hd, 2 * hd)))
        c = ad.tanh(ad.add(ad.slice_last(gx, 2 * hd, 3 * hd), ad.matmul(ad.mul(r, h), self.wh_c)))
        return ad.add(ad.mul(u, h), ad.mul(ad.sub(1.0, u), c))

    def fold(self, inputs: list[Tensor]) -> Tensor:
        """Run over a sequence from a zero state; return the final hidden."""
        h = zeros_like_batch(inputs[0].shape[0], self.hidden, dtype=inputs[0].dtype)
        for x in inputs:
            h = self.step(h, x)
        return h

    def unroll(self, h0: Tensor, steps: int) -> list[Tensor]:
        """Run `steps` zero-input steps from h0; return all hidden states."""
        zero = zeros_like_batch(h0.shape[0], self.hidden, dtype=h0.dtype)
        out = []
        h = h0
        for _ in range(steps):
            h = self.step(h, zero)
            out.append(h)
        return out


class Conv3d:
    def __init__(self, ps: ParamSet, name: str, c_in: int, c_out: int):
        taps = ad.KERNEL**3
        self.w = ps.glorot(f"{name}.w", (c_out, c_in, ad.KERNEL, ad.KERNEL, ad.KERNEL),
                           c_in * taps, c_out * taps)
        self.b = ps.zeros(f"{name}.b", (c_out, 1, 1, 1))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.bias_add(ad.conv3d(x, self.w), self.b)


class ConvTranspose3d:
    def __init__(self, ps: ParamSet, name: str, c_in: int, c_out: int):
        taps = ad.KERNEL**3
        self.w = ps.glorot(f"{name}.w", (c_in, c_out, ad.KERNEL, ad.KERNEL, ad.KERNEL),
                           c_in * taps, c_out * taps)
        self.b = ps.zeros(f"{name}.b", (c_out, 1, 1, 1))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.bias_add(ad.conv3d_transpose(x, self.w), self.b)


def conv_stages(resolution: int) -> int:
    """Stride-2 stages needed to reduce r^3 to 1^3."""
    n = resolution.bit_length() - 1
    if resolution < 4 or (1 << n) != resolution:
        raise ContractError(f"resolution must be a power of two >= 4, got {resolution}")
    return n


def default_channels(resolution: int) -> tuple[int, ...]:
    base = (8, 16, 32, 64, 128)
    n = conv_stages(resolution)
    if n <= len(base):
        return base[:n]
    widths = list(base)
    while len(widths) < n:
        widths.append(widths[-1] * 2)
    return tuple(widths)


class GeoEncoder:
    """Voxel grid -> feature: stride-2 convs with tanh, flatten, linear FC."""

    def __init__(self, ps: ParamSet, name: str, resolution: int,
                 channels: tuple[int, ...], feature_dim: int):
        n = conv_stages(resolution)
        if len(channels) != n:
            raise ContractError(f"need {n} channel widths for r={resolution}, got {len(channels)}")
        self.resolution = resolution
        self.channels = channels
        self.convs = []
        c_prev = 1
        for i, c in enumerate(channels):
            self.convs.append(Conv3d(ps, f"{name}.conv{i}", c_prev, c))
            c_prev = c
        self.fc = Linear(ps, f"{name}.fc", channels[-1], feature_dim)

    def __call__(self, vox: Tensor) -> Tensor:
        b, size = vox.shape
        r = self.resolution
        if size != r**3:
            raise ContractError(f"expected {r ** 3} voxels per part, got {size}")
        h = ad.reshape(vox, (b, 1, r, r, r))
        for conv in self.convs:
            h = ad.tanh(conv(h))
        return self.fc(ad.reshape(h, (b, self.channels[-1])))


class GeoDecoder:
    """Feature -> voxel grid: FC to a 1^3 seed, mirrored transposed convs, sigmoid."""

    def __init__(self, ps: ParamSet, name: str, resolution: int,
                 channels: tuple[int, ...], feature_dim: int):
        n = conv_stages(resolution)
        if len(channels) != n:
            raise ContractError(f"need {n} channel widths for r={resolution}, got {len(channels)}")
        self.resolution = resolution
        self.top = channels[-1]
        self.fc = Linear(ps, f"{name}.fc", feature_dim, self.top)
        rev = list(channels[::-1]) + [1]
        self.tconvs = []
        for i in range(n):
            self.tconvs.append(ConvTranspose3d(ps, f"{name}.tconv{i}", rev[i], rev[i + 1]))

    def __call__(self, feature: Tensor) -> Tensor:
        b = feature.shape[0]
        h = ad.reshape(ad.tanh(self.fc(feature)), (b, self.top, 1, 1, 1))
        for tconv in self.tconvs[:-1]:
            h = ad.tanh(tconv(h))
        h = ad.sigmoid(self.tconvs[-1](h))
        return ad.reshape(h, (b, self.resolution**3))


class StrEncoder:
    """Bounding-box pair (12 reals) -> feature, single FC + tanh."""

    def __init__(self, ps: ParamSet, name: str, feature_dim: int):
        self.fc = Linear(ps, name, 12, feature_dim)

    def __call__(self, pair12: Tensor) -> Tensor:
        return ad.tanh(self.fc(pair12))


class StrDecoder:
    """Feature -> bounding-box pair (12 reals), linear FC."""

    def __init__(self, ps: ParamSet, name: str, feature_dim: int):
        self.fc = Linear(ps, name, feature_dim, 12)

    def __call__(self, feature: Tensor) -> Tensor:
        return self.fc(feature)


class AttentionGate:
    """FC + sigmoid mapping a concatenated feature pair (2H) to an H gate."""

    def __init__(self, ps: ParamSet, name: str, hidden: int):
        self.fc = Linear(ps, name, 2 * hidden, hidden)

    def __call__(self, a: Tensor, b: Tensor) -> Tensor:
        return ad.sigmoid(self.fc(ad.concat([a, b])))


def attention_messages(
    gate_g: AttentionGate,
    gate_s: AttentionGate,
    h: list[Tensor],
    s: list[Tensor],
    pairs: PairIndex,
    part_mask: list[Tensor] | None = None,
    pair_mask: list[Tensor] | None = None,
) -> tuple[list[Tensor], list[Tensor]]:
    """Feedback messages exchanged between the geometry and structure branches.

    m_i       = sum_{j != i} gate_g([h_i, s_ij]) * s_ij
    m_{i,j}   = gate_s([s_ij, h_i]) * h_i + gate_s([s_ij, h_j]) * h_j
    Messages for absent parts/pairs are zeroed via the mask columns.
    """
    k = len(h)
    if len(s) != len(pairs) or pairs.k != k:
        raise ContractError(f"state holds {len(h)} parts / {len(s)} pairs, index expects "
                            f"{pairs.k} / {len(pairs)}")
    geo_msgs = []
    for i in range(k):
        msg = None
        for j in range(k):
            if j == i:
                continue
            sp = s[pairs.position(i, j)]
            term = ad.mul(gate_g(h[i], sp), sp)
            msg = term if msg is None else ad.add(msg, term)
        if part_mask is not None:
            msg = ad.mul(msg, part_mask[i])
        geo_msgs.append(msg)
    str_msgs = []
    for p, (i, j) in enumerate(pairs):
        msg = ad.add(
            ad.mul(gate_s(s[p], h[i]), h[i]),
            ad.mul(gate_s(s[p], h[j]), h[j]),
        )
        if pair_mask is not None:
            msg = ad.mul(msg, pair_mask[p])
        str_msgs.append(msg)
    return geo_msgs, str_msgs


# ---------------------------------------------------------------------------
# Checkpoints: magic "SAGW", u32 version, u32 tensor count; per tensor
# u32 name length, UTF-8 name, u32 ndim, u32 dims..., f32 data. Little-endian.
# ---------------------------------------------------------------------------


def save_checkpoint(path: str | Path, params: dict[str, Tensor]) -> None:
    out = bytearray()
    out += CKPT_MAGIC
    out += struct.pack("<II", CKPT_VERSION, len(params))
    for name, t in params.items():
        if t.data.dtype != np.float32:
            raise ContractError(f"checkpoints store float32 tensors; '{name}' is {t.data.dtype}")
        enc = name.encode("utf-8")
        out += struct.pack("<I", len(enc))
        out += enc
        out += struct.pack("<I", t.data.ndim)
        out += struct.pack(f"<{t.data.ndim}I", *t.data.shape)
        out += t.data.astype("<f4", copy=False).tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    off = 0

    def need(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(raw):
            raise FormatError(f"truncated checkpoint while reading {what}", off)
        chunk = raw[off : off + n]
        off += n
        return chunk

    if need(4, "magic") != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic, expected {CKPT_MAGIC!r}", 0)
    version, count = struct.unpack("<II", need(8, "header"))
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", need(4, "name length"))
        name = need(name_len, "name").decode("utf-8")
        (ndim,) = struct.unpack("<I", need(4, "ndim"))
        dims = struct.unpack(f"<{ndim}I", need(4 * ndim, "dims"))
        size = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(need(4 * size, f"data of {name}"), dtype="<f4")
        tensors[name] = data.reshape(dims).copy()
    if off != len(raw):
        raise FormatError("trailing bytes after tensor data", off)
    return tensors


def load_into(params: dict[str, Tensor], path: str | Path) -> None:
    """Load a checkpoint into an existing parameter set (names/shapes must match)."""
    tensors = load_checkpoint(path)
    if set(tensors) != set(params):
        missing = set(params) - set(tensors)
        extra = set(tensors) - set(params)
        raise ContractError(f"checkpoint mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
    for name, t in params.items():
        if tensors[name].shape != t.data.shape:
            raise ContractError(
                f"checkpoint tensor '{name}' has shape {tensors[name].shape}, expected {t.data.shape}"
            )
        t.data = tensors[name].astype(t.data.dtype)
