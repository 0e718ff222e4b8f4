"""Part-based shape data model and the binary dataset format.

A shape is k parts; each part carries a voxel occupancy grid over its own
axis-aligned bounding box, plus a presence mask. Boxes live in normalized
shape coordinates (a unit cube enclosing the shape). Voxel grids are stored
flat, x-fastest (linear index = x + y*r + z*r^2), and bit-packed on disk.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError

MAGIC = b"SAGS"
FORMAT_VERSION = 1
DEFAULT_RESOLUTION = 32


@dataclass(frozen=True)
class VoxelGrid:
    """Occupancy over a part's bounding box: r^3 values, x-fastest, in [0, 1].

    Binary in stored datasets; real-valued when produced by the model.
    """

    resolution: int
    occupancy: np.ndarray  # flat float32, length resolution**3

    def __post_init__(self):
        occ = np.ascontiguousarray(self.occupancy, dtype=np.float32)
        if occ.shape != (self.resolution**3,):
            raise ContractError(
                f"occupancy length {occ.size} != r^3 = {self.resolution ** 3}"
            )
        if not np.all(np.isfinite(occ)):
            raise ContractError("occupancy contains non-finite values")
        object.__setattr__(self, "occupancy", occ)

    @classmethod
    def empty(cls, resolution: int) -> "VoxelGrid":
        return cls(resolution, np.zeros(resolution**3, dtype=np.float32))

    def is_binary(self) -> bool:
        occ = self.occupancy
        return bool(np.all((occ == 0.0) | (occ == 1.0)))

    def dense(self) -> np.ndarray:
        """(r, r, r) array indexed [x, y, z]."""
        r = self.resolution
        return self.occupancy.reshape(r, r, r).transpose(2, 1, 0)

    @classmethod
    def from_dense(cls, dense: np.ndarray) -> "VoxelGrid":
        r = dense.shape[0]
        if dense.shape != (r, r, r):
            raise ContractError(f"dense grid must be cubic, got {dense.shape}")
        flat = np.ascontiguousarray(dense.transpose(2, 1, 0), dtype=np.float32)
        return cls(r, flat.reshape(-1))

    def binarize(self, threshold: float = 0.5) -> "VoxelGrid":
        return VoxelGrid(
            self.resolution, (self.occupancy >= threshold).astype(np.float32)
        )


@dataclass(frozen=True)
class Box6:
    """Axis-aligned box: center (3,) and positive extents (3,), normalized coords."""

    center: np.ndarray
    extents: np.ndarray

    def __post_init__(self):
        c = np.ascontiguousarray(self.center, dtype=np.float32)
        e = np.ascontiguousarray(self.extents, dtype=np.float32)
        if c.shape != (3,) or e.shape != (3,):
            raise ContractError("Box6 center/extents must each have 3 components")
        if not (np.all(np.isfinite(c)) and np.all(np.isfinite(e))):
            raise ContractError("Box6 contains non-finite values")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "extents", e)

    @classmethod
    def zero(cls) -> "Box6":
        return cls(np.zeros(3, dtype=np.float32), np.zeros(3, dtype=np.float32))

    @classmethod
    def from_array(cls, a: np.ndarray) -> "Box6":
        a = np.asarray(a, dtype=np.float32).reshape(6)
        return cls(a[:3].copy(), a[3:].copy())

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.center, self.extents])

    @property
    def lo(self) -> np.ndarray:
        return self.center - self.extents / 2

    @property
    def hi(self) -> np.ndarray:
        return self.center + self.extents / 2


@dataclass(frozen=True)
class PartMask:
    """Presence flags for the k canonical parts."""

    flags: np.ndarray  # bool, (k,)

    def __post_init__(self):
        f = np.ascontiguousarray(self.flags, dtype=bool)
        object.__setattr__(self, "flags", f)

    @classmethod
    def full(cls, k: int) -> "PartMask":
        return cls(np.ones(k, dtype=bool))

    def __len__(self) -> int:
        return len(self.flags)

    def count(self) -> int:
        return int(self.flags.sum())


@dataclass
class ShapeSample:
    """One training/inference unit: k voxel grids, k boxes, presence mask."""

    class_id: str
    parts: list[VoxelGrid]
    boxes: list[Box6]
    mask: PartMask

    @property
    def k(self) -> int:
        return len(self.parts)

    @property
    def resolution(self) -> int:
        return self.parts[0].resolution

    def validate(self) -> None:
        k = self.k
        if not (len(self.boxes) == k and len(self.mask) == k):
            raise ContractError("parts/boxes/mask lengths disagree")
        if self.mask.count() < 1:
            raise ContractError("a valid sample has at least one present part")
        for i in range(k):
            if self.parts[i].resolution != self.resolution:
                raise ContractError("all parts must share one resolution")
            if not self.mask.flags[i]:
                if np.any(self.parts[i].occupancy != 0):
                    raise ContractError(f"absent part {i} has nonzero voxels")
                if np.any(self.boxes[i].as_array() != 0):
                    raise ContractError(f"absent part {i} has nonzero box")

    def copy(self) -> "ShapeSample":
        return ShapeSample(
            class_id=self.class_id,
            parts=[VoxelGrid(p.resolution, p.occupancy.copy()) for p in self.parts],
            boxes=[Box6(b.center.copy(), b.extents.copy()) for b in self.boxes],
            mask=PartMask(self.mask.flags.copy()),
        )

    def binarize(self, threshold: float = 0.5) -> "ShapeSample":
        out = self.copy()
        out.parts = [p.binarize(threshold) for p in out.parts]
        return out


@dataclass(frozen=True)
class PairIndex:
    """All unordered part pairs (i, j), i < j, in lexicographic order."""

    k: int
    pairs: tuple[tuple[int, int], ...] = field(init=False)

    def __post_init__(self):
        object.__setattr__(
            self,
            "pairs",
            tuple((i, j) for i in range(self.k) for j in range(i + 1, self.k)),
        )

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def __getitem__(self, p: int) -> tuple[int, int]:
        return self.pairs[p]

    def position(self, i: int, j: int) -> int:
        """Index of the pair feature holding (i, j) (order-insensitive)."""
        if i == j:
            raise ContractError("no pair feature for (i, i)")
        a, b = min(i, j), max(i, j)
        if not (0 <= a and b < self.k):
            raise ContractError(f"pair ({i},{j}) out of range for k={self.k}")
        # pairs before row a: a*k - a*(a+1)/2; then offset within row a
        return a * self.k - a * (a + 1) // 2 + (b - a - 1)

    def pairs_of(self, i: int) -> list[int]:
        """Positions of all pairs involving part i, in partner order."""
        return [self.position(i, j) for j in range(self.k) if j != i]


def pair_index_list(k: int) -> PairIndex:
    """Pairwise relationship index for k parts; K = k*(k-1)/2 entries."""
    if k < 2:
        raise ContractError(f"need at least 2 parts for pairwise structure, got k={k}")
    return PairIndex(k)


def voxel_to_points(grid: VoxelGrid, box: Box6) -> np.ndarray:
    """One 3D point per occupied voxel: cell centers mapped affinely into the box.

    Returns (n, 3) float64 in normalized shape coordinates.
    """
    if not grid.is_binary():
        raise ContractError("voxel_to_points requires a binary grid")
    if not np.all(box.extents > 0):
        raise ContractError("voxel_to_points requires positive box extents")
    r = grid.resolution
    idx = np.flatnonzero(grid.occupancy)
    if idx.size == 0:
        return np.zeros((0, 3), dtype=np.float64)
    x = idx % r
    y = (idx // r) % r
    z = idx // (r * r)
    cells = np.stack([x, y, z], axis=1).astype(np.float64)
    lo = box.lo.astype(np.float64)
    ext = box.extents.astype(np.float64)
    return lo + (cells + 0.5) / r * ext


# ---------------------------------------------------------------------------
# Binary dataset format
#
# Per-shape file, little-endian:
#   magic "SAGS" (4B) | u32 version=1 | u32 k | u32 r
#   k mask bytes (0/1)
#   k * 6 f32 boxes (cx, cy, cz, sx, sy, sz)
#   k * ceil(r^3 / 8) bit-packed voxel bytes (x-fastest, LSB-first within a byte)
# Directory manifest: manifest.json
# ---------------------------------------------------------------------------


def _pack_voxels(grid: VoxelGrid) -> bytes:
    bits = grid.occupancy != 0.0
    return np.packbits(bits, bitorder="little").tobytes()


def _unpack_voxels(raw: bytes, r: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), bitorder="little")
    return bits[: r**3].astype(np.float32)


def encode_sample(sample: ShapeSample) -> bytes:
    sample.validate()
    for i, p in enumerate(sample.parts):
        if not p.is_binary():
            raise ContractError(f"part {i} is not binary; datasets store binary grids")
    k, r = sample.k, sample.resolution
    out = bytearray()
    out += MAGIC
    out += struct.pack("<III", FORMAT_VERSION, k, r)
    out += bytes(int(f) for f in sample.mask.flags)
    boxes = np.stack([b.as_array() for b in sample.boxes]).astype("<f4")
    out += boxes.tobytes()
    for p in sample.parts:
        out += _pack_voxels(p)
    return bytes(out)


def decode_sample(raw: bytes, class_id: str = "") -> ShapeSample:
    off = 0

    def need(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(raw):
            raise FormatError(f"truncated file while reading {what}", off)
        chunk = raw[off : off + n]
        off += n
        return chunk

    if need(4, "magic") != MAGIC:
        raise FormatError(f"bad magic, expected {MAGIC!r}", 0)
    version, k, r = struct.unpack("<III", need(12, "header"))
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if k < 1 or r < 1 or r > 1024:
        raise FormatError(f"implausible header k={k}, r={r}", 8)
    mask_raw = need(k, "mask")
    if any(b not in (0, 1) for b in mask_raw):
        raise FormatError("mask byte not in {0,1}", off - k)
    boxes_raw = need(k * 24, "boxes")
    boxes_arr = np.frombuffer(boxes_raw, dtype="<f4").reshape(k, 6)
    vox_bytes = (r**3 + 7) // 8
    parts = []
    for i in range(k):
        parts.append(VoxelGrid(r, _unpack_voxels(need(vox_bytes, f"part {i} voxels"), r)))
    if off != len(raw):
        raise FormatError("trailing bytes after voxel data", off)
    sample = ShapeSample(
        class_id=class_id,
        parts=parts,
        boxes=[Box6.from_array(boxes_arr[i]) for i in range(k)],
        mask=PartMask(np.frombuffer(mask_raw, dtype=np.uint8).astype(bool)),
    )
    sample.validate()
    return sample


def save_dataset(samples: list[ShapeSample], path: str | Path, class_name: str = "") -> dict:
    """Write a dataset directory (manifest.json + one binary file per shape).

    All samples must share k and r. Returns the manifest dict.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    if samples:
        k, r = samples[0].k, samples[0].resolution
        if not class_name:
            class_name = samples[0].class_id
        for s in samples:
            if s.k != k or s.resolution != r:
                raise ContractError("all samples in a dataset must share k and r")
    else:
        k, r = 0, 0
    files = []
    for i, s in enumerate(samples):
        name = f"shape_{i:05d}.sags"
        (path / name).write_bytes(encode_sample(s))
        files.append(name)
    manifest = {
        "format_version": FORMAT_VERSION,
        "class_name": class_name,
        "k": k,
        "resolution": r,
        "count": len(samples),
        "files": files,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_dataset(path: str | Path) -> list[ShapeSample]:
    """Load a dataset directory written by save_dataset."""
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatError(
            f"unsupported manifest format_version {manifest.get('format_version')}", 0
        )
    if len(manifest["files"]) != manifest["count"]:
        raise FormatError("manifest count does not match file list", 0)
    samples = []
    for name in manifest["files"]:
        sample = decode_sample((path / name).read_bytes(), class_id=manifest["class_name"])
        if manifest["count"] and (
            sample.k != manifest["k"] or sample.resolution != manifest["resolution"]
        ):
            raise FormatError(f"{name}: k/r disagree with manifest", 8)
        samples.append(sample)
    return samples
