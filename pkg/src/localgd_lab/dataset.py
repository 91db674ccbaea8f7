"""Datasets in canonical form.

All downstream math runs over a :class:`Dataset`: M equally sized client
blocks of points ``y * x`` rescaled so the largest norm is exactly one.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "RawDataset",
    "Dataset",
    "SplitSpec",
    "SPLIT_KINDS",
    "DatasetError",
    "EmptyDatasetError",
    "DegenerateDatasetError",
    "UnequalClientsError",
    "IdxFormatError",
    "BadMagicError",
    "TruncatedFileError",
    "CountMismatchError",
    "SplitMix64",
    "shuffled_indices",
    "canonicalize",
    "gen_synthetic",
    "gen_margin_splits",
    "partition_by_label_sorting",
    "binarize_parity",
    "select_subset",
    "load_idx",
    "mnist_protocol",
    "write_dataset_csv",
    "read_dataset_csv",
]

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
NORM_TOL = 1e-12


class DatasetError(ValueError):
    pass


class EmptyDatasetError(DatasetError):
    pass


class DegenerateDatasetError(DatasetError):
    """Every point is zero, so no rescaling is defined."""


class UnequalClientsError(DatasetError):
    pass


class IdxFormatError(DatasetError):
    pass


class BadMagicError(IdxFormatError):
    pass


class TruncatedFileError(IdxFormatError):
    pass


class CountMismatchError(IdxFormatError):
    pass


@dataclass(frozen=True)
class RawDataset:
    """Labelled points before canonicalization.

    ``labels`` are {-1, +1} for a binary problem; multiclass pools (digit
    labels) are also carried in this type until binarized.
    """

    features: np.ndarray  # (N, d)
    labels: np.ndarray  # (N,)

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels)
        if feats.ndim != 2:
            raise DatasetError(f"features must be 2-D, got shape {feats.shape}")
        if labels.shape != (feats.shape[0],):
            raise DatasetError("one label per feature vector is required")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def is_binary(self) -> bool:
        return bool(np.all((self.labels == 1) | (self.labels == -1)))


@dataclass(frozen=True)
class Dataset:
    """Canonical client-partitioned point cloud, ``points[m, i]`` = y x / scale."""

    points: np.ndarray  # (M, n, d)
    scale_factor: float = 1.0

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64, order="C")
        if pts.ndim != 3 or min(pts.shape) < 1:
            raise DatasetError(f"points must have shape (M, n, d) with M, n, d >= 1, got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise DatasetError("points must be finite")
        norms = np.linalg.norm(pts, axis=2)
        if norms.max() > 1.0 + NORM_TOL:
            raise DatasetError(f"canonical points need norm <= 1, found {norms.max():.17g}")
        if not self.scale_factor > 0:
            raise DatasetError("scale_factor must be positive")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "scale_factor", float(self.scale_factor))

    @property
    def M(self) -> int:
        return self.points.shape[0]

    @property
    def n(self) -> int:
        return self.points.shape[1]

    @property
    def d(self) -> int:
        return self.points.shape[2]

    @property
    def clients(self) -> list[np.ndarray]:
        return [self.points[m] for m in range(self.M)]

    def flat(self) -> np.ndarray:
        """All points as an (M*n, d) array, client-major."""
        return self.points.reshape(-1, self.d)

    def client(self, m: int) -> "Dataset":
        return Dataset(self.points[m : m + 1], self.scale_factor)


@dataclass(frozen=True)
class SplitSpec:
    kind: str
    base_margin: float = 0.2

    def __post_init__(self):
        if self.kind not in SPLIT_KINDS:
            raise DatasetError(f"split kind must be one of {SPLIT_KINDS}, got {self.kind!r}")
        if not (math.isfinite(self.base_margin) and 0 < self.base_margin <= 0.2):
            # the widest point sits at norm 5 * base_margin
            raise DatasetError("base_margin must lie in (0, 0.2]")


SPLIT_KINDS = ("homogeneous", "mixed", "heterogeneous")


# ---------------------------------------------------------------------------
# canonicalization


def canonicalize(raw: RawDataset, assignment: Sequence[Sequence[int]] | None = None) -> Dataset:
    """Absorb labels and rescale so the largest point norm is exactly one.

    ``assignment`` lists the raw indices held by each client; the default puts
    every point on a single client.
    """
    if len(raw) == 0:
        raise EmptyDatasetError("dataset has no points")
    if not raw.is_binary:
        raise DatasetError("labels must be in {-1, +1}; binarize multiclass labels first")
    if assignment is None:
        assignment = [np.arange(len(raw))]
    blocks = [np.asarray(a, dtype=np.int64) for a in assignment]
    if not blocks:
        raise EmptyDatasetError("assignment has no clients")
    sizes = {b.size for b in blocks}
    if len(sizes) != 1:
        raise UnequalClientsError(f"clients must hold equal counts, got sizes {sorted(sizes)}")
    if 0 in sizes:
        raise EmptyDatasetError("clients must hold at least one point")

    signed = raw.features * raw.labels[:, None].astype(np.float64)
    pts = np.stack([signed[b] for b in blocks])
    scale = float(np.linalg.norm(pts, axis=2).max())
    if scale == 0.0:
        raise DegenerateDatasetError("all points are zero")
    pts = pts / scale
    # division can leave the longest point a few ulps above one
    norms = np.linalg.norm(pts, axis=2)
    over = norms > 1.0
    if np.any(over):
        pts[over] /= norms[over][:, None]
    return Dataset(pts, scale)


# ---------------------------------------------------------------------------
# generators


def gen_synthetic(delta: float = 0.1, g: float = 10.0) -> Dataset:
    """Two clients, one point each, pulling in conflicting directions.

    Client 1 holds (delta, 1)/sqrt(1+delta^2); client 2 holds the mirrored
    direction (delta, -1)/sqrt(1+delta^2) shrunk by 1/g.
    """
    if not (math.isfinite(delta) and math.isfinite(g)):
        raise DatasetError("delta and g must be finite")
    if delta <= 0:
        raise DatasetError("delta must be positive")
    if g == 0:
        raise DatasetError("g must be nonzero")
    s = math.sqrt(1.0 + delta * delta)
    p1 = [delta / s, 1.0 / s]
    p2 = [delta / s / g, -1.0 / s / g]
    return Dataset(np.array([[p1], [p2]]), 1.0)


def _split_points(base: float) -> dict[str, np.ndarray]:
    # a, b sit on the line x = base (global support vectors), c, e on x = 3*base.
    # Local margins: {a,b} -> base, {a,c} -> 2 base, {c,e} -> 3 base, {b,e} -> 4 base.
    return {
        "a": np.array([base, math.sqrt(3.0) * base]),
        "b": np.array([base, -math.sqrt(15.0) * base]),
        "c": np.array([3.0 * base, base]),
        "e": np.array([3.0 * base, -4.0 * base]),
    }


_SPLIT_LAYOUT = {
    "homogeneous": ("abce", "abce", "abce", "abce"),
    "mixed": ("aabb", "aabb", "ccee", "ccee"),
    "heterogeneous": ("aabb", "aacc", "ccee", "bbee"),
}


def gen_margin_splits(spec: SplitSpec) -> Dataset:
    """Sixteen points over four clients with the same global multiset.

    Each of the four base points appears four times in total. The kinds
    differ only in how copies are dealt out, which changes the clients'
    local margins: all equal (homogeneous), base and 3*base (mixed), or
    base, 2*base, 3*base, 4*base (heterogeneous).
    """
    pts = _split_points(spec.base_margin)
    blocks = [[pts[ch] for ch in layout] for layout in _SPLIT_LAYOUT[spec.kind]]
    return Dataset(np.array(blocks), 1.0)


# ---------------------------------------------------------------------------
# partitioning


class SplitMix64:
    """SplitMix64 generator (Steele, Lea & Flood), 64-bit state.

    Used instead of numpy's generators so that client assignments can be
    reproduced bit-for-bit by any implementation of the same recipe.
    """

    _MASK = (1 << 64) - 1

    def __init__(self, seed: int):
        self.state = seed & self._MASK

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & self._MASK
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & self._MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & self._MASK
        return z ^ (z >> 31)

    def below(self, bound: int) -> int:
        """Integer in [0, bound) via the multiply-shift map (x * bound) >> 64."""
        return (self.next_u64() * bound) >> 64


def shuffled_indices(count: int, seed: int) -> np.ndarray:
    """Fisher-Yates shuffle of range(count): for i = count-1..1 swap i with below(i+1)."""
    perm = list(range(count))
    rng = SplitMix64(seed)
    for i in range(count - 1, 0, -1):
        j = rng.below(i + 1)
        perm[i], perm[j] = perm[j], perm[i]
    return np.array(perm, dtype=np.int64)


def partition_by_label_sorting(labels, M: int, s: float, seed: int) -> list[np.ndarray]:
    """Split a labelled pool among M clients with similarity s percent.

    The pool is shuffled with :func:`shuffled_indices`. The first
    ``n_iid = M * floor(floor(s * N / 100) / M)`` shuffled items form the iid
    pool (kept in shuffled order); the rest form the non-iid pool, sorted
    stably by (label, original index). Each pool is cut into M contiguous
    equal chunks and client m receives chunk m of both pools.
    """
    labels = np.asarray(labels)
    N = labels.shape[0]
    if M < 1:
        raise DatasetError("M must be at least 1")
    if M > N:
        raise DatasetError(f"cannot split {N} items among {M} clients")
    if N % M:
        raise UnequalClientsError(f"pool size {N} is not divisible by M={M}")
    if not 0 <= s <= 100:
        raise DatasetError("s must be a percentage in [0, 100]")

    perm = shuffled_indices(N, seed)
    n_iid = math.floor(s * N / 100)
    n_iid -= n_iid % M
    iid = perm[:n_iid]
    rest = perm[n_iid:]
    noniid = np.array(sorted(rest.tolist(), key=lambda idx: (labels[idx], idx)), dtype=np.int64)

    a, b = n_iid // M, (N - n_iid) // M
    return [np.concatenate([iid[m * a : (m + 1) * a], noniid[m * b : (m + 1) * b]]) for m in range(M)]


def binarize_parity(labels) -> np.ndarray:
    """Even digits -> +1, odd digits -> -1."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() > 9):
        raise DatasetError("digit labels must be in 0..9")
    if not np.all(labels == np.round(labels)):
        raise DatasetError("digit labels must be integers")
    return np.where(labels.astype(np.int64) % 2 == 0, 1, -1)


def select_subset(raw: RawDataset, size: int, seed: int) -> RawDataset:
    """First ``size`` items of the seeded shuffle (same generator as partitioning)."""
    if not 1 <= size <= len(raw):
        raise DatasetError(f"subset size must be in [1, {len(raw)}]")
    idx = np.sort(shuffled_indices(len(raw), seed)[:size])
    return RawDataset(raw.features[idx], raw.labels[idx])


# ---------------------------------------------------------------------------
# IDX ingestion


def _read_idx(path, magic: int, ndims: int):
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise TruncatedFileError(f"{path}: missing magic number")
    (found,) = struct.unpack(">I", data[:4])
    if found != magic:
        raise BadMagicError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    header = 4 + 4 * ndims
    if len(data) < header:
        raise TruncatedFileError(f"{path}: header truncated")
    dims = struct.unpack(">" + "I" * ndims, data[4:header])
    body = int(np.prod(dims))
    if len(data) < header + body:
        raise TruncatedFileError(f"{path}: expected {body} data bytes, found {len(data) - header}")
    arr = np.frombuffer(data, dtype=np.uint8, count=body, offset=header)
    return arr.reshape(dims)


def load_idx(images_path, labels_path) -> RawDataset:
    """Read an IDX image/label pair (MNIST layout); images flattened row-major."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    feats = images.reshape(images.shape[0], -1).astype(np.float64)
    return RawDataset(feats, labels.astype(np.int64))


def mnist_protocol(
    images_path,
    labels_path,
    subset: int = 1000,
    M: int = 5,
    s: float = 50.0,
    seed: int = 0,
    offset: float = 127.0,
) -> Dataset:
    """Subset, label-sorted partition, parity labels, pixel shift, rescale."""
    pool = load_idx(images_path, labels_path)
    if subset < len(pool):
        pool = select_subset(pool, subset, seed)
    assignment = partition_by_label_sorting(pool.labels, M, s, seed)
    raw = RawDataset(pool.features - offset, binarize_parity(pool.labels))
    return canonicalize(raw, assignment)


# ---------------------------------------------------------------------------
# CSV


def write_dataset_csv(data: Dataset, path) -> None:
    with open(path, "w", newline="") as f:
        out = csv.writer(f, lineterminator="\n")
        out.writerow(["client", "index"] + [f"x{j}" for j in range(data.d)])
        for m in range(data.M):
            for i in range(data.n):
                out.writerow([m, i] + [format(v, ".17g") for v in data.points[m, i]])


def read_dataset_csv(path) -> Dataset:
    """Read a canonical dataset CSV (rows may appear in any order)."""
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise EmptyDatasetError(f"{path}: empty file")
    header = rows[0]
    d = len(header) - 2
    if header[:2] != ["client", "index"] or d < 1 or header[2:] != [f"x{j}" for j in range(d)]:
        raise DatasetError(f"{path}: bad header {header}")
    body = [r for r in rows[1:] if r]
    if not body:
        raise EmptyDatasetError(f"{path}: no points")
    try:
        keyed = {(int(r[0]), int(r[1])): [float(v) for v in r[2:]] for r in body}
    except (ValueError, IndexError) as exc:
        raise DatasetError(f"{path}: malformed row ({exc})") from None
    if len(keyed) != len(body) or any(len(v) != d for v in keyed.values()):
        raise DatasetError(f"{path}: duplicate keys or ragged rows")
    M = 1 + max(k[0] for k in keyed)
    n = 1 + max(k[1] for k in keyed)
    if len(keyed) != M * n:
        raise UnequalClientsError(f"{path}: expected {M}x{n} points, found {len(keyed)}")
    pts = np.empty((M, n, d))
    for (m, i), v in keyed.items():
        pts[m, i] = v
    return Dataset(pts, 1.0)
