"""Dataset ingestion, synthetic generators and user partitioning."""

from __future__ import annotations

import gzip
import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ConfigurationError, FormatError

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049


class LabeledExample(NamedTuple):
    features: np.ndarray
    label: int


@dataclass(frozen=True)
class Dataset:
    """Immutable feature matrix plus integer labels.

    Features are float64 of shape ``(n, d)``; both arrays are marked
    read-only so a dataset can be shared between concurrent runs.
    """

    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        x = np.array(self.features, dtype=np.float64, copy=True)
        y = np.array(self.labels, dtype=np.int64, copy=True)
        if x.ndim != 2:
            raise FormatError("features", f"expected a 2-d array, got shape {x.shape}")
        if y.shape != (x.shape[0],):
            raise FormatError("labels", f"expected {x.shape[0]} labels, got shape {y.shape}")
        if len(y) and (y.min() < 0 or y.max() >= self.num_classes):
            raise FormatError("labels", f"labels must lie in [0, {self.num_classes})")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> LabeledExample:
        return LabeledExample(self.features[i], int(self.labels[i]))

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def examples(self) -> list[LabeledExample]:
        return [self[i] for i in range(len(self))]

    def subset(self, indices: Sequence[int] | np.ndarray) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.features).tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        return h.hexdigest()

    @classmethod
    def from_examples(cls, examples: Sequence[LabeledExample], num_classes: int) -> "Dataset":
        if not examples:
            raise ConfigurationError("cannot build a dataset from zero examples")
        x = np.stack([np.asarray(e.features, dtype=np.float64) for e in examples])
        y = np.array([e.label for e in examples], dtype=np.int64)
        return cls(x, y, num_classes)


# --------------------------------------------------------------------------
# IDX format

_IDX_TYPES = {0x08: np.dtype(">u1")}


def _open(path: Path | str, mode: str = "rb"):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, mode)
    return open(path, mode)


def read_idx(path: Path | str, expected_magic: int | None = None) -> np.ndarray:
    """Parse an unsigned-byte IDX file into an ndarray of uint8."""
    with _open(path) as f:
        raw = f.read()
    if len(raw) < 4:
        raise FormatError("magic", f"{path}: file shorter than the 4-byte magic")
    (magic,) = struct.unpack(">i", raw[:4])
    if expected_magic is not None and magic != expected_magic:
        raise FormatError("magic", f"{path}: expected {expected_magic}, found {magic}")
    type_code = (magic >> 8) & 0xFF
    ndim = magic & 0xFF
    if magic >> 16 != 0 or type_code not in _IDX_TYPES or ndim == 0:
        raise FormatError("magic", f"{path}: unsupported magic {magic}")
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise FormatError("dimensions", f"{path}: header truncated")
    dims = struct.unpack(f">{ndim}i", raw[4:header_end])
    if any(d < 0 for d in dims):
        raise FormatError("dimensions", f"{path}: negative dimension in {dims}")
    expected = int(np.prod(dims)) * _IDX_TYPES[type_code].itemsize
    payload = raw[header_end:]
    if len(payload) != expected:
        raise FormatError(
            "payload", f"{path}: expected {expected} data bytes, found {len(payload)}"
        )
    arr = np.frombuffer(payload, dtype=_IDX_TYPES[type_code]).reshape(dims)
    return arr.astype(np.uint8)


def write_idx(path: Path | str, array: np.ndarray) -> None:
    """Write a uint8 array in IDX layout (big-endian header, raw bytes)."""
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        raise FormatError("payload", "only unsigned-byte IDX files are supported")
    magic = (0x08 << 8) | arr.ndim
    header = struct.pack(f">i{arr.ndim}i", magic, *arr.shape)
    with _open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(arr).tobytes())


def load_idx(images_path: Path | str, labels_path: Path | str, num_classes: int = 10) -> Dataset:
    """Load an IDX image/label pair, scaling pixel bytes to [0, 1]."""
    images = read_idx(images_path, IMAGE_MAGIC)
    labels = read_idx(labels_path, LABEL_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(
            "count",
            f"image header counts {images.shape[0]} items but label header counts {labels.shape[0]}",
        )
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(x, labels.astype(np.int64), num_classes)


def save_idx(images_path: Path | str, labels_path: Path | str, data: Dataset,
             image_shape: tuple[int, ...] = (28, 28)) -> None:
    """Inverse of :func:`load_idx` for data whose features are multiples of 1/255."""
    pixels = np.rint(data.features * 255.0)
    if pixels.min(initial=0) < 0 or pixels.max(initial=0) > 255:
        raise FormatError("payload", "features outside [0, 1] cannot be written as bytes")
    write_idx(images_path, pixels.astype(np.uint8).reshape((len(data),) + tuple(image_shape)))
    write_idx(labels_path, data.labels.astype(np.uint8))


# --------------------------------------------------------------------------
# synthetic data and filtering

def blob_means(d: int, C: int, separation: float) -> np.ndarray:
    # means on the first axis, spaced by `separation`, centred at the origin
    means = np.zeros((C, d))
    means[:, 0] = (np.arange(C) - (C - 1) / 2.0) * separation
    return means


def synthesize_blobs(n: int, d: int, C: int, separation: float, seed: int) -> Dataset:
    """Draw ``n`` points from ``C`` unit-variance Gaussians.

    Labels are assigned round-robin, so every class appears as soon as
    ``n >= C``.  Class means sit on the first coordinate axis with adjacent
    means exactly ``separation`` apart.
    """
    if n < C or d < 1 or C < 2 or separation <= 0:
        raise ConfigurationError(
            f"need n >= C >= 2, d >= 1 and separation > 0 (got n={n}, d={d}, C={C}, "
            f"separation={separation})"
        )
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % C
    x = blob_means(d, C, separation)[labels] + rng.standard_normal((n, d))
    return Dataset(x, labels, C)


def filter_binary(data: Dataset, class_a: int, class_b: int) -> Dataset:
    """Keep two classes, relabelled ``class_a -> 0`` and ``class_b -> 1``."""
    mask_a = data.labels == class_a
    mask_b = data.labels == class_b
    if not mask_a.any() or not mask_b.any():
        raise ConfigurationError(
            f"both classes must be present (class {class_a}: {int(mask_a.sum())}, "
            f"class {class_b}: {int(mask_b.sum())})"
        )
    keep = mask_a | mask_b
    return Dataset(data.features[keep], mask_b[keep].astype(np.int64), 2)


def train_test_split(data: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    if not 0 < test_fraction < 1:
        raise ConfigurationError("test_fraction must lie in (0, 1)")
    order = np.random.default_rng(seed).permutation(len(data))
    n_test = max(1, int(round(test_fraction * len(data))))
    return data.subset(np.sort(order[n_test:])), data.subset(np.sort(order[:n_test]))


# --------------------------------------------------------------------------
# partitioning

@dataclass(frozen=True)
class Partition:
    user_indices: tuple[np.ndarray, ...]
    strategy: str

    def __post_init__(self):
        for idx in self.user_indices:
            idx.setflags(write=False)

    @property
    def n_users(self) -> int:
        return len(self.user_indices)

    def sizes(self) -> list[int]:
        return [len(i) for i in self.user_indices]

    def user_data(self, data: Dataset, user: int) -> Dataset:
        return data.subset(self.user_indices[user])


def _split_sizes(n: int, N: int) -> list[int]:
    # remainder goes to the lowest-indexed users
    base, extra = divmod(n, N)
    return [base + (1 if i < extra else 0) for i in range(N)]


def partition_iid(data: Dataset | int, N: int, seed: int) -> Partition:
    n = data if isinstance(data, int) else len(data)
    if N < 1 or N > n:
        raise ConfigurationError(f"cannot split {n} examples among {N} users")
    order = np.random.default_rng(seed).permutation(n)
    bounds = np.cumsum([0] + _split_sizes(n, N))
    return Partition(
        tuple(order[bounds[i]:bounds[i + 1]].copy() for i in range(N)), "iid"
    )


def partition_by_label_shard(data: Dataset, N: int, shards_per_user: int, seed: int) -> Partition:
    """Non-iid split: sort by label, cut into ``N * shards_per_user`` shards,
    and deal shards to users in a seeded random order."""
    n_shards = N * shards_per_user
    if N < 1 or shards_per_user < 1 or n_shards > len(data):
        raise ConfigurationError(
            f"cannot cut {len(data)} examples into {n_shards} shards for {N} users"
        )
    rng = np.random.default_rng(seed)
    # stable sort keeps the within-label order reproducible
    order = np.argsort(data.labels, kind="stable")
    bounds = np.cumsum([0] + _split_sizes(len(data), n_shards))
    shards = [order[bounds[i]:bounds[i + 1]] for i in range(n_shards)]
    deal = rng.permutation(n_shards)
    users = []
    for u in range(N):
        mine = deal[u * shards_per_user:(u + 1) * shards_per_user]
        users.append(np.sort(np.concatenate([shards[s] for s in mine])))
    return Partition(tuple(users), "by-label-shard")
