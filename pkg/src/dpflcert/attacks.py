"""Poisoning transforms and model-replacement scaling."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Dataset, LabeledExample, Partition
from .errors import ConfigurationError, PatternError

Pattern = tuple[tuple[int, float], ...]

ATTACK_KINDS = ("BKD", "LF", "DBA")


def corner_pattern(n_features: int, width: int = 3, value: float = 1.0) -> Pattern:
    """Trigger on the last ``width`` features, the flat-vector analogue of a
    corner patch."""
    if width > n_features:
        raise PatternError(f"pattern of width {width} exceeds {n_features} features")
    return tuple((i, float(value)) for i in range(n_features - width, n_features))


def triangle_pattern(side: int = 28, size: int = 3, value: float = 1.0, margin: int = 1) -> Pattern:
    """Lower-right triangle for ``side x side`` row-major images.

    Pixels ``(r, c)`` with ``r, c`` in the last ``size`` rows/columns before
    the margin and ``c >= r`` relative to the patch corner; size 3 gives six
    pixels.
    """
    r0 = c0 = side - margin - size
    pixels = [(r0 + r) * side + (c0 + c) for r in range(size) for c in range(size) if c >= size - 1 - r]
    return tuple((p, float(value)) for p in sorted(pixels))


def parse_pattern(text: str) -> Pattern:
    """``"7:1.0,8:1.0"`` -> ``((7, 1.0), (8, 1.0))``."""
    out = []
    for item in filter(None, (t.strip() for t in text.split(","))):
        idx, _, val = item.partition(":")
        out.append((int(idx), float(val) if val else 1.0))
    return tuple(out)


def format_pattern(pattern: Pattern) -> str:
    return ",".join(f"{i}:{v!r}" for i, v in pattern)


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    k: int
    poison_fraction: float = 1.0
    scale: float = 1.0
    pattern: Pattern = ()
    target_label: int = 0
    source_class: int = 1
    level: str = "user"

    def __post_init__(self):
        object.__setattr__(self, "pattern", tuple((int(i), float(v)) for i, v in self.pattern))
        if self.kind not in ATTACK_KINDS:
            raise ConfigurationError(f"attack kind must be one of {ATTACK_KINDS}, got {self.kind!r}")
        if self.level not in ("user", "instance"):
            raise ConfigurationError(f"attack level must be 'user' or 'instance', got {self.level!r}")
        if self.k < 0:
            raise ConfigurationError("k must be nonnegative")
        if not 0.0 <= self.poison_fraction <= 1.0:
            raise ConfigurationError("poison_fraction must lie in [0, 1]")
        if self.scale < 1.0:
            raise ConfigurationError("scale must be >= 1")
        if self.kind == "DBA":
            if self.level != "user":
                raise ConfigurationError("DBA is a user-level attack")
            if self.k > 0 and self.k > len(self.pattern):
                raise ConfigurationError(
                    f"cannot split a {len(self.pattern)}-feature pattern among {self.k} attackers"
                )

    def to_dict(self) -> dict:
        return {
            "kind": self.kind, "k": self.k, "poison_fraction": self.poison_fraction,
            "scale": self.scale, "pattern": format_pattern(self.pattern),
            "target_label": self.target_label, "source_class": self.source_class,
            "level": self.level,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AttackSpec":
        d = dict(d)
        if isinstance(d.get("pattern"), str):
            d["pattern"] = parse_pattern(d["pattern"])
        return cls(**d)


# --------------------------------------------------------------------------
# per-example transforms

def _check_pattern(pattern: Pattern, n_features: int) -> None:
    for i, _ in pattern:
        if not 0 <= i < n_features:
            raise PatternError(f"pattern index {i} outside [0, {n_features})")


def stamp(features: np.ndarray, pattern: Pattern) -> np.ndarray:
    """Set pattern features (last axis) to the pattern values clamped to [0, 1]."""
    x = np.array(features, dtype=np.float64, copy=True)
    _check_pattern(pattern, x.shape[-1])
    if pattern:
        idx = [i for i, _ in pattern]
        x[..., idx] = np.clip([v for _, v in pattern], 0.0, 1.0)
    return x


def apply_backdoor(example: LabeledExample, pattern: Pattern, target_label: int) -> LabeledExample:
    return LabeledExample(stamp(example.features, pattern), int(target_label))


def flip_label(example: LabeledExample, source_class: int, target_label: int) -> LabeledExample:
    label = int(target_label) if example.label == source_class else example.label
    return LabeledExample(np.array(example.features, dtype=np.float64, copy=True), label)


def decompose_dba(pattern: Pattern, k: int) -> list[Pattern]:
    """Split a pattern into ``k`` contiguous disjoint parts, sizes differing by <= 1."""
    if k < 1 or k > len(pattern):
        raise ConfigurationError(f"cannot split a {len(pattern)}-feature pattern into {k} parts")
    base, extra = divmod(len(pattern), k)
    parts, start = [], 0
    for i in range(k):
        size = base + (1 if i < extra else 0)
        parts.append(tuple(pattern[start:start + size]))
        start += size
    return parts


def scale_update(delta: np.ndarray, gamma: float) -> np.ndarray:
    if gamma < 1:
        raise ConfigurationError(f"scale factor must be >= 1, got {gamma}")
    return np.asarray(delta, dtype=np.float64) * gamma


# --------------------------------------------------------------------------
# poisoned federations

@dataclass(frozen=True)
class PoisonedView:
    """A federation's local datasets with an attack applied.

    The base dataset is never modified; poisoned features and labels live in
    private copies.  ``flags[j]`` marks poisoned examples by global index.
    ``update_scale[u]`` is the model-replacement factor for user ``u``.
    """

    base: Dataset
    partition: Partition
    features: np.ndarray
    labels: np.ndarray
    flags: np.ndarray
    spec: AttackSpec | None
    adversaries: tuple[int, ...] = ()
    update_scale: dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        for arr in (self.features, self.labels, self.flags):
            arr.setflags(write=False)

    @property
    def n_users(self) -> int:
        return self.partition.n_users

    @property
    def num_classes(self) -> int:
        return self.base.num_classes

    def user_data(self, user: int) -> Dataset:
        idx = self.partition.user_indices[user]
        return Dataset(self.features[idx], self.labels[idx], self.base.num_classes)

    def scale_for(self, user: int) -> float:
        return self.update_scale.get(user, 1.0)

    def poisoned_count(self) -> int:
        return int(self.flags.sum())


def _poison(x: np.ndarray, y: np.ndarray, rows: np.ndarray, spec: AttackSpec, pattern: Pattern) -> None:
    if len(rows) == 0:
        return
    if spec.kind == "LF":
        y[rows[y[rows] == spec.source_class]] = spec.target_label
    else:
        x[rows] = stamp(x[rows], pattern)
        y[rows] = spec.target_label


def poison_federation(data: Dataset, partition: Partition, spec: AttackSpec | None) -> PoisonedView:
    """Apply ``spec`` to the local datasets described by ``partition``.

    User level: users ``0..k-1`` are adversarial; each poisons the first
    ``ceil(alpha * |D_i|)`` examples of its (already shuffled) index list and
    scales its updates by ``spec.scale``.  Instance level: exactly ``k``
    eligible examples are poisoned, filling user 0's data first.  For label
    flipping only source-class examples are eligible at instance level.
    """
    x = np.array(data.features, copy=True)
    y = np.array(data.labels, copy=True)
    flags = np.zeros(len(data), dtype=bool)
    if spec is None or spec.k == 0:
        return PoisonedView(data, partition, x, y, flags, spec)
    _check_pattern(spec.pattern, data.dim)

    if spec.level == "user":
        if spec.k > partition.n_users:
            raise ConfigurationError(f"k={spec.k} exceeds the {partition.n_users} users")
        adversaries = tuple(range(spec.k))
        parts = decompose_dba(spec.pattern, spec.k) if spec.kind == "DBA" else None
        for u in adversaries:
            idx = partition.user_indices[u]
            rows = idx[:math.ceil(spec.poison_fraction * len(idx))]
            flags[rows] = True
            _poison(x, y, rows, spec, parts[u] if parts else spec.pattern)
        scale = {u: float(spec.scale) for u in adversaries}
        return PoisonedView(data, partition, x, y, flags, spec, adversaries, scale)

    chosen: list[int] = []
    for idx in partition.user_indices:
        eligible = idx[y[idx] == spec.source_class] if spec.kind == "LF" else idx
        chosen.extend(eligible[:spec.k - len(chosen)].tolist())
        if len(chosen) == spec.k:
            break
    if len(chosen) < spec.k:
        raise ConfigurationError(f"only {len(chosen)} eligible instances for k={spec.k}")
    rows = np.array(chosen, dtype=np.int64)
    flags[rows] = True
    _poison(x, y, rows, spec, spec.pattern)
    owners = tuple(sorted({u for u, idx in enumerate(partition.user_indices)
                           if np.isin(idx, rows).any()}))
    return PoisonedView(data, partition, x, y, flags, spec, owners)


def clean_view(data: Dataset, partition: Partition) -> PoisonedView:
    return poison_federation(data, partition, None)
