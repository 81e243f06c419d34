"""Small differentiable classifiers over a flat parameter vector.

Two families are provided: multinomial logistic regression and a
one-hidden-layer tanh MLP.  Gradients are analytic and available both as a
batch mean and per example (needed for per-example clipping in DP-SGD).
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, ShapeError, UsageError

CONFIDENCE_FLOOR = 1e-12


@dataclass(frozen=True)
class LayerSpec:
    name: str
    offset: int
    length: int
    shape: tuple[int, ...]


@dataclass(frozen=True)
class ModelParams:
    """Flat parameter vector with named, ordered, non-overlapping layer views."""

    flat: np.ndarray
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        flat = np.array(self.flat, dtype=np.float64, copy=True)
        flat.setflags(write=False)
        object.__setattr__(self, "flat", flat)
        offset = 0
        for layer in self.layers:
            if layer.offset != offset or layer.length != math.prod(layer.shape):
                raise ShapeError(f"layer {layer.name!r} descriptor is inconsistent")
            offset += layer.length
        if offset != flat.size:
            raise ShapeError(f"layers cover {offset} entries but the vector has {flat.size}")

    def __len__(self) -> int:
        return self.flat.size

    def layer(self, name: str) -> np.ndarray:
        for spec in self.layers:
            if spec.name == name:
                return self.flat[spec.offset:spec.offset + spec.length].reshape(spec.shape)
        raise KeyError(name)

    def slices(self) -> list[slice]:
        return [slice(s.offset, s.offset + s.length) for s in self.layers]

    def with_flat(self, flat: np.ndarray) -> "ModelParams":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != self.flat.shape:
            raise ShapeError(f"expected a vector of length {self.flat.size}, got {flat.shape}")
        return ModelParams(flat, self.layers)


@dataclass(frozen=True)
class GradientRecord:
    per_example: np.ndarray | None  # (n, P), omitted when not requested
    batch_mean: np.ndarray  # (P,)


def _layout(shapes: Sequence[tuple[str, tuple[int, ...]]]) -> tuple[LayerSpec, ...]:
    out, offset = [], 0
    for name, shape in shapes:
        length = int(np.prod(shape))
        out.append(LayerSpec(name, offset, length, tuple(shape)))
        offset += length
    return tuple(out)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class Model:
    """Base class; subclasses define the layer layout and forward/backward."""

    n_features: int
    n_classes: int
    layers: tuple[LayerSpec, ...]

    @property
    def n_params(self) -> int:
        return sum(s.length for s in self.layers)

    def config(self) -> dict:
        raise NotImplementedError

    def init(self, seed: int = 0) -> ModelParams:
        raise NotImplementedError

    def zeros(self) -> ModelParams:
        return ModelParams(np.zeros(self.n_params), self.layers)

    def _check(self, params: ModelParams, X: np.ndarray) -> np.ndarray:
        if params.layers != self.layers:
            raise ShapeError("parameter layout does not belong to this model")
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.n_features:
            raise ShapeError(f"expected {self.n_features} features, got {X.shape[-1]}")
        return X

    def logits(self, params: ModelParams, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def predict_confidence(self, params: ModelParams, X: np.ndarray) -> np.ndarray:
        """Softmax confidences; accepts one feature vector or a batch."""
        X = self._check(params, X)
        single = X.ndim == 1
        probs = softmax(self.logits(params, np.atleast_2d(X)))
        return probs[0] if single else probs

    def losses(self, params: ModelParams, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Per-example cross-entropy with the confidence floored at 1e-12."""
        probs = self.predict_confidence(params, np.atleast_2d(X))
        y = np.atleast_1d(np.asarray(y, dtype=np.int64))
        return -np.log(np.maximum(probs[np.arange(len(y)), y], CONFIDENCE_FLOOR))

    def loss(self, params: ModelParams, example) -> float:
        features, label = example
        return float(self.losses(params, features, [label])[0])

    def grad(self, params: ModelParams, X: np.ndarray, y: np.ndarray,
             per_example: bool = True) -> GradientRecord:
        """Analytic gradient of the (unfloored) cross-entropy.

        The floor only matters for confidences below 1e-12, where the loss
        is flat in the clamped region; the softmax gradient is used
        throughout.
        """
        X = self._check(params, np.atleast_2d(X))
        y = np.asarray(y, dtype=np.int64)
        if len(y) == 0:
            raise UsageError("gradient of an empty batch")
        if len(y) != X.shape[0]:
            raise ShapeError(f"{X.shape[0]} feature rows but {len(y)} labels")
        return self._grad(params, X, y, per_example)

    def _grad(self, params, X, y, per_example) -> GradientRecord:
        raise NotImplementedError


class LogisticModel(Model):
    def __init__(self, n_features: int, n_classes: int = 2):
        self.n_features = int(n_features)
        self.n_classes = int(n_classes)
        self.layers = _layout([
            ("weight", (self.n_classes, self.n_features)),
            ("bias", (self.n_classes,)),
        ])

    def config(self) -> dict:
        return {"arch": "logistic", "n_features": self.n_features, "n_classes": self.n_classes}

    def init(self, seed: int = 0) -> ModelParams:
        # convex model: start from the origin regardless of seed
        return self.zeros()

    def logits(self, params, X):
        return X @ params.layer("weight").T + params.layer("bias")

    def _grad(self, params, X, y, per_example):
        n = len(y)
        err = softmax(self.logits(params, X))
        err[np.arange(n), y] -= 1.0
        mean = np.concatenate([(err.T @ X).ravel() / n, err.mean(axis=0)])
        per = None
        if per_example:
            per = np.concatenate([(err[:, :, None] * X[:, None, :]).reshape(n, -1), err], axis=1)
        return GradientRecord(per, mean)


class MLPModel(Model):
    def __init__(self, n_features: int, n_hidden: int = 16, n_classes: int = 2):
        self.n_features = int(n_features)
        self.n_hidden = int(n_hidden)
        self.n_classes = int(n_classes)
        self.layers = _layout([
            ("hidden.weight", (self.n_hidden, self.n_features)),
            ("hidden.bias", (self.n_hidden,)),
            ("out.weight", (self.n_classes, self.n_hidden)),
            ("out.bias", (self.n_classes,)),
        ])

    def config(self) -> dict:
        return {"arch": "mlp", "n_features": self.n_features, "n_hidden": self.n_hidden,
                "n_classes": self.n_classes}

    def init(self, seed: int = 0) -> ModelParams:
        rng = np.random.default_rng(seed)
        w1 = rng.standard_normal((self.n_hidden, self.n_features)) / np.sqrt(self.n_features)
        w2 = rng.standard_normal((self.n_classes, self.n_hidden)) / np.sqrt(self.n_hidden)
        flat = np.concatenate([w1.ravel(), np.zeros(self.n_hidden), w2.ravel(),
                               np.zeros(self.n_classes)])
        return ModelParams(flat, self.layers)

    def _hidden(self, params, X):
        return np.tanh(X @ params.layer("hidden.weight").T + params.layer("hidden.bias"))

    def logits(self, params, X):
        return self._hidden(params, X) @ params.layer("out.weight").T + params.layer("out.bias")

    def _grad(self, params, X, y, per_example):
        n = len(y)
        a = self._hidden(params, X)
        err = softmax(a @ params.layer("out.weight").T + params.layer("out.bias"))
        err[np.arange(n), y] -= 1.0
        dz = (err @ params.layer("out.weight")) * (1.0 - a * a)
        mean = np.concatenate([
            (dz.T @ X).ravel() / n, dz.mean(axis=0), (err.T @ a).ravel() / n, err.mean(axis=0),
        ])
        per = None
        if per_example:
            per = np.concatenate([
                (dz[:, :, None] * X[:, None, :]).reshape(n, -1),
                dz,
                (err[:, :, None] * a[:, None, :]).reshape(n, -1),
                err,
            ], axis=1)
        return GradientRecord(per, mean)


def build_model(config: dict) -> Model:
    arch = config.get("arch", "logistic")
    if arch == "logistic":
        return LogisticModel(config["n_features"], config.get("n_classes", 2))
    if arch == "mlp":
        return MLPModel(config["n_features"], config.get("n_hidden", 16), config.get("n_classes", 2))
    raise UsageError(f"unknown model architecture {arch!r}")


def sgd_step(params: ModelParams, gradient: np.ndarray, lr: float, momentum: float = 0.0,
             weight_decay: float = 0.0, buffer: np.ndarray | None = None
             ) -> tuple[ModelParams, np.ndarray]:
    """One momentum-SGD step; returns the new parameters and momentum buffer.

    Same recurrence as torch.optim.SGD: ``d = g + wd*w``, ``buf = mu*buf + d``,
    ``w -= lr*buf``.  Inputs are never modified.
    """
    g = np.asarray(gradient, dtype=np.float64)
    if g.shape != params.flat.shape:
        raise ShapeError(f"gradient has shape {g.shape}, parameters {params.flat.shape}")
    d = g + weight_decay * params.flat if weight_decay else g
    buf = d if buffer is None else momentum * buffer + d
    return params.with_flat(params.flat - lr * buf), buf


# --------------------------------------------------------------------------
# checkpoint format
#
#   bytes 0..7   b"DPFLCKPT"
#   bytes 8..11  format version, uint32 little-endian (currently 1)
#   bytes 12..15 header length H, uint32 little-endian
#   next H bytes UTF-8 JSON: {"model": {...}, "layers": [[name, offset, length, shape], ...]}
#   remainder    flat parameters, float64 little-endian, offsets per the layer table

_CKPT_MAGIC = b"DPFLCKPT"
_CKPT_VERSION = 1


def save_checkpoint(path: Path | str, params: ModelParams, model: Model | None = None) -> None:
    header = json.dumps({
        "model": model.config() if model is not None else None,
        "layers": [[s.name, s.offset, s.length, list(s.shape)] for s in params.layers],
    }, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC + struct.pack("<II", _CKPT_VERSION, len(header)))
        f.write(header)
        f.write(params.flat.astype("<f8").tobytes())


def load_checkpoint(path: Path | str) -> tuple[ModelParams, dict | None]:
    raw = Path(path).read_bytes()
    if raw[:8] != _CKPT_MAGIC:
        raise FormatError("magic", f"{path}: not a checkpoint file")
    if len(raw) < 16:
        raise FormatError("header", f"{path}: truncated header")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != _CKPT_VERSION:
        raise FormatError("version", f"{path}: unsupported version {version}")
    try:
        header = json.loads(raw[16:16 + hlen])
    except ValueError as exc:
        raise FormatError("header", f"{path}: {exc}") from None
    layers = tuple(LayerSpec(n, o, l, tuple(s)) for n, o, l, s in header["layers"])
    body = raw[16 + hlen:]
    expected = 8 * sum(s.length for s in layers)
    if len(body) != expected:
        raise FormatError("payload", f"{path}: expected {expected} bytes, found {len(body)}")
    return ModelParams(np.frombuffer(body, dtype="<f8").astype(np.float64), layers), header["model"]
