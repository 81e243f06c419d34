"""Federated training with user-level and instance-level differential privacy.

Four algorithms share one round loop:

* ``plain-fedavg``: local SGD epochs, server averages the deltas.
* ``userdp-fedavg``: as above, but the server clips each delta, adds
  Gaussian noise to the sum and divides by ``m`` (user-level DP).
* ``insdp-fedsgd``: every selected user takes one DP-SGD step on a sampled
  batch (per-example clipping, noise on the sum, divide by batch size).
* ``insdp-fedavg``: every selected user takes ``V`` DP-SGD steps and keeps a
  local RDP ledger; the global epsilon is the max over users.

Randomness is split into independent streams keyed by
``(seed, purpose, round, user)`` so the selection in round ``t`` never
depends on how many draws local training consumed.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .attacks import PoisonedView
from .data import Dataset
from .errors import ConfigurationError, UsageError
from .models import Model, ModelParams, sgd_step
from .privacy import (DEFAULT_ORDERS, InstanceLedgerSet, PrivacyReport, RdpLedger,
                      clip, clip_rows, rdp_to_dp)

ALGORITHMS = ("userdp-fedavg", "insdp-fedsgd", "insdp-fedavg", "plain-fedavg")
CLIPPING = ("flat", "per-layer", "flat-median", "per-layer-median")

_LOCAL, _SELECT, _SERVER = 0, 1, 2


@dataclass(frozen=True)
class FederationConfig:
    n_users: int
    user_rate: float = 0.1
    rounds: int = 3
    local_epochs: int = 1
    local_steps: int = 1
    lr: float = 0.1
    batch_fraction: float = 0.1
    clip: float = 1.0
    noise: float = 1.0
    delta: float = 1e-5
    clipping: str = "flat"
    algorithm: str = "userdp-fedavg"
    seed: int = 0
    momentum: float = 0.0
    weight_decay: float = 0.0
    rdp_method: str = "poisson"
    conversion: str = "standard"

    def __post_init__(self):
        if self.n_users < 1:
            raise ConfigurationError("n_users must be >= 1")
        if not 0 < self.user_rate <= 1:
            raise ConfigurationError("user_rate must lie in (0, 1]")
        if not 0 < self.batch_fraction <= 1:
            raise ConfigurationError("batch_fraction must lie in (0, 1]")
        if self.noise < 0:
            raise ConfigurationError("noise must be >= 0")
        if not self.clip > 0:
            raise ConfigurationError("clip must be > 0")
        if not 0 < self.delta < 1:
            raise ConfigurationError("delta must lie in (0, 1)")
        if self.rounds < 0 or self.local_epochs < 1 or self.local_steps < 1:
            raise ConfigurationError("rounds >= 0, local_epochs >= 1 and local_steps >= 1 required")
        if self.clipping not in CLIPPING:
            raise ConfigurationError(f"clipping must be one of {CLIPPING}")
        if self.algorithm not in ALGORITHMS:
            raise ConfigurationError(f"algorithm must be one of {ALGORITHMS}")
        if self.seed < 0:
            raise ConfigurationError("seed must be nonnegative")

    @property
    def users_per_round(self) -> int:
        # round() guards against 0.1 * 30 = 3.0000000000000004 ceiling to 4
        return max(math.ceil(round(self.user_rate * self.n_users, 9)), 1)

    @property
    def level(self) -> str:
        return "instance" if self.algorithm.startswith("insdp") else "user"

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **changes) -> "FederationConfig":
        d = self.to_dict()
        d.update(changes)
        return FederationConfig(**d)


@dataclass
class RoundInfo:
    round: int
    selected: list[int]
    update_norms: list[float]
    contribution_norms: list[float] = field(default_factory=list)
    thresholds: list[float] = field(default_factory=list)
    epsilon: float = math.inf


@dataclass
class TrainedRun:
    params: ModelParams
    report: PrivacyReport
    rounds: list[RoundInfo]
    config: FederationConfig
    history: list[ModelParams] = field(default_factory=list)

    def metadata(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "privacy": self.report.to_dict(),
            "rounds": [asdict(r) for r in self.rounds],
        }


def stream(seed: int, purpose: int, round_index: int, user: int = 0) -> np.random.Generator:
    ss = np.random.SeedSequence(seed, spawn_key=(purpose, round_index, user))
    return np.random.Generator(np.random.PCG64(ss))


def select_users(config: FederationConfig, round_index: int) -> list[int]:
    rng = stream(config.seed, _SELECT, round_index)
    m = config.users_per_round
    return sorted(rng.choice(config.n_users, size=m, replace=False).tolist())


def batch_size(config: FederationConfig, n_local: int) -> int:
    return min(n_local, max(1, int(round(config.batch_fraction * n_local))))


# --------------------------------------------------------------------------
# server aggregation

@dataclass
class Aggregation:
    update: np.ndarray
    thresholds: list[float]
    contribution_norms: list[float]


def _lower_median(values: Sequence[float]) -> float:
    ordered = sorted(values)
    return ordered[(len(ordered) - 1) // 2]


def aggregate_detailed(deltas: Sequence[np.ndarray], strategy: str, S: float, sigma: float,
                       rng: np.random.Generator | int, slices: Sequence[slice] | None = None
                       ) -> Aggregation:
    if not len(deltas):
        raise UsageError("cannot aggregate an empty list of updates")
    if strategy not in CLIPPING:
        raise ConfigurationError(f"clipping must be one of {CLIPPING}")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    stacked = np.stack([np.asarray(d, dtype=np.float64) for d in deltas])
    m, P = stacked.shape
    if strategy in ("flat", "flat-median") or slices is None:
        scopes = [slice(0, P)]
    else:
        scopes = list(slices)

    total = np.zeros(P)
    clipped = np.empty_like(stacked)
    thresholds = []
    for scope in scopes:
        part = stacked[:, scope]
        if strategy.endswith("median"):
            threshold = _lower_median(np.linalg.norm(part, axis=1).tolist())
            if threshold == 0:
                threshold = S  # every update is zero in this scope
        else:
            threshold = S
        thresholds.append(threshold)
        clipped[:, scope] = np.stack([clip(row, threshold) for row in part])
        total[scope] = clipped[:, scope].sum(axis=0)
        if sigma > 0:
            total[scope] = total[scope] + rng.normal(0.0, sigma * threshold, size=part.shape[1])
    return Aggregation(total / m, thresholds,
                       [float(np.linalg.norm(r)) for r in clipped])


def aggregate(deltas: Sequence[np.ndarray], strategy: str, S: float, sigma: float,
              seed: np.random.Generator | int, slices: Sequence[slice] | None = None) -> np.ndarray:
    """Clip each update per ``strategy``, add Gaussian noise per clipped scope
    to the sum, and divide by the number of updates."""
    return aggregate_detailed(deltas, strategy, S, sigma, seed, slices).update


# --------------------------------------------------------------------------
# local procedures

def local_sgd(model: Model, start: ModelParams, data: Dataset, config: FederationConfig,
              rng: np.random.Generator) -> ModelParams:
    """``local_epochs`` shuffled passes of minibatch momentum SGD."""
    w, buf = start, None
    n = len(data)
    L = batch_size(config, n)
    X, y = data.features, data.labels
    for _ in range(config.local_epochs):
        order = rng.permutation(n)
        for s in range(0, n, L):
            b = order[s:s + L]
            g = model.grad(w, X[b], y[b], per_example=False).batch_mean
            w, buf = sgd_step(w, g, config.lr, config.momentum, config.weight_decay, buf)
    return w


def dp_sgd_steps(model: Model, start: ModelParams, data: Dataset, config: FederationConfig,
                 rng: np.random.Generator, steps: int) -> ModelParams:
    """``steps`` DP-SGD steps: sample ``L`` examples without replacement,
    clip each gradient to ``S``, add N(0, sigma^2 S^2) to the sum, divide by ``L``."""
    w, buf = start, None
    n = len(data)
    L = batch_size(config, n)
    X, y = data.features, data.labels
    for _ in range(steps):
        b = rng.choice(n, size=L, replace=False)
        per = clip_rows(model.grad(w, X[b], y[b]).per_example, config.clip)
        total = per.sum(axis=0)
        if config.noise > 0:
            total = total + rng.normal(0.0, config.noise * config.clip, size=total.size)
        w, buf = sgd_step(w, total / L, config.lr, config.momentum, config.weight_decay, buf)
    return w


# --------------------------------------------------------------------------
# accounting

def _user_noise_multiplier(config: FederationConfig, n_layers: int) -> float:
    # per-layer scopes each carry sensitivity S, so the whole update has
    # sensitivity S * sqrt(#layers) against noise sigma * S per coordinate
    if config.clipping.startswith("per-layer"):
        return config.noise / math.sqrt(n_layers)
    return config.noise


def _local_rate(config: FederationConfig, sizes: Sequence[int] | None) -> float:
    if not sizes:
        return config.batch_fraction
    return max(batch_size(config, n) / n for n in sizes)


def _new_ledger(config: FederationConfig) -> RdpLedger:
    return RdpLedger(DEFAULT_ORDERS, config.rdp_method, config.conversion)


def accountant_report(config: FederationConfig, user_sizes: Sequence[int] | None = None,
                      n_layers: int = 1, user_subsampling: bool = True) -> PrivacyReport:
    """Privacy cost of a configuration without training.

    User selection is replayed from the same seeded streams training uses,
    so the instance-level result equals what a real run reports.
    ``user_subsampling=False`` drops the user-sampling amplification from
    the instance-level FedSGD analysis (batch sampling only).
    """
    m = config.users_per_round
    q = m / config.n_users
    alg = config.algorithm
    if alg == "plain-fedavg" or config.noise == 0:
        return PrivacyReport(math.inf, config.delta, None, config.level, config.rounds)
    if alg == "userdp-fedavg":
        ledger = _new_ledger(config)
        ledger.add_sampled_gaussian(q, _user_noise_multiplier(config, n_layers), config.rounds)
        informal = config.clipping.endswith("median")
        return PrivacyReport(**{**rdp_to_dp(ledger, config.delta, "user").to_dict(),
                                "informal": informal})
    p = _local_rate(config, user_sizes)
    if alg == "insdp-fedsgd":
        ledger = _new_ledger(config)
        rate = p * q if user_subsampling else p
        ledger.add_sampled_gaussian(rate, config.noise * math.sqrt(m), config.rounds)
        return rdp_to_dp(ledger, config.delta, "instance")
    ledgers = InstanceLedgerSet(config.n_users, config.delta, DEFAULT_ORDERS,
                                config.rdp_method, config.conversion)
    for t in range(config.rounds):
        for u in select_users(config, t):
            rate = batch_size(config, user_sizes[u]) / user_sizes[u] if user_sizes else p
            ledgers.spend(u, rate, config.noise, config.local_steps)
    return ledgers.report(config.rounds)


# --------------------------------------------------------------------------
# training

def _check(config: FederationConfig, view: PoisonedView, algorithm: str | None) -> None:
    if algorithm is not None and config.algorithm != algorithm:
        raise ConfigurationError(f"config.algorithm is {config.algorithm!r}, expected {algorithm!r}")
    if view.n_users != config.n_users:
        raise ConfigurationError(
            f"partition has {view.n_users} users but the config expects {config.n_users}"
        )


def train(config: FederationConfig, view: PoisonedView, model: Model,
          init: ModelParams | None = None, keep_history: bool = False) -> TrainedRun:
    """Run ``config.algorithm`` on the (possibly poisoned) federation."""
    _check(config, view, None)
    w = init if init is not None else model.init(config.seed)
    users = [view.user_data(u) for u in range(view.n_users)]
    sizes = [len(d) for d in users]
    alg = config.algorithm
    m = config.users_per_round
    q = m / config.n_users
    slices = [slice(s.offset, s.offset + s.length) for s in w.layers]

    ledger = _new_ledger(config)
    ledgers = InstanceLedgerSet(config.n_users, config.delta, DEFAULT_ORDERS,
                                config.rdp_method, config.conversion)
    user_sigma = _user_noise_multiplier(config, len(slices))
    local_rate = _local_rate(config, sizes)
    rounds, history = [], []

    for t in range(config.rounds):
        selected = select_users(config, t)
        deltas = []
        for u in selected:
            rng = stream(config.seed, _LOCAL, t, u)
            if alg in ("userdp-fedavg", "plain-fedavg"):
                local = local_sgd(model, w, users[u], config, rng)
            elif alg == "insdp-fedsgd":
                local = dp_sgd_steps(model, w, users[u], config, rng, 1)
            else:
                local = dp_sgd_steps(model, w, users[u], config, rng, config.local_steps)
                rate = batch_size(config, sizes[u]) / sizes[u]
                if config.noise > 0:
                    ledgers.spend(u, rate, config.noise, config.local_steps)
            delta = local.flat - w.flat
            scale = view.scale_for(u)
            deltas.append(delta * scale if scale != 1.0 else delta)

        info = RoundInfo(t, selected, [float(np.linalg.norm(d)) for d in deltas])
        if alg == "userdp-fedavg":
            agg = aggregate_detailed(deltas, config.clipping, config.clip, config.noise,
                                     stream(config.seed, _SERVER, t), slices)
            update = agg.update
            info.thresholds = agg.thresholds
            info.contribution_norms = agg.contribution_norms
            if config.noise > 0:
                ledger.add_sampled_gaussian(q, user_sigma)
            info.epsilon = rdp_to_dp(ledger, config.delta).epsilon if config.noise > 0 else math.inf
        else:
            update = np.stack(deltas).sum(axis=0) / m
            if alg == "insdp-fedsgd" and config.noise > 0:
                ledger.add_sampled_gaussian(local_rate * q, config.noise * math.sqrt(m))
                info.epsilon = rdp_to_dp(ledger, config.delta).epsilon
            elif alg == "insdp-fedavg" and config.noise > 0:
                info.epsilon = ledgers.global_epsilon
        w = w.with_flat(w.flat + update)
        rounds.append(info)
        if keep_history:
            history.append(w)

    if config.noise == 0 or alg == "plain-fedavg":
        report = PrivacyReport(math.inf, config.delta, None, config.level, config.rounds)
    elif alg == "insdp-fedavg":
        report = ledgers.report(config.rounds)
    else:
        base = rdp_to_dp(ledger, config.delta, config.level)
        report = PrivacyReport(base.epsilon, base.delta, base.optimal_order, config.level,
                               config.rounds, config.clipping.endswith("median")
                               and alg == "userdp-fedavg")
    return TrainedRun(w, report, rounds, config, history)


def run_userdp_fedavg(config, view, model, init=None, keep_history=False) -> TrainedRun:
    _check(config, view, "userdp-fedavg")
    return train(config, view, model, init, keep_history)


def run_insdp_fedsgd(config, view, model, init=None, keep_history=False) -> TrainedRun:
    _check(config, view, "insdp-fedsgd")
    return train(config, view, model, init, keep_history)


def run_insdp_fedavg(config, view, model, init=None, keep_history=False) -> TrainedRun:
    _check(config, view, "insdp-fedavg")
    return train(config, view, model, init, keep_history)


def run_plain_fedavg(config, view, model, init=None, keep_history=False) -> TrainedRun:
    _check(config, view, "plain-fedavg")
    return train(config, view, model, init, keep_history)


def accuracy(model: Model, params: ModelParams, data: Dataset) -> float:
    probs = model.predict_confidence(params, data.features)
    return float((probs.argmax(axis=1) == data.labels).mean())
