"""DP primitives and a Renyi-DP accountant for federated training.

Two RDP analyses of the subsampled Gaussian mechanism are available:

``"poisson"`` (default)
    Exact RDP of the sampled Gaussian mechanism under Poisson sampling,
    valid for real orders > 1.  Integer orders use the binomial expansion;
    fractional orders use the two-sided series with erfc tails.

``"wor"``
    The general upper bound for subsampling without replacement, with the
    Gaussian base mechanism plugged in (its RDP at order infinity is
    infinite, so every ``min{2, (e^{eps(inf)} - 1)^j}`` term is 2).  Integer
    orders only.

RDP curves compose additively; :func:`rdp_to_dp` converts an accumulated
curve to ``(epsilon, delta)`` by minimising over the order grid.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import integrate
from scipy.special import gammaln, gammasgn, log_ndtr, logsumexp

from .errors import ConfigurationError, UsageError

DEFAULT_ORDERS: tuple[float, ...] = tuple(
    [round(1 + x / 10.0, 1) for x in range(1, 100)] + list(range(12, 64))
    + [80, 96, 128, 256, 512, 1024]
)
INTEGER_ORDERS: tuple[int, ...] = tuple(range(2, 65))

_FRAC_SERIES_MAX_TERMS = 4096
# a rescaled vector can land a few ulps above S; treating those as inside
# makes clipping idempotent bit for bit
_CLIP_SLACK = 1.0 + 1e-13


# --------------------------------------------------------------------------
# mechanisms

def clip(delta: np.ndarray, S: float) -> np.ndarray:
    """Scale ``delta`` down to L2 norm ``S``; identity when already inside."""
    if not S > 0:
        raise ConfigurationError(f"clipping threshold must be positive, got {S}")
    delta = np.asarray(delta, dtype=np.float64)
    norm = float(np.linalg.norm(delta))
    if norm <= S * _CLIP_SLACK:
        return delta.copy()
    return delta / (norm / S)


def clip_rows(rows: np.ndarray, S: float) -> np.ndarray:
    """Clip every row of a 2-d array independently."""
    if not S > 0:
        raise ConfigurationError(f"clipping threshold must be positive, got {S}")
    norms = np.linalg.norm(rows, axis=1)
    factor = np.where(norms <= S * _CLIP_SLACK, 1.0, norms / S)
    return rows / factor[:, None]


def gaussian_noise(dimension: int, sigma: float, S: float,
                   seed: int | np.random.Generator) -> np.ndarray:
    """Draw from N(0, sigma^2 S^2 I)."""
    if sigma < 0:
        raise ConfigurationError("noise multiplier must be nonnegative")
    if sigma == 0:
        return np.zeros(dimension)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return rng.normal(0.0, sigma * S, size=dimension)


# --------------------------------------------------------------------------
# RDP curves

def gaussian_rdp(order: float, effective_noise: float) -> float:
    """RDP of the (unsampled) Gaussian mechanism: ``order / (2 sigma^2)``.

    Returns ``inf`` when the noise multiplier is zero.
    """
    if effective_noise == 0:
        return math.inf
    return order / (2.0 * effective_noise ** 2)


def _log_comb(n: float, k: float) -> float:
    return gammaln(n + 1) - gammaln(k + 1) - gammaln(n - k + 1)


def _check_integer_order(order) -> int:
    if isinstance(order, bool) or not float(order).is_integer() or order < 2:
        raise UsageError(f"order must be an integer >= 2, got {order!r}")
    return int(order)


def subsampled_rdp(order: int, sampling_prob: float, effective_noise: float) -> float:
    """Upper bound on the RDP of a Gaussian mechanism run on a subsample
    drawn without replacement at rate ``sampling_prob``.

    Terms are combined in log space so order 64 with small noise does not
    overflow.  The bound is loose at high sampling rates, so it is capped at
    the unsampled Gaussian value, which subsampling can never exceed.
    """
    a = _check_integer_order(order)
    g = float(sampling_prob)
    if not 0.0 <= g <= 1.0:
        raise ConfigurationError(f"sampling probability must lie in [0, 1], got {g}")
    if g == 0.0:
        return 0.0
    if g == 1.0 or effective_noise == 0:
        return gaussian_rdp(a, effective_noise)

    def eps(j: float) -> float:
        return j / (2.0 * effective_noise ** 2)

    log_g = math.log(g)
    e2 = eps(2)
    # min{4(e^{eps(2)} - 1), 2 e^{eps(2)}} in log space
    second = min(math.log(4.0) + math.log(math.expm1(e2)), math.log(2.0) + e2)
    terms = [0.0, 2 * log_g + _log_comb(a, 2) + second]
    terms += [j * log_g + _log_comb(a, j) + (j - 1) * eps(j) + math.log(2.0)
              for j in range(3, a + 1)]
    return min(float(logsumexp(terms)) / (a - 1), gaussian_rdp(a, effective_noise))


def _log_a_int(q: float, sigma: float, a: int) -> float:
    log1mq = math.log1p(-q)
    terms = [_log_comb(a, i) + i * math.log(q) + (a - i) * log1mq + (i * i - i) / (2 * sigma ** 2)
             for i in range(a + 1)]
    return float(logsumexp(terms))


def _log_sub(a: float, b: float) -> float:
    # log(e^a - e^b) for a >= b
    if b == -math.inf:
        return a
    return a + math.log(-math.expm1(b - a))


def _log_a_frac(q: float, sigma: float, a: float) -> float:
    """Two-sided series for fractional orders.

    Generalised binomial coefficients change sign once ``i > a``, so the
    positive and negative contributions are summed separately in log space
    and subtracted at the end.  Terms are evaluated in blocks until the
    tail is negligible.
    """
    z0 = sigma ** 2 * math.log(1 / q - 1) + 0.5
    log_q, log1mq = math.log(q), math.log1p(-q)
    pos, neg = [], []
    start, block = 0, 64
    while start < _FRAC_SERIES_MAX_TERMS:
        i = np.arange(start, start + block, dtype=np.float64)
        j = a - i
        log_coef = gammaln(a + 1) - gammaln(i + 1) - gammaln(j + 1)
        sign = gammasgn(j + 1)
        s0 = (log_coef + i * log_q + j * log1mq + (i * i - i) / (2 * sigma ** 2)
              + log_ndtr(-(i - z0) / sigma))
        s1 = (log_coef + j * log_q + i * log1mq + (j * j - j) / (2 * sigma ** 2)
              + log_ndtr(-(z0 - j) / sigma))
        term = np.logaddexp(s0, s1)
        pos.append(term[sign > 0])
        neg.append(term[sign < 0])
        total = float(logsumexp(np.concatenate(pos)))
        if start + block > a and term[-1] < total - 40 and term[-1] <= term[-2]:
            break
        start += block
        block *= 2
    else:
        return _log_a_quad(q, sigma, a)
    return _log_sub(total, float(logsumexp(np.concatenate(neg))) if any(len(n) for n in neg) else -math.inf)


def _log_a_quad(q: float, sigma: float, a: float) -> float:
    """``log E_{z ~ N(0, sigma^2)} [(1 - q + q exp((2z - 1) / (2 sigma^2)))^a]`` by quadrature.

    Used when the series converges too slowly (large ``q``, small order).
    The integrand peaks near ``z = 0`` and ``z = a``; it is rescaled by its
    maximum before integrating.
    """
    log_q, log1mq = math.log(q), math.log1p(-q)

    def log_f(z):
        return (-z * z / (2 * sigma ** 2) - math.log(sigma * math.sqrt(2 * math.pi))
                + a * np.logaddexp(log1mq, log_q + (2 * z - 1) / (2 * sigma ** 2)))

    lo, hi = -40.0 * sigma, a + 40.0 * sigma
    grid = np.linspace(lo, hi, 4001)
    peak = float(np.max(log_f(grid)))
    value, _ = integrate.quad(lambda z: math.exp(log_f(z) - peak), lo, hi,
                              points=sorted({0.0, 0.5, a}), limit=500, epsabs=0.0, epsrel=1e-12)
    return peak + math.log(value)


def sampled_gaussian_rdp(order: float, sampling_prob: float, noise_multiplier: float) -> float:
    """RDP of the Poisson-sampled Gaussian mechanism at a real order > 1."""
    q = float(sampling_prob)
    if not 0.0 <= q <= 1.0:
        raise ConfigurationError(f"sampling probability must lie in [0, 1], got {q}")
    if order <= 1:
        raise UsageError(f"order must exceed 1, got {order}")
    if q == 0.0:
        return 0.0
    if noise_multiplier == 0:
        return math.inf
    if q == 1.0:
        return gaussian_rdp(order, noise_multiplier)
    if float(order).is_integer():
        log_a = _log_a_int(q, noise_multiplier, int(order))
    else:
        log_a = _log_a_frac(q, noise_multiplier, float(order))
    return log_a / (order - 1)


def rdp_curve(sampling_prob: float, noise_multiplier: float,
              orders: Sequence[float] = DEFAULT_ORDERS, method: str = "poisson") -> np.ndarray:
    return np.array(_rdp_curve(float(sampling_prob), float(noise_multiplier), tuple(orders), method))


@functools.lru_cache(maxsize=256)
def _rdp_curve(sampling_prob: float, noise_multiplier: float, orders: tuple, method: str) -> tuple:
    return tuple(_rdp_curve_uncached(sampling_prob, noise_multiplier, orders, method))


def _rdp_curve_uncached(sampling_prob, noise_multiplier, orders, method) -> np.ndarray:
    if method == "poisson":
        return np.array([sampled_gaussian_rdp(a, sampling_prob, noise_multiplier) for a in orders])
    if method == "wor":
        return np.array([subsampled_rdp(a, sampling_prob, noise_multiplier) for a in orders])
    raise UsageError(f"unknown RDP method {method!r}")


# --------------------------------------------------------------------------
# ledger and conversion

@dataclass(frozen=True)
class PrivacyReport:
    epsilon: float
    delta: float
    optimal_order: float | None
    level: str = "user"
    rounds: int = 0
    informal: bool = False

    def to_dict(self) -> dict:
        return {"epsilon": self.epsilon, "delta": self.delta, "optimal_order": self.optimal_order,
                "level": self.level, "rounds": self.rounds, "informal": self.informal}


@dataclass
class RdpLedger:
    """Running RDP totals on a fixed order grid; confined to a single run."""

    orders: tuple[float, ...] = DEFAULT_ORDERS
    method: str = "poisson"
    conversion: str = "standard"
    totals: np.ndarray = field(default=None)  # type: ignore[assignment]
    rounds_applied: int = 0

    def __post_init__(self):
        self.orders = tuple(self.orders)
        if list(self.orders) != sorted(set(self.orders)) or not self.orders:
            raise UsageError("orders must be a nonempty strictly increasing sequence")
        if self.method == "wor":
            for a in self.orders:
                _check_integer_order(a)
        if self.totals is None:
            self.totals = np.zeros(len(self.orders))

    def accumulate(self, curve: Sequence[float] | np.ndarray, steps: int = 1) -> "RdpLedger":
        curve = np.asarray(curve, dtype=np.float64)
        if curve.shape != (len(self.orders),):
            raise UsageError(f"curve has {curve.size} entries but the grid has {len(self.orders)}")
        if steps < 0 or (curve < 0).any():
            raise UsageError("RDP increments must be nonnegative")
        self.totals = self.totals + steps * curve
        self.rounds_applied += steps
        return self

    def add_sampled_gaussian(self, sampling_prob: float, noise_multiplier: float,
                             steps: int = 1) -> "RdpLedger":
        curve = rdp_curve(sampling_prob, noise_multiplier, self.orders, self.method)
        return self.accumulate(curve, steps)

    def epsilon(self, delta: float) -> float:
        return rdp_to_dp(self, delta).epsilon

    def copy(self) -> "RdpLedger":
        return RdpLedger(self.orders, self.method, self.conversion, self.totals.copy(),
                         self.rounds_applied)


def conversion_terms(totals: np.ndarray, orders: Sequence[float], delta: float,
                     conversion: str = "standard") -> np.ndarray:
    a = np.asarray(orders, dtype=np.float64)
    if conversion == "standard":
        return totals - math.log(delta) / (a - 1)
    if conversion == "improved":
        return totals + np.log((a - 1) / a) - (math.log(delta) + np.log(a)) / (a - 1)
    raise UsageError(f"unknown conversion {conversion!r}")


def rdp_to_dp(ledger: RdpLedger, delta: float, level: str = "user",
              conversion: str | None = None) -> PrivacyReport:
    """Smallest epsilon over the order grid, clamped at zero.

    ``"standard"``: ``eps = rdp(a) + log(1/delta)/(a-1)``.
    ``"improved"``: ``eps = rdp(a) + log((a-1)/a) - (log delta + log a)/(a-1)``.
    """
    if not 0.0 < delta < 1.0:
        raise ConfigurationError(f"delta must lie in (0, 1), got {delta}")
    if not ledger.orders:
        raise UsageError("empty ledger")
    terms = conversion_terms(ledger.totals, ledger.orders, delta, conversion or ledger.conversion)
    terms = np.where(np.isnan(terms), np.inf, terms)
    best = int(np.argmin(terms))
    eps = float(terms[best])
    order = ledger.orders[best] if math.isfinite(eps) else None
    return PrivacyReport(max(0.0, eps), delta, order, level, ledger.rounds_applied)


def group_dp(epsilon: float, delta: float, k: int) -> tuple[float, float]:
    """``(k eps, (1 - e^{k eps}) / (1 - e^eps) * delta)``; ``k = 0`` gives ``(0, 0)``."""
    if k < 0 or int(k) != k:
        raise ConfigurationError(f"group size must be a nonnegative integer, got {k}")
    if k == 0:
        return 0.0, 0.0
    if not epsilon > 0:
        raise ConfigurationError("group privacy requires epsilon > 0")
    if k == 1:
        return epsilon, delta
    return k * epsilon, math.expm1(k * epsilon) / math.expm1(epsilon) * delta


def parallel_compose(per_user_epsilons: Iterable[float]) -> float:
    values = list(per_user_epsilons)
    if not values:
        raise UsageError("parallel composition of an empty list")
    return max(values)


@dataclass
class InstanceLedgerSet:
    """One local ledger per user; global epsilon is the max over users."""

    n_users: int
    delta: float
    orders: tuple[float, ...] = DEFAULT_ORDERS
    method: str = "poisson"
    conversion: str = "standard"
    ledgers: list[RdpLedger] = field(default=None)  # type: ignore[assignment]
    user_epsilons: list[float] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.ledgers is None:
            self.ledgers = [RdpLedger(self.orders, self.method, self.conversion)
                            for _ in range(self.n_users)]
        if self.user_epsilons is None:
            self.user_epsilons = [0.0] * self.n_users

    def spend(self, user: int, sampling_prob: float, noise_multiplier: float, steps: int) -> float:
        self.ledgers[user].add_sampled_gaussian(sampling_prob, noise_multiplier, steps)
        self.user_epsilons[user] = rdp_to_dp(self.ledgers[user], self.delta, "instance").epsilon
        return self.user_epsilons[user]

    @property
    def global_epsilon(self) -> float:
        return parallel_compose(self.user_epsilons)

    def report(self, rounds: int) -> PrivacyReport:
        worst = int(np.argmax(self.user_epsilons))
        order = rdp_to_dp(self.ledgers[worst], self.delta).optimal_order
        return PrivacyReport(self.global_epsilon, self.delta,
                             order if self.ledgers[worst].rounds_applied else None,
                             "instance", rounds)
