"""Certified prediction and certified attack cost for DP-trained models.

All bounds hold for any mechanism that is ``(epsilon, delta)``-DP at the
granularity the adversary count refers to: users for user-level DP,
instances for instance-level DP.  The formulas themselves are
level-agnostic, so the same functions serve both.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .attacks import Pattern, stamp
from .data import Dataset
from .errors import ConfigurationError, DomainError, UsageError
from .models import CONFIDENCE_FLOOR, Model, ModelParams

NONNEGATIVE = "nonnegative"
NONPOSITIVE = "nonpositive"


@dataclass(frozen=True)
class EnsembleEstimate:
    """Monte-Carlo class confidences for a batch of test samples.

    ``means`` has shape ``(n, C)``.  ``fa``/``fb`` are the values that feed
    the certificates: the raw top/runner-up means, or their Hoeffding
    lower/upper bounds once calibrated.
    """

    means: np.ndarray
    n_samples: int
    top: np.ndarray
    runner_up: np.ndarray
    fa: np.ndarray
    fb: np.ndarray
    psi: float = 1.0
    calibrated: bool = False

    @property
    def margin(self) -> float:
        return hoeffding_margin(self.n_samples, self.psi)


def estimate_expectation(confidence_samples: np.ndarray) -> EnsembleEstimate:
    """Average ``O`` confidence vectors per test sample.

    Accepts shape ``(O, C)`` for one test sample or ``(O, n, C)`` for many.
    Ties in the top and runner-up choices go to the lower class index.
    """
    samples = np.asarray(confidence_samples, dtype=np.float64)
    if samples.ndim == 2:
        samples = samples[:, None, :]
    if samples.ndim != 3 or samples.shape[0] == 0:
        raise UsageError("need at least one confidence sample of shape (n, C)")
    if samples.shape[2] < 2:
        raise UsageError("need at least two classes")
    # centring on the first run keeps the mean of identical runs exact
    means = samples[0] + (samples - samples[0]).mean(axis=0)
    top = means.argmax(axis=1)
    masked = means.copy()
    masked[np.arange(len(top)), top] = -np.inf
    runner = masked.argmax(axis=1)
    rows = np.arange(len(top))
    return EnsembleEstimate(means, samples.shape[0], top, runner, means[rows, top],
                            means[rows, runner])


def hoeffding_margin(n_samples: int, psi: float) -> float:
    if not 0 < psi <= 1:
        raise ConfigurationError(f"psi must lie in (0, 1], got {psi}")
    return math.sqrt(math.log(1.0 / psi) / (2.0 * n_samples))


def hoeffding_calibrate(estimate: EnsembleEstimate, psi: float) -> EnsembleEstimate:
    """Lower-bound the top class and upper-bound the runner-up at one-sided
    error ``psi`` each, clamped to [0, 1]."""
    margin = hoeffding_margin(estimate.n_samples, psi)
    rows = np.arange(len(estimate.top))
    fa = np.clip(estimate.means[rows, estimate.top] - margin, 0.0, 1.0)
    fb = np.clip(estimate.means[rows, estimate.runner_up] + margin, 0.0, 1.0)
    return replace(estimate, fa=fa, fb=fb, psi=psi, calibrated=True)


# --------------------------------------------------------------------------
# certified prediction

def check_one_adversary(fa: float, fb: float, epsilon: float, delta: float) -> bool:
    """Prediction is certified against one adversary iff
    ``F_A > e^{2 eps} F_B + (1 + e^eps) delta``."""
    return fa > math.exp(2 * epsilon) * fb + (1 + math.exp(epsilon)) * delta


def certified_k(fa: float, fb: float, epsilon: float, delta: float) -> float:
    """Real-valued K: the prediction is unchanged for every integer k < K.

    Returns 0 when ``fa <= fb`` and ``inf`` when the bound is unbounded
    (``fb = 0`` and ``delta = 0``).
    """
    if not epsilon > 0:
        raise ConfigurationError("certified_k requires epsilon > 0")
    if fa <= fb:
        return 0.0
    em1 = math.expm1(epsilon)
    num = fa * em1 + delta
    den = fb * em1 + delta
    if den == 0:
        return math.inf
    return math.log(num / den) / (2 * epsilon)


def certified_accuracy(correct: Sequence[bool], K: Sequence[float], k: float) -> float:
    """Fraction of samples that are correct and certified at ``k`` (``k < K_i``)."""
    correct = np.asarray(correct, dtype=bool)
    K = np.asarray(K, dtype=np.float64)
    if correct.size == 0:
        raise UsageError("certified accuracy of an empty test set")
    return float(np.mean(correct & (k < K)))


def largest_certified_k(correct: Sequence[bool], K: Sequence[float]) -> int:
    """Largest integer k at which some correct sample is still certified, or -1."""
    best = -1
    for ok, value in zip(correct, K):
        if ok and value > 0:
            best = max(best, math.ceil(value) - 1 if math.isfinite(value) else 10**9)
    return best


@dataclass(frozen=True)
class CertifiedPrediction:
    top: int
    runner_up: int
    K: float
    used_calibration: bool


def certify_estimate(estimate: EnsembleEstimate, epsilon: float, delta: float
                     ) -> list[CertifiedPrediction]:
    return [CertifiedPrediction(int(a), int(b), certified_k(float(fa), float(fb), epsilon, delta),
                                estimate.calibrated)
            for a, b, fa, fb in zip(estimate.top, estimate.runner_up, estimate.fa, estimate.fb)]


# --------------------------------------------------------------------------
# attack cost

@dataclass(frozen=True)
class CostValue:
    value: float
    clamped: bool


def clamp_costs(per_sample: np.ndarray, c_bar: float, sign_regime: str = NONNEGATIVE
                ) -> tuple[np.ndarray, bool]:
    lo, hi = (0.0, c_bar) if sign_regime == NONNEGATIVE else (-c_bar, 0.0)
    clamped = bool(((per_sample < lo) | (per_sample > hi)).any())
    return np.clip(per_sample, lo, hi), clamped


def cost_from_confidences(confidences: np.ndarray, target_label: int, c_bar: float
                          ) -> CostValue:
    """Mean clamped cross-entropy toward ``target_label`` given confidences."""
    conf = np.atleast_2d(np.asarray(confidences, dtype=np.float64))
    if conf.shape[0] == 0:
        raise UsageError("attack cost over an empty evaluation set")
    losses = -np.log(np.maximum(conf[:, target_label], CONFIDENCE_FLOOR))
    clipped, flag = clamp_costs(losses, c_bar)
    return CostValue(float(clipped.mean()), flag)


def attack_cost(kind: str, model: Model, params: ModelParams, eval_set: Dataset,
                pattern: Pattern = (), target_label: int = 0, source_class: int = 1,
                c_bar: float = math.inf) -> CostValue:
    """Backdoor: loss of ``(x + trigger, y*)`` over the evaluation set.
    Label flip: loss of ``(x, y*)`` over source-class examples."""
    if len(eval_set) == 0:
        raise UsageError("attack cost over an empty evaluation set")
    if kind == "backdoor":
        X = stamp(eval_set.features, pattern)
    elif kind == "labelflip":
        X = eval_set.features[eval_set.labels == source_class]
        if len(X) == 0:
            raise UsageError(f"no examples of source class {source_class} to evaluate")
    else:
        raise UsageError(f"unknown cost kind {kind!r}")
    return cost_from_confidences(model.predict_confidence(params, X), target_label, c_bar)


@dataclass(frozen=True)
class CostBounds:
    j_clean: float
    k: float
    epsilon: float
    delta: float
    c_bar: float
    sign_regime: str
    lower: float
    upper: float


def cost_bounds(j_clean: float, epsilon: float, delta: float, k: float, c_bar: float,
                sign_regime: str = NONNEGATIVE) -> CostBounds:
    """Range of the expected attack cost once ``k`` users/instances are poisoned."""
    if abs(j_clean) > c_bar:
        raise ConfigurationError(f"|J| = {abs(j_clean)} exceeds the cost bound {c_bar}")
    if k < 0:
        raise ConfigurationError("k must be nonnegative")
    if not epsilon > 0:
        raise ConfigurationError("epsilon must be positive")
    if k == 0:
        return CostBounds(j_clean, k, epsilon, delta, c_bar, sign_regime, j_clean, j_clean)
    em1 = math.expm1(epsilon)
    up, down = math.exp(k * epsilon), math.exp(-k * epsilon)
    grow = math.expm1(k * epsilon) / em1 * delta * c_bar
    shrink = -math.expm1(-k * epsilon) / em1 * delta * c_bar
    if sign_regime == NONNEGATIVE:
        lower = max(down * j_clean - shrink, 0.0)
        upper = min(up * j_clean + grow, c_bar)
    elif sign_regime == NONPOSITIVE:
        lower = max(up * j_clean - grow, -c_bar)
        upper = min(down * j_clean + shrink, 0.0)
    else:
        raise ConfigurationError(f"unknown sign regime {sign_regime!r}")
    return CostBounds(j_clean, k, epsilon, delta, c_bar, sign_regime, lower, upper)


def min_attackers(j_clean: float, epsilon: float, delta: float, tau: float, c_bar: float,
                  sign_regime: str = NONNEGATIVE) -> float:
    """Lower bound on the number of attackers needed to push the expected
    cost to ``J/tau`` (nonnegative costs) or ``tau*J`` (nonpositive costs)."""
    if not epsilon > 0:
        raise ConfigurationError("epsilon must be positive")
    em1 = math.expm1(epsilon)
    if sign_regime == NONNEGATIVE:
        if tau < 1:
            raise DomainError(f"tau must be >= 1, got {tau}")
        num = em1 * j_clean * tau + c_bar * delta * tau
        den = em1 * j_clean + c_bar * delta * tau
    elif sign_regime == NONPOSITIVE:
        if j_clean >= 0:
            raise DomainError("nonpositive regime needs J < 0")
        if not 1 <= tau <= -c_bar / j_clean:
            raise DomainError(f"tau must lie in [1, {-c_bar / j_clean}], got {tau}")
        num = em1 * j_clean * tau - c_bar * delta
        den = em1 * j_clean - c_bar * delta
        if not den < 0:
            raise DomainError("(e^eps - 1) J - C_bar delta must be negative")
    else:
        raise ConfigurationError(f"unknown sign regime {sign_regime!r}")
    if den == 0 or num / den <= 0:
        raise DomainError("bound undefined for J = 0 with delta = 0")
    return math.log(num / den) / epsilon
