"""Batch-level decisions: normal-approximation error rates and EM for model switching."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_ndtr


class NonIdentifiableError(ValueError):
    pass


@dataclass(frozen=True)
class ErrorRates:
    alpha: float
    beta: float
    log_alpha: float
    log_beta: float
    p0: float
    p1: float
    B: int
    tau: float


def _check_prob(name: str, p: float) -> None:
    if not 0.0 < p < 1.0:
        raise ValueError(f"{name} must lie strictly inside (0, 1) (degenerate variance), got {p}")


def error_rates(p0: float, p1: float, B: int, tau: float) -> ErrorRates:
    """Type-I / type-II error of the rule "reject honesty when mean(V) < tau".

    Under honesty mean(V) ~ N(p1, p1(1-p1)/B), otherwise N(p0, p0(1-p0)/B).
    Tails are evaluated as log Phi so values far below 1e-300 keep their logs.
    """
    _check_prob("p0", p0)
    _check_prob("p1", p1)
    if B < 1:
        raise ValueError(f"B must be positive, got {B}")
    z1 = (tau - p1) / math.sqrt(p1 * (1.0 - p1) / B)
    z0 = (tau - p0) / math.sqrt(p0 * (1.0 - p0) / B)
    log_alpha = float(log_ndtr(z1))
    log_beta = float(log_ndtr(-z0))
    return ErrorRates(math.exp(log_alpha), math.exp(log_beta), log_alpha, log_beta, p0, p1, int(B), tau)


def error_rate_curve(p0: float, p1: float, batch_sizes, taus) -> list[dict]:
    return [
        {"B": int(b), "tau": float(t), "alpha": r.alpha, "beta": r.beta}
        for b in batch_sizes
        for t in taus
        for r in [error_rates(p0, p1, int(b), float(t))]
    ]


@dataclass(frozen=True)
class BatchVerdict:
    mean: float
    tau: float
    honest: bool
    B: int

    @property
    def decision(self) -> str:
        return "honest" if self.honest else "dishonest"


def batch_decide(outcomes, tau: float) -> BatchVerdict:
    v = [int(x) for x in outcomes]
    if not v:
        raise ValueError("batch_decide needs at least one outcome")
    if any(x not in (0, 1) for x in v):
        raise ValueError("outcomes must be 0/1")
    mean = sum(v) / len(v)
    return BatchVerdict(mean, tau, mean >= tau, len(v))


# ---------------------------------------------------------------------------
# EM for occasional switching
# ---------------------------------------------------------------------------


@dataclass
class EMState:
    p1: float
    p0: float
    pi: float
    responsibilities: np.ndarray
    iterations: int = 0
    log_likelihood: list[float] = field(default_factory=list)
    converged: bool = False
    swapped: bool = False


_CLIP = 1e-12


def _loglik(v: np.ndarray, p1: float, p0: float, pi: float) -> float:
    a = np.log(pi) + np.where(v == 1, np.log(p1), np.log1p(-p1))
    b = np.log1p(-pi) + np.where(v == 1, np.log(p0), np.log1p(-p0))
    return float(np.logaddexp(a, b).sum())


def em_infer(outcomes, init: tuple[float, float, float], max_iter: int = 500, tol: float = 1e-8,
             fix_rates: bool = False) -> EMState:
    """Two-component Bernoulli mixture over per-query outcomes.

    ``init`` is ``(p1, p0, pi)`` where ``pi`` is the probability a query was
    served by the specified model. With one binary observation per query only
    the overall acceptance rate is identified, so the answer depends on the
    starting rates; seed them with calibrated values (1 - FNR, FPR). Passing
    ``fix_rates=True`` keeps ``p1, p0`` at their initial values and updates
    ``pi`` alone.
    """
    v = np.asarray(outcomes, dtype=int)
    if v.size == 0:
        raise ValueError("em_infer needs at least one outcome")
    if np.any((v != 0) & (v != 1)):
        raise ValueError("outcomes must be binary")
    p1, p0, pi = (float(x) for x in init)
    for name, p in (("p1", p1), ("p0", p0), ("pi", pi)):
        _check_prob(name, p)
    if p1 == p0:
        raise NonIdentifiableError("p1 == p0 at initialisation: the two components cannot be told apart")

    state = EMState(p1, p0, pi, np.full(v.size, pi))
    state.log_likelihood.append(_loglik(v, p1, p0, pi))
    for it in range(1, max_iter + 1):
        # E-step
        la = np.log(pi) + np.where(v == 1, np.log(p1), np.log1p(-p1))
        lb = np.log1p(-pi) + np.where(v == 1, np.log(p0), np.log1p(-p0))
        gamma = np.exp(la - np.logaddexp(la, lb))
        # M-step
        g_sum = gamma.sum()
        new_pi = float(np.clip(g_sum / v.size, _CLIP, 1 - _CLIP))
        if fix_rates:
            new_p1, new_p0 = p1, p0
        else:
            new_p1 = float(np.clip((gamma * v).sum() / max(g_sum, _CLIP), _CLIP, 1 - _CLIP))
            new_p0 = float(np.clip(((1 - gamma) * v).sum() / max(v.size - g_sum, _CLIP), _CLIP, 1 - _CLIP))
        change = max(abs(new_p1 - p1), abs(new_p0 - p0), abs(new_pi - pi))
        p1, p0, pi = new_p1, new_p0, new_pi
        state.responsibilities = gamma
        state.iterations = it
        state.log_likelihood.append(_loglik(v, p1, p0, pi))
        if change < tol:
            state.converged = True
            break
    if p1 < p0:
        p1, p0, pi = p0, p1, 1.0 - pi
        state.responsibilities = 1.0 - state.responsibilities
        state.swapped = True
    state.p1, state.p0, state.pi = p1, p0, pi
    return state
