"""Expected CVD-risk reduction from intervening on a patient at a given epoch.

For a patient with yearly non-adherence probabilities ``y[t..T]`` the number
of non-adherent epochs left is Poisson-binomial.  Each non-adherent epoch
costs a factor ``(1 - r)`` of risk reduction that an intervention would have
secured, giving

    a_t = CVD - q * sum_k P(N_t = k) (1 - r)^k CVD.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MONOTONE_TOL = 1e-9


class RewardError(ValueError):
    pass


@dataclass(frozen=True)
class InterventionParams:
    q: float = 0.8
    r: float = 0.1

    def __post_init__(self):
        for name in ("q", "r"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise RewardError(f"{name} must lie in [0, 1], got {v}")


@dataclass(frozen=True)
class NonAdherenceProfile:
    y_hat: tuple
    cvd_risk: float

    def __post_init__(self):
        y = np.asarray(self.y_hat, dtype=float)
        _check_probs(y)
        if not 0.0 <= self.cvd_risk <= 1.0:
            raise RewardError(f"cvd_risk must lie in [0, 1], got {self.cvd_risk}")
        object.__setattr__(self, "y_hat", tuple(y.tolist()))


def _check_probs(y: np.ndarray) -> None:
    if y.size == 0:
        raise RewardError("need at least one epoch")
    if np.any(~np.isfinite(y)) or np.any((y < 0) | (y > 1)):
        raise RewardError("non-adherence probabilities must lie in [0, 1]")


def count_distribution(y_hat) -> np.ndarray:
    """P(N = k), k = 0..K, for N a sum of independent Bernoulli(y_hat)."""
    y = np.asarray(y_hat, dtype=float).reshape(-1)
    _check_probs(y)
    return count_distribution_batch(y[None, :])[0]


def count_distribution_batch(Y: np.ndarray) -> np.ndarray:
    """Row-wise Poisson-binomial distributions, shape ``(m, K+1)``."""
    Y = np.asarray(Y, dtype=float)
    m, K = Y.shape
    P = np.zeros((m, K + 1))
    P[:, 0] = 1.0
    for j in range(K):
        y = Y[:, j : j + 1]
        P[:, 1 : j + 2] = P[:, 1 : j + 2] * (1.0 - y) + P[:, : j + 1] * y
        P[:, 0] *= 1.0 - Y[:, j]
    return P


def expected_reward(profile: NonAdherenceProfile, params: InterventionParams) -> float:
    """Expected total risk reduction for intervening at the first epoch of ``profile``."""
    P = count_distribution(profile.y_hat)
    decay = (1.0 - params.r) ** np.arange(P.size)
    return profile.cvd_risk - params.q * float(P @ decay) * profile.cvd_risk


def marginal_reward(profile: NonAdherenceProfile, params: InterventionParams) -> float:
    """``a_{t-1} - a_t`` for a profile starting at epoch ``t-1``."""
    if len(profile.y_hat) < 2:
        raise RewardError("marginal reward needs at least two epochs")
    rest = NonAdherenceProfile(profile.y_hat[1:], profile.cvd_risk)
    a_t = expected_reward(rest, params)
    return params.r * profile.y_hat[0] * (profile.cvd_risk - a_t)


def reward_matrix(forecasts, risks, params: InterventionParams) -> np.ndarray:
    """``a[i, t]`` for every patient and epoch.

    ``forecasts`` is an ``(n, T)`` array of yearly non-adherence
    probabilities or an object exposing ``yearly()``.
    """
    Y = forecasts.yearly() if hasattr(forecasts, "yearly") else forecasts
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    risks = np.asarray(risks, dtype=float).reshape(-1)
    n, T = Y.shape
    if risks.shape != (n,):
        raise RewardError(f"got {risks.size} risks for {n} patients")
    _check_probs(Y)
    if np.any((risks < 0) | (risks > 1)):
        raise RewardError("risks must lie in [0, 1]")
    a = np.empty((n, T))
    # Distributions over epochs t..T, built from the horizon end backwards.
    P = np.zeros((n, T + 1))
    P[:, 0] = 1.0
    decay = (1.0 - params.r) ** np.arange(T + 1)
    for t in range(T - 1, -1, -1):
        y = Y[:, t : t + 1]
        k = T - t  # number of epochs now in the distribution
        P[:, 1 : k + 1] = P[:, 1 : k + 1] * (1.0 - y) + P[:, :k] * y
        P[:, 0] *= 1.0 - Y[:, t]
        a[:, t] = risks - params.q * (P[:, : k + 1] @ decay[: k + 1]) * risks
    if T > 1 and np.any(np.diff(a, axis=1) > MONOTONE_TOL):
        bad = int(np.argmax(np.max(np.diff(a, axis=1), axis=1)))
        raise RewardError(f"reward row {bad} increases over time; reward computation is inconsistent")
    return a


def write_reward_csv(path, ids, a: np.ndarray) -> None:
    with Path(path).open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["patient_id", "epoch", "a_it"])
        for pid, row in zip(ids, a):
            for t, v in enumerate(row, start=1):
                wr.writerow([pid, t, repr(float(v))])
