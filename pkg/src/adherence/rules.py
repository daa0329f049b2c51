"""Per-epoch patient selection rules.

All rules choose from the pool of patients without a successful
intervention; failed or unselected patients stay in the pool.  Epochs are
years and are counted from 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .allocation import epoch_scores, select_top
from .cohort import CohortArrays, DEFAULT_THRESHOLD
from .dlr import CoefficientState, dlr_step, forecast_horizon, predict_batch, clip_open
from .rewards import InterventionParams, reward_matrix


class RuleKind(str, Enum):
    STANDARD = "standard"
    BIP = "bip"
    BIP_DLR = "bip_dlr"
    BIP_DLR_UB = "bip_dlr_ub"

    @classmethod
    def parse(cls, text: str) -> "RuleKind":
        try:
            return cls(text.lower())
        except ValueError:
            raise ValueError(f"unknown rule {text!r}; choose from {[k.value for k in cls]}") from None


@dataclass
class EpochDecision:
    epoch: int
    selected: np.ndarray  # patient indices
    eligible_count: int
    scores: np.ndarray | None = None  # score of every patient, NaN outside the pool


def standard_step(
    epoch: int,
    last_year_pdc: np.ndarray,
    current_risk: np.ndarray,
    pool: np.ndarray,
    c: int,
    id_rank: np.ndarray,
    threshold: float = DEFAULT_THRESHOLD,
) -> EpochDecision:
    """Top-``c`` currently non-adherent pool members by current CVD risk."""
    eligible = pool & (last_year_pdc < threshold)
    chosen = select_top(current_risk, np.zeros_like(current_risk), id_rank, eligible, c)
    scores = np.where(eligible, current_risk, np.nan)
    return EpochDecision(epoch, chosen, int(eligible.sum()), scores)


def marginal_step(epoch: int, a: np.ndarray, pool: np.ndarray, c: int, id_rank: np.ndarray) -> EpochDecision:
    """Select by marginal reward from a reward matrix whose first column is ``epoch``."""
    score = epoch_scores(a, 1)
    chosen = select_top(score, a[:, 0], id_rank, pool, c)
    return EpochDecision(epoch, chosen, int(pool.sum()), np.where(pool, score, np.nan))


def bip_rule_plan(yearly_hat: np.ndarray, risk: np.ndarray, params: InterventionParams) -> np.ndarray:
    """Reward matrix from the forecasts made once at the origin; reused at every epoch."""
    return reward_matrix(yearly_hat, risk, params)


@dataclass
class DLRTracker:
    """Coefficient state kept current with observed data, plus fresh forecasts per epoch."""

    arrays: CohortArrays
    origin_quarter: int
    horizon_years: int
    state: CoefficientState
    u: dict[str, float]
    u_vec: np.ndarray = field(init=False)
    observed_through: int = field(init=False)

    def __post_init__(self):
        self.u_vec = np.array([self.u.get(pid, 0.0) for pid in self.arrays.ids])
        self.observed_through = self.origin_quarter - 1

    @property
    def horizon_end(self) -> int:
        return self.origin_quarter + 4 * self.horizon_years - 1

    def observe_through(self, quarter: int, rows: np.ndarray) -> None:
        """Advance the state with recorded outcomes of ``rows`` up to ``quarter``."""
        layout = self.state.layout
        for k in range(self.observed_through + 1, quarter + 1):
            X = self.arrays.features_at(k, layout, rows)
            y = clip_open(predict_batch(self.state, self.u_vec[rows], X))
            w = (~self.arrays.adherent[rows, k - 1]).astype(float)
            self.state = dlr_step(self.state, w, y, X)
        self.observed_through = max(self.observed_through, quarter)

    def yearly_forecast(self, epoch: int, rows: np.ndarray) -> np.ndarray:
        start = self.origin_quarter + 4 * (epoch - 1)
        fh = forecast_horizon(self.arrays, start, self.horizon_end, self.state, self.u, rows=rows)
        return fh.yearly()


def bip_dlr_step(
    tracker: DLRTracker,
    epoch: int,
    current_risk: np.ndarray,
    pool: np.ndarray,
    c: int,
    id_rank: np.ndarray,
    params: InterventionParams,
) -> EpochDecision:
    """Update with data through the end of the previous year, re-forecast, rank by marginal reward."""
    n = current_risk.size
    rows = np.flatnonzero(pool)
    if rows.size == 0:
        return EpochDecision(epoch, np.zeros(0, dtype=int), 0, np.full(n, np.nan))
    tracker.observe_through(tracker.origin_quarter + 4 * (epoch - 1) - 1, rows)
    yhat = tracker.yearly_forecast(epoch, rows)
    a = np.zeros((n, yhat.shape[1]))
    a[rows] = reward_matrix(yhat, current_risk[rows], params)
    return marginal_step(epoch, a, pool, c, id_rank)
