"""Forecast evaluation: ROC AUC, confusion rates, patient-level k-fold CV and VIF."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .cohort import Cohort
from .dlr import (
    DEFAULT_RIDGE,
    DEFAULT_SIGMA_U,
    fit_initial,
    forecast_horizon,
    yearly_truth,
)


def auc(scores, labels) -> float | None:
    """Mann-Whitney AUC with tied scores counted as half; None if one class is absent."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(bool)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass(frozen=True)
class Confusion:
    tp: float
    fp: float
    tn: float
    fn: float
    threshold: float

    @property
    def accuracy(self) -> float:
        return self.tp + self.tn


def best_threshold_confusion(scores, labels) -> Confusion:
    """Confusion rates at the cutoff (predict positive when score >= cutoff) maximising accuracy.

    Ties between cutoffs go to the smallest one.
    """
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(bool)
    n = s.size
    if n == 0:
        raise ValueError("no points to evaluate")
    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    # Cutting after position k (k positives predicted); only cut between distinct scores.
    tp_cum = np.concatenate([[0], np.cumsum(y_sorted)])
    fp_cum = np.concatenate([[0], np.cumsum(~y_sorted)])
    ends = np.concatenate([[0], np.flatnonzero(np.diff(s_sorted) != 0) + 1, [n]])
    pos, neg = int(y.sum()), n - int(y.sum())
    correct = tp_cum[ends] + (neg - fp_cum[ends])
    best = int(np.flatnonzero(correct == correct.max())[-1])
    k = ends[best]
    thr = float(s_sorted[k - 1]) if k > 0 else float(np.nextafter(s_sorted[0], np.inf))
    tp, fp = int(tp_cum[k]), int(fp_cum[k])
    return Confusion(tp / n, fp / n, (neg - fp) / n, (pos - tp) / n, thr)


@dataclass
class ForecastMetrics:
    auc_by_year: list[float | None]
    confusion_by_year: list[Confusion | None]
    fold: int = 0
    folds: int = 1
    n_patients: list[int] = field(default_factory=list)

    @property
    def threshold(self) -> list[float | None]:
        return [c.threshold if c else None for c in self.confusion_by_year]


def evaluate(yearly_probs: np.ndarray, truth: np.ndarray, fold: int = 0, folds: int = 1) -> ForecastMetrics:
    """Per-year AUC and best-accuracy confusion rates; NaN truth entries are skipped."""
    P = np.atleast_2d(np.asarray(yearly_probs, dtype=float))
    Y = np.atleast_2d(np.asarray(truth, dtype=float))
    if P.shape != Y.shape:
        raise ValueError(f"forecast shape {P.shape} does not match truth shape {Y.shape}")
    aucs, confs, counts = [], [], []
    for y in range(P.shape[1]):
        ok = np.isfinite(Y[:, y])
        counts.append(int(ok.sum()))
        if not ok.any():
            aucs.append(None)
            confs.append(None)
            continue
        aucs.append(auc(P[ok, y], Y[ok, y]))
        confs.append(best_threshold_confusion(P[ok, y], Y[ok, y]))
    return ForecastMetrics(aucs, confs, fold, folds, counts)


def kfold_indices(n: int, folds: int, seed: int) -> list[np.ndarray]:
    if folds < 2 or folds > n:
        raise ValueError(f"folds must lie in [2, {n}], got {folds}")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(part) for part in np.array_split(perm, folds)]


def cross_validate(
    cohort: Cohort,
    origin_quarter: int,
    years: int = 5,
    folds: int = 3,
    seed: int = 0,
    ridge: float = DEFAULT_RIDGE,
    sigma_u: float = DEFAULT_SIGMA_U,
    mode: str = "backtest",
    layout=None,
) -> list[ForecastMetrics]:
    """Patient-level k-fold CV: fit on the other folds, forecast the held-out patients.

    Held-out patients have no fitted random intercept, so they use zero.
    """
    arrays = cohort.arrays
    parts = kfold_indices(arrays.n, folds, seed)
    truth = yearly_truth(arrays, origin_quarter, years)
    out = []
    for f, test in enumerate(parts):
        train = np.setdiff1d(np.arange(arrays.n), test)
        state, _ = fit_initial(cohort, origin_quarter - 1, ridge, 1.0 / sigma_u**2, layout, rows=train)
        fh = forecast_horizon(arrays, origin_quarter, origin_quarter + 4 * years - 1, state, {}, mode=mode, rows=test)
        out.append(evaluate(fh.yearly(), truth[test], fold=f + 1, folds=folds))
    return out


METRICS_HEADER = ("forecast_year", "auc", "tp", "fp", "tn", "fn", "threshold", "fold")


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def write_metrics_csv(path, metrics: list[ForecastMetrics]) -> None:
    with Path(path).open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(METRICS_HEADER)
        for m in metrics:
            for y, (a, c) in enumerate(zip(m.auc_by_year, m.confusion_by_year), start=1):
                if c is None:
                    wr.writerow([y, _fmt(a), "", "", "", "", "", m.fold])
                else:
                    wr.writerow([y, _fmt(a), _fmt(c.tp), _fmt(c.fp), _fmt(c.tn), _fmt(c.fn), _fmt(c.threshold), m.fold])


def pooled_auc(metrics: list[ForecastMetrics]) -> list[float | None]:
    """Mean AUC per year across folds, ignoring folds where it is undefined."""
    years = len(metrics[0].auc_by_year)
    out = []
    for y in range(years):
        vals = [m.auc_by_year[y] for m in metrics if m.auc_by_year[y] is not None]
        out.append(float(np.mean(vals)) if vals else None)
    return out


def vif_diagnostics(X: np.ndarray) -> np.ndarray:
    """Variance inflation factor per column; constant columns get NaN, collinear ones inf.

    Each column is regressed on the remaining non-constant columns plus an intercept.
    """
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    if p < 2:
        raise ValueError("VIF needs at least two covariates")
    centered = X - X.mean(axis=0)
    sst = np.sum(centered**2, axis=0)
    scale = np.sqrt(np.maximum(sst, 1e-300))
    varying = sst > 1e-12 * np.maximum(1.0, np.sum(X**2, axis=0))
    Z = centered / scale
    out = np.full(p, np.nan)
    for k in np.flatnonzero(varying):
        others = [j for j in np.flatnonzero(varying) if j != k]
        if not others:
            out[k] = 1.0
            continue
        A = Z[:, others]
        coef, *_ = np.linalg.lstsq(A, Z[:, k], rcond=None)
        ssr = float(np.sum((Z[:, k] - A @ coef) ** 2))
        out[k] = np.inf if ssr <= 1e-10 else 1.0 / ssr
    return out
