"""Dynamic logistic regression for quarterly non-adherence.

The initial model is a ridge-penalised logistic regression with per-patient
random intercepts, fitted by Newton/IRLS.  Afterwards the coefficients are
carried as a Gaussian approximation (mean ``beta`` and a precision matrix)
and refreshed one quarter at a time with a single Newton step per batch of
observations.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg
from scipy.special import expit, log_expit

from .cohort import Cohort, CohortArrays, FeatureLayout, FeatureVector
from .rewards import count_distribution_batch

DEFAULT_RIDGE = 1e-4
DEFAULT_SIGMA_U = 0.5
GRAD_TOL = 1e-8
DIVERGENCE_NORM = 1e3
PROB_FLOOR = 1e-12
# Class-mean PDC used to roll lags forward when adherence is only predicted.
EXPECTED_PDC_ADHERENT = 0.90
EXPECTED_PDC_NONADHERENT = 0.63


class ModelError(ValueError):
    pass


class SeparationError(ModelError):
    pass


@dataclass(frozen=True)
class CoefficientState:
    """Gaussian approximation to the coefficient posterior, stored as precision."""

    beta: np.ndarray
    precision: np.ndarray
    epoch: int = 0
    layout: FeatureLayout | None = None

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=float).reshape(-1)
        prec = np.asarray(self.precision, dtype=float)
        if prec.shape != (beta.size, beta.size):
            raise ModelError(f"precision shape {prec.shape} does not match beta of length {beta.size}")
        if not np.allclose(prec, prec.T, atol=1e-10, rtol=0):
            raise ModelError("precision matrix is not symmetric")
        if self.layout is not None and self.layout.size != beta.size:
            raise ModelError(f"beta has length {beta.size} but layout expects {self.layout.size}")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "precision", prec)

    @property
    def dim(self) -> int:
        return self.beta.size

    def is_positive_definite(self) -> bool:
        try:
            np.linalg.cholesky(self.precision)
        except np.linalg.LinAlgError:
            return False
        return True

    def covariance(self) -> np.ndarray:
        return linalg.cho_solve(linalg.cho_factor(self.precision), np.eye(self.dim))

    def std_errors(self) -> np.ndarray:
        return np.sqrt(np.diag(self.covariance()))

    def named(self) -> dict[str, float]:
        names = self.layout.names if self.layout else [f"b{k}" for k in range(self.dim)]
        return dict(zip(names, self.beta.tolist()))


@dataclass
class FitResult:
    beta: np.ndarray
    u: np.ndarray
    precision: np.ndarray
    iterations: int
    grad_norm: float
    objective_trace: list[float] = field(default_factory=list)


def _resolution(obj: float) -> float:
    """Objective differences below this are rounding noise, not descent."""
    return 1e-12 * max(1.0, abs(obj))


def _penalized_loglik(eta, w, beta, u, ridge_vec, re_penalty):
    ll = np.dot(w, eta) + np.sum(log_expit(-eta))
    return ll - 0.5 * np.dot(ridge_vec * beta, beta) - 0.5 * re_penalty * np.dot(u, u)


def fit_logistic(
    X: np.ndarray,
    w: np.ndarray,
    groups: np.ndarray | None = None,
    n_groups: int | None = None,
    ridge: float = DEFAULT_RIDGE,
    re_penalty: float = 1.0 / DEFAULT_SIGMA_U**2,
    tol: float = GRAD_TOL,
    max_iter: int = 200,
) -> FitResult:
    """Penalised logistic regression with optional random intercepts.

    Column 0 of ``X`` is the unpenalised intercept.  ``groups`` maps rows to
    integer group ids in ``[0, n_groups)``; each group gets an intercept
    shifted by ``u_g`` with penalty ``re_penalty * u_g**2 / 2``.  The returned
    precision is the information for ``beta`` with the group intercepts
    profiled out (Schur complement of the joint Hessian).
    """
    X = np.asarray(X, dtype=float)
    w = np.asarray(w, dtype=float)
    n, p = X.shape
    if w.shape != (n,):
        raise ModelError("outcome length does not match design rows")
    if n == 0:
        raise ModelError("no training rows")
    if not np.all((w == 0) | (w == 1)):
        raise ModelError("outcomes must be 0/1")
    if w.min() == w.max():
        raise SeparationError(
            "all training outcomes are identical; the likelihood has no finite maximiser "
            "(perfect separation). Use a larger ridge or more varied training data"
        )
    if groups is None:
        groups = np.zeros(n, dtype=int)
        n_groups = 0
    else:
        groups = np.asarray(groups, dtype=int)
        n_groups = int(groups.max()) + 1 if n_groups is None else n_groups
    ridge_vec = np.full(p, ridge)
    ridge_vec[0] = 0.0
    beta = np.zeros(p)
    u = np.zeros(n_groups)

    def eta_of(b, uu):
        e = X @ b
        return e + uu[groups] if n_groups else e

    eta = eta_of(beta, u)
    obj = _penalized_loglik(eta, w, beta, u, ridge_vec, re_penalty)
    trace = [obj]
    for it in range(1, max_iter + 1):
        mu = expit(eta)
        resid = w - mu
        g_b = X.T @ resid - ridge_vec * beta
        wt = mu * (1.0 - mu)
        H_bb = (X * wt[:, None]).T @ X + np.diag(ridge_vec)
        if n_groups:
            g_u = np.bincount(groups, weights=resid, minlength=n_groups) - re_penalty * u
            d = np.bincount(groups, weights=wt, minlength=n_groups) + re_penalty
            H_bu = np.zeros((p, n_groups))
            for k in range(p):
                H_bu[k] = np.bincount(groups, weights=wt * X[:, k], minlength=n_groups)
            S = H_bb - (H_bu / d) @ H_bu.T
            rhs = g_b - H_bu @ (g_u / d)
        else:
            g_u = np.zeros(0)
            S, rhs = H_bb, g_b
        grad_norm = max(np.abs(g_b).max(), np.abs(g_u).max() if n_groups else 0.0)
        if grad_norm < tol:
            break
        d_b = _solve_spd(S, rhs)
        d_u = (g_u - H_bu.T @ d_b) / d if n_groups else g_u
        step = 1.0
        while True:
            nb = beta + step * d_b
            nu = u + step * d_u if n_groups else u
            neta = eta_of(nb, nu)
            nobj = _penalized_loglik(neta, w, nb, nu, ridge_vec, re_penalty)
            if nobj >= obj - _resolution(obj) or step < 1e-10:
                break
            step *= 0.5
        if nobj < obj - _resolution(obj):
            # No ascent possible at floating-point resolution.
            break
        beta, u, eta, obj = nb, nu, neta, nobj
        trace.append(obj)
        if np.linalg.norm(beta) > DIVERGENCE_NORM:
            raise SeparationError(
                f"coefficient norm exceeded {DIVERGENCE_NORM:g}; the data look separable. Use a larger ridge"
            )
    else:
        raise ModelError(f"IRLS did not converge in {max_iter} iterations (gradient {grad_norm:.3g})")
    if not n_groups:
        S = H_bb
    return FitResult(beta, u, 0.5 * (S + S.T), it, float(grad_norm), trace)


def _solve_spd(S: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve ``S x = rhs`` after symmetric diagonal scaling; covariates differ in scale by orders of magnitude."""
    diag = np.diag(S)
    if np.any(diag <= 0):
        raise ModelError("information matrix is singular; check for constant or duplicated covariates")
    scale = 1.0 / np.sqrt(diag)
    Ss = S * scale[:, None] * scale[None, :]
    try:
        cf = linalg.cho_factor(0.5 * (Ss + Ss.T))
    except linalg.LinAlgError as exc:
        raise ModelError("information matrix is singular; check for constant or duplicated covariates") from exc
    return scale * linalg.cho_solve(cf, scale * rhs)


def training_rows(arrays: CohortArrays, layout: FeatureLayout, first_quarter: int, last_quarter: int, rows=None):
    """Stack (X, w, patient_index) for quarters first..last with complete data."""
    rows = np.arange(arrays.n) if rows is None else np.asarray(rows)
    Xs, ws, gs = [], [], []
    for k in range(first_quarter, last_quarter + 1):
        x = arrays.features_at(k, layout, rows)
        ok = (arrays.length[rows] >= k) & np.all(np.isfinite(x), axis=1)
        Xs.append(x[ok])
        ws.append((~arrays.adherent[rows[ok], k - 1]).astype(float))
        gs.append(rows[ok])
    if not Xs:
        return np.zeros((0, layout.size)), np.zeros(0), np.zeros(0, dtype=int)
    return np.vstack(Xs), np.concatenate(ws), np.concatenate(gs)


def fit_initial(
    cohort: Cohort,
    train_through_quarter: int,
    ridge: float = DEFAULT_RIDGE,
    re_penalty: float = 1.0 / DEFAULT_SIGMA_U**2,
    layout: FeatureLayout | None = None,
    rows=None,
) -> tuple[CoefficientState, dict[str, float]]:
    """Fit the initial regression on quarters ``pdc_lags+1 .. train_through_quarter``.

    Returns the coefficient state (epoch 0) and the random intercept of
    every patient that contributed training rows.
    """
    layout = layout or FeatureLayout()
    if train_through_quarter <= layout.pdc_lags:
        raise ModelError(
            f"train_through_quarter must exceed pdc_lags={layout.pdc_lags} to leave a full lag window"
        )
    arrays = cohort.arrays
    rows = np.arange(arrays.n) if rows is None else np.asarray(rows)
    X, w, g = training_rows(arrays, layout, layout.pdc_lags + 1, train_through_quarter, rows)
    if X.shape[0] == 0:
        raise ModelError("no complete training rows before the forecast origin")
    present, gi = np.unique(g, return_inverse=True)
    res = fit_logistic(X, w, gi, len(present), ridge, re_penalty)
    state = CoefficientState(res.beta, res.precision, 0, layout)
    u = {arrays.ids[i]: float(res.u[j]) for j, i in enumerate(present)}
    return state, u


def _as_vector(x, dim):
    values = x.values if isinstance(x, FeatureVector) else np.asarray(x, dtype=float).reshape(-1)
    if values.size != dim:
        raise ModelError(f"feature vector has length {values.size}, state expects {dim}")
    return values


def predict_probability(state: CoefficientState, u: float, x) -> float:
    return float(expit(u + state.beta @ _as_vector(x, state.dim)))


def predict_batch(state: CoefficientState, u: np.ndarray, X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != state.dim:
        raise ModelError(f"design has {X.shape[1]} columns, state expects {state.dim}")
    return expit(np.asarray(u, dtype=float) + X @ state.beta)


def clip_open(p: np.ndarray) -> np.ndarray:
    # Extreme linear predictors round to exactly 0 or 1 in double precision.
    return np.clip(p, PROB_FLOOR, 1.0 - PROB_FLOOR)


def dlr_step(state: CoefficientState, w, y_hat, X, sign: str = "ascent") -> CoefficientState:
    """One recursive update from a batch of observations.

    ``precision' = precision + sum y(1-y) x x^T`` and
    ``beta' = beta + precision'^{-1} sum (w - y) x``.  ``sign="paper"`` flips
    the coefficient step to the descent direction for comparison runs.
    """
    if sign not in ("ascent", "paper"):
        raise ModelError(f"sign must be 'ascent' or 'paper', got {sign!r}")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    w = np.atleast_1d(np.asarray(w, dtype=float))
    y = np.atleast_1d(np.asarray(y_hat, dtype=float))
    if X.shape[1] != state.dim or w.shape[0] != X.shape[0] or y.shape[0] != X.shape[0]:
        raise ModelError("observation arrays do not agree with each other or with the state dimension")
    if np.any((y <= 0) | (y >= 1)):
        raise ModelError("predicted probabilities must lie strictly in (0, 1)")
    wt = y * (1.0 - y)
    prec = state.precision + (X * wt[:, None]).T @ X
    prec = 0.5 * (prec + prec.T)
    try:
        cf = linalg.cho_factor(prec)
    except linalg.LinAlgError as exc:
        raise ModelError("updated precision is not positive definite") from exc
    score = X.T @ (w - y)
    delta = linalg.cho_solve(cf, score)
    beta = state.beta + delta if sign == "ascent" else state.beta - delta
    return CoefficientState(beta, prec, state.epoch + 1, state.layout)


@dataclass
class ForecastHorizon:
    """Quarterly non-adherence probabilities from ``origin_quarter`` to ``horizon_end``."""

    probabilities: np.ndarray
    origin_quarter: int
    horizon_end: int
    ids: list[str]
    final_state: CoefficientState | None = None

    def __post_init__(self):
        p = self.probabilities
        if p.shape != (len(self.ids), self.horizon_end - self.origin_quarter + 1):
            raise ModelError("probability matrix shape does not match ids and horizon")
        if np.any((p <= 0) | (p >= 1)):
            raise ModelError("forecast probabilities must lie strictly in (0, 1)")

    @property
    def n_quarters(self) -> int:
        return self.probabilities.shape[1]

    def yearly(self) -> np.ndarray:
        """P(at least two non-adherent quarters) per patient per full year."""
        return yearly_probability(self.probabilities)


def yearly_probability(quarterly: np.ndarray) -> np.ndarray:
    q = np.asarray(quarterly, dtype=float)
    years = q.shape[1] // 4
    if years == 0:
        raise ModelError("yearly aggregation needs at least four quarters")
    blocks = q[:, : 4 * years].reshape(q.shape[0] * years, 4)
    dist = count_distribution_batch(blocks)
    out = 1.0 - dist[:, 0] - dist[:, 1]
    return np.clip(out, 0.0, 1.0).reshape(q.shape[0], years)


def _projection_arrays(arrays: CohortArrays, origin: int, horizon_end: int) -> CohortArrays:
    """Copy of the history through ``origin-1`` extended to ``horizon_end`` columns.

    Future biometrics are left missing so LOCF holds them at the last value;
    cumulative test counts grow at each patient's historical mean rate.
    """
    n = arrays.n
    hist = origin - 1
    width = max(horizon_end, hist)

    def take(a, fill):
        out = np.full((n, width), fill, dtype=float)
        out[:, :hist] = a[:, :hist]
        return out

    pdc = take(arrays.pdc, np.nan)
    n_bp = take(arrays.n_bp, 0.0)
    n_chol = take(arrays.n_chol, 0.0)
    steps = np.arange(1, width - hist + 1)
    for cum in (n_bp, n_chol):
        rate = cum[:, hist - 1] / hist
        cum[:, hist:] = cum[:, hist - 1 : hist] + rate[:, None] * steps[None, :]
    return CohortArrays(
        ids=arrays.ids,
        sex=arrays.sex,
        race=arrays.race,
        smoker=arrays.smoker,
        age0=arrays.age0,
        risk=arrays.risk,
        length=np.full(n, width),
        pdc=pdc,
        adherent=np.zeros((n, width), dtype=bool),
        sbp=take(arrays.sbp, np.nan),
        ldl=take(arrays.ldl, np.nan),
        tc=take(arrays.tc, np.nan),
        n_bp=n_bp,
        n_chol=n_chol,
    )


def forecast_horizon(
    cohort: Cohort | CohortArrays,
    origin_quarter: int,
    horizon_end: int,
    state: CoefficientState,
    u_estimates: dict[str, float] | None = None,
    mode: str = "forecast",
    sign: str = "ascent",
    rows=None,
) -> ForecastHorizon:
    """Recursive quarter-by-quarter forecast from ``origin_quarter`` through ``horizon_end``.

    Covariates are projected from data before the origin.  In ``forecast``
    mode each step uses the prediction as its own outcome, so only the
    precision changes.  In ``backtest`` mode the recorded outcome of each
    quarter (where one exists) drives the coefficient update.
    """
    if mode not in ("forecast", "backtest"):
        raise ModelError(f"mode must be 'forecast' or 'backtest', got {mode!r}")
    layout = state.layout or FeatureLayout()
    if origin_quarter <= layout.pdc_lags:
        raise ModelError(f"origin_quarter must exceed pdc_lags={layout.pdc_lags}")
    if horizon_end < origin_quarter:
        raise ModelError("horizon_end must be at or after origin_quarter")
    full = cohort if isinstance(cohort, CohortArrays) else cohort.arrays
    if rows is not None:
        full = _subset_arrays(full, np.asarray(rows))
    short = np.flatnonzero(full.length < origin_quarter - 1)
    if short.size:
        raise ModelError(
            f"{short.size} patients lack history through quarter {origin_quarter - 1} (e.g. {full.ids[short[0]]})"
        )
    u_estimates = u_estimates or {}
    u = np.array([u_estimates.get(pid, 0.0) for pid in full.ids])
    work = _projection_arrays(full, origin_quarter, horizon_end)
    probs = np.empty((full.n, horizon_end - origin_quarter + 1))
    for j, k in enumerate(range(origin_quarter, horizon_end + 1)):
        X = work.features_at(k, layout)
        y = clip_open(predict_batch(state, u, X))
        probs[:, j] = y
        if mode == "backtest":
            observed = full.length >= k
            w = y.copy()
            if k - 1 < full.n_quarters:
                w[observed] = (~full.adherent[observed, k - 1]).astype(float)
        else:
            w = y
        state = dlr_step(state, w, y, X, sign=sign)
        work.pdc[:, k - 1] = EXPECTED_PDC_NONADHERENT * y + EXPECTED_PDC_ADHERENT * (1.0 - y)
    return ForecastHorizon(probs, origin_quarter, horizon_end, list(full.ids), state)


def _subset_arrays(a: CohortArrays, rows: np.ndarray) -> CohortArrays:
    return CohortArrays(
        ids=[a.ids[i] for i in rows],
        sex=a.sex[rows],
        race=a.race[rows],
        smoker=a.smoker[rows],
        age0=a.age0[rows],
        risk=a.risk[rows],
        length=a.length[rows],
        pdc=a.pdc[rows],
        adherent=a.adherent[rows],
        sbp=a.sbp[rows],
        ldl=a.ldl[rows],
        tc=a.tc[rows],
        n_bp=a.n_bp[rows],
        n_chol=a.n_chol[rows],
    )


def save_model(path, state: CoefficientState, u_by_patient: dict[str, float], config: dict | None = None) -> None:
    doc = {
        "layout": (state.layout or FeatureLayout()).to_dict(),
        "beta": state.beta.tolist(),
        "precision": state.precision.reshape(-1).tolist(),
        "epoch": state.epoch,
        "u_by_patient": dict(sorted(u_by_patient.items())),
        "config": config or {},
    }
    Path(path).write_text(json.dumps(doc, indent=1, allow_nan=False) + "\n")


def load_model(path) -> tuple[CoefficientState, dict[str, float], dict]:
    doc = json.loads(Path(path).read_text())
    expected = {"layout", "beta", "precision", "epoch", "u_by_patient", "config"}
    if set(doc) != expected:
        raise ModelError(f"model file keys {sorted(doc)} do not match {sorted(expected)}")
    layout = FeatureLayout.from_dict(doc["layout"])
    p = len(doc["beta"])
    prec = np.asarray(doc["precision"], dtype=float)
    if prec.size != p * p:
        raise ModelError("precision has the wrong number of entries")
    state = CoefficientState(np.asarray(doc["beta"]), prec.reshape(p, p), int(doc["epoch"]), layout)
    return state, {k: float(v) for k, v in doc["u_by_patient"].items()}, doc["config"]


def yearly_truth(arrays: CohortArrays, origin_quarter: int, years: int) -> np.ndarray:
    """Observed yearly non-adherence labels; NaN where a year is incomplete."""
    out = np.full((arrays.n, years), np.nan)
    for y in range(years):
        start = origin_quarter - 1 + 4 * y
        if start + 4 > arrays.n_quarters:
            break
        block = arrays.adherent[:, start : start + 4]
        ok = arrays.length >= start + 4
        out[ok, y] = (np.sum(~block[ok], axis=1) >= 2).astype(float)
    return out

