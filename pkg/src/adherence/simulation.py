"""Monte-Carlo comparison of selection rules over a multi-year horizon.

A replication walks the horizon year by year: the rule picks up to ``c``
patients, each pick succeeds with probability ``q``, and a success makes the
patient adherent for the rest of the horizon.  Everyone else follows the
cohort's recorded adherence.  Ten-year CVD risk grows by the patient's yearly
background factor and is cut by ``1 - r`` in every adherent year.
"""

from __future__ import annotations

import csv
import hashlib
import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np

from .allocation import id_ranks
from .cohort import DEFAULT_THRESHOLD, Cohort, CohortError, observed_risk_path
from .dlr import DEFAULT_RIDGE, DEFAULT_SIGMA_U, fit_initial, forecast_horizon
from .rewards import InterventionParams, reward_matrix
from .rules import DLRTracker, RuleKind, bip_dlr_step, bip_rule_plan, marginal_step, standard_step

Z95 = 1.959963984540054
PER = 100_000


class SimulationError(ValueError):
    pass


@dataclass(frozen=True)
class SimulationConfig:
    horizon_years: int = 5
    capacity_fraction: float = 0.35
    q: float = 0.8
    r: float = 0.1
    replications: int = 30
    seed: int = 0
    rule: RuleKind = RuleKind.BIP_DLR
    adherence_threshold: float = DEFAULT_THRESHOLD
    bernoulli_events: bool = False

    def __post_init__(self):
        object.__setattr__(self, "rule", RuleKind.parse(self.rule) if isinstance(self.rule, str) else self.rule)
        if self.horizon_years < 1:
            raise SimulationError("horizon_years must be at least 1")
        for name in ("capacity_fraction", "q", "r"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise SimulationError(f"{name} must lie in [0, 1], got {v}")
        if not 0.0 < self.adherence_threshold <= 1.0:
            raise SimulationError("adherence_threshold must lie in (0, 1]")
        if self.replications < 1:
            raise SimulationError("replications must be at least 1")

    def capacity(self, n: int) -> int:
        return int(np.floor(self.capacity_fraction * n + 0.5))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rule"] = self.rule.value
        return d


@dataclass
class ReplicationResult:
    events_per_100k: float
    events_reduced_vs_no_intervention: float
    rule: RuleKind
    seed: int
    replication: int
    interventions: int
    successes: int
    selected_per_epoch: list[int] = field(default_factory=list)


def patient_key(pid: str) -> int:
    """Stable 64-bit key for a patient id, independent of cohort order."""
    return int.from_bytes(hashlib.sha256(pid.encode()).digest()[:8], "little")


class SimulationContext:
    """Everything about a cohort that replications share: outcomes, growth, fitted model."""

    def __init__(
        self,
        cohort: Cohort,
        horizon_years: int = 5,
        ridge: float = DEFAULT_RIDGE,
        sigma_u: float = DEFAULT_SIGMA_U,
    ):
        if cohort.origin_quarter is None:
            raise SimulationError("cohort has no origin_quarter; it cannot be simulated")
        self.cohort = cohort
        self.T = horizon_years
        self.origin = cohort.origin_quarter
        self.ridge = ridge
        self.sigma_u = sigma_u
        a = cohort.arrays
        self.arrays = a
        self.n = a.n
        need = self.origin - 1 + 4 * self.T
        short = np.flatnonzero(a.length < need)
        if short.size:
            raise SimulationError(f"{short.size} patients lack data through quarter {need} (e.g. {a.ids[short[0]]})")
        if self.origin - 1 < 4:
            raise SimulationError("need a full year of history before the origin")
        cols = self.origin - 1 + np.arange(4 * self.T)
        nonadh = ~a.adherent[:, cols].reshape(self.n, self.T, 4)
        self.observed_adherent = nonadh.sum(axis=2) < 2
        growth = np.ones((self.n, self.T))
        for i, p in enumerate(cohort.patients):
            if len(p.risk_growth) < self.T:
                raise SimulationError(f"patient {p.id}: risk growth covers only {len(p.risk_growth)} years")
            growth[i] = p.risk_growth[: self.T]
        self.growth = growth
        self.baseline = a.risk.copy()
        # Mean PDC of the year before each epoch.
        pcols = self.origin - 5 + np.arange(4 * self.T)
        self.last_year_pdc = a.pdc[:, pcols].reshape(self.n, self.T, 4).mean(axis=2)
        self.id_rank = id_ranks(a.ids)
        self.keys = [patient_key(pid) for pid in a.ids]
        self._uniforms: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}

    @cached_property
    def model(self):
        return fit_initial(self.cohort, self.origin - 1, self.ridge, 1.0 / self.sigma_u**2)

    @cached_property
    def origin_yearly(self) -> np.ndarray:
        state, u = self.model
        fh = forecast_horizon(self.arrays, self.origin, self.origin + 4 * self.T - 1, state, u)
        return fh.yearly()

    def prepare(self, rule: RuleKind) -> None:
        """Compute shared lazy pieces before replications run concurrently."""
        if rule in (RuleKind.BIP, RuleKind.BIP_DLR, RuleKind.BIP_DLR_UB):
            _ = self.model
        if rule is RuleKind.BIP:
            _ = self.origin_yearly

    def uniforms(self, seed: int, rep: int) -> tuple[np.ndarray, np.ndarray]:
        """Per-patient success and event uniforms, shared by every rule (common random numbers)."""
        key = (seed, rep)
        if key not in self._uniforms:
            succ = np.empty((self.n, self.T))
            event = np.empty(self.n)
            for i, k in enumerate(self.keys):
                rng = np.random.default_rng(np.random.SeedSequence([seed, rep, k]))
                succ[i] = rng.random(self.T)
                event[i] = rng.random()
            self._uniforms[key] = (succ, event)
        return self._uniforms[key]

    def data_mean_risk(self, r: float) -> float:
        """Mean end-of-horizon risk implied by the recorded adherence, patient by patient."""
        ends = [
            observed_risk_path(p, list(self.observed_adherent[i]), r)[-1] for i, p in enumerate(self.cohort.patients)
        ]
        return float(np.mean(ends)) if ends else float("nan")


def advance_risk(risk: np.ndarray, growth: np.ndarray, adherent: np.ndarray, r: float) -> np.ndarray:
    return np.minimum(1.0, risk * growth * np.where(adherent, 1.0 - r, 1.0))


def _end_risk(ctx: SimulationContext, success_epoch: np.ndarray, r: float) -> np.ndarray:
    risk = ctx.baseline.copy()
    for t in range(1, ctx.T + 1):
        adh = ctx.observed_adherent[:, t - 1] | ((success_epoch > 0) & (success_epoch <= t))
        risk = advance_risk(risk, ctx.growth[:, t - 1], adh, r)
    return risk


def _events(ctx: SimulationContext, end_risk: np.ndarray, event_u: np.ndarray, bernoulli: bool) -> float:
    if ctx.n == 0:
        return 0.0
    if bernoulli:
        return PER * float(np.mean(event_u < end_risk))
    return PER * float(np.mean(end_risk))


def simulate_once(ctx: SimulationContext, config: SimulationConfig, rep: int = 0, log: list | None = None) -> ReplicationResult:
    """One replication.  When ``log`` is a list, per-epoch decision rows are appended to it."""
    if config.horizon_years != ctx.T:
        raise SimulationError(f"context horizon {ctx.T} differs from config horizon {config.horizon_years}")
    rule = config.rule
    c = config.capacity(ctx.n)
    q_eff = 1.0 if rule is RuleKind.BIP_DLR_UB else config.q
    params = InterventionParams(q_eff, config.r)
    succ_u, event_u = ctx.uniforms(config.seed, rep)
    success_epoch = np.zeros(ctx.n, dtype=int)
    pool = np.ones(ctx.n, dtype=bool)
    risk = ctx.baseline.copy()
    tracker = None
    a_origin = None
    if c > 0 and rule in (RuleKind.BIP_DLR, RuleKind.BIP_DLR_UB):
        state, u = ctx.model
        tracker = DLRTracker(ctx.arrays, ctx.origin, ctx.T, state, u)
    elif c > 0 and rule is RuleKind.BIP:
        a_origin = bip_rule_plan(ctx.origin_yearly, ctx.baseline, params)
    delivered = successes = 0
    per_epoch = []
    for t in range(1, ctx.T + 1):
        if c == 0:
            decision = None
        elif rule is RuleKind.STANDARD:
            decision = standard_step(
                t, ctx.last_year_pdc[:, t - 1], risk, pool, c, ctx.id_rank, config.adherence_threshold
            )
        elif rule is RuleKind.BIP:
            decision = marginal_step(t, a_origin[:, t - 1 :], pool, c, ctx.id_rank)
        else:
            decision = bip_dlr_step(tracker, t, risk, pool, c, ctx.id_rank, params)
        chosen = np.zeros(0, dtype=int) if decision is None else decision.selected
        if log is not None and decision is not None:
            log.extend(decision_rows(ctx, rule, decision))
        ok = chosen[succ_u[chosen, t - 1] < q_eff]
        success_epoch[ok] = t
        pool[ok] = False
        delivered += chosen.size
        successes += ok.size
        per_epoch.append(int(chosen.size))
        adh = ctx.observed_adherent[:, t - 1] | ((success_epoch > 0) & (success_epoch <= t))
        risk = advance_risk(risk, ctx.growth[:, t - 1], adh, config.r)
    events = _events(ctx, risk, event_u, config.bernoulli_events)
    base = _events(ctx, _end_risk(ctx, np.zeros(ctx.n, dtype=int), config.r), event_u, config.bernoulli_events)
    return ReplicationResult(events, base - events, rule, config.seed, rep, delivered, successes, per_epoch)


DECISION_HEADER = ("epoch", "rule", "patient_id", "score", "selected")


def decision_rows(ctx: SimulationContext, rule: RuleKind, decision) -> list[dict]:
    """Scored patients of one epoch in identifier order."""
    picked = np.zeros(ctx.n, dtype=bool)
    picked[decision.selected] = True
    rows = []
    for i in np.argsort(ctx.id_rank):
        score = decision.scores[i]
        if np.isfinite(score):
            rows.append(
                {"epoch": decision.epoch, "rule": rule.value, "patient_id": ctx.arrays.ids[i], "score": float(score), "selected": int(picked[i])}
            )
    return rows


@dataclass
class Summary:
    mean: float
    ci_low: float
    ci_high: float

    @property
    def width(self) -> float:
        return self.ci_high - self.ci_low


def mean_ci(values) -> Summary:
    v = np.asarray(values, dtype=float)
    m = float(v.mean())
    if v.size < 2:
        raise SimulationError("a confidence interval needs at least two replications")
    half = Z95 * float(v.std(ddof=1)) / np.sqrt(v.size)
    return Summary(m, m - half, m + half)


@dataclass
class RunResult:
    config: SimulationConfig
    events: Summary
    reduced: Summary
    interventions: float
    results: list[ReplicationResult]


def run_replications(ctx: SimulationContext, config: SimulationConfig, threads: int = 1) -> RunResult:
    """Independent replications of one configuration; results do not depend on ``threads``."""
    if config.replications < 2:
        raise SimulationError("run_replications needs at least two replications for a confidence interval")
    ctx.prepare(config.rule)
    for rep in range(config.replications):
        ctx.uniforms(config.seed, rep)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda k: simulate_once(ctx, config, k), range(config.replications)))
    else:
        results = [simulate_once(ctx, config, k) for k in range(config.replications)]
    return RunResult(
        config,
        mean_ci([r.events_per_100k for r in results]),
        mean_ci([r.events_reduced_vs_no_intervention for r in results]),
        float(np.mean([r.interventions for r in results])),
        results,
    )


@dataclass
class BaselineReport:
    simulated_mean_risk: float
    data_mean_risk: float
    ci_width: float
    ok: bool

    @property
    def difference(self) -> float:
        return self.simulated_mean_risk - self.data_mean_risk


def validate_baseline(ctx: SimulationContext, r: float = 0.1, seed: int = 0, replications: int = 2, tol: float = 0.01) -> BaselineReport:
    """No-intervention simulation against the data-implied mean end risk."""
    cfg = SimulationConfig(ctx.T, 0.0, 0.8, r, replications, seed, RuleKind.STANDARD)
    run = run_replications(ctx, cfg)
    sim = run.events.mean / PER
    width = run.events.width / PER
    data = ctx.data_mean_risk(r)
    return BaselineReport(sim, data, float(width), bool(abs(sim - data) <= tol and width == 0.0))


# ---------------------------------------------------------------------------
# Sweeps and the intervention catalog

SWEEP_CAPACITIES = tuple(round(0.15 + 0.1 * k, 2) for k in range(7))
SWEEP_Q = (0.7, 0.75, 0.8, 0.85, 0.9)
SWEEP_R = (0.07, 0.08, 0.09, 0.1, 0.11, 0.12)
ALL_RULES = (RuleKind.STANDARD, RuleKind.BIP, RuleKind.BIP_DLR, RuleKind.BIP_DLR_UB)

SWEEP_HEADER = (
    "axis",
    "rule",
    "capacity",
    "q",
    "r",
    "mean_events_per_100k",
    "ci_low",
    "ci_high",
    "events_reduced",
    "reduced_ci_low",
    "reduced_ci_high",
    "interventions",
    "cost",
)


def summary_row(axis: str, run: RunResult, monthly_cost: float = 0.0) -> dict:
    c = run.config
    return {
        "axis": axis,
        "rule": c.rule.value,
        "capacity": c.capacity_fraction,
        "q": c.q,
        "r": c.r,
        "mean_events_per_100k": run.events.mean,
        "ci_low": run.events.ci_low,
        "ci_high": run.events.ci_high,
        "events_reduced": run.reduced.mean,
        "reduced_ci_low": run.reduced.ci_low,
        "reduced_ci_high": run.reduced.ci_high,
        "interventions": run.interventions,
        "cost": monthly_cost * run.interventions,
    }


def sensitivity_sweep(
    ctx: SimulationContext,
    base: SimulationConfig,
    capacities=SWEEP_CAPACITIES,
    qs=SWEEP_Q,
    rs=SWEEP_R,
    rules=ALL_RULES,
    factorial: bool = False,
    threads: int = 1,
) -> list[dict]:
    """Vary capacity, q and r one at a time around ``base``, or over the full grid."""
    if not capacities or not qs or not rs or not rules:
        raise SimulationError("sweep grids must be nonempty")
    cells = []
    if factorial:
        cells = [("grid", dict(capacity_fraction=k, q=q, r=r)) for k, q, r in itertools.product(capacities, qs, rs)]
    else:
        cells += [("capacity", dict(capacity_fraction=k)) for k in capacities]
        cells += [("q", dict(q=q)) for q in qs]
        cells += [("r", dict(r=r)) for r in rs]
    rows = []
    for axis, change in cells:
        for rule in rules:
            cfg = replace(base, rule=rule, **change)
            rows.append(summary_row(axis, run_replications(ctx, cfg, threads)))
    return rows


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_rows_csv(path, rows: list[dict], header) -> None:
    with Path(path).open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for row in rows:
            wr.writerow([_fmt(row[h]) for h in header])


@dataclass(frozen=True)
class InterventionCatalogEntry:
    name: str
    success_probability: float
    monthly_cost: float


CATALOG_HEADER = ("name", "success_probability", "monthly_cost")


def default_catalog_path():
    return resources.files("adherence") / "data" / "interventions.csv"


def load_catalog(path=None) -> list[InterventionCatalogEntry]:
    src = Path(path) if path is not None else default_catalog_path()
    with src.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != CATALOG_HEADER:
            raise CohortError(f"catalog header must be {','.join(CATALOG_HEADER)}")
        out = []
        for row_no, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise CohortError(f"catalog row {row_no}: expected 3 fields, got {len(row)}")
            try:
                entry = InterventionCatalogEntry(row[0], float(row[1]), float(row[2]))
            except ValueError as exc:
                raise CohortError(f"catalog row {row_no}: {exc}") from None
            if not 0.0 <= entry.success_probability <= 1.0 or entry.monthly_cost < 0:
                raise CohortError(f"catalog row {row_no}: values out of range")
            out.append(entry)
    return out


def save_catalog(path, entries: list[InterventionCatalogEntry]) -> None:
    with Path(path).open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(CATALOG_HEADER)
        for e in entries:
            wr.writerow([e.name, repr(e.success_probability), repr(e.monthly_cost)])


COMPARISON_HEADER = (
    "intervention",
    "success_probability",
    "monthly_cost",
    "capacity",
    "events_reduced",
    "ci_low",
    "ci_high",
    "interventions",
    "total_monthly_cost",
)


def intervention_comparison(
    ctx: SimulationContext,
    catalog: list[InterventionCatalogEntry],
    base: SimulationConfig,
    capacities=(0.25, 0.5, 0.75),
    rule: RuleKind = RuleKind.BIP_DLR,
    threads: int = 1,
) -> list[dict]:
    rows = []
    for entry in catalog:
        for cap in capacities:
            run = run_replications(ctx, replace(base, rule=rule, q=entry.success_probability, capacity_fraction=cap), threads)
            rows.append(
                {
                    "intervention": entry.name,
                    "success_probability": entry.success_probability,
                    "monthly_cost": entry.monthly_cost,
                    "capacity": cap,
                    "events_reduced": run.reduced.mean,
                    "ci_low": run.reduced.ci_low,
                    "ci_high": run.reduced.ci_high,
                    "interventions": run.interventions,
                    "total_monthly_cost": entry.monthly_cost * run.interventions,
                }
            )
    return rows
