"""Synthetic cohorts calibrated to published VA population statistics.

Every patient draws all of its random variates from a private child of the
master seed sequence, so the cohort is identical no matter how the patients
are partitioned across workers.  Quarterly non-adherence is then generated by
the ground-truth logistic model applied to the evolving feature vector, using
the same feature assembly the forecasting code uses.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy import stats
from scipy.special import expit

from .cohort import (
    DEFAULT_PDC_LAGS,
    DEFAULT_PDC_UNIT,
    DEFAULT_QUARTER_DAYS,
    DEFAULT_THRESHOLD,
    Cohort,
    CohortArrays,
    CohortError,
    DemographicProfile,
    FeatureLayout,
    Patient,
    QuarterlyRecord,
    Race,
    Sex,
)

# Published logistic-regression estimates for quarterly non-adherence.
TRUE_COEFFICIENTS = {
    "intercept": 3.449,
    "sex": -0.285,
    "race": -0.324,
    "smoker": 0.062,
    "age": 4.22e-3,
    "sbp": 7.69e-5,
    "n_bp_tests": 0.105,
    "ldl": 5.55e-3,
    "total_cholesterol": 1.37e-3,
    "n_chol_tests": -0.093,
    "pdc_lag_1": -0.755,
    "pdc_lag_2": -0.707,
    "pdc_lag_3": -0.190,
    "pdc_lag_4": -0.420,
    "pdc_lag_5": -0.296,
    "pdc_lag_6": -0.091,
    "pdc_lag_7": -0.221,
    "pdc_lag_8": -0.033,
}

REFERENCE_STD_ERRORS = {
    "intercept": 0.545,
    "sex": 0.195,
    "race": 0.121,
    "smoker": 0.100,
    "age": 3.91e-3,
    "sbp": 2.77e-3,
    "n_bp_tests": 0.033,
    "ldl": 2.42e-3,
    "total_cholesterol": 2.05e-3,
    "n_chol_tests": 0.071,
    "pdc_lag_1": 0.136,
    "pdc_lag_2": 0.149,
    "pdc_lag_3": 0.149,
    "pdc_lag_4": 0.152,
    "pdc_lag_5": 0.151,
    "pdc_lag_6": 0.148,
    "pdc_lag_7": 0.146,
    "pdc_lag_8": 0.133,
}

# Baseline characteristics by lifetime adherence class: (mean, sd) pairs or
# proportions.  Test counts are per patient over five years.
CLASS_PROFILES = {
    "non_adherent": {
        "n": 1569,
        "smoker": 0.237,
        "age": (59.22, 11.76),
        "pdc": (0.63, 0.15),
        "sbp": (129.90, 9.71),
        "n_bp_tests": (34.03, 33.54),
        "ldl": (123.06, 28.76),
        "total_cholesterol": (199.09, 33.13),
        "n_chol_tests": (10.99, 7.11),
    },
    "adherent": {
        "n": 2095,
        "smoker": 0.206,
        "age": (63.84, 11.05),
        "pdc": (0.90, 0.05),
        "sbp": (128.99, 8.72),
        "n_bp_tests": (42.40, 47.16),
        "ldl": (103.54, 23.60),
        "total_cholesterol": (177.08, 29.92),
        "n_chol_tests": (14.22, 7.25),
    },
}

# White male, black male, white female, black female; the remaining 1.5% of
# the source population is reassigned proportionally.
DEMOGRAPHIC_PROPORTIONS = {
    "white_male": 0.70,
    "black_male": 0.20,
    "white_female": 0.065,
    "black_female": 0.02,
}

LDL_TC_CORRELATION = 0.87
AGE_RANGE = (40.0, 80.0)
MEASUREMENT_NOISE_FRACTION = 0.3


@dataclass
class GeneratorConfig:
    n: int = 1000
    seed: int = 0
    adherence_threshold: float = DEFAULT_THRESHOLD
    sigma_u: float = 0.5
    demographic_proportions: dict = field(default_factory=lambda: dict(DEMOGRAPHIC_PROPORTIONS))
    class_profile_overrides: dict = field(default_factory=dict)
    true_coefficients: dict = field(default_factory=lambda: dict(TRUE_COEFFICIENTS))
    history_quarters: int = 20
    horizon_years: int = 5
    pdc_lags: int = DEFAULT_PDC_LAGS
    pdc_unit: float = DEFAULT_PDC_UNIT
    initial_pdc: float = 0.9
    quarter_length_days: int = DEFAULT_QUARTER_DAYS
    risk_mean: float = 0.17
    risk_concentration: float = 20.0
    annual_risk_growth: float = 1.055
    risk_growth_sd: float = 0.02
    test_rate_cv: float | None = 0.1
    pdc_persistence: float = 0.8

    def __post_init__(self):
        if self.n <= 0:
            raise CohortError(f"n must be positive, got {self.n}")
        if self.sigma_u < 0:
            raise CohortError("sigma_u must be non-negative")
        if not 0 < self.risk_mean < 1 or self.risk_concentration <= 0:
            raise CohortError("risk_mean must lie in (0, 1) and risk_concentration be positive")
        if self.test_rate_cv is not None and self.test_rate_cv < 0:
            raise CohortError("test_rate_cv must be non-negative")
        if not 0.0 <= self.pdc_persistence < 1.0:
            raise CohortError("pdc_persistence must lie in [0, 1)")
        if self.history_quarters <= self.pdc_lags:
            raise CohortError("history_quarters must exceed pdc_lags")
        layout = FeatureLayout(self.pdc_lags, self.pdc_unit)
        missing = set(layout.names) - set(self.true_coefficients)
        extra = set(self.true_coefficients) - set(layout.names)
        if missing or extra:
            raise CohortError(f"true_coefficients mismatch: missing {sorted(missing)}, unknown {sorted(extra)}")
        for cls, over in self.class_profile_overrides.items():
            if cls not in CLASS_PROFILES:
                raise CohortError(f"unknown class profile {cls!r}")
            unknown = set(over) - set(CLASS_PROFILES[cls])
            if unknown:
                raise CohortError(f"unknown profile fields for {cls}: {sorted(unknown)}")
        unknown = set(self.demographic_proportions) - set(DEMOGRAPHIC_PROPORTIONS)
        if unknown:
            raise CohortError(f"unknown demographic groups {sorted(unknown)}")

    @property
    def layout(self) -> FeatureLayout:
        return FeatureLayout(self.pdc_lags, self.pdc_unit)

    @property
    def n_quarters(self) -> int:
        return self.history_quarters + 4 * self.horizon_years

    def class_profiles(self) -> dict:
        t = {cls: dict(v) for cls, v in CLASS_PROFILES.items()}
        for cls, over in self.class_profile_overrides.items():
            t[cls].update({k: tuple(v) if isinstance(v, list) else v for k, v in over.items()})
        return t

    def beta(self) -> np.ndarray:
        return np.array([self.true_coefficients[name] for name in self.layout.names], dtype=float)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise CohortError(f"unknown GeneratorConfig fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "GeneratorConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _truncnorm(u, mean, sd, lo=-np.inf, hi=np.inf):
    a, b = (lo - mean) / sd, (hi - mean) / sd
    return stats.truncnorm.ppf(u, a, b, loc=mean, scale=sd)


def _test_rate(rng: np.random.Generator, mean5y: float, sd5y: float, cv: float | None) -> float:
    """Per-quarter Poisson rate for a patient's test counts.

    With ``cv=None`` the gamma heterogeneity reproduces the 5-year mean and
    SD; otherwise the rate's coefficient of variation is ``cv``.
    """
    m = mean5y / 20.0
    if cv is None:
        excess = sd5y**2 - mean5y
        if excess <= 0:
            return m
        shape = mean5y * mean5y / excess
    elif cv == 0:
        return m
    else:
        shape = 1.0 / cv**2
    return rng.gamma(shape, m / shape)


@dataclass
class _Draws:
    """Per-patient static draws plus the per-quarter uniforms used by the dynamics."""

    male: np.ndarray
    white: np.ndarray
    smoker: np.ndarray
    age: np.ndarray
    latent: np.ndarray  # (n, 3): sbp, ldl, tc
    u: np.ndarray
    risk: np.ndarray
    growth: np.ndarray  # (n, horizon_years)
    n_bp: np.ndarray  # (n, Q) tests per quarter
    n_chol: np.ndarray
    sbp_obs: np.ndarray  # (n, Q), NaN when untested
    ldl_obs: np.ndarray
    tc_obs: np.ndarray
    u_adh: np.ndarray  # (n, Q) uniforms for the adherence draw
    u_pdc: np.ndarray  # (n, Q) uniforms for the PDC level


def _ar1_uniforms(rng: np.random.Generator, q: int, phi: float) -> np.ndarray:
    """Uniform marginals from a stationary Gaussian AR(1) with coefficient ``phi``."""
    eps = rng.standard_normal(q)
    z = np.empty(q)
    z[0] = eps[0]
    scale = np.sqrt(1.0 - phi * phi)
    for k in range(1, q):
        z[k] = phi * z[k - 1] + scale * eps[k]
    return stats.norm.cdf(z)


def _draw_patient(rng: np.random.Generator, cfg: GeneratorConfig, profiles: dict, groups, group_p, p_nonadh_class):
    q = cfg.n_quarters
    g = groups[rng.choice(len(groups), p=group_p)]
    cls = profiles["non_adherent"] if rng.random() < p_nonadh_class else profiles["adherent"]
    smoker = rng.random() < cls["smoker"]
    age = float(_truncnorm(rng.random(), *cls["age"], *AGE_RANGE))
    sd = np.array([cls["sbp"][1], cls["ldl"][1], cls["total_cholesterol"][1]])
    mean = np.array([cls["sbp"][0], cls["ldl"][0], cls["total_cholesterol"][0]])
    corr = np.eye(3)
    corr[1, 2] = corr[2, 1] = LDL_TC_CORRELATION
    chol = np.linalg.cholesky(corr)
    latent = mean + sd * (chol @ rng.standard_normal(3))
    u = rng.normal(0.0, cfg.sigma_u)
    a = cfg.risk_mean * cfg.risk_concentration
    risk = rng.beta(a, cfg.risk_concentration - a)
    growth = cfg.annual_risk_growth * np.exp(rng.normal(0.0, cfg.risk_growth_sd, cfg.horizon_years))
    rate_bp = _test_rate(rng, *cls["n_bp_tests"], cfg.test_rate_cv)
    rate_chol = _test_rate(rng, *cls["n_chol_tests"], cfg.test_rate_cv)
    n_bp = rng.poisson(rate_bp, q)
    n_chol = rng.poisson(rate_chol, q)
    n_bp[0] = max(n_bp[0], 1)
    n_chol[0] = max(n_chol[0], 1)
    noise = MEASUREMENT_NOISE_FRACTION * sd * (chol @ rng.standard_normal((3, q))).T
    sbp_obs = np.where(n_bp > 0, np.round(latent[0] + noise[:, 0] / np.sqrt(np.maximum(n_bp, 1))), np.nan)
    scale = 1.0 / np.sqrt(np.maximum(n_chol, 1))
    ldl_obs = np.where(n_chol > 0, np.round(latent[1] + noise[:, 1] * scale), np.nan)
    tc_obs = np.where(n_chol > 0, np.round(latent[2] + noise[:, 2] * scale), np.nan)
    return (
        g,
        smoker,
        age,
        latent,
        u,
        risk,
        growth,
        n_bp,
        n_chol,
        np.clip(sbp_obs, 60, 260),
        np.clip(ldl_obs, 20, 400),
        np.clip(tc_obs, 60, 500),
        rng.random(q),
        _ar1_uniforms(rng, q, cfg.pdc_persistence),
    )


def _draw_all(cfg: GeneratorConfig) -> _Draws:
    profiles = cfg.class_profiles()
    props = {k: cfg.demographic_proportions.get(k, 0.0) for k in DEMOGRAPHIC_PROPORTIONS}
    total = sum(props.values())
    if total <= 0:
        raise CohortError("demographic proportions must sum to a positive value")
    groups = list(props)
    group_p = np.array([props[k] / total for k in groups])
    n_non, n_adh = profiles["non_adherent"]["n"], profiles["adherent"]["n"]
    p_non = n_non / (n_non + n_adh)
    children = np.random.SeedSequence(cfg.seed).spawn(cfg.n)
    rows = [_draw_patient(np.random.default_rng(c), cfg, profiles, groups, group_p, p_non) for c in children]
    cols = list(zip(*rows))
    g = cols[0]
    return _Draws(
        male=np.array([s.endswith("_male") for s in g], dtype=float),
        white=np.array([s.startswith("white") for s in g], dtype=float),
        smoker=np.array(cols[1], dtype=float),
        age=np.array(cols[2]),
        latent=np.array(cols[3]),
        u=np.array(cols[4]),
        risk=np.array(cols[5]),
        growth=np.array(cols[6]),
        n_bp=np.array(cols[7]),
        n_chol=np.array(cols[8]),
        sbp_obs=np.array(cols[9]),
        ldl_obs=np.array(cols[10]),
        tc_obs=np.array(cols[11]),
        u_adh=np.array(cols[12]),
        u_pdc=np.array(cols[13]),
    )


def _pdc_days(u: np.ndarray, nonadherent: np.ndarray, cfg: GeneratorConfig, profiles: dict) -> np.ndarray:
    """Covered days in a quarter, consistent with the adherence draw and threshold."""
    days = cfg.quarter_length_days
    d_min = int(np.ceil(cfg.adherence_threshold * days - 1e-9))
    while d_min > 0 and (d_min - 1) / days >= cfg.adherence_threshold:
        d_min -= 1
    while d_min / days < cfg.adherence_threshold:
        d_min += 1
    thr = d_min / days
    m_a, s_a = profiles["adherent"]["pdc"]
    m_n, s_n = profiles["non_adherent"]["pdc"]
    # Truncate at the threshold; the far tails pile up at full coverage / zero.
    adh = _truncnorm(u, m_a, s_a, lo=thr)
    non = _truncnorm(u, m_n, s_n, hi=thr)
    level = np.where(nonadherent, non, adh)
    out = np.rint(level * days)
    out = np.where(nonadherent, np.clip(out, 0, d_min - 1), np.clip(out, d_min, days))
    return out.astype(int)


def generate_synthetic_cohort(n: int | None = None, seed: int | None = None, config: GeneratorConfig | None = None) -> Cohort:
    """Generate a cohort of ``n`` patients deterministically from ``seed``.

    ``n`` and ``seed`` override the corresponding config fields.
    """
    cfg = config or GeneratorConfig()
    overrides = {}
    if n is not None:
        overrides["n"] = n
    if seed is not None:
        overrides["seed"] = seed
    if overrides:
        cfg = GeneratorConfig.from_dict({**cfg.to_dict(), **overrides})
    profiles = cfg.class_profiles()
    d = _draw_all(cfg)
    layout = cfg.layout
    lags = layout.pdc_lags
    q = cfg.n_quarters
    n = cfg.n

    # Lags before quarter 1 are padded: pad quarters carry the initial PDC,
    # the latent biometrics and no tests.
    pad = lags
    pdc = np.full((n, pad + q), np.nan)
    pdc[:, :pad] = cfg.initial_pdc

    def padded(obs, fill):
        return np.hstack([np.repeat(fill[:, None], pad, axis=1), obs])

    zeros = np.zeros((n, pad))
    arrays = CohortArrays(
        ids=[str(i) for i in range(n)],
        sex=d.male,
        race=d.white,
        smoker=d.smoker,
        age0=d.age - pad / 4.0,
        risk=d.risk,
        length=np.full(n, pad + q),
        pdc=pdc,
        adherent=np.zeros((n, pad + q), dtype=bool),
        sbp=padded(d.sbp_obs, np.round(d.latent[:, 0])),
        ldl=padded(d.ldl_obs, np.round(d.latent[:, 1])),
        tc=padded(d.tc_obs, np.round(d.latent[:, 2])),
        n_bp=np.hstack([zeros, np.cumsum(d.n_bp, axis=1)]),
        n_chol=np.hstack([zeros, np.cumsum(d.n_chol, axis=1)]),
    )
    beta = cfg.beta()
    days = np.zeros((n, q), dtype=int)
    for k in range(1, q + 1):
        x = arrays.features_at(pad + k, layout)
        p = expit(d.u + x @ beta)
        nonadh = d.u_adh[:, k - 1] < p
        days[:, k - 1] = _pdc_days(d.u_pdc[:, k - 1], nonadh, cfg, profiles)
        arrays.pdc[:, pad + k - 1] = days[:, k - 1] / cfg.quarter_length_days

    thr = cfg.adherence_threshold
    L = cfg.quarter_length_days
    cum_bp = np.cumsum(d.n_bp, axis=1)
    cum_chol = np.cumsum(d.n_chol, axis=1)
    patients = []
    for i in range(n):
        group_sex = Sex.MALE if d.male[i] else Sex.FEMALE
        group_race = Race.WHITE if d.white[i] else Race.BLACK
        quarters = []
        for k in range(q):
            pdc_k = int(days[i, k]) / L
            sbp = d.sbp_obs[i, k]
            ldl = d.ldl_obs[i, k]
            tc = d.tc_obs[i, k]
            quarters.append(
                QuarterlyRecord(
                    k + 1,
                    pdc_k,
                    pdc_k >= thr,
                    None if np.isnan(sbp) else float(sbp),
                    None if np.isnan(ldl) else float(ldl),
                    None if np.isnan(tc) else float(tc),
                    int(cum_bp[i, k]),
                    int(cum_chol[i, k]),
                )
            )
        patients.append(
            Patient(
                id=f"P{i:06d}",
                demographics=DemographicProfile(group_sex, group_race, bool(d.smoker[i]), round(float(d.age[i]), 2)),
                baseline_cvd_risk=float(d.risk[i]),
                random_effect=float(d.u[i]),
                quarters=quarters,
                risk_growth=tuple(float(g) for g in d.growth[i]),
            )
        )
    return Cohort(patients, thr, L, origin_quarter=cfg.history_quarters + 1)
