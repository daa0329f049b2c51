import json

import numpy as np
import pytest

from adherence.cohort import CohortError, Race, Sex
from adherence.synthetic import (
    AGE_RANGE,
    CLASS_PROFILES,
    TRUE_COEFFICIENTS,
    GeneratorConfig,
    generate_synthetic_cohort,
)


def lag1_autocorrelation(pdc: np.ndarray) -> float:
    return float(np.corrcoef(pdc[:, :-1].ravel(), pdc[:, 1:].ravel())[0, 1])


def test_same_seed_gives_identical_cohorts():
    assert generate_synthetic_cohort(1000, 7) == generate_synthetic_cohort(1000, 7)


def test_different_seeds_differ():
    assert generate_synthetic_cohort(50, 1) != generate_synthetic_cohort(50, 2)


def test_prefix_of_larger_cohort_is_stable():
    small = generate_synthetic_cohort(20, 3)
    large = generate_synthetic_cohort(40, 3)
    assert small.patients == large.patients[:20]


def test_white_male_fraction(cohort_10k):
    wm = np.mean([p.demographics.sex == Sex.MALE and p.demographics.race == Race.WHITE for p in cohort_10k.patients])
    assert abs(wm - 0.70) <= 0.02


def test_lag1_pdc_autocorrelation_band(cohort_10k):
    rho = lag1_autocorrelation(cohort_10k.arrays.pdc)
    assert 0.45 <= rho <= 0.85


def test_ages_within_inclusion_range(small_cohort):
    ages = [p.demographics.age_years for p in small_cohort.patients]
    assert min(ages) >= AGE_RANGE[0] and max(ages) <= AGE_RANGE[1]


def test_labels_follow_threshold(small_cohort):
    a = small_cohort.arrays
    ok = ~np.isnan(a.pdc)
    assert np.array_equal(a.adherent[ok], a.pdc[ok] >= small_cohort.adherence_threshold)


def test_test_counts_nondecreasing(small_cohort):
    a = small_cohort.arrays
    assert np.all(np.diff(a.n_bp, axis=1) >= 0) and np.all(np.diff(a.n_chol, axis=1) >= 0)


def test_mean_risk_near_calibration(cohort_10k):
    assert abs(cohort_10k.arrays.risk.mean() - 0.17) < 0.005


def test_nonadherent_fraction_tracks_class_sizes(cohort_10k):
    p_non = CLASS_PROFILES["non_adherent"]["n"] / (CLASS_PROFILES["non_adherent"]["n"] + CLASS_PROFILES["adherent"]["n"])
    a = cohort_10k.arrays
    # Mean PDC of a class mixture lands between the two class means.
    mean_pdc = np.nanmean(a.pdc[:, cohort_10k.origin_quarter - 1 :])
    mix = p_non * CLASS_PROFILES["non_adherent"]["pdc"][0] + (1 - p_non) * CLASS_PROFILES["adherent"]["pdc"][0]
    assert abs(mean_pdc - mix) < 0.05


def test_cohort_covers_history_and_horizon(small_cohort):
    cfg = GeneratorConfig()
    assert small_cohort.origin_quarter == cfg.history_quarters + 1
    assert all(len(p.quarters) == cfg.n_quarters for p in small_cohort.patients)
    assert all(len(p.risk_growth) == cfg.horizon_years for p in small_cohort.patients)


def test_config_rejects_unknown_keys(tmp_path):
    path = tmp_path / "g.json"
    path.write_text(json.dumps({"n": 10, "bogus": 1}))
    with pytest.raises(CohortError, match="bogus"):
        GeneratorConfig.from_json(path)


def test_config_rejects_coefficient_mismatch():
    coefs = dict(TRUE_COEFFICIENTS)
    coefs.pop("race")
    with pytest.raises(CohortError, match="race"):
        GeneratorConfig(true_coefficients=coefs)


def test_config_round_trip():
    cfg = GeneratorConfig(n=5, seed=9, pdc_persistence=0.5)
    assert GeneratorConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
