import datetime as dt
import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adherence.cohort import (
    BiometricKind,
    BiometricRecord,
    ClaimRecord,
    Cohort,
    CohortError,
    FeatureLayout,
    build_feature_vector,
    cohort_from_records,
    compute_pdc,
    label_adherence_quarter,
    label_adherence_year,
    load_cohort,
    observed_risk_path,
    save_cohort,
    yearly_nonadherence,
)

D0 = dt.date(2020, 1, 1)


def claim(day, supply, pid="A"):
    return ClaimRecord(pid, D0 + dt.timedelta(days=day - 1), supply)


def coverage_oracle(claims, start, end):
    """Day-by-day count with stockpiled refills."""
    covered = set()
    cursor = None
    for c in claims:
        first = c.fill_date if cursor is None else max(c.fill_date, cursor)
        days = [first + dt.timedelta(days=k) for k in range(c.days_supply)]
        covered.update(days)
        cursor = days[-1] + dt.timedelta(days=1)
    total = (end - start).days
    return sum(1 for k in range(total) if start + dt.timedelta(days=k) in covered) / total


def test_pdc_full_coverage():
    assert compute_pdc([claim(1, 90)], D0, D0 + dt.timedelta(days=90)) == 1.0


def test_pdc_half_coverage():
    assert compute_pdc([claim(1, 45)], D0, D0 + dt.timedelta(days=90)) == 0.5


def test_pdc_overlapping_fill_is_pushed_forward_and_capped():
    claims = [claim(1, 60), claim(31, 60)]
    end = D0 + dt.timedelta(days=90)
    assert compute_pdc(claims, D0, end) == 1.0
    assert compute_pdc(claims, D0, end) == coverage_oracle(claims, D0, end)


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.tuples(st.integers(-60, 120), st.integers(1, 120)), min_size=1, max_size=6),
    st.integers(0, 60),
    st.integers(1, 120),
)
def test_pdc_matches_day_counting(fills, start_day, length):
    claims = sorted((claim(d, s) for d, s in fills), key=lambda c: c.fill_date)
    start = D0 + dt.timedelta(days=start_day)
    end = start + dt.timedelta(days=length)
    assert compute_pdc(claims, start, end) == pytest.approx(coverage_oracle(claims, start, end), abs=1e-12)


def test_pdc_rejects_unsorted_claims():
    with pytest.raises(CohortError):
        compute_pdc([claim(30, 10), claim(1, 10)], D0, D0 + dt.timedelta(days=90))


@pytest.mark.parametrize("pdc,thr,expected", [(0.80, 0.80, True), (0.79, 0.80, False), (1.0, 0.6, True)])
def test_quarter_label(pdc, thr, expected):
    assert label_adherence_quarter(pdc, thr) is expected


def test_quarter_label_rejects_bad_threshold():
    with pytest.raises(CohortError):
        label_adherence_quarter(0.5, 0.0)


@pytest.mark.parametrize(
    "flags,expected",
    [((True, False, True, True), True), ((False, False, True, True), False), ((True,) * 4, True)],
)
def test_year_label(flags, expected):
    assert label_adherence_year(flags) is expected


def test_year_label_vectorised_agrees_with_scalar():
    for flags in itertools.product([True, False], repeat=4):
        assert yearly_nonadherence(np.array(flags))[0] == (not label_adherence_year(flags))


def test_feature_vector_lengths(small_cohort):
    p = small_cohort.patients[0]
    assert build_feature_vector(p, 12).values.size == 18
    assert build_feature_vector(p, 12, pdc_lags=6).values.size == 16


def test_feature_vector_matches_array_path(small_cohort):
    layout = FeatureLayout()
    X = small_cohort.arrays.features_at(15, layout)
    for i in (0, 7, 42):
        np.testing.assert_allclose(build_feature_vector(small_cohort.patients[i], 15).values, X[i], rtol=1e-12)


def test_feature_vector_without_ldl_is_rejected(small_cohort):
    p = small_cohort.patients[0]
    from dataclasses import replace

    stripped = replace(p, quarters=[replace(q, ldl=None) for q in p.quarters])
    with pytest.raises(CohortError, match="ldl"):
        build_feature_vector(stripped, 12)


def test_feature_vector_needs_history(small_cohort):
    with pytest.raises(CohortError):
        build_feature_vector(small_cohort.patients[0], 8)


def test_save_load_round_trip(tmp_path, small_cohort):
    path = tmp_path / "c.json"
    save_cohort(small_cohort, path)
    assert load_cohort(path) == small_cohort


def test_load_rejects_schema_mismatch(tmp_path, small_cohort):
    path = tmp_path / "c.json"
    save_cohort(small_cohort, path)
    doc = json.loads(path.read_text())
    doc["extra"] = 1
    path.write_text(json.dumps(doc))
    with pytest.raises(CohortError, match="schema"):
        load_cohort(path)


def test_claims_with_negative_supply_names_row(tmp_path):
    path = tmp_path / "claims.csv"
    path.write_text("patient_id,fill_date,days_supply\nA,2020-01-01,30\nA,2020-02-01,-5\n")
    with pytest.raises(CohortError, match="row 3"):
        load_cohort(path)


def test_claims_header_only_gives_empty_cohort(tmp_path):
    path = tmp_path / "claims.csv"
    path.write_text("patient_id,fill_date,days_supply\n")
    assert len(load_cohort(path)) == 0


def test_ingestion_builds_quarters():
    claims = [claim(1 + 91 * k, 91) for k in range(6)]
    bios = [
        BiometricRecord("A", D0, BiometricKind.SBP, 130.0),
        BiometricRecord("A", D0, BiometricKind.LDL, 110.0),
        BiometricRecord("A", D0, BiometricKind.TOTAL_CHOLESTEROL, 190.0),
    ]
    from adherence.cohort import DemographicProfile, Race, Sex

    dem = {"A": (DemographicProfile(Sex.MALE, Race.WHITE, False, 60.0), 0.2)}
    cohort = cohort_from_records(claims, bios, dem, study_end=D0 + dt.timedelta(days=91 * 6))
    p = cohort.patients[0]
    assert len(p.quarters) == 6
    assert all(q.pdc == 1.0 and q.adherent for q in p.quarters)
    assert p.quarters[0].n_bp_tests_cum == 1 and p.quarters[-1].n_chol_tests_cum == 1


def test_biometric_bounds_enforced():
    with pytest.raises(CohortError):
        BiometricRecord("A", D0, BiometricKind.SBP, 300.0)


def test_duplicate_ids_rejected(small_cohort):
    p = small_cohort.patients[0]
    with pytest.raises(CohortError):
        Cohort([p, p], small_cohort.adherence_threshold).validate()


def test_observed_risk_path_compounds(small_cohort):
    p = small_cohort.patients[0]
    path = observed_risk_path(p, [True, False, True, True, False], 0.1)
    expected = [p.baseline_cvd_risk]
    for g, adh in zip(p.risk_growth, [True, False, True, True, False]):
        expected.append(min(1.0, expected[-1] * g * (0.9 if adh else 1.0)))
    np.testing.assert_allclose(path, expected, rtol=1e-15)


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.tuples(st.integers(-60, 120), st.integers(1, 120)), min_size=1, max_size=5),
    st.tuples(st.integers(-60, 120), st.integers(1, 120)),
    st.integers(0, 60),
)
def test_adding_a_claim_never_lowers_pdc(fills, extra, start_day):
    start = D0 + dt.timedelta(days=start_day)
    end = start + dt.timedelta(days=91)
    before = sorted((claim(d, s) for d, s in fills), key=lambda c: c.fill_date)
    after = sorted(before + [claim(*extra)], key=lambda c: c.fill_date)
    assert compute_pdc(after, start, end) >= compute_pdc(before, start, end)
