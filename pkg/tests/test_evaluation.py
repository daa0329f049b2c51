import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adherence.evaluation import (
    METRICS_HEADER,
    auc,
    best_threshold_confusion,
    cross_validate,
    evaluate,
    kfold_indices,
    pooled_auc,
    vif_diagnostics,
    write_metrics_csv,
)


def auc_pairs(s, y):
    pos = [a for a, b in zip(s, y) if b]
    neg = [a for a, b in zip(s, y) if not b]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


def test_perfect_forecasts():
    y = np.array([0, 1, 1, 0, 1])
    m = evaluate(y[:, None].astype(float), y[:, None].astype(float))
    assert m.auc_by_year == [1.0]
    c = m.confusion_by_year[0]
    assert c.tp + c.tn == 1.0


def test_constant_forecast_is_uninformative():
    assert auc(np.full(6, 0.5), [0, 1, 0, 1, 1, 0]) == 0.5


def test_four_point_example_matches_pair_counting():
    s, y = [0.9, 0.4, 0.6, 0.2], [1, 0, 0, 1]
    assert auc(s, y) == pytest.approx(auc_pairs(s, y), abs=1e-15) == pytest.approx(0.5)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.booleans()), min_size=2, max_size=30))
def test_auc_matches_pair_counting(points):
    s = [p[0] / 5 for p in points]
    y = [p[1] for p in points]
    if all(y) or not any(y):
        assert auc(s, y) is None
    else:
        assert auc(s, y) == pytest.approx(auc_pairs(s, y), abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 6), st.booleans()), min_size=1, max_size=25))
def test_best_threshold_matches_scan(points):
    s = np.array([p[0] / 6 for p in points])
    y = np.array([p[1] for p in points])
    c = best_threshold_confusion(s, y)
    cutoffs = sorted(set(s.tolist()) | {np.nextafter(s.max(), np.inf)})
    best = max(np.mean((s >= k) == y) for k in cutoffs)
    assert c.accuracy == pytest.approx(best, abs=1e-12)
    assert c.tp + c.fp + c.tn + c.fn == pytest.approx(1.0)
    pred = s >= c.threshold
    assert c.tp == pytest.approx(np.mean(pred & y)) and c.fp == pytest.approx(np.mean(pred & ~y))


def test_evaluate_skips_missing_truth():
    P = np.array([[0.9, 0.2], [0.1, 0.3], [0.8, 0.7]])
    Y = np.array([[1, np.nan], [0, np.nan], [1, np.nan]])
    m = evaluate(P, Y)
    assert m.auc_by_year == [1.0, None] and m.confusion_by_year[1] is None and m.n_patients == [3, 0]


def test_orthogonal_design_vif_one():
    X = np.array([[1, 1], [1, -1], [-1, 1], [-1, -1]], dtype=float)
    np.testing.assert_allclose(vif_diagnostics(X), [1.0, 1.0], atol=1e-12)


def test_duplicated_column_infinite_vif():
    x = np.random.default_rng(0).normal(size=(50, 1))
    z = np.random.default_rng(1).normal(size=(50, 1))
    vif = vif_diagnostics(np.hstack([x, x, z]))
    assert np.isinf(vif[0]) and np.isinf(vif[1]) and np.isfinite(vif[2])


def test_correlated_pair_vif_closed_form():
    rng = np.random.default_rng(2)
    z = rng.normal(size=(200_000, 2))
    rho = 0.87
    X = np.column_stack([z[:, 0], rho * z[:, 0] + np.sqrt(1 - rho**2) * z[:, 1]])
    expected = 1 / (1 - rho**2)
    np.testing.assert_allclose(vif_diagnostics(X), [expected, expected], rtol=0.02)
    r = np.corrcoef(X.T)[0, 1]
    np.testing.assert_allclose(vif_diagnostics(X), 1 / (1 - r**2), rtol=1e-9)


def test_constant_column_vif_nan():
    X = np.column_stack([np.ones(10), np.arange(10.0), np.arange(10.0) ** 2])
    v = vif_diagnostics(X)
    assert np.isnan(v[0]) and np.all(np.isfinite(v[1:]))


def test_kfold_partition():
    parts = kfold_indices(10, 3, 0)
    assert sorted(np.concatenate(parts).tolist()) == list(range(10))
    assert [len(p) for p in parts] == [4, 3, 3]
    with pytest.raises(ValueError):
        kfold_indices(10, 1, 0)


def test_cross_validation_and_csv(tmp_path, small_cohort):
    metrics = cross_validate(small_cohort, small_cohort.origin_quarter, years=2, folds=2, seed=0)
    assert len(metrics) == 2 and all(len(m.auc_by_year) == 2 for m in metrics)
    assert sum(m.n_patients[0] for m in metrics) == len(small_cohort)
    path = tmp_path / "m.csv"
    write_metrics_csv(path, metrics)
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(METRICS_HEADER) and len(lines) == 5
    assert all(0.5 < a <= 1 for a in pooled_auc(metrics))
