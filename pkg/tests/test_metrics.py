import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jlu import metrics
from jlu.losses import DataError
from jlu.metrics import DegenerateInputError, MetricsRecord, TaskProbe


def test_mean_class_accuracy():
    y = np.array([0, 0, 1, 1])
    assert metrics.mean_class_accuracy(y, y, 2) == 1.0
    assert metrics.mean_class_accuracy(np.zeros(4, int), y, 2) == 0.5
    # class 0: 2/2 right, class 1: 3/6 right, regardless of sizes
    labels = np.array([0, 0, 1, 1, 1, 1, 1, 1])
    preds = np.array([0, 0, 1, 1, 1, 0, 0, 0])
    assert metrics.mean_class_accuracy(preds, labels, 2) == 0.75
    with pytest.raises(DataError):
        metrics.mean_class_accuracy([0, 0], [0, 0], 2)


def test_adjacent_accuracy():
    y = np.array([0, 1, 2, 2])
    assert metrics.adjacent_accuracy(y, y) == 1.0
    assert metrics.adjacent_accuracy(y + 1, y) == 1.0
    assert metrics.adjacent_accuracy(y + 2, y) == 0.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4)), min_size=1, max_size=40))
def test_adjacent_at_least_exact(pairs):
    preds, labels = np.array(pairs).T
    assert metrics.adjacent_accuracy(preds, labels) >= np.mean(preds == labels)


def test_rescaled_score():
    for k in (2, 3, 5):
        assert metrics.rescaled_score(0.0, k) == 1.0
        assert metrics.rescaled_score(1 - 1 / k, k) == 0.0
    assert metrics.rescaled_score(0.25, 2) == 0.5
    assert metrics.rescaled_score(0.9, 2) < 0


@pytest.mark.parametrize("k", [2, 3, 5])
def test_random_predictor_rescales_to_zero(k):
    rng = np.random.default_rng(k)
    labels = rng.integers(0, k, 10_000)
    preds = rng.integers(0, k, 10_000)
    e = 1 - metrics.mean_class_accuracy(preds, labels, k)
    assert abs(metrics.rescaled_score(e, k)) < 0.02


def test_percent_unlearned():
    assert metrics.percent_unlearned(0.5, 0.0) == 100.0
    assert metrics.percent_unlearned(0.5, 0.5) == 0.0
    assert metrics.percent_unlearned(0.5, 0.06) == pytest.approx(88.0, abs=1e-12)
    assert metrics.percent_unlearned(0.5, -0.2) == 100.0
    assert metrics.percent_unlearned(0.0, 0.1) is None
    assert metrics.percent_unlearned(-0.1, 0.1) is None


def test_percent_unlearned_ignores_class_order():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 3, 300)
    base = np.where(rng.random(300) < 0.8, labels, rng.integers(0, 3, 300))
    blind = np.where(rng.random(300) < 0.2, labels, rng.integers(0, 3, 300))
    perm = np.array([2, 0, 1])

    def score(preds, y):
        return metrics.rescaled_score(1 - metrics.mean_class_accuracy(preds, y, 3), 3)

    a = metrics.percent_unlearned(score(base, labels), score(blind, labels))
    b = metrics.percent_unlearned(score(perm[base], perm[labels]), score(perm[blind], perm[labels]))
    assert a == pytest.approx(b, abs=1e-12)


def test_prediction_distribution():
    np.testing.assert_array_equal(metrics.prediction_distribution([0, 0, 0], [1, 1, 1], 3), [1, 0, 0])
    d = metrics.prediction_distribution(np.tile(np.arange(4), 5), np.ones(20, bool), 4)
    np.testing.assert_array_equal(d, [0.25] * 4)
    with pytest.raises(DataError):
        metrics.prediction_distribution([0, 1], [False, False], 2)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 6), min_size=1, max_size=50))
def test_prediction_distribution_sums_to_one(preds):
    d = metrics.prediction_distribution(preds, np.ones(len(preds), bool), 7)
    assert abs(d.sum() - 1.0) < 1e-12


def test_kl_divergence():
    p, q = [0.5, 0.5], [0.25, 0.75]
    oracle = 0.5 * math.log(2) + 0.5 * math.log(2 / 3)
    assert oracle == pytest.approx(0.1438, abs=1e-4)
    assert metrics.kl_divergence(p, q) == pytest.approx(oracle, abs=1e-5)
    reverse = 0.25 * math.log(0.5) + 0.75 * math.log(1.5)
    assert metrics.kl_divergence(q, p) == pytest.approx(reverse, abs=1e-5)
    assert metrics.kl_divergence(p, q) != pytest.approx(metrics.kl_divergence(q, p), abs=1e-3)
    assert metrics.kl_divergence([0.2, 0.3, 0.5], [0.2, 0.3, 0.5]) == 0.0
    assert math.isfinite(metrics.kl_divergence([0.5, 0.5], [1.0, 0.0]))
    with pytest.raises(DataError):
        metrics.kl_divergence([1.0], [0.5, 0.5])


def test_group_kl_orders_groups_by_label():
    preds = np.array([0, 0, 1, 1, 1, 1])
    groups = np.array([0, 0, 0, 1, 1, 1])
    kl = metrics.group_kl(preds, groups, 2, 2)
    assert list(kl) == [(0, 1)]
    p0, p1 = [2 / 3, 1 / 3], [0.0, 1.0]
    assert kl[(0, 1)] == metrics.kl_divergence(p0, p1)


def test_projection_of_2d_data_is_a_rotation():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((30, 2)) @ np.array([[3.0, 0.0], [1.0, 0.5]])
    x -= x.mean(axis=0)
    pcs = metrics.project_embeddings(x)
    d_in = np.linalg.norm(x[:, None] - x[None], axis=2)
    d_out = np.linalg.norm(pcs[:, None] - pcs[None], axis=2)
    np.testing.assert_allclose(d_out, d_in, atol=1e-9)


def test_projection_separates_clusters():
    rng = np.random.default_rng(2)
    labels = np.repeat([0, 1], 100)
    x = rng.standard_normal((200, 8))
    x[:, 3] += np.where(labels == 1, 10.0, 0.0)
    pc1 = metrics.project_embeddings(x)[:, 0]
    assert metrics.best_threshold_accuracy(pc1, labels) > 0.95


def test_projection_duplicates_and_degenerate_inputs():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((10, 4))
    x[5] = x[2]
    pcs = metrics.project_embeddings(x)
    np.testing.assert_array_equal(pcs[5], pcs[2])
    line = np.outer(np.arange(6.0), [1.0, 2.0, 3.0])
    with pytest.raises(DegenerateInputError, match="rank 1"):
        metrics.project_embeddings(line)
    with pytest.raises(DegenerateInputError):
        metrics.project_embeddings(np.zeros((1, 3)))


def test_projection_sign_convention():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((50, 3)) * [5.0, 2.0, 0.1]
    a = metrics.project_embeddings(x)
    b = metrics.project_embeddings(-x)
    # negating the data leaves the sign-fixed components unchanged, so the scores flip
    np.testing.assert_allclose(a, -b, atol=1e-9)


def test_best_threshold_accuracy():
    assert metrics.best_threshold_accuracy([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert metrics.best_threshold_accuracy([0.1, 0.2, 0.8, 0.9], [1, 1, 0, 0]) == 1.0
    assert metrics.best_threshold_accuracy([1.0, 1.0, 1.0, 1.0], [0, 1, 0, 1]) == 0.5
    with pytest.raises(DataError):
        metrics.best_threshold_accuracy([1.0, 2.0], [1, 1])


def test_export_embeddings(tmp_path):
    rng = np.random.default_rng(5)
    e = rng.standard_normal((7, 3))
    path = tmp_path / "emb.csv"
    metrics.export_embeddings(path, e, np.arange(7) % 4, {"gender": np.arange(7) % 2})
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["pc1", "pc2", "e0", "e1", "e2", "y_primary", "y_gender"]
    back = np.array([[float(v) for v in r[2:5]] for r in rows[1:]])
    np.testing.assert_array_equal(back, e)
    assert [int(r[5]) for r in rows[1:]] == list(np.arange(7) % 4)


def test_record_helpers():
    rec = MetricsRecord(1, 0.5, 0.9, 1.2, 0.7, {"g": TaskProbe(0.6, 0.2)}, {"g0_g1": 0.01})
    assert rec.values() == [0.5, 0.9, 1.2, 0.7, 0.6, 0.2, 0.01]
    assert metrics.is_finite_record(rec)
    rec.loss_primary = float("nan")
    assert not metrics.is_finite_record(rec)
    assert metrics.chance_level(4) == 0.25
