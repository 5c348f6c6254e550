import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from enroll.datamodel import LABELS
from enroll.metrics import (accuracy, confusion_matrix, evaluate, micro_f1, micro_pr_auc, pr_auc,
                            pr_curve)


def sweep_pr_auc(labels, scores):
    """Exhaustive reference: one (recall, precision) point per distinct threshold."""
    labels = list(labels)
    scores = list(scores)
    n_pos = sum(labels)
    points = [(0.0, 1.0)]
    for t in sorted(set(scores), reverse=True):
        tp = sum(1 for y, s in zip(labels, scores) if s >= t and y)
        fp = sum(1 for y, s in zip(labels, scores) if s >= t and not y)
        points.append((tp / n_pos, tp / (tp + fp)))
    area = 0.0
    for (r0, p0), (r1, p1) in zip(points, points[1:]):
        area += (r1 - r0) * (p0 + p1) / 2
    return area


def random_score_set(rng):
    n = int(rng.integers(2, 12))
    labels = rng.integers(0, 2, size=n)
    labels[rng.integers(n)] = 1
    # coarse grid so tied scores are common
    scores = rng.integers(0, 6, size=n) / 5.0
    return labels, scores


def pr_auc_max_error(n_sets=20, seed=0):
    rng = np.random.default_rng(seed)
    return max(abs(pr_auc(*ls) - sweep_pr_auc(*ls)) for ls in (random_score_set(rng) for _ in range(n_sets)))


def test_pr_auc_matches_sweep_on_20_sets():
    assert pr_auc_max_error() <= 1e-9


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_pr_auc_matches_sweep(seed):
    labels, scores = random_score_set(np.random.default_rng(seed))
    assert abs(pr_auc(labels, scores) - sweep_pr_auc(labels, scores)) <= 1e-9


def test_pr_auc_matches_sklearn():
    metrics = pytest.importorskip("sklearn.metrics")
    rng = np.random.default_rng(1)
    for _ in range(20):
        labels, scores = random_score_set(rng)
        p, r, _ = metrics.precision_recall_curve(labels, scores)
        assert abs(pr_auc(labels, scores) - metrics.auc(r, p)) <= 1e-9


def test_pr_curve_four_points():
    recall, precision = pr_curve([1, 0, 1, 0], [0.9, 0.8, 0.7, 0.1])
    assert np.allclose(recall, [0, 0.5, 0.5, 1.0, 1.0])
    assert np.allclose(precision, [1, 1, 0.5, 2 / 3, 0.5])
    # 0.5 * 1 for the first step, then the trapezoid from recall 0.5 to 1
    assert pr_auc([1, 0, 1, 0], [0.9, 0.8, 0.7, 0.1]) == pytest.approx(0.5 + 0.5 * (0.5 + 2 / 3) / 2, abs=1e-12)


def test_perfect_and_degenerate_scores():
    assert pr_auc([1, 1, 0], [0.9, 0.8, 0.1]) == pytest.approx(1.0)
    assert pr_auc([0, 0], [0.3, 0.2]) == 0.0
    # one shared score collapses the sweep to a single point
    assert pr_auc([1, 0, 1, 0], [0.5] * 4) == pytest.approx(0.75)


def test_micro_pr_auc_pools_classes():
    probs = np.array([[0.7, 0.2, 0.1], [0.1, 0.8, 0.1], [0.3, 0.3, 0.4]])
    gold = [0, 1, 2]
    onehot = np.eye(3)[gold]
    assert micro_pr_auc(gold, probs) == pytest.approx(sweep_pr_auc(onehot.ravel().astype(int), probs.ravel()))


def test_small_example():
    r = evaluate(["entailment", "contradiction", "contradiction", "neutral"],
                 ["entailment", "entailment", "contradiction", "neutral"])
    assert r.micro_f1 == r.accuracy == 0.75
    assert r.confusion == [[1, 1, 0], [0, 1, 0], [0, 0, 1]]
    assert r.precision["contradiction"] == 0.5 and r.recall["entailment"] == 0.5


def test_identical_predictions():
    labels = ["entailment", "neutral", "contradiction"] * 3
    r = evaluate(labels, labels)
    assert r.micro_f1 == 1.0 and r.averaged_f1 == 1.0 and r.pr_auc == 1.0


def micro_f1_equals_accuracy(n_sets=100, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(n_sets):
        n = int(rng.integers(1, 60))
        g = rng.integers(0, 3, size=n)
        p = np.where(rng.random(n) < rng.random(), g, rng.integers(0, 3, size=n))
        if micro_f1(confusion_matrix(g, p)) != accuracy(list(g), list(p)):
            return False
    return True


def test_micro_f1_equals_accuracy_exactly():
    assert micro_f1_equals_accuracy()


def test_averaged_f1_is_mean_over_groups():
    gold = ["entailment", "neutral", "neutral", "contradiction"]
    pred = ["entailment", "entailment", "neutral", "neutral"]
    r = evaluate(pred, gold, groups=["a", "a", "b", "b"])
    assert r.averaged_f1 == pytest.approx((0.5 + 0.5) / 2)
    r = evaluate(pred, gold, groups=["a", "b", "b", "b"])
    assert r.averaged_f1 == pytest.approx((1.0 + 1 / 3) / 2)


def test_length_mismatch():
    with pytest.raises(ValueError):
        evaluate(["neutral"], ["neutral", "neutral"])
    assert set(evaluate(["neutral"], ["neutral"]).support) == set(LABELS)
