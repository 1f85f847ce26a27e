"""
Metric tests
"""
import numpy as np
import pytest

from fedsilo.errors import EmptyEvaluationError
from fedsilo.metrics import (
    ConfusionMatrix,
    auc,
    confusion,
    evaluate_partition,
    evaluate_partitions,
    macro_average,
    metric_set,
    prf,
)
from fedsilo.nn import init_model, predict_proba


def _pairwise_auc(scores, labels):
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def test_confusion_basic():
    cm = confusion([0.9, 0.1], [1, 0], 0.5)

    assert (cm.tp, cm.fp, cm.tn, cm.fn) == (1, 0, 1, 0)


def test_confusion_threshold_inclusive():
    """A probability equal to the threshold counts as positive"""
    assert confusion([0.5], [1], 0.5).tp == 1


def test_confusion_all_below_threshold():
    cm = confusion([0.1, 0.2, 0.3], [1, 0, 1], 0.5)

    assert cm.tp == cm.fp == 0


def test_confusion_matches_row_loop():
    """Vectorized counts equal a per-row loop"""
    rng = np.random.default_rng(0)
    probs = rng.uniform(size=20)
    labels = rng.integers(0, 2, size=20)
    counts = {"tp": 0, "fp": 0, "tn": 0, "fn": 0}
    for p, y in zip(probs, labels):
        key = ("t" if (p >= 0.5) == bool(y) else "f") + ("p" if p >= 0.5 else "n")
        counts[key] += 1

    cm = confusion(probs, labels, 0.5)

    assert (cm.tp, cm.fp, cm.tn, cm.fn) == (counts["tp"], counts["fp"], counts["tn"], counts["fn"])


def test_confusion_empty():
    with pytest.raises(EmptyEvaluationError):
        confusion([], [], 0.5)


def test_prf_example():
    precision, recall, f1 = prf(ConfusionMatrix(tp=10, fp=5, tn=0, fn=3))

    assert precision == pytest.approx(0.6667, abs=1e-4)
    assert recall == pytest.approx(0.7692, abs=1e-4)
    assert f1 == pytest.approx(0.7143, abs=1e-4)


def test_prf_undefined_precision():
    """No predicted positives: precision and F1 are null, recall is 0"""
    assert prf(ConfusionMatrix(tp=0, fp=0, tn=4, fn=2)) == (None, 0.0, None)


def test_prf_perfect():
    assert prf(ConfusionMatrix(tp=3, fp=0, tn=5, fn=0)) == (1.0, 1.0, 1.0)


def test_prf_bounds():
    """Defined values lie in [0, 1] and F1 never exceeds the larger of p and r"""
    rng = np.random.default_rng(1)
    for _ in range(200):
        tp, fp, fn = (int(v) for v in rng.integers(0, 20, size=3))
        p, r, f = prf(ConfusionMatrix(tp=tp, fp=fp, tn=0, fn=fn))
        for value in (p, r, f):
            assert value is None or 0.0 <= value <= 1.0
        if f is not None:
            assert f <= max(p, r) + 1e-12


def test_auc_separated_and_tied():
    assert auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auc([0.4] * 6, [0, 1, 0, 1, 1, 0]) == 0.5


def test_auc_single_class_is_null():
    assert auc([0.1, 0.7], [1, 1]) is None


@pytest.mark.parametrize("trial", range(100))
def test_auc_matches_pairwise_oracle(trial):
    """Rank AUC equals the O(n^2) pair count, ties included"""
    rng = np.random.default_rng(trial)
    n = int(rng.integers(2, 201))
    scores = np.round(rng.uniform(size=n), 1)  # coarse rounding creates ties
    labels = rng.integers(0, 2, size=n)
    labels[0], labels[1] = 0, 1

    assert abs(auc(scores, labels) - _pairwise_auc(scores, labels)) <= 1e-12


def test_auc_invariant_to_monotone_transform():
    rng = np.random.default_rng(2)
    scores = rng.normal(size=50)
    labels = rng.integers(0, 2, size=50)

    assert auc(np.exp(scores), labels) == pytest.approx(auc(scores, labels), abs=1e-15)


def test_metric_set_degenerate_flag():
    """A partition with no positives yields null recall, F1 and AUC"""
    metrics = metric_set([0.2, 0.7, 0.4], [0, 0, 0])

    assert metrics.degenerate
    assert metrics.recall is None and metrics.f1 is None and metrics.auc is None
    assert metrics.precision == 0.0
    assert (metrics.support_pos, metrics.support_neg) == (0, 3)


def test_evaluate_partition_full_equals_global(small_split, small_model_config):
    config = small_model_config.resolve(small_split.test.input_dim)
    params = init_model(config)
    everything = np.arange(small_split.test.n_rows)
    probs = predict_proba(params, small_split.test.design_matrix)

    assert evaluate_partition(params, small_split.test, everything) == metric_set(probs, small_split.test.labels)


def test_evaluate_partition_empty(small_split, small_model_config):
    params = init_model(small_model_config.resolve(small_split.test.input_dim))

    with pytest.raises(EmptyEvaluationError):
        evaluate_partition(params, small_split.test, [])


def test_confusion_additive_over_silos(small_split, small_model_config):
    """Per-silo confusion matrices sum to the global one"""
    params = init_model(small_model_config.resolve(small_split.test.input_dim))
    probs = predict_proba(params, small_split.test.design_matrix)
    labels = small_split.test.labels

    total = ConfusionMatrix()
    for rows in small_split.per_silo_test.values():
        total = total + confusion(probs[rows], labels[rows])

    assert total == confusion(probs, labels)


def test_evaluate_partitions_matches_single_calls(small_split, small_model_config):
    params = init_model(small_model_config.resolve(small_split.test.input_dim))

    many = evaluate_partitions(params, small_split.test, small_split.per_silo_test)

    for silo, rows in small_split.per_silo_test.items():
        assert many[silo] == evaluate_partition(params, small_split.test, rows)


def test_macro_average_excludes_nulls():
    value, excluded = macro_average({1: 0.2, 2: 0.4, 3: None})

    assert value == pytest.approx(0.3)
    assert excluded == [3]


def test_macro_average_all_null():
    assert macro_average({1: None}) == (None, [1])
