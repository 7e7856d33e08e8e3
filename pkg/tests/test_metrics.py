import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mlvpt.metrics import (
    average_precision,
    evaluate,
    false_positive_rate,
    mean_average_precision,
    threshold_metrics,
)


# --- brute-force oracles -----------------------------------------------------------


def oracle_threshold(scores, labels, thr):
    N, K = len(scores), len(scores[0])
    tp, fp, fn = [0] * K, [0] * K, [0] * K
    for n in range(N):
        for k in range(K):
            pred = scores[n][k] >= thr
            if pred and labels[n][k]:
                tp[k] += 1
            elif pred:
                fp[k] += 1
            elif labels[n][k]:
                fn[k] += 1
    TP, FP, FN = sum(tp), sum(fp), sum(fn)
    OP = TP / (TP + FP) if TP + FP else 0.0
    OR = TP / (TP + FN) if TP + FN else 0.0
    CP = math.fsum(tp[k] / (tp[k] + fp[k]) if tp[k] + fp[k] else 0.0 for k in range(K)) / K
    CR = math.fsum(tp[k] / (tp[k] + fn[k]) if tp[k] + fn[k] else 0.0 for k in range(K)) / K
    f1 = lambda p, r: 0.0 if p + r == 0 else 2 * p * r / (p + r)  # noqa: E731
    return {"OP": OP, "OR": OR, "OF1": f1(OP, OR), "CP": CP, "CR": CR, "CF1": f1(CP, CR)}


def oracle_ap(col_scores, col_labels):
    ranked = sorted(range(len(col_scores)), key=lambda i: (-col_scores[i], i))
    hits, precisions = 0, []
    for r, i in enumerate(ranked, start=1):
        if col_labels[i]:
            hits += 1
            precisions.append(hits / r)
    return math.fsum(precisions) / hits if hits else float("nan")


def oracle_map(scores, labels):
    K = len(scores[0])
    aps = [oracle_ap([row[k] for row in scores], [row[k] for row in labels]) for k in range(K)]
    valid = [a for a in aps if not math.isnan(a)]
    return math.fsum(valid) / len(valid), aps


def random_instance(seed, n=20, k=8, ties=False):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, size=(n, k))
    scores = rng.integers(0, 5, size=(n, k)) / 4 if ties else rng.random((n, k))
    return scores, labels


# --- tests -------------------------------------------------------------------------


def test_perfect_and_perfectly_wrong():
    y = np.random.default_rng(0).integers(0, 2, size=(10, 4))
    y[0] = 1
    y[1] = 0
    r = evaluate(y.astype(float), y)
    assert (r.CP, r.CR, r.CF1, r.OP, r.OR, r.OF1, r.mAP) == (1.0,) * 7
    w = threshold_metrics(1.0 - y, y)
    assert (w.CP, w.CR, w.CF1, w.OP, w.OR, w.OF1) == (0.0,) * 6


def test_hand_ap_cases():
    s, y = np.array([0.9, 0.8, 0.7, 0.6]), np.array([1, 0, 1, 0])
    assert average_precision(s, y) == 0.5 * (1 / 1 + 2 / 3)
    assert round(average_precision(s, y), 4) == 0.8333
    assert average_precision(s[::-1].copy(), y) == 0.5 * (1 / 2 + 2 / 4) == 0.5


@pytest.mark.parametrize("ties", [False, True])
def test_oracle_agreement_on_random_instances(ties):
    for seed in range(200):
        scores, labels = random_instance(seed, ties=ties)
        res = evaluate(scores, labels)
        ref = oracle_threshold(scores.tolist(), labels.tolist(), 0.5)
        for key, val in ref.items():
            assert getattr(res, key) == val, (seed, key)
        m, aps = oracle_map(scores.tolist(), labels.tolist())
        assert res.mAP == m
        np.testing.assert_array_equal(np.array(res.per_class_AP), np.array(aps))


def test_tie_breaking_by_index():
    s = np.array([0.5, 0.5, 0.5])
    assert average_precision(s, np.array([1, 0, 0])) == 1.0
    assert average_precision(s, np.array([0, 0, 1])) == pytest.approx(1 / 3)


def test_excluded_classes_and_undefined_map():
    scores, labels = random_instance(1, n=10, k=3)
    labels[:, 1] = 0
    res = evaluate(scores, labels)
    assert res.excluded_classes == [1]
    assert math.isnan(res.per_class_AP[1])
    assert res.to_dict()["per_class_AP"][1] is None
    with pytest.raises(ValueError, match="undefined"):
        mean_average_precision(scores, np.zeros_like(labels))


def test_f1_identities():
    for seed in range(50):
        r = evaluate(*random_instance(seed))
        assert abs(r.OF1 - (2 * r.OP * r.OR / (r.OP + r.OR) if r.OP + r.OR else 0)) < 1e-12
        assert abs(r.CF1 - (2 * r.CP * r.CR / (r.CP + r.CR) if r.CP + r.CR else 0)) < 1e-12
        assert all(0 <= v <= 1 for v in (r.CP, r.CR, r.CF1, r.OP, r.OR, r.OF1, r.mAP))


def test_zero_denominator_classes_count_as_zero():
    scores = np.array([[0.9, 0.1], [0.8, 0.2]])
    labels = np.array([[1, 0], [1, 0]])
    r = threshold_metrics(scores, labels)
    assert r.CP == 0.5 and r.CR == 0.5


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_map_rank_only(seed):
    scores, labels = random_instance(seed)
    base, _ = mean_average_precision(scores, labels)
    assert mean_average_precision(np.exp(3 * scores) - 7, labels)[0] == base


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_permutation_invariance_with_distinct_scores(seed):
    scores, labels = random_instance(seed)
    perm = np.random.default_rng(seed + 1).permutation(len(scores))
    a, b = evaluate(scores, labels), evaluate(scores[perm], labels[perm])
    assert a == b


def test_threshold_changes_f1_not_map():
    scores, labels = random_instance(4)
    a, b = evaluate(scores, labels, 0.3), evaluate(scores, labels, 0.5)
    assert a.mAP == b.mAP
    assert (a.CF1, a.OF1) != (b.CF1, b.OF1)


def test_input_validation():
    with pytest.raises(ValueError):
        threshold_metrics(np.zeros((3, 2)), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        threshold_metrics(np.zeros((3, 2)), np.zeros((3, 2)), threshold=1.0)


def test_false_positive_rate():
    scores = np.array([[0.9, 0.7], [0.9, 0.2], [0.1, 0.6], [0.9, 0.9]])
    labels = np.array([[1, 0], [1, 0], [0, 0], [1, 1]])
    assert false_positive_rate(scores, labels, 1) == 2 / 3
