import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from ideal import metrics as M


def auc_pair_count(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def dcg_direct(rels):
    return sum((2 ** r - 1) / math.log2(i + 2) for i, r in enumerate(rels))


# ROC AUC -----------------------------------------------------------------------------

def test_auc_separated_scores():
    assert M.roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0


def test_auc_four_point_case():
    assert M.roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75


@pytest.mark.parametrize("labels", [p for p in itertools.product([0, 1], repeat=4)
                                    if 0 < sum(p) < 4])
def test_auc_matches_pair_counting_on_all_four_point_patterns(labels):
    for scores in ([0.1, 0.4, 0.35, 0.8], [0.5, 0.5, 0.2, 0.9], [1, 1, 1, 1]):
        assert M.roc_auc(scores, list(labels)) == auc_pair_count(scores, labels)


def test_auc_random_scores_near_half():
    rng = np.random.default_rng(0)
    s, y = rng.random(4000), rng.integers(0, 2, 4000)
    assert abs(M.roc_auc(s, y) - 0.5) < 0.05


def test_auc_single_class_raises():
    with pytest.raises(M.UndefinedMetricError):
        M.roc_auc([0.1, 0.2], [1, 1])


@given(st.lists(st.integers(0, 6), min_size=6, max_size=20), st.integers(0, 10_000))
def test_auc_invariant_under_increasing_transform(raw, seed):
    y = np.random.default_rng(seed).integers(0, 2, len(raw))
    y[0], y[1] = 0, 1
    s = np.array(raw, dtype=float)
    base = M.roc_auc(s, y)
    assert M.roc_auc(np.exp(s) * 3 + 1, y) == pytest.approx(base, abs=1e-12)
    assert base == pytest.approx(auc_pair_count(s, y), abs=1e-12)


# nDCG ---------------------------------------------------------------------------------

def test_relevance_scale_and_floor():
    assert [M.relevance(k) for k in range(12)] == \
        [5.5, 5.0, 4.5, 4.0, 3.5, 3.0, 2.5, 2.0, 1.5, 1.0, 1.0, 1.0]


def test_ndcg_identity_and_first_match():
    ref = list("abcdefghijkl")
    assert M.ndcg(ref, ref, 10) == 1.0
    assert M.ndcg(["a", *reversed(ref[1:])], ref, 1) == 1.0


def test_ndcg_reversed_three_matches_direct_sums():
    got = M.ndcg(["c", "b", "a"], ["a", "b", "c"], 3)
    direct = dcg_direct([4.5, 5.0, 5.5]) / dcg_direct([5.5, 5.0, 4.5])
    assert got == pytest.approx(direct, abs=1e-12)
    assert got == pytest.approx(0.84836, abs=1e-4)


def test_ranking_comparison_fields():
    rc = M.compare_rankings(["b", "a"], ["a", "b"], p=2)
    assert rc.dcg == pytest.approx(dcg_direct([5.0, 5.5]))
    assert rc.idcg == pytest.approx(dcg_direct([5.5, 5.0]))
    assert rc.rel == {"a": 5.5, "b": 5.0}


def test_ndcg_id_mismatch_and_bad_depth():
    with pytest.raises(ValueError):
        M.ndcg(["a", "b"], ["a", "c"], 2)
    with pytest.raises(ValueError):
        M.ndcg(["a", "b"], ["a", "b"], 3)


@given(st.permutations(list(range(15))), st.integers(1, 15))
def test_ndcg_bounds_and_relabel_invariance(perm, p):
    ref = list(range(15))
    v = M.ndcg(perm, ref, p)
    assert 0.0 < v <= 1.0 + 1e-12
    names = {i: f"id{(i * 7) % 15}" for i in ref}
    assert M.ndcg([names[i] for i in perm], [names[i] for i in ref], p) == pytest.approx(v)
    assert v == pytest.approx(dcg_direct([M.relevance(ref.index(i)) for i in perm[:p]]) /
                              dcg_direct([M.relevance(k) for k in range(p)]))


def test_write_ndcg_long(tmp_path):
    M.write_ndcg_long(tmp_path / "n.csv", [("kurtosis", 0.1, 0.9)])
    assert (tmp_path / "n.csv").read_text() == "method,increment,ndcg\nkurtosis,0.10,0.900000\n"


# overlap ----------------------------------------------------------------------------------

def test_overlap_examples():
    assert M.overlap_fraction([{1, 2}, {1, 2}]) == 1.0
    assert M.overlap_fraction([{1, 2}, {3, 4}]) == 0.0
    assert M.overlap_fraction([{1, 2, 3}, {2, 3, 4}, {3, 4, 5}]) == pytest.approx(1 / 3)


def test_overlap_needs_two_sets():
    with pytest.raises(ValueError):
        M.overlap_fraction([{1}])


# paired t-test -------------------------------------------------------------------------------

def test_t_test_closed_form_dof_one():
    t = 2.0
    want = 2 * (1 - (0.5 + math.atan(t) / math.pi))
    assert M.paired_t_test([1.0, 3.0], [0.0, 0.0]) == pytest.approx(want, abs=1e-12)
    assert want == pytest.approx(0.2952, abs=5e-4)


def test_t_test_zero_variance_guard():
    with pytest.raises(M.UndefinedMetricError):
        M.paired_t_test([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])


@given(st.lists(st.floats(-10, 10), min_size=3, max_size=12), st.integers(0, 10_000))
def test_t_test_symmetric(a, seed):
    b = np.random.default_rng(seed).normal(size=len(a))
    assert M.paired_t_test(a, b) == pytest.approx(M.paired_t_test(b, a), rel=1e-12)


def test_t_test_null_p_values_uniform():
    rng = np.random.default_rng(0)
    ps = [M.paired_t_test(rng.normal(size=30), rng.normal(size=30)) for _ in range(200)]
    assert stats.kstest(ps, "uniform").pvalue > 0.01


# Dice --------------------------------------------------------------------------------------------

def test_dice_closed_form_cases():
    a = np.zeros((20, 20), bool)
    a[:5, :20] = True
    b = np.zeros((20, 20), bool)
    b[:5, 10:20] = True
    b[10:15, :10] = True
    assert M.dice(a, a) == 1.0
    assert M.dice(a, ~a) == 0.0
    assert M.dice(a, b) == 0.5


def test_dice_binarises_probabilities_and_checks_shape():
    assert M.dice(np.array([0.7, 0.2]), np.array([1, 0])) == 1.0
    with pytest.raises(ValueError):
        M.dice(np.zeros(3), np.zeros(4))


@given(st.integers(0, 10_000))
def test_dice_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((8, 8)) > 0.5, rng.random((8, 8)) > 0.6
    assert M.dice(a, b) == M.dice(b, a)
    assert M.dice(a, a) == 1.0
