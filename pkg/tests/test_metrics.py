import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from clustercond.dataset import FeatureSet
from clustercond.errors import DataError, NumericalError
from clustercond.kmeans import ClusterAssignment
from clustercond.metrics import (
    ContingencyTable, GaussianStats, anmi, auroc, cluster_accuracy, expected_mutual_info,
    frechet_distance, gaussian_stats, hungarian_map, metric_report, mutual_info, nn_auroc,
    pseudo_label, sqrtm_psd,
)

from oracles import (
    ami_oracle, auroc_pairs, best_matching_by_enumeration, expected_mi_by_permutation,
    expected_mi_hypergeometric, frechet_1d, mutual_info_counts,
)


def random_spd(rng, d):
    a = rng.standard_normal((d, d))
    return a @ a.T + 0.1 * np.eye(d)


# -- Gaussian statistics -----------------------------------------------------------


def test_gaussian_stats_examples():
    s = gaussian_stats([[0.0, 0.0], [2.0, 0.0]])
    np.testing.assert_array_equal(s.mean, [1.0, 0.0])
    np.testing.assert_array_equal(s.cov, [[2.0, 0.0], [0.0, 0.0]])
    np.testing.assert_array_equal(gaussian_stats(np.ones((5, 3))).cov, 0.0)
    big = gaussian_stats(np.random.default_rng(0).standard_normal((100_000, 2)))
    assert np.abs(big.mean).max() < 0.02 and np.abs(big.cov - np.eye(2)).max() < 0.05
    with pytest.raises(DataError):
        gaussian_stats([[1.0, 2.0]])


def test_gaussian_stats_validation():
    with pytest.raises(DataError):
        GaussianStats([0, 0], [[1, 0.5], [0, 1]], 3)
    with pytest.raises(DataError):
        GaussianStats([0, np.nan], np.eye(2), 3)
    with pytest.raises(DataError):
        GaussianStats([0], [[-1.0]], 3)


# -- Fréchet distance -------------------------------------------------------------------


def test_frechet_examples():
    a = GaussianStats([1.0, 2.0], [[2.0, 0.3], [0.3, 1.0]], 10)
    assert frechet_distance(a, a) < 1e-8
    cov = random_spd(np.random.default_rng(0), 2)
    assert frechet_distance(GaussianStats([3, 4], cov, 5), GaussianStats([0, 0], cov, 5)) == \
        pytest.approx(25.0, abs=1e-6)
    d = frechet_distance(GaussianStats([0, 0], np.diag([1.0, 4.0]), 5),
                         GaussianStats([0, 0], np.diag([4.0, 1.0]), 5))
    assert d == pytest.approx(2.0, abs=1e-6)


@given(st.floats(-10, 10), st.floats(0.01, 10), st.floats(-10, 10), st.floats(0.01, 10))
def test_frechet_1d_closed_form(ma, sa, mb, sb):
    d = frechet_distance(GaussianStats([ma], [[sa * sa]], 2), GaussianStats([mb], [[sb * sb]], 2))
    assert d == pytest.approx(frechet_1d(ma, sa, mb, sb), abs=1e-8, rel=1e-10)


@given(st.integers(0, 2**32 - 1), st.integers(1, 6))
def test_frechet_symmetric_nonnegative(seed, d):
    rng = np.random.default_rng(seed)
    a = GaussianStats(rng.standard_normal(d), random_spd(rng, d), 5)
    b = GaussianStats(rng.standard_normal(d), random_spd(rng, d), 5)
    ab, ba = frechet_distance(a, b), frechet_distance(b, a)
    assert ab >= 0 and abs(ab - ba) < 1e-8 * max(1.0, ab)
    assert frechet_distance(a, a) < 1e-8 * max(1.0, np.trace(a.cov))


def test_frechet_rank_deficient_and_invalid():
    a = gaussian_stats(np.ones((4, 2)))
    b = GaussianStats([0.0, 0.0], np.eye(2), 4)
    assert frechet_distance(a, b) == pytest.approx(2.0 + 2.0, abs=1e-9)
    bad = GaussianStats([0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]], 3)
    with pytest.raises(NumericalError):
        frechet_distance(bad, b)
    with pytest.raises(DataError):
        frechet_distance(b, GaussianStats([0.0], [[1.0]], 3))


def test_sqrtm_psd_squares_back():
    c = random_spd(np.random.default_rng(3), 4)
    r = sqrtm_psd(c)
    np.testing.assert_allclose(r @ r, c, atol=1e-10)


# -- mutual information ----------------------------------------------------------------


def test_anmi_hand_example_matches_oracle():
    u, v = [0, 0, 0, 1, 1, 1], [0, 1, 0, 1, 0, 1]
    assert anmi(u, v) == pytest.approx(ami_oracle(u, v), abs=1e-12)
    t = ContingencyTable.from_labels(u, v)
    assert expected_mutual_info(t) == pytest.approx(expected_mi_by_permutation(u, v), abs=1e-12)


@given(st.integers(0, 2**32 - 1))
def test_anmi_matches_brute_force_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 31))
    u = rng.integers(int(rng.integers(1, 6)), size=n).tolist()
    v = rng.integers(int(rng.integers(1, 6)), size=n).tolist()
    t = ContingencyTable.from_labels(u, v)
    assert mutual_info(t) == pytest.approx(mutual_info_counts(u, v), abs=1e-12)
    emi = expected_mi_hypergeometric([u.count(a) for a in set(u)], [v.count(b) for b in set(v)], n)
    assert expected_mutual_info(t) == pytest.approx(emi, abs=1e-12)
    single = len(set(u)) == len(set(v)) == 1
    all_singletons = len(set(u)) == len(set(v)) == n
    if not (single or all_singletons) and abs(0.5 * (
            _h(u) + _h(v)) - emi) > 1e-6:
        assert anmi(u, v) == pytest.approx(ami_oracle(u, v), abs=1e-9)


def _h(u):
    n = len(u)
    return -sum(u.count(a) / n * math.log(u.count(a) / n) for a in set(u))


def test_exact_expectation_equals_permutation_average():
    rng = np.random.default_rng(1)
    for _ in range(5):
        u = rng.integers(3, size=7).tolist()
        v = rng.integers(2, size=7).tolist()
        t = ContingencyTable.from_labels(u, v)
        assert expected_mutual_info(t) == pytest.approx(expected_mi_by_permutation(u, v), abs=1e-12)


def test_anmi_perfect_and_trivial_partitions():
    labels = np.repeat([0, 1, 2], 4)
    assert anmi(labels, labels) == pytest.approx(1.0, abs=1e-9)
    assert anmi((labels + 1) % 3, labels) == pytest.approx(1.0, abs=1e-9)
    assert anmi(np.zeros(5, int), np.zeros(5, int)) == 1.0
    a = ClusterAssignment.from_assignments(labels, 5, "kmeans")
    assert anmi(a, labels) == pytest.approx(1.0, abs=1e-9)


def test_anmi_is_zero_on_average_for_random_partitions():
    rng = np.random.default_rng(0)
    vals = [anmi(rng.integers(5, size=200), rng.integers(4, size=200)) for _ in range(50)]
    assert abs(np.mean(vals)) < 0.05


@given(st.integers(0, 2**32 - 1))
def test_anmi_invariant_under_relabeling(seed):
    rng = np.random.default_rng(seed)
    u, v = rng.integers(4, size=25), rng.integers(3, size=25)
    pu, pv = rng.permutation(4), rng.permutation(3)
    assert anmi(pu[u], pv[v]) == pytest.approx(anmi(u, v), abs=1e-12)


def test_length_mismatch():
    with pytest.raises(DataError):
        anmi([0, 1], [0])


# -- Hungarian mapping ------------------------------------------------------------------


def test_hungarian_examples():
    mapping, acc = hungarian_map(ContingencyTable(np.diag([5, 5, 5])))
    assert mapping.tolist() == [0, 1, 2] and acc == 1.0
    mapping, acc = hungarian_map(ContingencyTable([[0, 10], [10, 0]]))
    assert mapping.tolist() == [1, 0] and acc == 1.0


def test_hungarian_rectangular():
    mapping, acc = hungarian_map(ContingencyTable([[3, 0], [0, 4], [2, 0]]))
    assert mapping.tolist() == [0, 1, -1] and acc == pytest.approx(7 / 9)
    mapping, acc = hungarian_map(ContingencyTable([[1, 6, 0]]))
    assert mapping.tolist() == [1] and acc == pytest.approx(6 / 7)


def test_hungarian_matches_enumeration():
    rng = np.random.default_rng(0)
    for _ in range(100):
        C, K = int(rng.integers(1, 7)), int(rng.integers(1, 7))
        t = rng.integers(0, 20, size=(C, K))
        t[0, 0] += 1
        _, acc = hungarian_map(ContingencyTable(t))
        assert acc * t.sum() == pytest.approx(best_matching_by_enumeration(t), abs=1e-9)


@given(st.integers(0, 2**32 - 1))
def test_hungarian_invariant_under_permutation(seed):
    rng = np.random.default_rng(seed)
    t = rng.integers(0, 9, size=(4, 5)) + 1
    _, acc = hungarian_map(ContingencyTable(t))
    _, acc2 = hungarian_map(ContingencyTable(t[rng.permutation(4)][:, rng.permutation(5)]))
    assert acc == pytest.approx(acc2, abs=1e-15)


def test_cluster_accuracy_on_relabeled_partition():
    labels = np.array([0, 0, 1, 1, 2, 2])
    assert cluster_accuracy([2, 2, 0, 0, 1, 1], labels) == 1.0
    assert cluster_accuracy([0, 0, 0, 0, 1, 1], labels) == pytest.approx(4 / 6)


# -- AUROC ------------------------------------------------------------------------------


def test_auroc_hand_examples():
    assert auroc([0.9, 0.8], [0.7, 0.6]) == 1.0
    assert auroc([0.9, 0.7], [0.8, 0.6]) == 0.75
    assert auroc([0.5, 0.5], [0.5]) == 0.5


@given(st.lists(st.integers(0, 5), min_size=1, max_size=15),
       st.lists(st.integers(0, 5), min_size=1, max_size=15))
def test_auroc_matches_pair_count_and_is_rank_invariant(pos, neg):
    want = auroc_pairs(pos, neg)
    assert auroc(pos, neg) == pytest.approx(want, abs=1e-12)
    f = lambda s: np.exp(np.asarray(s, float)) * 3 + 1
    assert auroc(f(pos), f(neg)) == pytest.approx(want, abs=1e-12)


def test_nn_auroc_examples():
    rng = np.random.default_rng(0)
    train = rng.standard_normal((20, 3))
    test = train[:8].copy()
    assert nn_auroc(test, train, test) == 0.5
    t2 = np.zeros((5, 3))
    t2[:, :2] = rng.standard_normal((5, 2))
    gen = np.tile([0.0, 0.0, 1.0], (4, 1))
    assert nn_auroc(gen, t2, t2[:3]) == 1.0
    with pytest.raises(DataError):
        nn_auroc(np.zeros((1, 3)), train, test)


# -- pseudo labels ------------------------------------------------------------------------


def test_pseudo_label_examples():
    protos = np.eye(2)
    a = pseudo_label(FeatureSet([[1.0, 0.1]]), protos)
    assert a.assignments.tolist() == [0] and a.method == "pseudo"
    tie = pseudo_label(FeatureSet([[1.0, 1.0]]), protos)
    assert tie.assignments.tolist() == [0]
    x = FeatureSet(np.random.default_rng(0).standard_normal((30, 2)))
    outs = [pseudo_label(x, protos, t).assignments for t in (0.01, 0.1, 1.0)]
    assert all(np.array_equal(outs[0], o) for o in outs)
    _, probs = pseudo_label(x, protos, 0.1, return_probs=True)
    np.testing.assert_allclose(probs.sum(1), 1.0)
    with pytest.raises(DataError):
        pseudo_label(x, [[1.0, 0.0], [0.0, 0.0]])


def test_metric_report_shape():
    r = metric_report("frechet", 1, 10, 20, {"C": 8})
    assert r == {"metric": "frechet", "value": 1.0, "n_a": 10, "n_b": 20, "config": {"C": 8}}
