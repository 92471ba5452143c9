from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from heatdfc.errors import AsymmetricInput, EmptyInput, EmptyState, LabelOutOfRange
from heatdfc.states import (
    StateModel,
    align_centroids,
    assignment_accuracy,
    best_permutation,
    count_switches,
    elbow_select,
    kmeans,
    occupancy,
    relabel,
    transition_counts,
    transition_matrix,
    unvectorize_upper,
    vectorize_upper,
    within_state_dispersion,
)


def planted_clusters(rng, k=3, per=60, dim=6, spread=0.05, gap=5.0):
    centres = rng.normal(scale=gap, size=(k, dim))
    points = np.concatenate([c + spread * rng.normal(size=(per, dim)) for c in centres])
    truth = np.repeat(np.arange(1, k + 1), per)
    return points, truth


# ---- vectorization -------------------------------------------------------


def test_vectorize_examples():
    np.testing.assert_array_equal(vectorize_upper(np.array([[1, 0.7], [0.7, 1]])), [0.7])
    np.testing.assert_array_equal(vectorize_upper(np.eye(3)), [0, 0, 0])


def test_vectorize_row_major():
    c = np.array([[1, 2, 3], [2, 1, 4], [3, 4, 1]], dtype=float)
    np.testing.assert_array_equal(vectorize_upper(c), [2, 3, 4])


def test_vectorize_rejects_asymmetric():
    with pytest.raises(AsymmetricInput):
        vectorize_upper(np.array([[1, 0.5], [0.4, 1]]))


def test_vectorize_round_trip(rng):
    a = rng.normal(size=(5, 5))
    c = (a + a.T) / 2
    np.fill_diagonal(c, 1.0)
    v = vectorize_upper(c)
    assert np.abs(vectorize_upper(unvectorize_upper(v, 5)) - v).max() <= 1e-15
    np.testing.assert_array_equal(unvectorize_upper(v, 5), c)


# ---- k-means -------------------------------------------------------------


def test_kmeans_single_cluster_is_grand_mean(rng):
    pts = rng.normal(size=(40, 3))
    res = kmeans(pts, 1, restarts=3, seed=0)
    np.testing.assert_allclose(res.centroids[0], pts.mean(axis=0), atol=1e-12)
    assert res.sse_within == pytest.approx(pts.var(axis=0).sum() * 40, rel=1e-12)
    assert np.all(res.labels == 1)


def test_kmeans_separated_clouds_every_restart(rng):
    a = rng.normal(size=(30, 2))
    b = rng.normal(size=(30, 2)) + 100.0 * 2
    pts = np.concatenate([a, b])
    for seed in range(20):
        res = kmeans(pts, 2, restarts=1, seed=seed)
        assert len(set(res.labels[:30])) == 1 and len(set(res.labels[30:])) == 1
        assert res.labels[0] != res.labels[-1]


def test_kmeans_identical_points():
    res = kmeans(np.ones((10, 4)), 3, restarts=4, seed=1)
    assert res.sse_within == 0.0
    assert set(res.labels) <= {1, 2, 3}


def test_kmeans_errors():
    with pytest.raises(EmptyInput):
        kmeans(np.empty((0, 3)), 1)
    with pytest.raises(ValueError):
        kmeans(np.zeros((3, 2)), 4)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6))
def test_kmeans_sse_decomposition_and_monotone(seed, k):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(50, 4))
    res = kmeans(pts, k, restarts=3, seed=seed)
    assert res.sse_within + res.sse_between == pytest.approx(res.sse_total, rel=1e-6)
    hist = res.sse_history
    assert all(b <= a * (1 + 1e-9) + 1e-9 for a, b in zip(hist, hist[1:]))
    # each centroid is the mean of its members
    for c in range(k):
        members = pts[res.labels == c + 1]
        if len(members):
            np.testing.assert_allclose(res.centroids[c], members.mean(axis=0), atol=1e-10)


def test_kmeans_deterministic_and_thread_independent(rng):
    pts, _ = planted_clusters(rng, spread=1.5)
    one = kmeans(pts, 3, restarts=12, seed=7)
    again = kmeans(pts, 3, restarts=12, seed=7)
    threaded = kmeans(pts, 3, restarts=12, seed=7, n_jobs=4)
    for other in (again, threaded):
        np.testing.assert_array_equal(one.labels, other.labels)
        np.testing.assert_array_equal(one.centroids, other.centroids)
        assert one.best_restart == other.best_restart


def test_kmeans_more_restarts_never_worse(rng):
    # restart streams are shared prefixes, so 10 restarts include the first 5
    pts = rng.normal(size=(80, 3))
    five = kmeans(pts, 4, restarts=5, seed=3)
    ten = kmeans(pts, 4, restarts=10, seed=3)
    assert ten.sse_within <= five.sse_within
    if ten.best_restart < 5:
        assert ten.sse_within == five.sse_within
        np.testing.assert_array_equal(ten.labels, five.labels)


# ---- elbow ---------------------------------------------------------------


def test_elbow_planted_three(rng):
    pts, _ = planted_clusters(rng)
    res = elbow_select(pts, range(2, 9), restarts=5, seed=0)
    assert res.k == 3
    assert res.monotone
    assert all(b <= a for a, b in zip(res.ratios, res.ratios[1:]))
    assert not res.weak


def test_elbow_single_blob_flags_weak(rng):
    res = elbow_select(rng.normal(size=(200, 3)), range(2, 9), restarts=3, seed=0)
    assert 3 <= res.k <= 7
    assert res.weak


def test_elbow_needs_three_values():
    with pytest.raises(ValueError):
        elbow_select(np.zeros((5, 2)), [2, 3])


# ---- Markov statistics ---------------------------------------------------


def test_transition_constant_sequence():
    p = transition_matrix([1, 1, 1, 1], 3)
    np.testing.assert_array_equal(p[0], [1, 0, 0])
    np.testing.assert_allclose(p[1:], 1 / 3)


def test_transition_alternating():
    np.testing.assert_array_equal(transition_matrix([1, 2, 1, 2, 1], 2), [[0, 1], [1, 0]])


def test_transition_matches_pair_counting(rng):
    seq = rng.integers(1, 5, 10_000)
    counts = [[0] * 4 for _ in range(4)]
    for a, b in zip(seq[:-1], seq[1:]):
        counts[a - 1][b - 1] += 1
    expected = [[c / sum(row) for c in row] for row in counts]
    np.testing.assert_array_equal(transition_matrix(seq, 4), expected)
    np.testing.assert_array_equal(transition_counts(seq, 4), counts)


def test_transition_pools_sequences():
    p = transition_matrix([np.array([1, 1, 2]), np.array([2, 2, 1])], 2)
    np.testing.assert_array_equal(p, [[0.5, 0.5], [0.5, 0.5]])


def test_transition_label_errors():
    with pytest.raises(LabelOutOfRange):
        transition_matrix([1, 4, 2], 3)
    with pytest.raises(LabelOutOfRange):
        transition_matrix([0, 1], 3)


@settings(max_examples=50)
@given(st.integers(1, 6), st.lists(st.integers(0, 5), min_size=2, max_size=300))
def test_transition_rows_sum_to_one(k, raw):
    seq = [r % k + 1 for r in raw]
    p = transition_matrix(seq, k)
    assert np.all(np.abs(p.sum(axis=1) - 1) <= 1e-12)
    assert np.all((p >= 0) & (p <= 1))


def test_occupancy_examples(rng):
    np.testing.assert_array_equal(occupancy([np.ones(5, int), np.ones(7, int)], 3), [1, 0, 0])
    np.testing.assert_array_equal(occupancy([1, 1, 2, 3], 3), [0.5, 0.25, 0.25])
    rates = occupancy(list(rng.integers(1, 4, (10, 10_000))), 3)
    np.testing.assert_allclose(rates, 1 / 3, atol=0.01)
    assert abs(rates.sum() - 1) <= 1e-12


# ---- dispersion ----------------------------------------------------------


def test_dispersion_constant_state():
    series = [np.full((6, 2), 0.3)]
    out = within_state_dispersion(series, [[1, 1, 1, 2, 2, 2]], 2)
    np.testing.assert_allclose(out, 0.0, atol=1e-15)


def test_dispersion_hand_computed():
    # two subjects, five points each; state 1 holds rows with label 1
    a = np.array([[0.1, 0.5], [0.3, 0.5], [0.9, -0.2], [0.5, 0.1], [0.7, 0.7]])
    b = np.array([[0.2, 0.0], [0.4, 0.4], [0.6, 0.6], [0.8, 0.0], [1.0, 0.2]])
    labels = [[1, 1, 2, 2, 1], [2, 1, 2, 1, 2]]
    s1_e1 = [0.1, 0.3, 0.7, 0.4, 0.8]
    s1_e2 = [0.5, 0.5, 0.7, 0.4, 0.0]
    s2_e1 = [0.9, 0.5, 0.2, 0.6, 1.0]
    s2_e2 = [-0.2, 0.1, 0.0, 0.6, 0.2]

    def sd(v):
        m = sum(v) / len(v)
        return (sum((x - m) ** 2 for x in v) / (len(v) - 1)) ** 0.5

    expected = [(sd(s1_e1) + sd(s1_e2)) / 2, (sd(s2_e1) + sd(s2_e2)) / 2]
    np.testing.assert_allclose(within_state_dispersion([a, b], labels, 2), expected, atol=1e-15)


def test_dispersion_empty_state():
    with pytest.raises(EmptyState):
        within_state_dispersion([np.zeros((4, 1))], [[1, 1, 1, 2]], 2)


# ---- label handling ------------------------------------------------------


def test_best_permutation_recovers_relabeling(rng):
    truth = rng.integers(1, 4, 200)
    pred = np.array([3, 1, 2])[truth - 1]
    acc, mapping = best_permutation(pred, truth, 3)
    assert acc == 1.0
    assert mapping == [2, 3, 1]
    assert assignment_accuracy(pred, truth, 3) == 1.0


def test_align_centroids_undoes_shuffle(rng):
    ref = rng.normal(size=(4, 5)) * 10
    order = [2, 0, 3, 1]
    perm = align_centroids(ref, ref[order] + 0.01)
    assert perm == order


def test_relabel_preserves_statistics(rng):
    seq = rng.integers(1, 4, 500)
    perm = [2, 0, 1]
    moved = relabel(seq, perm)
    assert Counter(occupancy(seq, 3).tolist()) == Counter(occupancy(moved, 3).tolist())
    p, q = transition_matrix(seq, 3), transition_matrix(moved, 3)
    # q = P p P^T for the permutation matrix P
    pm = np.zeros((3, 3))
    pm[perm, range(3)] = 1
    np.testing.assert_allclose(q, pm @ p @ pm.T, atol=1e-15)
    assert count_switches(seq) == count_switches(moved)


def test_count_switches():
    assert count_switches([1, 1, 2, 2, 1, 3]) == 3
    assert count_switches([2]) == 0


def test_state_model_fit_splits_subjects(rng):
    pts, truth = planted_clusters(rng, per=40)
    series = {"a": pts[:50], "b": pts[50:]}
    model = StateModel.fit(series, 3, restarts=5, seed=1)
    assert [len(v) for v in model.assignments.values()] == [50, 70]
    labels = np.concatenate(list(model.assignments.values()))
    assert assignment_accuracy(labels, truth, 3) == 1.0
    auto = StateModel.fit(series, "auto", restarts=5, seed=1)
    assert auto.k == 3 and auto.elbow is not None
    # fixed k reproduces the matching elbow fit
    np.testing.assert_array_equal(auto.centroids, model.centroids)


def test_state_model_relabeled(rng):
    pts, _ = planted_clusters(rng, per=20)
    model = StateModel.fit({"x": pts}, 3, restarts=3, seed=0)
    perm = [1, 2, 0]
    moved = model.relabeled(perm)
    np.testing.assert_array_equal(moved.centroids[perm], model.centroids)
    np.testing.assert_array_equal(moved.assignments["x"], relabel(model.assignments["x"], perm))
