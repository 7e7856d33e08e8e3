import itertools
import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mlvpt.labelgraph import (
    GroupingConfig,
    Mode,
    Partition,
    build_affinity,
    build_cooccurrence,
    group_classes,
    grouping_to_json,
    kmeans,
    load_grouping,
    normalized_laplacian,
    read_matrix,
    spectral_cluster,
    write_matrix,
)


def brute_cooccurrence(y):
    N, K = y.shape
    S = np.zeros((K, K))
    for i in range(K):
        n_i = sum(y[n, i] for n in range(N))
        for j in range(K):
            both = sum(1 for n in range(N) if y[n, i] and y[n, j])
            S[i, j] = both / n_i if n_i else 0.0
    return S


def block_affinity(sizes):
    K = sum(sizes)
    M = np.zeros((K, K))
    start = 0
    for s in sizes:
        M[start : start + s, start : start + s] = 1.0
        start += s
    return M


def test_cooccurrence_hand_example():
    y = np.array([[1, 1, 0], [1, 1, 0], [1, 0, 1], [1, 0, 0]])
    expected = np.array([[1, 0.5, 0.25], [1, 1, 0], [1, 0, 1]])
    np.testing.assert_array_equal(build_cooccurrence(y), expected)


def test_cooccurrence_saturated_and_disjoint():
    np.testing.assert_array_equal(build_cooccurrence(np.ones((5, 4), dtype=int)), np.ones((4, 4)))
    np.testing.assert_array_equal(build_cooccurrence(np.eye(4, dtype=int)), np.eye(4))


def test_cooccurrence_zero_positive_class_warns():
    y = np.array([[1, 0, 1], [1, 0, 0]])
    with pytest.warns(RuntimeWarning, match=r"\[1\]"):
        S = build_cooccurrence(y)
    np.testing.assert_array_equal(S[1], 0.0)
    assert S[0, 0] == 1.0 and S[2, 2] == 1.0


@pytest.mark.parametrize("bad", [np.array([[0, 2]]), np.zeros((0, 3)), np.zeros((3, 1)), np.zeros(4)])
def test_cooccurrence_rejects_invalid_labels(bad):
    with pytest.raises(ValueError):
        build_cooccurrence(bad)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 30), st.integers(2, 8), st.integers(0, 2**31 - 1))
def test_cooccurrence_matches_brute_force(n, k, seed):
    y = np.random.default_rng(seed).integers(0, 2, size=(n, k))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        S = build_cooccurrence(y)
    np.testing.assert_allclose(S, brute_cooccurrence(y), rtol=0, atol=1e-15)
    assert S.min() >= 0 and S.max() <= 1
    for i in range(k):
        if y[:, i].any():
            assert S[i, i] == 1.0


def test_affinity_identity_examples():
    I = np.eye(4)
    np.testing.assert_array_equal(build_affinity(I, 1.0, Mode.CO), I)
    np.testing.assert_array_equal(build_affinity(I, 1.0, Mode.DC), np.ones((4, 4)) - I)


def test_affinity_tau_example():
    S = np.array([[1.0, 0.25], [1.0, 1.0]])
    assert build_affinity(S, 2.0, "co")[0, 1] == 0.75


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 10), st.floats(0.2, 5.0), st.integers(0, 2**31 - 1))
def test_affinity_invariants(k, tau, seed):
    S = np.random.default_rng(seed).random((k, k))
    np.fill_diagonal(S, 1.0)
    co, dc = build_affinity(S, tau, Mode.CO), build_affinity(S, tau, Mode.DC)
    assert np.abs(co - co.T).max() == 0 and np.abs(dc - dc.T).max() == 0
    assert co.min() >= 0 and co.max() <= 1 and dc.min() >= 0 and dc.max() <= 1
    np.testing.assert_allclose(co + dc, np.ones((k, k)), rtol=0, atol=1e-12)
    np.testing.assert_array_equal(np.diag(co), 1.0)
    np.testing.assert_array_equal(np.diag(dc), 0.0)


def test_affinity_rejects_bad_tau():
    with pytest.raises(ValueError):
        build_affinity(np.eye(3), 0.0, Mode.CO)


def test_laplacian_examples():
    np.testing.assert_allclose(normalized_laplacian(np.ones((2, 2))), [[0.5, -0.5], [-0.5, 0.5]], atol=1e-15)
    M = np.ones((3, 3))
    M[2, :] = M[:, 2] = 0.0
    L = normalized_laplacian(M, 1e-8)
    assert L[2, 2] == 1.0
    assert L[2, :2].tolist() == [0.0, 0.0] and L[:2, 2].tolist() == [0.0, 0.0]


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 12), st.integers(0, 2**31 - 1))
def test_laplacian_spectrum(k, seed):
    A = np.random.default_rng(seed).random((k, k))
    M = (A + A.T) / 2
    L = normalized_laplacian(M)
    np.testing.assert_allclose(L, L.T, atol=1e-15)
    ev = np.linalg.eigvalsh(L)
    assert ev.min() >= -1e-8 and ev.max() <= 2 + 1e-8
    assert abs(ev.min()) < 1e-10


def test_spectral_recovers_blocks():
    part = spectral_cluster(block_affinity([4, 4, 4]), GroupingConfig(n_groups=3))
    assert part.groups == ((0, 1, 2, 3), (4, 5, 6, 7), (8, 9, 10, 11))


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(1, 5), min_size=2, max_size=5), st.integers(0, 1000))
def test_spectral_recovers_shuffled_blocks(sizes, seed):
    M = block_affinity(sizes)
    perm = np.random.default_rng(seed).permutation(len(M))
    Mp = M[np.ix_(perm, perm)]
    part = spectral_cluster(Mp, GroupingConfig(n_groups=len(sizes), rng_seed=seed))
    bounds = np.cumsum([0] + sizes)
    truth = Partition.from_assignments(
        Mode.CO, np.searchsorted(bounds, perm, side="right") - 1
    )
    assert part == truth


def test_spectral_singletons_and_single_group():
    rng = np.random.default_rng(0)
    A = rng.random((6, 6))
    M = (A + A.T) / 2
    assert spectral_cluster(M, GroupingConfig(n_groups=6)).groups == tuple((i,) for i in range(6))
    assert spectral_cluster(M, GroupingConfig(n_groups=1)).groups == (tuple(range(6)),)


def test_spectral_too_many_groups():
    with pytest.raises(ValueError, match="exceeds"):
        spectral_cluster(np.ones((3, 3)), GroupingConfig(n_groups=4))


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 10), st.integers(1, 10), st.integers(0, 2**31 - 1))
def test_partition_validity_random(k, n_groups, seed):
    n_groups = min(n_groups, k)
    A = np.random.default_rng(seed).random((k, k))
    part = spectral_cluster((A + A.T) / 2, GroupingConfig(n_groups=n_groups, rng_seed=seed))
    assert part.n_groups == n_groups
    members = sorted(c for g in part.groups for c in g)
    assert members == list(range(k))


def test_kmeans_against_exhaustive_search():
    """Tiny instance: restarts find the global optimum of the within-cluster sum of squares."""
    X = np.random.default_rng(3).normal(size=(7, 2))
    best = np.inf
    for labels in itertools.product(range(2), repeat=7):
        a = np.array(labels)
        if len(set(labels)) < 2:
            continue
        best = min(best, sum(((X[a == c] - X[a == c].mean(0)) ** 2).sum() for c in range(2)))
    _, inertia = kmeans(X, 2, restarts=10, max_iter=100, seed=0)
    assert inertia == pytest.approx(best, rel=1e-12)


def test_group_classes_identical_labels_nonempty_groups():
    y = np.tile([1, 1, 0, 1, 1], (10, 1))
    y[:, 2] = 1
    co, dc = group_classes(y, GroupingConfig(n_groups=3))
    np.testing.assert_array_equal(build_affinity(build_cooccurrence(y), 2.0, Mode.CO), 1.0)
    for p in (co, dc):
        assert p.n_groups == 3 and all(len(g) > 0 for g in p.groups)


def test_group_classes_deterministic_and_independent_modes(rng):
    y = rng.integers(0, 2, size=(200, 9))
    cfg = GroupingConfig(n_groups=3, rng_seed=5)
    a, b = group_classes(y, cfg), group_classes(y, cfg)
    assert a == b
    assert a[0].mode is Mode.CO and a[1].mode is Mode.DC


def test_partition_canonical_and_validation():
    p = Partition(Mode.CO, ((3, 1), (0, 2)))
    assert p.groups == ((0, 2), (1, 3))
    assert p.group_of == (0, 1, 0, 1)
    with pytest.raises(ValueError):
        Partition(Mode.CO, ((0, 1), (1, 2)))
    with pytest.raises(ValueError):
        Partition(Mode.CO, ((0,), ()), 1)
    with pytest.raises(ValueError):
        Partition(Mode.CO, ((0, 1),), 3)


@pytest.mark.parametrize("kwargs", [{"n_groups": 0}, {"tau": 0.0}, {"degree_epsilon": 0.0}, {"kmeans_restarts": 0}])
def test_grouping_config_validation(kwargs):
    with pytest.raises(ValueError):
        GroupingConfig(**kwargs)


def test_matrix_dump_roundtrip(tmp_path, rng):
    S = rng.random((4, 3))
    path = tmp_path / "S.bin"
    write_matrix(path, S)
    raw = path.read_bytes()
    header, body = raw.split(b"\n", 1)
    assert json.loads(header) == {"rows": 4, "cols": 3}
    assert body == S.astype("<f8").tobytes()
    np.testing.assert_array_equal(read_matrix(path), S)
    path.write_bytes(raw[:-3])
    with pytest.raises(ValueError):
        read_matrix(path)


def test_grouping_json_roundtrip(tmp_path):
    co = Partition(Mode.CO, ((0, 1), (2, 3)))
    dc = Partition(Mode.DC, ((0, 2), (1, 3)))
    cfg = GroupingConfig(n_groups=2)
    text = grouping_to_json(co, dc, cfg, "S.bin")
    doc = json.loads(text)
    assert doc == {"K": 4, "n_groups": 2, "tau": 2.0, "seed": 0, "co_groups": [[0, 1], [2, 3]],
                   "dc_groups": [[0, 2], [1, 3]], "S_path": "S.bin"}
    path = tmp_path / "g.json"
    path.write_text(text)
    assert load_grouping(path) == (co, dc)
