import numpy as np
from hypothesis import given, settings, strategies as st
from scipy.spatial import cKDTree

from splatdyn.knn import SpatialHashGrid


def brute_knn(points, queries, k):
    d = np.linalg.norm(queries[:, None, :] - points[None, :, :], axis=2)
    idx = np.lexsort((np.broadcast_to(np.arange(len(points)), d.shape), d), axis=1)[:, :k]
    return idx, np.take_along_axis(d, idx, axis=1)


def test_matches_brute_force_uniform(rng):
    pts = rng.uniform(0, 1, (800, 3))
    q = rng.uniform(-0.2, 1.2, (60, 3))
    for k in (1, 7, 300):
        idx, dist = SpatialHashGrid(pts).query(q, k)
        bi, bd = brute_knn(pts, q, k)
        np.testing.assert_array_equal(idx, bi)
        np.testing.assert_allclose(dist, bd, rtol=0, atol=1e-12)


def test_matches_kdtree_on_clustered_cloud(rng):
    pts = np.concatenate([rng.normal(0, 0.01, (500, 3)), rng.normal(5, 1.0, (500, 3))])
    dist, _ = cKDTree(pts).query(pts, 30)
    _, d2 = SpatialHashGrid(pts).query(pts, 30)
    np.testing.assert_allclose(d2, dist, atol=1e-12)


def test_ties_resolve_to_lower_index():
    pts = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 1.0, 0], [0, 0, 5.0]])
    idx, _ = SpatialHashGrid(pts).query(np.zeros((1, 3)), 3)
    assert idx.tolist() == [[0, 1, 2]]


def test_k_larger_than_cloud():
    pts = np.eye(3)
    idx, _ = SpatialHashGrid(pts).query(np.zeros((2, 3)), 10)
    assert idx.shape == (2, 3)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 60), st.integers(1, 20), st.integers(0, 2**31 - 1))
def test_random_sizes(n, k, seed):
    r = np.random.default_rng(seed)
    # duplicates and coplanar points included
    pts = np.round(r.uniform(0, 1, (n, 3)), 1)
    q = r.uniform(0, 1, (5, 3))
    idx, dist = SpatialHashGrid(pts).query(q, k)
    bi, bd = brute_knn(pts, q, min(k, n))
    np.testing.assert_array_equal(idx, bi)
    np.testing.assert_allclose(dist, bd, atol=1e-12)
