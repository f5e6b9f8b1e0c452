import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from docmia.features import (
    DegenerateInput,
    _lloyd,
    _plus_plus,
    aggregate,
    build_descriptors,
    cluster_descriptors,
    decide_membership,
    kmeans2,
    normalize,
    parse_feature_spec,
)
from docmia.numerics import rng_stream


def test_aggregate_examples():
    assert aggregate([1, 2, 3]) == {"avg": 2.0, "min": 1.0, "max": 3.0, "med": 2.0}
    assert aggregate([1, 2, 3, 4])["med"] == 2.5
    assert set(aggregate([7]).values()) == {7.0}
    with pytest.raises(ValueError):
        aggregate([])


def test_feature_spec_parsing():
    assert len(parse_feature_spec("all")) == 12
    assert parse_feature_spec("avg:delta") == [("avg", "delta")]
    assert len(parse_feature_spec("delta,steps")) == 8
    with pytest.raises(ValueError):
        parse_feature_spec("avg:colour")
    with pytest.raises(ValueError):
        parse_feature_spec("mode:delta")


def _records(rng, n_docs=6):
    return {f"d{i}": [{"delta": rng.random(), "steps": float(rng.integers(1, 9)), "utility": rng.random()} for _ in range(int(rng.integers(1, 5)))] for i in range(n_docs)}


def test_descriptor_shape_and_normalization():
    rng = np.random.default_rng(0)
    desc = build_descriptors(_records(rng, 10), parse_feature_spec("all"))
    assert desc.vector.shape == (10, 12)
    for j in range(12):
        col = desc.vector[:, j]
        if np.ptp(desc.raw[:, j]) > 0:
            assert abs(col.mean()) < 1e-9 and abs(col.std() - 1) < 1e-9
    one = build_descriptors(_records(rng, 10), parse_feature_spec("avg:delta"))
    assert one.vector.shape == (10, 1) and one.names == ["avg_delta"]


def test_constant_column_normalizes_to_zero():
    x = np.array([[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]])
    np.testing.assert_array_equal(normalize(x)[:, 1], 0.0)
    mm = normalize(x, "minmax")
    np.testing.assert_allclose(mm[:, 0], [0, 0.5, 1])


def _best_partition_sse(x: np.ndarray) -> float:
    """Minimum within-cluster SSE over every 2-partition (brute force)."""
    n = len(x)
    masks = np.array(list(itertools.product((0, 1), repeat=n - 1)), dtype=bool)[1:]
    a = np.concatenate([np.zeros((len(masks), 1), dtype=bool), masks], axis=1)
    n1 = a.sum(axis=1)
    s1, q1 = (a * x).sum(axis=1), (a * x * x).sum(axis=1)
    s0, q0 = x.sum() - s1, (x * x).sum() - q1
    sse = (q1 - s1**2 / n1) + (q0 - s0**2 / (n - n1))
    return float(sse.min())


def test_kmeans_matches_exhaustive_partition():
    rng = np.random.default_rng(2024)
    misses = 0
    for i in range(200):
        n = int(rng.integers(2, 13))
        x = rng.normal(size=n) * rng.uniform(0.5, 3) + rng.choice([0, 4], size=n)
        if np.all(x == x[0]):
            continue
        res = kmeans2(x, seed=i)
        misses += res.inertia > _best_partition_sse(x) + 1e-9
    assert misses == 0


def test_multidimensional_kmeans_reaches_separated_optimum():
    rng = np.random.default_rng(5)
    for i in range(50):
        x = np.concatenate([rng.normal(0, 0.5, (6, 3)), rng.normal(4, 0.5, (6, 3))])
        res = kmeans2(x, seed=i)
        assert sorted(np.bincount(res.assignment).tolist()) == [6, 6]
        assert len(set(res.assignment[:6])) == 1


def test_kmeans_four_points():
    res = kmeans2(np.array([0.0, 0.1, 5.0, 5.1]), seed=0)
    assert res.assignment.tolist() == [0, 0, 1, 1]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_kmeans_partition_ignores_input_order(seed):
    rng = np.random.default_rng(seed)
    x = np.concatenate([rng.normal(0, 0.3, 6), rng.normal(5, 0.3, 6)])
    perm = rng.permutation(12)
    a = kmeans2(x, 0).assignment
    b = kmeans2(x[perm], 0).assignment
    same = a[perm]
    assert np.array_equal(same, b) or np.array_equal(same, 1 - b)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_lloyd_inertia_never_increases(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(15, 3))
    res = _lloyd(x, _plus_plus(x, rng_stream(seed, "t")), 100)
    h = res.inertia_history
    assert all(b <= a + 1e-12 for a, b in zip(h, h[1:]))


def test_kmeans_degenerate_inputs():
    with pytest.raises(DegenerateInput):
        kmeans2(np.ones((5, 2)), 0)
    with pytest.raises(ValueError):
        kmeans2(np.ones((1, 2)), 0)


def test_low_delta_cluster_is_member():
    delta = np.array([0.1, 0.2, 0.15, 3.0, 3.2, 2.9])
    res = decide_membership(kmeans2(delta, 0), delta, True, delta)
    assert res.labels.tolist() == [1, 1, 1, 0, 0, 0]
    # a point sitting on the member centroid gets the maximal score, 0
    pts = np.concatenate([delta, [res.centroids[res.member_cluster][0]]])
    res2 = decide_membership(kmeans2(pts, 0), pts, True, pts)
    assert res2.scores.max() == pytest.approx(0.0, abs=1e-12)
    assert res2.scores.argmax() == len(pts) - 1


def test_labels_invariant_to_cluster_id_swap():
    delta = np.array([0.1, 0.2, 3.0, 3.1])
    a = decide_membership(kmeans2(delta, 0), delta, True, delta)
    swapped = kmeans2(delta, 0)
    swapped.assignment = 1 - swapped.assignment
    swapped.centroids = swapped.centroids[::-1].copy()
    b = decide_membership(swapped, delta, True, delta)
    assert a.labels.tolist() == b.labels.tolist()


def test_cluster_descriptors_uses_avg_delta_direction():
    recs = {f"m{i}": [{"delta": 0.1 + 0.01 * i, "steps": 3.0, "utility": 0.9}] for i in range(4)}
    recs.update({f"n{i}": [{"delta": 2.0 + 0.01 * i, "steps": 9.0, "utility": 0.2}] for i in range(4)})
    desc = build_descriptors(recs, parse_feature_spec("all"))
    res = cluster_descriptors(desc, 0)
    assert res.labels.tolist() == [1] * 4 + [0] * 4
