import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_interactions
from icpns.community import (CommunityModel, build_community_model, build_community_tables,
                             cluster_users, community_popularity, kmeans_objective, smooth_popularity)
from icpns.data import Interactions
from icpns.sampler import PopularitySampler, smoothed_counts


def _best_two_partition(x):
    """Exhaustive minimum-SSE split of a small point set into two non-empty groups."""
    best = None
    n = x.shape[0]
    for mask in itertools.product([0, 1], repeat=n):
        lab = np.array(mask)
        if lab.min() == lab.max():
            continue
        cost = sum(np.square(x[lab == c] - x[lab == c].mean(0)).sum() for c in (0, 1))
        if best is None or cost < best[0] - 1e-12:
            best = (cost, lab)
    return best


def test_line_points_two_clusters():
    x = np.array([[0.0], [1.0], [10.0], [11.0]])
    cost, lab = _best_two_partition(x)
    for seed in range(5):
        assign, cent = cluster_users(x, 2, seed)
        same = assign[0] == assign[1] and assign[2] == assign[3] and assign[0] != assign[2]
        assert same
        assert sorted(cent.ravel().tolist()) == [0.5, 10.5]
        assert kmeans_objective(x, assign, cent) == pytest.approx(cost)


def test_single_cluster_and_singletons():
    gen = np.random.default_rng(0)
    x = gen.normal(size=(12, 3))
    assign, cent = cluster_users(x, 1, 0)
    assert not assign.any() and np.allclose(cent[0], x.mean(0))
    assign, cent = cluster_users(x, 12, 0)
    assert sorted(assign.tolist()) == list(range(12))
    assert kmeans_objective(x, assign, cent) == pytest.approx(0.0, abs=1e-20)


def test_too_many_clusters():
    with pytest.raises(ValueError):
        cluster_users(np.zeros((3, 2)), 4, 0)
    with pytest.raises(ValueError):
        cluster_users(np.array([[np.inf, 0.0]]), 1, 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(1, 6), st.integers(6, 40))
def test_kmeans_properties(seed, k, n):
    x = np.random.default_rng(seed).normal(size=(n, 3))
    x[: n // 3] += 4.0
    history = []
    assign, cent = cluster_users(x, k, seed, history=history)
    assert np.all(np.diff(history) <= 1e-9 * max(history[0], 1.0))
    assert assign.shape == (n,) and assign.min() >= 0 and assign.max() < k
    d = np.square(x[:, None, :] - cent[None, :, :]).sum(-1)
    # nearest centroid with ties to the lowest index
    assert np.array_equal(assign, np.argmin(d, axis=1))


def test_kmeans_deterministic():
    x = np.random.default_rng(3).normal(size=(50, 4))
    a1, c1 = cluster_users(x, 5, 17)
    a2, c2 = cluster_users(x, 5, 17)
    assert np.array_equal(a1, a2) and np.array_equal(c1, c2)


def test_duplicate_points_fill_every_cluster():
    x = np.repeat(np.array([[0.0, 0.0], [1.0, 1.0]]), 5, axis=0)
    assign, _ = cluster_users(x, 3, 0)
    assert assign.size == 10


def test_popularity_examples():
    train = Interactions.from_arrays([0, 0, 1], [0, 1, 0], 3, 4)
    v = community_popularity(np.array([0, 0, 1]), train, 3)
    assert v[0].tolist() == [2, 1, 0, 0]
    assert not v[2].any()
    single = community_popularity(np.zeros(3, dtype=np.int64), train, 1)
    assert np.array_equal(single[0], train.item_degrees())


def test_popularity_mass_conservation():
    gen = np.random.default_rng(4)
    train = random_interactions(gen, 40, 25, 0.3)
    assign = gen.integers(0, 6, size=40)
    v = community_popularity(assign, train, 6)
    assert np.array_equal(v.sum(0), train.item_degrees())
    dense = train.to_dense()
    for p in range(6):
        assert np.array_equal(v[p], dense[assign == p].sum(0))


def test_smoothing_examples():
    v = np.array([7.0, 0.0, 3.0])
    assert np.array_equal(smooth_popularity(v, 1.0), v)
    assert smooth_popularity([4, 1, 0], 0.5).tolist() == [2.0, 1.0, 0.0]
    s = smooth_popularity([100, 1], 0.1)
    assert s[0] == pytest.approx(10 ** 0.2, rel=1e-12) and s[1] == 1.0
    with pytest.raises(ValueError):
        smooth_popularity([1], 1.5)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 1000), min_size=2, max_size=20), st.floats(0.01, 1.0))
def test_smoothing_preserves_order(counts, alpha):
    s = smooth_popularity(counts, alpha)
    c = np.asarray(counts)
    assert np.all(s >= 0) and np.all((s == 0) == (c == 0))
    nz = c > 0
    assert np.array_equal(np.argsort(c[nz], kind="stable"), np.argsort(s[nz], kind="stable"))


def test_tables():
    tables, flagged = build_community_tables(np.array([[2.0, 1.0, 0.0], [0.0, 0.0, 0.0]]))
    assert flagged == [1] and tables[1] is None
    assert tables[0].support.tolist() == [0, 1]
    assert np.allclose(tables[0].table.probabilities(), [2 / 3, 1 / 3], atol=1e-12)


def test_single_community_table_equals_pns_table():
    gen = np.random.default_rng(5)
    train = random_interactions(gen, 30, 20, 0.3)
    s = smooth_popularity(community_popularity(np.zeros(30, dtype=np.int64), train, 1), 0.1)
    tables, _ = build_community_tables(s)
    pns = PopularitySampler(train, 0.1).global_table
    assert np.array_equal(tables[0].support, pns.support)
    assert np.array_equal(tables[0].table.prob, pns.table.prob)
    assert np.array_equal(tables[0].table.alias, pns.table.alias)


def test_table_reconstructs_smoothed_row():
    gen = np.random.default_rng(6)
    train = random_interactions(gen, 60, 30, 0.2)
    model = build_community_model(gen.normal(size=(60, 4)), train, 4, 0.3, seed=1)
    for p, table in enumerate(model.tables()):
        row = model.smoothed[p]
        if table is None:
            assert not row.any()
            continue
        full = np.zeros(30)
        full[table.support] = table.table.probabilities()
        assert np.allclose(full, row / row.sum(), atol=1e-9)


def test_model_save_load(tmp_path):
    gen = np.random.default_rng(7)
    train = random_interactions(gen, 25, 15, 0.3)
    model = build_community_model(gen.normal(size=(25, 3)), train, 3, 0.1, seed=2)
    model.save(tmp_path / "c.model")
    back = CommunityModel.load(tmp_path / "c.model")
    assert np.array_equal(back.assignment, model.assignment)
    assert np.array_equal(back.counts, model.counts)
    assert np.array_equal(back.centroids, model.centroids)
    assert np.allclose(back.smoothed, model.smoothed, rtol=0, atol=0)
    model.export_assignment(tmp_path / "a.tsv")
    lines = (tmp_path / "a.tsv").read_text().splitlines()
    assert lines[0] == f"0\t{model.assignment[0]}" and len(lines) == 25
