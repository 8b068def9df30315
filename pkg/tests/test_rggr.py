from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capdistill import rggr


# --- queue ----------------------------------------------------------------------
def test_queue_partial_fill():
    q = rggr.GalleryQueue(3, 8)
    rggr.queue_update(q, np.ones((4, 3)), [0, 1, 2, 3])
    assert len(q) == 4


def test_queue_fifo_eviction():
    q = rggr.GalleryQueue(2, 8)
    feats = np.arange(16.0).reshape(8, 2)
    q.push(feats, np.arange(8))
    q.push(100 + np.arange(6.0).reshape(3, 2), [8, 9, 10])
    assert len(q) == 8
    assert q.labels.tolist() == [3, 4, 5, 6, 7, 8, 9, 10]
    assert np.array_equal(q.features[0], feats[3])


@given(st.lists(st.integers(1, 7), min_size=1, max_size=15), st.integers(1, 9))
@settings(max_examples=60, deadline=None)
def test_queue_ring_buffer_oracle(sizes, cap):
    q = rggr.GalleryQueue(2, cap)
    ref = deque(maxlen=cap)
    counter = 0
    for n in sizes:
        feats = np.arange(counter, counter + n, dtype=float)[:, None] * np.ones((1, 2))
        q.push(feats, np.arange(counter, counter + n))
        ref.extend(range(counter, counter + n))
        counter += n
        assert q.labels.tolist() == list(ref)
        assert q.features[:, 0].tolist() == [float(v) for v in ref]


def test_queue_dimension_mismatch():
    with pytest.raises(ValueError, match="dim"):
        rggr.GalleryQueue(4, 8).push(np.zeros((2, 3)), [0, 1])


def test_queue_state_roundtrip(rng):
    q = rggr.GalleryQueue(3, 5)
    q.push(rng.standard_normal((7, 3)), np.arange(7))
    st_ = q.state()
    q2 = rggr.GalleryQueue.from_state(3, 5, st_["features"], st_["labels"])
    assert np.array_equal(q2.features, q.features) and np.array_equal(q2.labels, q.labels)


# --- ranking ---------------------------------------------------------------------
def test_rank_basis():
    q = rggr.GalleryQueue(2, 4).push(np.eye(2), [7, 8])
    r = rggr.compute_rank(q, np.array([[1.0, 0.0]]), 1)
    assert r.top_k.tolist() == [[0]]
    assert np.array_equal(r.retrieved[0, 0], [1.0, 0.0])


def test_rank_orthogonal_tie_lowest_index():
    q = rggr.GalleryQueue(3, 4).push(np.array([[0, 1.0, 0], [0, 0, 1.0], [0, 2.0, 0]]), [0, 1, 2])
    r = rggr.compute_rank(q, np.array([[1.0, 0, 0]]), 2)
    assert r.order.tolist() == [[0, 1, 2]]


def test_rank_exhaustive_oracle(rng):
    q = rggr.GalleryQueue(6, 32).push(rng.standard_normal((20, 6)), np.arange(20))
    queries = rng.standard_normal((5, 6))
    r = rggr.compute_rank(q, queries, 2)
    g = q.features
    for i, x in enumerate(queries):
        sims = [float(x @ v / (np.linalg.norm(x) * np.linalg.norm(v))) for v in g]
        want = sorted(range(20), key=lambda j: (-sims[j], j))
        assert r.order[i].tolist() == want
        assert r.top_k[i].tolist() == want[:2]


def test_rank_empty_queue():
    with pytest.raises(rggr.GalleryNotWarm):
        rggr.compute_rank(rggr.GalleryQueue(2, 4), np.ones((1, 2)), 1)


# --- importance / selection / intersection --------------------------------------------
def test_importance_example():
    assert rggr.channel_importance([1, 2, 3], [1, 1, -1]).tolist() == [1, 2, 3]
    assert not rggr.channel_importance([1, 2, 3], [0, 0, 0]).any()


def test_importance_equals_channel_ablation(rng):
    f, r = rng.standard_normal((2, 16))
    a = rggr.channel_importance(f, r)
    full = f @ r
    for d in range(16):
        g = f.copy()
        g[d] = 0.0
        assert abs(full - g @ r) == pytest.approx(a[d], rel=1e-9, abs=1e-12)


def test_select_examples():
    assert rggr.select_unimportant([0.1, 0.5, 0.2, 0.9], 0.5) == {0, 2}
    assert rggr.select_unimportant([1.0, 1.0, 1.0, 1.0], 0.5) == {0, 1}
    with pytest.raises(ValueError):
        rggr.select_unimportant([1.0], 0.0)


def test_select_sort_oracle(rng):
    for _ in range(20):
        s = rng.integers(0, 5, 32).astype(float)  # many ties
        want = sorted(range(32), key=lambda i: (s[i], i))[:16]
        assert rggr.select_unimportant(s, 0.5) == set(want)


def test_intersect_examples():
    assert rggr.intersect_masks([{0, 2}, {2, 3}]) == {2}
    assert rggr.intersect_masks([{1, 4}, {1, 4}]) == {1, 4}


def test_intersect_bitset_oracle(rng):
    sets = [set(np.flatnonzero(rng.uniform(size=16) < 0.7).tolist()) for _ in range(6)]
    bits = np.ones(16, dtype=bool)
    for s in sets:
        b = np.zeros(16, dtype=bool)
        b[list(s)] = True
        bits &= b
    assert rggr.intersect_masks(sets) == set(np.flatnonzero(bits).tolist())


# --- masks -------------------------------------------------------------------------------
def _literal_block_mask(queue, ft, fs, p, k):
    """Reference: per (i, j) select_unimportant, then intersect."""
    rank = rggr.compute_rank(queue, ft, k)
    sets = [rggr.select_unimportant(rggr.channel_importance(fs[i], rank.retrieved[i, j]), p)
            for i in range(len(ft)) for j in range(rank.top_k.shape[1])]
    return rggr.intersect_masks(sets)


def test_block_mask_matches_literal_pipeline(rng):
    for trial in range(10):
        d = 8
        q1 = rggr.GalleryQueue(d, 16).push(rng.standard_normal((10, d)), np.arange(10))
        q2 = rggr.GalleryQueue.from_state(d, 16, q1.features, q1.labels)
        ft = rng.standard_normal((3, d))
        fs = rng.standard_normal((3, d))
        fs[:, trial % d] *= 1e-3
        mask, idx = rggr.block_mask(q1, ft, fs, [0, 1, 2], 0.5, 2)
        q2.push(ft, [0, 1, 2])
        assert idx == _literal_block_mask(q2, ft, fs, 0.5, 2)
        assert mask.tolist() == [0.0 if i in idx else 1.0 for i in range(d)]
        assert len(idx) <= 4


def test_empty_intersection_all_ones():
    q = rggr.GalleryQueue(2, 4)
    # two queries whose unimportant channels differ
    ft = np.array([[1.0, 0.1], [0.1, 1.0]])
    fs = np.array([[1.0, 0.0], [0.0, 1.0]])
    res = rggr.build_masks([ft], [fs], [0, 1], [q], 0.5, 1)
    assert res.masks[0].tolist() == [1.0, 1.0]
    assert res.stats[0].empty and res.stats[0].unimportant == 0


def test_single_query_single_neighbour(rng):
    q = rggr.GalleryQueue(6, 8)
    ft = rng.standard_normal((1, 6))
    fs = rng.standard_normal((1, 6))
    mask, idx = rggr.block_mask(q, ft, fs, [0], 0.5, 1)
    # the only gallery entry is the query itself
    assert idx == rggr.select_unimportant(rggr.channel_importance(fs[0], ft[0]), 0.5)


def test_zero_signal_channel_always_masked(rng):
    d = 8
    q = rggr.GalleryQueue(d, 32)
    for step in range(5):
        ft = rng.standard_normal((4, d))
        fs = rng.standard_normal((4, d))
        ft[:, 3] = 0.0
        fs[:, 3] = 0.0
        res = rggr.build_masks([ft], [fs], np.arange(4), [q], 0.5, 2)
        assert res.masks[0][3] == 0.0


def test_p_one_single_pair_masks_everything(rng):
    q = rggr.GalleryQueue(5, 4)
    _, idx = rggr.block_mask(q, rng.standard_normal((1, 5)), rng.standard_normal((1, 5)), [0], 1.0, 1)
    assert idx == set(range(5))


def test_blocks_independent(rng):
    qa = [rggr.GalleryQueue(4, 8), rggr.GalleryQueue(6, 8)]
    qb = [rggr.GalleryQueue(4, 8), rggr.GalleryQueue(6, 8)]
    ft = [rng.standard_normal((3, 4)), rng.standard_normal((3, 6))]
    fs = [rng.standard_normal((3, 4)), rng.standard_normal((3, 6))]
    a = rggr.build_masks(ft, fs, [0, 1, 2], qa, 0.5, 2)
    other = [ft[0], rng.standard_normal((3, 6))]
    b = rggr.build_masks(other, [fs[0], rng.standard_normal((3, 6))], [0, 1, 2], qb, 0.5, 2)
    assert np.array_equal(a.masks[0], b.masks[0])
