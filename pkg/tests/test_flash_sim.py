import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vtsparse.flash_sim import (
    BlockSpec,
    BufferTracker,
    attention_rows,
    blockwise_attention,
    rater_mean_scores,
    row_stats,
    special_v,
    topk_visual,
)
from vtsparse.numerics import stable_softmax_rows
from vtsparse.sparsify import prune


def dense(Q, K, V, causal=True):
    S = Q @ K.T / np.sqrt(Q.shape[1])
    if causal:
        S[np.triu(np.ones(S.shape, dtype=bool), 1)] = -np.inf
    A = stable_softmax_rows(S)
    return A @ V, A


def qkv(seed, L=16, d=8):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(L, d)), rng.normal(size=(L, d)), rng.normal(size=(L, d))


def test_single_block_is_bitwise_dense():
    Q, K, V = qkv(0)
    assert np.array_equal(blockwise_attention(Q, K, V, BlockSpec(16)), dense(Q, K, V)[0])
    assert np.array_equal(blockwise_attention(Q, K, V, BlockSpec(64)), dense(Q, K, V)[0])


def test_block_one_matches_dense():
    Q, K, V = qkv(1)
    assert np.max(np.abs(blockwise_attention(Q, K, V, BlockSpec(1)) - dense(Q, K, V)[0])) < 1e-10


@settings(max_examples=40)
@given(st.integers(1, 40), st.integers(1, 16), st.sampled_from([1, 3, 7, 16]), st.booleans(), st.integers(0, 2**31))
def test_blockwise_matches_dense(L, d, b, causal, seed):
    Q, K, V = qkv(seed, L, d)
    out, stats = blockwise_attention(Q, K, V, BlockSpec(b), causal=causal, return_stats=True)
    ref, A = dense(Q, K, V, causal)
    assert np.max(np.abs(out - ref)) < 1e-10
    S = Q @ K.T / np.sqrt(d)
    if causal:
        S[np.triu(np.ones(S.shape, dtype=bool), 1)] = -np.inf
    assert np.allclose(stats.lse, np.log(np.exp(S).sum(axis=1)), atol=1e-10)


def test_peak_buffer_bounded_by_block():
    Q, K, V = qkv(2, L=50)
    tr = BufferTracker()
    blockwise_attention(Q, K, V, BlockSpec(7), tracker=tr)
    assert 0 < tr.peak <= 7 * 50
    tr2 = BufferTracker()
    rater_mean_scores(Q, K, [3, 40], BlockSpec(7), tracker=tr2)
    assert tr2.peak <= 7 * 50


def test_row_stats_of_subset():
    Q, K, _ = qkv(3, L=20)
    full = row_stats(Q, K, BlockSpec(4))
    part = row_stats(Q, K, BlockSpec(4), rows=[2, 19])
    assert np.allclose(part.lse, full.lse[[2, 19]], atol=1e-12)


def test_special_v():
    v = special_v(6, [1, 4, 4])
    assert v[:, 0].tolist() == [0, 0.5, 0, 0, 0.5, 0]


def test_rater_scores_single_rater_is_its_row():
    Q, K, _ = qkv(4, L=12)
    _, A = dense(Q, K, K)
    got = rater_mean_scores(Q, K, [9], BlockSpec(5))
    assert np.max(np.abs(got - A[9])) < 1e-12


def test_rater_scores_uniform_attention():
    Q = np.zeros((8, 4))
    K = np.random.default_rng(5).normal(size=(8, 4))
    got = rater_mean_scores(Q, K, [2, 5], BlockSpec(3), causal=False)
    assert np.allclose(got, 1 / 8, atol=1e-15)


def test_rater_scores_match_slice_and_mean():
    Q, K, _ = qkv(6, L=24, d=6)
    _, A = dense(Q, K, K)
    raters = [17, 20, 23]
    want = A[raters].mean(axis=0)
    for b in (1, 5, 24):
        assert np.max(np.abs(rater_mean_scores(Q, K, raters, BlockSpec(b)) - want)) < 1e-10
        assert np.max(np.abs(attention_rows(Q, K, raters, BlockSpec(b)) - A[raters])) < 1e-10


def test_rater_scores_reuse_first_pass_lse():
    Q, K, V = qkv(7, L=30)
    _, stats = blockwise_attention(Q, K, V, BlockSpec(8), return_stats=True)
    a = rater_mean_scores(Q, K, [25, 29], BlockSpec(8), lse=stats.lse)
    b = rater_mean_scores(Q, K, [25, 29], BlockSpec(8))
    assert np.max(np.abs(a - b)) < 1e-12


def test_topk_examples():
    s = np.array([9.0, 5, 4, 3, 2, 8])
    assert topk_visual(s, (1, 5), 4) == [1, 2, 3, 4]
    assert topk_visual(s, (1, 5), 2) == [1, 2]
    with pytest.raises(ValueError):
        topk_visual(s, (1, 5), 5)


@given(st.lists(st.integers(0, 4), min_size=3, max_size=30), st.data())
def test_topk_is_prune_complement(vals, data):
    scores = np.array(vals, dtype=float)
    start = data.draw(st.integers(0, len(vals) - 1))
    stop = data.draw(st.integers(start + 1, len(vals)))
    span = scores[start:stop]
    k = data.draw(st.integers(1, len(span)))
    top = topk_visual(scores, (start, stop), k)
    # sort oracle: descending score, lower index first
    oracle = sorted(range(start, stop), key=lambda i: (-scores[i], i))[:k]
    assert top == oracle
    _, kept = prune(span, len(span) - k)
    if len(set(span.tolist())) == len(span):
        assert sorted(top) == [start + i for i in kept.tolist()]
