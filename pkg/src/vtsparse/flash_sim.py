"""Block-wise streaming-softmax attention and dual-pass rater-score extraction.

The key dimension is tiled into blocks. Each block's scores are shifted by a
running row maximum; earlier partial sums are rescaled whenever the maximum
grows. No L x L buffer is ever allocated: the largest live score buffer is
``L_q x block_size``.

Rater-mean extraction runs a second streaming pass with a special value
vector holding ``1/n`` at the ``n`` rater rows and 0 elsewhere. Because the
means are wanted per *key* (visual token) while softmax normalizes per
*query*, the pass arranges the product as ``P_B^T v``: the rater weights sit
on the query rows, and each key block emits its slice of the output, so
concatenating the per-block outputs yields the full score vector. The
first pass's per-row log-sum-exp supplies the normalization.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, VTSparseError
from .numerics import as_matrix, matmul


@dataclass(frozen=True)
class BlockSpec:
    block_size: int = 16

    def __post_init__(self):
        if not isinstance(self.block_size, int) or self.block_size < 1:
            raise ValueError(f"block_size must be an integer >= 1, got {self.block_size!r}")

    def num_blocks(self, length):
        return -(-length // self.block_size)

    def blocks(self, length):
        for start in range(0, length, self.block_size):
            yield slice(start, min(start + self.block_size, length))


@dataclass
class RowStats:
    row_max: np.ndarray
    denom: np.ndarray

    @property
    def lse(self):
        return self.row_max + np.log(self.denom)


class BufferTracker:
    """Records the largest score buffer observed during a blockwise pass."""

    def __init__(self):
        self.peak = 0
        self.calls = 0

    def observe(self, arr):
        self.calls += 1
        self.peak = max(self.peak, int(arr.size))


def _future_mask(q_pos, k_pos):
    return k_pos[None, :] > q_pos[:, None]


def _positions(positions, length):
    return np.arange(length) if positions is None else np.asarray(positions)


def blockwise_attention(Q, K, V, spec, positions=None, counter=None, causal=True,
                        return_stats=False, tracker=None):
    """``softmax(Q K^T / sqrt(d)) V`` streamed over key blocks.

    ``positions`` gives the sequence position of each row (queries and keys
    share them); with ``causal`` keys at later positions are masked.
    """
    Q, K, V = as_matrix(Q, "Q"), as_matrix(K, "K"), as_matrix(V, "V")
    if Q.shape[1] != K.shape[1] or K.shape[0] != V.shape[0]:
        raise ShapeError("blockwise_attention operands do not conform", Q.shape, K.shape, V.shape)
    if causal and Q.shape[0] != K.shape[0]:
        raise ShapeError("causal self-attention needs as many queries as keys", Q.shape, K.shape)
    lq, d = Q.shape
    lk = K.shape[0]
    pos = _positions(positions, lk)
    scale = np.sqrt(d)

    if spec.num_blocks(lk) == 1:
        # degenerate single block: same arithmetic as the dense path
        S = matmul(Q, K.T, counter, "attn_scores") / scale
        if causal:
            S[_future_mask(pos, pos)] = -np.inf
        if tracker is not None:
            tracker.observe(S)
        m = S.max(axis=1)
        e = np.exp(S - m[:, None])
        denom = e.sum(axis=1)
        if counter is not None:
            counter.exps += e.size
        out = matmul(e / denom[:, None], V, counter, "attn_values")
        return (out, RowStats(m, denom)) if return_stats else out

    m = np.full(lq, -np.inf)
    denom = np.zeros(lq)
    acc = np.zeros((lq, V.shape[1]))
    for blk in spec.blocks(lk):
        S = matmul(Q, K[blk].T, counter, "attn_scores") / scale
        if causal:
            S[_future_mask(pos, pos[blk])] = -np.inf
        if tracker is not None:
            tracker.observe(S)
        m_new = np.maximum(m, S.max(axis=1))
        seen = np.isfinite(m_new)
        safe = np.where(seen, m_new, 0.0)
        alpha = np.where(seen, np.exp(m - safe), 0.0)
        e = np.exp(S - safe[:, None])
        if counter is not None:
            counter.exps += e.size + lq
        denom = alpha * denom + e.sum(axis=1)
        acc = alpha[:, None] * acc + matmul(e, V[blk], counter, "attn_values")
        m = m_new
    out = acc / denom[:, None]
    return (out, RowStats(m, denom)) if return_stats else out


def row_stats(Q, K, spec, positions=None, rows=None, causal=True, counter=None, tracker=None):
    """Streaming row max and denominator for the given query rows."""
    Q, K = as_matrix(Q, "Q"), as_matrix(K, "K")
    lk = K.shape[0]
    pos = _positions(positions, lk)
    rows = np.arange(Q.shape[0]) if rows is None else np.asarray(rows)
    Qr = Q[rows]
    q_pos = pos[rows]
    scale = np.sqrt(Q.shape[1])
    m = np.full(len(rows), -np.inf)
    denom = np.zeros(len(rows))
    for blk in spec.blocks(lk):
        S = matmul(Qr, K[blk].T, counter, "flash_extract") / scale
        if causal:
            S[_future_mask(q_pos, pos[blk])] = -np.inf
        if tracker is not None:
            tracker.observe(S)
        m_new = np.maximum(m, S.max(axis=1))
        seen = np.isfinite(m_new)
        safe = np.where(seen, m_new, 0.0)
        denom = np.where(seen, np.exp(m - safe), 0.0) * denom + np.exp(S - safe[:, None]).sum(axis=1)
        m = m_new
    return RowStats(m, denom)


def special_v(length, rater_rows):
    """``length x 1`` value matrix: ``1/n`` on the ``n`` rater rows, 0 elsewhere."""
    rows = np.unique(np.asarray(rater_rows, dtype=np.int64))
    if rows.size == 0:
        raise VTSparseError("special V needs at least one rater row")
    v = np.zeros((length, 1))
    v[rows, 0] = 1.0 / rows.size
    return v


def rater_mean_scores(Q, K, rater_rows, spec, positions=None, counter=None, causal=True,
                      lse=None, tracker=None):
    """Mean attention paid by the rater query rows to every key.

    Entry ``j`` equals ``(1/n) * sum_{i in raters} A[i, j]``. ``lse`` may
    carry the first pass's per-row log-sum-exp for all rows; otherwise the
    statistics are streamed here.
    """
    Q, K = as_matrix(Q, "Q"), as_matrix(K, "K")
    if Q.shape[1] != K.shape[1]:
        raise ShapeError("rater_mean_scores operands do not conform", Q.shape, K.shape)
    lq, lk = Q.shape[0], K.shape[0]
    if len(np.atleast_1d(rater_rows)) == 0:
        raise VTSparseError("rater set is empty")
    v = special_v(lq, rater_rows)
    rows = np.flatnonzero(v[:, 0])
    pos = _positions(positions, lk)
    if lse is None:
        row_lse = row_stats(Q, K, spec, pos, rows, causal, counter, tracker).lse
    else:
        row_lse = np.asarray(lse)[rows]
    Qr = Q[rows]
    vr = v[rows]
    q_pos = pos[rows]
    scale = np.sqrt(Q.shape[1])
    outs = []
    for blk in spec.blocks(lk):
        S = matmul(Qr, K[blk].T, counter, "flash_extract") / scale
        if causal:
            S[_future_mask(q_pos, pos[blk])] = -np.inf
        if tracker is not None:
            tracker.observe(S)
        P_B = np.exp(S - row_lse[:, None])
        outs.append(matmul(P_B.T, vr, counter, "flash_extract")[:, 0])
    return np.concatenate(outs)


def attention_rows(Q, K, rows, spec, positions=None, lse=None, causal=True, counter=None):
    """Normalized attention rows for the selected queries, assembled block by block."""
    Q, K = as_matrix(Q, "Q"), as_matrix(K, "K")
    rows = np.asarray(rows, dtype=np.int64)
    pos = _positions(positions, K.shape[0])
    row_lse = (row_stats(Q, K, spec, pos, rows, causal, counter).lse if lse is None
               else np.asarray(lse)[rows])
    Qr = Q[rows]
    q_pos = pos[rows]
    scale = np.sqrt(Q.shape[1])
    parts = []
    for blk in spec.blocks(K.shape[0]):
        S = matmul(Qr, K[blk].T, counter, "flash_extract") / scale
        if causal:
            S[_future_mask(q_pos, pos[blk])] = -np.inf
        parts.append(np.exp(S - row_lse[:, None]))
    return np.concatenate(parts, axis=1)


def topk_visual(scores, visual_span, k):
    """Indices of the ``k`` largest scores inside ``[start, stop)``.

    Ordered by descending score, ties by lower index.
    """
    scores = np.asarray(scores, dtype=np.float64)
    start, stop = visual_span
    if not (0 <= start <= stop <= scores.shape[0]):
        raise ValueError(f"visual span {visual_span} outside scores of length {scores.shape[0]}")
    n = stop - start
    if not (0 <= k <= n):
        raise ValueError(f"k={k} out of range [0, {n}]")
    idx = np.arange(start, stop)
    order = np.lexsort((idx, -scores[start:stop]))
    return [int(i) for i in idx[order[:k]]]
