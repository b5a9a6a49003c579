"""Dense float64 kernels with an embedded operation counter.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64. Every
kernel that performs a matrix product takes an optional :class:`OpCounter`
and charges it ``rows * cols * inner`` multiply-adds, one unit per
multiply-accumulate.
"""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .errors import RankError, ShapeError

DEFAULT_RANK_REL_TOL = 1e-10


@dataclass
class OpCounter:
    """Tally of work performed during one pipeline run.

    ``multiply_adds`` counts instrumented matmul work. ``by_tag`` splits the
    same total by the tag passed to :func:`matmul`. ``stage_flops`` holds
    per-stage FLOP tallies charged by the sparsification stages, using the
    FLOP conventions of the analytic cost model.
    """

    multiply_adds: int = 0
    exps: int = 0
    comparisons: int = 0
    by_tag: dict = field(default_factory=lambda: defaultdict(int))
    stage_flops: dict = field(default_factory=lambda: defaultdict(int))

    def add_multiply_adds(self, n, tag=None):
        n = int(n)
        self.multiply_adds += n
        if tag is not None:
            self.by_tag[tag] += n

    def add_stage(self, stage, flops):
        self.stage_flops[stage] += int(flops)

    def reset(self):
        self.multiply_adds = 0
        self.exps = 0
        self.comparisons = 0
        self.by_tag.clear()
        self.stage_flops.clear()

    def snapshot(self):
        return {
            "multiply_adds": self.multiply_adds,
            "exps": self.exps,
            "comparisons": self.comparisons,
            "by_tag": dict(sorted(self.by_tag.items())),
            "stage_flops": dict(sorted(self.stage_flops.items())),
        }


def as_matrix(x, name="matrix"):
    m = np.asarray(x, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D", m.shape)
    return m


def matmul(a, b, counter=None, tag=None):
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError("matmul inner dimensions differ", a.shape, b.shape)
    if counter is not None:
        counter.add_multiply_adds(a.shape[0] * b.shape[1] * a.shape[1], tag)
    return a @ b


def stable_softmax_rows(m, counter=None):
    """Row softmax via subtract-row-max, exponentiate, normalize.

    Entries equal to ``-inf`` act as masked and receive probability 0; each
    row needs at least one finite entry.
    """
    m = as_matrix(m, "m")
    if m.shape[1] < 1:
        raise ShapeError("softmax needs at least one column", m.shape)
    shifted = m - m.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    if counter is not None:
        counter.exps += e.size
        counter.comparisons += m.size
    return e / e.sum(axis=1, keepdims=True)


def _rank_by_elimination(m, rel_tol):
    # Gaussian elimination with complete pivoting; a pivot counts while it
    # exceeds rel_tol times the first (largest) pivot.
    a = np.array(m, dtype=np.float64)
    rows, cols = a.shape
    first = np.abs(a).max() if a.size else 0.0
    if first == 0.0:
        return 0
    rank = 0
    for r in range(min(rows, cols)):
        sub = np.abs(a[r:, r:])
        i, j = np.unravel_index(np.argmax(sub), sub.shape)
        pivot = sub[i, j]
        if pivot <= rel_tol * first:
            break
        i += r
        j += r
        a[[r, i]] = a[[i, r]]
        a[:, [r, j]] = a[:, [j, r]]
        a[r + 1:, r:] -= np.outer(a[r + 1:, r] / a[r, r], a[r, r:])
        rank += 1
    return rank


def matrix_rank(m, rel_tol=DEFAULT_RANK_REL_TOL, fallback=True):
    """Number of singular values above ``rel_tol * sigma_max``.

    If the SVD fails to converge, the rank is recomputed by Gaussian
    elimination with complete pivoting at the same relative tolerance, or
    :class:`RankError` is raised when ``fallback`` is False.
    """
    m = as_matrix(m, "m")
    if m.size == 0:
        raise ShapeError("rank of an empty matrix", m.shape)
    if rel_tol <= 0:
        raise ValueError("rel_tol must be positive")
    try:
        s = np.linalg.svd(m, compute_uv=False)
    except np.linalg.LinAlgError as exc:
        if not fallback:
            raise RankError(f"SVD did not converge for shape {m.shape}") from exc
        return _rank_by_elimination(m, rel_tol)
    if s[0] == 0.0:
        return 0
    return int(np.count_nonzero(s > rel_tol * s[0]))


def pairwise_sq_dists(points):
    """Symmetric matrix of squared Euclidean distances between rows."""
    x = as_matrix(points, "points")
    diff = x[:, None, :] - x[None, :, :]
    d = np.einsum("ijk,ijk->ij", diff, diff)
    # exact symmetry and zero diagonal regardless of summation order
    d = np.minimum(d, d.T)
    np.fill_diagonal(d, 0.0)
    return d


def cosine_similarity(a, b):
    """Cosine of the angle between ``a`` and ``b``; 0 if either is a zero vector."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError("cosine_similarity needs equal lengths", a.shape, b.shape)
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))
