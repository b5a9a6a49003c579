"""Pick the question tokens that will rate visual tokens.

Each visual embedding spreads unit mass over the question tokens (softmax of
the visual-text affinities along the text axis); averaging over visual rows
gives a score per question token, and every token scoring at least the mean
becomes a rater.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .numerics import as_matrix, matmul, stable_softmax_rows

TEXT_AXIS = "text"
VISUAL_AXIS = "visual"


@dataclass(frozen=True)
class RaterSet:
    scores: np.ndarray
    threshold: float
    selected: tuple

    def __len__(self):
        return len(self.selected)


def rater_scores(H_v, H_q, counter=None, axis=TEXT_AXIS):
    H_v = as_matrix(H_v, "H_v")
    H_q = as_matrix(H_q, "H_q")
    if H_v.shape[0] == 0 or H_q.shape[0] == 0 or H_v.shape[1] != H_q.shape[1]:
        raise ShapeError("rater_scores needs non-empty matrices of equal width", H_v.shape, H_q.shape)
    before = counter.multiply_adds if counter is not None else 0
    affinity = matmul(H_v, H_q.T, counter, "rater_selection")
    if counter is not None:
        # FLOP convention: one multiply-add is two FLOPs
        counter.add_stage("rater_selection", 2 * (counter.multiply_adds - before))
    if axis == TEXT_AXIS:
        s = stable_softmax_rows(affinity, counter)
    elif axis == VISUAL_AXIS:
        s = stable_softmax_rows(affinity.T, counter).T
    else:
        raise ValueError(f"unknown softmax axis {axis!r}")
    return s.mean(axis=0)


def select_raters(r):
    r = np.asarray(r, dtype=np.float64).ravel()
    if r.size == 0:
        raise ValueError("rater scores are empty")
    m = float(r.mean())
    selected = np.flatnonzero(r >= m)
    if selected.size == 0:
        # r.mean() can round above r.max() when all entries are equal
        selected = np.flatnonzero(r == r.max())
    return RaterSet(scores=r, threshold=m, selected=tuple(int(i) for i in selected))
