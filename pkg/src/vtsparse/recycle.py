"""Recycle the best pruned tokens by k-NN density-peak clustering.

The recycled pool holds the top fraction of pruned tokens by significance.
Each pool token gets a local density from its k nearest neighbours and a
distance to the nearest denser token; the highest ``density * distance``
tokens become centers, every other token joins the center it is most
cosine-similar to, and each group collapses into the element-wise sum of
its members.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import PoolTooSmall
from .numerics import as_matrix, pairwise_sq_dists


def round_half_up(x):
    return int(math.floor(x + 0.5))


def recycled_count(n_pruned, tau):
    return round_half_up(tau * n_pruned)


def center_count(pool_size, theta):
    if pool_size < 1:
        return 0
    return min(pool_size, max(1, round_half_up(theta * pool_size)))


@dataclass
class ClusterModel:
    pool: np.ndarray
    densities: np.ndarray
    indicators: np.ndarray
    scores: np.ndarray
    centers: list
    assignment: np.ndarray

    @property
    def num_centers(self):
        return len(self.centers)


def recycle_pool(pruned_states, pruned_scores, tau, pruned_positions=None):
    """Select the pruned rows to recycle.

    Returns ``(rows, pool)`` where ``rows`` indexes into the pruned set in
    selection order (highest score first, ties by lower position).
    """
    states = as_matrix(pruned_states, "pruned_states")
    scores = np.asarray(pruned_scores, dtype=np.float64)
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau out of [0,1]: {tau}")
    n = scores.shape[0]
    pos = np.arange(n) if pruned_positions is None else np.asarray(pruned_positions)
    take = recycled_count(n, tau)
    order = np.lexsort((pos, -scores))[:take]
    return order, states[order]


def knn_indices(sq_dists, k):
    """Per row, the ``k`` nearest other rows (index tie-break)."""
    n = sq_dists.shape[0]
    idx = np.arange(n)
    out = np.empty((n, k), dtype=np.int64)
    for i in range(n):
        others = idx[idx != i]
        order = np.lexsort((others, sq_dists[i, others]))
        out[i] = others[order[:k]]
    return out


def clamp_k(k, pool_size):
    return max(1, min(int(k), pool_size - 1))


def local_density(pool, k, counter=None, sq_dists=None):
    """``rho_i = exp(-mean squared distance to the k nearest neighbours)``."""
    pool = as_matrix(pool, "pool")
    n, d = pool.shape
    if n < 2:
        raise PoolTooSmall(f"pool has {n} row(s); density needs at least 2")
    k = clamp_k(k, n)
    sq = pairwise_sq_dists(pool) if sq_dists is None else sq_dists
    nn = knn_indices(sq, k)
    means = sq[np.arange(n)[:, None], nn].sum(axis=1) / k
    # scalar libm exp: numpy's vectorized exp can differ by an ulp across CPUs
    rho = np.array([math.exp(-m) for m in means])
    if counter is not None:
        counter.add_stage("aggregation.knn_search", n * (n - 1) * 2 * d)
        counter.add_stage("aggregation.density", n * n * 2 * d)
    return rho


def distance_indicator(pool, rho, dists=None):
    """Distance to the nearest strictly denser token, else the farthest token."""
    pool = as_matrix(pool, "pool")
    rho = np.asarray(rho, dtype=np.float64)
    dist = np.sqrt(pairwise_sq_dists(pool)) if dists is None else dists
    n = pool.shape[0]
    delta = np.empty(n)
    for i in range(n):
        denser = rho > rho[i]
        delta[i] = dist[i, denser].min() if denser.any() else dist[i].max()
    return delta


def _unit_rows(x):
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)


def cluster(pool, rho, delta, theta, counter=None):
    pool = as_matrix(pool, "pool")
    n = pool.shape[0]
    if n == 0:
        raise ValueError("cannot cluster an empty pool")
    rho = np.asarray(rho, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    scores = rho * delta
    c = center_count(n, theta)
    idx = np.arange(n)
    centers = sorted(int(i) for i in np.lexsort((idx, -scores))[:c])
    unit = _unit_rows(pool)
    # cosine similarity of every token to every center; zero vectors score 0
    sims = unit @ unit[centers].T
    choice = np.argmax(sims, axis=1)  # first maximum -> lowest center index
    assignment = np.asarray(centers, dtype=np.int64)[choice]
    assignment[centers] = centers
    if counter is not None:
        d = pool.shape[1]
        counter.add_stage("aggregation.indicator", n * n * 2 * d)
        counter.add_stage("aggregation.center_select", n)
    return ClusterModel(pool, rho, delta, scores, centers, assignment)


def cluster_pool(pool, k, theta, counter=None):
    """Density, indicator and clustering for a pool; single rows are their own center."""
    pool = as_matrix(pool, "pool")
    n = pool.shape[0]
    if n == 1:
        one = np.ones(1)
        zero = np.zeros(1)
        if counter is not None:
            d = pool.shape[1]
            counter.add_stage("aggregation.density", 2 * d)
            counter.add_stage("aggregation.indicator", 2 * d)
            counter.add_stage("aggregation.center_select", 1)
        return ClusterModel(pool, one, zero, zero, [0], np.zeros(1, dtype=np.int64))
    sq = pairwise_sq_dists(pool)
    rho = local_density(pool, k, counter, sq_dists=sq)
    delta = distance_indicator(pool, rho, dists=np.sqrt(sq))
    return cluster(pool, rho, delta, theta, counter)


def reconstruct(model, counter=None):
    """Element-wise sum of each group; returns ``(tokens, center_rows)``.

    Group sums are correctly rounded (``math.fsum`` per column), so each
    token is the float nearest to the exact sum of its members.
    """
    pool = model.pool
    tokens = np.zeros((model.num_centers, pool.shape[1]))
    for slot, c in enumerate(model.centers):
        members = pool[np.flatnonzero(model.assignment == c)]
        tokens[slot] = [math.fsum(col) for col in members.T]
    if counter is not None:
        counter.add_stage("reconstruction", pool.shape[1] * (pool.shape[0] - model.num_centers))
    return tokens, list(model.centers)
