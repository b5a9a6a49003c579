"""Per-layer significance scoring, rank-adaptive deletion and pruning.

:class:`Sparsifier` is the layer hook driven by :func:`vtsparse.toy_vlm.prefill`.
After each active layer it slices the rater-by-visual block of the attention
map, averages it into a significance vector, derives the deletion count from
the rank deficit of that block, prunes the least significant visual tokens
and folds the best of them back in as reconstructed tokens.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import flash_sim, recycle
from .errors import ConfigError, VTSparseError
from .numerics import DEFAULT_RANK_REL_TOL, as_matrix, matrix_rank
from .rater_select import TEXT_AXIS, VISUAL_AXIS, rater_scores, select_raters
from .toy_vlm import QUESTION, VISUAL

SELECTED_RATERS = "selected"
ALL_TEXT = "all_text"


@dataclass(frozen=True)
class SparsifyConfig:
    lam: float = 1.0
    tau: float = 0.25
    theta: float = 0.25
    knn: int = 5
    rank_rel_tol: float = DEFAULT_RANK_REL_TOL
    active_layers: tuple | None = None
    budget: int | None = None
    rater_rows: str = SELECTED_RATERS
    rater_softmax_axis: str = TEXT_AXIS
    head_reduce: str = "mean"

    def __post_init__(self):
        def real(name):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
                raise ConfigError(f"must be a finite number, got {v!r}", name)
            return float(v)

        if real("lam") < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}", "lambda")
        if not 0.0 <= real("tau") <= 1.0:
            raise ConfigError(f"tau out of [0,1]: {self.tau}", "tau")
        if not 0.0 < real("theta") <= 1.0:
            raise ConfigError(f"theta out of (0,1]: {self.theta}", "theta")
        if real("rank_rel_tol") <= 0:
            raise ConfigError(f"rank_rel_tol must be > 0, got {self.rank_rel_tol}", "rank_rel_tol")
        if isinstance(self.knn, bool) or not isinstance(self.knn, int) or self.knn < 1:
            raise ConfigError(f"knn must be an integer >= 1, got {self.knn!r}", "knn")
        if self.budget is not None and (
            isinstance(self.budget, bool) or not isinstance(self.budget, int) or self.budget < 1
        ):
            raise ConfigError(f"budget must be an integer >= 1, got {self.budget!r}", "budget")
        if self.active_layers is not None:
            layers = tuple(self.active_layers)
            if any(isinstance(i, bool) or not isinstance(i, int) or i < 0 for i in layers):
                raise ConfigError("active layers must be non-negative integers", "active_layers")
            object.__setattr__(self, "active_layers", tuple(sorted(set(layers))))
        if self.rater_rows not in (SELECTED_RATERS, ALL_TEXT):
            raise ConfigError(f"unknown value {self.rater_rows!r}", "rater_rows")
        if self.rater_softmax_axis not in (TEXT_AXIS, VISUAL_AXIS):
            raise ConfigError(f"unknown value {self.rater_softmax_axis!r}", "rater_softmax_axis")
        if self.head_reduce not in ("mean", "max"):
            raise ConfigError(f"unknown value {self.head_reduce!r}", "head_reduce")

    def resolve_active(self, num_layers):
        if self.active_layers is None:
            return tuple(range(1, num_layers))
        return tuple(i for i in self.active_layers if i < num_layers)


@dataclass
class PriorityMatrix:
    P: np.ndarray
    rater_rows: np.ndarray
    visual_cols: np.ndarray


@dataclass
class SparsifyPlan:
    layer_index: int
    significance: np.ndarray
    visual_positions: np.ndarray
    rater_count: int
    rank: int
    adaptive_count: int
    deletion_count: int
    pruned: np.ndarray
    retained: np.ndarray
    recycled: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    reconstructed: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    cluster: object = None
    reconstructed_tokens: np.ndarray | None = None

    @property
    def skipped(self):
        return self.deletion_count == 0

    @property
    def clamped(self):
        return self.deletion_count != self.adaptive_count

    @property
    def visual_in(self):
        return len(self.visual_positions)

    @property
    def reconstructed_count(self):
        return len(self.reconstructed)

    @property
    def recycled_count(self):
        return len(self.recycled)

    @property
    def visual_out(self):
        return len(self.retained) + self.reconstructed_count


def _rows_for(position_ids, wanted):
    position_ids = np.asarray(position_ids)
    wanted = np.asarray(wanted)
    rows = np.searchsorted(position_ids, wanted)
    ok = (rows < len(position_ids)) & (position_ids[np.minimum(rows, len(position_ids) - 1)] == wanted)
    if not ok.all():
        raise VTSparseError(f"positions {wanted[~ok].tolist()} not present in the current sequence")
    return rows


def slice_priority(attn, rater_positions, visual_positions, head_reduce="mean"):
    """Rater-row by visual-column block of the head-reduced attention map."""
    if len(rater_positions) == 0:
        raise VTSparseError("no surviving raters to slice")
    rows = _rows_for(attn.position_ids, rater_positions)
    cols = _rows_for(attn.position_ids, visual_positions)
    if head_reduce == "mean":
        A = attn.logits
    elif head_reduce == "max":
        if attn.head_probs is None:
            raise VTSparseError("max head reduction needs per-head attention")
        A = attn.head_probs.max(axis=0)
    else:
        raise ValueError(f"unknown head reduction {head_reduce!r}")
    return PriorityMatrix(A[np.ix_(rows, cols)], np.asarray(rater_positions), np.asarray(visual_positions))


def significance(pm, counter=None):
    P = pm.P if isinstance(pm, PriorityMatrix) else as_matrix(pm, "P")
    if P.size == 0:
        raise ValueError("priority matrix is empty")
    if counter is not None:
        counter.add_stage("significance", P.shape[0] * P.shape[1])
    return P.mean(axis=0)


def adaptive_deletions(visual_count, rank, lam):
    """``floor(lam * (L_v - rank))`` clamped so one visual token survives."""
    n = math.floor(lam * (visual_count - rank))
    return int(min(max(n, 0), visual_count - 1))


def deletion_count(pm, lam, rank_tol=DEFAULT_RANK_REL_TOL, counter=None):
    P = pm.P if isinstance(pm, PriorityMatrix) else as_matrix(pm, "P")
    rank = matrix_rank(P, rank_tol)
    if counter is not None:
        counter.add_stage("rank", P.shape[0] * P.shape[1] * min(P.shape))
    return adaptive_deletions(P.shape[1], rank, lam)


def prune(p, n, positions=None):
    """Drop the ``n`` smallest scores (ties: lower position first).

    Returns ``(pruned, retained)`` as ascending index arrays into ``p``.
    """
    p = np.asarray(p, dtype=np.float64)
    if not 0 <= n < len(p):
        raise ValueError(f"deletion count {n} out of range for {len(p)} tokens")
    pos = np.arange(len(p)) if positions is None else np.asarray(positions)
    order = np.lexsort((pos, p))
    pruned = np.sort(order[:n])
    retained = np.sort(order[n:])
    return pruned, retained


def net_removal(n, tau, theta):
    """Visual tokens removed by pruning ``n`` once recycling adds its centers back."""
    return n - recycle.center_count(recycle.recycled_count(n, tau), theta)


def budget_schedule(config, current_visual_count, layers_remaining, adaptive_n):
    """Clamp the adaptive deletion count so the final visual count hits the budget.

    Intermediate active layers never let the visual count (retained plus
    reconstructed) fall below the budget; the last active layer removes
    exactly the remainder.
    """
    if config.budget is None:
        return adaptive_n
    target = current_visual_count - config.budget
    if target < 0:
        raise ConfigError(
            f"budget {config.budget} exceeds current visual count {current_visual_count}", "budget"
        )
    limit = current_visual_count - 1
    if layers_remaining <= 1:
        if target == 0:
            return 0
        for n in range(target, limit + 1):
            if net_removal(n, config.tau, config.theta) == target:
                return n
        raise ConfigError(
            f"budget {config.budget} unreachable from {current_visual_count} visual tokens "
            f"with tau={config.tau}, theta={config.theta}",
            "budget",
        )
    n = min(adaptive_n, limit)
    while n > 0 and net_removal(n, config.tau, config.theta) > target:
        n -= 1
    return n


class Sparsifier:
    """Layer hook implementing rater-guided visual token sparsification."""

    def __init__(self, config=None, keep_details=False):
        self.config = config or SparsifyConfig()
        self.keep_details = keep_details
        self.raters = None
        self.rater_positions = None
        self.active = ()

    def begin(self, model, seq, embeddings, counter=None):
        cfg = self.config
        if cfg.budget is not None and cfg.budget > seq.visual_len:
            raise ConfigError(
                f"budget {cfg.budget} exceeds initial visual count {seq.visual_len}", "budget"
            )
        start, stop = seq.visual_span
        H_v = embeddings[start:stop]
        H_q = embeddings[stop:]
        r = rater_scores(H_v, H_q, counter, cfg.rater_softmax_axis)
        self.raters = select_raters(r)
        q_pos = seq.question_positions
        if cfg.rater_rows == SELECTED_RATERS:
            self.rater_positions = q_pos[list(self.raters.selected)]
        else:
            self.rater_positions = q_pos
        self.active = cfg.resolve_active(model.config.num_layers)
        return self.raters

    def _score(self, view, visual_pos, counter):
        cfg = self.config
        if view.logits is not None or view.head_probs is not None:
            pm = slice_priority(view, self.rater_positions, visual_pos, cfg.head_reduce)
            return pm.P, significance(pm, counter)
        if cfg.head_reduce != "mean":
            raise ConfigError("blockwise backend supports only head_reduce='mean'", "head_reduce")
        rows = _rows_for(view.position_ids, self.rater_positions)
        cols = _rows_for(view.position_ids, visual_pos)
        spec = view.block_spec
        heads = view.queries.shape[0]
        p = np.zeros(len(cols))
        P = np.zeros((len(rows), len(cols)))
        for h in range(heads):
            q, k, lse = view.queries[h], view.keys[h], view.row_lse[h]
            scores = flash_sim.rater_mean_scores(
                q, k, rows, spec, view.position_ids, counter, lse=lse
            )
            p += scores[cols]
            P += flash_sim.attention_rows(q, k, rows, spec, view.position_ids, lse=lse, counter=counter)[:, cols]
        if counter is not None:
            counter.add_stage("significance", P.shape[0] * P.shape[1])
        return P / heads, p / heads

    def after_layer(self, model, layer_index, H, positions, kinds, view, counter=None):
        if layer_index not in self.active:
            return H, positions, kinds, None
        cfg = self.config
        visual_rows = np.flatnonzero(kinds == VISUAL)
        visual_pos = positions[visual_rows]
        P, p = self._score(view, visual_pos, counter)
        rank = matrix_rank(P, cfg.rank_rel_tol)
        if counter is not None:
            counter.add_stage("rank", P.shape[0] * P.shape[1] * min(P.shape))
        adaptive = adaptive_deletions(len(visual_rows), rank, cfg.lam)
        remaining = sum(1 for i in self.active if i >= layer_index)
        n = budget_schedule(cfg, len(visual_rows), remaining, adaptive)
        plan = SparsifyPlan(
            layer_index=layer_index,
            significance=p,
            visual_positions=visual_pos,
            rater_count=P.shape[0],
            rank=rank,
            adaptive_count=adaptive,
            deletion_count=n,
            pruned=np.zeros(0, dtype=np.int64),
            retained=visual_pos.copy(),
        )
        if n == 0:
            return H, positions, kinds, plan

        pruned, retained = prune(p, n, visual_pos)
        plan.pruned = visual_pos[pruned]
        plan.retained = visual_pos[retained]
        keep = np.ones(len(positions), dtype=bool)
        keep[visual_rows[pruned]] = False
        new_H = [H[keep]]
        new_pos = [positions[keep]]
        new_kinds = [kinds[keep]]

        if cfg.tau > 0:
            pruned_rows = visual_rows[pruned]
            sel, pool = recycle.recycle_pool(H[pruned_rows], p[pruned], cfg.tau, positions[pruned_rows])
            if len(sel):
                model_c = recycle.cluster_pool(pool, cfg.knn, cfg.theta, counter)
                tokens, centers = recycle.reconstruct(model_c, counter)
                plan.recycled = np.sort(positions[pruned_rows[sel]])
                center_pos = positions[pruned_rows[sel[centers]]]
                plan.reconstructed = center_pos
                if self.keep_details:
                    plan.cluster = model_c
                    plan.reconstructed_tokens = tokens
                new_H.append(tokens)
                new_pos.append(center_pos)
                new_kinds.append(np.full(len(centers), VISUAL, dtype=kinds.dtype))

        H2 = np.concatenate(new_H)
        pos2 = np.concatenate(new_pos)
        kinds2 = np.concatenate(new_kinds)
        order = np.argsort(pos2, kind="stable")
        return H2[order], pos2[order], kinds2[order], plan


def text_positions_survive(trace, seq):
    """True when every pre-text and question position is still present."""
    text = np.concatenate([np.arange(len(seq.pre_text_ids)), seq.question_positions])
    return bool(np.isin(text, trace.position_ids).all()) and bool(
        np.count_nonzero(trace.kinds == QUESTION) == seq.text_len
    )
