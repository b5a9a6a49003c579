"""Analytic cost accounting for a sparsified prefill, checked against counters.

Units: layer reductions are multiply-adds of the attention and FFN blocks,
matching the instrumented ``OpCounter``. Overhead stages use their closed
forms exactly as written (rater selection counts two per multiply-add of
its matmul, significance one per averaged element).

A layer's reduction uses the token deficit it sees relative to the
unpruned run: ``N_i`` and ``C_i`` are the pruned and reconstructed counts
accumulated over the sparsification events of all earlier layers.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

from .errors import UnknownStage
from .toy_vlm import LAYER_TAGS

AGGREGATION_PARTS = (
    "aggregation.knn_search",
    "aggregation.density",
    "aggregation.indicator",
    "aggregation.center_select",
)

NOTES = (
    "center-selection term of aggregation counted as L_r (recycled tokens); "
    "one reading of the itemized total uses the full length L instead",
    "rank overhead: exact ledger uses L_t*L_v*min(L_t,L_v), approximation uses L_t^2*L_v",
)


def _need(params, *names):
    missing = [n for n in names if n not in params]
    if missing:
        raise TypeError(f"missing stage parameter(s): {', '.join(missing)}")
    vals = [int(params[n]) for n in names]
    if any(v < 0 for v in vals):
        raise ValueError(f"stage parameters must be non-negative: {dict(zip(names, vals))}")
    return vals


def stage_cost(stage, **params):
    """Closed-form cost of one named sparsification stage."""
    if stage == "significance":
        lt, lv = _need(params, "L_t", "L_v")
        return lt * lv
    if stage == "rater_selection":
        lt, lv, d = _need(params, "L_t", "L_v", "D")
        return lt * lv * 2 * d
    if stage == "rank":
        lt, lv = _need(params, "L_t", "L_v")
        return lt * lv * min(lt, lv)
    if stage == "aggregation.knn_search":
        lr, d = _need(params, "L_r", "D")
        return lr * (lr - 1) * 2 * d
    if stage in ("aggregation.density", "aggregation.indicator"):
        lr, d = _need(params, "L_r", "D")
        return lr * lr * 2 * d
    if stage == "aggregation.center_select":
        (lr,) = _need(params, "L_r")
        return lr
    if stage == "aggregation":
        return sum(stage_cost(p, **params) for p in AGGREGATION_PARTS)
    if stage == "reconstruction":
        d, lr, c = _need(params, "D", "L_r", "C")
        return d * (lr - c)
    raise UnknownStage(f"unknown stage id {stage!r}")


def layer_reduction(n, c, d):
    """Multiply-adds saved in one layer by carrying ``n - c`` fewer tokens."""
    if n < c:
        raise ValueError(f"pruned count {n} smaller than reconstructed count {c}")
    m = n - c
    return 6 * m * d * d + 2 * m * m * d


@dataclass
class LayerCost:
    layer: int
    pruned_total: int
    reconstructed_total: int
    rater_rows: int = 0
    visual_in: int = 0
    deleted: int = 0
    recycled: int = 0
    reconstructed: int = 0
    significance: int = 0
    rank: int = 0
    aggregation: int = 0
    reconstruction: int = 0
    reduction_part: int = 0
    overhead_part: int = 0
    approx_term: int = 0

    @property
    def net(self):
        return self.reduction_part - self.overhead_part


@dataclass
class FlopsLedger:
    hidden_dim: int
    question_len: int
    initial_visual: int
    rater_selection: int
    layers: list = field(default_factory=list)

    @property
    def reduction_total(self):
        return sum(l.reduction_part for l in self.layers)

    @property
    def overhead_total(self):
        return self.rater_selection + sum(l.overhead_part for l in self.layers)

    @property
    def net_savings_exact(self):
        return self.reduction_total - self.overhead_total

    @property
    def net_savings_paper_approx(self):
        base = -2 * self.question_len * self.initial_visual * self.hidden_dim if self.rater_selection else 0
        return base + sum(l.approx_term for l in self.layers)

    def stage_totals(self):
        return {
            "rater_selection": self.rater_selection,
            "significance": sum(l.significance for l in self.layers),
            "rank": sum(l.rank for l in self.layers),
            "aggregation": sum(l.aggregation for l in self.layers),
            "reconstruction": sum(l.reconstruction for l in self.layers),
        }

    def to_dict(self):
        return {
            "hidden_dim": self.hidden_dim,
            "question_len": self.question_len,
            "initial_visual": self.initial_visual,
            "units": {
                "reduction": "multiply-adds",
                "overhead": "closed-form stage costs",
            },
            "notes": list(NOTES),
            "layers": [dict(asdict(l), net=l.net) for l in self.layers],
            "stage_totals": self.stage_totals(),
            "totals": {
                "reduction_part": self.reduction_total,
                "overhead_part": self.overhead_total,
                "net_savings_exact": self.net_savings_exact,
                "net_savings_paper_approx": self.net_savings_paper_approx,
            },
        }


def build_ledger(trace):
    d = trace.hidden_dim
    rater_sel = 0
    if trace.raters is not None:
        rater_sel = stage_cost("rater_selection", L_t=trace.question_len, L_v=trace.initial_visual, D=d)
    ledger = FlopsLedger(d, trace.question_len, trace.initial_visual, rater_sel)
    n_cum = c_cum = 0
    for i, plan in enumerate(trace.plans):
        lc = LayerCost(layer=i, pruned_total=n_cum, reconstructed_total=c_cum)
        lc.reduction_part = layer_reduction(n_cum, c_cum, d)
        lc.approx_term = d * n_cum * (6 * d + 2 * n_cum)
        if plan is not None:
            lt, lv = plan.rater_count, plan.visual_in
            lc.rater_rows, lc.visual_in = lt, lv
            lc.deleted = plan.deletion_count
            lc.recycled = plan.recycled_count
            lc.reconstructed = plan.reconstructed_count
            lc.significance = stage_cost("significance", L_t=lt, L_v=lv)
            lc.rank = stage_cost("rank", L_t=lt, L_v=lv)
            if lc.recycled:
                lc.aggregation = stage_cost("aggregation", L_r=lc.recycled, D=d)
                lc.reconstruction = stage_cost("reconstruction", D=d, L_r=lc.recycled, C=lc.reconstructed)
            lc.overhead_part = lc.significance + lc.rank + lc.aggregation + lc.reconstruction
            lc.approx_term -= lt * lt * lv
            n_cum += lc.deleted
            c_cum += lc.reconstructed
        ledger.layers.append(lc)
    return ledger


def net_savings(trace):
    """``(exact, paper_approx)`` net FLOPs savings of a completed run."""
    ledger = build_ledger(trace)
    return ledger.net_savings_exact, ledger.net_savings_paper_approx


def cache_estimate(trace, bytes_per_element=2):
    """KV-cache byte proxy: keys and values for every token a layer keeps.

    Tokens pruned by a layer's hook are dropped from that layer's cache too,
    so each layer holds its post-hook length.
    """
    d = trace.hidden_dim
    baseline = 2 * sum(trace.lengths_in[0] for _ in trace.lengths_in) * d * bytes_per_element
    pruned = 2 * sum(trace.lengths_out) * d * bytes_per_element
    return {
        "bytes_per_element": bytes_per_element,
        "baseline_bytes": baseline,
        "pruned_bytes": pruned,
        "ratio": pruned / baseline if baseline else 1.0,
    }


def _layer_total(counts):
    return sum(counts.get(t, 0) for t in LAYER_TAGS)


def reconcile(trace, baseline, tolerance=0.10, approx_tolerance=0.25):
    """Compare instrumented savings against the analytic ledger.

    ``baseline`` is the trace of the same sequence run without sparsification.
    """
    ledger = build_ledger(trace)
    layers = []
    instr_total = 0
    for i, lc in enumerate(ledger.layers):
        instr = _layer_total(baseline.layer_multiply_adds[i]) - _layer_total(trace.layer_multiply_adds[i])
        instr_total += instr
        layers.append({"layer": i, "instrumented": instr, "formula": lc.reduction_part,
                       "delta": instr - lc.reduction_part})
    formula_total = ledger.reduction_total
    if formula_total:
        rel = abs(instr_total - formula_total) / formula_total
    else:
        rel = 0.0 if instr_total == 0 else None
    exact = ledger.net_savings_exact
    approx = ledger.net_savings_paper_approx
    approx_rel = abs(approx - exact) / abs(exact) if exact else (0.0 if approx == 0 else None)

    stages = ledger.stage_totals()
    sf = trace.counter.stage_flops
    instrumented_stages = {
        "rater_selection": sf.get("rater_selection", 0),
        "significance": sf.get("significance", 0),
        "rank": sf.get("rank", 0),
        "aggregation": sum(sf.get(p, 0) for p in AGGREGATION_PARTS),
        "reconstruction": sf.get("reconstruction", 0),
    }
    without = sum(_layer_total(c) for c in baseline.layer_multiply_adds)
    with_ = sum(_layer_total(c) for c in trace.layer_multiply_adds)
    return {
        "instrumented_without_pruning": without,
        "instrumented_with_pruning": with_,
        "instrumented_reduction": instr_total,
        "formula_reduction": formula_total,
        "relative_discrepancy": rel,
        "within_tolerance": rel is not None and rel <= tolerance,
        "tolerance": tolerance,
        "paper_approx_relative_error": approx_rel,
        "paper_approx_within_tolerance": approx_rel is not None and approx_rel <= approx_tolerance,
        "approx_tolerance": approx_tolerance,
        "stages": {k: {"analytic": stages[k], "instrumented": instrumented_stages[k]} for k in stages},
        "layers": layers,
    }
