"""Execute a RunConfig and assemble the JSON run report."""
from __future__ import annotations

import hashlib
import json
import os
import statistics
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .. import cost_model
from ..errors import ShapeError
from ..numerics import OpCounter
from ..sparsify import Sparsifier, text_positions_survive
from ..toy_vlm import TokenSequence, build_model, prefill
from .config import FileWorkload
from .embeddings_io import load_embeddings

REPORT_FORMAT = "vtsparse-report/1"
TIMING_KEY = "timing"

CONVENTIONS = {
    "flops_unit": "instrumented counts are multiply-adds (one unit per multiply-accumulate)",
    "prune_tie_break": "equal significance: lower original position pruned first",
    "recycle_tie_break": "equal significance: lower original position recycled first",
    "center_tie_break": "equal density*indicator score: lower pool index first",
    "assignment_tie_break": "equal cosine similarity: lower center index",
    "rounding": "deletion count floored; recycled and center counts rounded half up",
    "rank": "singular values above rank_rel_tol * sigma_max",
    "rater_softmax": "softmax axis given by sparsify.rater_softmax_axis",
    "head_reduction": "attention reduced across heads by sparsify.head_reduce before slicing",
    "cache_bytes": "2 * sum over layers of post-hook length * D * bytes_per_element",
    "timing": "monotonic clock around prefill; median of repetitions; first dropped when repetitions >= 3",
}


def make_workload(config):
    """TokenSequences for the configured workload, deterministic in its seed."""
    wl = config.workload
    d = config.model.hidden_dim
    vocab = config.model.vocab_size
    if isinstance(wl, FileWorkload):
        visuals = load_embeddings(wl.path)
        for i, z in enumerate(visuals):
            if z.shape[1] != d:
                raise ShapeError(f"embedding matrix {i} has D={z.shape[1]} but model D={d}", z.shape)
    else:
        rng = np.random.default_rng(wl.seed)
        visuals = [rng.normal(size=(wl.visual_len, d)) for _ in range(wl.num_sequences)]
    rng = np.random.default_rng([wl.seed, 1])
    seqs = []
    for z in visuals:
        pre = rng.integers(0, vocab, wl.pre_text_len)
        question = rng.integers(0, vocab, wl.question_len)
        seqs.append(TokenSequence(pre, z, question))
    return seqs


def _median_time(times):
    if len(times) >= 3:
        times = times[1:]
    return statistics.median(times)


def _ints(a):
    return [int(x) for x in np.asarray(a).ravel()]


def plan_summary(plan):
    return {
        "layer": plan.layer_index,
        "skipped": plan.skipped,
        "rater_rows": plan.rater_count,
        "visual_in": plan.visual_in,
        "rank": plan.rank,
        "adaptive_N": plan.adaptive_count,
        "N": plan.deletion_count,
        "clamped": plan.clamped,
        "recycled": plan.recycled_count,
        "C": plan.reconstructed_count,
        "visual_out": plan.visual_out,
        "pruned": _ints(plan.pruned),
        "retained": _ints(plan.retained),
        "reconstructed": _ints(plan.reconstructed),
    }


def run_sequence(model, seq, config, index):
    hook_cfg = config.sparsify if config.sparsify_enabled else None
    times = []
    trace = None
    for _ in range(config.repetitions):
        hook = Sparsifier(hook_cfg) if hook_cfg is not None else None
        t = prefill(model, seq, hook, OpCounter(), config.backend, record_views=False)
        times.append(t.wall_time)
        trace = trace or t
    out = {
        "index": index,
        "initial_tokens": seq.length,
        "visual_span": list(seq.visual_span),
        "final_tokens": int(len(trace.position_ids)),
        "final_visual": trace.final_visual_count,
        "text_survived": text_positions_survive(trace, seq),
        "raters": list(trace.raters.selected) if trace.raters is not None else [],
        "layer_lengths": list(trace.lengths_out),
        "layers": [plan_summary(p) for p in trace.plans if p is not None],
        "counters": trace.counter.snapshot(),
    }
    ledger = cost_model.build_ledger(trace)
    out["ledger"] = ledger.to_dict()
    out["cache"] = cost_model.cache_estimate(trace)
    timing = {"prefill_seconds": _median_time(times), "repetitions": config.repetitions}
    if config.baseline:
        base_times = []
        base = None
        for _ in range(config.repetitions if config.measure_time else 1):
            b = prefill(model, seq, None, OpCounter(), config.backend, record_views=False)
            base_times.append(b.wall_time)
            base = base or b
        out["reconcile"] = cost_model.reconcile(trace, base)
        timing["baseline_seconds"] = _median_time(base_times)
        timing["speedup"] = timing["baseline_seconds"] / timing["prefill_seconds"]
    else:
        out["reconcile"] = None
    out[TIMING_KEY] = timing if config.measure_time else None
    return out


def strip_timing(obj):
    if isinstance(obj, dict):
        return {k: strip_timing(v) for k, v in obj.items() if k != TIMING_KEY}
    if isinstance(obj, list):
        return [strip_timing(v) for v in obj]
    return obj


DECISION_KEYS = ("index", "initial_tokens", "visual_span", "final_tokens", "final_visual", "raters", "layers")


def decision_checksum(sequences):
    """SHA-256 over every sparsification decision; independent of backend and timing."""
    body = [{k: s[k] for k in DECISION_KEYS} for s in sequences]
    canonical = json.dumps(body, separators=(",", ":"), allow_nan=False)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _mean(values):
    values = list(values)
    return sum(values) / len(values) if values else None


def run(config):
    """Run every workload sequence and return the report dictionary."""
    model = build_model(config.model)
    seqs = make_workload(config)
    workers = config.workers or os.cpu_count() or 1
    if workers > 1 and len(seqs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda a: run_sequence(model, a[1], config, a[0]), enumerate(seqs)))
    else:
        results = [run_sequence(model, s, config, i) for i, s in enumerate(seqs)]

    aggregate = {
        "sequences": len(results),
        "mean_final_visual": _mean(r["final_visual"] for r in results),
        "mean_savings_exact": _mean(r["ledger"]["totals"]["net_savings_exact"] for r in results),
        "mean_savings_paper_approx": _mean(r["ledger"]["totals"]["net_savings_paper_approx"] for r in results),
        "mean_cache_ratio": _mean(r["cache"]["ratio"] for r in results),
        "checksum": decision_checksum(results),
    }
    if config.measure_time:
        aggregate[TIMING_KEY] = {
            "median_prefill_seconds": statistics.median(r[TIMING_KEY]["prefill_seconds"] for r in results),
        }
        if config.baseline:
            aggregate[TIMING_KEY]["median_speedup"] = statistics.median(
                r[TIMING_KEY]["speedup"] for r in results
            )
    echo = dict(config.resolved)
    # where the report goes does not affect its content
    echo.pop("report_path", None)
    echo["backend"] = config.backend_name
    report = {
        "format": REPORT_FORMAT,
        "status": "ok",
        "config": echo,
        "conventions": CONVENTIONS,
        "model_checksum": model.checksum(),
        "sequences": results,
        "aggregate": aggregate,
    }
    return report


def dump_report(report, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, allow_nan=False)
        fh.write("\n")


def error_report(exc, config_echo=None):
    return {
        "format": REPORT_FORMAT,
        "status": "error",
        "config": config_echo,
        "error": {"type": type(exc).__name__, "message": str(exc)},
    }
