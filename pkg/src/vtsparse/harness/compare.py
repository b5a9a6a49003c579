"""Diff two run reports produced from the same workload."""
from __future__ import annotations

from ..errors import WorkloadMismatchError
from .runner import TIMING_KEY


def jaccard(a, b):
    a, b = set(a), set(b)
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def _visual_sets(seq, num_layers):
    """Visual positions present after every layer, carrying sets over inactive layers."""
    start, stop = seq["visual_span"]
    current = list(range(start, stop))
    plans = {p["layer"]: p for p in seq["layers"]}
    out = []
    for layer in range(num_layers):
        p = plans.get(layer)
        if p is not None and not p["skipped"]:
            current = sorted(p["retained"] + p["reconstructed"])
        out.append((current, p))
    return out


def compare(report_a, report_b):
    wa = report_a.get("config", {}).get("workload")
    wb = report_b.get("config", {}).get("workload")
    if wa != wb or len(report_a["sequences"]) != len(report_b["sequences"]):
        raise WorkloadMismatchError(f"reports use different workloads: {wa!r} vs {wb!r}")
    num_layers = max(report_a["config"]["model"]["num_layers"], report_b["config"]["model"]["num_layers"])
    sequences = []
    changed_layers = set()
    for sa, sb in zip(report_a["sequences"], report_b["sequences"]):
        layers = []
        for layer, ((set_a, pa), (set_b, pb)) in enumerate(
            zip(_visual_sets(sa, num_layers), _visual_sets(sb, num_layers))
        ):
            n_a = pa["N"] if pa else 0
            n_b = pb["N"] if pb else 0
            clamped = bool((pa and pa["clamped"]) or (pb and pb["clamped"]))
            if n_a != n_b or clamped:
                changed_layers.add(layer)
            layers.append({
                "layer": layer,
                "jaccard": jaccard(set_a, set_b),
                "N_a": n_a,
                "N_b": n_b,
                "clamped_a": bool(pa and pa["clamped"]),
                "clamped_b": bool(pb and pb["clamped"]),
            })
        ta, tb = sa["ledger"]["totals"], sb["ledger"]["totals"]
        entry = {
            "index": sa["index"],
            "layers": layers,
            "final_visual_a": sa["final_visual"],
            "final_visual_b": sb["final_visual"],
            "savings_delta_exact": tb["net_savings_exact"] - ta["net_savings_exact"],
            "savings_delta_paper_approx": tb["net_savings_paper_approx"] - ta["net_savings_paper_approx"],
            "cache_ratio_delta": sb["cache"]["ratio"] - sa["cache"]["ratio"],
        }
        tim_a, tim_b = sa.get(TIMING_KEY), sb.get(TIMING_KEY)
        if tim_a and tim_b:
            entry[TIMING_KEY] = {"prefill_seconds_delta": tim_b["prefill_seconds"] - tim_a["prefill_seconds"]}
        sequences.append(entry)
    all_j = [l["jaccard"] for s in sequences for l in s["layers"]]
    return {
        "sequences": sequences,
        "layers_with_changed_N": sorted(changed_layers),
        "mean_jaccard": sum(all_j) / len(all_j) if all_j else 1.0,
        "checksums_equal": report_a["aggregate"].get("checksum") == report_b["aggregate"].get("checksum"),
    }
