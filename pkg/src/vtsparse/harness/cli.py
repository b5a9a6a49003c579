"""Command-line driver: ``run``, ``compare`` and ``gen-workload``.

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from ..errors import ConfigError
from .compare import compare
from .config import PRESETS, resolve, load_config
from .embeddings_io import write_embeddings
from .runner import dump_report, error_report, run

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("vtsparse")


def build_parser():
    parser = argparse.ArgumentParser(prog="vtsparse", description="Visual token sparsification benchmark")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run the sparsification benchmark")
    p_run.add_argument("--config", help="JSON config file")
    p_run.add_argument("--preset", choices=PRESETS)
    p_run.add_argument("--report", help="write the JSON report here")
    p_run.add_argument("--backend", choices=("dense", "blockwise"))
    p_run.add_argument("--block-size", type=int)
    p_run.add_argument("--seed", type=int)
    p_run.add_argument("--repetitions", type=int)
    p_run.add_argument("--workers", type=int)

    p_cmp = sub.add_parser("compare", help="diff two reports")
    p_cmp.add_argument("report_a")
    p_cmp.add_argument("report_b")
    p_cmp.add_argument("--report", help="write the diff here instead of stdout")

    p_gen = sub.add_parser("gen-workload", help="write random visual embeddings in SPVT format")
    p_gen.add_argument("--out", required=True)
    p_gen.add_argument("--count", type=int, default=2)
    p_gen.add_argument("--visual-len", type=int, default=64)
    p_gen.add_argument("--dim", type=int, default=256)
    p_gen.add_argument("--seed", type=int, default=0)
    return parser


def _overrides(args):
    ov = {}
    if args.preset:
        ov["preset"] = args.preset
    if args.report:
        ov["report_path"] = args.report
    if args.seed is not None:
        ov["seed"] = args.seed
    if args.repetitions is not None:
        ov["repetitions"] = args.repetitions
    if args.workers is not None:
        ov["workers"] = args.workers
    backend = {}
    if args.backend:
        backend["kind"] = args.backend
    if args.block_size is not None:
        backend["block_size"] = args.block_size
    if backend:
        ov["attention_backend"] = backend
    return ov


def cmd_run(args):
    report_path = args.report
    try:
        if args.config:
            config = load_config(args.config, overrides=_overrides(args))
        else:
            config = resolve({}, overrides=_overrides(args))
    except ConfigError as exc:
        log.error("config error: %s", exc)
        if report_path:
            dump_report(error_report(exc), report_path)
        return EXIT_CONFIG
    report_path = config.report_path
    try:
        report = run(config)
    except Exception as exc:  # any module failure becomes a report stub
        log.error("run failed: %s: %s", type(exc).__name__, exc)
        if report_path:
            dump_report(error_report(exc, config.resolved), report_path)
        return EXIT_RUNTIME
    if report_path:
        dump_report(report, report_path)
    else:
        json.dump(report, sys.stdout, indent=2)
        sys.stdout.write("\n")
    agg = report["aggregate"]
    log.info("sequences=%d mean_final_visual=%s mean_cache_ratio=%.4f checksum=%s",
             agg["sequences"], agg["mean_final_visual"], agg["mean_cache_ratio"], agg["checksum"][:16])
    return EXIT_OK


def cmd_compare(args):
    try:
        with open(args.report_a, encoding="utf-8") as fa, open(args.report_b, encoding="utf-8") as fb:
            a, b = json.load(fa), json.load(fb)
    except (OSError, json.JSONDecodeError) as exc:
        log.error("cannot read reports: %s", exc)
        return EXIT_CONFIG
    try:
        diff = compare(a, b)
    except Exception as exc:
        log.error("compare failed: %s", exc)
        return EXIT_RUNTIME
    if args.report:
        dump_report(diff, args.report)
    else:
        json.dump(diff, sys.stdout, indent=2)
        sys.stdout.write("\n")
    return EXIT_OK


def cmd_gen_workload(args):
    if min(args.count, args.visual_len, args.dim) < 1:
        log.error("count, visual-len and dim must be >= 1")
        return EXIT_CONFIG
    rng = np.random.default_rng(args.seed)
    mats = [rng.normal(size=(args.visual_len, args.dim)).astype(np.float32) for _ in range(args.count)]
    write_embeddings(args.out, mats)
    log.info("wrote %d matrices of %dx%d to %s", args.count, args.visual_len, args.dim, args.out)
    return EXIT_OK


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    handler = {"run": cmd_run, "compare": cmd_compare, "gen-workload": cmd_gen_workload}[args.command]
    return handler(args)


if __name__ == "__main__":
    sys.exit(main())
