"""Run configuration: JSON loading, preset merging and strict validation."""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass
from importlib import resources

from ..errors import ConfigError
from ..flash_sim import BlockSpec
from ..sparsify import SparsifyConfig
from ..toy_vlm import ModelConfig

PRESETS = ("retain192", "retain128", "retain64")

DEFAULTS = {
    "model": asdict(ModelConfig()),
    "sparsify": {
        "enabled": True,
        "lambda": 1.0,
        "tau": 0.25,
        "theta": 0.25,
        "knn": 5,
        "rank_rel_tol": 1e-10,
        "active_layers": None,
        "budget": None,
        "rater_rows": "selected",
        "rater_softmax_axis": "text",
        "head_reduce": "mean",
    },
    "attention_backend": {"kind": "dense", "block_size": 16},
    "report_path": None,
    "measure_time": True,
    "repetitions": 1,
    "workers": None,
    "baseline": True,
}

SYNTHETIC_DEFAULTS = {
    "num_sequences": 2,
    "visual_len": 64,
    "pre_text_len": 8,
    "question_len": 16,
    "seed": 0,
}
FILE_DEFAULTS = {"path": None, "pre_text_len": 8, "question_len": 16, "seed": 0}

TOP_KEYS = set(DEFAULTS) | {"preset", "seed", "workload"}


@dataclass(frozen=True)
class SyntheticWorkload:
    num_sequences: int
    visual_len: int
    pre_text_len: int
    question_len: int
    seed: int


@dataclass(frozen=True)
class FileWorkload:
    path: str
    pre_text_len: int
    question_len: int
    seed: int


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    sparsify: SparsifyConfig
    sparsify_enabled: bool
    workload: SyntheticWorkload | FileWorkload
    backend: BlockSpec | None
    report_path: str | None
    measure_time: bool
    repetitions: int
    workers: int | None
    baseline: bool
    resolved: dict

    @property
    def backend_name(self):
        return "dense" if self.backend is None else "blockwise"


def load_preset(name):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}", "preset")
    text = resources.files("vtsparse.harness.presets").joinpath(f"{name}.json").read_text("utf-8")
    return json.loads(text)


def _merge(base, over):
    out = copy.deepcopy(base)
    for key, value in over.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _check_keys(section, allowed, where):
    if not isinstance(section, dict):
        raise ConfigError("must be a JSON object", where)
    unknown = sorted(set(section) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s): {', '.join(unknown)}", where)


def _int(value, where, minimum=None):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"must be an integer, got {value!r}", where)
    if minimum is not None and value < minimum:
        raise ConfigError(f"must be >= {minimum}, got {value}", where)
    return value


def _workload_layers(layers):
    """Pick the workload source from the highest-priority layer that names one."""
    source = None
    for layer in layers:
        wl = layer.get("workload")
        if wl is None:
            continue
        _check_keys(wl, ("synthetic", "file"), "workload")
        if len(wl) > 1:
            raise ConfigError("exactly one workload source (synthetic or file) is allowed", "workload")
        if wl:
            kind = next(iter(wl))
            if source is None or source[0] != kind:
                source = (kind, {})
            source[1].update(wl[kind])
    if source is None:
        source = ("synthetic", {})
    return source


def resolve(raw, preset=None, overrides=None):
    """Merge defaults, preset, file contents and CLI overrides into a RunConfig."""
    overrides = overrides or {}
    _check_keys(raw, TOP_KEYS, "config")
    preset = overrides.get("preset") or preset or raw.get("preset")
    layers = []
    if preset:
        layers.append(load_preset(preset))
    layers.append(raw)
    layers.append({k: v for k, v in overrides.items() if k != "preset"})

    merged = copy.deepcopy(DEFAULTS)
    for layer in layers:
        merged = _merge(merged, {k: v for k, v in layer.items() if k not in ("workload", "preset")})
    kind, wl = _workload_layers(layers)
    _check_keys(merged["model"], DEFAULTS["model"], "model")
    _check_keys(merged["sparsify"], DEFAULTS["sparsify"], "sparsify")
    _check_keys(merged["attention_backend"], DEFAULTS["attention_backend"], "attention_backend")

    merged.pop("seed", None)
    seed = overrides.get("seed")
    if seed is not None:
        _int(seed, "seed")
        merged["model"]["seed"] = seed
        wl["seed"] = seed
    elif raw.get("seed") is not None:
        seed = _int(raw["seed"], "seed")
        if "seed" not in raw.get("model", {}):
            merged["model"]["seed"] = seed
        if "seed" not in wl:
            wl["seed"] = seed

    defaults = SYNTHETIC_DEFAULTS if kind == "synthetic" else FILE_DEFAULTS
    _check_keys(wl, defaults, f"workload.{kind}")
    wl = {**defaults, **wl}
    merged["workload"] = {kind: wl}
    merged["preset"] = preset
    merged["seed"] = seed

    model = ModelConfig(**merged["model"])
    sp = dict(merged["sparsify"])
    enabled = sp.pop("enabled")
    if not isinstance(enabled, bool):
        raise ConfigError(f"must be true or false, got {enabled!r}", "sparsify.enabled")
    sp["lam"] = sp.pop("lambda")
    try:
        sparsify = SparsifyConfig(**sp)
    except ConfigError as exc:
        raise ConfigError(str(exc).split(": ", 1)[-1], f"sparsify.{exc.field}") from None

    if kind == "synthetic":
        for key in ("num_sequences", "visual_len", "question_len"):
            _int(wl[key], f"workload.synthetic.{key}", 1)
        _int(wl["pre_text_len"], "workload.synthetic.pre_text_len", 0)
        _int(wl["seed"], "workload.synthetic.seed")
        workload = SyntheticWorkload(**wl)
        if sparsify.budget is not None and sparsify.budget > workload.visual_len:
            raise ConfigError(
                f"budget {sparsify.budget} exceeds visual_len {workload.visual_len}", "sparsify.budget"
            )
        if workload.pre_text_len + workload.visual_len + workload.question_len > model.max_positions:
            raise ConfigError("sequence longer than model.max_positions", "workload.synthetic")
    else:
        if not isinstance(wl["path"], str) or not wl["path"]:
            raise ConfigError("a file path is required", "workload.file.path")
        _int(wl["pre_text_len"], "workload.file.pre_text_len", 0)
        _int(wl["question_len"], "workload.file.question_len", 1)
        _int(wl["seed"], "workload.file.seed")
        workload = FileWorkload(**wl)

    be = merged["attention_backend"]
    if be["kind"] == "dense":
        backend = None
    elif be["kind"] == "blockwise":
        backend = BlockSpec(_int(be["block_size"], "attention_backend.block_size", 1))
        if sparsify.head_reduce != "mean":
            raise ConfigError("blockwise backend supports only head_reduce='mean'", "sparsify.head_reduce")
    else:
        raise ConfigError(f"unknown backend {be['kind']!r}", "attention_backend.kind")

    reps = _int(merged["repetitions"], "repetitions", 1)
    workers = merged["workers"]
    if workers is not None:
        _int(workers, "workers", 1)
    for key in ("measure_time", "baseline"):
        if not isinstance(merged[key], bool):
            raise ConfigError(f"must be true or false, got {merged[key]!r}", key)
    if merged["report_path"] is not None and not isinstance(merged["report_path"], str):
        raise ConfigError("must be a string path or null", "report_path")

    return RunConfig(
        model=model,
        sparsify=sparsify,
        sparsify_enabled=enabled,
        workload=workload,
        backend=backend,
        report_path=merged["report_path"],
        measure_time=merged["measure_time"],
        repetitions=reps,
        workers=workers,
        baseline=merged["baseline"],
        resolved=merged,
    )


def load_config(path, preset=None, overrides=None):
    """Read a JSON config file and resolve it into a validated RunConfig."""
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", "config") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}", "config") from None
    return resolve(raw, preset=preset, overrides=overrides)
