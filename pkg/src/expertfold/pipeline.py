"""Config-driven orchestration: stats -> align -> group -> merge -> compress."""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .alignment import align_model
from .compression import (
    PruneSchedule,
    compress_model,
    default_rank,
    remaining_parameter_ratios,
    stable_rank_report,
)
from .errors import PipelineError
from .grouping import METHODS, GroupingPlan, build_plan, budget_from_average
from .merging import STRATEGIES, merge_model
from .model import ModelManifest, account, validate_manifest
from .reports import emit_reports
from .runtime import (
    DEFAULT_STATS_TOKENS,
    RoutingStats,
    TokenBatch,
    ToySpec,
    collect_stats,
    expert_loss_grads,
    gen_toy,
    model_logits,
)
from .smaf import read_model, write_model

log = logging.getLogger(__name__)

DEFAULT_CONFIG = {
    "model": None,
    "tokens": None,
    "toy_spec": {},
    "seed": 0,
    "stats": {"batch": DEFAULT_STATS_TOKENS, "seed": 0},
    "align": {"enabled": True, "reference": 0},
    "group": {"method": "router-logits", "k_avg": None, "skip_layers": [0]},
    "merge": {"strategy": "frequency"},
    "compress": {
        "enabled": False,
        "rank": None,
        "ema": True,
        "batch_size": 32,
        "schedule": {"T_total": 200, "T_i": 8, "T_f": 32, "P_T": 0.1, "exponent": 3.0},
    },
    "kd": {"alpha": 0.2, "T": 2.0},
    "output": {"dir": "out"},
}


def _merge_dicts(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge_dicts(out[k], v)
        else:
            out[k] = v
    return out


def resolve_config(user: dict | None = None) -> dict:
    cfg = _merge_dicts(DEFAULT_CONFIG, user or {})
    unknown = set(cfg) - set(DEFAULT_CONFIG)
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    if cfg["group"]["method"] not in METHODS:
        raise ValueError(f"unknown similarity method {cfg['group']['method']!r}")
    if cfg["merge"]["strategy"] not in STRATEGIES:
        raise ValueError(f"unknown merge strategy {cfg['merge']['strategy']!r}")
    PruneSchedule(**cfg["compress"]["schedule"]).validate()
    return cfg


def load_config(path) -> dict:
    return resolve_config(json.loads(Path(path).read_text()))


def save_tokens(path, batch: TokenBatch) -> None:
    arrays = {"embeddings": batch.embeddings}
    if batch.labels is not None:
        arrays["labels"] = batch.labels
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_tokens(path) -> TokenBatch:
    with np.load(path) as z:
        return TokenBatch(z["embeddings"], z["labels"] if "labels" in z.files else None)


def sample_stats_batch(batch: TokenBatch, size: int, seed: int) -> TokenBatch:
    """Random subset of ``size`` tokens (the whole batch if it is not larger)."""
    if batch.size <= size:
        return batch
    idx = np.sort(np.random.default_rng(seed).choice(batch.size, size, replace=False))
    return batch.subset(idx)


@dataclass
class PipelineResult:
    model: ModelManifest
    original: ModelManifest
    merged: ModelManifest
    stats: RoutingStats
    plan: GroupingPlan
    sizes: dict = field(default_factory=dict)
    stable_rank: list | None = None
    remaining: list | None = None
    files: list = field(default_factory=list)


def _stage(name):
    """Run ``fn`` and re-raise anything as a PipelineError tagged with ``name``."""

    def deco(fn):
        def run(*a, **kw):
            try:
                return fn(*a, **kw)
            except PipelineError:
                raise
            except Exception as exc:
                raise PipelineError(name, f"{type(exc).__name__}: {exc}") from exc

        return run

    return deco


def load_inputs(cfg: dict) -> tuple[ModelManifest, TokenBatch]:
    if cfg["model"]:
        m = read_model(cfg["model"])
        if not cfg["tokens"]:
            raise ValueError("a model file needs a matching 'tokens' file")
        batch = load_tokens(cfg["tokens"])
    else:
        m, batch = gen_toy(int(cfg["seed"]), ToySpec(**cfg["toy_spec"]))
    if m.head is not None and batch.labels is None:
        batch.labels = np.argmax(model_logits(m, batch), axis=1)
    return m, batch


def consolidate(m: ModelManifest, batch: TokenBatch, cfg: dict) -> PipelineResult:
    """Run every stage in memory. Each stage's output is re-validated."""
    cfg = resolve_config(cfg)
    gcfg, ccfg, kd = cfg["group"], cfg["compress"], cfg["kd"]
    skip = frozenset(int(t) for t in gcfg["skip_layers"] if int(t) < m.n_layers)
    m = m.copy(skip_layers=skip)
    validate_manifest(m)

    stats_batch = sample_stats_batch(batch, int(cfg["stats"]["batch"]), int(cfg["stats"]["seed"]))
    stats = _stage("stats")(collect_stats)(m, stats_batch)

    aligned = m
    if cfg["align"]["enabled"]:
        mergeable = [t for t in range(m.n_layers) if t not in skip]
        aligned = _stage("align")(align_model)(m, int(cfg["align"]["reference"]), mergeable)
        _stage("align")(validate_manifest)(aligned)

    grads = fisher = None

    @_stage("group")
    def group():
        nonlocal grads, fisher
        if gcfg["method"] == "expert-gradient" or cfg["merge"]["strategy"] == "fisher":
            teacher_logits = model_logits(aligned, stats_batch)
            _, (grads, fisher) = expert_loss_grads(
                aligned, teacher_logits, stats_batch, kd["alpha"], kd["T"], fisher=True
            )
        k_avg = gcfg["k_avg"]
        if k_avg is None:
            k_avg = max(1, m.layers[0].n_experts // 4)
        k_total = budget_from_average(aligned, k_avg, skip)
        return build_plan(aligned, stats, k_total, gcfg["method"], skip, grads, int(cfg["seed"]))

    plan = group()

    merged = _stage("merge")(merge_model)(aligned, plan, stats, cfg["merge"]["strategy"], fisher)
    sizes = {"original": account(m), "merged": account(merged)}
    srank = _stage("merge")(stable_rank_report)(aligned, merged, plan)

    final, remaining = merged, None
    if ccfg["enabled"]:
        rank = ccfg["rank"] or default_rank(m.d_model, m.d_ff)
        final = _stage("compress")(compress_model)(
            merged, batch, PruneSchedule(**ccfg["schedule"]), rank, teacher=m,
            batch_size=int(ccfg["batch_size"]), ema=bool(ccfg["ema"]), alpha=kd["alpha"], T=kd["T"],
        )
        _stage("compress")(validate_manifest)(final)
        sizes["compressed"] = account(final)
        remaining = remaining_parameter_ratios(m, final)
    return PipelineResult(final, m, merged, stats, plan, sizes, srank, remaining)


def run_pipeline(config: dict, out_dir=None) -> PipelineResult:
    """Full pipeline with artifacts on disk; any failure removes partial outputs."""
    cfg = resolve_config(config)
    out = Path(out_dir or cfg["output"]["dir"])
    out.mkdir(parents=True, exist_ok=True)
    before = set(out.iterdir())
    written: list[Path] = []
    try:
        m, batch = _stage("load")(load_inputs)(cfg)
        res = consolidate(m, batch, cfg)

        @_stage("write")
        def write():
            if cfg["compress"]["enabled"]:
                write_model(res.merged, out / "merged.smaf")
                written.append(out / "merged.smaf")
            write_model(res.model, out / "model.smaf")
            written.append(out / "model.smaf")
            written.extend(
                emit_reports(out, res.stats, res.plan, res.stable_rank, res.sizes, res.remaining)
            )
            recorded = {k: v for k, v in cfg.items() if k != "output"}
            (out / "config.json").write_text(json.dumps(recorded, indent=1, sort_keys=True) + "\n")
            written.append(out / "config.json")
            validate_manifest(read_model(out / "model.smaf"))

        write()
    except PipelineError:
        for p in set(out.iterdir()) - before:
            if p.is_file():
                p.unlink()
        raise
    res.files = written
    log.info("pipeline wrote %d files to %s", len(written), out)
    return res
