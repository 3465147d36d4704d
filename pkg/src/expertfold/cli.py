"""``expertfold`` command line."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline as pl
from .alignment import align_model
from .compression import PruneSchedule, compress_model, default_rank
from .errors import PipelineError
from .grouping import METHODS, budget_from_average, build_plan
from .merging import STRATEGIES
from .model import account, validate_manifest
from .presets import switch_base_32
from .reports import emit_reports
from .runtime import ToySpec, collect_stats, expert_loss_grads, gen_toy, model_logits
from .smaf import read_model, write_model


def _overrides(args) -> dict:
    over: dict = {}

    def put(section, key, value):
        over.setdefault(section, {})[key] = value

    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
        put("stats", "seed", args.seed)
    if getattr(args, "k_avg", None) is not None:
        put("group", "k_avg", args.k_avg)
    if getattr(args, "method", None):
        put("group", "method", args.method)
    if getattr(args, "strategy", None):
        put("merge", "strategy", args.strategy)
    if getattr(args, "no_align", False):
        put("align", "enabled", False)
    if getattr(args, "rank", None) is not None:
        put("compress", "rank", args.rank)
        put("compress", "enabled", True)
    if getattr(args, "keep_ratio", None) is not None:
        over.setdefault("compress", {}).setdefault("schedule", {})["P_T"] = args.keep_ratio
        put("compress", "enabled", True)
    return over


def _config(args) -> dict:
    user = json.loads(Path(args.config).read_text()) if getattr(args, "config", None) else {}
    return pl.resolve_config(pl._merge_dicts(user, _overrides(args)))


def _out(args, cfg) -> Path:
    out = Path(args.out or cfg["output"]["dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _inputs(args, cfg):
    if getattr(args, "model", None):
        cfg = dict(cfg, model=args.model, tokens=args.tokens or cfg["tokens"])
    return pl._stage("load")(pl.load_inputs)(cfg)


def _emit(doc):
    print(json.dumps(doc, indent=1, sort_keys=True))


def cmd_gen_toy(args, cfg):
    out = _out(args, cfg)
    m, batch = gen_toy(int(cfg["seed"]), ToySpec(**cfg["toy_spec"]))
    write_model(m, out / "model.smaf")
    pl.save_tokens(out / "tokens.npz", batch)
    _emit({"model": str(out / "model.smaf"), "tokens": str(out / "tokens.npz"), "size": account(m).as_dict()})


def cmd_stats(args, cfg):
    m, batch = _inputs(args, cfg)
    batch = pl.sample_stats_batch(batch, int(cfg["stats"]["batch"]), int(cfg["stats"]["seed"]))
    stats = pl._stage("stats")(collect_stats)(m, batch)
    files = emit_reports(_out(args, cfg), stats=stats)
    _emit({"files": [str(f) for f in files], "frequencies": [list(map(float, f)) for f in stats.frequencies]})


def cmd_align(args, cfg):
    m, _ = _inputs(args, cfg)
    mergeable = [t for t in range(m.n_layers) if t not in m.skip_layers]
    aligned = pl._stage("align")(align_model)(m, int(cfg["align"]["reference"]), mergeable)
    path = _out(args, cfg) / "aligned.smaf"
    write_model(aligned, path)
    _emit({"model": str(path)})


def _plan(m, batch, cfg):
    stats_batch = pl.sample_stats_batch(batch, int(cfg["stats"]["batch"]), int(cfg["stats"]["seed"]))
    stats = pl._stage("stats")(collect_stats)(m, stats_batch)
    g = cfg["group"]
    skip = frozenset(int(t) for t in g["skip_layers"] if int(t) < m.n_layers)
    grads = fisher = None
    if g["method"] == "expert-gradient" or cfg["merge"]["strategy"] == "fisher":
        _, (grads, fisher) = expert_loss_grads(m, model_logits(m, stats_batch), stats_batch,
                                               cfg["kd"]["alpha"], cfg["kd"]["T"], fisher=True)
    k_avg = g["k_avg"] if g["k_avg"] is not None else max(1, m.layers[0].n_experts // 4)
    plan = pl._stage("group")(build_plan)(
        m, stats, budget_from_average(m, k_avg, skip), g["method"], skip, grads, int(cfg["seed"])
    )
    return stats, plan, fisher, skip


def cmd_group(args, cfg):
    m, batch = _inputs(args, cfg)
    stats, plan, _, _ = _plan(m, batch, cfg)
    files = emit_reports(_out(args, cfg), stats=stats, plan=plan)
    _emit({"files": [str(f) for f in files], "dominant": plan.dominant})


def cmd_merge(args, cfg):
    cfg = dict(cfg, compress=dict(cfg["compress"], enabled=False))
    m, batch = _inputs(args, cfg)
    res = pl.consolidate(m, batch, cfg)
    out = _out(args, cfg)
    write_model(res.merged, out / "merged.smaf")
    files = emit_reports(out, res.stats, res.plan, res.stable_rank, res.sizes)
    _emit({"model": str(out / "merged.smaf"), "files": [str(f) for f in files],
           "size": {k: v.as_dict() for k, v in res.sizes.items()}})


def cmd_compress(args, cfg):
    m, batch = _inputs(args, cfg)
    teacher = read_model(args.teacher) if args.teacher else None
    c = cfg["compress"]
    rank = c["rank"] or default_rank(m.d_model, m.d_ff)
    out_m = pl._stage("compress")(compress_model)(
        m, batch, PruneSchedule(**c["schedule"]), rank, teacher=teacher,
        batch_size=int(c["batch_size"]), ema=bool(c["ema"]), alpha=cfg["kd"]["alpha"], T=cfg["kd"]["T"],
    )
    out = _out(args, cfg)
    write_model(out_m, out / "compressed.smaf")
    sizes = {"input": account(m), "compressed": account(out_m)}
    emit_reports(out, sizes=sizes)
    _emit({"model": str(out / "compressed.smaf"), "size": {k: v.as_dict() for k, v in sizes.items()}})


def cmd_pipeline(args, cfg):
    res = pl.run_pipeline(cfg, _out(args, cfg))
    _emit({"files": [str(f) for f in res.files], "size": {k: v.as_dict() for k, v in res.sizes.items()}})


def cmd_verify(args, cfg):
    m = pl._stage("verify")(read_model)(args.model)
    validate_manifest(m)
    _emit({
        "model": args.model,
        "d_model": m.d_model,
        "d_ff": m.d_ff,
        "layers": [{"n_experts": layer.n_experts, "slots": layer.n_slots} for layer in m.layers],
        "size": account(m).as_dict(),
    })


def cmd_account(args, cfg):
    if args.preset:
        k_avg = args.k_avg if args.k_avg is not None else 8
        m = switch_base_32(args.stage, k_avg=int(k_avg), rank=args.rank or 32,
                           keep_ratio=args.keep_ratio if args.keep_ratio is not None else 0.1)
    elif args.model:
        m = pl._stage("account")(read_model)(args.model)
    else:
        raise PipelineError("account", "give a model file or --preset")
    _emit(account(m).as_dict())


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="expertfold", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, model=True, tokens=True):
        sp.add_argument("--config", help="JSON pipeline config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        if model:
            sp.add_argument("model", nargs="?", help="input SMAF archive (default: generated toy model)")
        if tokens:
            sp.add_argument("--tokens", help="token batch (.npz) matching the model")

    def grouping_flags(sp):
        sp.add_argument("--k-avg", dest="k_avg", type=float, help="average dominant experts per layer")
        sp.add_argument("--method", choices=METHODS)
        sp.add_argument("--strategy", choices=STRATEGIES)
        sp.add_argument("--no-align", dest="no_align", action="store_true")

    def compress_flags(sp):
        sp.add_argument("--rank", type=int)
        sp.add_argument("--keep-ratio", dest="keep_ratio", type=float)

    sp = sub.add_parser("gen-toy", help="write a synthetic model and token batch")
    common(sp, model=False, tokens=False)
    sp.set_defaults(func=cmd_gen_toy)

    sp = sub.add_parser("stats", help="routing frequencies and logits")
    common(sp)
    sp.set_defaults(func=cmd_stats)

    sp = sub.add_parser("align", help="permutation-align experts to the reference expert")
    common(sp)
    sp.set_defaults(func=cmd_align)

    sp = sub.add_parser("group", help="dominant experts and group labels")
    common(sp)
    grouping_flags(sp)
    sp.set_defaults(func=cmd_group)

    sp = sub.add_parser("merge", help="align, group and frequency-merge experts")
    common(sp)
    grouping_flags(sp)
    sp.set_defaults(func=cmd_merge)

    sp = sub.add_parser("compress", help="low-rank + sparse compression of a merged model")
    common(sp)
    compress_flags(sp)
    sp.add_argument("--teacher", help="SMAF archive of the pre-merge model (default: the input)")
    sp.set_defaults(func=cmd_compress)

    sp = sub.add_parser("pipeline", help="run every stage and write all reports")
    common(sp, model=False, tokens=False)
    grouping_flags(sp)
    compress_flags(sp)
    sp.set_defaults(func=cmd_pipeline)

    sp = sub.add_parser("verify", help="validate an SMAF archive")
    sp.add_argument("model")
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("account", help="parameter/FLOPs accounting")
    sp.add_argument("model", nargs="?")
    sp.add_argument("--preset", choices=["switch-base-32"])
    sp.add_argument("--stage", choices=["full", "merged", "compressed"], default="full")
    sp.add_argument("--k-avg", dest="k_avg", type=int)
    compress_flags(sp)
    sp.set_defaults(func=cmd_account)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        cfg = _config(args)
        args.func(args, cfg)
    except PipelineError as exc:
        print(f"expertfold: stage {exc.stage} failed: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, TypeError, KeyError) as exc:
        print(f"expertfold: stage {args.command} failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
