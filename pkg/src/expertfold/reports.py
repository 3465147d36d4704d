"""Diagnostic report writers, readers and their JSON schemas.

Files written into an output directory:

``frequencies.csv``
    header ``layer,e0,e1,...``; one row per layer of activation frequencies.
``stats.json``
    per-layer router logits (``n_experts x b``) and frequencies.
``grouping.json``
    per layer, every expert's group label and normalised frequency, plus the
    groups themselves.
``stable_rank.json``
    per-layer mean stable-rank change ratio of the dominant experts.
``size.json``
    parameter/FLOPs accounting for each pipeline stage.
``remaining_params.json``
    per-layer ratio of expert parameters left after compression.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import jsonschema
import numpy as np

from .errors import ValidationError

_num = {"type": "number"}
_int = {"type": "integer", "minimum": 0}

STATS_SCHEMA = {
    "type": "object",
    "required": ["n_tokens", "layers"],
    "properties": {
        "n_tokens": _int,
        "layers": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["layer", "frequencies", "logits"],
                "properties": {
                    "layer": _int,
                    "frequencies": {"type": "array", "items": _num},
                    "logits": {"type": "array", "items": {"type": "array", "items": _num}},
                },
            },
        },
    },
}

GROUPING_SCHEMA = {
    "type": "object",
    "required": ["method", "layers"],
    "properties": {
        "method": {"type": "string"},
        "layers": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["layer", "experts", "groups"],
                "properties": {
                    "layer": _int,
                    "experts": {
                        "type": "array",
                        "items": {
                            "type": "object",
                            "required": ["expert", "label", "normalized_frequency"],
                            "properties": {"expert": _int, "label": _int, "normalized_frequency": _num},
                        },
                    },
                    "groups": {
                        "type": "array",
                        "items": {
                            "type": "object",
                            "required": ["dominant", "members"],
                            "properties": {"dominant": _int, "members": {"type": "array", "items": _int}},
                        },
                    },
                },
            },
        },
    },
}

STABLE_RANK_SCHEMA = {
    "type": "object",
    "required": ["layers"],
    "properties": {
        "layers": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["layer", "mean_change_ratio", "experts"],
                "properties": {
                    "layer": _int,
                    "mean_change_ratio": _num,
                    "experts": {
                        "type": "array",
                        "items": {
                            "type": "object",
                            "required": ["expert", "w_in", "w_out"],
                            "properties": {"expert": _int, "w_in": _num, "w_out": _num},
                        },
                    },
                },
            },
        }
    },
}

_SIZE_ENTRY = {
    "type": "object",
    "required": ["total_params", "per_layer_params", "router_params", "backbone_params", "ffn_flops_per_token"],
    "properties": {
        "total_params": {"type": "integer"},
        "per_layer_params": {"type": "array", "items": _int},
        "router_params": _int,
        "backbone_params": {"type": "integer"},
        "ffn_flops_per_token": _int,
    },
}

SIZE_SCHEMA = {
    "type": "object",
    "required": ["stages"],
    "properties": {"stages": {"type": "object", "additionalProperties": _SIZE_ENTRY}},
}

REMAINING_SCHEMA = {
    "type": "object",
    "required": ["layers"],
    "properties": {
        "layers": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["layer", "params_before", "params_after", "ratio"],
                "properties": {"layer": _int, "params_before": _int, "params_after": _int, "ratio": _num},
            },
        }
    },
}

SCHEMAS = {
    "stats.json": STATS_SCHEMA,
    "grouping.json": GROUPING_SCHEMA,
    "stable_rank.json": STABLE_RANK_SCHEMA,
    "size.json": SIZE_SCHEMA,
    "remaining_params.json": REMAINING_SCHEMA,
}


def validate_report(name: str, doc) -> None:
    schema = SCHEMAS.get(name)
    if schema is None:
        raise KeyError(f"no schema registered for {name!r}")
    try:
        jsonschema.validate(doc, schema)
    except jsonschema.ValidationError as exc:
        raise ValidationError(f"{name}: {exc.message}") from exc


def _dump(path: Path, name: str, doc) -> Path:
    validate_report(name, doc)
    target = path / name
    target.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return target


def stats_doc(stats) -> dict:
    return {
        "n_tokens": int(stats.n_tokens),
        "layers": [
            {"layer": t, "frequencies": [float(a) for a in f], "logits": np.asarray(h, float).tolist()}
            for t, (h, f) in enumerate(zip(stats.logits, stats.frequencies))
        ],
    }


def grouping_doc(plan) -> dict:
    layers = []
    for t in range(plan.n_layers):
        norm = plan.normalized_frequencies[t]
        experts = [
            {"expert": i, "label": int(q), "normalized_frequency": float(norm[i])}
            for i, q in enumerate(plan.labels[t])
        ]
        groups = [{"dominant": d, "members": mem} for d, mem in sorted(plan.groups(t).items())]
        layers.append({"layer": t, "experts": experts, "groups": groups})
    return {"method": plan.method, "layers": layers}


def frequency_csv(stats) -> str:
    n = max(len(f) for f in stats.frequencies)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer"] + [f"e{i}" for i in range(n)])
    for t, f in enumerate(stats.frequencies):
        w.writerow([t] + [repr(float(a)) for a in f])
    return buf.getvalue()


def read_frequency_csv(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "layer":
        raise ValidationError(f"{path}: missing CSV header")
    return [np.array([float(v) for v in row[1:]]) for row in rows[1:]]


def write_stats(out_dir, stats) -> list:
    out = Path(out_dir)
    csv_path = out / "frequencies.csv"
    csv_path.write_text(frequency_csv(stats))
    return [csv_path, _dump(out, "stats.json", stats_doc(stats))]


def write_grouping(out_dir, plan) -> Path:
    return _dump(Path(out_dir), "grouping.json", grouping_doc(plan))


def write_stable_rank(out_dir, report) -> Path:
    return _dump(Path(out_dir), "stable_rank.json", {"layers": report})


def write_size(out_dir, stage_reports: dict) -> Path:
    doc = {"stages": {k: v.as_dict() for k, v in stage_reports.items()}}
    return _dump(Path(out_dir), "size.json", doc)


def write_remaining(out_dir, ratios) -> Path:
    return _dump(Path(out_dir), "remaining_params.json", {"layers": ratios})


def read_report(path):
    path = Path(path)
    doc = json.loads(path.read_text())
    validate_report(path.name, doc)
    return doc


def emit_reports(out_dir, stats=None, plan=None, stable_rank=None, sizes=None, remaining=None) -> list:
    """Write whichever reports have data; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if stats is not None:
        written += write_stats(out, stats)
    if plan is not None:
        written.append(write_grouping(out, plan))
    if stable_rank is not None:
        written.append(write_stable_rank(out, stable_rank))
    if sizes:
        written.append(write_size(out, sizes))
    if remaining is not None:
        written.append(write_remaining(out, remaining))
    return written
