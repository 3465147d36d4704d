"""SMAF archive reader/writer.

Layout::

    b"SMAF" | u32 version (=1) | u64 header length | UTF-8 JSON header | data

All integers are little-endian. The JSON header is space-padded so the data
section starts on an 8-byte boundary; tensor offsets are relative to the data
section, 8-byte aligned, and point at row-major little-endian float32 blobs.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .model import (
    DecomposedExpert,
    ExpertWeights,
    LowRankSparse,
    ModelManifest,
    SmoeLayer,
    validate_manifest,
)

MAGIC = b"SMAF"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
_ALIGN = 8
_LE_F32 = np.dtype("<f4")


def _pad(n: int) -> int:
    return (-n) % _ALIGN


def _collect(m: ModelManifest):
    """Yield ``(name, array)`` pairs and build the structural header."""
    tensors = []
    layers = []
    for t, layer in enumerate(m.layers):
        tensors.append((f"layers.{t}.router", layer.router))
        experts = []
        for s, e in enumerate(layer.experts):
            prefix = f"layers.{t}.experts.{s}"
            if isinstance(e, ExpertWeights):
                experts.append({"kind": "dense"})
                tensors.append((f"{prefix}.w_in", e.w_in))
                tensors.append((f"{prefix}.w_out", e.w_out))
            elif isinstance(e, DecomposedExpert):
                entry = {"kind": "decomposed"}
                for key, part in (("w_in", e.w_in), ("w_out", e.w_out)):
                    entry[key] = {"kept_cols": [int(c) for c in part.kept_cols]}
                    tensors.append((f"{prefix}.{key}.U", part.u))
                    tensors.append((f"{prefix}.{key}.V", part.v))
                    tensors.append((f"{prefix}.{key}.S", part.s))
                experts.append(entry)
            else:
                raise TypeError(f"cannot serialise expert of type {type(e).__name__}")
        layers.append({"redirect": [int(r) for r in layer.redirect], "experts": experts})
    if m.head is not None:
        tensors.append(("head", m.head))
    return layers, tensors


def write_model(m: ModelManifest, path) -> None:
    validate_manifest(m)
    layers, tensors = _collect(m)
    index = []
    offset = 0
    for name, arr in tensors:
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 4
        offset += _pad(offset)
    try:
        meta = json.loads(json.dumps(m.meta, sort_keys=True))
    except (TypeError, ValueError) as exc:
        raise ValueError(f"manifest meta is not JSON-serialisable: {exc}") from exc
    header = {
        "format": "SMAF",
        "d_model": m.d_model,
        "d_ff": m.d_ff,
        "backbone_params": int(m.backbone_params),
        "replaces_dense_ffn": bool(m.replaces_dense_ffn),
        "skip_layers": sorted(m.skip_layers),
        "layers": layers,
        "tensors": index,
        "data_bytes": offset,
        "meta": meta,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob += b" " * _pad(_PREFIX.size + len(blob))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(_PREFIX.pack(MAGIC, VERSION, len(blob)))
            fh.write(blob)
            for _, arr in tensors:
                raw = np.ascontiguousarray(arr, dtype=_LE_F32).tobytes()
                fh.write(raw)
                fh.write(b"\0" * _pad(len(raw)))
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise


def read_header(path) -> tuple[dict, int, bytes]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _PREFIX.size:
        raise FormatError(f"{path}: file too short for SMAF prefix")
    magic, version, hlen = _PREFIX.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported SMAF version {version}")
    start = _PREFIX.size + hlen
    if start > len(raw):
        raise FormatError(f"{path}: header length {hlen} exceeds file size")
    try:
        header = json.loads(raw[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: header is not valid JSON: {exc}") from exc
    return header, start, raw


def read_model(path) -> ModelManifest:
    header, start, raw = read_header(path)
    data = memoryview(raw)[start:]
    arrays = {}
    try:
        index = header["tensors"]
        for entry in index:
            name, shape, off = entry["name"], tuple(entry["shape"]), int(entry["offset"])
            n = int(np.prod(shape)) if shape else 1
            if off < 0 or off % _ALIGN or off + 4 * n > len(data):
                raise FormatError(f"{path}: tensor {name!r} lies outside the data section")
            arr = np.frombuffer(data, dtype=_LE_F32, count=n, offset=off).reshape(shape)
            arrays[name] = arr.astype(np.float32)
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed tensor index: {exc}") from exc

    def get(name):
        if name not in arrays:
            raise FormatError(f"{path}: missing tensor {name!r}")
        return arrays[name]

    try:
        layers = []
        for t, spec in enumerate(header["layers"]):
            experts = []
            for s, e in enumerate(spec["experts"]):
                prefix = f"layers.{t}.experts.{s}"
                if e["kind"] == "dense":
                    experts.append(ExpertWeights(get(f"{prefix}.w_in"), get(f"{prefix}.w_out")))
                elif e["kind"] == "decomposed":
                    parts = {}
                    for key in ("w_in", "w_out"):
                        parts[key] = LowRankSparse(
                            get(f"{prefix}.{key}.U"),
                            get(f"{prefix}.{key}.V"),
                            get(f"{prefix}.{key}.S"),
                            np.asarray(e[key]["kept_cols"], dtype=np.int64),
                        )
                    experts.append(DecomposedExpert(parts["w_in"], parts["w_out"]))
                else:
                    raise FormatError(f"{path}: unknown expert kind {e['kind']!r}")
            layers.append(SmoeLayer(get(f"layers.{t}.router"), experts, np.asarray(spec["redirect"])))
        m = ModelManifest(
            d_model=int(header["d_model"]),
            d_ff=int(header["d_ff"]),
            layers=layers,
            skip_layers=frozenset(header.get("skip_layers", [])),
            backbone_params=int(header.get("backbone_params", 0)),
            replaces_dense_ffn=bool(header.get("replaces_dense_ffn", False)),
            head=arrays.get("head"),
            meta=header.get("meta", {}),
        )
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed header: {exc}") from exc
    return validate_manifest(m)
