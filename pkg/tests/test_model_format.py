import json
import struct

import numpy as np
import pytest

from expertfold.compression import decompose_expert
from expertfold.errors import FormatError, ValidationError
from expertfold.merging import prune_non_dominant
from expertfold.model import (
    ExpertWeights,
    SmoeLayer,
    account,
    dense_ffn_params,
    validate_manifest,
)
from expertfold.presets import shape_manifest, switch_base_32
from expertfold.runtime import ToySpec, gen_toy
from expertfold.smaf import read_header, read_model, write_model


def tensors(m):
    out = {}
    for t, layer in enumerate(m.layers):
        out[f"r{t}"] = layer.router
        for s, e in enumerate(layer.experts):
            if isinstance(e, ExpertWeights):
                out[f"{t}.{s}.in"], out[f"{t}.{s}.out"] = e.w_in, e.w_out
            else:
                for k, part in (("in", e.w_in), ("out", e.w_out)):
                    out[f"{t}.{s}.{k}.U"], out[f"{t}.{s}.{k}.V"], out[f"{t}.{s}.{k}.S"] = part.u, part.v, part.s
                    out[f"{t}.{s}.{k}.kept"] = part.kept_cols
    if m.head is not None:
        out["head"] = m.head
    return out


def assert_bit_identical(a, b):
    ta, tb = tensors(a), tensors(b)
    assert ta.keys() == tb.keys()
    for k in ta:
        assert ta[k].dtype == tb[k].dtype
        assert ta[k].tobytes() == tb[k].tobytes(), k


def test_round_trip_bit_identical(toy, tmp_path):
    m, _ = toy
    write_model(m, tmp_path / "m.smaf")
    back = read_model(tmp_path / "m.smaf")
    assert_bit_identical(m, back)
    assert back.skip_layers == m.skip_layers
    assert back.meta == m.meta
    for a, b in zip(m.layers, back.layers):
        assert a.redirect.tolist() == b.redirect.tolist()


def test_round_trip_decomposed_and_masked(small_toy, tmp_path):
    m, _ = small_toy
    m = prune_non_dominant(m, [[0, 2], [1]])
    m.layers[0].experts[1] = decompose_expert(m.layers[0].experts[1], 2)
    part = m.layers[0].experts[1].w_out
    part.s, part.kept_cols = part.s[:, [1, 4]], np.array([1, 4])
    write_model(m, tmp_path / "m.smaf")
    back = read_model(tmp_path / "m.smaf")
    assert_bit_identical(m, back)
    assert back.layers[1].redirect.tolist() == [-1, 0, -1, -1]


def test_header_layout(toy, tmp_path):
    m, _ = toy
    write_model(m, tmp_path / "m.smaf")
    raw = (tmp_path / "m.smaf").read_bytes()
    magic, version, hlen = struct.unpack_from("<4sIQ", raw)
    assert magic == b"SMAF" and version == 1
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    assert len(raw[16:16 + hlen]) == hlen
    assert (16 + hlen) % 8 == 0
    assert all(e["offset"] % 8 == 0 for e in header["tensors"])
    assert header["d_model"] == m.d_model


def test_corrupt_magic(toy, tmp_path):
    m, _ = toy
    p = tmp_path / "m.smaf"
    write_model(m, p)
    raw = bytearray(p.read_bytes())
    raw[:4] = b"XXXX"
    p.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="magic"):
        read_model(p)


def test_bad_version(toy, tmp_path):
    m, _ = toy
    p = tmp_path / "m.smaf"
    write_model(m, p)
    raw = bytearray(p.read_bytes())
    raw[4:8] = struct.pack("<I", 9)
    p.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="version"):
        read_model(p)


def test_truncated_data_names_tensor(toy, tmp_path):
    m, _ = toy
    p = tmp_path / "m.smaf"
    write_model(m, p)
    p.write_bytes(p.read_bytes()[:-200])
    with pytest.raises(FormatError, match="head"):
        read_model(p)


def test_redirect_past_slots_rejected(toy, tmp_path):
    m, _ = toy
    p = tmp_path / "m.smaf"
    write_model(m, p)
    header, start, raw = read_header(p)
    header["layers"][1]["redirect"][3] = 99
    blob = json.dumps(header).encode()
    blob += b" " * ((-(16 + len(blob))) % 8)
    p.write_bytes(struct.pack("<4sIQ", b"SMAF", 1, len(blob)) + blob + raw[start:])
    with pytest.raises(ValidationError, match="redirect"):
        read_model(p)


def test_validation_catches_shape_and_nan(small_toy):
    m, _ = small_toy
    bad = m.copy()
    bad.layers[0].experts[0] = ExpertWeights(np.zeros((3, 3)), np.zeros((3, 3)))
    with pytest.raises(ValidationError):
        validate_manifest(bad)
    bad = m.copy()
    bad.layers[0].router[0, 0] = np.nan
    with pytest.raises(ValidationError, match="non-finite"):
        validate_manifest(bad)
    bad = m.copy(skip_layers=frozenset({7}))
    with pytest.raises(ValidationError):
        validate_manifest(bad)


def test_account_toy_arithmetic():
    m, _ = gen_toy(0, ToySpec(d_model=16, d_ff=32, n_layers=4, n_experts=8, n_classes=4))
    r = account(m)
    assert sum(r.per_layer_params) == 4 * 8 * 2 * 16 * 32 == 32768
    assert r.router_params == 4 * 8 * 16 == 512
    assert r.total_params == r.backbone_params + 32768 + 512
    assert r.ffn_flops_per_token == 4 * 4 * 16 * 32


def test_account_removing_one_expert(small_toy):
    m, _ = small_toy
    cut = m.copy()
    layer = cut.layers[1]
    cut.layers[1] = SmoeLayer(layer.router, layer.experts[:-1], [0, 1, 2, 2])
    assert account(m).total_params - account(cut).total_params == dense_ffn_params(m.d_model, m.d_ff)


def test_account_ignores_redirect_fanout(small_toy):
    m, _ = small_toy
    a = m.copy()
    a.layers[1].redirect = np.array([0, 0, 0, 0])
    assert account(a).total_params == account(m).total_params


def test_account_decomposed_formula():
    m = shape_manifest(8, 12, 2, 4, rank=2, keep_ratio=0.5, skip_layers=(0,), replaces_dense_ffn=False)
    r = account(m)
    per_expert = (2 * (8 + 12) + 12 * 4) + (2 * (12 + 8) + 8 * 6)
    assert r.per_layer_params == [4 * 2 * 8 * 12, 4 * per_expert]


@pytest.mark.parametrize(
    "stage, net, expected, tol",
    [
        ("full", True, 2.0e9, 0.05),
        ("full", False, 2.0e9, 0.05),
        ("merged", True, 733e6, 0.10),
        ("merged", False, 733e6, 0.10),
        ("compressed", True, 381e6, 0.10),
    ],
)
def test_switch_base_32_sizes(stage, net, expected, tol):
    total = account(switch_base_32(stage, replaces_dense_ffn=net)).total_params
    assert abs(total - expected) <= tol * expected


def test_switch_expert_block_arithmetic():
    m = switch_base_32("full", replaces_dense_ffn=False)
    assert sum(account(m).per_layer_params) == 12 * 32 * 2 * 768 * 3072
    assert abs(sum(account(m).per_layer_params) - 1.811e9) < 1e6
