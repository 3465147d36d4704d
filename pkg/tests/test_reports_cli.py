import json

import numpy as np
import pytest

from expertfold import pipeline as pl
from expertfold.cli import main
from expertfold.errors import PipelineError, ValidationError
from expertfold.grouping import build_plan
from expertfold.reports import (
    emit_reports,
    frequency_csv,
    read_frequency_csv,
    read_report,
    validate_report,
)
from expertfold.runtime import collect_stats, model_forward
from expertfold.smaf import read_model


@pytest.fixture
def reports(toy, tmp_path):
    m, batch = toy
    stats = collect_stats(m, batch)
    plan = build_plan(m, stats, 6, "router-logits", skip=m.skip_layers)
    files = emit_reports(tmp_path, stats=stats, plan=plan)
    return stats, plan, tmp_path, files


def test_frequency_csv_rows_sum_to_one(reports):
    stats, _, out, _ = reports
    rows = read_frequency_csv(out / "frequencies.csv")
    assert len(rows) == len(stats.frequencies)
    for row, f in zip(rows, stats.frequencies):
        assert row.sum() == pytest.approx(1.0, abs=1e-9)
        np.testing.assert_allclose(row, f, atol=1e-6)
    assert frequency_csv(stats).splitlines()[0] == "layer," + ",".join(f"e{i}" for i in range(8))


def test_grouping_report_one_group_per_dominant(reports):
    _, plan, out, _ = reports
    doc = read_report(out / "grouping.json")
    for t, layer in enumerate(doc["layers"]):
        assert [g["dominant"] for g in layer["groups"]] == sorted(plan.dominant[t])
        assert sorted(i for g in layer["groups"] for i in g["members"]) == list(range(8))
        for e in layer["experts"]:
            assert e["label"] == plan.labels[t][e["expert"]]


def test_stats_report_round_trip(reports):
    stats, _, out, _ = reports
    doc = read_report(out / "stats.json")
    assert doc["n_tokens"] == stats.n_tokens
    np.testing.assert_allclose(np.array(doc["layers"][1]["logits"]), stats.logits[1], atol=1e-6)


def test_schema_rejects_malformed():
    with pytest.raises(ValidationError):
        validate_report("stats.json", {"n_tokens": -1, "layers": []})
    with pytest.raises(ValidationError):
        validate_report("grouping.json", {"layers": []})
    with pytest.raises(KeyError):
        validate_report("other.json", {})


def test_read_frequency_csv_needs_header(tmp_path):
    p = tmp_path / "f.csv"
    p.write_text("0,0.5,0.5\n")
    with pytest.raises(ValidationError):
        read_frequency_csv(p)


def test_pipeline_noop_configuration(tmp_path):
    cfg = {"group": {"k_avg": 8}, "align": {"enabled": False}}
    res = pl.run_pipeline(cfg, tmp_path)
    m, batch = pl.load_inputs(pl.resolve_config(cfg))
    a, _, _ = model_forward(m, batch.embeddings)
    b, _, _ = model_forward(read_model(tmp_path / "model.smaf"), batch.embeddings)
    assert np.abs(a - b).max() <= 1e-4
    assert res.sizes["merged"].total_params == res.sizes["original"].total_params


def test_pipeline_sizes_and_files(tmp_path):
    res = pl.run_pipeline({"compress": {"enabled": True, "rank": 4}}, tmp_path)
    s = res.sizes
    assert s["original"].total_params > s["merged"].total_params > s["compressed"].total_params
    names = {p.name for p in res.files}
    assert {"model.smaf", "merged.smaf", "frequencies.csv", "stats.json", "grouping.json",
            "stable_rank.json", "size.json", "remaining_params.json", "config.json"} <= names
    m = res.original
    slots = sum(len(d) for d in res.plan.dominant)
    routers = sum(layer.router.size for layer in m.layers)
    assert s["merged"].total_params == m.backbone_params + slots * 2 * m.d_model * m.d_ff + routers
    doc = read_report(tmp_path / "size.json")
    assert doc["stages"]["compressed"]["total_params"] == s["compressed"].total_params


def test_pipeline_failure_names_stage_and_cleans_up(tmp_path):
    with pytest.raises(PipelineError) as info:
        pl.run_pipeline({"compress": {"enabled": True, "rank": 16}}, tmp_path)
    assert info.value.stage == "compress"
    assert list(tmp_path.iterdir()) == []


def test_pipeline_write_failure_removes_partial(tmp_path, monkeypatch):
    (tmp_path / "keep.txt").write_text("x")

    def boom(*a, **kw):
        raise OSError("disk full")

    monkeypatch.setattr(pl, "emit_reports", boom)
    with pytest.raises(PipelineError) as info:
        pl.run_pipeline({}, tmp_path)
    assert info.value.stage == "write"
    assert [p.name for p in tmp_path.iterdir()] == ["keep.txt"]


def test_config_validation():
    with pytest.raises(ValueError):
        pl.resolve_config({"group": {"method": "nope"}})
    with pytest.raises(ValueError):
        pl.resolve_config({"merge": {"strategy": "nope"}})
    with pytest.raises(ValueError):
        pl.resolve_config({"bogus": {}})


# CLI

def _run(argv, capsys):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_cli_gen_toy_stats_group_verify(tmp_path, capsys):
    code, out, _ = _run(["gen-toy", "--out", str(tmp_path / "toy"), "--seed", "2"], capsys)
    assert code == 0
    model, tokens = str(tmp_path / "toy" / "model.smaf"), str(tmp_path / "toy" / "tokens.npz")
    code, out, _ = _run(["stats", model, "--tokens", tokens, "--out", str(tmp_path / "s")], capsys)
    assert code == 0 and (tmp_path / "s" / "frequencies.csv").exists()
    code, out, _ = _run(["group", model, "--tokens", tokens, "--k-avg", "3", "--out", str(tmp_path / "g")], capsys)
    assert code == 0 and sum(len(d) for d in json.loads(out)["dominant"][1:]) == 9
    code, out, _ = _run(["align", model, "--tokens", tokens, "--out", str(tmp_path / "a")], capsys)
    assert code == 0
    code, out, _ = _run(["verify", str(tmp_path / "a" / "aligned.smaf")], capsys)
    assert code == 0 and json.loads(out)["d_model"] == 16


def test_cli_merge_then_compress(tmp_path, capsys):
    _run(["gen-toy", "--out", str(tmp_path)], capsys)
    model, tokens = str(tmp_path / "model.smaf"), str(tmp_path / "tokens.npz")
    code, out, _ = _run(["merge", model, "--tokens", tokens, "--out", str(tmp_path / "m")], capsys)
    assert code == 0
    merged = str(tmp_path / "m" / "merged.smaf")
    code, out, _ = _run(["compress", merged, "--tokens", tokens, "--teacher", model, "--rank", "4",
                         "--keep-ratio", "0.2", "--out", str(tmp_path / "c")], capsys)
    assert code == 0
    sizes = json.loads(out)["size"]
    assert sizes["compressed"]["total_params"] < sizes["input"]["total_params"]


def test_cli_account_preset(capsys):
    code, out, _ = _run(["account", "--preset", "switch-base-32", "--stage", "compressed"], capsys)
    assert code == 0
    assert abs(json.loads(out)["total_params"] - 381e6) / 381e6 < 0.10


def test_cli_pipeline_error_exit(tmp_path, capsys):
    code, _, err = _run(["pipeline", "--out", str(tmp_path), "--rank", "16"], capsys)
    assert code == 2 and "stage compress failed" in err


def test_cli_missing_file(tmp_path, capsys):
    code, _, err = _run(["verify", str(tmp_path / "missing.smaf")], capsys)
    assert code != 0 and "verify" in err
    code, _, err = _run(["account"], capsys)
    assert code == 2 and "account" in err
