import json

import pytest

from tkedit import __version__
from tkedit.bench_builder import read_dataset, read_dataset_meta
from tkedit.cli import main
from tkedit.model import LamModel
from tkedit.temporal_kb import load_chains

from .conftest import HOG, PRESIDENCY_TSV, US


@pytest.fixture
def presidency_tsv(tmp_path):
    path = tmp_path / "facts.tsv"
    path.write_text(PRESIDENCY_TSV)
    return path


def run(*argv):
    return main([str(a) for a in argv])


def read_chains(path):
    with open(path, encoding="utf-8") as fp:
        return load_chains(fp)


def test_ingest_presidency(tmp_path, presidency_tsv, capsys):
    out = tmp_path / "chains.json"
    assert run("ingest", presidency_tsv, "-o", out, "--seed", 5) == 0
    chains = read_chains(out)
    assert len(chains) == 1 and (chains[0].subject, chains[0].relation) == (US, HOG)
    meta = json.loads(out.read_text())["meta"]
    assert meta["seed"] == 5 and meta["tool_version"] == __version__ and meta["config_fingerprint"]
    assert "3 facts -> 1 chains" in capsys.readouterr().out


def test_ingest_empty(tmp_path):
    src = tmp_path / "empty.tsv"
    src.write_text("")
    out = tmp_path / "chains.json"
    assert run("ingest", src, "-o", out) == 0
    assert read_chains(out) == []


def test_ingest_garbage(tmp_path, capsys):
    src = tmp_path / "garbage.tsv"
    src.write_bytes(b"\x00\xff garbage\nnot\ta\tfact\n")
    assert run("ingest", src, "-o", tmp_path / "c.json") == 2
    assert "tkedit ingest" in capsys.readouterr().err


def test_ingest_missing_file(tmp_path):
    assert run("ingest", tmp_path / "nope.tsv", "-o", tmp_path / "c.json") == 2


def test_ingest_skip_bad_lines(tmp_path, capsys):
    src = tmp_path / "mixed.tsv"
    src.write_text(PRESIDENCY_TSV + "broken line\n")
    assert run("ingest", src, "-o", tmp_path / "c.json") == 2
    assert run("ingest", src, "-o", tmp_path / "c.json", "--skip-bad-lines") == 0
    assert "line 4" in capsys.readouterr().err


def test_full_pipeline(tmp_path, capsys):
    facts, chains, data = tmp_path / "facts.tsv", tmp_path / "chains.json", tmp_path / "data"
    assert run("gen-corpus", "-o", facts, "--n-chains", 30, "--seed", 1) == 0
    assert run("ingest", facts, "-o", chains, "--seed", 1) == 0
    assert run("build", chains, "--out-dir", data, "--seed", 1) == 0
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert summary["SE_records"] == summary["EE_records"] == 30
    se = read_dataset(data / "se.jsonl")
    assert len(se) == 30
    meta = read_dataset_meta(data / "se.jsonl")
    assert meta["seed"] == 1 and meta["kind"] == "SE" and meta["tool_version"] == __version__

    model = tmp_path / "m.lam"
    assert run("init-model", chains, "-o", model, "--seed", 1) == 0
    assert LamModel.load(model).meta["seed"] == 1

    base, meto = tmp_path / "base.json", tmp_path / "meto.json"
    assert run("eval", model, data / "se.jsonl", "-o", base, "--method", "r1", "--seed", 1) == 0
    assert run("eval", model, data / "se.jsonl", "-o", meto, "--method", "r1", "--meto", "--seed", 1) == 0
    b, m = json.loads(base.read_text()), json.loads(meto.read_text())
    assert b["config_fingerprint"]["seed"] == 1 and b["config_fingerprint"]["edit_log_sha256"]
    assert m["metrics"]["HES"] > b["metrics"]["HES"]

    delta = tmp_path / "delta.json"
    capsys.readouterr()
    assert run("compare", base, meto, "-o", delta, "--label", "r1+") == 0
    d = json.loads(delta.read_text())["deltas"]
    assert d["HES"] == pytest.approx(m["metrics"]["HES"] - b["metrics"]["HES"], abs=0.011)
    assert "| r1+ |" in capsys.readouterr().out

    edited, elog = tmp_path / "edited.lam", tmp_path / "edits.jsonl"
    assert run("edit", model, data / "ee.jsonl", "-o", edited, "--edit-log", elog, "--method", "batch") == 0
    edited_model = LamModel.load(edited)
    assert edited_model.meta["edit_log_sha256"]
    assert len(elog.read_text().splitlines()) > 0
    assert run("eval", edited, data / "ee.jsonl", "--no-edit") == 0


def test_build_flags(tmp_path, capsys):
    # a second subject widens the head-of-government pool so a fake successor exists
    src = tmp_path / "facts.tsv"
    src.write_text(PRESIDENCY_TSV + f"Canada\t{HOG}\tJustin_Trudeau\t2015\t2025\n")
    chains = tmp_path / "chains.json"
    run("ingest", src, "-o", chains)
    assert run("build", chains, "--out-dir", tmp_path / "a", "--no-fake-facts") == 0
    no_fake = [r for r in read_dataset(tmp_path / "a" / "me.jsonl") if r.subject == US]
    assert [e.new.object for e in no_fake[0].edits] == ["Donald_Trump", "Joseph_Biden"]
    assert run("build", chains, "--out-dir", tmp_path / "b", "--horizon", 2028) == 0
    fake = [r for r in read_dataset(tmp_path / "b" / "me.jsonl") if r.subject == US]
    assert len(fake[0].edits) == 3
    last = fake[0].edits[-1].new
    assert last.object == "Justin_Trudeau"
    assert last.t_start == 2022 and 2024 <= last.t_end <= 2028


def test_build_bad_template_pack(tmp_path, presidency_tsv):
    chains = tmp_path / "chains.json"
    run("ingest", presidency_tsv, "-o", chains)
    bad = tmp_path / "bad.tsv"
    bad.write_text("head_of_government\texplicit\t0\tno slots here\n")
    assert run("build", chains, "--out-dir", tmp_path / "out", "--templates", bad) == 2


def test_config_file_overlay(tmp_path, presidency_tsv):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"seed": 9, "horizon": 2026}))
    chains = tmp_path / "chains.json"
    assert run("ingest", presidency_tsv, "-o", chains, "--config", cfg) == 0
    assert json.loads(chains.read_text())["meta"]["seed"] == 9
    assert run("ingest", presidency_tsv, "-o", chains, "--config", cfg, "--seed", 2) == 0
    assert json.loads(chains.read_text())["meta"]["seed"] == 2


def test_compare_kind_mismatch(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    a.write_text(json.dumps({"dataset_kind": "SE", "metrics": {"CES": 1.0}}))
    b.write_text(json.dumps({"dataset_kind": "EE", "metrics": {"CES": 1.0}}))
    assert run("compare", a, b) == 2


def test_run_suite_small(tmp_path, capsys):
    out = tmp_path / "suite"
    assert run("run-suite", "--out-dir", out, "--n-chains", 20, "--methods", "r1", "--seed", 3) == 0
    doc = json.loads((out / "suite.json").read_text())
    assert set(doc["reports"]) == {f"r1{s}/{k}" for s in ("", "+meto") for k in ("SE", "ME", "EE")}
    assert doc["summary"]["seed"] == 3 and doc["summary"]["tool_version"] == __version__
    assert (out / "suite.md").read_text().startswith("### SE")
