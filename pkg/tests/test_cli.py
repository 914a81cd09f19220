from __future__ import annotations

import json

import pytest

from graphmem.cli import main
from graphmem.persistence import load_dataset, load_memory, parse_config


@pytest.fixture()
def suite_file(tmp_path):
    path = tmp_path / "suite.jsonl"
    assert main(["gen", "--n", "6", "--seed", "4", "--out", str(path)]) == 0
    return path


def test_gen_build_retrieve(tmp_path, suite_file, capsys):
    mem = tmp_path / "mem.json"
    assert main(["build", "--dataset", str(suite_file), "--M", "50", "--out", str(mem)]) == 0
    inst = load_dataset(suite_file)[0]
    assert len(load_memory(mem).graph) == 12
    capsys.readouterr()
    assert main(["retrieve", "--memory", str(mem), "--question", inst.question, "--k", "5"]) == 0
    lines = capsys.readouterr().out.strip().split("\n")
    assert lines[0] == "Relevant Knowledge:" and 1 <= len(lines) - 1 <= 5
    assert main(["retrieve", "--memory", str(mem), "--question", inst.question, "--k", "3", "--format", "dot"]) == 0
    assert capsys.readouterr().out.startswith("digraph")


def test_gen_deterministic(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    main(["gen", "--n", "3", "--seed", "9", "--out", str(a)])
    main(["gen", "--n", "3", "--seed", "9", "--out", str(b)])
    assert a.read_bytes() == b.read_bytes()


def test_train_then_eval_recall_matches(tmp_path, suite_file, capsys):
    ckpt, report = tmp_path / "p.bin", tmp_path / "r.json"
    args = ["--M", "50", "--k", "8", "--epochs", "20"]
    assert main(["train", "stage2", "--dataset", str(suite_file), "--out", str(ckpt), "--report", str(report), *args]) == 0
    trained = json.loads(report.read_text())["final_recall"]
    capsys.readouterr()
    assert main(["eval", "--dataset", str(suite_file), "--params", str(ckpt), "--csv", *args]) == 0
    rows = capsys.readouterr().out.strip().split("\n")
    header, values = rows[0].split(","), rows[1].split(",")
    assert abs(float(values[header.index("recall")]) - trained) <= 1e-12
    assert main(["train", "stage3", "--dataset", str(suite_file), "--params", str(ckpt),
                 "--out", str(tmp_path / "p3.bin"), *args]) == 0


def test_answer_mock(suite_file, capsys):
    assert main(["answer", "--dataset", str(suite_file), "--k", "200"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["answer"] == load_dataset(suite_file)[0].answers[0]


def test_config_precedence(tmp_path, suite_file):
    cfg = tmp_path / "g.cfg"
    cfg.write_text("M = 5\nk = 2\n")
    mem = tmp_path / "m.json"
    assert main(["build", "--config", str(cfg), "--dataset", str(suite_file), "--out", str(mem)]) == 0
    assert len(load_memory(mem).graph) == 5
    assert main(["build", "--config", str(cfg), "--M", "7", "--dataset", str(suite_file), "--out", str(mem)]) == 0
    assert len(load_memory(mem).graph) == 7
    assert parse_config(cfg.read_text())["M"] == "5"


def test_unknown_flag_and_errors(tmp_path, capsys):
    out = tmp_path / "never.jsonl"
    with pytest.raises(SystemExit) as exc:
        main(["gen", "--bogus", "--out", str(out)])
    assert exc.value.code != 0 and not out.exists()
    assert "usage" in capsys.readouterr().err
    assert main(["retrieve", "--memory", str(tmp_path / "nope.json"), "--question", "q"]) == 1
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "LoadError"
    bad = tmp_path / "bad.cfg"
    bad.write_text("unknown_key = 1\n")
    assert main(["gen", "--config", str(bad), "--out", str(out)]) == 1
    assert not out.exists()


def test_bench_commands(tmp_path, suite_file, capsys):
    assert main(["bench", "timing", "--lengths", "0,1500", "--samples", "2", "--csv"]) == 0
    assert capsys.readouterr().out.startswith("length,build_s")
    assert main(["bench", "capacity", "--dataset", str(suite_file), "--capacities", "1,50", "--k", "100"]) == 0
    assert "100.0000" in capsys.readouterr().out
