import json
import subprocess
import sys

import pytest

from tracegraph import cli
from tracegraph.spans import read_spans

CFG = {
    "topology": {"n_services": 6},
    "synth": {"rate": 20, "n_windows": 12},
    "anomaly": {"target": "social-graph-service", "affected_windows": [10, 11]},
    "detect": {"n_train": 8},
    "train": {"epochs": 4, "learning_rate": 0.1},
}


def run(*argv):
    return cli.main([str(a) for a in argv])


def pipeline(tmp, cfg_path, out):
    out = tmp / out
    assert run("synth", "--config", cfg_path, "--out", out) == 0
    assert run("ingest", "--input", out / "spans.ndjson", "--out", out) == 0
    assert run("build-graphs", "--config", cfg_path, "--input", out / "spans.ndjson", "--out", out) == 0
    assert run("train", "--config", cfg_path, "--graphs", out / "graphs.json", "--out", out / "train") == 0
    model = out / "train" / "model.json"
    assert run("score", "--config", cfg_path, "--graphs", out / "graphs.json", "--model", model, "--out", out / "score") == 0
    assert (
        run(
            "trace", "--config", cfg_path, "--graphs", out / "graphs.json", "--model", model,
            "--spans", out / "spans.ndjson", "--window", 11, "--out", out / "trace",
        )
        == 0
    )
    return out


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = tmp / "cfg.json"
    cfg.write_text(json.dumps(CFG))
    return tmp, cfg, pipeline(tmp, cfg, "a")


def files(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_pipeline_outputs(work):
    _, _, out = work
    for name in ["spans.ndjson", "labels.csv", "events.csv", "topology.json", "graphs.json", "rejects.ndjson"]:
        assert (out / name).exists()
    assert (out / "rejects.ndjson").read_text() == ""
    assert (out / "labels.csv").read_text().splitlines()[1:] == [
        "10,social-graph-service,latency_spike",
        "11,social-graph-service,latency_spike",
    ]
    model = json.loads((out / "train" / "model.json").read_text())
    assert set(model) >= {"params", "centroid", "threshold", "feature_stats"}
    trace_rows = (out / "train" / "train_trace.csv").read_text().splitlines()
    assert len(trace_rows) == 1 + CFG["train"]["epochs"] + 1
    report = json.loads((out / "score" / "report.json").read_text())
    assert [w["window_index"] for w in report["windows"]] == list(range(12))
    top = json.loads((out / "trace" / "report.json").read_text())["ranked_paths"][0]
    assert top["services"][-1] == "social-graph-service"


def test_synth_then_ingest_has_no_rejects(work):
    _, _, out = work
    spans, rejects = read_spans(out / "spans.ndjson")
    assert spans and rejects == []


def test_rerun_is_byte_identical(work):
    tmp, cfg, out = work
    again = pipeline(tmp, cfg, "b")
    assert files(out) == files(again)


def test_seed_changes_output(work, tmp_path):
    tmp, cfg, out = work
    assert run("synth", "--config", cfg, "--seed", 5, "--out", tmp_path) == 0
    assert (tmp_path / "spans.ndjson").read_bytes() != (out / "spans.ndjson").read_bytes()


def test_train_zero_epochs_writes_seeded_init(work, tmp_path):
    from tracegraph.model import ModelParams

    _, cfg, out = work
    assert run("train", "--config", cfg, "--set", "train.epochs=0", "--graphs", out / "graphs.json", "--out", tmp_path) == 0
    doc = json.loads((tmp_path / "model.json").read_text())
    params = ModelParams.from_dict(doc["params"])
    init = ModelParams.init(params.config)
    assert all((params.tensors[k] == init.tensors[k]).all() for k in init.tensors)


def test_hidden_dim_mismatch_in_model_file(work, tmp_path, capsys):
    _, cfg, out = work
    doc = json.loads((out / "train" / "model.json").read_text())
    doc["params"]["config"]["hidden_dim"] = 7
    bad = tmp_path / "model.json"
    bad.write_text(json.dumps(doc))
    assert run("score", "--graphs", out / "graphs.json", "--model", bad, "--out", tmp_path) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("ERROR shape_mismatch: ")
    assert "hidden_dim=7" in err[0] and "32" in err[0]


def test_hidden_dim_mismatch_with_config(work, tmp_path, capsys):
    _, cfg, out = work
    code = run(
        "score", "--set", "model.hidden_dim=16", "--graphs", out / "graphs.json",
        "--model", out / "train" / "model.json", "--out", tmp_path,
    )
    assert code == 1
    err = capsys.readouterr().err
    assert "hidden_dim=32" in err and "hidden_dim=16" in err


def test_history_length_mismatch(work, tmp_path, capsys):
    _, cfg, out = work
    assert run("build-graphs", "--config", cfg, "--set", "window.history_T=2", "--input", out / "spans.ndjson", "--out", tmp_path) == 0
    code = run("score", "--graphs", tmp_path / "graphs.json", "--model", out / "train" / "model.json", "--out", tmp_path)
    assert code == 1
    assert "ERROR shape_mismatch" in capsys.readouterr().err


@pytest.mark.parametrize(
    "argv, code",
    [
        (["ingest", "--input", "/nonexistent/spans.ndjson"], "io"),
        (["synth", "--set", "model.bogus=1"], "config"),
        (["synth", "--set", "anomaly.target=nope", "--set", "anomaly.affected_windows=[0]"], "invalid_input"),
        (["synth", "--set", "topology.edge_density=0"], "config"),
        (["trace"], "usage"),
    ],
)
def test_input_errors_exit_1(argv, code, tmp_path, capsys):
    assert run(*argv, "--out", tmp_path) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith(f"ERROR {code}: ")


def test_malformed_json_inputs(tmp_path, capsys):
    bad = tmp_path / "g.json"
    bad.write_text("{")
    assert run("train", "--graphs", bad, "--out", tmp_path) == 1
    assert "ERROR invalid_input" in capsys.readouterr().err


def test_internal_error_exit_2(monkeypatch, tmp_path, capsys):
    def boom(args, cfg):
        raise RuntimeError("kaput")

    monkeypatch.setattr(cli, "cmd_synth", boom)
    assert run("synth", "--out", tmp_path) == 2
    assert capsys.readouterr().err.startswith("ERROR internal: RuntimeError: kaput")


def test_eval_auc_from_score_file(tmp_path):
    scores = tmp_path / "s.csv"
    scores.write_text("window_index,service,score,label\n0,a,0.9,anomalous\n0,b,0.4,anomalous\n1,a,0.5,normal\n1,b,0.1,normal\n")
    assert run("eval", "auc", "--scores", scores, "--threshold", 0.45, "--out", tmp_path) == 0
    doc = json.loads((tmp_path / "report.json").read_text())
    assert doc["auc"] == 0.75 and doc["f1"] == 0.5


def test_eval_benchmark_and_sweeps(tmp_path):
    small = [
        "--set", "topology.n_services=5", "--set", "benchmark.n_train=5", "--set", "benchmark.n_val=2",
        "--set", "benchmark.n_test=3", "--set", "synth.rate=10", "--set", "benchmark.epochs=2",
        "--set", "window.window_length=1000000", "--set", "benchmark.anomaly_fraction=0.3",
    ]
    assert run("eval", "auc", *small, "--seeds", "0", "--out", tmp_path / "auc") == 0
    report = json.loads((tmp_path / "auc" / "report.json").read_text())
    assert [s["seed"] for s in report["seeds"]] == [0]
    assert (tmp_path / "auc" / "scores.csv").exists()

    for sub, grid in (("sweep-wd", "0.1,0.001"), ("sweep-scaling", "0,3000")):
        for d in ("x", "y"):
            argv = ["eval", sub, *small, "--grid", grid, "--seeds", "0", "--out", tmp_path / sub / d]
            assert run(*argv) == 0
        for name in ("sweep.csv", "sweep_summary.csv"):
            assert (tmp_path / sub / "x" / name).read_bytes() == (tmp_path / sub / "y" / name).read_bytes()
        rows = (tmp_path / sub / "x" / "sweep.csv").read_text().splitlines()
        assert rows[0] == "param_value,seed,auc,acc,recall,f1" and len(rows) == 3


SUBCOMMANDS = [
    (["synth"], ["--config", "--seed", "--out", "--set"]),
    (["ingest"], ["--input"]),
    (["build-graphs"], ["--input"]),
    (["train"], ["--graphs"]),
    (["score"], ["--graphs", "--model", "--window", "--threshold"]),
    (["trace"], ["--graphs", "--model", "--spans", "--window"]),
    (["eval", "auc"], ["--scores", "--seeds", "--threshold"]),
    (["eval", "sweep-wd"], ["--grid", "--seeds"]),
    (["eval", "sweep-scaling"], ["--grid", "--seeds"]),
]


@pytest.mark.parametrize("argv, flags", SUBCOMMANDS)
def test_help_lists_flags(argv, flags, capsys):
    assert cli.main([*argv, "--help"]) == 0
    text = capsys.readouterr().out
    for flag in flags + ["--config", "--seed", "--out"]:
        assert flag in text


def test_module_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "tracegraph", "ingest", "--input", str(tmp_path / "missing"), "--out", str(tmp_path)],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 1
    assert proc.stderr.startswith("ERROR io: ")
