import csv
import json
import subprocess
import sys

import pytest

from gdcaf import __version__
from gdcaf.cli import ExperimentSpec, main

TINY = ["--heads", "1", "--blocks", "1", "--epochs", "1", "--batch-size", "8", "--case", "4"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    assert main(["gen", "--seed", "2", "--hours", "280", "--nodes", "16", "--height", "8", "--width", "8", "--out", str(out)]) == 0
    return out


def _rows(path):
    return list(csv.DictReader(open(path)))


def test_gen_is_reproducible(tmp_path):
    args = ["gen", "--seed", "3", "--hours", "700", "--nodes", "2", "--height", "4", "--width", "4"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["frames"] == {"dev": 600, "test": 100}
    for name in ("dev.bin", "test.bin", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    record = json.loads((tmp_path / "a" / "run.json").read_text())
    assert record["version"] == __version__ and record["seed"] == 3


def test_train_resume_and_eval(dataset, tmp_path, capsys):
    run = tmp_path / "run"
    assert main(["train", "--dataset", str(dataset), "--out", str(run), "--graph-size", "4", "--lead", "1", *TINY]) == 0
    variant = run / "single"
    config = json.loads((variant / "config.json").read_text())
    assert {"model", "task", "scale", "train", "best_val"} <= set(config)
    assert len(_rows(variant / "train_log.csv")) == 1
    assert json.loads((run / "run.json").read_text())["spec"]["task"]["graph_size"] == 4
    capsys.readouterr()

    assert main(["train", "--dataset", str(dataset), "--out", str(tmp_path / "again"), "--graph-size", "4",
                 "--lead", "1", *TINY, "--resume", str(run)]) == 0
    first = capsys.readouterr().out.splitlines()[0]
    assert first == f"single: resumed, val_mse {config['best_val']:.8g}"

    ev = tmp_path / "ev"
    assert main(["eval", "--checkpoint", str(run), "--dataset", str(dataset), "--out", str(ev)]) == 0
    rows = _rows(ev / "report.csv")
    assert [r["model"] for r in rows] == ["Persistence", "GD-CAF"]
    report = json.loads((ev / "report.json").read_text())
    assert len(report) == 2 and "hss" in report[0]["report"]

    ev2 = tmp_path / "ev2"
    main(["eval", "--checkpoint", str(run), "--dataset", str(dataset), "--out", str(ev2)])
    assert (ev / "report.json").read_text() == (ev2 / "report.json").read_text()


def test_ablation_trains_every_pooling_case(dataset, tmp_path):
    run = tmp_path / "abl"
    assert main(["train", "--scenario", "ablation", "--dataset", str(dataset), "--out", str(run), "--graph-size", "2", *TINY]) == 0
    names = sorted(p.name for p in run.iterdir() if p.is_dir())
    assert names == ["case1", "case2", "case3", "case4"]
    cases = [json.loads((run / n / "config.json").read_text())["model"] for n in names]
    assert [(c["pool_qkv"], c["pool_input"]) for c in cases] == [(False, False), (True, False), (False, True), (True, True)]


def test_graph_size_table(dataset, tmp_path):
    run = tmp_path / "gs"
    assert main(["train", "--scenario", "graph-size", "--dataset", str(dataset), "--out", str(run), "--lead", "1", *TINY]) == 0
    ev = tmp_path / "gs_eval"
    assert main(["eval", "--checkpoint", str(run), "--dataset", str(dataset), "--out", str(ev), "--region", "R1"]) == 0
    rows = _rows(ev / "report.csv")
    assert sorted({int(r["nodes"]) for r in rows}) == [1, 2, 4, 8, 16]
    assert len(rows) == 10
    persistence = {tuple(v for k, v in r.items() if k not in ("variant", "nodes")) for r in rows if r["model"] == "Persistence"}
    assert len(persistence) == 1


def test_window_sweep_rows(dataset, tmp_path):
    spec = ExperimentSpec(scenario="window-sweep", dataset="x")
    assert len(spec.variants(16)) == 12
    run = tmp_path / "ws"
    assert main(["train", "--scenario", "window-sweep", "--dataset", str(dataset), "--out", str(run),
                 "--graph-size", "2", "--inputs", "6,9", "--leads", "1,6", *TINY]) == 0
    ev = tmp_path / "ws_eval"
    assert main(["eval", "--checkpoint", str(run), "--dataset", str(dataset), "--out", str(ev)]) == 0
    keys = [(r["input"], r["lead"], r["model"]) for r in _rows(ev / "report.csv")]
    assert len(keys) == 8 and len(set(keys)) == 8


def test_config_file_with_flag_override(dataset, tmp_path):
    cfg = tmp_path / "exp.json"
    cfg.write_text(json.dumps({"scenario": "single", "model": {"heads": 1, "blocks": 1, "case": 4},
                               "train": {"max_epochs": 1, "batch_size": 8}, "task": {"graph_size": 2, "lead": 3}}))
    run = tmp_path / "cfg"
    assert main(["train", "--config", str(cfg), "--dataset", str(dataset), "--out", str(run), "--lead", "1"]) == 0
    task = json.loads((run / "single" / "config.json").read_text())["task"]
    assert task == {"t_in": 6, "lead": 1, "graph_size": 2}


def test_export_attention(dataset, tmp_path):
    run = tmp_path / "run"
    main(["train", "--dataset", str(dataset), "--out", str(run), "--graph-size", "8", "--lead", "1", *TINY])
    out = tmp_path / "att"
    assert main(["export-attention", "--checkpoint", str(run), "--dataset", str(dataset), "--out", str(out), "--top-k", "20", "--regions", "R2,R3"]) == 0
    edges = json.loads((out / "edges.json").read_text())
    assert len(edges["seasons"]["DJF"]["edges"]["last"]) == 20
    assert edges["seasons"]["JJA"]["empty"]
    assert (out / "temporal_DJF_R3.csv").exists()
    assert json.loads((out / "run.json").read_text())["top_k"] == 20


def test_exit_codes(dataset, tmp_path):
    assert main(["train", "--dataset", str(dataset), "--out", str(tmp_path / "x"), "--t-in", "7"]) == 2
    assert main(["train", "--dataset", str(dataset), "--out", str(tmp_path / "x"), "--scenario", "graph-size", "--graph-sizes", "3"]) == 2
    assert main(["train", "--dataset", str(tmp_path / "missing"), "--out", str(tmp_path / "x")]) == 4
    assert main(["eval", "--checkpoint", str(tmp_path / "none"), "--dataset", str(dataset), "--out", str(tmp_path / "e")]) == 4
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["train", "--config", str(bad), "--dataset", str(dataset)]) == 2


def test_eval_rejects_mismatched_dataset(dataset, tmp_path):
    run = tmp_path / "run"
    main(["train", "--dataset", str(dataset), "--out", str(run), "--graph-size", "2", "--lead", "1", *TINY])
    small = tmp_path / "small"
    main(["gen", "--hours", "200", "--nodes", "2", "--height", "4", "--width", "4", "--out", str(small)])
    assert main(["eval", "--checkpoint", str(run), "--dataset", str(small), "--out", str(tmp_path / "e")]) == 2


def test_nan_abort_exit_code(dataset, tmp_path):
    from gdcaf.nn import load_parameters, save_parameters

    run = tmp_path / "run"
    main(["train", "--dataset", str(dataset), "--out", str(run), "--graph-size", "2", "--lead", "1", *TINY])
    state, extra = load_parameters(run / "single" / "params.bin")
    state["expand.stage1.pointwise"][:] = float("nan")
    save_parameters(run / "single" / "params.bin", state, extra)
    code = main(["train", "--dataset", str(dataset), "--out", str(tmp_path / "r2"), "--graph-size", "2", "--lead", "1", *TINY, "--resume", str(run)])
    assert code == 3


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "gdcaf.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("gen", "train", "eval", "export-attention", "gradcheck"):
        assert cmd in out.stdout
