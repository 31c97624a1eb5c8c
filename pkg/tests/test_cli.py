from __future__ import annotations

import csv
import json

import pytest

from pipevo import bench
from pipevo.cli import EXIT_CONFIG, EXIT_EMPTY, main
from pipevo.data import synth_moons
from pipevo.evolution import read_runlog
from pipevo.graph import PipelineGraph
from pipevo.objective import Objective


def test_optimize_moons(tmp_path, capsys):
    out = tmp_path / "run"
    cache = tmp_path / "nodes.db"
    code = main(["optimize", "--synth", "moons", "--rows", "400", "--timeout", "8", "--n-jobs", "1",
                 "--pop-size", "8", "--cache-path", str(cache), "--out-dir", str(out), "--seed", "1"])
    assert code == 0
    line = capsys.readouterr().out.strip().splitlines()[-1]
    assert line.startswith("best ") and "cache_hits=" in line
    best = json.loads((out / "best_pipeline.json").read_text())
    # the single dt pipeline is in generation 0, so evolution can only match or beat it
    dt = Objective(synth_moons(400, 0.1, 1), seed=1)(PipelineGraph.chain("dt")).fitness
    assert best["fitness"] >= max(0.9, dt)
    assert cache.exists()
    for name in ("runlog.jsonl", "report.csv", "series_trajectory.csv", "summary.txt", "trajectory.png"):
        assert (out / name).exists(), name
    assert read_runlog(out / "runlog.jsonl")[-1]["type"] == "summary"
    assert main(["verify", str(out / "report.csv")]) == 0


def test_optimize_budget_too_small(tmp_path, capsys):
    code = main(["optimize", "--synth", "moons", "--timeout", "0.001", "--out-dir", str(tmp_path)])
    assert code == EXIT_EMPTY
    assert "no pipeline" in capsys.readouterr().err


def test_config_errors(tmp_path, capsys):
    assert main(["optimize", "--dataset", str(tmp_path / "missing.csv"), "--out-dir", str(tmp_path)]) == EXIT_CONFIG
    bad = tmp_path / "bad.csv"
    bad.write_text("x,label\n1,0\n2,0\n")
    assert main(["optimize", "--dataset", str(bad), "--out-dir", str(tmp_path)]) == EXIT_CONFIG
    with pytest.raises(SystemExit) as err:
        main(["optimize", "--timeout", "-1"])
    assert err.value.code == 2


def test_optimize_csv(tmp_path):
    ds = synth_moons(120, 0.1, 0)
    path = tmp_path / "moons.csv"
    path.write_text(ds.to_csv_text("target"))
    code = main(["optimize", "--dataset", str(path), "--label", "target", "--timeout", "3",
                 "--pop-size", "4", "--out-dir", str(tmp_path / "o"), "--cache", "off"])
    assert code == 0


def test_bench_hetero_cli(tmp_path, capsys):
    assert main(["bench-hetero", "--sizes", "10000,300000", "--reps", "2", "--out-dir", str(tmp_path)]) == 0
    with open(tmp_path / "report.csv", newline="") as fh:
        rows = [r for r in csv.DictReader(fh) if r["row_type"] == "mean"]
    assert rows and main(["verify", str(tmp_path / "report.csv")]) == 0
    assert (tmp_path / "summary.txt").exists()


def test_bench_cache_cli_small(tmp_path):
    code = main(["bench-cache", "--synth", "blobs", "--rows", "300", "--features", "4", "--timeout", "2",
                 "--n-jobs", "1", "--reps", "1", "--pop-size", "4", "--out-dir", str(tmp_path)])
    assert code == 0
    assert main(["verify", str(tmp_path / "report.csv")]) == 0
    assert list(tmp_path.glob("*.png"))


def test_verify_detects_tampering(tmp_path, capsys):
    runs = [{"cfg": "a", "rep": i, "seed": i, "x": float(i)} for i in range(3)]
    path = tmp_path / "r.csv"
    bench.write_report(path, runs, ["cfg"], ["x"])
    assert bench.verify_report(path) == []
    text = path.read_text().replace("run,a,1,1,1.0", "run,a,1,1,1.5")
    path.write_text(text)
    assert bench.verify_report(path)
    assert main(["verify", str(path)]) == 1


def test_list_ops(capsys):
    assert main(["list-ops"]) == 0
    names = {json.loads(l)["name"] for l in capsys.readouterr().out.splitlines()}
    assert "rf_lite" in names and "sleep" not in names
