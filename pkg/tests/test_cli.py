import json
import subprocess
import sys
from pathlib import Path

import pytest

from mossfl.cli import main
from mossfl.data import Partition, save_dataset, synthetic_dataset

FIXTURES = Path(__file__).parent / "fixtures"

RUN_CONFIG = {
    "format": 1,
    "name": "fixture",
    "dataset": {"source": "synthetic", "synthetic_size": 200},
    "tiers": [{"name": "medium", "arch": "medium", "devices": 2}, {"name": "small", "arch": "small", "devices": 2}],
    "samples_per_device": 15,
    "public_size": 30,
    "rounds": 4,
    "local_epochs": 1,
    "wire_epochs": 1,
    "hp": {"learning_rate": 0.05},
    "alpha": 0.5,
}


def write_json(path, doc):
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture(scope="module")
def fixture_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    cfg = write_json(root / "config.json", RUN_CONFIG)
    assert main(["run", "--config", str(cfg), "--out", str(root / "moss")]) == 0
    assert main(["run", "--config", str(cfg), "--out", str(root / "nofile"), "--ablation", "no-file"]) == 0
    return root


def test_partition_app1_shape_is_valid_and_repeatable(tmp_path):
    ds = synthetic_dataset(31_000, 10, (1,), seed=0)
    data = save_dataset(ds, tmp_path / "data.npz")
    cfg = write_json(tmp_path / "p.json", {"format": 1, "n_devices": 300, "alpha": 0.1,
                                           "samples_per_device": 100, "public_size": 100, "seed": 3})
    assert main(["partition", "--dataset", str(data), "--config", str(cfg), "--out", str(tmp_path / "a.json")]) == 0
    assert main(["partition", "--dataset", str(data), "--config", str(cfg), "--out", str(tmp_path / "b.json")]) == 0
    a = (tmp_path / "a.json").read_bytes()
    assert a == (tmp_path / "b.json").read_bytes()
    part = Partition.from_json(a.decode())
    part.validate(ds, 100)
    assert len(part.device_shards) == 300 and len(part.public_ids) == 100


def test_partition_directory_output_and_seed_flag(tmp_path):
    cfg = write_json(tmp_path / "p.json", {"n_devices": 3, "samples_per_device": 20, "public_size": 10})
    assert main(["partition", "--config", str(cfg), "--out", str(tmp_path / "out"), "--seed", "5"]) == 0
    doc = json.loads((tmp_path / "out" / "partition.json").read_text())
    assert doc["seed"] == 5 and len(doc["devices"]) == 3


def test_partition_schema_errors_name_the_field(tmp_path, capsys):
    cfg = write_json(tmp_path / "bad.json", {"n_devices": "many", "samples_per_device": 10})
    assert main(["partition", "--config", str(cfg), "--out", str(tmp_path / "x.json")]) == 2
    assert "n_devices" in capsys.readouterr().err
    cfg = write_json(tmp_path / "big.json", {"n_devices": 100, "samples_per_device": 100})
    assert main(["partition", "--config", str(cfg), "--out", str(tmp_path / "x.json")]) == 2


def test_run_schema_error(tmp_path, capsys):
    cfg = write_json(tmp_path / "bad.json", {**RUN_CONFIG, "hp": {"learning_rate": -1}})
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 2
    assert "hp.learning_rate" in capsys.readouterr().err
    cfg = write_json(tmp_path / "extra.json", {**RUN_CONFIG, "epochs": 3})
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 2
    assert main(["run", "--config", str(tmp_path / "ok.json"), "--out", str(tmp_path / "r")]) == 4
    good = write_json(tmp_path / "ok.json", RUN_CONFIG)
    assert main(["run", "--config", str(good), "--out", str(tmp_path / "r"), "--ablation", "nope"]) == 2


def test_run_zero_rounds(tmp_path):
    cfg = write_json(tmp_path / "c.json", {**RUN_CONFIG, "rounds": 0})
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 0
    summary = json.loads((tmp_path / "r" / "summary.json").read_text())
    assert summary["converged"] is None
    assert (tmp_path / "r" / "rounds.jsonl").read_text() == ""


def test_run_divergence_exit_code(tmp_path):
    cfg = write_json(tmp_path / "c.json", {**RUN_CONFIG, "hp": {"learning_rate": 1e30}, "rounds": 1})
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 3


def test_run_artifacts(fixture_runs):
    run = fixture_runs / "moss"
    manifest = json.loads((run / "manifest.json").read_text())
    for rel in [manifest["artifacts"]["rounds"], manifest["artifacts"]["summary"],
                *manifest["artifacts"]["models"].values()]:
        assert (run / rel).exists()
    assert manifest["config"]["name"] == "fixture" and manifest["seed"] == 0
    assert len((run / "rounds.jsonl").read_text().splitlines()) == 4
    tagged = json.loads((fixture_runs / "nofile" / "summary.json").read_text())
    assert tagged["tag"] == "moss-no-file"


def test_run_matches_golden_summary(fixture_runs):
    got = json.loads((fixture_runs / "moss" / "summary.json").read_text())
    want = json.loads((FIXTURES / "golden_summary.json").read_text())
    assert set(got) == set(want)
    for key, value in want.items():
        if key in ("final_accuracy",):
            assert got[key] == pytest.approx(value, abs=1e-6)
        elif key == "mean_final_accuracy":
            assert got[key] == pytest.approx(value, abs=1e-6)
        else:
            assert got[key] == value, key


def test_run_is_byte_reproducible(fixture_runs, tmp_path):
    cfg = fixture_runs / "config.json"
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "again")]) == 0
    assert (tmp_path / "again" / "rounds.jsonl").read_bytes() == (fixture_runs / "moss" / "rounds.jsonl").read_bytes()


def test_report(fixture_runs, tmp_path, capsys):
    runs = [str(fixture_runs / "moss"), str(fixture_runs / "nofile")]
    assert main(["report", *runs, "--out", str(tmp_path)]) == 0
    csv_text = (tmp_path / "report.csv").read_text()
    lines = csv_text.splitlines()
    assert lines[0] == ("run,method,tag,convergence_round_medium,convergence_round_small,"
                        "final_accuracy_medium,final_accuracy_small,cumulative_mb")
    assert len(lines) == 3
    assert csv_text == (FIXTURES / "golden_report.csv").read_text()
    assert (tmp_path / "accuracy.png").read_bytes()[:4] == b"\x89PNG"
    assert "moss-no-file" in capsys.readouterr().out
    before = (fixture_runs / "moss" / "rounds.jsonl").stat().st_mtime_ns
    main(["report", *runs, "--out", str(tmp_path)])
    assert (fixture_runs / "moss" / "rounds.jsonl").stat().st_mtime_ns == before


def test_report_missing_run(tmp_path, capsys):
    assert main(["report", str(tmp_path / "absent"), "--out", str(tmp_path)]) == 4
    assert "absent" in capsys.readouterr().err


def test_env_overrides(fixture_runs, tmp_path, monkeypatch):
    monkeypatch.setenv("MOSSFL_OUT_DIR", str(tmp_path / "env"))
    monkeypatch.setenv("MOSSFL_THREADS", "2")
    cfg = write_json(tmp_path / "c.json", {**RUN_CONFIG, "rounds": 1})
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "ignored")]) == 0
    manifest = json.loads((tmp_path / "env" / "manifest.json").read_text())
    assert manifest["config"]["threads"] == 2
    assert not (tmp_path / "ignored").exists()


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "mossfl", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for sub in ("partition", "run", "report"):
        assert sub in out.stdout
