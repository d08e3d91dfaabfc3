import json

import pytest

import worldprobe.pipeline as pipeline
from worldprobe.cli import main
from worldprobe.config import ExperimentConfig, config_from_dict
from worldprobe.io import dumps_json
from worldprobe.pipeline import emit_report, load_report, parse_law, report_csvs, run_pipeline, strip_volatile

TINY = {
    "seed": 0,
    "system": {"steps": 20},
    "data": {"ssl_trajectories": 60, "probe_trajectories": 20, "ft_trajectories": 10, "ood_sets": 3,
             "ood_trajectories": 3},
    "model": {"width": 32, "n_blocks": 2},
    "train": {"epochs": 2},
    "probe": {"mlp_epochs": 3, "scan_mlp_epochs": 2},
    "finetune": {"epochs": 2},
    "mechanics": {"cka_samples": 200, "projection_samples": 100},
    "symreg": {"population": 60, "generations": 5},
    "bound": {"ssl_trajectories": 30, "probe_trajectories": 10, "eval_trajectories": 10, "steps": 20, "width": 16,
              "epochs": 2, "checkpoint_epochs": [1, 2]},
}
METHODS = ("phyip", "raw_input", "time_dependent", "mlp", "last_layer_ft", "full_ft")


def tiny(**over):
    return config_from_dict({**TINY, **over})


@pytest.fixture(scope="module")
def first_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run_a")
    report, code = run_pipeline(tiny(), out)
    emit_report(report, out)
    return report, code, out


def test_full_run_succeeds(first_run):
    report, code, _ = first_run
    assert code == 0
    assert set(report["status"].values()) == {"ok"}
    prov = report["provenance"]
    assert prov["seed"] == 0 and prov["deterministic"]
    assert prov["config_hash"] == tiny().config_hash
    assert {"numpy", "scipy", "python"} <= set(prov["versions"])


def test_integrity_unchanged(first_run):
    integ = first_run[0]["integrity"]
    assert integ["unchanged"]
    assert integ["backbone_checksum_before"] == integ["backbone_checksum_after"]


def test_deterministic_rerun_is_byte_identical(first_run, tmp_path):
    report, code = run_pipeline(tiny(), tmp_path)
    emit_report(report, tmp_path)
    a = (first_run[2] / "report.stable.json").read_bytes()
    assert (tmp_path / "report.stable.json").read_bytes() == a
    for name in ("baselines.csv", "erasure.csv", "bound_sweep.csv", "law.txt"):
        assert (tmp_path / name).read_bytes() == (first_run[2] / name).read_bytes()


def test_rerun_hits_cache(first_run):
    report, code = run_pipeline(tiny(), first_run[2])
    assert code == 0
    assert report["cache_events"] and all(e["cache"] == "hit" for e in report["cache_events"])
    assert strip_volatile(report) == strip_volatile(first_run[0])


def test_corrupt_cache_entry_is_recomputed(first_run, tmp_path):
    report, _ = run_pipeline(tiny(), tmp_path)
    ssl_dir = next((tmp_path / "cache" / "ssl").iterdir())
    (ssl_dir / "log.json").write_text("tampered")
    again, code = run_pipeline(tiny(), tmp_path)
    assert code == 0
    assert {"stage": "ssl", "key": ssl_dir.name, "cache": "miss"} in again["cache_events"]
    assert strip_volatile(again) == strip_volatile(report)


def test_report_stage_reads_cache_only(first_run, tmp_path):
    report, code = run_pipeline(tiny(), first_run[2], stage="report")
    assert code == 0
    assert strip_volatile(report)["baselines"] == strip_volatile(first_run[0])["baselines"]
    empty, code = run_pipeline(tiny(), tmp_path, stage="report")
    assert code == 0
    assert set(empty["status"].values()) == {"skipped"}
    assert not (tmp_path / "cache" / "data").exists()


def test_empty_experiment_list(tmp_path):
    report, code = run_pipeline(tiny(experiments=[]), tmp_path)
    assert code == 0
    assert report["status"] == {}
    for name in pipeline.SECTIONS:
        assert report[name]["skipped"], name


# ---------------------------------------------------------------- report files


def test_json_round_trip(first_run):
    report, _, out = first_run
    assert load_report(out / "report.json") == json.loads(dumps_json(report))


def test_baseline_table_shape(first_run):
    report, _, out = first_run
    lines = (out / "baselines.csv").read_text().splitlines()
    assert lines[0] == "method,ood_set,rho,mape"
    assert len(lines) - 1 == len(METHODS) * 3
    assert set(report["baselines"]["methods"]) == set(METHODS)


def test_erasure_table_columns(first_run):
    report, _, out = first_run
    header = (out / "erasure.csv").read_text().splitlines()[0].split(",")
    assert header == ["block"] + report["erasure"]["concepts"]
    assert report["erasure"]["concepts"] == ["speed", "radius", "mass", "force_magnitude"]


def test_law_file_parses(first_run):
    report, _, out = first_run
    law = parse_law((out / "law.txt").read_text())
    assert law.infix() == parse_law(report["symreg"]["phyip"]["selected"]).infix()


def test_default_config_table_size():
    n_sets = ExperimentConfig().data.ood_sets
    fake = {"baselines": {"methods": {m: {"sets": [{"name": f"ood_{i:02d}", "rho": 0.5, "mape": 1.0}
                                                  for i in range(n_sets)]} for m in METHODS}}}
    rows = report_csvs(fake)["baselines.csv"].splitlines()[1:]
    assert len(rows) == 300


def test_failed_stage_is_recorded(monkeypatch, tmp_path):
    def boom(run):
        raise RuntimeError("synthetic failure")

    monkeypatch.setattr(pipeline, "_symreg", boom)
    report, code = run_pipeline(tiny(experiments=["symreg"]), tmp_path)
    assert code == 1
    assert report["status"]["symreg"].startswith("failed: RuntimeError")
    assert report["status"]["data"] == "ok"


# ---------------------------------------------------------------- CLI


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps({**TINY, "experiments": ["baselines"]}))
    return path


def test_cli_success(cfg_file, tmp_path, capsys):
    out = tmp_path / "cli"
    assert main(["probe", "--config", str(cfg_file), "--out", str(out), "--format", "csv"]) == 0
    printed = capsys.readouterr().out
    assert "baselines: ok" in printed
    assert (out / "baselines.csv").exists() and not (out / "report.json").exists()


def test_cli_config_error(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"model": {"depth": 3}}')
    assert main(["run", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert "config error" in capsys.readouterr().err


def test_cli_stage_failure(monkeypatch, cfg_file, tmp_path):
    monkeypatch.setattr(pipeline, "_baselines", lambda run: 1 / 0)
    assert main(["probe", "--config", str(cfg_file), "--out", str(tmp_path / "o")]) == 1


def test_cli_unwritable_output(cfg_file, tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["report", "--config", str(cfg_file), "--out", str(blocker)]) == 1
    assert "cannot write report" in capsys.readouterr().err


def test_cli_seed_override(cfg_file, tmp_path):
    out = tmp_path / "s"
    assert main(["gen-data", "--config", str(cfg_file), "--out", str(out), "--seed", "5"]) == 0
    assert load_report(out / "report.json")["provenance"]["seed"] == 5
