import csv
import json
import os

import pytest

from sparsepc.cli import CSV_FIELDS, ablation_configs, main
from sparsepc.attack import AttackConfig


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data, out = root / "data", root / "runs"
    assert run("gen", "--out", data, "--per-class", 8, "--points", 64, "--seed", 0) == 0
    assert run("train", "--data", data, "--out", out, "--epochs", 8, "--arch", "maxpool_half") == 0
    assert run("train", "--data", data, "--out", out, "--epochs", 8, "--arch", "avgpool") == 0
    return {"data": data, "out": out, "model": out / "model_maxpool_half.json",
            "target": out / "model_avgpool.json"}


def _csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_gen_writes_manifest(workdir):
    manifest = json.loads((workdir["data"] / "manifest.json").read_text())
    assert len(manifest["samples"]) == 64
    assert sum(s["split"] == "test" for s in manifest["samples"]) == 16


def test_attack_outputs(workdir, capsys):
    w = workdir
    assert run("attack", "--data", w["data"], "--model", w["model"], "--out", w["out"],
               "--limit", 4, "--iterations", 15, "--name", "perturb") == 0
    rows = _csv(w["out"] / "perturb.csv")
    assert tuple(rows[0]) == CSV_FIELDS and len(rows) == 1
    records = [json.loads(line) for line in (w["out"] / "perturb.jsonl").read_text().splitlines()]
    report = json.loads((w["out"] / "perturb.json").read_text())
    assert report["config"]["attack"]["iterations"] == 15
    assert len(records) + len(report["excluded_ids"]) == 4
    for rec in records:
        assert os.path.exists(w["out"] / "perturb_adv" / f"{rec['id']}.xyz")


def test_addition_mode_reports_untouched_originals(workdir, capsys):
    w = workdir
    assert run("attack", "--data", w["data"], "--model", w["model"], "--out", w["out"], "--limit", 3,
               "--mode", "add", "-K", 8, "--iterations", 10, "--name", "add") == 0
    assert "original points untouched in every result: True" in capsys.readouterr().out
    assert json.loads((w["out"] / "add.json").read_text())["originals_intact_all"] is True


def test_config_file_and_flag_precedence(workdir, tmp_path):
    w = workdir
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"attack": {"iterations": 7, "lambda1": 0.3}}))
    assert run("attack", "--data", w["data"], "--model", w["model"], "--out", w["out"], "--limit", 2,
               "--config", cfg, "--lambda1", 0.2, "--name", "prec") == 0
    used = json.loads((w["out"] / "prec.json").read_text())["config"]["attack"]
    assert used["iterations"] == 7 and used["lambda1"] == 0.2


def test_downstream_commands(workdir, capsys):
    w = workdir
    run("attack", "--data", w["data"], "--model", w["model"], "--out", w["out"], "--limit", 4,
        "--iterations", 15, "--name", "perturb")
    assert run("attack", "--data", w["data"], "--model", w["model"], "--out", w["out"], "--limit", 4,
               "--method", "saliency_high", "--batch-size", 8) == 0
    assert _csv(w["out"] / "removal_saliency_high.csv")[0]["mode"] == "remove"
    def has_success(name):
        return any(json.loads(l)["success"] for l in (w["out"] / f"{name}.jsonl").read_text().splitlines())

    source = next(n for n in ("perturb", "removal_saliency_high") if has_success(n))
    assert run("defend", "--attack", source, "--model", w["model"], "--out", w["out"],
               "--data", w["data"], "--k", 5) == 0
    rate = json.loads((w["out"] / f"defend_outlier_{source}.json").read_text())
    assert 0.0 <= rate["defense_success_rate"] <= 1.0
    assert run("transfer", "--attack", source, "--source", w["model"], "--target", w["target"],
               "--out", w["out"]) == 0
    assert run("analyze", "--attack", "perturb", "--data", w["data"], "--model", w["model"],
               "--out", w["out"]) == 0
    assert run("report", "--out", w["out"]) == 0
    out = capsys.readouterr().out
    assert "full-scale reference rows" in out
    assert os.path.exists(w["out"] / "summary.csv")


def test_ablation_grid():
    grid = ablation_configs(AttackConfig())
    assert len(grid) == 8
    assert {cfg.mode for _, cfg in grid} == {"perturb", "add"}
    assert [label for label, _ in grid[:4]] == ["defaults", "lambda1=0", "lambda2=0", "metric=chamfer"]


def test_missing_artifacts_give_descriptive_errors(workdir, tmp_path, capsys):
    w = workdir
    assert run("attack", "--data", tmp_path / "none", "--model", w["model"], "--out", tmp_path) == 1
    assert "manifest not found" in capsys.readouterr().err
    assert run("attack", "--data", w["data"], "--model", tmp_path / "m.json", "--out", tmp_path) == 1
    assert "checkpoint not found" in capsys.readouterr().err
    assert run("defend", "--attack", "nothing", "--model", w["model"], "--out", tmp_path) == 1
    assert "not found" in capsys.readouterr().err
    assert run("report", "--out", tmp_path) == 1
    assert run("attack", "--data", w["data"], "--model", w["model"], "--out", tmp_path,
               "--config", tmp_path / "missing.json") == 1
