import csv
import json

import numpy as np
import pytest

from conftest import read_report, run_cli

TINY = {
    "data": {
        "num_classes": 2,
        "records_per_class": 12,
        "length": 64,
        "seeds": {"synth": 11, "split": 12},
    },
    "arch": {"conv_blocks": [[4, 5, 2], [8, 3, 2]], "feature_dim": 8},
    "train": {"epochs": 2, "batch_size": 16, "seeds": {"init": 13, "shuffle": 14}},
    "decor": {"projection_dim": 5, "seed": 15},
    "attack": {"epsilons": [0.0, 0.1, 0.5, 1.0, 1.5], "steps": 2},
}


@pytest.fixture()
def workdir(tmp_path):
    cfg = dict(TINY)
    cfg["output"] = {"root": str(tmp_path)}
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(cfg))
    return tmp_path, str(cfg_path)


def test_generate_default_config_counts(tmp_path):
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps({"output": {"root": str(tmp_path)}}))
    assert run_cli("generate-data", "--config", str(cfg_path), "--out", "data") == 0
    data = tmp_path / "data"
    assert len(list((data / "signals").glob("*.txt"))) == 150
    assert (data / "manifest.csv").exists()
    assert (data / "split.json").exists()
    split = json.loads((data / "split.json").read_text())
    assert len(split["train_ids"]) == 135 and len(split["test_ids"]) == 15


def test_generate_rerun_byte_identical(workdir):
    tmp_path, cfg = workdir
    assert run_cli("generate-data", "--config", cfg, "--out", "a") == 0
    a = tmp_path / "a"
    before = {p.relative_to(a): p.read_bytes() for p in a.rglob("*") if p.is_file()}
    # true rerun into the same directory reproduces every byte
    assert run_cli("generate-data", "--config", cfg, "--out", "a") == 0
    after = {p.relative_to(a): p.read_bytes() for p in a.rglob("*") if p.is_file()}
    assert before == after
    # a second output dir gets identical data artifacts (manifest records
    # the differing --out argument, so it is excluded)
    assert run_cli("generate-data", "--config", cfg, "--out", "b") == 0
    b = tmp_path / "b"
    for rel in ["manifest.csv", "split.json"]:
        assert (a / rel).read_bytes() == (b / rel).read_bytes()
    for sig in sorted((a / "signals").glob("*.txt")):
        assert sig.read_bytes() == (b / "signals" / sig.name).read_bytes()


def test_unknown_config_key_exits_2(tmp_path, capsys):
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps({"data": {"recrods_per_class": 10}}))
    assert run_cli("generate-data", "--config", str(cfg_path), "--out", "x") == 2
    assert "data.recrods_per_class" in capsys.readouterr().err


def test_invalid_value_exits_2_with_key_path(tmp_path, capsys):
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps({"train": {"epochs": 0}}))
    assert run_cli("generate-data", "--config", str(cfg_path), "--out", "x") == 2
    assert "train.epochs" in capsys.readouterr().err


def test_missing_config_exits_2(tmp_path):
    assert run_cli("generate-data", "--config", str(tmp_path / "nope.json"),
                   "--out", "x") == 2


def test_train_writes_artifacts_and_curves(workdir):
    tmp_path, cfg = workdir
    assert run_cli("generate-data", "--config", cfg, "--out", "data") == 0
    assert run_cli("train", "--config", cfg, "--kind", "cor", "--out", "ens") == 0
    assert run_cli("train", "--config", cfg, "--kind", "fdec", "--out", "ens") == 0

    cor_dir, fdec_dir = tmp_path / "ens" / "cor", tmp_path / "ens" / "fdec"
    for d in (cor_dir, fdec_dir):
        for k in range(3):
            assert (d / f"arm{k}.params").exists()
            assert (d / f"arm{k}.cache").exists()
            assert (d / f"arm{k}_curve.csv").exists()

    with open(cor_dir / "arm1_curve.csv", newline="") as fh:
        header = next(csv.reader(fh))
    assert header == ["epoch", "ce"]
    with open(fdec_dir / "arm1_curve.csv", newline="") as fh:
        header = next(csv.reader(fh))
    assert header == ["epoch", "ce", "cor"]
    # base arm never decorrelates, so no cor column even for fdec
    with open(fdec_dir / "arm0_curve.csv", newline="") as fh:
        assert next(csv.reader(fh)) == ["epoch", "ce"]


def test_train_resume_guard(workdir, capsys):
    tmp_path, cfg = workdir
    assert run_cli("generate-data", "--config", cfg, "--out", "data") == 0
    assert run_cli("train", "--config", cfg, "--kind", "cor", "--out", "ens") == 0
    assert run_cli("train", "--config", cfg, "--kind", "cor", "--out", "ens") == 1
    assert "--force" in capsys.readouterr().err
    assert run_cli("train", "--config", cfg, "--kind", "cor", "--out", "ens",
                   "--force") == 0


def test_train_rerun_byte_identical(workdir):
    tmp_path, cfg = workdir
    assert run_cli("generate-data", "--config", cfg, "--out", "data") == 0
    assert run_cli("train", "--config", cfg, "--kind", "dec", "--out", "e1") == 0
    d1 = tmp_path / "e1" / "dec"
    before = {p.name: p.read_bytes() for p in d1.iterdir()}
    # retraining in place (--force) reproduces every byte, manifest included
    assert run_cli("train", "--config", cfg, "--kind", "dec", "--out", "e1",
                   "--force") == 0
    assert {p.name: p.read_bytes() for p in d1.iterdir()} == before
    # a second output dir gets identical model artifacts
    assert run_cli("train", "--config", cfg, "--kind", "dec", "--out", "e2") == 0
    d2 = tmp_path / "e2" / "dec"
    for path in sorted(d1.iterdir()):
        if path.name != "run_manifest.json":
            assert path.read_bytes() == (d2 / path.name).read_bytes(), path.name


def test_attack_grid_and_zero_epsilon(workdir):
    tmp_path, cfg = workdir
    assert run_cli("generate-data", "--config", cfg, "--out", "data") == 0
    assert run_cli("train", "--config", cfg, "--kind", "cor", "--out", "ens") == 0
    assert run_cli("attack", "--config", cfg, "--ensemble-dir", "ens",
                   "--out", "atk") == 0

    cells = sorted(p.name for p in (tmp_path / "atk").iterdir() if p.is_dir())
    assert len(cells) == 10  # 2 families x 5 epsilons
    assert cells == sorted(
        f"{fam}_eps{i:02d}" for fam in ("pgd", "sap") for i in range(5)
    )

    # epsilon 0 cell: perturbed files byte-equal the naturals
    zero = tmp_path / "atk" / "pgd_eps00"
    for nat in sorted((zero / "natural").iterdir()):
        assert nat.read_bytes() == (zero / "perturbed" / nat.name).read_bytes()

    # linf_delta column matches the files and respects the budget
    for i, eps in enumerate(TINY["attack"]["epsilons"]):
        cell = tmp_path / "atk" / f"pgd_eps{i:02d}"
        with open(cell / "index.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        for row in rows:
            nat = np.loadtxt(cell / "natural" / f"{row['record_id']}.txt")
            pert = np.loadtxt(cell / "perturbed" / f"{row['record_id']}.txt")
            delta = float(np.max(np.abs(pert - nat)))
            assert delta <= eps + 1e-12
            assert abs(delta - float(row["linf_delta"])) < 1e-15


def test_attack_requires_trained_base(workdir, capsys):
    tmp_path, cfg = workdir
    assert run_cli("generate-data", "--config", cfg, "--out", "data") == 0
    assert run_cli("attack", "--config", cfg, "--ensemble-dir", "ens",
                   "--out", "atk") == 1
    assert "no trained ensembles" in capsys.readouterr().err


def test_evaluate_rows_and_determinism(workdir):
    tmp_path, cfg = workdir
    assert run_cli("generate-data", "--config", cfg, "--out", "data") == 0
    for kind in ("cor", "fdec"):
        assert run_cli("train", "--config", cfg, "--kind", kind, "--out", "ens") == 0
    assert run_cli("attack", "--config", cfg, "--ensemble-dir", "ens",
                   "--out", "atk") == 0
    assert run_cli("evaluate", "--config", cfg, "--ensemble-dir", "ens",
                   "--attacks", "atk", "--out", "r1/report.csv") == 0

    rows = read_report(tmp_path / "r1" / "report.csv")
    # natural row plus one per grid cell, for each trained kind
    assert len(rows) == 2 * (1 + 2 * 5)
    naturals = [r for r in rows if r["attack"] == "none"]
    assert {r["kind"] for r in naturals} == {"cor", "fdec"}
    assert all(r["epsilon"] == "0.0" for r in naturals)
    for r in rows:
        p1, p2, p3 = float(r["p1"]), float(r["p2"]), float(r["p3"])
        assert p1 >= p2 >= p3
        assert p3 <= float(r["average"]) <= p1

    corr = json.loads((tmp_path / "r1" / "correlation.json").read_text())
    assert set(corr) == {"cor", "fdec"}

    assert run_cli("evaluate", "--config", cfg, "--ensemble-dir", "ens",
                   "--attacks", "atk", "--out", "r2/report.csv") == 0
    assert (tmp_path / "r1" / "report.csv").read_bytes() == (
        tmp_path / "r2" / "report.csv"
    ).read_bytes()
    assert (tmp_path / "r1" / "correlation.json").read_bytes() == (
        tmp_path / "r2" / "correlation.json"
    ).read_bytes()


def test_evaluate_missing_artifact_exits_1(workdir, capsys):
    tmp_path, cfg = workdir
    assert run_cli("generate-data", "--config", cfg, "--out", "data") == 0
    assert run_cli("train", "--config", cfg, "--kind", "cor", "--out", "ens") == 0
    assert run_cli("evaluate", "--config", cfg, "--ensemble-dir", "ens",
                   "--attacks", "atk", "--out", "r/report.csv") == 1
    assert "missing artifact" in capsys.readouterr().err


def test_usage_error_exits_2(capsys):
    assert run_cli("train", "--config", "x.json") == 2  # missing required flags


def test_env_var_overrides_output_root(tmp_path, monkeypatch):
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps({"data": {"records_per_class": 2, "length": 64}}))
    monkeypatch.setenv("DENSEMBLE_ROOT", str(tmp_path / "rooted"))
    assert run_cli("generate-data", "--config", str(cfg_path), "--out", "data") == 0
    assert (tmp_path / "rooted" / "data" / "manifest.csv").exists()
