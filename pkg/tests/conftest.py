import json
import time
from pathlib import Path

import pytest

from densemble.cli import main

# Acceptance-scale run: desk defaults except a larger dataset and the
# longer training schedule, which the trend criteria need.
ACCEPTANCE_OVERRIDES = {
    "data": {"records_per_class": 150},
    "train": {"epochs": 150},
}

KINDS = ("cor", "dec", "fcor", "fdec")


def run_cli(*argv: str) -> int:
    return main(list(argv))


def read_report(path: Path) -> list[dict]:
    import csv

    with open(path, newline="") as fh:
        return [dict(row) for row in csv.DictReader(fh)]


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory):
    """Full end-to-end run: generate -> train all kinds -> attack -> evaluate.

    Shared by the acceptance tests; everything downstream is read off disk.
    """
    root = tmp_path_factory.mktemp("pipeline")
    cfg = dict(ACCEPTANCE_OVERRIDES)
    cfg["output"] = {"root": str(root)}
    cfg_path = root / "config.json"
    cfg_path.write_text(json.dumps(cfg, indent=2))

    timings = {}
    t0 = time.time()
    assert run_cli("generate-data", "--config", str(cfg_path), "--out", "data") == 0
    timings["generate"] = time.time() - t0

    for kind in KINDS:
        t0 = time.time()
        assert (
            run_cli("train", "--config", str(cfg_path), "--kind", kind, "--out", "ens")
            == 0
        )
        timings[f"train_{kind}"] = time.time() - t0

    t0 = time.time()
    assert (
        run_cli("attack", "--config", str(cfg_path), "--ensemble-dir", "ens",
                "--out", "atk")
        == 0
    )
    timings["attack"] = time.time() - t0

    t0 = time.time()
    assert (
        run_cli("evaluate", "--config", str(cfg_path), "--ensemble-dir", "ens",
                "--attacks", "atk", "--out", "report/report.csv")
        == 0
    )
    timings["evaluate"] = time.time() - t0

    report = read_report(root / "report" / "report.csv")
    with open(root / "report" / "correlation.json") as fh:
        correlation = json.load(fh)
    return {
        "root": root,
        "config_path": cfg_path,
        "report": report,
        "correlation": correlation,
        "timings": timings,
    }
