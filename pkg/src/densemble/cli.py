"""Command-line front door: generate data, train, attack, evaluate.

All commands are driven by one JSON config plus a couple of path flags,
write a run manifest with the fully resolved config, and are idempotent:
re-running a command with identical inputs reproduces its artifacts byte
for byte.  Exit codes: 0 success, 1 runtime failure, 2 config/usage
error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .attacks import AttackSpec, craft_set, load_attacked_set, save_attacked_set
from .autodiff import next_pow2
from .config import (
    ConfigError,
    arch_from_config,
    decor_from_config,
    load_config,
    resolve_path,
    synth_from_config,
    train_from_config,
)
from .decorrelation import save_cache
from .ensemble import (
    KINDS,
    arm_roles,
    correlation_report,
    evaluate_arms,
    train_ensemble,
)
from .fourier import design_bank
from .model import load_params, save_params
from .signals import load_dataset, preprocess, save_dataset, split, synthesize

__all__ = ["main", "entry"]


def _write_manifest(out_dir: Path, command: str, cfg: dict, args: dict) -> None:
    manifest = {"command": command, "args": args, "config": cfg}
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "run_manifest.json", "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _load_splits(cfg: dict):
    """Dataset -> (train, test), both preprocessed with train-split stats."""
    data = cfg["data"]
    if data["source"] == "manifest":
        manifest = resolve_path(cfg, data["manifest"])
    else:
        manifest = resolve_path(cfg, data["dir"]) / "manifest.csv"
    ds = load_dataset(manifest)
    train_raw, test_raw = split(ds, data["train_fraction"], data["seeds"]["split"])
    train = preprocess(train_raw, data["length"])
    test = preprocess(test_raw, data["length"], stats=train.normalization)
    return train, test


def _bank_from_config(cfg: dict):
    return design_bank(
        next_pow2(cfg["data"]["length"]),
        cfg["bank"]["cutoff"],
        cfg["bank"]["transition_width"],
    )


def cmd_generate_data(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    if cfg["data"]["source"] != "synthetic":
        raise ConfigError("generate-data requires data.source == 'synthetic'")
    out_dir = resolve_path(cfg, args.out)
    ds = synthesize(synth_from_config(cfg), cfg["data"]["seeds"]["synth"])
    save_dataset(ds, out_dir)
    train_raw, test_raw = split(ds, cfg["data"]["train_fraction"], cfg["data"]["seeds"]["split"])
    with open(out_dir / "split.json", "w") as fh:
        json.dump(
            {
                "train_fraction": cfg["data"]["train_fraction"],
                "seed": cfg["data"]["seeds"]["split"],
                "train_ids": train_raw.ids(),
                "test_ids": test_raw.ids(),
            },
            fh,
            sort_keys=True,
            indent=2,
        )
        fh.write("\n")
    _write_manifest(out_dir, "generate-data", cfg, {"out": args.out})
    print(f"generated {len(ds)} records in {out_dir}")
    return 0


def _write_curve(path: Path, curve: list[dict]) -> None:
    has_cor = any("cor" in row for row in curve)
    columns = ["epoch", "ce"] + (["cor"] if has_cor else [])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in curve:
            writer.writerow([row["epoch"]] + [repr(row[c]) for c in columns[1:]])


def cmd_train(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    kind = args.kind
    out_dir = resolve_path(cfg, args.out) / kind
    existing = sorted(p.name for p in out_dir.glob("arm*.params"))
    if existing and not args.force:
        print(
            f"refusing to overwrite {out_dir} ({', '.join(existing)}); use --force",
            file=sys.stderr,
        )
        return 1

    train, _ = _load_splits(cfg)
    bank = _bank_from_config(cfg)
    results = train_ensemble(
        kind,
        train.signals_matrix(),
        train.labels_array(),
        train.ids(),
        arch_from_config(cfg),
        train_from_config(cfg),
        decor_from_config(cfg),
        bank,
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    for k, res in enumerate(results):
        save_params(res.params, out_dir / f"arm{k}.params", model_id=f"arm{k}")
        save_cache(res.cache, out_dir / f"arm{k}.cache")
        _write_curve(out_dir / f"arm{k}_curve.csv", res.curve)
    _write_manifest(out_dir, "train", cfg, {"kind": kind, "out": args.out})
    print(f"trained {kind} ensemble into {out_dir}")
    return 0


def _discover_kinds(ensemble_dir: Path) -> list[str]:
    kinds = [k for k in KINDS if (ensemble_dir / k / "arm0.params").exists()]
    if not kinds:
        raise FileNotFoundError(f"no trained ensembles under {ensemble_dir}")
    return kinds


def _load_base_arm(ensemble_dir: Path, kinds: list[str]):
    """The base arm is shared: every kind trains arm 0 identically, so the
    parameter files must be byte-identical across kinds."""
    blobs = {k: (ensemble_dir / k / "arm0.params").read_bytes() for k in kinds}
    first = kinds[0]
    for k in kinds[1:]:
        if blobs[k] != blobs[first]:
            raise RuntimeError(
                f"base arm differs between ensembles {first} and {k}; "
                "retrain with consistent seeds"
            )
    return load_params(ensemble_dir / first / "arm0.params")


def cmd_attack(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    ensemble_dir = resolve_path(cfg, args.ensemble_dir)
    out_dir = resolve_path(cfg, args.out)
    base = _load_base_arm(ensemble_dir, _discover_kinds(ensemble_dir))
    _, test = _load_splits(cfg)
    x, y, ids = test.signals_matrix(), test.labels_array(), test.ids()

    grid = [(fam, i, eps) for fam in cfg["attack"]["families"]
            for i, eps in enumerate(cfg["attack"]["epsilons"])]
    failed = []
    for fam, i, eps in grid:
        cell = out_dir / f"{fam}_eps{i:02d}"
        try:
            spec = AttackSpec.make(
                fam,
                eps,
                steps=cfg["attack"]["steps"],
                alpha=eps * cfg["attack"]["alpha_scale"],
                kernel_bank=[tuple(k) for k in cfg["attack"]["sap_kernels"]],
            )
            aset = craft_set(base, x, y, ids, spec, base)
            save_attacked_set(aset, cell)
        except Exception as exc:  # noqa: BLE001 - report cell and keep going
            failed.append((cell.name, str(exc)))
    _write_manifest(out_dir, "attack", cfg,
                    {"ensemble_dir": args.ensemble_dir, "out": args.out})
    if failed:
        for name, msg in failed:
            print(f"attack cell {name} failed: {msg}", file=sys.stderr)
        return 1
    print(f"crafted {len(grid)} attacked sets in {out_dir}")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    ensemble_dir = resolve_path(cfg, args.ensemble_dir)
    attacks_dir = resolve_path(cfg, args.attacks)
    report_path = resolve_path(cfg, args.out)
    kinds = _discover_kinds(ensemble_dir)
    bank = _bank_from_config(cfg)
    train, test = _load_splits(cfg)
    x_nat, y_nat = test.signals_matrix(), test.labels_array()

    arms_by_kind = {}
    for kind in kinds:
        arms = []
        for k in range(3):
            path = ensemble_dir / kind / f"arm{k}.params"
            if not path.exists():
                raise FileNotFoundError(f"missing artifact: {path}")
            arms.append(load_params(path))
        arms_by_kind[kind] = arms

    cells = []
    for fam in cfg["attack"]["families"]:
        for i, eps in enumerate(cfg["attack"]["epsilons"]):
            cell = attacks_dir / f"{fam}_eps{i:02d}"
            if not (cell / "index.csv").exists():
                raise FileNotFoundError(f"missing artifact: {cell / 'index.csv'}")
            cells.append((fam, eps, load_attacked_set(cell)))

    rows = []
    correlations = {}
    for kind in kinds:
        arms = arms_by_kind[kind]
        roles = arm_roles(kind)
        nat = evaluate_arms(arms, roles, x_nat, y_nat, None, bank)
        rows.append([kind, "none", 0.0, nat["average"], nat["p1"], nat["p2"], nat["p3"],
                     nat["n_masked"]])
        for fam, eps, aset in cells:
            m = evaluate_arms(arms, roles, aset.perturbed, aset.labels, aset.mask, bank)
            rows.append([kind, fam, eps, m["average"], m["p1"], m["p2"], m["p3"],
                         m["n_masked"]])
        correlations[kind] = correlation_report(
            arms, roles, train.signals_matrix(), bank
        )

    report_path.parent.mkdir(parents=True, exist_ok=True)
    with open(report_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kind", "attack", "epsilon", "average", "p1", "p2", "p3", "n_masked"])
        for kind, fam, eps, avg, p1, p2, p3, n in rows:
            writer.writerow([kind, fam, repr(float(eps)), repr(avg), repr(p1), repr(p2),
                             repr(p3), n])
    with open(report_path.parent / "correlation.json", "w") as fh:
        json.dump(correlations, fh, sort_keys=True, indent=2)
        fh.write("\n")
    _write_manifest(report_path.parent, "evaluate", cfg,
                    {"ensemble_dir": args.ensemble_dir, "attacks": args.attacks,
                     "out": args.out})
    print(f"wrote {report_path} ({len(rows)} rows) and correlation.json")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="densemble",
        description="Train and attack decorrelated / band-partitioned signal ensembles.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="synthesize the dataset described by the config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="train one ensemble kind")
    p.add_argument("--config", required=True)
    p.add_argument("--kind", required=True, choices=list(KINDS))
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true", help="overwrite existing arm files")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="craft attacked sets against the base arm")
    p.add_argument("--config", required=True)
    p.add_argument("--ensemble-dir", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("evaluate", help="emit the metrics CSV and correlation JSON")
    p.add_argument("--config", required=True)
    p.add_argument("--ensemble-dir", required=True)
    p.add_argument("--attacks", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    raise SystemExit(main())
