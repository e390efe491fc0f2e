"""PGD and smoothed (SAP) adversarial perturbation crafting.

Both attacks maximize the target model's cross entropy with signed
gradient steps under an l-infinity budget.  PGD perturbs the input
directly and projects back into the epsilon ball after every step.  SAP
optimizes a latent variable that is rendered through an average of
unit-sum Gaussian kernels before being added to the input; the kernels
suppress high-frequency content, so the induced perturbation stays
smooth while the latent keeps the full budget.

Attacks are deterministic: no random start, sgn(0) = 0.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .fourier import RingFilterBank, apply_band
from .model import ClassifierParams, forward, predict

__all__ = [
    "DEFAULT_SAP_KERNELS",
    "AttackSpec",
    "AttackedSet",
    "gaussian_kernel",
    "pgd",
    "sap",
    "craft_set",
    "save_attacked_set",
    "load_attacked_set",
]

# (width in samples, std in samples); widths odd, std = width / 4.
DEFAULT_SAP_KERNELS = ((5, 1.25), (9, 2.25), (13, 3.25), (17, 4.25), (21, 5.25))


@dataclass(frozen=True)
class AttackSpec:
    family: str
    eps: float
    alpha: float
    steps: int = 20
    kernel_bank: tuple[tuple[int, float], ...] = ()

    def __post_init__(self):
        if self.family not in ("pgd", "sap"):
            raise ValueError(f"unknown attack family {self.family!r}")
        if self.eps < 0 or self.alpha < 0 or self.steps < 1:
            raise ValueError("need eps >= 0, alpha >= 0, steps >= 1")
        if self.family == "sap":
            if not self.kernel_bank:
                raise ValueError("sap needs a non-empty kernel bank")
            for s, sigma in self.kernel_bank:
                if s % 2 == 0 or s < 1 or sigma <= 0:
                    raise ValueError(f"invalid kernel ({s}, {sigma}): width must be odd")

    @staticmethod
    def make(family: str, eps: float, steps: int = 20, alpha: float | None = None,
             kernel_bank=DEFAULT_SAP_KERNELS) -> "AttackSpec":
        """Default step size is eps / 10."""
        return AttackSpec(
            family=family,
            eps=float(eps),
            alpha=float(eps) / 10.0 if alpha is None else float(alpha),
            steps=steps,
            kernel_bank=tuple(tuple(k) for k in kernel_bank) if family == "sap" else (),
        )


def gaussian_kernel(s: int, sigma: float) -> np.ndarray:
    """Discretized Gaussian of odd width s, centered, normalized to sum 1."""
    if s < 1 or s % 2 == 0:
        raise ValueError("kernel width must be a positive odd integer")
    if sigma <= 0:
        raise ValueError("kernel std must be positive")
    d = np.arange(s) - (s - 1) / 2.0
    k = np.exp(-0.5 * (d / sigma) ** 2)
    return k / k.sum()


Band = tuple[RingFilterBank, int]


def _loss_and_grad(
    params: ClassifierParams, leaf: Tensor, x_input: Tensor, y: np.ndarray, step: int
) -> tuple[float, np.ndarray]:
    logits, _ = forward(params, x_input)
    loss = ad.softmax_cross_entropy(logits, y)
    loss.backward()
    g = leaf.grad
    if g is None or not np.all(np.isfinite(g)):
        gmax = None if g is None else float(np.max(np.abs(g)))
        raise RuntimeError(
            f"non-finite attack gradient at step {step} (loss={loss.item()}, "
            f"max|grad|={gmax})"
        )
    return loss.item(), g


def pgd(
    params: ClassifierParams,
    x: np.ndarray,
    y: np.ndarray,
    spec: AttackSpec,
    band: Band | None = None,
) -> np.ndarray:
    """Signed-gradient ascent on the input with per-step projection into
    the epsilon ball around x.  No data-domain box: amplitudes are
    unbounded after z-scoring."""
    if spec.family != "pgd":
        raise ValueError("pgd called with a non-pgd spec")
    x = np.asarray(x, dtype=np.float64)
    # iterate on the perturbation so the ball constraint is exact in floats
    delta = np.zeros_like(x)
    for step in range(spec.steps):
        leaf = Tensor(x + delta, requires_grad=True)
        inp = apply_band(band[0], band[1], leaf) if band is not None else leaf
        _, g = _loss_and_grad(params, leaf, inp, y, step)
        delta = np.clip(delta + spec.alpha * np.sign(g), -spec.eps, spec.eps)
    return x + delta


def _render_smooth(theta: Tensor, kernels: list[np.ndarray]) -> Tensor:
    """(1/M) sum_m theta (*) K_m with same-length zero-padded convolution."""
    n, length = theta.shape
    th3 = ad.reshape(theta, (n, 1, length))
    acc = None
    for k in kernels:
        term = ad.conv1d(th3, Tensor(k.reshape(1, 1, -1)), stride=1, pad=(len(k) - 1) // 2)
        acc = term if acc is None else ad.add(acc, term)
    return ad.reshape(ad.scale(acc, 1.0 / len(kernels)), (n, length))


def sap(
    params: ClassifierParams,
    x: np.ndarray,
    y: np.ndarray,
    spec: AttackSpec,
    band: Band | None = None,
) -> np.ndarray:
    """Smoothed perturbation: optimize a latent theta (clipped to the
    epsilon ball) whose kernel-smoothed average is added to x.  Since the
    kernels are non-negative with unit sum, the induced perturbation also
    stays inside the epsilon ball."""
    if spec.family != "sap":
        raise ValueError("sap called with a non-sap spec")
    x = np.asarray(x, dtype=np.float64)
    kernels = [gaussian_kernel(s, sigma) for s, sigma in spec.kernel_bank]
    theta = np.zeros_like(x)
    for step in range(spec.steps):
        leaf = Tensor(theta, requires_grad=True)
        xprime = ad.add(Tensor(x), _render_smooth(leaf, kernels))
        inp = apply_band(band[0], band[1], xprime) if band is not None else xprime
        _, g = _loss_and_grad(params, leaf, inp, y, step)
        theta = np.clip(theta + spec.alpha * np.sign(g), -spec.eps, spec.eps)
    return x + _render_smooth(Tensor(theta), kernels).data


@dataclass
class AttackedSet:
    ids: list[str]
    labels: np.ndarray
    natural: np.ndarray = field(repr=False)
    perturbed: np.ndarray = field(repr=False)
    mask: np.ndarray = field(repr=False)  # base model correct on naturals
    spec: AttackSpec = AttackSpec.make("pgd", 0.0)
    target_model_id: str = ""

    def linf_deltas(self) -> np.ndarray:
        return np.max(np.abs(self.perturbed - self.natural), axis=1)


def craft_set(
    target: ClassifierParams,
    x: np.ndarray,
    y: np.ndarray,
    ids,
    spec: AttackSpec,
    base: ClassifierParams,
    band: Band | None = None,
    target_model_id: str = "arm0",
) -> AttackedSet:
    """Perturb every sample against `target`; the scoring mask keeps only
    samples the base model classifies correctly in natural form."""
    attack = pgd if spec.family == "pgd" else sap
    perturbed = attack(target, x, y, spec, band=band)
    mask = predict(base, x) == y
    return AttackedSet(
        ids=list(ids),
        labels=np.asarray(y),
        natural=np.asarray(x, dtype=np.float64),
        perturbed=perturbed,
        mask=mask,
        spec=spec,
        target_model_id=target_model_id,
    )


def _write_signals(directory: Path, ids, matrix: np.ndarray) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for rid, row in zip(ids, matrix):
        with open(directory / f"{rid}.txt", "w") as fh:
            fh.write("\n".join(repr(float(v)) for v in row))
            fh.write("\n")


def save_attacked_set(aset: AttackedSet, out_dir: str | Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_signals(out_dir / "natural", aset.ids, aset.natural)
    _write_signals(out_dir / "perturbed", aset.ids, aset.perturbed)
    deltas = aset.linf_deltas()
    with open(out_dir / "index.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["record_id", "label", "masked", "linf_delta"])
        for i, rid in enumerate(aset.ids):
            writer.writerow(
                [rid, int(aset.labels[i]), int(aset.mask[i]), repr(float(deltas[i]))]
            )
    manifest = {
        "family": aset.spec.family,
        "epsilon": aset.spec.eps,
        "alpha": aset.spec.alpha,
        "steps": aset.spec.steps,
        "kernel_bank": [list(k) for k in aset.spec.kernel_bank],
        "target_model_id": aset.target_model_id,
    }
    with open(out_dir / "attack_manifest.json", "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_attacked_set(in_dir: str | Path) -> AttackedSet:
    in_dir = Path(in_dir)
    index = in_dir / "index.csv"
    if not index.exists():
        raise FileNotFoundError(f"missing attacked-set index: {index}")
    with open(in_dir / "attack_manifest.json") as fh:
        manifest = json.load(fh)
    ids, labels, mask = [], [], []
    with open(index, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for rid, label, masked, _delta in reader:
            ids.append(rid)
            labels.append(int(label))
            mask.append(bool(int(masked)))

    def read_matrix(sub: str) -> np.ndarray:
        rows = []
        for rid in ids:
            path = in_dir / sub / f"{rid}.txt"
            with open(path) as fh:
                rows.append(np.array([float(t) for t in fh.read().split()], dtype=np.float64))
        return np.stack(rows)

    spec = AttackSpec.make(
        manifest["family"],
        manifest["epsilon"],
        steps=manifest["steps"],
        alpha=manifest["alpha"],
        kernel_bank=[tuple(k) for k in manifest["kernel_bank"]] or DEFAULT_SAP_KERNELS,
    )
    return AttackedSet(
        ids=ids,
        labels=np.array(labels, dtype=np.int64),
        natural=read_matrix("natural"),
        perturbed=read_matrix("perturbed"),
        mask=np.array(mask, dtype=bool),
        spec=spec,
        target_model_id=manifest["target_model_id"],
    )
