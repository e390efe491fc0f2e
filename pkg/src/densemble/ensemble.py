"""Sequential training of three-arm ensembles and their evaluation.

Four ensemble kinds share one recipe: arm 0 is always an unfiltered
cross-entropy baseline (the attack target); arms 1 and 2 optionally see
a single spectral band of the input (fcor / fdec) and optionally carry
the decorrelation penalty against all previously trained arms (dec /
fdec).  Arms train strictly in order because each decorrelating arm
regresses against the frozen feature caches of its predecessors.

Everything is deterministic given the config seeds: data shuffling,
initialization and projection draws use separate named streams, so a
kind that skips the decorrelation path reproduces the plain baseline
bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .decorrelation import (
    DecorConfig,
    FeatureCache,
    build_cache,
    correlation_r2,
    ensemble_decor_loss,
)
from .fourier import RingFilterBank, apply_band
from .model import ArchConfig, ClassifierParams, forward, init_params, make_param_tensors

__all__ = [
    "KINDS",
    "ARMS_PER_ENSEMBLE",
    "ArmRole",
    "arm_roles",
    "AdamConfig",
    "AdamState",
    "adam_step",
    "TrainConfig",
    "batch_schedule",
    "train_arm",
    "train_ensemble",
    "metrics_from_correctness",
    "evaluate_arms",
    "correlation_report",
]

KINDS = ("cor", "dec", "fcor", "fdec")
ARMS_PER_ENSEMBLE = 3


@dataclass(frozen=True)
class ArmRole:
    band: int | None  # index into the filter bank, None = unfiltered
    decorrelate: bool


def arm_roles(kind: str) -> tuple[ArmRole, ...]:
    """Arm descriptors for one ensemble kind; arm 0 is always the
    unfiltered cross-entropy base model."""
    if kind not in KINDS:
        raise ValueError(f"unknown ensemble kind {kind!r}")
    filtered = kind in ("fcor", "fdec")
    decor = kind in ("dec", "fdec")
    return (
        ArmRole(band=None, decorrelate=False),
        ArmRole(band=0 if filtered else None, decorrelate=decor),
        ArmRole(band=1 if filtered else None, decorrelate=decor),
    )


@dataclass(frozen=True)
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @staticmethod
    def init(params: dict[str, np.ndarray]) -> "AdamState":
        return AdamState(
            m={k: np.zeros_like(v) for k, v in params.items()},
            v={k: np.zeros_like(v) for k, v in params.items()},
        )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    cfg: AdamConfig = AdamConfig(),
) -> None:
    """Standard bias-corrected Adam update, in place."""
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise RuntimeError(f"non-finite gradient for parameter {name}")
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = state.m[name] / (1 - b1**state.t)
        v_hat = state.v[name] / (1 - b2**state.t)
        p -= lr * m_hat / (np.sqrt(v_hat) + cfg.eps)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 80
    learning_rate: float = 1e-3
    adam: AdamConfig = AdamConfig()
    init_seed: int = 0
    shuffle_seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 2 or self.learning_rate <= 0:
            raise ValueError("invalid training configuration")


def batch_schedule(n: int, batch_size: int, perm: np.ndarray) -> list[np.ndarray]:
    """Slice a shuffled permutation into batches.

    A short tail is extended backwards to full size (overlapping the
    previous batch) so every batch has exactly `batch_size` rows whenever
    n >= batch_size.  The rule depends only on (n, batch_size), never on
    the ensemble kind, which keeps reduction runs bit-identical.
    """
    if n <= batch_size:
        return [perm]
    batches = [perm[i : i + batch_size] for i in range(0, n - batch_size + 1, batch_size)]
    if n % batch_size:
        batches.append(perm[n - batch_size :])
    return batches


@dataclass
class ArmResult:
    params: ClassifierParams
    cache: FeatureCache
    curve: list[dict] = field(repr=False)


def _arm_view(x: np.ndarray, role: ArmRole, bank: RingFilterBank | None) -> np.ndarray:
    if role.band is None:
        return x
    if bank is None:
        raise ValueError("filtered arm requires a filter bank")
    return apply_band(bank, role.band, x)


def train_arm(
    k: int,
    role: ArmRole,
    train_x: np.ndarray,
    train_y: np.ndarray,
    sample_ids: Sequence[str],
    arch: ArchConfig,
    cfg: TrainConfig,
    decor_cfg: DecorConfig,
    caches: Sequence[FeatureCache],
    bank: RingFilterBank | None = None,
) -> ArmResult:
    """Train one arm on its own (possibly band-filtered) view of the data.

    `train_x` is the unfiltered preprocessed training matrix; the arm's
    band is applied here once.  Returns the trained parameters, the
    arm's feature cache over the full training set, and the per-epoch
    loss curve.
    """
    n = train_x.shape[0]
    view = _arm_view(train_x, role, bank)
    active = role.decorrelate and decor_cfg.weight > 0 and len(caches) > 0
    if active:
        min_batch = min(cfg.batch_size, n)
        if min_batch <= decor_cfg.projection_dim + 1:
            raise ValueError(
                f"decorrelation needs batches larger than projection_dim+1="
                f"{decor_cfg.projection_dim + 1}, got {min_batch}"
            )
        if min_batch <= arch.feature_dim + 1:
            raise ValueError(
                f"decorrelation regression needs batches larger than "
                f"feature_dim+1={arch.feature_dim + 1}, got {min_batch}"
            )

    params = init_params(arch, np.random.SeedSequence([cfg.init_seed, k]))
    state = AdamState.init(params.tensors)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([cfg.shuffle_seed, k]))
    curve: list[dict] = []
    step = 0
    for epoch in range(cfg.epochs):
        perm = shuffle_rng.permutation(n)
        ce_vals, cor_vals = [], []
        for bidx in batch_schedule(n, cfg.batch_size, perm):
            pt = make_param_tensors(params, requires_grad=True)
            logits, feats = forward(params, view[bidx], param_tensors=pt)
            ce = ad.softmax_cross_entropy(logits, train_y[bidx])
            if active:
                step_seed = np.random.SeedSequence([decor_cfg.seed, k, step])
                cor = ensemble_decor_loss(feats, caches, bidx, decor_cfg, step_seed)
                loss = ad.add(ce, ad.scale(cor, decor_cfg.weight))
                cor_vals.append(cor.item())
            else:
                loss = ce
            loss.backward()
            grads = {name: t.grad for name, t in pt.items()}
            adam_step(params.tensors, grads, state, cfg.learning_rate, cfg.adam)
            ce_vals.append(ce.item())
            step += 1
        row = {"epoch": epoch, "ce": float(np.mean(ce_vals))}
        if active:
            row["cor"] = float(np.mean(cor_vals))
        curve.append(row)

    cache = build_cache(params, view, sample_ids, model_id=f"arm{k}")
    return ArmResult(params=params, cache=cache, curve=curve)


def train_ensemble(
    kind: str,
    train_x: np.ndarray,
    train_y: np.ndarray,
    sample_ids: Sequence[str],
    arch: ArchConfig,
    cfg: TrainConfig,
    decor_cfg: DecorConfig,
    bank: RingFilterBank | None = None,
) -> list[ArmResult]:
    """Train the three arms strictly sequentially; each decorrelating arm
    sees the caches of every arm trained before it."""
    results: list[ArmResult] = []
    for k, role in enumerate(arm_roles(kind)):
        caches = [r.cache for r in results] if role.decorrelate else []
        try:
            results.append(
                train_arm(
                    k, role, train_x, train_y, sample_ids, arch, cfg, decor_cfg,
                    caches, bank,
                )
            )
        except Exception as exc:
            raise RuntimeError(f"arm {k} of {kind} failed: {exc}") from exc
    return results


def metrics_from_correctness(correct: np.ndarray) -> dict[str, float]:
    """Ensemble metrics from an (arms, samples) boolean matrix."""
    if correct.ndim != 2 or correct.shape[1] == 0:
        raise ValueError("need a non-empty (arms, samples) correctness matrix")
    arms = correct.shape[0]
    hits = correct.sum(axis=0)
    out = {"average": float(correct.mean())}
    for x in range(1, arms + 1):
        out[f"p{x}"] = float(np.mean(hits >= x))
    return out


def evaluate_arms(
    arms: Sequence[ClassifierParams],
    roles: Sequence[ArmRole],
    x: np.ndarray,
    y: np.ndarray,
    mask: np.ndarray | None,
    bank: RingFilterBank | None = None,
) -> dict[str, float]:
    """Per-sample correctness over all arms (each on its own filtered
    view), reduced to average and P(>=x) metrics.  `mask` restricts the
    scored samples (attacked sets score only base-correct naturals)."""
    if mask is None:
        mask = np.ones(len(y), dtype=bool)
    if not np.any(mask):
        raise ValueError("evaluation mask is empty")
    correct = np.stack(
        [
            np.argmax(forward(p, _arm_view(x, role, bank))[0].data, axis=1) == y
            for p, role in zip(arms, roles)
        ]
    )
    metrics = metrics_from_correctness(correct[:, mask])
    metrics["n_masked"] = int(mask.sum())
    return metrics


def _full_features(
    params: ClassifierParams, x: np.ndarray, batch_size: int = 256
) -> np.ndarray:
    chunks = []
    for start in range(0, x.shape[0], batch_size):
        chunks.append(forward(params, x[start : start + batch_size])[1].data)
    return np.concatenate(chunks, axis=0)


def correlation_report(
    arms: Sequence[ClassifierParams],
    roles: Sequence[ArmRole],
    train_x: np.ndarray,
    bank: RingFilterBank | None = None,
) -> dict:
    """Pairwise feature R^2 over the full training set.

    OLS R^2 is direction dependent, so the full ordered matrix is
    reported along with the per-pair mean of both directions as the
    headline number.  Values are clamped to [0, 1] for reporting.
    """
    feats = [
        _full_features(p, _arm_view(train_x, role, bank))
        for p, role in zip(arms, roles)
    ]
    a = len(feats)
    raw = [[correlation_r2(feats[i], feats[j]) for j in range(a)] for i in range(a)]
    clamp = lambda v: float(min(1.0, max(0.0, v)))
    matrix = [[clamp(v) for v in row] for row in raw]
    pairs = {}
    off_diag = []
    for i in range(a):
        for j in range(i + 1, a):
            fwd, rev = matrix[i][j], matrix[j][i]
            pairs[f"{i}-{j}"] = {"forward": fwd, "reverse": rev, "mean": (fwd + rev) / 2}
            off_diag.extend([fwd, rev])
    return {
        "matrix": matrix,
        "matrix_raw": [[float(v) for v in row] for row in raw],
        "pairs": pairs,
        "mean_offdiag": float(np.mean(off_diag)),
    }
