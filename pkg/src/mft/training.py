"""Weighted multi-label BCE training for the fused-transformer variants.

The loss multiplies each AU's positive term by a frequency-derived weight,
the two pipeline losses are combined with fixed positive coefficients, and
optimization is plain SGD with momentum, L2 decay folded into the velocity,
and a step learning-rate schedule.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import data as D
from . import model as M
from . import tensor as T
from .model import EVAL, TRAIN, ModelConfig, ParameterStore
from .tensor import ContractError, Rng, ShapeError, Tensor


class NumericalError(RuntimeError):
    """Training produced a non-finite value."""


@dataclass(frozen=True)
class ClassWeights:
    """Per-AU positive-term coefficients; the least weighted AU is exactly 1."""

    p: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "p", np.asarray(self.p, dtype=np.float64))


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    decay_start_epoch: int = 4
    decay_factor: float = 0.1
    epochs: int = 5
    batch_size: int = 32
    lambda1: float = 0.6
    lambda2: float = 0.4
    seed: int = 0
    eps_clamp: float = 1e-12
    invert_class_weights: bool = False

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0 or self.lambda1 + self.lambda2 <= 0:
            raise ContractError(f"loss coefficients must be non-negative and not both zero, got {self.lambda1}, {self.lambda2}")
        if self.lr0 <= 0:
            raise ContractError(f"lr0 must be positive, got {self.lr0}")
        if self.batch_size < 1:
            raise ContractError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ContractError(f"epochs must be >= 1, got {self.epochs}")

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


@dataclass
class OptimizerState:
    """SGD momentum buffers, one per parameter, zero-initialized."""

    velocity: dict[str, np.ndarray]

    @staticmethod
    def for_params(params: ParameterStore) -> "OptimizerState":
        return OptimizerState({name: np.zeros_like(t.data) for name, t in params.items()})


@dataclass
class EpochLogRow:
    branch: str
    epoch: int
    lr: float
    loss_fusion: float | None
    loss_beta: float | None
    loss: float
    val_f1: float


# ---------------------------------------------------------------------------
# loss pieces


def compute_class_weights(labels: np.ndarray, invert: bool = False) -> ClassWeights:
    """Positive weights from label frequencies on the training split.

    Each AU's occurrence share is divided by the smallest share, so the
    rarest AU gets weight 1 and more frequent AUs get proportionally more.
    ``invert`` flips to the conventional inverse-frequency weighting.
    """
    labels = np.asarray(labels, dtype=np.float64)
    if labels.ndim != 2:
        raise ShapeError(f"labels must be N x C, got shape {labels.shape}")
    col = labels.sum(axis=0)
    if labels.sum() <= 0:
        raise ContractError("class weights need at least one positive label")
    empty = np.flatnonzero(col == 0)
    if empty.size:
        raise ContractError(f"AU {empty[0] + 1} has no positive labels in the training split")
    if invert:
        p = col.max() / col
    else:
        p = col / col.min()
    return ClassWeights(p)


def weighted_bce(probs: Tensor, targets: np.ndarray, weights: ClassWeights) -> Tensor:
    """Batch-mean BCE, summed over AUs, with the positive term scaled per AU.

    Probabilities are clamped away from 0 and 1 through the log's input
    clamp, so saturated predictions yield a finite loss.
    """
    targets = np.asarray(targets, dtype=np.float64)
    if probs.shape != targets.shape:
        raise ShapeError(f"probs {probs.shape} vs targets {targets.shape}")
    batch = probs.shape[0]
    pos_coeff = weights.p * targets
    neg_coeff = 1.0 - targets
    term = T.add(T.mul(T.log(probs), pos_coeff), T.mul(T.log(T.sub(1.0, probs)), neg_coeff))
    return T.mul(T.tsum(term), -1.0 / batch)


def combined_loss(loss_fusion: Tensor, loss_beta: Tensor, cfg: TrainConfig) -> Tensor:
    return T.add(T.mul(loss_fusion, cfg.lambda1), T.mul(loss_beta, cfg.lambda2))


def lr_at_epoch(epoch: int, cfg: TrainConfig) -> float:
    """Constant at lr0, then shrunk by the decay factor every epoch from the
    decay start onward."""
    if epoch < 1:
        raise ContractError(f"epoch is 1-based, got {epoch}")
    if epoch < cfg.decay_start_epoch:
        return cfg.lr0
    return cfg.lr0 * cfg.decay_factor ** (epoch - cfg.decay_start_epoch + 1)


def sgd_step(params: ParameterStore, state: OptimizerState, lr: float, cfg: TrainConfig) -> None:
    """v <- momentum * v + grad + weight_decay * param; param <- param - lr * v.

    Decay is skipped for biases and layer-norm affines.
    """
    for name, t in params.items():
        if t.grad is None:
            raise ContractError(f"parameter {name!r} has no gradient; run backward first")
        v = state.velocity[name]
        leaf = name.rsplit("/", 1)[-1]
        decay = cfg.weight_decay if leaf in ("w", "wq", "wk", "wv") else 0.0
        v *= cfg.momentum
        v += t.grad
        if decay:
            v += decay * t.data
        t.data -= lr * v


# ---------------------------------------------------------------------------
# variants


VARIANT_FULL = "full"
VARIANT_FT_ONLY = "ft_only"
VARIANT_LATE_FUSION = "late_fusion"
VARIANT_LATE_FUSION_TE = "late_fusion_te"
SINGLE_PREFIX = "single:"


def parse_variant(variant: str, cfg: ModelConfig) -> str:
    known = {VARIANT_FULL, VARIANT_FT_ONLY, VARIANT_LATE_FUSION, VARIANT_LATE_FUSION_TE}
    if variant in known:
        return variant
    if variant.startswith(SINGLE_PREFIX):
        name = variant[len(SINGLE_PREFIX) :]
        cfg.modality(name)  # raises on unknown modality
        return variant
    raise ContractError(f"unknown variant {variant!r}")


def effective_model_cfg(variant: str, cfg: ModelConfig) -> ModelConfig:
    """Late fusion and the fusion-only ablation drop the encoder stages."""
    if variant in (VARIANT_FT_ONLY, VARIANT_LATE_FUSION):
        return cfg.replace(num_stages=0)
    return cfg


def _forward_probs(variant: str, inputs, params: ParameterStore, cfg: ModelConfig, mode: str, rng) -> Tensor:
    if variant in (VARIANT_FULL, VARIANT_FT_ONLY):
        lf, lb = M.mft_forward(inputs, params, cfg, mode, rng)
        if cfg.average_heads:
            return T.mul(T.add(T.sigmoid(lf), T.sigmoid(lb)), 0.5)
        return T.sigmoid(lf)
    if variant in (VARIANT_LATE_FUSION, VARIANT_LATE_FUSION_TE):
        return M.late_fusion_forward(inputs, params, cfg, mode, rng)
    modality = variant[len(SINGLE_PREFIX) :]
    return T.sigmoid(M.single_modality_forward(inputs[modality], params, cfg, modality, mode, rng))


def predict(variant: str, params: ParameterStore, cfg: ModelConfig, samples, chunk: int = 256) -> np.ndarray:
    """Eval-mode probabilities for a list of samples, [N, C]."""
    out = []
    for start in range(0, len(samples), chunk):
        part = samples[start : start + chunk]
        inputs = D.stack_inputs(part, [m.name for m in cfg.modalities])
        out.append(_forward_probs(variant, inputs, params, cfg, EVAL, None).data)
    return np.concatenate(out, axis=0)


# ---------------------------------------------------------------------------
# the epoch loop


def fit(
    variant: str,
    train_samples: list,
    val_samples: list,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    branch: str = "",
) -> tuple[ParameterStore, list[EpochLogRow]]:
    """Train one variant on a fixed split; returns final parameters and the
    per-epoch log. Mini-batches are reshuffled every epoch from the run seed
    and the last partial batch is kept; there is no early stopping."""
    from .metrics import f1_scores

    if not train_samples or not val_samples:
        raise ContractError("fit needs non-empty train and validation splits")
    variant = parse_variant(variant, model_cfg)
    if variant in (VARIANT_LATE_FUSION, VARIANT_LATE_FUSION_TE):
        raise ContractError("late fusion is trained branch by branch; use train_variant")
    cfg = effective_model_cfg(variant, model_cfg)

    rng = Rng(train_cfg.seed)
    if variant.startswith(SINGLE_PREFIX):
        modality = variant[len(SINGLE_PREFIX) :]
        params = M.init_single_params(cfg, rng.child("init"), modality)
        needed = [modality]
    else:
        params = M.init_full_params(cfg, rng.child("init"))
        needed = [m.name for m in cfg.modalities]

    labels = D.stack_labels(train_samples)
    weights = compute_class_weights(labels, invert=train_cfg.invert_class_weights)
    state = OptimizerState.for_params(params)
    shuffle_rng = rng.child("shuffle")
    dropout_rng = rng.child("dropout")
    dual = not variant.startswith(SINGLE_PREFIX)

    n = len(train_samples)
    log: list[EpochLogRow] = []
    for epoch in range(1, train_cfg.epochs + 1):
        lr = lr_at_epoch(epoch, train_cfg)
        perm = shuffle_rng.permutation(n)
        sums = {"fusion": 0.0, "beta": 0.0, "loss": 0.0}
        steps = 0
        for start in range(0, n, train_cfg.batch_size):
            batch = [train_samples[i] for i in perm[start : start + train_cfg.batch_size]]
            inputs = D.stack_inputs(batch, needed)
            targets = D.stack_labels(batch)
            params.zero_grad()
            if dual:
                lf, lb = M.mft_forward(inputs, params, cfg, TRAIN, dropout_rng)
                loss_f = weighted_bce(T.sigmoid(lf), targets, weights)
                loss_b = weighted_bce(T.sigmoid(lb), targets, weights)
                loss = combined_loss(loss_f, loss_b, train_cfg)
                sums["fusion"] += float(loss_f.data)
                sums["beta"] += float(loss_b.data)
            else:
                probs = T.sigmoid(M.single_modality_forward(inputs[needed[0]], params, cfg, needed[0], TRAIN, dropout_rng))
                loss = weighted_bce(probs, targets, weights)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericalError(f"non-finite loss at epoch {epoch}, step {steps + 1} ({variant})")
            T.backward(loss)
            sgd_step(params, state, lr, train_cfg)
            sums["loss"] += value
            steps += 1
        probs = predict(variant, params, cfg, val_samples)
        _, val_avg = f1_scores(probs, D.stack_labels(val_samples))
        log.append(
            EpochLogRow(
                branch=branch,
                epoch=epoch,
                lr=lr,
                loss_fusion=sums["fusion"] / steps if dual else None,
                loss_beta=sums["beta"] / steps if dual else None,
                loss=sums["loss"] / steps,
                val_f1=val_avg,
            )
        )
    return params, log


def train_variant(
    variant: str,
    train_samples: list,
    val_samples: list,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
) -> tuple[ParameterStore, list[EpochLogRow], ModelConfig]:
    """Train any variant. Late fusion trains each modality's pipeline
    independently and merges the two stores; everything else is one fit."""
    variant = parse_variant(variant, model_cfg)
    cfg = effective_model_cfg(variant, model_cfg)
    if variant in (VARIANT_LATE_FUSION, VARIANT_LATE_FUSION_TE):
        alpha, beta = cfg.require_dual()
        stores = []
        logs: list[EpochLogRow] = []
        for name in (alpha, beta):
            ps, branch_log = fit(f"{SINGLE_PREFIX}{name}", train_samples, val_samples, cfg, train_cfg, branch=name)
            stores.append(ps)
            logs.extend(branch_log)
        return stores[0].merge(stores[1]), logs, cfg
    params, logs = fit(variant, train_samples, val_samples, cfg, train_cfg)
    return params, logs, cfg


def format_log_row(row: EpochLogRow) -> str:
    def fmt(x):
        return "-" if x is None else f"{x:.6f}"

    branch = f"branch={row.branch} " if row.branch else ""
    return (
        f"{branch}epoch={row.epoch} lr={row.lr:.6g} "
        f"loss_fusion={fmt(row.loss_fusion)} loss_beta={fmt(row.loss_beta)} "
        f"loss={row.loss:.6f} val_f1={row.val_f1:.4f}"
    )
