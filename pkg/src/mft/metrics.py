"""Per-AU F1 scoring, the cross-validation driver, the ablation and
hyperparameter sweep harnesses, and CSV report emission."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data as D
from . import training as TR
from .model import ModelConfig
from .tensor import ContractError

# the coefficient grid swept on the first fold; the pair (0.6, 0.4) is the
# operating point used everywhere else
LAMBDA_GRID: tuple[tuple[float, float], ...] = (
    (0.2, 0.8),
    (0.3, 0.7),
    (0.4, 0.6),
    (0.5, 0.5),
    (0.6, 0.4),
    (0.7, 0.3),
    (0.8, 0.2),
    (1.0, 0.5),
)

AVG = "avg"
POOLED_FOLD = -1

CSV_HEADER = "variant,order,fold,au,f1"


@dataclass(frozen=True)
class ReportRow:
    variant: str
    order: str
    fold: int
    au: str  # 1-based AU index as text, or "avg"
    f1: float


class MetricsReport:
    """Rows of per-AU and average F1 keyed by (variant, order, fold).

    Equality and CSV round-trips compare F1 at the emitted 2-decimal
    precision; in-memory rows keep full precision so each avg row is the
    exact mean of its per-AU rows.
    """

    def __init__(self, rows: list[ReportRow] | None = None):
        self.rows: list[ReportRow] = list(rows) if rows else []

    def extend(self, rows) -> None:
        self.rows.extend(rows)

    def add_scores(self, variant: str, order: str, fold: int, per_au: np.ndarray) -> None:
        for k, value in enumerate(per_au):
            self.rows.append(ReportRow(variant, order, fold, str(k + 1), float(value)))
        self.rows.append(ReportRow(variant, order, fold, AVG, float(np.mean(per_au))))

    def variants(self) -> list[str]:
        seen = dict.fromkeys(row.variant for row in self.rows)
        return list(seen)

    def avg_rows(self, variant: str, order: str | None = None) -> list[ReportRow]:
        return [
            r
            for r in self.rows
            if r.variant == variant and r.au == AVG and (order is None or r.order == order) and r.fold != POOLED_FOLD
        ]

    def mean_avg_f1(self, variant: str, order: str | None = None) -> float:
        rows = self.avg_rows(variant, order)
        if not rows:
            raise ContractError(f"no avg rows for variant {variant!r}")
        return float(np.mean([r.f1 for r in rows]))

    def per_au_f1(self, variant: str, au_index: int, order: str | None = None) -> float:
        """Mean across folds of one AU's F1 (1-based index)."""
        rows = [
            r
            for r in self.rows
            if r.variant == variant and r.au == str(au_index) and (order is None or r.order == order) and r.fold != POOLED_FOLD
        ]
        if not rows:
            raise ContractError(f"no rows for variant {variant!r} au {au_index}")
        return float(np.mean([r.f1 for r in rows]))

    def to_csv_text(self) -> str:
        lines = [CSV_HEADER]
        for r in self.rows:
            lines.append(f"{r.variant},{r.order},{r.fold},{r.au},{r.f1:.2f}")
        return "\n".join(lines) + "\n"

    def save_csv(self, path) -> None:
        Path(path).write_text(self.to_csv_text(), encoding="utf-8", newline="\n")

    @staticmethod
    def from_csv_text(text: str) -> "MetricsReport":
        lines = [line for line in text.splitlines() if line.strip()]
        if not lines or lines[0] != CSV_HEADER:
            raise ContractError(f"bad report header: {lines[0] if lines else '<empty>'!r}")
        rows = []
        for line in lines[1:]:
            parts = line.split(",")
            if len(parts) != 5:
                raise ContractError(f"bad report row: {line!r}")
            rows.append(ReportRow(parts[0], parts[1], int(parts[2]), parts[3], float(parts[4])))
        return MetricsReport(rows)

    @staticmethod
    def load_csv(path) -> "MetricsReport":
        return MetricsReport.from_csv_text(Path(path).read_text(encoding="utf-8"))

    def __eq__(self, other) -> bool:
        if not isinstance(other, MetricsReport):
            return NotImplemented
        if len(self.rows) != len(other.rows):
            return False
        for a, b in zip(self.rows, other.rows):
            if (a.variant, a.order, a.fold, a.au) != (b.variant, b.order, b.fold, b.au):
                return False
            if f"{a.f1:.2f}" != f"{b.f1:.2f}":
                return False
        return True


def f1_scores(probs: np.ndarray, targets: np.ndarray, threshold: float = 0.5) -> tuple[np.ndarray, float]:
    """Per-AU F1 (scaled to [0, 100]) and their average.

    Predictions are prob >= threshold; an AU with no true or predicted
    positives scores 0 by convention.
    """
    probs = np.asarray(probs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if probs.shape != targets.shape:
        raise ContractError(f"probs {probs.shape} vs targets {targets.shape}")
    pred = probs >= threshold
    truth = targets > 0.5
    tp = np.logical_and(pred, truth).sum(axis=0).astype(np.float64)
    fp = np.logical_and(pred, ~truth).sum(axis=0).astype(np.float64)
    fn = np.logical_and(~pred, truth).sum(axis=0).astype(np.float64)
    denom = 2 * tp + fp + fn
    per_au = np.where(denom > 0, 100.0 * 2 * tp / np.where(denom > 0, denom, 1.0), 0.0)
    return per_au, float(per_au.mean())


def order_label(variant: str, cfg: ModelConfig) -> str:
    """Modality-or-order tag for report rows; kept free of commas so the CSV
    stays a plain comma-split format."""
    alpha, beta = cfg.require_dual()
    if variant.startswith(TR.SINGLE_PREFIX):
        return variant[len(TR.SINGLE_PREFIX) :]
    if variant in (TR.VARIANT_LATE_FUSION, TR.VARIANT_LATE_FUSION_TE):
        return f"{alpha}+{beta}"
    return f"f({alpha}->{beta})"


def _fold_probs(
    manifest: D.DatasetManifest,
    variant: str,
    model_cfg: ModelConfig,
    train_cfg: TR.TrainConfig,
    folds: D.FoldSplit,
    fold: int,
    samples: list[D.Sample],
    zscore_mode: str = "scalar",
) -> tuple[np.ndarray, np.ndarray]:
    train, test = folds.split(samples, fold)
    stats = D.zscore(train, per_element=(zscore_mode == "per_element"))
    train = D.standardize_all(stats, train)
    test = D.standardize_all(stats, test)
    params, _, cfg = TR.train_variant(variant, train, test, model_cfg, train_cfg)
    probs = TR.predict(variant, params, cfg, test)
    return probs, D.stack_labels(test)


def run_cv(
    manifest: D.DatasetManifest,
    variant: str,
    model_cfg: ModelConfig,
    train_cfg: TR.TrainConfig,
    k: int,
    fold_seed: int,
    threshold: float = 0.5,
    fold_aggregation: str = "mean",
    report: MetricsReport | None = None,
    zscore_mode: str = "scalar",
) -> MetricsReport:
    """Subject-exclusive k-fold cross-validation of one variant.

    Per fold, predictions over the held-out subjects are pooled into one
    confusion count per AU; fold scores are averaged by the caller. With
    fold_aggregation="pooled", extra rows under the pseudo-fold -1 pool
    predictions across all folds before scoring.
    """
    if fold_aggregation not in ("mean", "pooled"):
        raise ContractError(f"unknown fold_aggregation {fold_aggregation!r}")
    report = report if report is not None else MetricsReport()
    order = order_label(variant, model_cfg)
    folds = D.subject_folds(manifest.subjects(), k, fold_seed)
    samples = D.load_all(manifest)
    pooled_probs, pooled_targets = [], []
    for fold in range(k):
        probs, targets = _fold_probs(manifest, variant, model_cfg, train_cfg, folds, fold, samples, zscore_mode)
        per_au, _ = f1_scores(probs, targets, threshold)
        report.add_scores(variant, order, fold, per_au)
        if fold_aggregation == "pooled":
            pooled_probs.append(probs)
            pooled_targets.append(targets)
    if fold_aggregation == "pooled":
        per_au, _ = f1_scores(np.concatenate(pooled_probs), np.concatenate(pooled_targets), threshold)
        report.add_scores(variant, order, POOLED_FOLD, per_au)
    return report


ABLATION_VARIANTS = (
    TR.VARIANT_LATE_FUSION,
    TR.VARIANT_LATE_FUSION_TE,
    TR.VARIANT_FT_ONLY,
    TR.VARIANT_FULL,
)


def run_ablation(
    manifest: D.DatasetManifest,
    model_cfg: ModelConfig,
    train_cfg: TR.TrainConfig,
    k: int,
    fold_seed: int,
    threshold: float = 0.5,
) -> MetricsReport:
    """Component ablation matrix: late fusion with and without encoder
    stages, fusion modules without encoder stages, and the full model."""
    report = MetricsReport()
    for variant in ABLATION_VARIANTS:
        run_cv(manifest, variant, model_cfg, train_cfg, k, fold_seed, threshold, report=report)
    return report


def run_fusion_order(
    manifest: D.DatasetManifest,
    model_cfg: ModelConfig,
    train_cfg: TR.TrainConfig,
    k: int,
    fold_seed: int,
    threshold: float = 0.5,
) -> MetricsReport:
    """Train the full model under both query orders and report them side by side."""
    alpha, beta = model_cfg.require_dual()
    report = MetricsReport()
    for order in ((alpha, beta), (beta, alpha)):
        cfg = model_cfg.replace(fusion_order=order)
        run_cv(manifest, TR.VARIANT_FULL, cfg, train_cfg, k, fold_seed, threshold, report=report)
    return report


def run_lambda_sweep(
    manifest: D.DatasetManifest,
    model_cfg: ModelConfig,
    train_cfg: TR.TrainConfig,
    k: int,
    fold_seed: int,
    grid: tuple[tuple[float, float], ...] = LAMBDA_GRID,
    threshold: float = 0.5,
) -> MetricsReport:
    """Loss-coefficient sweep on the first fold only."""
    report = MetricsReport()
    order = order_label(TR.VARIANT_FULL, model_cfg)
    folds = D.subject_folds(manifest.subjects(), k, fold_seed)
    samples = D.load_all(manifest)
    for l1, l2 in grid:
        cfg_t = train_cfg.replace(lambda1=l1, lambda2=l2)
        probs, targets = _fold_probs(manifest, TR.VARIANT_FULL, model_cfg, cfg_t, folds, 0, samples)
        per_au, _ = f1_scores(probs, targets, threshold)
        report.add_scores(f"lambda_{l1:g}_{l2:g}", order, 0, per_au)
    return report


def best_lambda(report: MetricsReport) -> tuple[float, float, float]:
    """(lambda1, lambda2, avg F1) of the sweep's best grid point."""
    best: tuple[float, float, float] | None = None
    for variant in report.variants():
        if not variant.startswith("lambda_"):
            continue
        _, l1, l2 = variant.split("_")
        score = report.mean_avg_f1(variant)
        if best is None or score > best[2]:
            best = (float(l1), float(l2), score)
    if best is None:
        raise ContractError("report holds no lambda-sweep rows")
    return best
