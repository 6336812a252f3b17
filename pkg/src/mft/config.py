"""Flat dotted-key text configuration for runs and the synthetic generator.

Grammar: one ``section.key = value`` per line, ``#`` comments, blank lines
ignored. Unknown keys are rejected. The fully resolved configuration is
echoed into every run's output directory.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .data import SynthSpec
from .model import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """A configuration file failed to parse or validate."""


def _parse_kv_lines(path) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or not value:
            raise ConfigError(f"{path}:{lineno}: empty key or value in {raw!r}")
        if key in out:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _convert(key: str, value: str, kind):
    try:
        if kind is bool:
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
            raise ValueError(value)
        return kind(value)
    except ValueError:
        raise ConfigError(f"key {key!r}: cannot parse {value!r} as {kind.__name__}") from None


def _opt_int(key: str, value: str):
    if value.lower() in ("none", "auto"):
        return None
    return _convert(key, value, int)


MODEL_KEYS = {
    "model.num_aus": ("num_aus", int),
    "model.embed_dim": ("embed_dim", int),
    "model.te_heads": ("te_heads", int),
    "model.te_layers_per_stage": ("te_layers_per_stage", int),
    "model.head_dim": ("head_dim", None),  # int or "none"
    "model.mlp_dim": ("mlp_dim", int),
    "model.dropout_rate": ("dropout_rate", float),
    "model.num_stages": ("num_stages", int),
    "model.ft_heads": ("ft_heads", int),
    "model.ft_layers": ("ft_layers", int),
    "model.au_feat_dim": ("au_feat_dim", int),
    "model.backbone_hidden": ("backbone_hidden", int),
    "model.fusion_order": ("fusion_order", None),  # comma-separated names
    "model.pre_ln": ("pre_ln", bool),
    "model.average_heads": ("average_heads", bool),
    "model.activation": ("activation", str),
}

TRAIN_KEYS = {
    "train.lr0": ("lr0", float),
    "train.momentum": ("momentum", float),
    "train.weight_decay": ("weight_decay", float),
    "train.decay_start_epoch": ("decay_start_epoch", int),
    "train.decay_factor": ("decay_factor", float),
    "train.epochs": ("epochs", int),
    "train.batch_size": ("batch_size", int),
    "train.lambda1": ("lambda1", float),
    "train.lambda2": ("lambda2", float),
    "train.eps_clamp": ("eps_clamp", float),
    "train.invert_class_weights": ("invert_class_weights", bool),
}

RUN_KEYS = {
    "data.manifest": ("manifest", str),
    "data.zscore": ("zscore", str),
    "cv.folds": ("cv_folds", int),
    "cv.fold": ("cv_fold", int),
    "run.seed": ("seed", int),
    "run.variant": ("variant", str),
    "run.out_dir": ("out_dir", str),
    "run.threshold": ("threshold", float),
    "run.fold_aggregation": ("fold_aggregation", str),
}

SYNTH_KEYS = {
    "synth.num_aus": ("num_aus", int),
    "synth.subjects": ("subjects", int),
    "synth.samples_per_subject": ("samples_per_subject", int),
    "synth.alpha_name": ("alpha_name", str),
    "synth.beta_name": ("beta_name", str),
    "synth.alpha_dim": ("alpha_dim", int),
    "synth.beta_dim": ("beta_dim", int),
    "synth.noise_sigma": ("noise_sigma", float),
    "synth.subject_sigma": ("subject_sigma", float),
}


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    manifest: str | None = None
    cv_folds: int = 3
    cv_fold: int = 0
    seed: int = 0
    variant: str = "full"
    out_dir: str = "out"
    threshold: float = 0.5
    fold_aggregation: str = "mean"
    zscore: str = "scalar"


def load_run_config(path) -> RunConfig:
    """Parse, validate, and fill defaults; any unrecognized key is an error."""
    raw = _parse_kv_lines(path)
    model_kw: dict = {}
    train_kw: dict = {}
    run_kw: dict = {}
    for key, value in raw.items():
        if key in MODEL_KEYS:
            field, kind = MODEL_KEYS[key]
            if key == "model.head_dim":
                model_kw[field] = _opt_int(key, value)
            elif key == "model.fusion_order":
                model_kw[field] = tuple(part.strip() for part in value.split(",") if part.strip())
            else:
                model_kw[field] = _convert(key, value, kind)
        elif key in TRAIN_KEYS:
            field, kind = TRAIN_KEYS[key]
            train_kw[field] = _convert(key, value, kind)
        elif key in RUN_KEYS:
            field, kind = RUN_KEYS[key]
            run_kw[field] = _convert(key, value, kind)
        else:
            raise ConfigError(f"unknown configuration key {key!r}")
    run_kw.setdefault("seed", 0)
    train_kw.setdefault("seed", run_kw["seed"])
    try:
        model_cfg = ModelConfig(**model_kw)
        train_cfg = TrainConfig(**train_kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    cfg = RunConfig(model=model_cfg, train=train_cfg, **run_kw)
    if cfg.fold_aggregation not in ("mean", "pooled"):
        raise ConfigError(f"run.fold_aggregation must be mean or pooled, got {cfg.fold_aggregation!r}")
    if cfg.zscore not in ("scalar", "per_element"):
        raise ConfigError(f"data.zscore must be scalar or per_element, got {cfg.zscore!r}")
    if cfg.cv_folds < 2:
        raise ConfigError(f"cv.folds must be >= 2, got {cfg.cv_folds}")
    if not 0 <= cfg.cv_fold < cfg.cv_folds:
        raise ConfigError(f"cv.fold {cfg.cv_fold} outside [0, {cfg.cv_folds})")
    return cfg


def load_synth_spec(path) -> SynthSpec:
    raw = _parse_kv_lines(path)
    kw: dict = {}
    for key, value in raw.items():
        if key not in SYNTH_KEYS:
            raise ConfigError(f"unknown synth key {key!r}")
        field, kind = SYNTH_KEYS[key]
        kw[field] = _convert(key, value, kind)
    try:
        return SynthSpec(**kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def echo_run_config(cfg: RunConfig) -> str:
    """Every key with its resolved value, in the file grammar."""
    lines = []
    m, t = cfg.model, cfg.train
    pairs: list[tuple[str, object]] = [
        ("model.num_aus", m.num_aus),
        ("model.embed_dim", m.embed_dim),
        ("model.te_heads", m.te_heads),
        ("model.te_layers_per_stage", m.te_layers_per_stage),
        ("model.head_dim", "none" if m.head_dim is None else m.head_dim),
        ("model.mlp_dim", m.mlp_dim),
        ("model.dropout_rate", m.dropout_rate),
        ("model.num_stages", m.num_stages),
        ("model.ft_heads", m.ft_heads),
        ("model.ft_layers", m.ft_layers),
        ("model.au_feat_dim", m.au_feat_dim),
        ("model.backbone_hidden", m.backbone_hidden),
        ("model.fusion_order", ",".join(m.fusion_order) if m.fusion_order else "auto"),
        ("model.pre_ln", str(m.pre_ln).lower()),
        ("model.average_heads", str(m.average_heads).lower()),
        ("model.activation", m.activation),
        ("train.lr0", t.lr0),
        ("train.momentum", t.momentum),
        ("train.weight_decay", t.weight_decay),
        ("train.decay_start_epoch", t.decay_start_epoch),
        ("train.decay_factor", t.decay_factor),
        ("train.epochs", t.epochs),
        ("train.batch_size", t.batch_size),
        ("train.lambda1", t.lambda1),
        ("train.lambda2", t.lambda2),
        ("train.eps_clamp", t.eps_clamp),
        ("train.invert_class_weights", str(t.invert_class_weights).lower()),
        ("data.manifest", cfg.manifest or ""),
        ("data.zscore", cfg.zscore),
        ("cv.folds", cfg.cv_folds),
        ("cv.fold", cfg.cv_fold),
        ("run.seed", cfg.seed),
        ("run.variant", cfg.variant),
        ("run.out_dir", cfg.out_dir),
        ("run.threshold", cfg.threshold),
        ("run.fold_aggregation", cfg.fold_aggregation),
    ]
    for key, value in pairs:
        if value != "":
            lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
