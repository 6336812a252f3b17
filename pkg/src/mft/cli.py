"""Command-line surface: dataset synthesis, training, evaluation, the
ablation suites, and the gradient check.

Exit codes: 0 success, 1 configuration or data error, 2 numerical failure.
Every command writes only below its configured output directory.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import data as D
from . import metrics as ME
from . import model as M
from . import tensor as T
from . import training as TR
from .config import ConfigError, RunConfig, echo_run_config, load_run_config, load_synth_spec
from .data import LoadError
from .model import ModalityInput, ModelConfig
from .tensor import ContractError, Rng, ShapeError
from .training import NumericalError

GRADCHECK_TOL = 1e-4

CONFIG_ECHO = "config.txt"
CHECKPOINT_FILE = "checkpoint.bin"
TRAIN_LOG = "train_log.txt"
EVAL_CSV = "eval.csv"
GRADCHECK_TXT = "gradcheck.txt"


def resolve_model_cfg(base: ModelConfig, manifest: D.DatasetManifest) -> ModelConfig:
    """Bind the architecture to the manifest's modality descriptors."""
    mods = tuple(ModalityInput(name, shape) for name, shape in manifest.modalities)
    order = base.fusion_order or tuple(m.name for m in mods)
    return base.replace(modalities=mods, fusion_order=order)


def _prepare_split(cfg: RunConfig, manifest: D.DatasetManifest):
    folds = D.subject_folds(manifest.subjects(), cfg.cv_folds, cfg.seed)
    samples = D.load_all(manifest)
    train, test = folds.split(samples, cfg.cv_fold)
    stats = D.zscore(train, per_element=(cfg.zscore == "per_element"))
    return D.standardize_all(stats, train), D.standardize_all(stats, test)


def _load_manifest(cfg: RunConfig) -> D.DatasetManifest:
    if not cfg.manifest:
        raise ConfigError("data.manifest is required for this command")
    return D.load_manifest(cfg.manifest)


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_ECHO).write_text(echo_run_config(cfg), encoding="utf-8")
    return out


def cmd_synth(args) -> int:
    spec = load_synth_spec(args.spec) if args.spec else D.SynthSpec()
    manifest = D.synth_generate(spec, args.seed, args.out)
    print(f"wrote {len(manifest.rows)} samples to {args.out} (C={manifest.num_labels})")
    return 0


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    manifest = _load_manifest(cfg)
    model_cfg = resolve_model_cfg(cfg.model, manifest)
    out = _out_dir(cfg)
    train, test = _prepare_split(cfg, manifest)
    params, logs, effective_cfg = TR.train_variant(cfg.variant, train, test, model_cfg, cfg.train)
    M.save_checkpoint(out / CHECKPOINT_FILE, params, effective_cfg)
    with open(out / TRAIN_LOG, "w", encoding="utf-8") as f:
        for row in logs:
            f.write(TR.format_log_row(row) + "\n")
    print(f"trained {cfg.variant}: last val F1 {logs[-1].val_f1:.4f}; checkpoint in {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_run_config(args.config)
    manifest = _load_manifest(cfg)
    out = _out_dir(cfg)
    params, model_cfg = M.load_checkpoint(args.checkpoint)
    _, test = _prepare_split(cfg, manifest)
    probs = TR.predict(cfg.variant, params, model_cfg, test)
    per_au, avg = ME.f1_scores(probs, D.stack_labels(test), cfg.threshold)
    report = ME.MetricsReport()
    report.add_scores(cfg.variant, ME.order_label(cfg.variant, model_cfg), cfg.cv_fold, per_au)
    report.save_csv(out / EVAL_CSV)
    print(f"eval {cfg.variant} fold {cfg.cv_fold}: avg F1 {avg:.4f}; report in {out / EVAL_CSV}")
    return 0


def cmd_ablate(args) -> int:
    cfg = load_run_config(args.config)
    manifest = _load_manifest(cfg)
    model_cfg = resolve_model_cfg(cfg.model, manifest)
    out = _out_dir(cfg)
    if args.suite == "components":
        report = ME.run_ablation(manifest, model_cfg, cfg.train, cfg.cv_folds, cfg.seed, cfg.threshold)
    elif args.suite == "order":
        report = ME.run_fusion_order(manifest, model_cfg, cfg.train, cfg.cv_folds, cfg.seed, cfg.threshold)
    else:
        report = ME.run_lambda_sweep(manifest, model_cfg, cfg.train, cfg.cv_folds, cfg.seed, threshold=cfg.threshold)
    path = out / f"ablation_{args.suite}.csv"
    report.save_csv(path)
    for variant in report.variants():
        print(f"{variant}: avg F1 {report.mean_avg_f1(variant):.2f}")
    if args.suite == "lambda":
        l1, l2, score = ME.best_lambda(report)
        print(f"best lambda pair: ({l1:g}, {l2:g}) at avg F1 {score:.2f}")
    print(f"report in {path}")
    return 0


def gradcheck_loss_builder(model_cfg: ModelConfig, params: M.ParameterStore, train_cfg: TR.TrainConfig, rng: Rng):
    """Deterministic scalar loss of the full model on one fixed random batch."""
    batch = 2
    inputs = {m.name: rng.child(f"inputs/{m.name}").normal((batch, *m.shape)) for m in model_cfg.modalities}
    targets = rng.child("targets").bernoulli(0.5, (batch, model_cfg.num_aus))
    weights = TR.ClassWeights(np.ones(model_cfg.num_aus))

    def loss():
        lf, lb = M.mft_forward(inputs, params, model_cfg, M.EVAL)
        loss_f = TR.weighted_bce(T.sigmoid(lf), targets, weights)
        loss_b = TR.weighted_bce(T.sigmoid(lb), targets, weights)
        return TR.combined_loss(loss_f, loss_b, train_cfg)

    return loss


def cmd_gradcheck(args) -> int:
    cfg = load_run_config(args.config)
    if cfg.manifest:
        model_cfg = resolve_model_cfg(cfg.model, D.load_manifest(cfg.manifest))
    else:
        mods = (ModalityInput("alpha", (6,)), ModalityInput("beta", (5,)))
        model_cfg = cfg.model.replace(modalities=mods, fusion_order=("alpha", "beta"))
    out = _out_dir(cfg)
    rng = Rng(cfg.seed)
    params = M.init_full_params(model_cfg, rng.child("init"))
    loss = gradcheck_loss_builder(model_cfg, params, cfg.train, rng)
    report = T.gradcheck(loss, dict(params.items()))
    worst_name = max(report, key=report.get)
    worst = report[worst_name]
    with open(out / GRADCHECK_TXT, "w", encoding="utf-8") as f:
        for name, err in report.items():
            f.write(f"{name} {err:.3e}\n")
        f.write(f"max {worst_name} {worst:.3e}\n")
    print(f"gradcheck over {len(report)} parameters ({params.num_values()} values): max rel err {worst:.3e} at {worst_name}")
    if worst >= GRADCHECK_TOL:
        print(f"FAIL: {worst:.3e} >= {GRADCHECK_TOL}")
        return 2
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mft", description="multi-modal fused-transformer AU detection")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--spec", help="synth spec file (flat dotted keys); defaults when omitted")
    p.add_argument("--out", required=True, help="output directory for manifest and tensor files")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one variant on one fold split")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on the configured fold")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation suite")
    p.add_argument("--config", required=True)
    p.add_argument("--suite", required=True, choices=("components", "order", "lambda"))
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="compare tape gradients to finite differences")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, LoadError, ContractError, ShapeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
