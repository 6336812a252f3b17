"""Shared fixtures for the test suite: tiny configs and weight surgery."""

import numpy as np

from mft.model import ModalityInput, ModelConfig
from mft.tensor import Rng


def tiny_config(**overrides) -> ModelConfig:
    base = dict(
        num_aus=3,
        embed_dim=8,
        te_heads=2,
        te_layers_per_stage=1,
        head_dim=None,
        mlp_dim=16,
        dropout_rate=0.5,
        num_stages=1,
        ft_heads=2,
        ft_layers=1,
        au_feat_dim=4,
        backbone_hidden=8,
        modalities=(ModalityInput("alpha", (6,)), ModalityInput("beta", (5,))),
    )
    base.update(overrides)
    return ModelConfig(**base)


def zero_sublayers(params, prefix: str = "") -> None:
    """Zero every attention and feed-forward weight under ``prefix``; layer
    norm affines stay at their identity init, so each layer passes its
    residual stream through unchanged."""
    for name, t in params.items():
        if not name.startswith(prefix):
            continue
        if "/msa/" in name or "/fuse/" in name or "/ffn/" in name:
            t.data[...] = 0.0


def rand_inputs(cfg: ModelConfig, batch: int, seed: int = 0) -> dict:
    rng = Rng(seed)
    return {m.name: rng.child(m.name).normal((batch, *m.shape)) for m in cfg.modalities}


def permute_rows(x: np.ndarray, perm) -> np.ndarray:
    return x[..., perm, :]
