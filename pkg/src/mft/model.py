"""Dual-pipeline fused-transformer model for multi-label AU detection.

Two modality streams are embedded into per-AU tokens, encoded by stacks of
transformer encoder layers, and repeatedly fused by fusion-transformer
modules whose attention draws queries from the first modality and keys and
values from every modality. Each pipeline ends in a per-AU classifier.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import tensor as T
from .tensor import ContractError, Rng, ShapeError, Tensor

CHECKPOINT_MAGIC = "mft-checkpoint v1"

TRAIN = "train"
EVAL = "eval"

ACTIVATIONS = {"relu": T.relu, "tanh": T.tanh}


@dataclass(frozen=True)
class ModalityInput:
    """Declared input surface of one modality: a flat vector or a small image."""

    name: str
    shape: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        if len(self.shape) not in (1, 3) or any(s <= 0 for s in self.shape):
            raise ContractError(f"modality {self.name}: shape must be (dim,) or (c,h,w), got {self.shape}")

    @property
    def kind(self) -> str:
        return "vector" if len(self.shape) == 1 else "image"


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; every count is validated at construction."""

    num_aus: int = 12
    embed_dim: int = 128
    te_heads: int = 4
    te_layers_per_stage: int = 3
    head_dim: int | None = 32
    mlp_dim: int = 256
    dropout_rate: float = 0.5
    num_stages: int = 4
    ft_heads: int = 2
    ft_layers: int = 1
    au_feat_dim: int = 16
    backbone_hidden: int = 64
    modalities: tuple[ModalityInput, ...] = ()
    fusion_order: tuple[str, ...] = ()
    pre_ln: bool = False
    average_heads: bool = False
    activation: str = "relu"

    def __post_init__(self):
        counts = {
            "num_aus": self.num_aus,
            "embed_dim": self.embed_dim,
            "te_heads": self.te_heads,
            "te_layers_per_stage": self.te_layers_per_stage,
            "mlp_dim": self.mlp_dim,
            "ft_heads": self.ft_heads,
            "ft_layers": self.ft_layers,
            "au_feat_dim": self.au_feat_dim,
            "backbone_hidden": self.backbone_hidden,
        }
        for key, value in counts.items():
            if value < 1:
                raise ContractError(f"{key} must be positive, got {value}")
        if self.num_stages < 0:
            raise ContractError(f"num_stages must be >= 0, got {self.num_stages}")
        if self.head_dim is None and self.embed_dim % self.te_heads != 0:
            raise ContractError(
                f"embed_dim {self.embed_dim} not divisible by te_heads {self.te_heads} and no head_dim set"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ContractError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")
        names = [m.name for m in self.modalities]
        if len(set(names)) != len(names):
            raise ContractError(f"duplicate modality names: {names}")
        if not self.fusion_order and names:
            object.__setattr__(self, "fusion_order", tuple(names))
        if names:  # a bare config may carry an order before modalities are known
            for name in self.fusion_order:
                if name not in names:
                    raise ContractError(f"fusion_order names unknown modality {name!r}")

    @property
    def dk(self) -> int:
        return self.head_dim if self.head_dim is not None else self.embed_dim // self.te_heads

    def modality(self, name: str) -> ModalityInput:
        for m in self.modalities:
            if m.name == name:
                return m
        raise ContractError(f"unknown modality {name!r}")

    def require_dual(self) -> tuple[str, str]:
        if len(self.fusion_order) != 2:
            raise ContractError(f"dual-pipeline model needs exactly 2 modalities, got {self.fusion_order}")
        if self.ft_heads != 2:
            raise ContractError(f"fusion attention uses one head per modality; ft_heads={self.ft_heads}")
        return self.fusion_order[0], self.fusion_order[1]

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["modalities"] = [{"name": m.name, "shape": list(m.shape)} for m in self.modalities]
        d["fusion_order"] = list(self.fusion_order)
        return d

    @staticmethod
    def from_dict(d: Mapping) -> "ModelConfig":
        d = dict(d)
        d["modalities"] = tuple(ModalityInput(m["name"], tuple(m["shape"])) for m in d["modalities"])
        d["fusion_order"] = tuple(d["fusion_order"])
        return ModelConfig(**d)


@dataclass
class AUEmbeddings:
    """Per-AU token matrix for one modality, layer-normalized at creation."""

    tokens: Tensor
    modality: str


class ParameterStore:
    """Ordered mapping from stable hierarchical names to learnable tensors."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = T.parameter(np.asarray(data, dtype=np.float64))
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._params[name]
        except KeyError:
            raise KeyError(f"no parameter named {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self):
        return iter(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def num_values(self) -> int:
        return sum(t.size for t in self._params.values())

    def copy(self) -> "ParameterStore":
        out = ParameterStore()
        for name, t in self._params.items():
            out.add(name, t.data.copy())
        return out

    def merge(self, other: "ParameterStore") -> "ParameterStore":
        """New store holding this store's tensors plus ``other``'s (names must not collide)."""
        out = ParameterStore()
        for name, t in self._params.items():
            out._params[name] = t
        for name, t in other._params.items():
            if name in out._params:
                raise ContractError(f"merge collision on parameter {name!r}")
            out._params[name] = t
        return out


# ---------------------------------------------------------------------------
# initialization


def _add_weight(ps: ParameterStore, rng: Rng, name: str, shape, fan_in: int) -> None:
    # fan-in scaling everywhere: under the post-norm residual wiring, layer
    # norm rescales every sublayer output to unit variance, so a tiny global
    # init only inflates the norm's gain and stalls optimization
    ps.add(name, rng.child(name).normal(shape, std=1.0 / math.sqrt(fan_in)))


def _add_bias(ps: ParameterStore, name: str, shape) -> None:
    ps.add(name, np.zeros(shape))


def _add_layer_norm(ps: ParameterStore, prefix: str, dim: int) -> None:
    ps.add(f"{prefix}/gamma", np.ones(dim))
    ps.add(f"{prefix}/beta", np.zeros(dim))


def _conv_out_hw(h: int, w: int, k: int = 3, stride: int = 2) -> tuple[int, int]:
    return (h - k) // stride + 1, (w - k) // stride + 1


def _init_backbone(ps: ParameterStore, rng: Rng, prefix: str, modality: ModalityInput, cfg: ModelConfig) -> None:
    out_dim = cfg.num_aus * cfg.au_feat_dim
    if modality.kind == "vector":
        (in_dim,) = modality.shape
        _add_weight(ps, rng, f"{prefix}/fc1/w", (in_dim, cfg.backbone_hidden), in_dim)
        _add_bias(ps, f"{prefix}/fc1/b", cfg.backbone_hidden)
        _add_weight(ps, rng, f"{prefix}/fc2/w", (cfg.backbone_hidden, out_dim), cfg.backbone_hidden)
        _add_bias(ps, f"{prefix}/fc2/b", out_dim)
    else:
        c, h, w = modality.shape
        ch = cfg.backbone_hidden
        for i in range(3):
            cin = c if i == 0 else ch
            _add_weight(ps, rng, f"{prefix}/conv{i + 1}/w", (ch, cin, 3, 3), cin * 9)
            _add_bias(ps, f"{prefix}/conv{i + 1}/b", ch)
            h, w = _conv_out_hw(h, w)
            if h < 1 or w < 1:
                raise ContractError(f"modality {modality.name}: image {modality.shape} too small for 3 conv blocks")
        _add_weight(ps, rng, f"{prefix}/fc/w", (ch * h * w, out_dim), ch * h * w)
        _add_bias(ps, f"{prefix}/fc/b", out_dim)


def _init_embed(ps: ParameterStore, rng: Rng, prefix: str, cfg: ModelConfig) -> None:
    _add_weight(ps, rng, f"{prefix}/w", (cfg.num_aus, cfg.au_feat_dim, cfg.embed_dim), cfg.au_feat_dim)
    _add_bias(ps, f"{prefix}/b", (cfg.num_aus, cfg.embed_dim))
    _add_layer_norm(ps, f"{prefix}/ln", cfg.embed_dim)


def _init_ffn(ps: ParameterStore, rng: Rng, prefix: str, cfg: ModelConfig) -> None:
    _add_weight(ps, rng, f"{prefix}/fc1/w", (cfg.embed_dim, cfg.mlp_dim), cfg.embed_dim)
    _add_bias(ps, f"{prefix}/fc1/b", cfg.mlp_dim)
    _add_weight(ps, rng, f"{prefix}/fc2/w", (cfg.mlp_dim, cfg.embed_dim), cfg.mlp_dim)
    _add_bias(ps, f"{prefix}/fc2/b", cfg.embed_dim)


def _init_encoder_layer(ps: ParameterStore, rng: Rng, prefix: str, cfg: ModelConfig) -> None:
    for i in range(cfg.te_heads):
        for w in ("wq", "wk", "wv"):
            _add_weight(ps, rng, f"{prefix}/msa/head{i}/{w}", (cfg.embed_dim, cfg.dk), cfg.embed_dim)
    _add_weight(ps, rng, f"{prefix}/msa/out/w", (cfg.te_heads * cfg.dk, cfg.embed_dim), cfg.te_heads * cfg.dk)
    _add_bias(ps, f"{prefix}/msa/out/b", cfg.embed_dim)
    _add_layer_norm(ps, f"{prefix}/ln1", cfg.embed_dim)
    _init_ffn(ps, rng, f"{prefix}/ffn", cfg)
    _add_layer_norm(ps, f"{prefix}/ln2", cfg.embed_dim)


def _init_te_stack(ps: ParameterStore, rng: Rng, prefix: str, cfg: ModelConfig) -> None:
    for layer in range(cfg.te_layers_per_stage):
        _init_encoder_layer(ps, rng, f"{prefix}/layer{layer}", cfg)


def _init_fusion_layer(ps: ParameterStore, rng: Rng, prefix: str, cfg: ModelConfig, m: int) -> None:
    for j in range(m):
        _add_weight(ps, rng, f"{prefix}/fuse/q{j}/w", (cfg.embed_dim, cfg.dk), cfg.embed_dim)
        _add_weight(ps, rng, f"{prefix}/fuse/k{j}/w", (cfg.embed_dim, cfg.dk), cfg.embed_dim)
        _add_weight(ps, rng, f"{prefix}/fuse/v{j}/w", (cfg.embed_dim, cfg.dk), cfg.embed_dim)
    _add_weight(ps, rng, f"{prefix}/fuse/out/w", (m * cfg.dk, cfg.embed_dim), m * cfg.dk)
    _add_bias(ps, f"{prefix}/fuse/out/b", cfg.embed_dim)
    _add_layer_norm(ps, f"{prefix}/ln1", cfg.embed_dim)
    _init_ffn(ps, rng, f"{prefix}/ffn", cfg)
    _add_layer_norm(ps, f"{prefix}/ln2", cfg.embed_dim)


def _init_fusion_module(ps: ParameterStore, rng: Rng, prefix: str, cfg: ModelConfig, m: int = 2) -> None:
    for layer in range(cfg.ft_layers):
        _init_fusion_layer(ps, rng, f"{prefix}/layer{layer}", cfg, m)


def _init_classifier(ps: ParameterStore, rng: Rng, prefix: str, cfg: ModelConfig) -> None:
    _add_weight(ps, rng, f"{prefix}/w", (cfg.num_aus, cfg.embed_dim, 1), cfg.embed_dim)
    _add_bias(ps, f"{prefix}/b", (cfg.num_aus, 1))


def pipeline_of(cfg: ModelConfig, modality: str) -> int:
    """Pipeline index (1 or 2) a modality runs through, per the fusion order."""
    alpha, beta = cfg.require_dual()
    if modality == alpha:
        return 1
    if modality == beta:
        return 2
    raise ContractError(f"modality {modality!r} not in fusion order {cfg.fusion_order}")


def init_full_params(cfg: ModelConfig, rng: Rng) -> ParameterStore:
    """All weights of the dual-pipeline model with fusion modules."""
    alpha, beta = cfg.require_dual()
    ps = ParameterStore()
    for name in (alpha, beta):
        _init_backbone(ps, rng, f"backbone/{name}", cfg.modality(name), cfg)
        _init_embed(ps, rng, f"embed/{name}", cfg)
    _init_fusion_module(ps, rng, "ft0", cfg)
    for s in range(1, cfg.num_stages + 1):
        _init_te_stack(ps, rng, f"pipe1/stage{s}", cfg)
        _init_te_stack(ps, rng, f"pipe2/stage{s}", cfg)
        _init_fusion_module(ps, rng, f"ft{s}", cfg)
    _init_classifier(ps, rng, "cls1", cfg)
    _init_classifier(ps, rng, "cls2", cfg)
    return ps


def init_single_params(cfg: ModelConfig, rng: Rng, modality: str) -> ParameterStore:
    """Weights of one pipeline only: backbone, embedding, encoder stages, classifier."""
    pipe = pipeline_of(cfg, modality)
    ps = ParameterStore()
    _init_backbone(ps, rng, f"backbone/{modality}", cfg.modality(modality), cfg)
    _init_embed(ps, rng, f"embed/{modality}", cfg)
    for s in range(1, cfg.num_stages + 1):
        _init_te_stack(ps, rng, f"pipe{pipe}/stage{s}", cfg)
    _init_classifier(ps, rng, f"cls{pipe}", cfg)
    return ps


# ---------------------------------------------------------------------------
# forward ops


def _affine(x: Tensor, params: ParameterStore, prefix: str) -> Tensor:
    return T.add(T.matmul(x, params[f"{prefix}/w"]), params[f"{prefix}/b"])


def backbone_forward(
    x,
    params: ParameterStore,
    prefix: str,
    modality: ModalityInput,
    cfg: ModelConfig,
    mode: str = EVAL,
    rng: Rng | None = None,
) -> Tensor:
    """Feature extractor mapping a raw modality batch to [B, T * au_feat_dim]."""
    x = T.as_tensor(x)
    if x.shape[1:] != modality.shape:
        raise ShapeError(
            f"modality {modality.name}: expected input shaped [B, {modality.shape}], got {x.shape}"
        )
    if modality.kind == "vector":
        h = T.relu(_affine(x, params, f"{prefix}/fc1"))
        return _affine(h, params, f"{prefix}/fc2")
    h = x
    for i in range(3):
        h = T.relu(T.conv2d(h, params[f"{prefix}/conv{i + 1}/w"], params[f"{prefix}/conv{i + 1}/b"], stride=2))
    h = T.reshape(h, (h.shape[0], -1))
    return _affine(h, params, f"{prefix}/fc")


def au_embed(feature: Tensor, params: ParameterStore, prefix: str, cfg: ModelConfig, modality: str) -> AUEmbeddings:
    """Split backbone features into per-AU chunks and map each through its own
    affine embedding; layer norm is applied and no positional term is added."""
    feature = T.as_tensor(feature)
    width = feature.shape[-1]
    if width % cfg.num_aus != 0:
        raise ShapeError(f"feature width {width} not divisible by num_aus {cfg.num_aus}")
    chunks = T.reshape(feature, (*feature.shape[:-1], cfg.num_aus, width // cfg.num_aus))
    tokens = T.per_row_affine(chunks, params[f"{prefix}/w"], params[f"{prefix}/b"])
    tokens = T.layer_norm(tokens, params[f"{prefix}/ln/gamma"], params[f"{prefix}/ln/beta"])
    return AUEmbeddings(tokens=tokens, modality=modality)


def _attend(q: Tensor, k: Tensor, v: Tensor, dk: int) -> Tensor:
    scores = T.mul(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(dk))
    return T.matmul(T.softmax(scores), v)


def msa(x: Tensor, params: ParameterStore, prefix: str, heads: int, head_dim: int) -> Tensor:
    """Scaled dot-product multi-head self-attention with output projection."""
    outs = []
    for i in range(heads):
        q = T.matmul(x, params[f"{prefix}/head{i}/wq"])
        k = T.matmul(x, params[f"{prefix}/head{i}/wk"])
        v = T.matmul(x, params[f"{prefix}/head{i}/wv"])
        outs.append(_attend(q, k, v, head_dim))
    return _affine(T.concat_last_axis(outs), params, f"{prefix}/out")


def _ffn(
    x: Tensor,
    params: ParameterStore,
    prefix: str,
    cfg: ModelConfig,
    mode: str,
    rng: Rng | None,
    use_dropout: bool,
) -> Tensor:
    act = ACTIVATIONS[cfg.activation]
    h = act(_affine(x, params, f"{prefix}/fc1"))
    if use_dropout:
        h = T.dropout(h, cfg.dropout_rate, rng, train=(mode == TRAIN))
    return _affine(h, params, f"{prefix}/fc2")


def _sublayer(x: Tensor, params: ParameterStore, ln_prefix: str, cfg: ModelConfig, apply_fn) -> Tensor:
    """Residual wiring around one sublayer.

    Default: normalize the sublayer output, then add the residual. With
    pre_ln the input is normalized before the sublayer and the raw output is
    added back.
    """
    gamma, beta = params[f"{ln_prefix}/gamma"], params[f"{ln_prefix}/beta"]
    if cfg.pre_ln:
        return T.add(x, apply_fn(T.layer_norm(x, gamma, beta)))
    return T.add(T.layer_norm(apply_fn(x), gamma, beta), x)


def encoder_layer(
    x: Tensor,
    params: ParameterStore,
    prefix: str,
    cfg: ModelConfig,
    mode: str = EVAL,
    rng: Rng | None = None,
) -> Tensor:
    x = _sublayer(x, params, f"{prefix}/ln1", cfg, lambda h: msa(h, params, f"{prefix}/msa", cfg.te_heads, cfg.dk))
    x = _sublayer(
        x, params, f"{prefix}/ln2", cfg, lambda h: _ffn(h, params, f"{prefix}/ffn", cfg, mode, rng, use_dropout=True)
    )
    return x


def te_stack(
    x: Tensor,
    params: ParameterStore,
    prefix: str,
    cfg: ModelConfig,
    mode: str = EVAL,
    rng: Rng | None = None,
) -> Tensor:
    for layer in range(cfg.te_layers_per_stage):
        x = encoder_layer(x, params, f"{prefix}/layer{layer}", cfg, mode, rng)
    return x


def fusion_attention_multi(xs: list[Tensor], params: ParameterStore, prefix: str, head_dim: int) -> Tensor:
    """One attention head per modality, every query projected from the first.

    Head j attends the keys and values of modality j; head outputs are
    concatenated along the feature axis and projected back to the token width.
    """
    if not xs:
        raise ContractError("fusion attention needs at least one modality")
    first = xs[0]
    for x in xs[1:]:
        if x.shape != first.shape:
            raise ShapeError(f"fusion inputs disagree: {first.shape} vs {x.shape}")
    outs = []
    for j, xj in enumerate(xs):
        q = T.matmul(first, params[f"{prefix}/q{j}/w"])
        k = T.matmul(xj, params[f"{prefix}/k{j}/w"])
        v = T.matmul(xj, params[f"{prefix}/v{j}/w"])
        outs.append(_attend(q, k, v, head_dim))
    return _affine(T.concat_last_axis(outs), params, f"{prefix}/out")


def fusion_attention(x_alpha: Tensor, x_beta: Tensor, params: ParameterStore, prefix: str, head_dim: int) -> Tensor:
    return fusion_attention_multi([x_alpha, x_beta], params, prefix, head_dim)


def fusion_transformer(
    x_alpha: Tensor,
    x_beta: Tensor,
    params: ParameterStore,
    prefix: str,
    cfg: ModelConfig,
) -> Tensor:
    """Encoder-layer wiring with self-attention replaced by fusion attention.

    The residual stream belongs to the query modality; dropout is disabled
    here regardless of mode.
    """
    h = x_alpha
    for layer in range(cfg.ft_layers):
        lp = f"{prefix}/layer{layer}"
        h = _sublayer(h, params, f"{lp}/ln1", cfg, lambda t: fusion_attention(t, x_beta, params, f"{lp}/fuse", cfg.dk))
        h = _sublayer(h, params, f"{lp}/ln2", cfg, lambda t: _ffn(t, params, f"{lp}/ffn", cfg, EVAL, None, use_dropout=False))
    return h


def classifier(x: Tensor, params: ParameterStore, prefix: str) -> Tensor:
    """Per-AU affine map from token width to one logit each."""
    logits = T.per_row_affine(x, params[f"{prefix}/w"], params[f"{prefix}/b"])
    return T.reshape(logits, logits.shape[:-1])


def _embed_modality(
    inputs: Mapping[str, object],
    params: ParameterStore,
    cfg: ModelConfig,
    name: str,
    mode: str,
    rng: Rng | None,
) -> Tensor:
    feat = backbone_forward(inputs[name], params, f"backbone/{name}", cfg.modality(name), cfg, mode, rng)
    return au_embed(feat, params, f"embed/{name}", cfg, name).tokens


def mft_forward(
    inputs: Mapping[str, object],
    params: ParameterStore,
    cfg: ModelConfig,
    mode: str = EVAL,
    rng: Rng | None = None,
) -> tuple[Tensor, Tensor]:
    """Dual-pipeline forward pass.

    Pipeline 1 carries the fused stream: the initial fusion module combines
    both embeddings, then each encoder stage is followed by another fusion
    with pipeline 2's current tokens. Pipeline 2 encodes the second modality
    alone. Returns (fusion logits, second-pipeline logits), each [B, T].
    """
    alpha, beta = cfg.require_dual()
    e_alpha = _embed_modality(inputs, params, cfg, alpha, mode, rng)
    e_beta = _embed_modality(inputs, params, cfg, beta, mode, rng)
    h1 = fusion_transformer(e_alpha, e_beta, params, "ft0", cfg)
    h2 = e_beta
    for s in range(1, cfg.num_stages + 1):
        h1 = te_stack(h1, params, f"pipe1/stage{s}", cfg, mode, rng)
        h2 = te_stack(h2, params, f"pipe2/stage{s}", cfg, mode, rng)
        h1 = fusion_transformer(h1, h2, params, f"ft{s}", cfg)
    return classifier(h1, params, "cls1"), classifier(h2, params, "cls2")


def single_modality_forward(
    x,
    params: ParameterStore,
    cfg: ModelConfig,
    modality: str,
    mode: str = EVAL,
    rng: Rng | None = None,
) -> Tensor:
    """One pipeline without any fusion module: backbone, embedding, encoder
    stages, classifier. Equals the corresponding branch of the dual model."""
    pipe = pipeline_of(cfg, modality)
    tokens = _embed_modality({modality: x}, params, cfg, modality, mode, rng)
    for s in range(1, cfg.num_stages + 1):
        tokens = te_stack(tokens, params, f"pipe{pipe}/stage{s}", cfg, mode, rng)
    return classifier(tokens, params, f"cls{pipe}")


def late_fusion_forward(
    inputs: Mapping[str, object],
    params: ParameterStore,
    cfg: ModelConfig,
    mode: str = EVAL,
    rng: Rng | None = None,
) -> Tensor:
    """Arithmetic mean of the two single-modality sigmoid outputs, per AU."""
    alpha, beta = cfg.require_dual()
    p1 = T.sigmoid(single_modality_forward(inputs[alpha], params, cfg, alpha, mode, rng))
    p2 = T.sigmoid(single_modality_forward(inputs[beta], params, cfg, beta, mode, rng))
    return T.mul(T.add(p1, p2), 0.5)


# ---------------------------------------------------------------------------
# checkpoint I/O


def save_checkpoint(path, params: ParameterStore, cfg: ModelConfig) -> None:
    """Versioned flat container: JSON header (config + name/shape index)
    followed by each tensor's raw little-endian float64 bytes in index order."""
    header = {
        "config": cfg.to_dict(),
        "params": [{"name": name, "shape": list(t.shape)} for name, t in params.items()],
    }
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC.encode("utf-8") + b"\n")
        f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for _, t in params.items():
            f.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ParameterStore, ModelConfig]:
    with open(path, "rb") as f:
        magic = f.readline().decode("utf-8").rstrip("\n")
        if magic != CHECKPOINT_MAGIC:
            raise ContractError(f"not a checkpoint file (header {magic!r})")
        header = json.loads(f.readline().decode("utf-8"))
        cfg = ModelConfig.from_dict(header["config"])
        ps = ParameterStore()
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = f.read(count * 8)
            if len(raw) != count * 8:
                raise ContractError(f"checkpoint truncated at parameter {entry['name']!r}")
            ps.add(entry["name"], np.frombuffer(raw, dtype="<f8").reshape(shape).copy())
    return ps, cfg
