"""The encoder: embeddings, alternating-attention blocks, tied decoder.

Layout per block (pre-norm, residual): attention with rotary embeddings
and a per-layer global/local choice, then a GeGLU MLP. A LayerNorm follows
the embedding layer, and the first block has no pre-attention norm since
it would sit right next to it. No linear layer carries a bias except the
final decoder, whose weight is the embedding matrix itself (tied storage).

Also houses the weight lifecycle: scaled-normal initialization, growing a
model by center-tiling a smaller one with wraparound, checkpoint
averaging, and context extension by swapping the global-layer rope base.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from .attention import AttentionSpec, RopeParams, attend
from .batching import make_rng
from .errors import ConfigError, InputError
from .tensor import (Tensor, add, add_row_vector, dropout, embedding_lookup,
                     gelu, layer_norm, matmul, mul, reshape, split_columns,
                     transpose)

INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    layers: int
    hidden: int
    heads: int
    intermediate: int
    glu_expansion: int
    vocab: int
    max_seq: int
    global_every: int = 3
    window: int = 128
    theta_global: float = 160_000.0
    theta_local: float = 10_000.0
    norm_eps: float = 1e-5
    dropout_attn_out: float = 0.0

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigError(f"layers must be >= 1, got {self.layers}")
        if self.hidden % self.heads != 0:
            raise ConfigError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if (self.hidden // self.heads) % 2 != 0:
            raise ConfigError(f"head_dim {self.hidden // self.heads} must be even")
        if self.vocab % 64 != 0:
            raise ConfigError(f"vocab must be a multiple of 64, got {self.vocab}")
        if self.glu_expansion != 2 * self.intermediate:
            raise ConfigError(
                f"glu_expansion {self.glu_expansion} != 2 * intermediate {self.intermediate}"
            )
        if self.global_every < 1:
            raise ConfigError(f"global_every must be >= 1, got {self.global_every}")
        if self.window <= 0 or self.window % 2 != 0:
            raise ConfigError(f"window must be even and positive, got {self.window}")
        if self.max_seq < 1:
            raise ConfigError(f"max_seq must be >= 1, got {self.max_seq}")
        if self.theta_global <= 0 or self.theta_local <= 0:
            raise ConfigError("rope thetas must be positive")
        if self.norm_eps <= 0:
            raise ConfigError(f"norm_eps must be positive, got {self.norm_eps}")
        if not 0.0 <= self.dropout_attn_out < 1.0:
            raise ConfigError(f"dropout_attn_out must be in [0, 1), got {self.dropout_attn_out}")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def is_global(self, layer: int) -> bool:
        return layer % self.global_every == 0

    def layer_theta(self, layer: int) -> float:
        return self.theta_global if self.is_global(layer) else self.theta_local

    def layer_spec(self, layer: int) -> AttentionSpec:
        window = None if self.is_global(layer) else self.window
        return AttentionSpec(self.heads, window,
                             RopeParams(self.layer_theta(layer), self.head_dim))

    @classmethod
    def base(cls, **overrides) -> "ModelConfig":
        cfg = cls(layers=22, hidden=768, heads=12, intermediate=1152,
                  glu_expansion=2304, vocab=50368, max_seq=8192)
        return dataclasses.replace(cfg, **overrides) if overrides else cfg

    @classmethod
    def large(cls, **overrides) -> "ModelConfig":
        cfg = cls(layers=28, hidden=1024, heads=16, intermediate=2624,
                  glu_expansion=5248, vocab=50368, max_seq=8192)
        return dataclasses.replace(cfg, **overrides) if overrides else cfg

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        cfg = cls(layers=3, hidden=64, heads=2, intermediate=96,
                  glu_expansion=192, vocab=64, max_seq=128, window=8,
                  theta_global=10_000.0)
        return dataclasses.replace(cfg, **overrides) if overrides else cfg

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        fields = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - fields
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter name and shape, in canonical (storage) order."""
    shapes: dict[str, tuple[int, ...]] = {
        "embedding.weight": (config.vocab, config.hidden),
        "embed_norm.gamma": (config.hidden,),
    }
    for l in range(config.layers):
        if l > 0:
            shapes[f"layers.{l}.attn_norm.gamma"] = (config.hidden,)
        shapes[f"layers.{l}.attn.qkv.weight"] = (config.hidden, 3 * config.hidden)
        shapes[f"layers.{l}.attn.out.weight"] = (config.hidden, config.hidden)
        shapes[f"layers.{l}.mlp_norm.gamma"] = (config.hidden,)
        shapes[f"layers.{l}.mlp.glu.weight"] = (config.hidden, config.glu_expansion)
        shapes[f"layers.{l}.mlp.down.weight"] = (config.intermediate, config.hidden)
    shapes["final_norm.gamma"] = (config.hidden,)
    shapes["decoder.bias"] = (config.vocab,)
    return shapes


_RESIDUAL_OUT = ("attn.out.weight", "mlp.down.weight")


class EncoderModel:
    """Config plus named parameters; forward works on packed batches."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        expected = param_shapes(config)
        missing = set(expected) - set(params)
        extra = set(params) - set(expected)
        if missing or extra:
            raise ConfigError(f"parameter set mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, shape in expected.items():
            if params[name].data.shape != shape:
                raise ConfigError(
                    f"{name} has shape {params[name].data.shape}, expected {shape}"
                )
        self.config = config
        # canonical order regardless of the dict handed in
        self.params: dict[str, Tensor] = {name: params[name] for name in expected}

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def copy(self) -> "EncoderModel":
        params = {name: Tensor(p.data.copy(), requires_grad=p.requires_grad, dtype=p.data.dtype)
                  for name, p in self.params.items()}
        return EncoderModel(self.config, params)

    def to_dtype(self, dtype) -> "EncoderModel":
        params = {name: Tensor(p.data, requires_grad=p.requires_grad, dtype=dtype)
                  for name, p in self.params.items()}
        return EncoderModel(self.config, params)

    def forward(self, batch, rng: np.random.Generator | None = None) -> Tensor:
        """Logits for every token position of a packed batch.

        ``rng`` enables the configured attention-output dropout; omit it
        for deterministic evaluation passes.
        """
        cfg = self.config
        ids = batch.input_ids()
        if ids.max() >= cfg.vocab:
            raise InputError(f"token id {ids.max()} >= vocab {cfg.vocab}")
        if batch.seq_lens.max() > cfg.max_seq:
            raise InputError(
                f"sequence of {batch.seq_lens.max()} tokens exceeds max_seq {cfg.max_seq}"
            )
        p = self.params
        cu = batch.cu_seqlens
        tokens = ids.size
        eps = cfg.norm_eps

        x = embedding_lookup(p["embedding.weight"], ids)
        x = layer_norm(x, p["embed_norm.gamma"], eps)
        for l in range(cfg.layers):
            h = x if l == 0 else layer_norm(x, p[f"layers.{l}.attn_norm.gamma"], eps)
            qkv = matmul(h, p[f"layers.{l}.attn.qkv.weight"])
            q, k, v = split_columns(qkv, 3)
            shape3 = (tokens, cfg.heads, cfg.head_dim)
            att = attend(reshape(q, shape3), reshape(k, shape3), reshape(v, shape3),
                         cu, cfg.layer_spec(l))
            out = matmul(reshape(att, (tokens, cfg.hidden)),
                         p[f"layers.{l}.attn.out.weight"])
            if cfg.dropout_attn_out > 0 and rng is not None:
                out = dropout(out, cfg.dropout_attn_out, rng)
            x = add(x, out)

            h = layer_norm(x, p[f"layers.{l}.mlp_norm.gamma"], eps)
            gate, up = split_columns(matmul(h, p[f"layers.{l}.mlp.glu.weight"]), 2)
            x = add(x, matmul(mul(gelu(gate), up), p[f"layers.{l}.mlp.down.weight"]))

        x = layer_norm(x, p["final_norm.gamma"], eps)
        return add_row_vector(matmul(x, transpose(p["embedding.weight"])),
                              p["decoder.bias"])


def init_megatron(config: ModelConfig, seed) -> EncoderModel:
    """Normal(0, 0.02) weights with residual projections scaled by 1/sqrt(2L)."""
    rng = make_rng(seed)
    residual_scale = 1.0 / math.sqrt(2.0 * config.layers)
    params: dict[str, Tensor] = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".gamma"):
            data = np.ones(shape)
        elif name.endswith(".bias"):
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, INIT_STD, size=shape)
            if name.endswith(_RESIDUAL_OUT):
                data *= residual_scale
        params[name] = Tensor(data, requires_grad=True)
    return EncoderModel(config, params)


# ---------------------------------------------------------------------------
# tiling a small model into a larger one


def _wrap_indices(large: int, small: int) -> np.ndarray:
    """Indices that center the small axis and wrap cyclically at the edges."""
    offset = (large - small) // 2
    return (np.arange(large) - offset) % small


def center_tile(base: np.ndarray, shape) -> np.ndarray:
    """Center ``base`` in an array of ``shape``; fill the rest by wraparound."""
    shape = tuple(shape)
    if len(shape) != base.ndim:
        raise ConfigError(f"rank mismatch: base {base.ndim}-d, target {len(shape)}-d")
    for large, small in zip(shape, base.shape):
        if large < small:
            raise ConfigError(f"target dim {large} smaller than base dim {small}")
    idx = [_wrap_indices(large, small) for large, small in zip(shape, base.shape)]
    return base[np.ix_(*idx)]


def _tile_rows_by_id(base: np.ndarray, rows: int, cols) -> np.ndarray:
    # token-id axes keep their identity; extra ids wrap cyclically
    row_idx = np.arange(rows) % base.shape[0]
    if base.ndim == 1:
        return base[row_idx]
    return base[np.ix_(row_idx, _wrap_indices(cols, base.shape[1]))]


def tile_from_base(base: EncoderModel, large_config: ModelConfig,
                   gopher_scaling: bool = True) -> EncoderModel:
    """Grow a model: center each base matrix in the large one, wrap the edges.

    Embedding rows follow token ids, attention weights are tiled per head,
    and large layer l sources base layer (l mod base.layers). With
    ``gopher_scaling`` the residual-output projections are rescaled by
    sqrt(base.layers / large.layers) to preserve residual-stream variance.
    """
    b = base.config
    lc = large_config
    checks = [("layers", b.layers, lc.layers), ("hidden", b.hidden, lc.hidden),
              ("heads", b.heads, lc.heads), ("head_dim", b.head_dim, lc.head_dim),
              ("intermediate", b.intermediate, lc.intermediate),
              ("vocab", b.vocab, lc.vocab), ("max_seq", b.max_seq, lc.max_seq)]
    for what, small, large in checks:
        if large < small:
            raise ConfigError(f"large {what} {large} < base {what} {small}")

    scale = math.sqrt(b.layers / lc.layers) if gopher_scaling else 1.0
    bp = {name: p.data for name, p in base.params.items()}
    dtype = bp["embedding.weight"].dtype
    params: dict[str, Tensor] = {}
    for name, shape in param_shapes(lc).items():
        if name.startswith("layers."):
            _, layer_str, rest = name.split(".", 2)
            src_layer = int(layer_str) % b.layers
            src_name = f"layers.{src_layer}.{rest}"
            if src_name not in bp:
                # base layer 0 has no pre-attention norm; fall back to init value
                data = np.ones(shape)
            elif rest == "attn.qkv.weight":
                view = bp[src_name].reshape(b.hidden, 3, b.heads, b.head_dim)
                data = center_tile(view, (lc.hidden, 3, lc.heads, lc.head_dim))
                data = data.reshape(shape)
            elif rest == "attn.out.weight":
                view = bp[src_name].reshape(b.heads, b.head_dim, b.hidden)
                data = center_tile(view, (lc.heads, lc.head_dim, lc.hidden))
                data = data.reshape(shape)
            elif rest == "mlp.glu.weight":
                view = bp[src_name].reshape(b.hidden, 2, b.intermediate)
                data = center_tile(view, (lc.hidden, 2, lc.intermediate))
                data = data.reshape(shape)
            else:
                data = center_tile(bp[src_name], shape)
            if name.endswith(_RESIDUAL_OUT):
                data = data * scale
        elif name in ("embedding.weight", "decoder.bias"):
            data = _tile_rows_by_id(bp[name], shape[0], shape[1] if len(shape) > 1 else None)
        else:
            data = center_tile(bp[name], shape)
        params[name] = Tensor(data.copy(), requires_grad=True, dtype=dtype)
    return EncoderModel(lc, params)


# ---------------------------------------------------------------------------
# checkpoint averaging and context extension


def average_checkpoints(models) -> EncoderModel:
    """Elementwise arithmetic mean of every parameter."""
    models = list(models)
    if not models:
        raise InputError("cannot average zero models")
    first = models[0]
    for m in models[1:]:
        if m.config != first.config:
            raise ConfigError("cannot average models with different configs")
    params = {}
    for name, p in first.params.items():
        stacked = np.stack([m.params[name].data for m in models])
        mean = stacked.mean(axis=0, dtype=np.float64).astype(p.data.dtype)
        params[name] = Tensor(mean, requires_grad=True, dtype=p.data.dtype)
    return EncoderModel(first.config, params)


def extend_context(model: EncoderModel, new_theta_global: float,
                   new_max_seq: int) -> EncoderModel:
    """Swap the global-layer rope base and raise max_seq; weights untouched."""
    if new_theta_global <= 0:
        raise ConfigError(f"theta must be positive, got {new_theta_global}")
    if new_max_seq < model.config.max_seq:
        raise ConfigError(
            f"new max_seq {new_max_seq} < current {model.config.max_seq}"
        )
    config = dataclasses.replace(model.config, theta_global=float(new_theta_global),
                                 max_seq=int(new_max_seq))
    copied = model.copy()
    return EncoderModel(config, copied.params)
