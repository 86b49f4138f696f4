"""Multi-head bidirectional attention over packed token streams.

Sequences of a minibatch are concatenated into one token stream with
boundaries tracked by ``cu_seqlens``; attention only ever connects tokens
of the same sequence. A layer is either global or local: local layers
additionally restrict attention to the symmetric band |i - j| <= window/2
(a ``window`` of 128 therefore allows a 129-token attended span, the
documented reading of the window size). Rotary embeddings rotate query/key
dimension pairs by sequence-relative position before scoring; rotation
covers the full head dimension.

The score/softmax/value core runs through :mod:`deskbert.kernels`
(compiled when available). :func:`attention_pair_count` is the analytic
cost model standing in for kernel-level efficiency claims.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from . import tensor as tz
from .errors import BatchError, ConfigError, DimensionError, InputError
from .tensor import Tensor


@dataclass(frozen=True)
class RopeParams:
    """Rotation base and head width for rotary embeddings."""

    theta: float
    head_dim: int

    def __post_init__(self):
        if self.theta <= 0:
            raise ConfigError(f"rope theta must be positive, got {self.theta}")
        if self.head_dim <= 0 or self.head_dim % 2 != 0:
            raise ConfigError(f"head_dim must be even and positive, got {self.head_dim}")


@dataclass(frozen=True)
class AttentionSpec:
    """Head count, optional sliding window, and rope parameters for one layer."""

    heads: int
    window: int | None
    rope: RopeParams

    def __post_init__(self):
        if self.heads <= 0:
            raise ConfigError(f"heads must be positive, got {self.heads}")
        if self.window is not None and (self.window <= 0 or self.window % 2 != 0):
            raise ConfigError(f"window must be even and positive, got {self.window}")


def validate_cu_seqlens(cu_seqlens, total_tokens: int) -> np.ndarray:
    cu = np.asarray(cu_seqlens, dtype=np.int64)
    if cu.ndim != 1 or cu.size < 2:
        raise BatchError("cu_seqlens needs at least [0, total]")
    if cu[0] != 0:
        raise BatchError("cu_seqlens must start at 0")
    if cu[-1] != total_tokens:
        raise BatchError(f"cu_seqlens must end at {total_tokens}, got {cu[-1]}")
    if not (np.diff(cu) > 0).all():
        raise BatchError("cu_seqlens must be strictly increasing")
    return np.ascontiguousarray(cu)


def sequence_positions(cu_seqlens: np.ndarray) -> np.ndarray:
    """Per-token position, restarting at 0 at every sequence boundary."""
    cu = np.asarray(cu_seqlens, dtype=np.int64)
    total = int(cu[-1])
    pos = np.arange(total, dtype=np.int64)
    starts = np.repeat(cu[:-1], np.diff(cu))
    return pos - starts


def _rope_cos_sin(positions: np.ndarray, params: RopeParams, dtype):
    half = params.head_dim // 2
    # pair (2i, 2i+1) rotates by position * theta^(-2i / head_dim)
    inv_freq = params.theta ** (-2.0 * np.arange(half) / params.head_dim)
    angles = positions[:, None].astype(np.float64) * inv_freq[None, :]
    cos = np.cos(angles).astype(dtype)[:, None, :]
    sin = np.sin(angles).astype(dtype)[:, None, :]
    return cos, sin


def rope_apply(x: Tensor, positions, params: RopeParams) -> Tensor:
    """Rotate each (2i, 2i+1) pair of every head vector by its position angle."""
    if x.data.ndim != 3:
        raise DimensionError(f"rope_apply expects [tokens, heads, head_dim], got {x.shape}")
    tokens, _, head_dim = x.data.shape
    if head_dim != params.head_dim:
        raise ConfigError(f"input head_dim {head_dim} != rope head_dim {params.head_dim}")
    positions = np.asarray(positions, dtype=np.int64)
    if positions.shape != (tokens,):
        raise DimensionError(f"positions shape {positions.shape} != ({tokens},)")
    if positions.size and positions.min() < 0:
        raise InputError("positions must be nonnegative")

    cos, sin = _rope_cos_sin(positions, params, x.data.dtype)
    out = tz._make(_rotate(x.data, cos, sin), (x,), None)

    def backward():
        # rotations are orthogonal, so the gradient rotates by the negative angle
        tz._accumulate(x, _rotate(out.grad, cos, -sin))

    tz._set_backward(out, backward)
    return out


def _rotate(arr: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    even = arr[..., 0::2]
    odd = arr[..., 1::2]
    out = np.empty_like(arr)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def attend(q: Tensor, k: Tensor, v: Tensor, cu_seqlens, spec: AttentionSpec) -> Tensor:
    """softmax(QK^T / sqrt(head_dim)) V within sequences, optionally windowed.

    Rotary embeddings are applied to q and k with sequence-relative
    positions before scoring.
    """
    for name, t in (("q", q), ("k", k), ("v", v)):
        if t.data.ndim != 3:
            raise DimensionError(f"{name} must be [tokens, heads, head_dim], got {t.shape}")
    if not (q.shape == k.shape == v.shape):
        raise DimensionError(f"q/k/v shapes differ: {q.shape}, {k.shape}, {v.shape}")
    tokens, heads, head_dim = q.data.shape
    if heads != spec.heads:
        raise ConfigError(f"input has {heads} heads, spec says {spec.heads}")
    cu = validate_cu_seqlens(cu_seqlens, tokens)
    positions = sequence_positions(cu)
    qr = rope_apply(q, positions, spec.rope)
    kr = rope_apply(k, positions, spec.rope)
    half_window = -1 if spec.window is None else spec.window // 2
    return _attend_core(qr, kr, v, cu, half_window, 1.0 / math.sqrt(head_dim))


def _attend_core(q: Tensor, k: Tensor, v: Tensor, cu: np.ndarray,
                 half_window: int, scale: float) -> Tensor:
    qd = np.ascontiguousarray(q.data)
    kd = np.ascontiguousarray(k.data)
    vd = np.ascontiguousarray(v.data)
    out_data, lse = kernels.attend_fwd(qd, kd, vd, cu, half_window, scale)
    out = tz._make(tz._checked(out_data, "attend"), (q, k, v), None)

    def backward():
        g = np.ascontiguousarray(out.grad)
        dq, dk, dv = kernels.attend_bwd(qd, kd, vd, out_data, g, lse, cu,
                                        half_window, scale)
        if q.requires_grad:
            tz._accumulate(q, dq)
        if k.requires_grad:
            tz._accumulate(k, dk)
        if v.requires_grad:
            tz._accumulate(v, dv)

    tz._set_backward(out, backward)
    return out


def attention_pair_count(seq_lens, window: int | None = None) -> int:
    """Exact number of attended (query, key) pairs, summed over sequences."""
    total = 0
    for n in seq_lens:
        n = int(n)
        if n <= 0:
            raise InputError(f"sequence lengths must be positive, got {n}")
        if window is None or window // 2 >= n - 1:
            total += n * n
        else:
            half = window // 2
            i = np.arange(n)
            spans = np.minimum(n - 1, i + half) - np.maximum(0, i - half) + 1
            total += int(spans.sum())
    return total
