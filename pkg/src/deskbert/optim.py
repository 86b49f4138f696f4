"""StableAdamW, the trapezoidal LR schedule, and the batch-size ladder.

StableAdamW is AdamW plus a per-tensor learning-rate clip: the update is
scaled down whenever the RMS of g / sqrt(v_hat) exceeds the threshold d.
Weight decay is fully decoupled, a plain multiplicative shrink
theta *= (1 - weight_decay) per step that never touches bias or
normalization-gain tensors.

Schedules are denominated in tokens: linear warmup to the peak LR, a long
constant phase, then a 1 - sqrt(u) decay. Batch-size warmup is a ladder of
stages that all share one step count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, NumericError
from .tensor import Tensor


@dataclass(frozen=True)
class OptConfig:
    lr_peak: float
    betas: tuple[float, float] = (0.90, 0.98)
    eps: float = 1e-6
    weight_decay: float = 1e-5
    clip_threshold: float = 1.0

    def __post_init__(self):
        b1, b2 = self.betas
        if not (0.0 < b1 < 1.0 and 0.0 < b2 < 1.0):
            raise ConfigError(f"betas must lie in (0, 1), got {self.betas}")
        if self.eps <= 0:
            raise ConfigError(f"eps must be positive, got {self.eps}")
        if self.clip_threshold <= 0:
            raise ConfigError(f"clip threshold must be positive, got {self.clip_threshold}")
        if self.lr_peak < 0 or self.weight_decay < 0:
            raise ConfigError("lr_peak and weight_decay must be nonnegative")
        object.__setattr__(self, "betas", (float(b1), float(b2)))

    def to_dict(self) -> dict:
        return {"learning_rate": self.lr_peak, "betas": list(self.betas),
                "epsilon": self.eps, "weight_decay": self.weight_decay,
                "clip_threshold": self.clip_threshold}

    @classmethod
    def from_dict(cls, d: dict) -> "OptConfig":
        return cls(lr_peak=d["learning_rate"], betas=tuple(d.get("betas", (0.90, 0.98))),
                   eps=d.get("epsilon", 1e-6), weight_decay=d.get("weight_decay", 1e-5),
                   clip_threshold=d.get("clip_threshold", 1.0))


class OptimizerState:
    """First/second moments and the shared step count."""

    def __init__(self, params: dict[str, Tensor]):
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.t = 0

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, arr in self.m.items():
            out[f"opt.m.{name}"] = arr
        for name, arr in self.v.items():
            out[f"opt.v.{name}"] = arr
        return out

    @classmethod
    def from_arrays(cls, params: dict[str, Tensor], arrays: dict[str, np.ndarray],
                    t: int) -> "OptimizerState":
        state = cls(params)
        for name in params:
            state.m[name] = np.array(arrays[f"opt.m.{name}"])
            state.v[name] = np.array(arrays[f"opt.v.{name}"])
        state.t = int(t)
        return state


def default_decay_exclude(name: str) -> bool:
    """Bias and normalization-gain tensors receive zero weight decay."""
    return name.endswith(".bias") or name.endswith(".gamma")


def stableadamw_step(params: dict[str, Tensor], state: OptimizerState,
                     cfg: OptConfig, lr_now: float,
                     decay_exclude=default_decay_exclude) -> dict[str, float]:
    """One optimizer step over every parameter tensor, in place.

    Gradients are read from each tensor's ``grad`` (missing grads count as
    zero) and are not cleared here. A NaN/Inf gradient refuses the whole
    step before any state is touched. Returns the realized per-tensor
    update RMS, which clipping keeps at or below ``lr_now * d``.
    """
    if lr_now < 0:
        raise ConfigError(f"lr_now must be nonnegative, got {lr_now}")
    for name, p in params.items():
        if p.grad is not None:
            if p.grad.shape != p.data.shape:
                raise DimensionError(f"{name}: grad shape {p.grad.shape} != {p.data.shape}")
            if not np.isfinite(p.grad).all():
                raise NumericError(f"{name}: non-finite gradient, step refused")

    b1, b2 = cfg.betas
    d = cfg.clip_threshold
    t = state.t + 1
    bias1 = 1.0 - b1 ** t
    bias2 = 1.0 - b2 ** t
    update_rms: dict[str, float] = {}
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        m_hat = m / bias1
        v_hat = v / bias2
        rms = math.sqrt(float(np.mean(np.square(g) / np.maximum(v_hat, cfg.eps ** 2))))
        eta = lr_now / max(1.0, rms / d)
        delta = eta * (m_hat / (np.sqrt(v_hat) + cfg.eps))
        p.data -= delta
        if cfg.weight_decay > 0 and not decay_exclude(name):
            p.data *= 1.0 - cfg.weight_decay
        update_rms[name] = math.sqrt(float(np.mean(np.square(delta))))
    state.t = t
    return update_rms


# ---------------------------------------------------------------------------
# schedules


@dataclass(frozen=True)
class ScheduleSpec:
    """Trapezoidal LR phases plus the batch ladder, all counted in tokens."""

    warmup_tokens: int
    stable_tokens: int
    decay_tokens: int
    ladder: tuple[tuple[int, int], ...]
    tokens_per_sample: int

    def __post_init__(self):
        for what in ("warmup_tokens", "stable_tokens", "decay_tokens"):
            if getattr(self, what) < 0:
                raise ConfigError(f"{what} must be nonnegative")
        if self.tokens_per_sample < 1:
            raise ConfigError("tokens_per_sample must be >= 1")
        ladder = tuple((int(bs), int(steps)) for bs, steps in self.ladder)
        if not ladder:
            raise ConfigError("ladder needs at least one stage")
        sizes = [bs for bs, _ in ladder]
        if any(bs < 1 or steps < 1 for bs, steps in ladder):
            raise ConfigError("ladder sizes and steps must be positive")
        if sizes != sorted(sizes):
            raise ConfigError("ladder batch sizes must be nondecreasing")
        object.__setattr__(self, "ladder", ladder)

    @property
    def total_tokens(self) -> int:
        return self.warmup_tokens + self.stable_tokens + self.decay_tokens

    def to_dict(self) -> dict:
        return {"warmup_tokens": self.warmup_tokens,
                "stable_tokens": self.stable_tokens,
                "decay_tokens": self.decay_tokens,
                "ladder": [list(stage) for stage in self.ladder],
                "tokens_per_sample": self.tokens_per_sample}

    @classmethod
    def from_dict(cls, d: dict) -> "ScheduleSpec":
        return cls(warmup_tokens=d["warmup_tokens"], stable_tokens=d["stable_tokens"],
                   decay_tokens=d["decay_tokens"],
                   ladder=tuple(tuple(stage) for stage in d["ladder"]),
                   tokens_per_sample=d["tokens_per_sample"])


def lr_at(tokens_seen: int, spec: ScheduleSpec, lr_peak: float) -> float:
    """LR after ``tokens_seen`` tokens: linear warmup, hold, 1 - sqrt decay."""
    if tokens_seen < 0:
        raise ConfigError(f"tokens_seen must be nonnegative, got {tokens_seen}")
    if tokens_seen < spec.warmup_tokens:
        return lr_peak * tokens_seen / spec.warmup_tokens
    decay_start = spec.warmup_tokens + spec.stable_tokens
    if tokens_seen <= decay_start:
        return lr_peak
    if spec.decay_tokens == 0 or tokens_seen >= decay_start + spec.decay_tokens:
        return 0.0
    u = (tokens_seen - decay_start) / spec.decay_tokens
    return lr_peak * (1.0 - math.sqrt(u))


def build_batch_ladder(start_bs: int, end_bs: int, warmup_tokens: int,
                       stages: int = 6, tokens_per_sample: int = 1,
                       granularity: int = 1) -> tuple[tuple[int, int], ...]:
    """Batch sizes interpolated start -> end, every stage sharing one step count.

    The common step count s is the largest integer such that
    s * sum(sizes) * tokens_per_sample fits the warmup budget; leftover
    warmup tokens simply run at the terminal (full) batch size.
    """
    if start_bs < 1 or end_bs < start_bs:
        raise ConfigError(f"need 1 <= start_bs <= end_bs, got {start_bs}..{end_bs}")
    if stages < 1:
        raise ConfigError(f"stages must be >= 1, got {stages}")
    if tokens_per_sample < 1 or granularity < 1:
        raise ConfigError("tokens_per_sample and granularity must be >= 1")

    if stages == 1:
        raw = [float(end_bs)]
    else:
        step = (end_bs - start_bs) / (stages - 1)
        raw = [start_bs + step * i for i in range(stages)]
    sizes = []
    for value in raw:
        rounded = max(granularity, int(round(value / granularity)) * granularity)
        if not sizes or rounded != sizes[-1]:
            sizes.append(rounded)

    per_round = sum(sizes) * tokens_per_sample
    steps = warmup_tokens // per_round
    if steps < 1:
        raise ConfigError(
            f"warmup budget {warmup_tokens} cannot fund one step per stage "
            f"({per_round} tokens per round)"
        )
    return tuple((bs, int(steps)) for bs in sizes)


def batch_size_at(tokens_seen: int, ladder, tokens_per_sample: int) -> int:
    """Batch size of the stage containing ``tokens_seen``; terminal size after."""
    boundary = 0
    for bs, steps in ladder:
        boundary += bs * steps * tokens_per_sample
        if tokens_seen < boundary:
            return bs
    return ladder[-1][0]
