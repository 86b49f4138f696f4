"""Efficiency harness: synthetic bench sets, throughput, memory model.

Wall-clock numbers are hardware-relative, so every acceptance claim here
is a ratio (padded vs unpadded, local vs global pair counts) or exact pair
arithmetic, never an absolute tokens/sec. Bench reports embed their spec
and seed for replay.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import kernels
from .attention import attention_pair_count
from .batching import (CLS_ID, FIRST_CONTENT_ID, PAD_ID, SEP_ID, Document,
                       PackedBatch, make_rng, pack_greedy)
from .errors import CapacityError, ConfigError, InputError
from .model import EncoderModel, ModelConfig, param_shapes
from .tensor import no_grad

# variable-length sets clip at 94% of max_len, matching the observed
# min/max envelope of the reference synthetic sets (32 and 476 of 512)
CLIP_LOW = 32
CLIP_FRACTION = 0.94


@dataclass(frozen=True)
class BenchSpec:
    max_len: int
    mode: str
    docs: int
    seed: int

    def __post_init__(self):
        if self.mode not in ("fixed", "variable"):
            raise ConfigError(f"mode must be fixed or variable, got {self.mode!r}")
        if self.docs < 1:
            raise ConfigError(f"docs must be >= 1, got {self.docs}")
        if self.max_len < 36:
            raise ConfigError(f"max_len too small for the clipping envelope: {self.max_len}")

    def to_dict(self) -> dict:
        return {"max_len": self.max_len, "mode": self.mode,
                "docs": self.docs, "seed": self.seed}


def gen_bench_sets(spec: BenchSpec, vocab: int = 64) -> list[Document]:
    """Fixed mode: every document exactly max_len tokens. Variable mode:
    lengths ~ Normal(max_len/2, max_len/8) clipped to [32, 0.94 * max_len]."""
    rng = make_rng(spec.seed)
    if spec.mode == "fixed":
        lengths = np.full(spec.docs, spec.max_len, dtype=np.int64)
    else:
        raw = rng.normal(spec.max_len / 2.0, spec.max_len / 8.0, size=spec.docs)
        lengths = np.clip(np.rint(raw), CLIP_LOW,
                          int(CLIP_FRACTION * spec.max_len)).astype(np.int64)
    docs = []
    for n in lengths:
        body = rng.integers(FIRST_CONTENT_ID, vocab, size=int(n) - 2)
        docs.append(Document(np.concatenate(([CLS_ID], body, [SEP_ID]))))
    return docs


def _padded_batches(docs, batch_rows: int, max_len: int) -> list[PackedBatch]:
    batches = []
    for at in range(0, len(docs), batch_rows):
        group = docs[at:at + batch_rows]
        ids = np.full((len(group), max_len), PAD_ID, dtype=np.int64)
        for r, d in enumerate(group):
            ids[r, : len(d)] = d.tokens
        flat = ids.reshape(-1)
        cu = np.arange(len(group) + 1, dtype=np.int64) * max_len
        positions = np.tile(np.arange(max_len, dtype=np.int64), len(group))
        batches.append(PackedBatch(flat, cu, positions))
    return batches


def _model_pair_counts(config: ModelConfig, seq_lens) -> dict:
    """Attended pairs per layer type, summed over the model's layers."""
    global_pairs = attention_pair_count(seq_lens, window=None)
    local_pairs = attention_pair_count(seq_lens, window=config.window)
    n_global = sum(1 for l in range(config.layers) if config.is_global(l))
    n_local = config.layers - n_global
    return {"global_layer_pairs": global_pairs, "local_layer_pairs": local_pairs,
            "global_layers": n_global, "local_layers": n_local,
            "total": n_global * global_pairs + n_local * local_pairs}


@dataclass
class BenchReport:
    spec: BenchSpec
    mode: str
    runs: int
    tokens_per_second: float
    tokens_per_second_std: float
    real_tokens: int
    slot_tokens: int
    pair_counts: dict
    backend: str

    def to_dict(self) -> dict:
        return {"spec": self.spec.to_dict(), "mode": self.mode, "runs": self.runs,
                "tokens_per_second": self.tokens_per_second,
                "tokens_per_second_std": self.tokens_per_second_std,
                "real_tokens": self.real_tokens, "slot_tokens": self.slot_tokens,
                "pair_counts": self.pair_counts, "backend": self.backend}


def bench_throughput(model: EncoderModel, docs, mode: str, spec: BenchSpec,
                     runs: int = 10, batch_rows: int = 8,
                     max_len: int | None = None) -> BenchReport:
    """Tokens/sec over `runs` timed forward passes after one warmup pass.

    "padded" pads every row to max_len and computes over the pad tokens;
    "unpadded" packs the same documents into equal slot budgets
    (batch_rows * max_len per forward) and attends through cu_seqlens.
    Throughput counts real tokens in both modes.
    """
    if mode not in ("padded", "unpadded"):
        raise ConfigError(f"mode must be padded or unpadded, got {mode!r}")
    docs = list(docs)
    if not docs:
        raise InputError("bench needs at least one document")
    max_len = max_len if max_len is not None else max(len(d) for d in docs)
    if max(len(d) for d in docs) > max_len:
        raise InputError("a document exceeds max_len")
    if max_len > model.config.max_seq:
        raise InputError(f"max_len {max_len} exceeds model max_seq {model.config.max_seq}")

    real_tokens = int(sum(len(d) for d in docs))
    if mode == "padded":
        batches = _padded_batches(docs, batch_rows, max_len)
        slot_tokens = sum(b.num_tokens for b in batches)
        lens = [length for b in batches for length in b.seq_lens]
    else:
        batches, _ = pack_greedy(docs, batch_rows * max_len, seed=spec.seed)
        slot_tokens = real_tokens
        lens = [length for b in batches for length in b.seq_lens]

    timings = []
    with no_grad():
        for b in batches:  # warmup
            model.forward(b)
        for _ in range(runs):
            begin = time.perf_counter()
            for b in batches:
                model.forward(b)
            timings.append(time.perf_counter() - begin)
    timings = np.asarray(timings)
    per_sec = real_tokens / timings
    return BenchReport(spec=spec, mode=mode, runs=runs,
                       tokens_per_second=float(per_sec.mean()),
                       tokens_per_second_std=float(per_sec.std()),
                       real_tokens=real_tokens, slot_tokens=int(slot_tokens),
                       pair_counts=_model_pair_counts(model.config, lens),
                       backend=kernels.backend_name())


# ---------------------------------------------------------------------------
# memory model


def activation_elements_per_sequence(config: ModelConfig, seq_len: int) -> int:
    """Per-sequence activation footprint in elements: attention scores under
    the active mask regime, GeGLU intermediates, and logits."""
    elements = 0
    for l in range(config.layers):
        window = None if config.is_global(l) else config.window
        elements += config.heads * attention_pair_count([seq_len], window)
        elements += seq_len * (config.glu_expansion + config.intermediate)
    elements += seq_len * config.vocab
    return elements


def parameter_elements(config: ModelConfig) -> int:
    return sum(int(np.prod(shape)) for shape in param_shapes(config).values())


def max_batch_search(config: ModelConfig, seq_len: int,
                     memory_budget_bytes: int, bytes_per_element: int = 4) -> int:
    """Largest batch whose modeled footprint fits the budget.

    Footprint(b) = parameters + b * per-sequence activations, so the search
    is monotone: double until it breaks, then bisect.
    """
    if seq_len < 1 or seq_len > config.max_seq:
        raise InputError(f"seq_len must be in [1, {config.max_seq}], got {seq_len}")
    params = parameter_elements(config) * bytes_per_element
    per_seq = activation_elements_per_sequence(config, seq_len) * bytes_per_element

    def fits(batch: int) -> bool:
        return params + batch * per_seq <= memory_budget_bytes

    if not fits(1):
        raise CapacityError(
            f"budget {memory_budget_bytes} below a single-sequence footprint "
            f"of {params + per_seq} bytes"
        )
    lo = 1
    while fits(lo * 2):
        lo *= 2
    hi = lo * 2  # fits(lo), not fits(hi)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if fits(mid):
            lo = mid
        else:
            hi = mid
    return lo


# ---------------------------------------------------------------------------
# kernel backend comparison


def bench_kernel_backends(seq_len: int = 512, batch_seqs: int = 4, heads: int = 4,
                          head_dim: int = 64, window: int | None = 128,
                          runs: int = 5, seed: int = 0) -> dict:
    """Time attend forward+backward on each available backend.

    Returns per-backend tokens/sec plus the speedup of the compiled kernel
    over the pure-python one when both are present.
    """
    rng = make_rng(seed)
    total = seq_len * batch_seqs
    q = rng.standard_normal((total, heads, head_dim)).astype(np.float32)
    k = rng.standard_normal((total, heads, head_dim)).astype(np.float32)
    v = rng.standard_normal((total, heads, head_dim)).astype(np.float32)
    g = rng.standard_normal((total, heads, head_dim)).astype(np.float32)
    cu = np.arange(batch_seqs + 1, dtype=np.int64) * seq_len
    half = -1 if window is None else window // 2
    scaling = 1.0 / math.sqrt(head_dim)

    results = {}
    for name in kernels.available_backends():
        previous = kernels.use_backend(name)
        try:
            out, lse = kernels.attend_fwd(q, k, v, cu, half, scaling)  # warmup
            kernels.attend_bwd(q, k, v, out, g, lse, cu, half, scaling)
            timings = []
            for _ in range(runs):
                begin = time.perf_counter()
                out, lse = kernels.attend_fwd(q, k, v, cu, half, scaling)
                kernels.attend_bwd(q, k, v, out, g, lse, cu, half, scaling)
                timings.append(time.perf_counter() - begin)
        finally:
            kernels.use_backend(previous)
        timings = np.asarray(timings)
        results[name] = {"tokens_per_second": float(total / timings.mean()),
                         "seconds_mean": float(timings.mean()),
                         "seconds_std": float(timings.std())}
    report = {"seq_len": seq_len, "batch_seqs": batch_seqs, "heads": heads,
              "head_dim": head_dim, "window": window, "runs": runs, "seed": seed,
              "backends": results}
    if "cython" in results and "python" in results:
        report["cython_speedup"] = (results["cython"]["tokens_per_second"]
                                    / results["python"]["tokens_per_second"])
    return report
