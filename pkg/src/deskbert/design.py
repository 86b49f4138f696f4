"""Hardware-aware dimension auditing for weight matrices.

Three checks per matrix: tensor-core friendliness (dims divisible by 64),
tile quantization (decomposition into 128 x 256 blocks), and a wave
heuristic scoring how the block count lands on a GPU's streaming
multiprocessors. Wave quantization cannot be satisfied for every GPU at
once, so configs are scored against a weighted basket, with inference
GPUs weighted up.

The wave heuristic has two readings. The default, "occupancy", is
blocks / (ceil(blocks / sm) * sm): the busy fraction of SM slots across
all waves, 1.0 exactly when the SM count divides the block count.
"modulus" is (blocks mod sm) / sm, the raw remainder fraction. Both are
exposed because the source phrasing is ambiguous.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import ConfigError, InputError
from .model import ModelConfig

TILE_M = 128
TILE_N = 256

# SM counts from vendor specification sheets (editable basket data)
DEFAULT_BASKET = (
    ("T4", 40), ("A10", 72), ("L4", 58), ("RTX3090", 82),
    ("RTX4090", 128), ("A100", 108), ("H100", 132),
)
# inference GPUs get double weight; the big training parts do not
DEFAULT_WEIGHTS = {"T4": 2.0, "A10": 2.0, "L4": 2.0, "RTX3090": 2.0,
                   "RTX4090": 2.0, "A100": 1.0, "H100": 1.0}


@dataclass(frozen=True)
class GpuSpec:
    name: str
    sm_count: int

    def __post_init__(self):
        if self.sm_count < 1:
            raise ConfigError(f"sm_count must be >= 1, got {self.sm_count}")


def default_basket() -> list[GpuSpec]:
    return [GpuSpec(name, sm) for name, sm in DEFAULT_BASKET]


def check_tensor_core(dims) -> list[bool]:
    """True per dim iff it is a multiple of 64."""
    out = []
    for dim in dims:
        if dim <= 0:
            raise InputError(f"dims must be positive, got {dim}")
        out.append(dim % 64 == 0)
    return out


def tile_blocks(m: int, n: int) -> int:
    """Number of 128 x 256 tiles covering an m x n matrix."""
    if m <= 0 or n <= 0:
        raise InputError(f"matrix dims must be positive, got {m} x {n}")
    return math.ceil(m / TILE_M) * math.ceil(n / TILE_N)


def sm_utilization(blocks: int, sm_count: int, mode: str = "occupancy") -> float:
    """Wave heuristic for `blocks` tiles on `sm_count` SMs (see module doc)."""
    if blocks < 1:
        raise InputError(f"blocks must be >= 1, got {blocks}")
    if sm_count < 1:
        raise InputError(f"sm_count must be >= 1, got {sm_count}")
    if mode == "occupancy":
        return blocks / (math.ceil(blocks / sm_count) * sm_count)
    if mode == "modulus":
        return (blocks % sm_count) / sm_count
    raise ConfigError(f"unknown utilization mode {mode!r}")


@dataclass
class MatrixReport:
    name: str
    dims: tuple[int, int]
    tensor_core_ok: bool
    block_count: int
    utilization: dict[str, float]


@dataclass
class DimReport:
    matrices: list[MatrixReport]
    score: float
    tensor_core_failures: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "score": self.score,
            "tensor_core_failures": self.tensor_core_failures,
            "matrices": [
                {"name": m.name, "dims": list(m.dims),
                 "tensor_core_ok": m.tensor_core_ok,
                 "block_count": m.block_count, "utilization": m.utilization}
                for m in self.matrices
            ],
        }


def weight_matrices(config: ModelConfig) -> list[tuple[str, tuple[int, int]]]:
    """Every distinct weight-matrix shape a forward pass multiplies through."""
    return [
        ("qkv", (config.hidden, 3 * config.hidden)),
        ("attention_out", (config.hidden, config.hidden)),
        ("glu", (config.hidden, config.glu_expansion)),
        ("mlp_down", (config.intermediate, config.hidden)),
        ("embedding_decoder", (config.vocab, config.hidden)),
    ]


def audit_config(config: ModelConfig, basket=None, weights=None,
                 mode: str = "occupancy") -> DimReport:
    """Run all three checks over every weight matrix, score against the basket.

    The aggregate score is the GPU-weighted mean utilization over all
    matrices; tensor-core failures are listed separately since they gate
    rather than scale performance.
    """
    basket = list(basket) if basket is not None else default_basket()
    if not basket:
        raise InputError("GPU basket must not be empty")
    if weights is None:
        weights = {g.name: DEFAULT_WEIGHTS.get(g.name, 1.0) for g in basket}
    for g in basket:
        if weights.get(g.name, 0.0) < 0:
            raise InputError(f"negative weight for {g.name}")

    matrices = []
    failures = []
    for name, (m, n) in weight_matrices(config):
        tc_ok = all(check_tensor_core([m, n]))
        if not tc_ok:
            failures.append(name)
        blocks = tile_blocks(m, n)
        util = {g.name: sm_utilization(blocks, g.sm_count, mode=mode) for g in basket}
        matrices.append(MatrixReport(name, (m, n), tc_ok, blocks, util))

    total_weight = sum(weights.get(g.name, 1.0) for g in basket)
    score = 0.0
    for g in basket:
        per_gpu = sum(mx.utilization[g.name] for mx in matrices) / len(matrices)
        score += weights.get(g.name, 1.0) * per_gpu
    score /= total_weight
    return DimReport(matrices=matrices, score=score, tensor_core_failures=failures)


def format_report(report: DimReport, basket=None) -> str:
    """Human-readable audit table."""
    basket = list(basket) if basket is not None else default_basket()
    names = [g.name for g in basket]
    header = f"{'matrix':<20}{'dims':<14}{'64-div':<8}{'blocks':<8}" + "".join(
        f"{n:>9}" for n in names)
    lines = [header, "-" * len(header)]
    for mx in report.matrices:
        row = (f"{mx.name:<20}{mx.dims[0]}x{mx.dims[1]:<9}"
               f"{'ok' if mx.tensor_core_ok else 'FAIL':<8}{mx.block_count:<8}")
        row += "".join(f"{mx.utilization[n]:>9.3f}" for n in names)
        lines.append(row)
    lines.append(f"weighted score: {report.score:.4f}")
    if report.tensor_core_failures:
        lines.append("tensor-core failures: " + ", ".join(report.tensor_core_failures))
    return "\n".join(lines)
