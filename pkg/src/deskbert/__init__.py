"""deskbert: a desk-scale modern encoder pretraining lab.

From-scratch encoder with alternating global/local attention, rotary
embeddings, GeGLU blocks and a tied decoder; unpadded packed batches; MLM
training with StableAdamW, a trapezoidal LR schedule and a batch-size
ladder; weight tiling, checkpoint averaging and context extension; plus a
hardware-aware shape auditor and an efficiency benchmark. Everything runs
on CPU with a small compiled attention core (pure-python fallback).
"""

__version__ = "0.1.0"

from .attention import (AttentionSpec, RopeParams, attend,
                        attention_pair_count, rope_apply)
from .batching import (Document, PackedBatch, apply_mlm_mask, pack_greedy,
                       repad, synth_copy_corpus, synth_corpus, unpad)
from .model import (EncoderModel, ModelConfig, average_checkpoints,
                    extend_context, init_megatron, tile_from_base)
from .optim import (OptConfig, OptimizerState, ScheduleSpec, batch_size_at,
                    build_batch_ladder, lr_at, stableadamw_step)
from .tensor import (IGNORE_INDEX, Tensor, cross_entropy_masked, gelu,
                     grad_check, layer_norm, matmul, no_grad, softmax_rows,
                     use_dtype)
from .trainer import Metrics, RunConfig, evaluate, resume, run_context_extension, train

__all__ = [
    "AttentionSpec", "Document", "EncoderModel", "IGNORE_INDEX", "Metrics",
    "ModelConfig", "OptConfig", "OptimizerState", "PackedBatch", "RopeParams",
    "RunConfig", "ScheduleSpec", "Tensor", "apply_mlm_mask", "attend",
    "attention_pair_count", "average_checkpoints", "batch_size_at",
    "build_batch_ladder", "cross_entropy_masked", "evaluate", "extend_context",
    "gelu", "grad_check", "init_megatron", "layer_norm", "lr_at", "matmul",
    "no_grad", "pack_greedy", "repad", "resume", "rope_apply",
    "run_context_extension", "softmax_rows", "stableadamw_step",
    "synth_copy_corpus", "synth_corpus", "tile_from_base", "train", "unpad",
    "use_dtype",
]
