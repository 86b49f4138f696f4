"""Token-denominated MLM training loop.

Each step draws the scheduled number of packed bins, masks them, splits
the work into microbatches whose gradients accumulate into one update
(loss is normalized by the labeled-token count of the whole scheduled
batch, so accumulation is exactly linear), then applies StableAdamW at the
current scheduled LR.

Every source of randomness is a PCG64DXSM stream keyed by (seed, stream
tag, counter), never by mutable generator state: epoch shuffles key on the
epoch index, masking and dropout key on the step index. That makes runs
bitwise reproducible and lets a resumed run continue from a checkpoint's
(epoch, cursor, step) exactly as if it had never stopped.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .batching import (CopyCorpus, PackedBatch, apply_mlm_mask, make_rng,
                       mask_positions, pack_greedy)
from .checkpoint import load_arrays, model_from_arrays, save_arrays
from .errors import (CheckpointError, ConfigError, InputError, NumericError,
                     TrainingDiverged)
from .model import EncoderModel, ModelConfig, extend_context, init_megatron
from .optim import (OptConfig, OptimizerState, ScheduleSpec, batch_size_at,
                    lr_at, stableadamw_step)
from .tensor import IGNORE_INDEX, cross_entropy_masked, no_grad, scale

_TAG_SPLIT = 1
_TAG_EVAL_MASK = 2
_TAG_MIX = 3
_TAG_PACK = 4
_TAG_MLM = 5
_TAG_DROP = 6


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    opt: OptConfig
    schedule: ScheduleSpec
    microbatch: int
    seed: int
    eval_every_steps: int = 50
    checkpoint_every_steps: int = 200
    max_seq: int = 128
    mlm_rate: float = 0.30
    heldout_docs: int = 64
    corpus_weights: tuple[float, ...] | None = None
    max_steps: int | None = None

    def __post_init__(self):
        if self.microbatch < 1:
            raise ConfigError("microbatch must be >= 1")
        if self.eval_every_steps < 1 or self.checkpoint_every_steps < 1:
            raise ConfigError("eval/checkpoint cadences must be >= 1")
        if self.max_seq < 1 or self.max_seq > self.model.max_seq:
            raise ConfigError(
                f"packing capacity {self.max_seq} must be in [1, model max_seq {self.model.max_seq}]"
            )
        if not 0.0 <= self.mlm_rate <= 1.0:
            raise ConfigError(f"mlm_rate must be in [0, 1], got {self.mlm_rate}")
        if self.heldout_docs < 1:
            raise ConfigError("heldout_docs must be >= 1")
        if self.corpus_weights is not None:
            object.__setattr__(self, "corpus_weights", tuple(float(w) for w in self.corpus_weights))

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "opt": self.opt.to_dict(),
                "schedule": self.schedule.to_dict(), "microbatch": self.microbatch,
                "seed": self.seed, "eval_every_steps": self.eval_every_steps,
                "checkpoint_every_steps": self.checkpoint_every_steps,
                "max_seq": self.max_seq, "mlm_rate": self.mlm_rate,
                "heldout_docs": self.heldout_docs,
                "corpus_weights": list(self.corpus_weights) if self.corpus_weights else None,
                "max_steps": self.max_steps}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        weights = d.get("corpus_weights")
        return cls(model=ModelConfig.from_dict(d["model"]),
                   opt=OptConfig.from_dict(d["opt"]),
                   schedule=ScheduleSpec.from_dict(d["schedule"]),
                   microbatch=d["microbatch"], seed=d["seed"],
                   eval_every_steps=d.get("eval_every_steps", 50),
                   checkpoint_every_steps=d.get("checkpoint_every_steps", 200),
                   max_seq=d.get("max_seq", 128), mlm_rate=d.get("mlm_rate", 0.30),
                   heldout_docs=d.get("heldout_docs", 64),
                   corpus_weights=tuple(weights) if weights else None,
                   max_steps=d.get("max_steps"))


@dataclass(frozen=True)
class Metrics:
    tokens_seen: int
    step: int
    train_loss: float
    val_loss: float
    masked_token_accuracy: float
    lr_now: float
    batch_size_now: int

    def __post_init__(self):
        if not 0.0 <= self.masked_token_accuracy <= 1.0:
            raise ConfigError("accuracy must lie in [0, 1]")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class TrainResult:
    model: EncoderModel
    metrics: list[Metrics]
    checkpoints: list[tuple[int, int, str]]  # (step, tokens_seen, path)
    step_losses: list[float]
    tokens_seen: int
    step: int


# ---------------------------------------------------------------------------
# document stream


def _split_heldout(corpus, weights, n_heldout: int, seed: int):
    """Seeded heldout/train split; heldout documents leave the train pool."""
    if weights is None:
        docs = list(corpus)
        if n_heldout >= len(docs):
            raise ConfigError(f"heldout_docs {n_heldout} >= corpus size {len(docs)}")
        order = make_rng([seed, _TAG_SPLIT]).permutation(len(docs))
        heldout = [docs[i] for i in order[:n_heldout]]
        train = [docs[i] for i in order[n_heldout:]]
        return heldout, train
    shards = [list(s) for s in corpus]
    if len(shards) != len(weights):
        raise ConfigError(f"{len(shards)} corpus shards but {len(weights)} weights")
    pairs = [(si, di) for si, shard in enumerate(shards) for di in range(len(shard))]
    if n_heldout >= len(pairs):
        raise ConfigError(f"heldout_docs {n_heldout} >= corpus size {len(pairs)}")
    order = make_rng([seed, _TAG_SPLIT]).permutation(len(pairs))
    heldout = [shards[pairs[i][0]][pairs[i][1]] for i in order[:n_heldout]]
    chosen = {pairs[i] for i in order[:n_heldout]}
    train = [
        [doc for di, doc in enumerate(shard) if (si, di) not in chosen]
        for si, shard in enumerate(shards)
    ]
    return heldout, train


class _BinStream:
    """Resumable stream of packed bins; epoch order keys on the epoch index."""

    def __init__(self, train_docs, weights, capacity: int, seed: int):
        self.docs = train_docs
        self.weights = weights
        self.capacity = capacity
        self.seed = seed
        self.epoch = -1
        self.cursor = 0
        self.bins: list[PackedBatch] = []

    def _epoch_documents(self, epoch: int):
        if self.weights is None:
            return self.docs
        rng = make_rng([self.seed, _TAG_MIX, epoch])
        sizes = np.array([len(s) for s in self.docs])
        total = int(sizes.sum())
        probs = np.asarray(self.weights, dtype=np.float64)
        probs = probs / probs.sum()
        shard_ids = rng.choice(len(self.docs), size=total, p=probs)
        within = rng.integers(0, sizes[shard_ids])
        return [self.docs[s][i] for s, i in zip(shard_ids, within)]

    def _load_epoch(self, epoch: int) -> None:
        docs = self._epoch_documents(epoch)
        self.bins, _ = pack_greedy(docs, self.capacity, seed=[self.seed, _TAG_PACK, epoch])
        self.epoch = epoch
        self.cursor = 0

    def seek(self, epoch: int, cursor: int) -> None:
        self._load_epoch(epoch)
        self.cursor = cursor

    def draw(self, n: int) -> list[PackedBatch]:
        if self.epoch < 0:
            self._load_epoch(0)
        out: list[PackedBatch] = []
        while len(out) < n:
            if self.cursor >= len(self.bins):
                self._load_epoch(self.epoch + 1)
            out.append(self.bins[self.cursor])
            self.cursor += 1
        return out


# ---------------------------------------------------------------------------
# evaluation


def _masked_stats(logits: np.ndarray, labels: np.ndarray):
    """(nll_sum, correct, count) over labeled positions, in float64."""
    active = labels != IGNORE_INDEX
    count = int(active.sum())
    if count == 0:
        return 0.0, 0, 0
    rows = logits[active].astype(np.float64)
    picked = labels[active]
    row_max = rows.max(axis=1, keepdims=True)
    lse = np.log(np.exp(rows - row_max).sum(axis=1)) + row_max[:, 0]
    nll = lse - rows[np.arange(count), picked]
    correct = int((rows.argmax(axis=1) == picked).sum())
    return float(nll.sum()), correct, count


def evaluate(model, heldout) -> dict:
    """Mean masked cross-entropy and argmax accuracy over masked positions."""
    heldout = list(heldout)
    if not heldout:
        raise InputError("evaluate needs at least one batch")
    nll_sum = 0.0
    correct = 0
    count = 0
    with no_grad():
        for batch in heldout:
            if batch.labels is None:
                raise InputError("heldout batches must carry MLM labels")
            logits = model.forward(batch)
            s, c, n = _masked_stats(logits.data, batch.labels)
            nll_sum += s
            correct += c
            count += n
    if count == 0:
        raise InputError("heldout batches have zero labeled positions")
    return {"val_loss": nll_sum / count, "masked_token_accuracy": correct / count}


def long_range_accuracy(model, corpus: CopyCorpus, docs_per_batch: int = 4) -> float:
    """Accuracy at copy positions only; every label needs the long-range source."""
    docs = corpus.documents
    start, stop = corpus.copy_range
    correct = 0
    count = 0
    with no_grad():
        for at in range(0, len(docs), docs_per_batch):
            group = docs[at:at + docs_per_batch]
            batch = PackedBatch.from_documents(group)
            offsets = batch.cu_seqlens[:-1]
            idx = np.concatenate([np.arange(start, stop) + o for o in offsets])
            probe = mask_positions(batch, idx)
            logits = model.forward(probe)
            _, c, n = _masked_stats(logits.data, probe.labels)
            correct += c
            count += n
    return correct / count


def smoothed_losses(losses, window: int = 100) -> np.ndarray:
    """Trailing-window mean of per-step losses (defined from step `window`)."""
    arr = np.asarray(losses, dtype=np.float64)
    if arr.size < window:
        raise InputError(f"need at least {window} losses, got {arr.size}")
    cumsum = np.concatenate(([0.0], np.cumsum(arr)))
    return (cumsum[window:] - cumsum[:-window]) / window


# ---------------------------------------------------------------------------
# the loop


def train(run: RunConfig, corpus, out_dir: str | None = None,
          model: EncoderModel | None = None, _resume=None) -> TrainResult:
    """Run the MLM loop until the schedule's token budget (or max_steps).

    ``corpus`` is a list of Documents, or a list of shards when
    ``run.corpus_weights`` is set. Pass ``model`` to continue training an
    existing model (fresh optimizer state); ``_resume`` is internal.
    Checkpoints and the metrics JSONL are written only when ``out_dir``
    is given.
    """
    if model is None and _resume is None:
        model = init_megatron(run.model, run.seed)
    if model.config != run.model:
        raise ConfigError("run.model does not match the provided model's config")

    heldout_docs, train_docs = _split_heldout(corpus, run.corpus_weights,
                                              run.heldout_docs, run.seed)
    heldout_bins, _ = pack_greedy(heldout_docs, run.max_seq, seed=[run.seed, _TAG_EVAL_MASK])
    eval_rng = make_rng([run.seed, _TAG_EVAL_MASK])
    heldout = [apply_mlm_mask(b, run.model.vocab, run.mlm_rate, eval_rng)
               for b in heldout_bins]

    stream = _BinStream(train_docs, run.corpus_weights, run.max_seq, run.seed)
    params = model.parameters()
    if _resume is None:
        opt_state = OptimizerState(params)
        step = 0
        tokens_seen = 0
    else:
        opt_state = _resume["opt_state"]
        step = _resume["step"]
        tokens_seen = _resume["tokens_seen"]
        stream.seek(_resume["epoch"], _resume["cursor"])

    metrics: list[Metrics] = []
    checkpoints: list[tuple[int, int, str]] = []
    step_losses: list[float] = []
    metrics_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        metrics_fh = open(os.path.join(out_dir, "metrics.jsonl"),
                          "a" if _resume else "w", encoding="ascii")

    def last_good():
        return checkpoints[-1][2] if checkpoints else (_resume or {}).get("path")

    def write_checkpoint() -> str:
        arrays = {name: p.data for name, p in params.items()}
        arrays.update(opt_state.to_arrays())
        extra = {"step": step, "tokens_seen": tokens_seen, "epoch": stream.epoch,
                 "cursor": stream.cursor, "opt_t": opt_state.t,
                 "run": run.to_dict()}
        path = os.path.join(out_dir, f"step_{step:06d}.ckpt")
        save_arrays(path, run.model, arrays, extra)
        checkpoints.append((step, tokens_seen, path))
        return path

    budget = run.schedule.total_tokens
    try:
        while tokens_seen < budget and (run.max_steps is None or step < run.max_steps):
            bs = batch_size_at(tokens_seen, run.schedule.ladder,
                               run.schedule.tokens_per_sample)
            bins = stream.draw(bs)
            step += 1

            mlm_rng = make_rng([run.seed, _TAG_MLM, step])
            masked = [apply_mlm_mask(b, run.model.vocab, run.mlm_rate, mlm_rng)
                      for b in bins]
            total_labeled = int(sum((b.labels != IGNORE_INDEX).sum() for b in masked))
            if total_labeled == 0:
                raise InputError(f"step {step}: no labeled positions in the batch")

            drop_rng = None
            if run.model.dropout_attn_out > 0:
                drop_rng = make_rng([run.seed, _TAG_DROP, step])

            model.zero_grads()
            loss_sum = 0.0
            chunk = min(run.microbatch, bs)
            for at in range(0, len(masked), chunk):
                micro = PackedBatch.merge(masked[at:at + chunk])
                logits = model.forward(micro, rng=drop_rng)
                loss = cross_entropy_masked(logits, micro.labels, reduction="sum")
                loss_sum += float(loss.data)
                scale(loss, 1.0 / total_labeled).backward()

            train_loss = loss_sum / total_labeled
            if not math.isfinite(train_loss):
                raise TrainingDiverged(
                    f"non-finite loss at step {step}", last_checkpoint=last_good())

            tokens_seen += int(sum(b.num_tokens for b in bins))
            lr_now = lr_at(min(tokens_seen, budget), run.schedule, run.opt.lr_peak)
            stableadamw_step(params, opt_state, run.opt, lr_now)
            step_losses.append(train_loss)

            finished = tokens_seen >= budget or (run.max_steps is not None
                                                 and step >= run.max_steps)
            if step % run.eval_every_steps == 0 or finished:
                ev = evaluate(model, heldout)
                record = Metrics(tokens_seen=tokens_seen, step=step,
                                 train_loss=train_loss, val_loss=ev["val_loss"],
                                 masked_token_accuracy=ev["masked_token_accuracy"],
                                 lr_now=lr_now, batch_size_now=bs)
                metrics.append(record)
                if metrics_fh is not None:
                    metrics_fh.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")
                    metrics_fh.flush()
            if out_dir is not None and (step % run.checkpoint_every_steps == 0 or finished):
                write_checkpoint()
    except TrainingDiverged:
        raise
    except NumericError as exc:
        raise TrainingDiverged(str(exc), last_checkpoint=last_good()) from exc
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    return TrainResult(model=model, metrics=metrics, checkpoints=checkpoints,
                       step_losses=step_losses, tokens_seen=tokens_seen, step=step)


def resume(checkpoint_path: str, corpus, out_dir: str | None = None,
           lr_peak: float | None = None, weight_decay: float | None = None,
           **run_overrides) -> TrainResult:
    """Continue training from a checkpoint, optionally at a new LR/decay.

    With no overrides the continuation is step-for-step identical to the
    uninterrupted run. ``corpus`` must be the corpus the run was started
    with; the checkpoint stores counters, not documents.
    """
    config, arrays, extra = load_arrays(checkpoint_path)
    if "run" not in extra or "step" not in extra:
        raise CheckpointError(f"{checkpoint_path}: not a training checkpoint")
    run = RunConfig.from_dict(extra["run"])
    opt = run.opt
    if lr_peak is not None:
        opt = dataclasses.replace(opt, lr_peak=float(lr_peak))
    if weight_decay is not None:
        opt = dataclasses.replace(opt, weight_decay=float(weight_decay))
    run = dataclasses.replace(run, opt=opt, **run_overrides)
    if run.model != config:
        raise CheckpointError("checkpoint model config does not match its run config")

    model = model_from_arrays(config, arrays)
    state = OptimizerState.from_arrays(model.parameters(), arrays, extra["opt_t"])
    payload = {"opt_state": state, "step": int(extra["step"]),
               "tokens_seen": int(extra["tokens_seen"]), "epoch": int(extra["epoch"]),
               "cursor": int(extra["cursor"]), "path": checkpoint_path}
    return train(run, corpus, out_dir=out_dir, model=model, _resume=payload)


# ---------------------------------------------------------------------------
# context extension


def extension_phases(total_tokens: int,
                     ratio: tuple[int, int] = (5, 1)) -> tuple[int, int]:
    """Split an extension budget into (constant-LR, decay) phase tokens."""
    if total_tokens <= 0:
        raise ConfigError("extension budget must be positive")
    whole = ratio[0] + ratio[1]
    phase1 = total_tokens * ratio[0] // whole
    return phase1, total_tokens - phase1


def run_context_extension(model: EncoderModel, corpus_long, run: RunConfig,
                          total_tokens: int, ratio: tuple[int, int] = (5, 1),
                          new_theta_global: float = 160_000.0,
                          seq_multiplier: int = 8,
                          out_dir: str | None = None):
    """Swap theta, then train two phases on long sequences.

    Phase one holds the LR constant over the larger share of the budget;
    phase two spends the rest under a 1 - sqrt decay. Returns the final
    model and the two TrainResults.
    """
    extended = extend_context(model, new_theta_global,
                              model.config.max_seq * seq_multiplier)
    phase1_tokens, phase2_tokens = extension_phases(total_tokens, ratio)
    capacity = extended.config.max_seq

    # long-context phases run at a constant batch size (the terminal one)
    ladder = ((run.schedule.ladder[-1][0], 1),)
    schedule1 = ScheduleSpec(warmup_tokens=0, stable_tokens=phase1_tokens,
                             decay_tokens=0, ladder=ladder,
                             tokens_per_sample=capacity)
    schedule2 = ScheduleSpec(warmup_tokens=0, stable_tokens=0,
                             decay_tokens=phase2_tokens, ladder=ladder,
                             tokens_per_sample=capacity)
    run1 = dataclasses.replace(run, model=extended.config, schedule=schedule1,
                               max_seq=capacity)
    run2 = dataclasses.replace(run, model=extended.config, schedule=schedule2,
                               max_seq=capacity, seed=run.seed + 1)

    out1 = os.path.join(out_dir, "phase1") if out_dir else None
    out2 = os.path.join(out_dir, "phase2") if out_dir else None
    result1 = train(run1, corpus_long, out_dir=out1, model=extended)
    result2 = train(run2, corpus_long, out_dir=out2, model=result1.model)
    return result2.model, (result1, result2)


def select_anneal_checkpoints(result: TrainResult, schedule: ScheduleSpec,
                              best: int = 3) -> list[str]:
    """Decay-phase checkpoints ranked by val_loss: the `best` plus the final."""
    decay_start = schedule.warmup_tokens + schedule.stable_tokens
    by_step = {m.step: m.val_loss for m in result.metrics}
    candidates = [(by_step[s], path) for s, tok, path in result.checkpoints
                  if tok > decay_start and s in by_step]
    if not candidates:
        raise InputError("no decay-phase checkpoints with recorded val_loss")
    ranked = [path for _, path in sorted(candidates, key=lambda c: c[0])]
    final = result.checkpoints[-1][2]
    chosen = ranked[:best]
    if final not in chosen:
        chosen.append(final)
    return chosen
