"""Command-line surface.

Subcommands: train, eval, pack, design-check, tile-init, extend, bench,
avg-ckpt. Global flags: --config <json>, --seed <u64>, --f64 (float64
oracle mode), --out <dir>. Exit codes: 0 success, 2 config error,
3 input error, 4 numeric error.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys

import numpy as np

from . import batching, bench, checkpoint, design, trainer
from .errors import ConfigError, InputError, NumericError
from .model import (ModelConfig, average_checkpoints, extend_context,
                    init_megatron, tile_from_base)
from .tensor import use_dtype


def _load_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _require(args, name: str):
    value = getattr(args, name.replace("-", "_"), None)
    if value is None:
        raise ConfigError(f"--{name} is required for this command")
    return value


def _run_config(args) -> trainer.RunConfig:
    raw = _load_json(_require(args, "config"))
    run = trainer.RunConfig.from_dict(raw)
    if args.seed is not None:
        import dataclasses
        run = dataclasses.replace(run, seed=args.seed)
    return run


def _load_corpus_for(args, run: trainer.RunConfig):
    if args.corpus:
        return batching.load_corpus(args.corpus)
    if args.synth_docs:
        cap = run.max_seq
        return batching.synth_corpus(
            run.model.vocab, args.synth_docs, seed=run.seed,
            mean_len=cap / 2, std_len=cap / 8,
            min_len=min(32, max(3, cap // 4)), max_len=int(0.94 * cap))
    raise ConfigError("train/extend need --corpus FILE or --synth-docs N")


def _cmd_train(args) -> int:
    run = _run_config(args)
    corpus = _load_corpus_for(args, run)
    result = trainer.train(run, corpus, out_dir=args.out)
    final = result.metrics[-1].to_dict() if result.metrics else {}
    print(json.dumps({"steps": result.step, "tokens_seen": result.tokens_seen,
                      "final": final,
                      "checkpoints": [p for _, _, p in result.checkpoints]},
                     indent=2, sort_keys=True))
    return 0


def _cmd_eval(args) -> int:
    model = checkpoint.load_model(_require(args, "ckpt"))
    docs = batching.load_corpus(_require(args, "corpus"))
    capacity = args.capacity or model.config.max_seq
    bins, _ = batching.pack_greedy(docs, capacity, seed=args.seed or 0)
    rng = batching.make_rng(args.seed or 0)
    heldout = [batching.apply_mlm_mask(b, model.config.vocab, args.mlm_rate, rng)
               for b in bins]
    print(json.dumps(trainer.evaluate(model, heldout), indent=2, sort_keys=True))
    return 0


def _cmd_pack(args) -> int:
    docs = batching.load_corpus(_require(args, "corpus"))
    batches, efficiency = batching.pack_greedy(docs, args.capacity,
                                               seed=args.seed or 0)
    print(json.dumps({"documents": len(docs), "bins": len(batches),
                      "capacity": args.capacity, "efficiency": efficiency},
                     indent=2, sort_keys=True))
    return 0


def _load_model_config(args) -> ModelConfig:
    named = {"base": ModelConfig.base, "large": ModelConfig.large,
             "tiny": ModelConfig.tiny}
    if args.config and args.config in named:
        return named[args.config]()
    return ModelConfig.from_dict(_load_json(_require(args, "config")))


def _cmd_design_check(args) -> int:
    config = _load_model_config(args)
    basket = None
    if args.basket:
        basket = [design.GpuSpec(g["name"], g["sm_count"])
                  for g in _load_json(args.basket)]
    report = design.audit_config(config, basket=basket, mode=args.mode)
    print(design.format_report(report, basket=basket))
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "design_report.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
    print(f"json report: {path}")
    return 0


def _cmd_tile_init(args) -> int:
    base = checkpoint.load_model(getattr(args, "from"))
    large_config = ModelConfig.from_dict(_load_json(args.to))
    tiled = tile_from_base(base, large_config, gopher_scaling=not args.no_gopher)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "tiled.ckpt")
    checkpoint.save_model(path, tiled)
    print(path)
    return 0


def _cmd_extend(args) -> int:
    model = checkpoint.load_model(_require(args, "ckpt"))
    new_max = args.max_seq or model.config.max_seq * args.multiplier
    os.makedirs(args.out, exist_ok=True)
    if args.total_tokens:
        raw = _load_json(_require(args, "config"))
        run = trainer.RunConfig.from_dict(raw)
        corpus = _load_corpus_for(args, run)
        final, _ = trainer.run_context_extension(
            model, corpus, run, total_tokens=args.total_tokens,
            new_theta_global=args.theta,
            seq_multiplier=new_max // model.config.max_seq, out_dir=args.out)
    else:
        final = extend_context(model, args.theta, new_max)
    path = os.path.join(args.out, "extended.ckpt")
    checkpoint.save_model(path, final)
    print(path)
    return 0


def _cmd_bench(args) -> int:
    if args.compare_backends:
        report = bench.bench_kernel_backends(seq_len=args.max_len,
                                             window=None if args.global_attn else 128,
                                             runs=args.runs,
                                             seed=args.seed or 0)
        print(json.dumps(report, indent=2, sort_keys=True))
        return 0
    if args.ckpt:
        model = checkpoint.load_model(args.ckpt)
    else:
        config = _load_model_config(args) if args.config else ModelConfig.tiny(
            max_seq=args.max_len)
        model = init_megatron(config, args.seed or 0)
    spec = bench.BenchSpec(max_len=args.max_len, mode=args.mode,
                           docs=args.docs, seed=args.seed or 0)
    docs = bench.gen_bench_sets(spec, vocab=model.config.vocab)
    out = {"spec": spec.to_dict()}
    for mode in ("padded", "unpadded"):
        report = bench.bench_throughput(model, docs, mode, spec, runs=args.runs,
                                        batch_rows=args.batch_rows,
                                        max_len=args.max_len)
        out[mode] = report.to_dict()
    out["unpadded_speedup"] = (out["unpadded"]["tokens_per_second"]
                               / out["padded"]["tokens_per_second"])
    if args.memory_budget:
        out["max_batch"] = bench.max_batch_search(model.config, args.max_len,
                                                  args.memory_budget)
    print(json.dumps(out, indent=2, sort_keys=True))
    return 0


def _cmd_avg_ckpt(args) -> int:
    models = [checkpoint.load_model(p) for p in args.ckpts]
    averaged = average_checkpoints(models)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "averaged.ckpt")
    checkpoint.save_model(path, averaged)
    print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deskbert", description=__doc__)
    parser.add_argument("--config", help="JSON config file (run or model config)")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--f64", action="store_true", help="float64 oracle mode")
    parser.add_argument("--out", default="out", help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the MLM training loop")
    p.add_argument("--corpus")
    p.add_argument("--synth-docs", type=int, default=0)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="masked loss/accuracy of a checkpoint")
    p.add_argument("--ckpt")
    p.add_argument("--corpus")
    p.add_argument("--capacity", type=int, default=0)
    p.add_argument("--mlm-rate", type=float, default=0.30)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("pack", help="pack a corpus and report efficiency")
    p.add_argument("--corpus")
    p.add_argument("--capacity", type=int, default=1024)
    p.set_defaults(func=_cmd_pack)

    p = sub.add_parser("design-check", help="audit weight shapes against a GPU basket")
    p.add_argument("--basket", help="JSON list of {name, sm_count}")
    p.add_argument("--mode", choices=("occupancy", "modulus"), default="occupancy")
    p.set_defaults(func=_cmd_design_check)

    p = sub.add_parser("tile-init", help="grow a checkpoint into a larger config")
    p.add_argument("--from", dest="from", required=True, metavar="BASE_CKPT")
    p.add_argument("--to", required=True, metavar="LARGE_CONFIG_JSON")
    p.add_argument("--no-gopher", action="store_true")
    p.set_defaults(func=_cmd_tile_init)

    p = sub.add_parser("extend", help="swap global rope theta / raise max_seq")
    p.add_argument("--ckpt")
    p.add_argument("--theta", type=float, default=160_000.0)
    p.add_argument("--max-seq", type=int, default=0)
    p.add_argument("--multiplier", type=int, default=8)
    p.add_argument("--total-tokens", type=int, default=0,
                   help="also run the two training phases over this budget")
    p.add_argument("--corpus")
    p.add_argument("--synth-docs", type=int, default=0)
    p.set_defaults(func=_cmd_extend)

    p = sub.add_parser("bench", help="padded vs unpadded throughput")
    p.add_argument("--ckpt")
    p.add_argument("--mode", choices=("fixed", "variable"), default="variable")
    p.add_argument("--max-len", type=int, default=512)
    p.add_argument("--docs", type=int, default=64)
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--batch-rows", type=int, default=8)
    p.add_argument("--memory-budget", type=int, default=0)
    p.add_argument("--compare-backends", action="store_true",
                   help="time the attention kernels on every backend")
    p.add_argument("--global-attn", action="store_true",
                   help="use global attention in --compare-backends")
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("avg-ckpt", help="elementwise mean of checkpoints")
    p.add_argument("ckpts", nargs="+")
    p.set_defaults(func=_cmd_avg_ckpt)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    dtype_ctx = use_dtype(np.float64) if args.f64 else contextlib.nullcontext()
    try:
        with dtype_ctx:
            return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
