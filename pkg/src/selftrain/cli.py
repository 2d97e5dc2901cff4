"""Command-line surface for the whole pipeline.

Subcommands: gen-corpus, train, build, eval, sample, distances, bench.
Flags override config-file values which override defaults.  All randomness
flows from --seed through named sub-streams; every command writes a run
manifest recording the config snapshot and content hashes of the files it
read and wrote.

Exit codes: 0 success, 2 validation error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

from .corpus import (
    BOS_ID,
    SEP_ID,
    CorpusError,
    Vocab,
    gen_addition_task,
    gen_copy_task,
    gen_extract_task,
    read_dataset,
    write_dataset,
    write_vocab,
)
from .correction import RacTemplate, build_dr, write_rac_dataset
from .evaluate import (
    decode_generation,
    embedding_distance_distribution,
    evaluate_checkpoint,
    write_distance_records,
    write_eval_reports,
    write_quartile_table,
)
from .manifest import build_manifest, write_manifest
from .mixing import MixConfig, bench_scs_vs_bash, build_ds, write_mixed_dataset
from .model import CheckpointError, ModelConfig, ModelError, init_params, load_checkpoint
from .sampler import GenerationConfig, generate
from .trainer import ConfigError, TrainConfig, read_config_file, run_training, write_config_file

VALIDATION_ERRORS = (CorpusError, ModelError, ConfigError, CheckpointError, ValueError, FileNotFoundError)


def _fail(kind: str, message: str) -> int:
    print(f"selftrain: error: {kind}: {message}", file=sys.stderr)
    return 2 if kind == "validation" else 3


def _emit_manifest(out_path: Path, command: str, config: dict, inputs: list, outputs: list, wall_s: float) -> None:
    manifest = build_manifest(command, config, inputs, outputs, wall_s)
    write_manifest(out_path, manifest)


def _gen_config_from_args(args) -> GenerationConfig:
    return GenerationConfig(
        max_new_tokens=args.max_new_tokens,
        temperature=args.temperature,
        mode="greedy" if args.greedy else "sample",
    )


def cmd_gen_corpus(args) -> int:
    t0 = time.perf_counter()
    if args.task in ("copy", "copy-rev"):
        dataset = gen_copy_task(
            args.n,
            min_len=args.min_len,
            max_len=args.max_len,
            reverse=(args.task == "copy-rev"),
            seed=args.seed,
        )
    elif args.task == "addition":
        dataset = gen_addition_task(args.n, max_digits=args.max_digits, seed=args.seed)
    elif args.task == "extract":
        dataset = gen_extract_task(args.n, stride=args.stride, seed=args.seed)
    else:
        raise CorpusError(f"unknown task {args.task!r}")
    write_dataset(args.out, dataset)
    outputs = [args.out]
    if args.vocab_out:
        write_vocab(args.vocab_out, Vocab.default())
        outputs.append(args.vocab_out)
    _emit_manifest(
        Path(str(args.out) + ".manifest.json"),
        "gen-corpus",
        {"task": args.task, "n": args.n, "seed": args.seed},
        [],
        outputs,
        time.perf_counter() - t0,
    )
    print(f"wrote {len(dataset.examples)} examples to {args.out}")
    return 0


def _collect_overrides(args, keys: dict[str, str]) -> dict:
    overrides = {}
    for attr, field_name in keys.items():
        value = getattr(args, attr)
        if value is not None:
            overrides[field_name] = value
    return overrides


TRAIN_OVERRIDE_KEYS = {
    "mode": "mode",
    "seed": "seed",
    "lr": "lr",
    "k1": "k1_warmup_steps",
    "k2": "k2_inner_steps",
    "h": "h_outer_iters",
    "batch_size": "batch_size",
    "beta": "beta",
    "schedule": "schedule",
    "workers": "workers",
    "max_new_tokens": "max_new_tokens",
}


def _load_configs(args):
    overrides = _collect_overrides(args, TRAIN_OVERRIDE_KEYS)
    if getattr(args, "include_sft_loss", None) is not None:
        overrides["include_sft_loss"] = args.include_sft_loss
    if args.config:
        return read_config_file(args.config, overrides)
    return ModelConfig(), TrainConfig(**overrides)


def cmd_train(args) -> int:
    t0 = time.perf_counter()
    model_config, train_config = _load_configs(args)
    dataset = read_dataset(args.data)
    if not dataset.examples:
        raise CorpusError(f"no examples in {args.data}")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    inputs = [args.data] + ([args.config] if args.config else [])
    if args.init_checkpoint:
        params, model_config, _ = load_checkpoint(args.init_checkpoint)
        inputs.append(args.init_checkpoint)
    else:
        params = init_params(model_config, train_config.seed)
    snapshot = out_dir / "config.txt"
    write_config_file(snapshot, model_config, train_config)
    params, record = run_training(params, dataset, train_config, out_dir)
    outputs = [str(snapshot)] + record.checkpoints
    outputs += [a["path"] for a in record.artifacts if a.get("path")]
    _emit_manifest(
        out_dir / "manifest.json",
        "train",
        {"model": dataclasses.asdict(model_config), "train": dataclasses.asdict(train_config)},
        inputs,
        outputs,
        time.perf_counter() - t0,
    )
    final_loss = record.rows[-1].loss_total if record.rows else float("nan")
    print(f"trained mode={train_config.mode} steps={len(record.rows)} final_loss={final_loss:.4f}")
    return 0


def cmd_build(args) -> int:
    t0 = time.perf_counter()
    model_config, train_config = _load_configs(args)
    params, _, _ = load_checkpoint(args.checkpoint)
    dataset = read_dataset(args.data)
    if args.kind == "ds":
        mixed = build_ds(
            params,
            dataset,
            MixConfig(train_config.beta, train_config.mix_temperature, train_config.seed),
            workers=train_config.workers,
        )
        write_mixed_dataset(args.out, mixed, dataset.task_name, dataset.seed)
        count = len(mixed)
    elif args.kind == "dr":
        gen_cfg = GenerationConfig(
            max_new_tokens=train_config.max_new_tokens,
            temperature=train_config.gen_temperature,
            mode="sample",
        )
        built = build_dr(params, dataset, gen_cfg, RacTemplate(dataset.task_name), seed=train_config.seed, workers=train_config.workers)
        write_rac_dataset(args.out, built, dataset.task_name, dataset.seed)
        count = len(built)
    else:
        raise ConfigError(f"kind must be 'ds' or 'dr', got {args.kind!r}")
    _emit_manifest(
        Path(str(args.out) + ".manifest.json"),
        f"build-{args.kind}",
        {"train": dataclasses.asdict(train_config)},
        [args.checkpoint, args.data] + ([args.config] if args.config else []),
        [args.out],
        time.perf_counter() - t0,
    )
    print(f"built {count} records to {args.out}")
    return 0


def cmd_eval(args) -> int:
    t0 = time.perf_counter()
    params, _, _ = load_checkpoint(args.checkpoint)
    dataset = read_dataset(args.data)
    gen_config = _gen_config_from_args(args)
    report = evaluate_checkpoint(
        params,
        dataset,
        gen_config,
        n_repeats=args.repeats,
        seed=args.seed,
        workers=args.workers,
        label=args.label or Path(args.checkpoint).stem,
    )
    write_eval_reports(args.out, [report])
    _emit_manifest(
        Path(str(args.out) + ".manifest.json"),
        "eval",
        {"repeats": args.repeats, "seed": args.seed, "mode": gen_config.mode, "temperature": gen_config.temperature},
        [args.checkpoint, args.data],
        [args.out],
        time.perf_counter() - t0,
    )
    print(
        f"exact_match={report.exact_match:.4f} rouge1={report.rouge1:.4f} "
        f"rouge2={report.rouge2:.4f} rougeL={report.rougeL:.4f} win_rate={report.win_rate:.4f}"
    )
    return 0


def cmd_sample(args) -> int:
    params, _, _ = load_checkpoint(args.checkpoint)
    vocab = Vocab.default()
    prompt_ids = vocab.encode(args.prompt)
    if args.append_sep:
        prompt_ids.append(SEP_ID)
    gen_config = _gen_config_from_args(args)
    from .rng import stream

    result = generate(params, [BOS_ID] + prompt_ids, gen_config, stream(args.seed, "sample"))
    print(decode_generation(result.tokens, vocab))
    return 0


def cmd_distances(args) -> int:
    t0 = time.perf_counter()
    params, _, _ = load_checkpoint(args.checkpoint)
    dataset = read_dataset(args.prompts)
    wanted = set(args.ids.split(",")) if args.ids else None
    examples = [ex for ex in dataset.examples if wanted is None or ex.id in wanted]
    if not examples:
        raise CorpusError("no matching prompts")
    gen_config = GenerationConfig(max_new_tokens=args.max_new_tokens, temperature=args.temperature, mode="sample")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dists = [
        embedding_distance_distribution(
            params,
            ex.prompt_ids,
            ex.continuation_ids,
            args.n,
            gen_config,
            seed=args.seed,
            prompt_id=ex.id,
            workers=args.workers,
        )
        for ex in examples
    ]
    records = out_dir / "distances.jsonl"
    table = out_dir / "quartiles.csv"
    write_distance_records(records, dists)
    write_quartile_table(table, dists)
    _emit_manifest(
        out_dir / "manifest.json",
        "distances",
        {"n": args.n, "temperature": args.temperature, "seed": args.seed},
        [args.checkpoint, args.prompts],
        [records, table],
        time.perf_counter() - t0,
    )
    for d in dists:
        print(f"{d.prompt_id}: median={d.summary['median']:.4f} q3={d.summary['q3']:.4f}")
    return 0


def cmd_bench(args) -> int:
    t0 = time.perf_counter()
    _, train_config = _load_configs(args)
    params, _, _ = load_checkpoint(args.checkpoint)
    dataset = read_dataset(args.data)
    report = bench_scs_vs_bash(params, dataset, train_config, n_batches=args.n_batches)
    Path(args.out).write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    _emit_manifest(
        Path(str(args.out) + ".manifest.json"),
        "bench",
        {"n_batches": args.n_batches, "batch_size": train_config.batch_size},
        [args.checkpoint, args.data] + ([args.config] if args.config else []),
        [args.out],
        time.perf_counter() - t0,
    )
    print(
        f"scs_step_ms={report['scs_step_ms_mean']:.1f} "
        f"bash_train_step_ms={report['bash_train_step_ms_mean']:.1f} "
        f"bash_build_ms={report['bash_build_ms_mean']:.1f}"
    )
    return 0


def _add_train_override_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="flat key=value config file")
    p.add_argument("--mode", default=None, choices=["sft_only", "bash", "rac", "scs_online"])
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--k1", type=int, default=None, help="warmup steps")
    p.add_argument("--k2", type=int, default=None, help="inner steps per iteration")
    p.add_argument("--h", type=int, default=None, help="outer iterations")
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--beta", type=float, default=None, help="mixing factor")
    p.add_argument("--schedule", default=None, choices=["constant", "cosine"])
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--max-new-tokens", dest="max_new_tokens", type=int, default=None)
    p.add_argument("--include-sft-loss", dest="include_sft_loss", action="store_true", default=None)
    p.add_argument("--no-include-sft-loss", dest="include_sft_loss", action="store_false")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="selftrain", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="generate a synthetic task dataset")
    p.add_argument("--task", required=True, choices=["copy", "copy-rev", "addition", "extract"])
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--min-len", dest="min_len", type=int, default=3)
    p.add_argument("--max-len", dest="max_len", type=int, default=8)
    p.add_argument("--max-digits", dest="max_digits", type=int, default=4)
    p.add_argument("--stride", type=int, default=2)
    p.add_argument("--vocab-out", dest="vocab_out", default=None)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("train", help="train a model in any mode")
    _add_train_override_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--init-checkpoint", dest="init_checkpoint", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("build", help="build an offline mixed or correction dataset")
    _add_train_override_flags(p)
    p.add_argument("--kind", required=True, choices=["ds", "dr"])
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--greedy", action="store_true")
    p.add_argument("--temperature", type=float, default=0.7)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-new-tokens", dest="max_new_tokens", type=int, default=16)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--label", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sample", help="decode one continuation to stdout")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--greedy", action="store_true")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--max-new-tokens", dest="max_new_tokens", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--append-sep", dest="append_sep", action="store_true", help="append the separator token (copy/extract prompts)")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("distances", help="distance distributions for probe prompts")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompts", required=True, help="dataset file with probe prompts")
    p.add_argument("--ids", default=None, help="comma-separated example ids (default: all)")
    p.add_argument("--n", type=int, default=256)
    p.add_argument("--temperature", type=float, default=0.7)
    p.add_argument("--max-new-tokens", dest="max_new_tokens", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_distances)

    p = sub.add_parser("bench", help="time online mixing against offline build + train")
    _add_train_override_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-batches", dest="n_batches", type=int, default=4)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except VALIDATION_ERRORS as err:
        return _fail("validation", str(err))
    except Exception as err:  # noqa: BLE001 - single CLI boundary
        return _fail("runtime", f"{type(err).__name__}: {err}")


if __name__ == "__main__":
    sys.exit(main())
