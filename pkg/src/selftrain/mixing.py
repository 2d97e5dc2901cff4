"""Token-level mixing of ground-truth and model-generated continuations.

For each continuation position, a Bernoulli(beta) flip decides whether the
position keeps the ground-truth token or takes a token sampled from the
model given the mixed prefix built so far.  The mixed sequence has exactly
the ground-truth length; a sampled EOS does not stop mixing.  Built
offline over frozen parameters, the resulting records feed the
batch-scheduled-sampling objective; the same mixer also serves the online
scheduled-sampling trainer.

RNG consumption order is fixed per position: flip first, then sample only
when the flip selects the model.  The mixed tokens are data; no gradient
ever flows through their construction.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .corpus import BOS_ID, CorpusError, Dataset, Example, dump_record, example_from_record, example_record, parse_dataset_lines
from .model import ModelParams, forward
from .parallel import check_skip_budget, map_indexed
from .rng import stream
from .sampler import GenerationConfig, next_token

log = logging.getLogger(__name__)

FLAG_GROUND_TRUTH = 0
FLAG_GENERATED = 1


@dataclass(frozen=True)
class MixConfig:
    beta: float = 0.2
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must be in [0, 1], got {self.beta}")
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")


@dataclass(frozen=True)
class MixedExample:
    example: Example
    mixed_ids: tuple[int, ...]
    choice_flags: tuple[int, ...]  # per position: 0 ground truth, 1 generated

    def __post_init__(self):
        if not (len(self.mixed_ids) == len(self.choice_flags) == len(self.example.continuation_ids)):
            raise CorpusError(f"mixed example {self.example.id}: length mismatch")
        for j, (flag, mixed, true) in enumerate(
            zip(self.choice_flags, self.mixed_ids, self.example.continuation_ids)
        ):
            if flag == FLAG_GROUND_TRUTH and mixed != true:
                raise CorpusError(
                    f"mixed example {self.example.id}: ground-truth position {j} altered"
                )
            if flag not in (FLAG_GROUND_TRUTH, FLAG_GENERATED):
                raise CorpusError(f"mixed example {self.example.id}: bad flag {flag}")


class ContextOverflow(RuntimeError):
    """Example does not fit the model context; builders skip and report."""


def mix_continuation(
    params: ModelParams,
    example: Example,
    config: MixConfig,
    rng: np.random.Generator,
) -> MixedExample:
    """Mix one continuation against the model, position by position."""
    x = list(example.prompt_ids)
    y = list(example.continuation_ids)
    if 1 + len(x) + len(y) - 1 > params.config.context_len:
        raise ContextOverflow(
            f"example {example.id} needs {len(x) + len(y)} context tokens"
        )
    sample_cfg = GenerationConfig(max_new_tokens=1, temperature=config.temperature, mode="sample")
    mixed: list[int] = []
    flags: list[int] = []
    for j in range(len(y)):
        take_generated = rng.random() < config.beta
        if take_generated:
            logits = forward(params, [BOS_ID] + x + mixed)
            mixed.append(next_token(logits[-1], sample_cfg, rng))
            flags.append(FLAG_GENERATED)
        else:
            mixed.append(y[j])
            flags.append(FLAG_GROUND_TRUTH)
    return MixedExample(example, tuple(mixed), tuple(flags))


def build_ds(
    params: ModelParams,
    dataset: Dataset,
    config: MixConfig,
    workers: int = 1,
) -> list[MixedExample]:
    """Build the offline mixed dataset from frozen parameters.

    Each example draws from its own stream keyed by (seed, example id), so
    output is byte-identical for any worker count.  Oversized examples are
    skipped with a warning; more than 1% skipped fails the build.
    """
    skipped: list[tuple[str, str]] = []

    def one(_, example: Example) -> MixedExample | None:
        rng = stream(config.seed, "ds", example.id)
        try:
            return mix_continuation(params, example, config, rng)
        except ContextOverflow as err:
            log.warning("skipping %s: %s", example.id, err)
            skipped.append((example.id, str(err)))
            return None

    results = map_indexed(one, dataset.examples, workers)
    check_skip_budget(len(dataset.examples), skipped, "build_ds")
    return [r for r in results if r is not None]


def write_mixed_dataset(path: str | Path, mixed: Iterable[MixedExample], task_name: str, seed: int) -> None:
    """Write mixed records; dropping the mixed fields leaves a dataset file."""
    with open(path, "w", encoding="utf-8") as fh:
        for m in mixed:
            rec = example_record(m.example, task_name, seed)
            rec["mixed_ids"] = list(m.mixed_ids)
            rec["choice_flags"] = list(m.choice_flags)
            fh.write(dump_record(rec))
            fh.write("\n")


def read_mixed_dataset(path: str | Path) -> tuple[list[MixedExample], str, int]:
    with open(path, "r", encoding="utf-8") as fh:
        records, task_name, seed = parse_dataset_lines(fh)
    mixed = []
    for rec in records:
        try:
            mixed.append(
                MixedExample(
                    example=example_from_record(rec),
                    mixed_ids=tuple(rec["mixed_ids"]),
                    choice_flags=tuple(rec["choice_flags"]),
                )
            )
        except (KeyError, TypeError, CorpusError) as err:
            raise CorpusError(f"malformed record at line {rec['_lineno']}: {err}") from err
    return mixed, task_name, seed


def bench_scs_vs_bash(params: ModelParams, dataset: Dataset, config, n_batches: int = 4) -> dict:
    """Per-global-batch wall-clock comparison of the two mixing regimes.

    The offline regime reports build-phase and training-step timings
    separately; the online regime mixes inside every step, so its step time
    includes generation.
    """
    from .losses import bash_loss, combined_step_loss
    from .trainer import OptimizerState, optimizer_step

    if n_batches < 1:
        raise ValueError("n_batches must be >= 1")
    rng = stream(config.seed, "bench")
    n = len(dataset.examples)
    batches = [
        [dataset.examples[int(i)] for i in rng.choice(n, size=min(config.batch_size, n), replace=False)]
        for _ in range(n_batches)
    ]

    report = {
        "batch_size": config.batch_size,
        "n_batches": n_batches,
        "bash_build_ms": [],
        "bash_train_step_ms": [],
        "scs_step_ms": [],
    }
    mix_cfg = MixConfig(beta=config.beta, temperature=config.mix_temperature, seed=config.seed)

    # Offline regime: build first (timed per batch), then plain train steps.
    built = []
    for batch in batches:
        t0 = time.perf_counter()
        built.append(build_ds(params, Dataset(batch, dataset.task_name, dataset.seed), mix_cfg))
        report["bash_build_ms"].append(1000 * (time.perf_counter() - t0))
    bash_params = params.clone()
    bash_state = OptimizerState.fresh(bash_params, weight_decay=config.weight_decay)
    for batch, mixed in zip(batches, built):
        t0 = time.perf_counter()
        _, grads = combined_step_loss(bash_params, batch, mixed, mode="bash")
        bash_params, bash_state = optimizer_step(bash_params, grads, bash_state, config.lr)
        report["bash_train_step_ms"].append(1000 * (time.perf_counter() - t0))

    # Online regime: every step mixes its own batch with the current params.
    scs_params = params.clone()
    scs_state = OptimizerState.fresh(scs_params, weight_decay=config.weight_decay)
    for b, batch in enumerate(batches):
        t0 = time.perf_counter()
        mixed = [
            mix_continuation(scs_params, ex, mix_cfg, stream(config.seed, "bench-scs", b, ex.id))
            for ex in batch
        ]
        _, grads = bash_loss(scs_params, mixed)
        scs_params, scs_state = optimizer_step(scs_params, grads, scs_state, config.lr)
        report["scs_step_ms"].append(1000 * (time.perf_counter() - t0))

    for key in ("bash_build_ms", "bash_train_step_ms", "scs_step_ms"):
        report[key + "_mean"] = float(np.mean(report[key]))
    return report
