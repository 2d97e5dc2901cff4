"""Training orchestration: warmup, offline rebuild iterations, inner loops.

Every mode starts from the same maximum-likelihood warmup.  The offline
modes then alternate H times between freezing the parameters to rebuild
their auxiliary dataset and running K2 combined gradient steps; the online
scheduled-sampling mode instead mixes its minibatch against the current
parameters inside every step.  Gradient steps are strictly sequential;
only the offline build phases fan out.

All batch draws and build streams derive from the run seed, so a (config,
seed) pair pins the loss trajectory and the final checkpoint bytes
(wall-clock columns excepted).
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import torch

from .corpus import Dataset
from .correction import RacTemplate, build_dr, write_rac_dataset
from .losses import BatchLoss, Grads, bash_loss, combined_step_loss, sft_loss
from .mixing import MixConfig, build_ds, mix_continuation, write_mixed_dataset
from .model import ModelConfig, ModelParams, save_checkpoint
from .rng import stream, stream_seed
from .sampler import GenerationConfig

TRAIN_MODES = ("sft_only", "bash", "rac", "scs_online")
SCHEDULES = ("constant", "cosine")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class ConfigError(ValueError):
    """Invalid training configuration or config file."""


class TrainingDiverged(RuntimeError):
    """Loss or gradients became non-finite; run aborted."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-3
    k1_warmup_steps: int = 300
    k2_inner_steps: int = 300
    h_outer_iters: int = 2
    batch_size: int = 32
    beta: float = 0.2
    schedule: str = "cosine"
    lr_warmup_frac: float = 0.1
    seed: int = 0
    mode: str = "sft_only"
    include_sft_loss: bool = True
    mix_temperature: float = 1.0
    gen_temperature: float = 1.0
    max_new_tokens: int = 16
    weight_decay: float = 0.0
    reset_optimizer_between_phases: bool = True
    workers: int = 1

    def __post_init__(self):
        problems = []
        if self.mode not in TRAIN_MODES:
            problems.append(f"mode must be one of {TRAIN_MODES}, got {self.mode!r}")
        if self.schedule not in SCHEDULES:
            problems.append(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if not self.lr > 0:
            problems.append("lr must be > 0")
        if self.k1_warmup_steps < 0:
            problems.append("k1_warmup_steps must be >= 0")
        if self.mode in ("bash", "rac", "scs_online"):
            if self.k1_warmup_steps < 1:
                problems.append(f"k1_warmup_steps must be >= 1 in {self.mode} mode")
            if self.k2_inner_steps < 1:
                problems.append("k2_inner_steps must be >= 1")
            if self.h_outer_iters < 1:
                problems.append("h_outer_iters must be >= 1")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if not 0.0 <= self.beta <= 1.0:
            problems.append("beta must be in [0, 1]")
        if not 0.0 <= self.lr_warmup_frac <= 1.0:
            problems.append("lr_warmup_frac must be in [0, 1]")
        if self.max_new_tokens < 1:
            problems.append("max_new_tokens must be >= 1")
        if self.workers < 1:
            problems.append("workers must be >= 1")
        if problems:
            raise ConfigError("; ".join(problems))


@dataclass
class OptimizerState:
    step: int
    m: dict[str, torch.Tensor]
    v: dict[str, torch.Tensor]
    weight_decay: float = 0.0

    @classmethod
    def fresh(cls, params: ModelParams, weight_decay: float = 0.0) -> "OptimizerState":
        return cls(
            step=0,
            m={k: torch.zeros_like(t) for k, t in params.tensors.items()},
            v={k: torch.zeros_like(t) for k, t in params.tensors.items()},
            weight_decay=weight_decay,
        )


def optimizer_step(
    params: ModelParams, grads: Grads, state: OptimizerState, lr: float
) -> tuple[ModelParams, OptimizerState]:
    """One decoupled-weight-decay adaptive-moment update with bias correction."""
    t = state.step + 1
    bias1 = 1 - ADAM_BETA1**t
    bias2 = 1 - ADAM_BETA2**t
    step_size = lr / bias1
    new_tensors, new_m, new_v = {}, {}, {}
    with torch.no_grad():
        for name, p in params.tensors.items():
            g = grads[name]
            if not torch.isfinite(g).all():
                raise TrainingDiverged(f"non-finite gradient in {name} at step {t}")
            m = state.m[name].mul(ADAM_BETA1).add_(g, alpha=1 - ADAM_BETA1)
            v = state.v[name].mul(ADAM_BETA2).addcmul_(g, g, value=1 - ADAM_BETA2)
            denom = v.div(bias2).sqrt_().add_(ADAM_EPS)
            if state.weight_decay:
                out = p.mul(1 - lr * state.weight_decay).addcdiv_(m, denom, value=-step_size)
            else:
                out = p.addcdiv(m, denom, value=-step_size)
            new_tensors[name] = out
            new_m[name], new_v[name] = m, v
    new_params = ModelParams(params.config, new_tensors, params.sft_warmed)
    return new_params, OptimizerState(t, new_m, new_v, state.weight_decay)


def lr_at(step: int, total_steps: int, config: TrainConfig) -> float:
    """Learning rate for a phase-local step index in [0, total_steps]."""
    if config.schedule == "constant":
        return config.lr
    warmup = int(round(config.lr_warmup_frac * total_steps))
    if warmup > 0 and step < warmup:
        return config.lr * step / warmup
    if total_steps <= warmup:
        return config.lr
    progress = (step - warmup) / (total_steps - warmup)
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class MetricsRow:
    step: int
    phase: str
    lr: float
    loss_total: float
    loss_sft: float
    loss_aux: float
    unmasked_token_count: int
    wall_ms: float


METRICS_COLUMNS = [f.name for f in fields(MetricsRow)]


@dataclass
class RunRecord:
    rows: list[MetricsRow] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)
    artifacts: list[dict] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)

    def extend(self, other: "RunRecord") -> None:
        self.rows.extend(other.rows)
        self.checkpoints.extend(other.checkpoints)
        self.artifacts.extend(other.artifacts)
        for key, value in other.timings.items():
            self.timings[key] = self.timings.get(key, 0.0) + value


def write_metrics(path: str | Path, rows: list[MetricsRow]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_COLUMNS)
        for row in rows:
            d = asdict(row)
            writer.writerow([d[c] for c in METRICS_COLUMNS])


def read_metrics(path: str | Path) -> list[MetricsRow]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        rows = []
        for rec in reader:
            rows.append(
                MetricsRow(
                    step=int(rec["step"]),
                    phase=rec["phase"],
                    lr=float(rec["lr"]),
                    loss_total=float(rec["loss_total"]),
                    loss_sft=float(rec["loss_sft"]),
                    loss_aux=float(rec["loss_aux"]),
                    unmasked_token_count=int(rec["unmasked_token_count"]),
                    wall_ms=float(rec["wall_ms"]),
                )
            )
    return rows


def _draw_batch(rng, examples: list, batch_size: int) -> list:
    n = len(examples)
    idx = rng.choice(n, size=min(batch_size, n), replace=False)
    return [examples[int(i)] for i in idx]


def _abort_if_diverged(loss: BatchLoss, params: ModelParams, out_dir: Path | None, step: int):
    if math.isfinite(loss.value):
        return
    if out_dir is not None:
        save_checkpoint(Path(out_dir) / "last_good.ckpt", params)
    raise TrainingDiverged(f"non-finite loss at step {step}")


def _row(step, phase, lr, loss: BatchLoss, t0) -> MetricsRow:
    return MetricsRow(
        step=step,
        phase=phase,
        lr=lr,
        loss_total=loss.value,
        loss_sft=loss.components.get("sft", 0.0),
        loss_aux=loss.components.get("bash", loss.components.get("rac", 0.0)),
        unmasked_token_count=loss.token_count,
        wall_ms=1000 * (time.perf_counter() - t0),
    )


def train_sft(
    params: ModelParams,
    dataset: Dataset,
    config: TrainConfig,
    out_dir: str | Path | None = None,
    opt_state: OptimizerState | None = None,
    step_offset: int = 0,
    batch_rng=None,
) -> tuple[ModelParams, RunRecord, OptimizerState]:
    """Warmup phase: K1 maximum-likelihood steps on shuffled minibatches."""
    if not dataset.examples:
        raise ConfigError("dataset is empty")
    record = RunRecord()
    state = opt_state or OptimizerState.fresh(params, config.weight_decay)
    steps = config.k1_warmup_steps
    if steps == 0:
        return params, record, state
    rng = batch_rng if batch_rng is not None else stream(config.seed, "sft-batch")
    phase_start = time.perf_counter()
    for step in range(steps):
        t0 = time.perf_counter()
        lr = lr_at(step, steps, config)
        batch = _draw_batch(rng, dataset.examples, config.batch_size)
        loss, grads = sft_loss(params, batch)
        _abort_if_diverged(loss, params, out_dir, step_offset + step)
        params, state = optimizer_step(params, grads, state, lr)
        record.rows.append(_row(step_offset + step, "sft", lr, loss, t0))
    params.sft_warmed = True
    record.timings["sft_s"] = time.perf_counter() - phase_start
    if out_dir is not None:
        ckpt = Path(out_dir) / "warmup.ckpt"
        save_checkpoint(ckpt, params)
        record.checkpoints.append(str(ckpt))
    return params, record, state


def _train_offline(
    params: ModelParams,
    dataset: Dataset,
    config: TrainConfig,
    mode: str,
    out_dir: str | Path | None,
    opt_state: OptimizerState | None,
    step_offset: int,
    batch_rng=None,
) -> tuple[ModelParams, RunRecord, OptimizerState]:
    """Shared outer/inner loop for the two offline modes."""
    if not params.sft_warmed:
        raise ConfigError(f"{mode} training requires warmed-up parameters")
    record = RunRecord()
    state = opt_state or OptimizerState.fresh(params, config.weight_decay)
    sft_rng = batch_rng if batch_rng is not None else stream(config.seed, "sft-batch")
    aux_rng = stream(config.seed, mode, "aux-batch")
    total = config.h_outer_iters * config.k2_inner_steps
    for h in range(1, config.h_outer_iters + 1):
        build_start = time.perf_counter()
        if mode == "bash":
            mix_cfg = MixConfig(
                beta=config.beta,
                temperature=config.mix_temperature,
                seed=stream_seed(config.seed, "ds-iter", h),
            )
            aux_data = build_ds(params, dataset, mix_cfg, workers=config.workers)
        else:
            gen_cfg = GenerationConfig(
                max_new_tokens=config.max_new_tokens,
                temperature=config.gen_temperature,
                mode="sample",
            )
            aux_data = build_dr(
                params,
                dataset,
                gen_cfg,
                RacTemplate(dataset.task_name),
                seed=stream_seed(config.seed, "dr-iter", h),
                workers=config.workers,
            )
        build_s = time.perf_counter() - build_start
        artifact = {"phase": mode, "iteration": h, "size": len(aux_data), "build_s": build_s, "path": None}
        if out_dir is not None:
            path = Path(out_dir) / f"{'ds' if mode == 'bash' else 'dr'}_iter{h}.jsonl"
            if mode == "bash":
                write_mixed_dataset(path, aux_data, dataset.task_name, dataset.seed)
            else:
                write_rac_dataset(path, aux_data, dataset.task_name, dataset.seed)
            artifact["path"] = str(path)
        record.artifacts.append(artifact)
        record.timings[f"{mode}_build_s"] = record.timings.get(f"{mode}_build_s", 0.0) + build_s

        for k in range(config.k2_inner_steps):
            t0 = time.perf_counter()
            local_step = (h - 1) * config.k2_inner_steps + k
            lr = lr_at(local_step, total, config)
            sft_examples = _draw_batch(sft_rng, dataset.examples, config.batch_size)
            aux_examples = _draw_batch(aux_rng, aux_data, config.batch_size)
            loss, grads = combined_step_loss(
                params, sft_examples, aux_examples, mode, include_sft=config.include_sft_loss
            )
            _abort_if_diverged(loss, params, out_dir, step_offset + local_step)
            params, state = optimizer_step(params, grads, state, lr)
            record.rows.append(_row(step_offset + local_step, mode, lr, loss, t0))
    if out_dir is not None:
        ckpt = Path(out_dir) / "final.ckpt"
        save_checkpoint(ckpt, params)
        record.checkpoints.append(str(ckpt))
    return params, record, state


def train_bash(
    params: ModelParams,
    dataset: Dataset,
    config: TrainConfig,
    out_dir: str | Path | None = None,
    opt_state: OptimizerState | None = None,
    step_offset: int = 0,
    batch_rng=None,
) -> tuple[ModelParams, RunRecord, OptimizerState]:
    """H iterations of {freeze -> rebuild mixed dataset -> K2 combined steps}."""
    return _train_offline(params, dataset, config, "bash", out_dir, opt_state, step_offset, batch_rng)


def train_rac(
    params: ModelParams,
    dataset: Dataset,
    config: TrainConfig,
    out_dir: str | Path | None = None,
    opt_state: OptimizerState | None = None,
    step_offset: int = 0,
    batch_rng=None,
) -> tuple[ModelParams, RunRecord, OptimizerState]:
    """H iterations of {freeze -> rebuild correction dataset -> K2 combined steps}."""
    return _train_offline(params, dataset, config, "rac", out_dir, opt_state, step_offset, batch_rng)


def train_scs_online(
    params: ModelParams,
    dataset: Dataset,
    config: TrainConfig,
    out_dir: str | Path | None = None,
    opt_state: OptimizerState | None = None,
    step_offset: int = 0,
    batch_rng=None,
) -> tuple[ModelParams, RunRecord, OptimizerState]:
    """Online scheduled sampling: mix every minibatch with the current params.

    Runs H * K2 steps so trajectories are step-for-step comparable with the
    offline regime; there is no offline dataset and no SFT component, the
    objective is the mixed-context loss alone.
    """
    if not params.sft_warmed:
        raise ConfigError("scs_online training requires warmed-up parameters")
    if not dataset.examples:
        raise ConfigError("dataset is empty")
    record = RunRecord()
    state = opt_state or OptimizerState.fresh(params, config.weight_decay)
    rng = batch_rng if batch_rng is not None else stream(config.seed, "sft-batch")
    total = config.h_outer_iters * config.k2_inner_steps
    mix_cfg = MixConfig(beta=config.beta, temperature=config.mix_temperature, seed=config.seed)
    for step in range(total):
        t0 = time.perf_counter()
        lr = lr_at(step, total, config)
        batch = _draw_batch(rng, dataset.examples, config.batch_size)
        mixed = [
            mix_continuation(params, ex, mix_cfg, stream(config.seed, "scs-mix", step, ex.id))
            for ex in batch
        ]
        loss, grads = bash_loss(params, mixed)
        loss = BatchLoss(loss.value, loss.token_count, {"scs": loss.value})
        _abort_if_diverged(loss, params, out_dir, step_offset + step)
        params, state = optimizer_step(params, grads, state, lr)
        row = _row(step_offset + step, "scs_online", lr, loss, t0)
        row.loss_aux = loss.components["scs"]
        record.rows.append(row)
    if out_dir is not None:
        ckpt = Path(out_dir) / "final.ckpt"
        save_checkpoint(ckpt, params)
        record.checkpoints.append(str(ckpt))
    return params, record, state


def run_training(
    params: ModelParams,
    dataset: Dataset,
    config: TrainConfig,
    out_dir: str | Path | None = None,
) -> tuple[ModelParams, RunRecord]:
    """Full pipeline for the configured mode: warmup first, then the phase.

    Mixed or correction data is never consumed before the warmup finishes.
    By default the optimizer state is reset at the phase boundary;
    ``reset_optimizer_between_phases=False`` carries it across instead.
    """
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    batch_rng = stream(config.seed, "sft-batch")
    params, record, state = train_sft(params, dataset, config, out_dir, batch_rng=batch_rng)
    if config.mode != "sft_only":
        carried = None if config.reset_optimizer_between_phases else state
        phase = {"bash": train_bash, "rac": train_rac, "scs_online": train_scs_online}[config.mode]
        params, phase_record, _ = phase(
            params,
            dataset,
            config,
            out_dir,
            carried,
            step_offset=config.k1_warmup_steps,
            batch_rng=batch_rng,
        )
        record.extend(phase_record)
    elif out_dir is not None:
        ckpt = Path(out_dir) / "final.ckpt"
        save_checkpoint(ckpt, params)
        record.checkpoints.append(str(ckpt))
    record.timings["total_s"] = time.perf_counter() - start
    if out_dir is not None:
        metrics = Path(out_dir) / "metrics.csv"
        write_metrics(metrics, record.rows)
        record.artifacts.append({"phase": "metrics", "path": str(metrics)})
    return params, record


# ---------------------------------------------------------------------------
# Flat key=value config files covering every model and training field.
# ---------------------------------------------------------------------------

_BOOL_WORDS = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def _parse_value(raw: str, kind: type):
    if kind is bool:
        word = raw.strip().lower()
        if word not in _BOOL_WORDS:
            raise ValueError(f"expected a boolean, got {raw!r}")
        return _BOOL_WORDS[word]
    return kind(raw.strip())


def write_config_file(path: str | Path, model_config: ModelConfig, train_config: TrainConfig) -> None:
    lines = ["# model"]
    for f in fields(ModelConfig):
        lines.append(f"{f.name} = {getattr(model_config, f.name)}")
    lines.append("")
    lines.append("# training")
    for f in fields(TrainConfig):
        lines.append(f"{f.name} = {getattr(train_config, f.name)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def parse_config_text(text: str, overrides: dict | None = None) -> tuple[ModelConfig, TrainConfig]:
    """Parse a flat key=value document; unknown keys are collected and rejected."""
    model_fields = {f.name: f.type for f in fields(ModelConfig)}
    train_fields = {f.name: f.type for f in fields(TrainConfig)}
    type_names = {"int": int, "float": float, "str": str, "bool": bool}
    model_kwargs: dict = {}
    train_kwargs: dict = {}
    unknown: list[str] = []
    bad: list[str] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            bad.append(f"line {lineno}: not a key = value pair")
            continue
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key in model_fields:
            target, kind = model_kwargs, type_names[model_fields[key]]
        elif key in train_fields:
            target, kind = train_kwargs, type_names[train_fields[key]]
        else:
            unknown.append(key)
            continue
        try:
            target[key] = _parse_value(raw, kind)
        except ValueError as err:
            bad.append(f"line {lineno}: {key}: {err}")
    problems = []
    if unknown:
        problems.append(f"unknown keys: {', '.join(sorted(unknown))}")
    problems.extend(bad)
    if problems:
        raise ConfigError("; ".join(problems))
    for key, value in (overrides or {}).items():
        if key in model_fields:
            model_kwargs[key] = value
        elif key in train_fields:
            train_kwargs[key] = value
        else:
            raise ConfigError(f"unknown keys: {key}")
    return ModelConfig(**model_kwargs), TrainConfig(**train_kwargs)


def read_config_file(path: str | Path, overrides: dict | None = None) -> tuple[ModelConfig, TrainConfig]:
    return parse_config_text(Path(path).read_text(encoding="utf-8"), overrides)
