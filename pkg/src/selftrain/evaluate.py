"""Evaluation: exact match, Rouge F1, oracle win rate, distance spreads.

Generations for a dataset run through a chunked batched decoder; every
prompt draws from its own stream, so results do not depend on chunking or
worker count.  The task oracles are closed-form, which turns win-rate
judging into exact scoring rather than preference modeling.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .corpus import BOS_ID, EOS_ID, Dataset, Vocab, oracle_for
from .model import ModelError, ModelParams, forward_batch
from .parallel import map_indexed
from .rng import stream
from .sampler import GenerationConfig, GenResult, next_token

GEN_CHUNK = 64


def normalize_text(text: str) -> str:
    return " ".join(text.split())


def decode_generation(tokens: Sequence[int], vocab: Vocab) -> str:
    """Decode generated tokens up to (excluding) the first EOS."""
    out = []
    for tok in tokens:
        if tok == EOS_ID:
            break
        out.append(tok)
    return vocab.decode(out)


def _generate_chunk(
    params: ModelParams,
    prefixes: list[list[int]],
    config: GenerationConfig,
    rngs: list[np.random.Generator | None],
) -> list[GenResult]:
    ctxs = [list(p) for p in prefixes]
    for ctx in ctxs:
        if len(ctx) + config.max_new_tokens > params.config.context_len:
            raise ModelError("prefix plus new-token budget exceeds context length")
    n = len(ctxs)
    tokens: list[list[int]] = [[] for _ in range(n)]
    status: list[str | None] = [None] * n
    alive = list(range(n))
    while alive:
        width = max(len(ctxs[i]) for i in alive)
        batch = torch.zeros((len(alive), width), dtype=torch.int64)
        for row, i in enumerate(alive):
            batch[row, : len(ctxs[i])] = torch.tensor(ctxs[i], dtype=torch.int64)
        with torch.no_grad():
            logits = forward_batch(params, batch)
        still_alive = []
        for row, i in enumerate(alive):
            tok = next_token(logits[row, len(ctxs[i]) - 1].numpy(), config, rngs[i])
            tokens[i].append(tok)
            ctxs[i].append(tok)
            if tok == config.stop_id:
                status[i] = "eos"
            elif len(tokens[i]) == config.max_new_tokens:
                status[i] = "max_len"
            else:
                still_alive.append(i)
        alive = still_alive
    return [GenResult(tuple(t), s) for t, s in zip(tokens, status)]


def generate_many(
    params: ModelParams,
    prefixes: list[list[int]],
    config: GenerationConfig,
    rngs: list[np.random.Generator | None],
    workers: int = 1,
) -> list[GenResult]:
    """Generate for many prompts; per-prompt streams keep output stable."""
    chunks = [
        (prefixes[i : i + GEN_CHUNK], rngs[i : i + GEN_CHUNK])
        for i in range(0, len(prefixes), GEN_CHUNK)
    ]
    results = map_indexed(
        lambda _, chunk: _generate_chunk(params, chunk[0], config, chunk[1]),
        chunks,
        workers,
    )
    return [r for group in results for r in group]


@dataclass(frozen=True)
class ExactMatchResult:
    mean: float
    per_repeat: tuple[float, ...]


def exact_match_rate(
    params: ModelParams,
    dataset: Dataset,
    gen_config: GenerationConfig,
    n_repeats: int = 1,
    seed: int = 0,
    vocab: Vocab | None = None,
    workers: int = 1,
) -> ExactMatchResult:
    """Fraction of prompts whose decoded generation equals the oracle answer.

    Repeated ``n_repeats`` times with independent streams; the mean and the
    per-repeat values are both reported.
    """
    vocab = vocab or Vocab.default()
    oracle = oracle_for(dataset.task_name)
    expected = [normalize_text(oracle(ex.prompt_text)) for ex in dataset.examples]
    prefixes = [[BOS_ID] + list(ex.prompt_ids) for ex in dataset.examples]
    per_repeat = []
    for repeat in range(n_repeats):
        rngs = [stream(seed, "eval", repeat, ex.id) for ex in dataset.examples]
        results = generate_many(params, prefixes, gen_config, rngs, workers)
        hits = sum(
            normalize_text(decode_generation(res.tokens, vocab)) == want
            for res, want in zip(results, expected)
        )
        per_repeat.append(hits / len(dataset.examples))
    return ExactMatchResult(float(np.mean(per_repeat)), tuple(per_repeat))


# ---------------------------------------------------------------------------
# Rouge F1 over whitespace tokens.
# ---------------------------------------------------------------------------


def _ngram_counts(tokens: list[str], order: int) -> dict[tuple[str, ...], int]:
    counts: dict[tuple[str, ...], int] = {}
    for i in range(len(tokens) - order + 1):
        gram = tuple(tokens[i : i + order])
        counts[gram] = counts.get(gram, 0) + 1
    return counts


def _lcs_len(a: list[str], b: list[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[-1]))
        prev = cur
    return prev[-1]


def rouge_f1(candidate: str, reference: str, order) -> float:
    """Rouge F1 for n-gram order 1 or 2, or "L" for longest common subsequence."""
    cand = candidate.split()
    ref = reference.split()
    if not cand or not ref:
        return 0.0
    if order == "L" or order == "l":
        overlap = _lcs_len(cand, ref)
        total_c, total_r = len(cand), len(ref)
    elif order in (1, 2):
        c_counts = _ngram_counts(cand, order)
        r_counts = _ngram_counts(ref, order)
        overlap = sum(min(count, r_counts.get(gram, 0)) for gram, count in c_counts.items())
        total_c = max(len(cand) - order + 1, 0)
        total_r = max(len(ref) - order + 1, 0)
        if total_c == 0 or total_r == 0:
            return 0.0
    else:
        raise ValueError(f"order must be 1, 2, or 'L', got {order!r}")
    if overlap == 0:
        return 0.0
    precision = overlap / total_c
    recall = overlap / total_r
    return 2 * precision * recall / (precision + recall)


# ---------------------------------------------------------------------------
# Win rate against the stored reference under the task oracle.
# ---------------------------------------------------------------------------


def judge_for(task_name: str) -> Callable[[str, str], float]:
    """Scoring function (prompt_text, candidate_text) -> quality in [0, 1]."""
    oracle = oracle_for(task_name)
    if task_name.startswith("add"):
        return lambda prompt, text: float(normalize_text(text) == normalize_text(oracle(prompt)))
    return lambda prompt, text: rouge_f1(text, oracle(prompt), "L")


def win_rate_vs_reference(
    params: ModelParams,
    dataset: Dataset,
    gen_config: GenerationConfig,
    judge: Callable[[str, str], float] | None = None,
    seed: int = 0,
    vocab: Vocab | None = None,
    workers: int = 1,
) -> float:
    """Fraction of prompts where the generation beats the stored reference.

    Both sides are scored by the judge; a strict win counts 1, a tie 0.5.
    """
    vocab = vocab or Vocab.default()
    judge = judge or judge_for(dataset.task_name)
    prefixes = [[BOS_ID] + list(ex.prompt_ids) for ex in dataset.examples]
    rngs = [stream(seed, "win", ex.id) for ex in dataset.examples]
    results = generate_many(params, prefixes, gen_config, rngs, workers)
    score = 0.0
    for ex, res in zip(dataset.examples, results):
        gen_score = judge(ex.prompt_text, decode_generation(res.tokens, vocab))
        ref_score = judge(ex.prompt_text, ex.continuation_text)
        if gen_score > ref_score:
            score += 1.0
        elif gen_score == ref_score:
            score += 0.5
    return score / len(dataset.examples)


# ---------------------------------------------------------------------------
# Distance between generated and reference responses in the model's own
# mean-pooled final hidden space.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DistanceDistribution:
    prompt_id: str
    distances: tuple[float, ...]
    summary: dict[str, float]


def _embed_responses(params: ModelParams, prompt_ids, responses: list[Sequence[int]]) -> list[np.ndarray]:
    """Mean-pooled final hidden state over each response's token positions."""
    start = 1 + len(prompt_ids)
    out: list[np.ndarray] = []
    for lo in range(0, len(responses), GEN_CHUNK):
        group = responses[lo : lo + GEN_CHUNK]
        width = max(start + len(z) for z in group)
        batch = torch.zeros((len(group), width), dtype=torch.int64)
        for row, z in enumerate(group):
            seq = [BOS_ID] + list(prompt_ids) + list(z)
            batch[row, : len(seq)] = torch.tensor(seq, dtype=torch.int64)
        with torch.no_grad():
            _, hidden = forward_batch(params, batch, return_hidden=True)
        for row, z in enumerate(group):
            out.append(hidden[row, start : start + len(z)].numpy().mean(axis=0).astype(np.float64))
    return out


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    """1 - cosine similarity; defined as 1 when either vector is zero."""
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 1.0
    return float(1.0 - np.dot(a, b) / (na * nb))


def embedding_distance_distribution(
    params: ModelParams,
    prompt_ids,
    reference_ids,
    n_samples: int,
    gen_config: GenerationConfig,
    seed: int = 0,
    prompt_id: str = "",
    workers: int = 1,
) -> DistanceDistribution:
    """Distances from sampled responses to the reference response.

    Each sample is generated at the configured temperature; embeddings for
    both sides come from the same parameters.  Quartiles use linear
    interpolation.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    prompt_ids = list(prompt_ids)
    prefix = [BOS_ID] + prompt_ids
    rngs = [stream(seed, "dist", prompt_id, s) for s in range(n_samples)]
    results = generate_many(params, [prefix] * n_samples, gen_config, rngs, workers)
    ref_emb = _embed_responses(params, prompt_ids, [list(reference_ids)])[0]
    sample_embs = _embed_responses(params, prompt_ids, [res.tokens for res in results])
    distances = tuple(cosine_distance(emb, ref_emb) for emb in sample_embs)
    qs = np.quantile(distances, [0.0, 0.25, 0.5, 0.75, 1.0], method="linear")
    summary = {
        "min": float(qs[0]),
        "q1": float(qs[1]),
        "median": float(qs[2]),
        "q3": float(qs[3]),
        "max": float(qs[4]),
    }
    return DistanceDistribution(prompt_id, distances, summary)


def write_distance_records(path: str | Path, dists: list[DistanceDistribution]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in dists:
            fh.write(json.dumps(asdict(d), separators=(",", ":")))
            fh.write("\n")


def write_quartile_table(path: str | Path, dists: list[DistanceDistribution]) -> None:
    """Comma-separated quartile summary, one row per prompt."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["prompt_id", "min", "q1", "median", "q3", "max"])
        for d in dists:
            s = d.summary
            writer.writerow([d.prompt_id, s["min"], s["q1"], s["median"], s["q3"], s["max"]])


# ---------------------------------------------------------------------------
# Whole-checkpoint report.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalReport:
    label: str
    task_name: str
    n_samples: int
    gen_mode: str
    temperature: float
    n_repeats: int
    exact_match: float
    exact_match_per_repeat: tuple[float, ...]
    rouge1: float
    rouge2: float
    rougeL: float
    win_rate: float

    def __post_init__(self):
        for name in ("exact_match", "rouge1", "rouge2", "rougeL", "win_rate"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {value}")


def evaluate_checkpoint(
    params: ModelParams,
    dataset: Dataset,
    gen_config: GenerationConfig,
    n_repeats: int = 1,
    seed: int = 0,
    vocab: Vocab | None = None,
    workers: int = 1,
    label: str = "",
) -> EvalReport:
    """Exact match (averaged over repeats), Rouge F1 means, and win rate."""
    vocab = vocab or Vocab.default()
    em = exact_match_rate(params, dataset, gen_config, n_repeats, seed, vocab, workers)
    prefixes = [[BOS_ID] + list(ex.prompt_ids) for ex in dataset.examples]
    rngs = [stream(seed, "rouge", ex.id) for ex in dataset.examples]
    results = generate_many(params, prefixes, gen_config, rngs, workers)
    texts = [decode_generation(res.tokens, vocab) for res in results]
    refs = [ex.continuation_text for ex in dataset.examples]
    rouge = {
        order: float(np.mean([rouge_f1(t, r, order) for t, r in zip(texts, refs)]))
        for order in (1, 2, "L")
    }
    win = win_rate_vs_reference(params, dataset, gen_config, None, seed, vocab, workers)
    return EvalReport(
        label=label,
        task_name=dataset.task_name,
        n_samples=len(dataset.examples),
        gen_mode=gen_config.mode,
        temperature=gen_config.temperature,
        n_repeats=n_repeats,
        exact_match=em.mean,
        exact_match_per_repeat=em.per_repeat,
        rouge1=rouge[1],
        rouge2=rouge[2],
        rougeL=rouge["L"],
        win_rate=win,
    )


def write_eval_reports(path: str | Path, reports: list[EvalReport]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for report in reports:
            rec = asdict(report)
            rec["exact_match_per_repeat"] = list(rec["exact_match_per_repeat"])
            fh.write(json.dumps(rec, separators=(",", ":")))
            fh.write("\n")
