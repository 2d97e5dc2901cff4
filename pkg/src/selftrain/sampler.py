"""Conditional autoregressive generation.

Tokens are appended one at a time, each conditioned on the prompt plus all
previously generated tokens, until EOS or the new-token budget.  Greedy
decoding breaks exact ties toward the lowest token id; temperature sampling
draws through the caller's generator via inverse-CDF, so byte-exact
reproducibility reduces to stream identity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import EOS_ID
from .model import ModelError, ModelParams, forward


@dataclass(frozen=True)
class GenerationConfig:
    max_new_tokens: int = 16
    temperature: float = 1.0
    mode: str = "sample"
    stop_id: int = EOS_ID

    def __post_init__(self):
        if self.mode not in ("greedy", "sample"):
            raise ValueError(f"mode must be 'greedy' or 'sample', got {self.mode!r}")
        if self.mode == "sample" and not self.temperature > 0:
            raise ValueError("temperature must be > 0 in sample mode")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")


@dataclass(frozen=True)
class GenResult:
    tokens: tuple[int, ...]
    stopped_by: str  # "eos" | "max_len"


def softmax_probs(logits_row: np.ndarray, temperature: float) -> np.ndarray:
    """Stable softmax of logits/temperature in float64."""
    scaled = np.asarray(logits_row, dtype=np.float64) / temperature
    scaled -= scaled.max()
    exp = np.exp(scaled)
    return exp / exp.sum()


def next_token(logits_row: np.ndarray, config: GenerationConfig, rng: np.random.Generator | None = None) -> int:
    """Pick one token id from a logits row."""
    row = np.asarray(logits_row, dtype=np.float64)
    if row.ndim != 1:
        raise ValueError("logits row must be 1-D")
    if not np.isfinite(row).all():
        raise ValueError("non-finite logits")
    if config.mode == "greedy":
        return int(np.argmax(row))
    if rng is None:
        raise ValueError("sample mode needs an rng")
    cdf = np.cumsum(softmax_probs(row, config.temperature))
    idx = int(np.searchsorted(cdf, rng.random(), side="right"))
    return min(idx, row.size - 1)


def generate(
    params: ModelParams,
    prefix,
    config: GenerationConfig,
    rng: np.random.Generator | None = None,
) -> GenResult:
    """Generate up to ``max_new_tokens`` tokens conditioned on ``prefix``."""
    prefix = list(prefix)
    if len(prefix) + config.max_new_tokens > params.config.context_len:
        raise ModelError(
            f"prefix ({len(prefix)}) plus new-token budget ({config.max_new_tokens}) "
            f"exceeds context length {params.config.context_len}"
        )
    ctx = list(prefix)
    tokens: list[int] = []
    while True:
        logits = forward(params, ctx)
        tok = next_token(logits[-1], config, rng)
        tokens.append(tok)
        ctx.append(tok)
        if tok == config.stop_id:
            return GenResult(tuple(tokens), "eos")
        if len(tokens) == config.max_new_tokens:
            return GenResult(tuple(tokens), "max_len")


def teacher_forced_argmax(params: ModelParams, prefix, given) -> tuple[int, ...]:
    """Greedy next-token choice at every position of ``given``.

    Output j is the argmax of the model's distribution conditioned on
    ``prefix`` plus ``given[:j]``; one forward pass over the concatenation
    yields all positions at once.
    """
    prefix, given = list(prefix), list(given)
    if not prefix:
        raise ModelError("prefix must be nonempty")
    if not given:
        raise ModelError("given must be nonempty")
    if len(prefix) + len(given) > params.config.context_len:
        raise ModelError("prefix plus given exceeds context length")
    logits = forward(params, prefix + given)
    rows = logits[len(prefix) - 1 : len(prefix) + len(given) - 1]
    return tuple(int(np.argmax(row)) for row in rows)
