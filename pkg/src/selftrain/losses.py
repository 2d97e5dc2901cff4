"""Maximum-likelihood objectives over the three batch kinds.

All three losses are masked mean next-token NLLs that differ only in what
fills the context and what serves as the target:

* ``sft_loss``  -- context ground truth, target ground truth;
* ``bash_loss`` -- context mixed continuation, target ground truth;
* ``rac_loss``  -- context the model's own response under the plain prompt,
  target the greedy correction labels, restricted to positions where the
  label disagrees with the response.

Normalization is per contributing token, making gradient magnitudes
comparable between components with different unmasked counts.  The
combined step loss is the plain sum of the two components.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .corpus import BOS_ID, Example, PAD_ID
from .mixing import MixedExample
from .correction import RacExample
from .model import ModelParams, loss_and_grads

Grads = dict[str, torch.Tensor]


@dataclass(frozen=True)
class BatchLoss:
    value: float
    token_count: int
    components: dict[str, float] = field(default_factory=dict)


def _pack(rows: list[tuple[list[int], list[int], list[int]]]):
    """Right-pad (input, target, mask) rows into aligned arrays."""
    if not rows:
        raise ValueError("batch must be nonempty")
    width = max(len(inp) for inp, _, _ in rows)
    inputs, targets, masks = [], [], []
    for inp, tgt, mask in rows:
        pad = width - len(inp)
        inputs.append(inp + [PAD_ID] * pad)
        targets.append(tgt + [PAD_ID] * pad)
        masks.append(mask + [0] * pad)
    return inputs, targets, masks


def sft_rows(examples: list[Example]) -> list[tuple[list[int], list[int], list[int]]]:
    rows = []
    for ex in examples:
        x, y = list(ex.prompt_ids), list(ex.continuation_ids)
        inp = [BOS_ID] + x + y[:-1]
        tgt = x + y
        mask = [0] * len(x) + [1] * len(y)
        rows.append((inp, tgt, mask))
    return rows


def sft_loss(params: ModelParams, examples: list[Example]) -> tuple[BatchLoss, Grads]:
    """Mean NLL of ground-truth continuation tokens given ground-truth prefixes."""
    value, grads, count = loss_and_grads(params, *_pack(sft_rows(examples)))
    return BatchLoss(value, count, {"sft": value}), grads


def bash_rows(batch: list[MixedExample]) -> list[tuple[list[int], list[int], list[int]]]:
    rows = []
    for m in batch:
        x = list(m.example.prompt_ids)
        y = list(m.example.continuation_ids)
        mixed = list(m.mixed_ids)
        inp = [BOS_ID] + x + mixed[:-1]
        tgt = x + y
        mask = [0] * len(x) + [1] * len(y)
        rows.append((inp, tgt, mask))
    return rows


def bash_loss(params: ModelParams, batch: list[MixedExample]) -> tuple[BatchLoss, Grads]:
    """Like ``sft_loss`` but the context prefix is the mixed continuation.

    Targets stay the ground-truth tokens; the mixed tokens enter as
    constants, so no gradient reaches their construction.
    """
    value, grads, count = loss_and_grads(params, *_pack(bash_rows(batch)))
    return BatchLoss(value, count, {"bash": value}), grads


def rac_rows(batch: list[RacExample]) -> list[tuple[list[int], list[int], list[int]]]:
    rows = []
    for r in batch:
        x = list(r.example.prompt_ids)
        z = list(r.response_ids)
        inp = [BOS_ID] + x + z[:-1]
        tgt = x + list(r.label_ids)
        mask = [0] * len(x) + list(r.mask)
        rows.append((inp, tgt, mask))
    return rows


def rac_loss(params: ModelParams, batch: list[RacExample]) -> tuple[BatchLoss, Grads]:
    """Mean NLL of correction labels on disagreeing positions only.

    The context is the plain prompt plus the model's own response tokens;
    the reference-augmented prompt is used only while the labels are built.
    A batch whose labels all agree with the responses yields zero loss and
    exactly zero gradients.
    """
    value, grads, count = loss_and_grads(params, *_pack(rac_rows(batch)))
    return BatchLoss(value, count, {"rac": value}), grads


def combined_step_loss(
    params: ModelParams,
    sft_examples: list[Example],
    aux_batch: list[MixedExample] | list[RacExample],
    mode: str,
    include_sft: bool = True,
) -> tuple[BatchLoss, Grads]:
    """Sum of the SFT loss and one auxiliary loss, equal weights.

    ``include_sft=False`` drops the SFT component entirely (ablation path);
    the default always combines both.
    """
    if mode == "bash":
        aux_loss, aux_grads = bash_loss(params, aux_batch)
    elif mode == "rac":
        aux_loss, aux_grads = rac_loss(params, aux_batch)
    else:
        raise ValueError(f"mode must be 'bash' or 'rac', got {mode!r}")
    if not include_sft:
        return aux_loss, aux_grads
    main_loss, main_grads = sft_loss(params, sft_examples)
    grads = {k: main_grads[k] + aux_grads[k] for k in main_grads}
    components = {**main_loss.components, **aux_loss.components}
    return (
        BatchLoss(main_loss.value + aux_loss.value, main_loss.token_count + aux_loss.token_count, components),
        grads,
    )
