"""Correction-label dataset: model responses paired with greedy relabels.

For each training example the frozen model first answers the plain prompt
by sampling.  The same response tokens are then relabeled greedily under a
reference-augmented prompt, giving the model the answer while it labels
its own response prefix.  Positions where the relabel agrees with the
response carry no signal and are masked out; training on them would only
teach the model to imitate itself.

A from-scratch task model can only parse contexts shaped like its training
prompts, so the reference-augmented prompt re-poses the ground-truth
continuation through the task's own prompt format (an echo prompt whose
answer is the reference, a sum split that reproduces it, and so on).  Any
other framing, delimiter tokens included, reads as noise to the model and
yields useless labels.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .corpus import (
    BOS_ID,
    EOS_ID,
    SEP_ID,
    CorpusError,
    Dataset,
    Example,
    Vocab,
    dump_record,
    example_from_record,
    example_record,
    parse_dataset_lines,
)
from .model import ModelError, ModelParams
from .parallel import check_skip_budget, map_indexed
from .rng import stream
from .sampler import GenerationConfig, generate, teacher_forced_argmax

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RacTemplate:
    """Reference-augmented prompt builder.

    Re-poses the reference continuation as a fresh prompt in the task's
    own format, so the (task-only) model elicits the reference when it
    labels a response.  The reference's trailing EOS never enters the
    prompt, so generation conditioned on it cannot terminate early.
    """

    task_name: str
    vocab: Vocab = field(default_factory=Vocab.default)

    def restatement(self, x_ids, y_ids) -> list[int]:
        """Prompt tokens (after BOS) whose correct answer is the reference.

        The addition restatement splits the reference digit-wise into two
        carry-free operands, the easiest problem family with that answer;
        references too large for in-range operands fall back to re-asking
        the original prompt (self-consistent labels, no reference signal).
        """
        y = list(y_ids)
        if y and y[-1] == EOS_ID:
            y = y[:-1]
        if EOS_ID in y:
            raise CorpusError("reference continuation has EOS before its end")
        text = self.vocab.decode(y)
        if self.task_name == "copy":
            return self.vocab.encode(text) + [SEP_ID]
        if self.task_name == "copy-rev":
            return self.vocab.encode(text[::-1]) + [SEP_ID]
        if self.task_name.startswith("add"):
            max_operand = 10 ** int(self.task_name[len("add") :]) - 1
            total = int(text)
            if total > 2 * max_operand:
                raise CorpusError(f"reference {total} exceeds the task's answer range")
            if total > max_operand:
                return list(x_ids)
            digits = [int(ch) for ch in text]
            left = int("".join(str((d + 1) // 2) for d in digits))
            right = int("".join(str(d // 2) for d in digits))
            return self.vocab.encode(f"{left}+{right}=")
        if self.task_name.startswith("extract"):
            stride = int(self.task_name[len("extract") :])
            return self.vocab.encode("".join(ch * stride for ch in text)) + [SEP_ID]
        raise CorpusError(f"no reference template for task {self.task_name!r}")


@dataclass(frozen=True)
class RacExample:
    example: Example
    response_ids: tuple[int, ...]
    label_ids: tuple[int, ...]
    mask: tuple[int, ...]  # 1 where label differs from response

    def __post_init__(self):
        if not (len(self.response_ids) == len(self.label_ids) == len(self.mask)):
            raise CorpusError(f"rac example {self.example.id}: length mismatch")
        for j, (m, lab, resp) in enumerate(zip(self.mask, self.label_ids, self.response_ids)):
            if m != int(lab != resp):
                raise CorpusError(f"rac example {self.example.id}: mask wrong at {j}")


class RacOverflow(RuntimeError):
    """Prompt template plus response does not fit the model context."""


def build_rac_prompt(x, y, template: RacTemplate) -> list[int]:
    """Assemble the reference-augmented prompt token sequence.

    The restated prompt is built from the reference; the original prompt
    only enters through the addition fallback, since prepending it to the
    restatement measurably corrupts the model's parse (module docstring).
    """
    return [BOS_ID] + template.restatement(x, y)


def gen_rac_labels(
    params: ModelParams,
    x,
    y,
    z,
    template: RacTemplate,
) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Greedy labels for a response ``z``, plus the disagreement mask.

    Label j is the greedy choice given the reference-augmented prompt and
    the response tokens before j; mask j is 1 exactly where the label
    differs from the response token.
    """
    z = list(z)
    if not z:
        raise CorpusError("response must be nonempty")
    prompt = build_rac_prompt(x, y, template)
    if len(prompt) + len(z) > params.config.context_len:
        raise RacOverflow(
            f"template ({len(prompt)}) plus response ({len(z)}) exceeds context"
        )
    labels = teacher_forced_argmax(params, prompt, z)
    mask = tuple(int(lab != tok) for lab, tok in zip(labels, z))
    return labels, mask


def build_dr(
    params: ModelParams,
    dataset: Dataset,
    gen_config: GenerationConfig,
    template: RacTemplate | None = None,
    seed: int = 0,
    workers: int = 1,
) -> list[RacExample]:
    """Build the offline correction dataset from frozen parameters.

    Per example: sample a response from (BOS, prompt), then relabel it
    greedily under the reference-augmented prompt.  Examples whose template
    or response cannot fit the context are skipped and reported; more than
    1% skipped fails the build.  Responses fully reproduced by the greedy
    relabel are kept with an all-zero mask.
    """
    if template is None:
        template = RacTemplate(dataset.task_name)
    skipped: list[tuple[str, str]] = []

    def one(_, example: Example) -> RacExample | None:
        rng = stream(seed, "dr", example.id)
        try:
            result = generate(params, [BOS_ID] + list(example.prompt_ids), gen_config, rng)
            labels, mask = gen_rac_labels(
                params, example.prompt_ids, example.continuation_ids, result.tokens, template
            )
        except (RacOverflow, ModelError, CorpusError) as err:
            log.warning("skipping %s: %s", example.id, err)
            skipped.append((example.id, str(err)))
            return None
        return RacExample(example, result.tokens, labels, mask)

    results = map_indexed(one, dataset.examples, workers)
    check_skip_budget(len(dataset.examples), skipped, "build_dr")
    return [r for r in results if r is not None]


def write_rac_dataset(path: str | Path, examples: Iterable[RacExample], task_name: str, seed: int) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in examples:
            rec = example_record(r.example, task_name, seed)
            rec["response_ids"] = list(r.response_ids)
            rec["rac_label_ids"] = list(r.label_ids)
            rec["mask"] = list(r.mask)
            fh.write(dump_record(rec))
            fh.write("\n")


def read_rac_dataset(path: str | Path) -> tuple[list[RacExample], str, int]:
    with open(path, "r", encoding="utf-8") as fh:
        records, task_name, seed = parse_dataset_lines(fh)
    out = []
    for rec in records:
        try:
            out.append(
                RacExample(
                    example=example_from_record(rec),
                    response_ids=tuple(rec["response_ids"]),
                    label_ids=tuple(rec["rac_label_ids"]),
                    mask=tuple(rec["mask"]),
                )
            )
        except (KeyError, TypeError, CorpusError) as err:
            raise CorpusError(f"malformed record at line {rec['_lineno']}: {err}") from err
    return out, task_name, seed
