"""Synthetic tasks, character-level vocabulary, and dataset files.

Three exactly-checkable tasks stand in for real demonstration corpora:

* ``copy``     -- echo a random letter string (optionally reversed),
* ``addition`` -- decimal sum of two uniformly drawn integers,
* ``extract``  -- every ``stride``-th symbol of the prompt body.

Every task has a closed-form oracle, so downstream evaluation is exact.
Generation is a pure function of (task parameters, seed): each example is
drawn from its own derived stream, making output bytes independent of
worker count or platform.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

from .rng import stream

# Special token ids are fixed by the vocab layout: specials come first, in
# this order, before any task symbol.
BOS_ID = 0
EOS_ID = 1
PAD_ID = 2
SEP_ID = 3
REF_BEGIN_ID = 4
REF_END_ID = 5

SPECIAL_MARKERS = ("<bos>", "<eos>", "<pad>", "<sep>", "<ref>", "</ref>")

LETTERS = "abcdefghijklmnopqrstuvwxyz"
DIGITS = "0123456789"

# Body lengths for the extract task; engineering defaults, not task claims.
EXTRACT_MIN_BODY = 2
EXTRACT_MAX_BODY = 24

DEFAULT_CONTEXT_LEN = 160


class CorpusError(ValueError):
    """Invalid vocabulary, example, or dataset file content."""


@dataclass(frozen=True)
class Vocab:
    """Character-level vocabulary: six specials followed by task symbols."""

    symbols: tuple[str, ...]
    _char_to_id: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if tuple(self.symbols[: len(SPECIAL_MARKERS)]) != SPECIAL_MARKERS:
            raise CorpusError(
                f"vocab must start with the special markers {SPECIAL_MARKERS}"
            )
        tail = self.symbols[len(SPECIAL_MARKERS) :]
        if any(len(s) != 1 for s in tail):
            raise CorpusError("non-special vocab entries must be single characters")
        if len(set(self.symbols)) != len(self.symbols):
            raise CorpusError("vocab entries must be unique")
        object.__setattr__(
            self,
            "_char_to_id",
            {ch: i + len(SPECIAL_MARKERS) for i, ch in enumerate(tail)},
        )

    @classmethod
    def default(cls) -> "Vocab":
        """Shared vocab covering all three tasks: letters, digits, '+', '='."""
        return cls(SPECIAL_MARKERS + tuple(LETTERS) + tuple(DIGITS) + ("+", "="))

    @property
    def size(self) -> int:
        return len(self.symbols)

    def encode(self, text: str) -> list[int]:
        """Encode plain text (no special markers) to token ids."""
        ids = []
        for pos, ch in enumerate(text):
            tok = self._char_to_id.get(ch)
            if tok is None:
                raise CorpusError(f"unknown character {ch!r} at position {pos}")
            ids.append(tok)
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        """Decode ids to text; special tokens render as their markers."""
        out = []
        for pos, tok in enumerate(ids):
            if not 0 <= tok < self.size:
                raise CorpusError(f"token id {tok} out of range at position {pos}")
            out.append(self.symbols[tok])
        return "".join(out)


def write_vocab(path: str | Path, vocab: Vocab) -> None:
    Path(path).write_text("\n".join(vocab.symbols) + "\n", encoding="utf-8")


def read_vocab(path: str | Path) -> Vocab:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return Vocab(tuple(lines))


@dataclass(frozen=True)
class Example:
    """One (prompt, continuation) pair, kept both as text and token ids.

    ``prompt_text``/``continuation_text`` are the plain symbol strings;
    structural tokens (the prompt's trailing separator, the continuation's
    trailing end-of-sequence) appear only in the id arrays.
    """

    id: str
    prompt_text: str
    continuation_text: str
    prompt_ids: tuple[int, ...]
    continuation_ids: tuple[int, ...]

    def __post_init__(self):
        if len(self.prompt_ids) < 1:
            raise CorpusError(f"example {self.id}: empty prompt")
        if len(self.continuation_ids) < 1:
            raise CorpusError(f"example {self.id}: empty continuation")
        if PAD_ID in self.prompt_ids or PAD_ID in self.continuation_ids:
            raise CorpusError(f"example {self.id}: PAD inside sequence")
        if self.continuation_ids[-1] != EOS_ID:
            raise CorpusError(f"example {self.id}: continuation must end with EOS")
        if EOS_ID in self.prompt_ids or EOS_ID in self.continuation_ids[:-1]:
            raise CorpusError(f"example {self.id}: stray EOS token")


@dataclass
class Dataset:
    examples: list[Example]
    task_name: str
    seed: int

    def __post_init__(self):
        ids = [ex.id for ex in self.examples]
        if len(set(ids)) != len(ids):
            raise CorpusError("duplicate example ids in dataset")


def _check_context_budget(max_prompt: int, max_cont: int, context_len: int) -> None:
    # +1 reserves the leading BOS the model prepends to every sequence.
    need = 1 + max_prompt + max_cont
    if need > context_len:
        raise CorpusError(
            f"task needs up to {need} tokens but context length is {context_len}"
        )


def gen_copy_task(
    n: int,
    min_len: int = 3,
    max_len: int = 8,
    reverse: bool = False,
    seed: int = 0,
    vocab: Vocab | None = None,
    context_len: int = DEFAULT_CONTEXT_LEN,
) -> Dataset:
    """Echo task: prompt = random letter string + SEP, continuation echoes it."""
    if not 1 <= min_len <= max_len:
        raise CorpusError(f"need 1 <= min_len <= max_len, got [{min_len}, {max_len}]")
    if n < 1:
        raise CorpusError("n must be >= 1")
    vocab = vocab or Vocab.default()
    _check_context_budget(max_len + 1, max_len + 1, context_len)
    task_name = "copy-rev" if reverse else "copy"
    examples = []
    for i in range(n):
        rng = stream(task_name, seed, i)
        length = int(rng.integers(min_len, max_len + 1))
        s = "".join(LETTERS[j] for j in rng.integers(0, len(LETTERS), size=length))
        answer = s[::-1] if reverse else s
        examples.append(
            Example(
                id=f"{task_name}-{i:05d}",
                prompt_text=s,
                continuation_text=answer,
                prompt_ids=tuple(vocab.encode(s)) + (SEP_ID,),
                continuation_ids=tuple(vocab.encode(answer)) + (EOS_ID,),
            )
        )
    return Dataset(examples, task_name, seed)


def gen_addition_task(
    n: int,
    max_digits: int = 4,
    seed: int = 0,
    vocab: Vocab | None = None,
    context_len: int = DEFAULT_CONTEXT_LEN,
) -> Dataset:
    """Addition task: prompt "a+b=", continuation is the decimal sum."""
    if not 1 <= max_digits <= 6:
        raise CorpusError(f"max_digits must be in [1, 6], got {max_digits}")
    if n < 1:
        raise CorpusError("n must be >= 1")
    vocab = vocab or Vocab.default()
    _check_context_budget(2 * max_digits + 2, max_digits + 2, context_len)
    task_name = f"add{max_digits}"
    hi = 10**max_digits
    examples = []
    for i in range(n):
        rng = stream(task_name, seed, i)
        a = int(rng.integers(0, hi))
        b = int(rng.integers(0, hi))
        prompt = f"{a}+{b}="
        answer = str(a + b)
        examples.append(
            Example(
                id=f"{task_name}-{i:05d}",
                prompt_text=prompt,
                continuation_text=answer,
                prompt_ids=tuple(vocab.encode(prompt)),
                continuation_ids=tuple(vocab.encode(answer)) + (EOS_ID,),
            )
        )
    return Dataset(examples, task_name, seed)


def gen_extract_task(
    n: int,
    stride: int = 2,
    seed: int = 0,
    vocab: Vocab | None = None,
    context_len: int = DEFAULT_CONTEXT_LEN,
) -> Dataset:
    """Extraction task: continuation is every ``stride``-th body symbol.

    Bodies shorter than the stride still emit their first symbol, keeping
    the continuation nonempty.
    """
    if stride < 2:
        raise CorpusError(f"stride must be >= 2, got {stride}")
    if n < 1:
        raise CorpusError("n must be >= 1")
    vocab = vocab or Vocab.default()
    _check_context_budget(EXTRACT_MAX_BODY + 1, EXTRACT_MAX_BODY + 1, context_len)
    task_name = f"extract{stride}"
    examples = []
    for i in range(n):
        rng = stream(task_name, seed, i)
        length = int(rng.integers(EXTRACT_MIN_BODY, EXTRACT_MAX_BODY + 1))
        body = "".join(LETTERS[j] for j in rng.integers(0, len(LETTERS), size=length))
        answer = body[::stride]
        examples.append(
            Example(
                id=f"{task_name}-{i:05d}",
                prompt_text=body,
                continuation_text=answer,
                prompt_ids=tuple(vocab.encode(body)) + (SEP_ID,),
                continuation_ids=tuple(vocab.encode(answer)) + (EOS_ID,),
            )
        )
    return Dataset(examples, task_name, seed)


def oracle_for(task_name: str) -> Callable[[str], str]:
    """Return the exact answer function for a task, keyed by its name."""
    if task_name == "copy":
        return lambda prompt: prompt
    if task_name == "copy-rev":
        return lambda prompt: prompt[::-1]
    if task_name.startswith("add"):

        def add_oracle(prompt: str) -> str:
            left, _, rest = prompt.partition("+")
            right = rest.rstrip("=")
            return str(int(left) + int(right))

        return add_oracle
    if task_name.startswith("extract"):
        stride = int(task_name[len("extract") :])
        return lambda prompt: prompt[::stride]
    raise CorpusError(f"no oracle for task {task_name!r}")


# ---------------------------------------------------------------------------
# Dataset files: UTF-8 JSON lines, one record per example.  Each record
# repeats the dataset-level provenance (task_name, seed) so that a file is
# self-describing without a separate header; readers ignore unknown keys,
# which lets the mixed/correction dataset files double as plain datasets.
# ---------------------------------------------------------------------------


def example_record(ex: Example, task_name: str, seed: int) -> dict:
    return {
        "id": ex.id,
        "prompt_text": ex.prompt_text,
        "continuation_text": ex.continuation_text,
        "prompt_ids": list(ex.prompt_ids),
        "continuation_ids": list(ex.continuation_ids),
        "task_name": task_name,
        "seed": seed,
    }


def dump_record(record: dict) -> str:
    return json.dumps(record, separators=(",", ":"), ensure_ascii=False)


def write_dataset(path: str | Path, dataset: Dataset) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in dataset.examples:
            fh.write(dump_record(example_record(ex, dataset.task_name, dataset.seed)))
            fh.write("\n")


def parse_dataset_lines(lines: Iterable[str]) -> tuple[list[dict], str, int]:
    """Parse record lines, returning (records, task_name, seed).

    Raises :class:`CorpusError` carrying the 1-based line number of the
    first malformed record.
    """
    records = []
    task_name, seed = "", 0
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            for key in ("id", "prompt_text", "continuation_text"):
                if not isinstance(rec[key], str):
                    raise TypeError(key)
            for key in ("prompt_ids", "continuation_ids"):
                if not all(isinstance(t, int) for t in rec[key]):
                    raise TypeError(key)
        except (json.JSONDecodeError, KeyError, TypeError) as err:
            raise CorpusError(f"malformed record at line {lineno}: {err}") from err
        rec_task = rec.get("task_name", "")
        rec_seed = int(rec.get("seed", 0))
        if not records:
            task_name, seed = rec_task, rec_seed
        elif (rec_task, rec_seed) != (task_name, seed):
            raise CorpusError(
                f"malformed record at line {lineno}: inconsistent provenance"
            )
        rec["_lineno"] = lineno
        records.append(rec)
    return records, task_name, seed


def example_from_record(rec: dict) -> Example:
    try:
        return Example(
            id=rec["id"],
            prompt_text=rec["prompt_text"],
            continuation_text=rec["continuation_text"],
            prompt_ids=tuple(rec["prompt_ids"]),
            continuation_ids=tuple(rec["continuation_ids"]),
        )
    except CorpusError as err:
        lineno = rec.get("_lineno", "?")
        raise CorpusError(f"malformed record at line {lineno}: {err}") from err


def read_dataset(path: str | Path) -> Dataset:
    """Read a dataset file; files with extra per-record fields also parse.

    A zero-line file yields an empty dataset with blank provenance.
    """
    with open(path, "r", encoding="utf-8") as fh:
        records, task_name, seed = parse_dataset_lines(fh)
    return Dataset([example_from_record(r) for r in records], task_name, seed)
