"""Synthetic key-value reading-comprehension data.

A passage is a run of ``(key, value)`` token pairs, the question is one of the
keys, and the answer is the position of the paired value (span task) or which of
``m`` candidate values is the right one (choice task). Keys come in confusion
classes of near-miss twins; a distractor is an appended pair whose key is the
question key's twin.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .perturb import ConfigError, Role

CLS, SEP, PAD = "[CLS]", "[SEP]", "[PAD]"
RESERVED = (CLS, SEP, PAD)
CLASS_SIZE = 2


class DataError(ValueError):
    pass


class Vocab:
    """Token string <-> id bijection. Ids 0, 1, 2 are CLS, SEP, PAD; keys follow,
    then values."""

    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[:3]) != RESERVED:
            raise DataError(f"vocab must start with {RESERVED}")
        if len(set(tokens)) != len(tokens):
            raise DataError("vocab tokens must be unique")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    @classmethod
    def standard(cls, vocab_size: int) -> "Vocab":
        if vocab_size < len(RESERVED) + 3:
            raise ConfigError(f"vocab_size {vocab_size} too small")
        n_keys = (vocab_size - len(RESERVED)) // 2
        n_values = vocab_size - len(RESERVED) - n_keys
        keys = [f"k{i // CLASS_SIZE:03d}{'abcdefgh'[i % CLASS_SIZE]}" for i in range(n_keys)]
        values = [f"v{i:03d}" for i in range(n_values)]
        return cls(list(RESERVED) + keys + values)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def cls_id(self) -> int:
        return 0

    @property
    def sep_id(self) -> int:
        return 1

    @property
    def pad_id(self) -> int:
        return 2

    @property
    def key_ids(self) -> list[int]:
        return [i for i, t in enumerate(self.tokens) if t.startswith("k")]

    @property
    def value_ids(self) -> list[int]:
        return [i for i, t in enumerate(self.tokens) if t.startswith("v")]

    def confusion_classes(self) -> list[list[int]]:
        groups: dict[str, list[int]] = {}
        for i in self.key_ids:
            groups.setdefault(self.tokens[i][:-1], []).append(i)
        return list(groups.values())

    def classmates(self, key_id: int) -> list[int]:
        stem = self.tokens[key_id][:-1]
        return [i for i in self.key_ids if i != key_id and self.tokens[i][:-1] == stem]

    def encode(self, tokens: Iterable[str]) -> list[int]:
        try:
            return [self.index[t] for t in tokens]
        except KeyError as exc:
            raise DataError(f"unknown token {exc.args[0]!r}") from None

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[int(i)] for i in ids]


@dataclass
class Example:
    passage: list[int]
    question: list[int]
    options: list[list[int]] | None = None
    span: tuple[int, int] | None = None
    choice: int | None = None
    seed: int | None = None
    distractor: bool = False

    def validate(self) -> None:
        if (self.span is None) == (self.choice is None):
            raise DataError("example needs exactly one of span / choice answer")
        if self.span is not None:
            s, e = self.span
            if not 0 <= s <= e < len(self.passage):
                raise DataError(f"span {self.span} outside passage of length {len(self.passage)}")
        else:
            if not self.options or len(self.options) < 2:
                raise DataError("choice example needs at least 2 options")
            if not 0 <= self.choice < len(self.options):
                raise DataError(f"choice {self.choice} outside {len(self.options)} options")


def _check_sizes(n_pairs: int, vocab_size: int) -> Vocab:
    if n_pairs < 1:
        raise ConfigError(f"n_pairs must be >= 1, got {n_pairs}")
    if vocab_size <= 2 * n_pairs + len(RESERVED):
        raise ConfigError(
            f"vocab_size {vocab_size} must exceed 2*n_pairs + {len(RESERVED)} = {2 * n_pairs + len(RESERVED)}")
    return Vocab.standard(vocab_size)


def _kv_passage(rng: np.random.Generator, vocab: Vocab, n_pairs: int):
    keys = rng.choice(vocab.key_ids, size=n_pairs, replace=False)
    values = rng.choice(vocab.value_ids, size=n_pairs, replace=False)
    passage = np.empty(2 * n_pairs, dtype=np.int64)
    passage[0::2] = keys
    passage[1::2] = values
    q = int(rng.integers(n_pairs))
    return [int(t) for t in passage], int(keys[q]), q, [int(v) for v in values]


def gen_kv_task(n_examples: int, n_pairs: int, vocab_size: int, seed: int) -> list[Example]:
    """Span examples; the answer is the single value token after the queried key."""
    vocab = _check_sizes(n_pairs, vocab_size)
    out = []
    for i in range(n_examples):
        rng = np.random.default_rng([seed, i])
        passage, key, q, _ = _kv_passage(rng, vocab, n_pairs)
        out.append(Example(passage=passage, question=[key], span=(2 * q + 1, 2 * q + 1), seed=seed))
    return out


def gen_choice_task(n_examples: int, n_pairs: int, m: int, vocab_size: int, seed: int) -> list[Example]:
    """Choice examples with ``m`` single-token options.

    Wrong options are the passage's other values first (so that presence in the
    passage is no shortcut), then values drawn from the rest of the vocabulary.
    """
    if m < 2:
        raise ConfigError(f"m must be >= 2, got {m}")
    vocab = _check_sizes(n_pairs, vocab_size)
    if len(vocab.value_ids) < m:
        raise ConfigError(f"vocab_size {vocab_size} has fewer than m={m} value tokens")
    out = []
    for i in range(n_examples):
        rng = np.random.default_rng([seed, i])
        passage, key, q, values = _kv_passage(rng, vocab, n_pairs)
        gold_value = values[q]
        others = [v for v in values if v != gold_value]
        rng.shuffle(others)
        wrong = others[: m - 1]
        if len(wrong) < m - 1:
            pool = [v for v in vocab.value_ids if v not in values]
            wrong += [int(v) for v in rng.choice(pool, size=m - 1 - len(wrong), replace=False)]
        gold = int(rng.integers(m))
        opts = list(wrong)
        opts.insert(gold, gold_value)
        out.append(Example(passage=passage, question=[key], options=[[int(v)] for v in opts],
                           choice=gold, seed=seed))
    return out


def inject_distractor(example: Example, vocab: Vocab, seed: int) -> Example:
    """Append a near-miss ``(key', value')`` pair after the passage.

    ``key'`` is a confusion-class twin of the question key; ``value'`` is never
    the gold value (for choice examples it is one of the wrong options). The
    gold answer indices are untouched.
    """
    rng = np.random.default_rng([seed, *example.passage, *example.question])
    qkey = example.question[0]
    mates = vocab.classmates(qkey)
    fresh = [k for k in mates if k not in example.passage]
    pool = fresh or mates or [k for k in vocab.key_ids if k != qkey]
    key2 = int(rng.choice(pool))
    if example.span is not None:
        gold_value = example.passage[example.span[0]]
        present = set(example.passage)
        candidates = [v for v in vocab.value_ids if v != gold_value and v not in present]
        candidates = candidates or [v for v in vocab.value_ids if v != gold_value]
    else:
        candidates = [o[0] for j, o in enumerate(example.options) if j != example.choice]
    value2 = int(rng.choice(candidates))
    return Example(passage=example.passage + [key2, value2], question=list(example.question),
                   options=None if example.options is None else [list(o) for o in example.options],
                   span=example.span, choice=example.choice, seed=example.seed, distractor=True)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    ids: np.ndarray            # (N, T) token ids; N = B for span, B*m for choice
    roles: np.ndarray          # (N, T) Role values
    pad_mask: np.ndarray       # (N, T) True at real tokens
    passage_ranges: np.ndarray  # (N, 2) inclusive [first, last] passage positions
    starts: np.ndarray | None = None
    ends: np.ndarray | None = None
    choices: np.ndarray | None = None
    m: int = 1
    examples: list[Example] = field(default_factory=list, repr=False)

    @property
    def task(self) -> str:
        return "choice" if self.choices is not None else "span"

    @property
    def n_examples(self) -> int:
        return self.ids.shape[0] // self.m


def _layout(ex: Example, option: list[int] | None, vocab: Vocab) -> tuple[list[int], list[int]]:
    ids = [vocab.cls_id] + ex.passage + [vocab.sep_id] + ex.question
    roles = [Role.SPECIAL] + [Role.PASSAGE] * len(ex.passage) + [Role.SPECIAL] + [Role.QUESTION] * len(ex.question)
    if option is not None:
        ids += [vocab.sep_id] + option
        roles += [Role.SPECIAL] + [Role.OPTION] * len(option)
    ids.append(vocab.sep_id)
    roles.append(Role.SPECIAL)
    return ids, [int(r) for r in roles]


def sequence_length(ex: Example) -> int:
    extra = 2 + max(len(o) for o in ex.options) if ex.options else 0
    return len(ex.passage) + len(ex.question) + 3 + extra


def build_batch(examples: Sequence[Example], vocab: Vocab, max_len: int) -> Batch:
    """Lay out ``CLS passage SEP question [SEP option] SEP`` and pad to ``max_len``.

    Choice examples expand into one sequence per option. Span labels are shifted
    by the leading CLS.
    """
    if not examples:
        raise DataError("build_batch: empty example list")
    is_choice = examples[0].choice is not None
    m = len(examples[0].options) if is_choice else 1
    seqs = []
    for n, ex in enumerate(examples):
        if (ex.choice is not None) != is_choice or (is_choice and len(ex.options) != m):
            raise DataError(f"build_batch: example {n} does not match the batch task/option count")
        for opt in (ex.options if is_choice else [None]):
            ids, roles = _layout(ex, opt, vocab)
            if len(ids) > max_len:
                raise DataError(f"build_batch: example {n} needs {len(ids)} positions, max_len is {max_len}")
            seqs.append((ids, roles, len(ex.passage)))
    N = len(seqs)
    ids = np.full((N, max_len), vocab.pad_id, dtype=np.int64)
    roles = np.full((N, max_len), int(Role.SPECIAL), dtype=np.int64)
    pad_mask = np.zeros((N, max_len), dtype=bool)
    ranges = np.zeros((N, 2), dtype=np.int64)
    for r, (s_ids, s_roles, plen) in enumerate(seqs):
        ids[r, :len(s_ids)] = s_ids
        roles[r, :len(s_roles)] = s_roles
        pad_mask[r, :len(s_ids)] = True
        ranges[r] = (1, plen)
    batch = Batch(ids=ids, roles=roles, pad_mask=pad_mask, passage_ranges=ranges, m=m,
                  examples=list(examples))
    if is_choice:
        batch.choices = np.array([ex.choice for ex in examples], dtype=np.int64)
    else:
        batch.starts = np.array([ex.span[0] + 1 for ex in examples], dtype=np.int64)
        batch.ends = np.array([ex.span[1] + 1 for ex in examples], dtype=np.int64)
    return batch


def decode_sequence(batch: Batch, row: int, vocab: Vocab) -> dict:
    """Recover the passage / question / option token strings of one batch row."""
    ids, roles = batch.ids[row], batch.roles[row]
    out = {"passage": vocab.decode(ids[roles == Role.PASSAGE]),
           "question": vocab.decode(ids[roles == Role.QUESTION])}
    opt = ids[roles == Role.OPTION]
    if opt.size:
        out["option"] = vocab.decode(opt)
    return out


def iter_batches(examples: Sequence[Example], batch_size: int, order: Sequence[int] | None = None):
    idx = list(range(len(examples))) if order is None else list(order)
    for i in range(0, len(idx), batch_size):
        yield [examples[j] for j in idx[i:i + batch_size]]


# ---------------------------------------------------------------------------
# JSON-lines files
# ---------------------------------------------------------------------------


def example_to_json(ex: Example, vocab: Vocab) -> dict:
    rec = {"passage": vocab.decode(ex.passage), "question": vocab.decode(ex.question)}
    if ex.options is not None:
        rec["options"] = [vocab.decode(o) for o in ex.options]
    rec["answer"] = {"start": ex.span[0], "end": ex.span[1]} if ex.span is not None else {"choice": ex.choice}
    rec["meta"] = {"seed": ex.seed, "distractor": ex.distractor}
    return rec


def example_from_json(rec: dict, vocab: Vocab) -> Example:
    ans = rec.get("answer")
    if not isinstance(ans, dict):
        raise DataError("record has no answer object")
    meta = rec.get("meta", {})
    ex = Example(passage=vocab.encode(rec["passage"]), question=vocab.encode(rec["question"]),
                 options=[vocab.encode(o) for o in rec["options"]] if "options" in rec else None,
                 span=(int(ans["start"]), int(ans["end"])) if "start" in ans else None,
                 choice=int(ans["choice"]) if "choice" in ans else None,
                 seed=meta.get("seed"), distractor=bool(meta.get("distractor", False)))
    ex.validate()
    return ex


def meta_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def save_dataset(path: str | Path, examples: Sequence[Example], vocab: Vocab, params: dict) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(example_to_json(ex, vocab), sort_keys=True) + "\n")
    with open(meta_path(path), "w", encoding="utf-8") as fh:
        json.dump({**params, "vocab_size": len(vocab), "n_examples": len(examples)}, fh,
                  indent=2, sort_keys=True)
        fh.write("\n")


def load_dataset(path: str | Path, vocab: Vocab | None = None) -> tuple[list[Example], Vocab]:
    """Read a dataset file, validating every example.

    Without an explicit ``vocab`` the companion ``.meta.json`` supplies the
    vocabulary size.
    """
    path = Path(path)
    if vocab is None:
        mp = meta_path(path)
        if not mp.exists():
            raise DataError(f"{path}: no vocabulary given and no metadata file {mp}")
        vocab = Vocab.standard(int(json.loads(mp.read_text())["vocab_size"]))
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(example_from_json(json.loads(line), vocab))
            except (DataError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{n}: {exc}") from None
    if not out:
        raise DataError(f"{path}: dataset is empty")
    tasks = {ex.choice is not None for ex in out}
    if len(tasks) > 1:
        raise DataError(f"{path}: mixes span and choice examples")
    return out, vocab


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
