"""Seeded generators for small synthetic probing tasks over an integer vocabulary.

Each task isolates one property of a token sequence:

* ``seq_len_bucket``: which length bucket the sequence falls into.
* ``word_content``: which of ``num_classes`` reserved content tokens it contains.
* ``bigram_shift``: whether two adjacent tokens of a grammatical sequence were swapped.
  Grammatical sequences start on an even token and continue with ``next = prev + k
  (mod vocab)`` for an odd ``k`` in SUCCESSOR_STEPS, so over an even vocabulary every
  token has the parity of its position. A swap leaves a forbidden bigram behind and
  keeps the multiset of tokens.
* ``token_count_parity``: parity of the number of PARITY_TOKEN occurrences.
* ``coordination_inversion``: whether two clauses drawn from disjoint token ranges
  around a separator appear in inverted order.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Sequence, Tuple, Union

import numpy as np

from app.errors import ConfigurationError, DataError
from app.models.experiment import TaskSpec

logger = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")
SUCCESSOR_STEPS = (1, 3, 5)
PARITY_TOKEN = 0
SEPARATOR_TOKEN = 0


@dataclass(frozen=True)
class Example:
    tokens: Tuple[int, ...]
    label: int


@dataclass
class DatasetSplits:
    train: List[Example]
    valid: List[Example]
    test: List[Example]

    def split(self, name: str) -> List[Example]:
        if name not in SPLITS:
            raise ConfigurationError(f"unknown split {name!r}; expected one of {', '.join(SPLITS)}")
        return getattr(self, name)


def _length_bucket(spec: TaskSpec, length: int) -> int:
    return (length - spec.min_len) * spec.num_classes // (spec.max_len - spec.min_len + 1)


def _clause_boundary(spec: TaskSpec) -> int:
    return 1 + (spec.vocab_size - 1) // 2


def validate_spec(spec: TaskSpec) -> None:
    lengths = spec.max_len - spec.min_len + 1
    binary = {"bigram_shift", "token_count_parity", "coordination_inversion"}
    if spec.kind in binary and spec.num_classes != 2:
        raise ConfigurationError(f"{spec.kind} is a two-class task, got num_classes={spec.num_classes}")
    if spec.kind == "seq_len_bucket" and spec.num_classes > lengths:
        raise ConfigurationError(f"{spec.num_classes} length buckets need at least as many lengths, got {lengths}")
    if spec.kind == "word_content" and spec.vocab_size <= spec.num_classes:
        raise ConfigurationError("word_content needs filler tokens beyond the content tokens")
    if spec.kind == "bigram_shift":
        if spec.min_len < 2:
            raise ConfigurationError("bigram_shift needs sequences of at least two tokens")
        if spec.vocab_size % 2 or spec.vocab_size <= 2 * max(SUCCESSOR_STEPS):
            raise ConfigurationError(f"bigram_shift needs an even vocab_size above {2 * max(SUCCESSOR_STEPS)}, got {spec.vocab_size}")
    if spec.kind == "token_count_parity" and spec.vocab_size < 2:
        raise ConfigurationError("token_count_parity needs at least one filler token")
    if spec.kind == "coordination_inversion":
        if spec.min_len < 3:
            raise ConfigurationError("coordination_inversion needs two clauses and a separator")
        if spec.vocab_size < 3:
            raise ConfigurationError("coordination_inversion needs a separator and two clause ranges")


def _seq_len_bucket(spec: TaskSpec, label: int, rng: np.random.Generator) -> List[int]:
    lengths = [n for n in range(spec.min_len, spec.max_len + 1) if _length_bucket(spec, n) == label]
    length = int(rng.choice(lengths))
    return rng.integers(0, spec.vocab_size, length).tolist()


def _word_content(spec: TaskSpec, label: int, rng: np.random.Generator) -> List[int]:
    length = int(rng.integers(spec.min_len, spec.max_len + 1))
    tokens = rng.integers(spec.num_classes, spec.vocab_size, length)
    tokens[int(rng.integers(0, length))] = label
    return tokens.tolist()


def _bigram_shift(spec: TaskSpec, label: int, rng: np.random.Generator) -> List[int]:
    length = int(rng.integers(spec.min_len, spec.max_len + 1))
    steps = rng.choice(SUCCESSOR_STEPS, length - 1)
    start = 2 * int(rng.integers(0, spec.vocab_size // 2))
    tokens = ((start + np.concatenate([[0], np.cumsum(steps)])) % spec.vocab_size).tolist()
    if label == 1:
        position = int(rng.integers(0, length - 1))
        tokens[position], tokens[position + 1] = tokens[position + 1], tokens[position]
    return tokens


def _token_count_parity(spec: TaskSpec, label: int, rng: np.random.Generator) -> List[int]:
    length = int(rng.integers(spec.min_len, spec.max_len + 1))
    counts = [k for k in range(length + 1) if k % 2 == label]
    count = int(rng.choice(counts))
    tokens = rng.integers(1, spec.vocab_size, length)
    tokens[rng.permutation(length)[:count]] = PARITY_TOKEN
    return tokens.tolist()


def _coordination_inversion(spec: TaskSpec, label: int, rng: np.random.Generator) -> List[int]:
    length = int(rng.integers(spec.min_len, spec.max_len + 1))
    boundary = _clause_boundary(spec)
    left = int(rng.integers(1, length - 1))
    first = rng.integers(1, boundary, left).tolist()
    second = rng.integers(boundary, spec.vocab_size, length - 1 - left).tolist()
    if label == 1:
        first, second = second, first
    return first + [SEPARATOR_TOKEN] + second


_GENERATORS: Dict[str, Callable[[TaskSpec, int, np.random.Generator], List[int]]] = {
    "seq_len_bucket": _seq_len_bucket,
    "word_content": _word_content,
    "bigram_shift": _bigram_shift,
    "token_count_parity": _token_count_parity,
    "coordination_inversion": _coordination_inversion,
}


def label_oracle(spec: TaskSpec, tokens: Sequence[int]) -> int:
    """Recompute the ground-truth label from the tokens alone."""
    tokens = list(tokens)
    if not tokens:
        raise DataError("empty token sequence")
    if spec.kind == "seq_len_bucket":
        if not spec.min_len <= len(tokens) <= spec.max_len:
            raise DataError(f"length {len(tokens)} is outside [{spec.min_len}, {spec.max_len}]")
        return _length_bucket(spec, len(tokens))
    if spec.kind == "word_content":
        present = {t for t in tokens if t < spec.num_classes}
        if len(present) != 1:
            raise DataError(f"expected exactly one content token, found {sorted(present)}")
        return present.pop()
    if spec.kind == "bigram_shift":
        steps = (np.diff(tokens) % spec.vocab_size) if len(tokens) > 1 else np.array([1])
        return int(not np.all(np.isin(steps, SUCCESSOR_STEPS)))
    if spec.kind == "token_count_parity":
        return tokens.count(PARITY_TOKEN) % 2
    if spec.kind == "coordination_inversion":
        return int(tokens[0] >= _clause_boundary(spec))
    raise ConfigurationError(f"unknown task kind {spec.kind!r}")


def _generate_split(spec: TaskSpec, size: int, rng: np.random.Generator) -> List[Example]:
    labels = rng.permutation(np.arange(size) % spec.num_classes)
    generator = _GENERATORS[spec.kind]
    return [Example(tuple(generator(spec, int(label), rng)), int(label)) for label in labels]


def generate(spec: TaskSpec) -> DatasetSplits:
    """Train/valid/test splits, each drawn from its own child stream of ``spec.seed``."""
    validate_spec(spec)
    streams = np.random.SeedSequence(spec.seed).spawn(len(SPLITS))
    sizes = {"train": spec.train_size, "valid": spec.valid_size, "test": spec.test_size}
    splits = {
        name: _generate_split(spec, sizes[name], np.random.default_rng(stream))
        for name, stream in zip(SPLITS, streams)
    }
    logger.info(
        f"Generated {spec.kind} data (seed {spec.seed}): "
        + ", ".join(f"{name}={len(examples)}" for name, examples in splits.items())
    )
    return DatasetSplits(**splits)


def class_histogram(examples: Sequence[Example], num_classes: int) -> List[int]:
    return np.bincount([example.label for example in examples], minlength=num_classes).tolist()


def dump_split(examples: Sequence[Example], path: Union[str, Path]) -> None:
    """One ``label<TAB>space-separated ids`` record per line, UTF-8, LF endings."""
    lines = [f"{example.label}\t{' '.join(str(t) for t in example.tokens)}\n" for example in examples]
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        handle.writelines(lines)


def load_split(path: Union[str, Path]) -> List[Example]:
    examples = []
    with open(path, "r", encoding="utf-8", newline="\n") as handle:
        for number, line in enumerate(handle, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                label, ids = line.split("\t")
                tokens = tuple(int(t) for t in ids.split(" "))
                examples.append(Example(tokens, int(label)))
            except ValueError:
                raise DataError(f"{path}:{number}: expected 'label<TAB>ids', got {line!r}") from None
    return examples


def write_dataset(splits: DatasetSplits, directory: Union[str, Path]) -> Dict[str, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name in SPLITS:
        paths[name] = directory / f"{name}.tsv"
        dump_split(splits.split(name), paths[name])
    logger.info(f"Wrote dataset splits to {directory}")
    return paths
