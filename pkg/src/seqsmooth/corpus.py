"""Corpus ingestion: vocabulary with frequency statistics, encoding, batching.

Input is assumed pre-tokenized and whitespace-separated; no linguistic
tokenization happens here.  Corpus files are UTF-8, one example per line:

    source-tokens \\t target-tokens \\t ref2 \\t ref3 ...

with at least one reference (the target itself).
"""

from __future__ import annotations

import collections
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

PAD, UNK, BOS, EOS = "<pad>", "<unk>", "<bos>", "<eos>"
SPECIALS = (PAD, UNK, BOS, EOS)
# Specials always occupy the first ids, in this order.
PAD_ID, UNK_ID, BOS_ID, EOS_ID = 0, 1, 2, 3
SPECIAL_IDS = (PAD_ID, UNK_ID, BOS_ID, EOS_ID)


class CorpusError(ValueError):
    """Raised on malformed corpus input or invalid construction arguments."""


@dataclass(frozen=True)
class Vocabulary:
    """Dense token<->id maps plus training-set term frequencies.

    ids are 0..size-1 with the four specials first; ``freq[UNK_ID]`` holds the
    summed counts of all tokens dropped by the min-count threshold.
    """

    tokens: tuple[str, ...]
    freq: tuple[int, ...]

    def __post_init__(self):
        if self.tokens[:4] != SPECIALS:
            raise CorpusError("vocabulary must start with the special tokens")
        if len(self.tokens) != len(set(self.tokens)):
            raise CorpusError("duplicate token in vocabulary")
        if len(self.freq) != len(self.tokens):
            raise CorpusError("freq table size mismatch")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    @property
    def index(self) -> dict:
        return self._index

    @property
    def size(self) -> int:
        return len(self.tokens)

    def content_ids(self) -> tuple[int, ...]:
        """All non-special ids, ascending."""
        return tuple(range(4, self.size))

    def encode(self, text: str | Sequence[str], max_len: int) -> tuple[int, ...]:
        """Encode whitespace-separated tokens; unknowns map to unk, the
        sequence is truncated to ``max_len`` content tokens, and eos is
        appended after truncation."""
        if max_len < 1:
            raise CorpusError("max_len must be >= 1")
        toks = text.split() if isinstance(text, str) else list(text)
        ids = [self._index.get(t, UNK_ID) for t in toks[:max_len]]
        return tuple(ids) + (EOS_ID,)

    def decode(self, ids: Sequence[int]) -> list[str]:
        """Inverse of encode for in-vocabulary tokens; drops the trailing eos."""
        out = [self.tokens[i] for i in ids]
        if out and out[-1] == EOS:
            out = out[:-1]
        return out

    def save(self, path) -> None:
        """One line per token: ``token<TAB>count``, ordered by id."""
        with open(path, "w", encoding="utf-8") as f:
            for tok, cnt in zip(self.tokens, self.freq):
                f.write(f"{tok}\t{cnt}\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        tokens, freq = [], []
        with open(path, encoding="utf-8") as f:
            for line in f:
                line = line.rstrip("\n")
                if not line:
                    continue
                tok, cnt = line.split("\t")
                tokens.append(tok)
                freq.append(int(cnt))
        return cls(tuple(tokens), tuple(freq))


def build_vocabulary(corpus: Iterable[str | Sequence[str]], min_count: int = 1) -> Vocabulary:
    """Count tokens over the corpus and keep those occurring >= min_count.

    Dropped tokens contribute their counts to unk.  Content tokens are
    ordered by descending frequency, ties broken lexicographically, so the
    id assignment is deterministic.
    """
    if min_count < 1:
        raise CorpusError("min_count must be >= 1")
    counts = collections.Counter()
    empty = True
    for line in corpus:
        empty = False
        toks = line.split() if isinstance(line, str) else line
        counts.update(toks)
    if empty:
        raise CorpusError("empty corpus")
    kept = sorted(
        (t for t, c in counts.items() if c >= min_count and t not in SPECIALS),
        key=lambda t: (-counts[t], t),
    )
    dropped = sum(c for t, c in counts.items() if c < min_count and t not in SPECIALS)
    tokens = SPECIALS + tuple(kept)
    freq = (0, dropped, 0, 0) + tuple(counts[t] for t in kept)
    return Vocabulary(tokens, freq)


@dataclass(frozen=True)
class Example:
    """One paired training item: source, ground-truth target, m references.

    Sequences are id tuples ending with eos; the target is always among the
    references.
    """

    source: tuple[int, ...]
    target: tuple[int, ...]
    references: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        if len(self.target) < 2:  # at least one content token + eos
            raise CorpusError("empty target")
        if not self.references:
            raise CorpusError("references must be non-empty")
        if self.target not in self.references:
            raise CorpusError("target must be among the references")


@dataclass(frozen=True)
class Batch:
    """A group of examples plus the union of their reference token ids."""

    examples: tuple[Example, ...]
    batch_vocab: tuple[int, ...]

    @classmethod
    def of(cls, examples: Sequence[Example]) -> "Batch":
        ids = set()
        for ex in examples:
            for ref in ex.references:
                ids.update(ref)
        return cls(tuple(examples), tuple(sorted(ids)))


def load_corpus(path, vocab: Vocabulary, max_len: int) -> list[Example]:
    """Parse a tab-separated corpus file into encoded Examples."""
    examples = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) < 2:
                raise CorpusError(f"{path}:{lineno}: expected source<TAB>target")
            src = vocab.encode(cols[0], max_len)
            tgt = vocab.encode(cols[1], max_len)
            refs = [tgt] + [vocab.encode(c, max_len) for c in cols[2:]]
            # keep references deduplicated but ordered
            seen, uniq = set(), []
            for r in refs:
                if r not in seen:
                    seen.add(r)
                    uniq.append(r)
            examples.append(Example(src, tgt, tuple(uniq)))
    if not examples:
        raise CorpusError("empty corpus")
    return examples


def make_batches(dataset: Sequence[Example], batch_size: int, seed: int) -> list[Batch]:
    """Deterministic shuffle under seed, then fixed-size chunks (last may be
    short)."""
    if not dataset:
        raise CorpusError("empty dataset")
    if batch_size < 1:
        raise CorpusError("batch_size must be >= 1")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(dataset))
    shuffled = [dataset[i] for i in order]
    return [
        Batch.of(shuffled[i : i + batch_size])
        for i in range(0, len(shuffled), batch_size)
    ]
