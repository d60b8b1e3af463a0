"""Reward functions: Hamming distance, sentence/corpus BLEU-4, CIDEr-D.

All metrics operate on integer-id sequences with structural tokens (bos,
eos, pad) already stripped; rewards are maximized downstream, with Hamming
entering as r = -distance.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

MAX_NGRAM = 4
CIDER_SIGMA = 6.0


class MetricError(ValueError):
    pass


def hamming(y: Sequence[int], y_ref: Sequence[int]) -> int:
    """Number of positions where the two equal-length sequences differ."""
    if len(y) != len(y_ref):
        raise MetricError("hamming length mismatch")
    return sum(a != b for a, b in zip(y, y_ref))


def ngram_counts(seq: Sequence[int], n: int) -> Counter:
    return Counter(tuple(seq[i : i + n]) for i in range(len(seq) - n + 1))


def _closest_shorter(lengths, c):
    # smallest |len - c|, ties towards the shorter reference
    return min(lengths, key=lambda r: (abs(r - c), r))


def sentence_bleu4(y: Sequence[int], refs: Sequence[Sequence[int]], smooth: bool = True) -> float:
    """Sentence-level BLEU-4: geometric mean of modified n-gram precisions
    (n=1..4) times the brevity penalty.

    With ``smooth`` the precisions for n >= 2 get add-one smoothing
    (numerator and denominator), so near-misses keep a usable score when
    BLEU acts as a sampling reward; the 1-gram precision is never smoothed.
    The brevity penalty uses the shortest reference length, which makes the
    multi-reference score an upper bound of any single-reference score.
    """
    if not refs:
        raise MetricError("refs must be non-empty")
    y = list(y)
    if not y:
        return 0.0
    c = len(y)
    log_p = 0.0
    for n in range(1, MAX_NGRAM + 1):
        cand = ngram_counts(y, n)
        total = sum(cand.values())
        clipped = 0
        for g, cnt in cand.items():
            clipped += min(cnt, max(ngram_counts(r, n).get(g, 0) for r in refs))
        if smooth and n >= 2:
            clipped, total = clipped + 1, total + 1
        if clipped == 0 or total == 0:
            return 0.0
        log_p += math.log(clipped / total)
    r = min(len(ref) for ref in refs)
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    return bp * math.exp(log_p / MAX_NGRAM)


def corpus_bleu4(pairs: Sequence[tuple[Sequence[int], Sequence[Sequence[int]]]]) -> float:
    """Corpus-level BLEU-4: clipped counts and totals are aggregated over all
    pairs before the geometric mean; no smoothing."""
    if not pairs:
        raise MetricError("empty pair list")
    clipped = [0] * MAX_NGRAM
    totals = [0] * MAX_NGRAM
    c_len = r_len = 0
    for y, refs in pairs:
        if not refs:
            raise MetricError("refs must be non-empty")
        y = list(y)
        c_len += len(y)
        r_len += _closest_shorter([len(r) for r in refs], len(y))
        for n in range(1, MAX_NGRAM + 1):
            cand = ngram_counts(y, n)
            totals[n - 1] += sum(cand.values())
            for g, cnt in cand.items():
                clipped[n - 1] += min(cnt, max(ngram_counts(r, n).get(g, 0) for r in refs))
    log_p = 0.0
    for n in range(MAX_NGRAM):
        if clipped[n] == 0 or totals[n] == 0:
            return 0.0
        log_p += math.log(clipped[n] / totals[n])
    bp = 1.0 if c_len >= r_len else math.exp(1.0 - r_len / max(c_len, 1))
    return bp * math.exp(log_p / MAX_NGRAM)


@dataclass(frozen=True)
class IdfTable:
    """idf(g) = log(N / df(g)) over the training reference corpus, df
    floored at 1; ``n_docs`` is the number of examples N."""

    weights: dict
    n_docs: int

    def __getitem__(self, g):
        return self.weights.get(g, math.log(self.n_docs))

    def save(self, path) -> None:
        """One line per n-gram: space-separated ids, TAB, idf float."""
        with open(path, "w", encoding="utf-8") as f:
            f.write(f"__n_docs__\t{self.n_docs}\n")
            for g in sorted(self.weights):
                ids = " ".join(str(i) for i in g)
                f.write(f"{ids}\t{self.weights[g]:.12g}\n")

    @classmethod
    def load(cls, path) -> "IdfTable":
        weights, n_docs = {}, 0
        with open(path, encoding="utf-8") as f:
            for line in f:
                key, val = line.rstrip("\n").split("\t")
                if key == "__n_docs__":
                    n_docs = int(val)
                    continue
                g = tuple(int(x) for x in key.split())
                weights[g] = float(val)
        return cls(weights, n_docs)


def build_idf(reference_corpus: Sequence[Sequence[Sequence[int]]]) -> IdfTable:
    """Document frequencies over examples: df(g) counts the examples whose
    reference set contains g at any order n = 1..4."""
    if not reference_corpus:
        raise MetricError("empty reference corpus")
    df = Counter()
    for refs in reference_corpus:
        grams = set()
        for r in refs:
            for n in range(1, MAX_NGRAM + 1):
                grams.update(ngram_counts(r, n))
        df.update(grams)
    n_docs = len(reference_corpus)
    weights = {g: math.log(n_docs / max(1, d)) for g, d in df.items()}
    return IdfTable(weights, n_docs)


def _tfidf_vec(seq, idf):
    vecs, norms = [], []
    for n in range(1, MAX_NGRAM + 1):
        v = {g: cnt * idf[g] for g, cnt in ngram_counts(seq, n).items()}
        vecs.append(v)
        norms.append(math.sqrt(sum(x * x for x in v.values())))
    return vecs, norms


def cider(y: Sequence[int], refs: Sequence[Sequence[int]], idf: IdfTable) -> float:
    """CIDEr-D consensus score.

    Per order n: count-clipped cosine similarity of tf-idf n-gram vectors
    against each reference, damped by the Gaussian length penalty
    exp(-(|y|-|ref|)^2 / (2 sigma^2)) with sigma = 6; averaged over
    references and n, scaled by 10.
    """
    if idf is None or not idf.weights:
        raise MetricError("idf not initialized")
    if not refs:
        raise MetricError("refs must be non-empty")
    y = list(y)
    vy, ny = _tfidf_vec(y, idf)
    score = 0.0
    for ref in refs:
        vr, nr = _tfidf_vec(ref, idf)
        delta = float(len(y) - len(ref))
        penalty = math.exp(-(delta**2) / (2.0 * CIDER_SIGMA**2))
        for n in range(MAX_NGRAM):
            num = sum(min(cnt, vr[n].get(g, 0.0)) * vr[n].get(g, 0.0) for g, cnt in vy[n].items())
            if ny[n] > 0 and nr[n] > 0:
                score += penalty * num / (ny[n] * nr[n])
    return 10.0 * score / (len(refs) * MAX_NGRAM)


@dataclass(frozen=True)
class RewardFn:
    """Reward r(y, refs), maximized.  Hamming scores against the first
    reference as -distance; BLEU/CIDEr use all references when multi_ref."""

    kind: str  # "hamming" | "bleu4" | "cider"
    multi_ref: bool = False
    idf: IdfTable | None = None

    def __post_init__(self):
        if self.kind not in ("hamming", "bleu4", "cider"):
            raise MetricError(f"unknown reward kind: {self.kind}")
        if (self.idf is not None) != (self.kind == "cider"):
            raise MetricError("idf_table present iff kind is cider")

    def score(self, y: Sequence[int], refs: Sequence[Sequence[int]]) -> float:
        if self.kind == "hamming":
            return -float(hamming(y, refs[0]))
        use = list(refs) if self.multi_ref else [refs[0]]
        if self.kind == "bleu4":
            return sentence_bleu4(y, use)
        return cider(y, use, self.idf)
