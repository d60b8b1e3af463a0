"""Token-level target smoothing from word-embedding similarity.

The per-position target over the vocabulary is a softmax of the cosine
similarity to the ground-truth token, optionally penalized by a frequency
ratio so frequent tokens spread mass toward rare neighbors, then mixed with
the ground-truth Dirac.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .corpus import SPECIAL_IDS, Vocabulary


class EmbeddingError(ValueError):
    pass


def _hash_unit_vector(token: str, dim: int) -> np.ndarray:
    # deterministic across runs and load order: seed from the token string
    digest = hashlib.sha256(token.encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


@dataclass(frozen=True)
class TokenSmoothParams:
    tau: float = 0.8       # softmax temperature
    beta: float = 0.1      # frequency-ratio penalty weight
    alpha: float = 1.0     # mass on the smooth part vs the Dirac
    top_k: int | None = None  # optional support truncation, renormalized

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0,1]")
        if self.top_k is not None and self.top_k < 1:
            raise ValueError("top_k must be >= 1")


class EmbeddingTable:
    """Per-id embedding vectors for content tokens; specials carry none.

    Tokens from the vocabulary that are missing in the embedding file get a
    deterministic hash-seeded random unit vector so the softmax support stays
    total.
    """

    def __init__(self, vectors: np.ndarray, has: np.ndarray):
        self.vectors = vectors
        self.norms = np.linalg.norm(vectors, axis=1)
        self.has = has
        self.dim = vectors.shape[1]

    @classmethod
    def load(cls, path, vocab: Vocabulary) -> "EmbeddingTable":
        """GloVe text layout: one token per line, ``token v1 v2 ... vD``."""
        raw: dict[str, np.ndarray] = {}
        dim = None
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                parts = line.split()
                if not parts:
                    continue
                tok, vals = parts[0], parts[1:]
                if dim is None:
                    dim = len(vals)
                    if dim < 1:
                        raise EmbeddingError(f"line {lineno}: no vector components")
                elif len(vals) != dim:
                    raise EmbeddingError(
                        f"line {lineno}: dimension {len(vals)} != {dim}"
                    )
                v = np.array([float(x) for x in vals])
                if not np.linalg.norm(v) > 0:
                    raise EmbeddingError(f"line {lineno}: zero vector for {tok!r}")
                if tok in raw:
                    warnings.warn(f"duplicate embedding for {tok!r}; last occurrence wins")
                raw[tok] = v
        if dim is None:
            raise EmbeddingError("empty embedding file")
        return cls._from_raw(raw, dim, vocab)

    @classmethod
    def random(cls, vocab: Vocabulary, dim: int) -> "EmbeddingTable":
        """All-hash-random table; useful when no trained embeddings exist."""
        return cls._from_raw({}, dim, vocab)

    @classmethod
    def _from_raw(cls, raw, dim, vocab):
        vectors = np.zeros((vocab.size, dim))
        has = np.zeros(vocab.size, dtype=bool)
        for i in vocab.content_ids():
            tok = vocab.tokens[i]
            vectors[i] = raw.get(tok, _hash_unit_vector(tok, dim))
            has[i] = True
        return cls(vectors, has)


def token_reward(y_t: int, y_star_t: int, emb: EmbeddingTable) -> float:
    """Cosine similarity between the two token embeddings."""
    if not (emb.has[y_t] and emb.has[y_star_t]):
        raise EmbeddingError("special tokens have no embedding")
    num = float(emb.vectors[y_t] @ emb.vectors[y_star_t])
    return num / (emb.norms[y_t] * emb.norms[y_star_t])


def token_reward_freq(
    y_t: int, y_star_t: int, emb: EmbeddingTable, freq: Sequence[int], beta: float
) -> float:
    """Cosine reward minus beta * min(freq ratio); the penalty peaks when the
    two tokens have similar frequencies."""
    f1, f2 = freq[y_t], freq[y_star_t]
    if f1 <= 0 or f2 <= 0:
        raise EmbeddingError("zero frequency")
    ratio = min(f1 / f2, f2 / f1)
    return token_reward(y_t, y_star_t, emb) - beta * ratio


def smoothed_token_distribution(
    y_star_t: int,
    params: TokenSmoothParams,
    emb: EmbeddingTable,
    freq: Sequence[int],
) -> np.ndarray:
    """Probability vector over the full vocabulary for one target position.

    Softmax over content ids of the (frequency-penalized) cosine reward at
    temperature tau, then alpha-mixed with the Dirac on the ground truth;
    special ids get zero probability.
    """
    if not emb.has[y_star_t]:
        raise EmbeddingError("target position is not a content token")
    content = np.flatnonzero(emb.has)
    cos = (emb.vectors[content] @ emb.vectors[y_star_t]) / (
        emb.norms[content] * emb.norms[y_star_t]
    )
    if params.beta > 0:
        f = np.asarray(freq, dtype=float)[content]
        f_star = float(freq[y_star_t])
        if f_star <= 0 or np.any(f <= 0):
            raise EmbeddingError("zero frequency")
        rewards = cos - params.beta * np.minimum(f / f_star, f_star / f)
    else:
        rewards = cos
    scores = rewards / params.tau
    if params.top_k is not None and params.top_k < len(content):
        cutoff = np.partition(scores, -params.top_k)[-params.top_k]
        scores = np.where(scores >= cutoff, scores, -np.inf)
    probs = np.exp(scores - logsumexp(scores))
    out = np.zeros(len(emb.has))
    out[content] = params.alpha * probs / probs.sum()
    out[y_star_t] += 1.0 - params.alpha
    return out


def build_smoothed_targets(
    seq: Sequence[int],
    params: TokenSmoothParams,
    emb: EmbeddingTable,
    freq: Sequence[int],
    cache: dict | None = None,
) -> np.ndarray:
    """Stack of per-position target rows for a full sequence (including eos).

    Positions holding structural tokens (eos, unk, ...) are not smoothed and
    stay Dirac; rows for repeated tokens are memoized through ``cache``.
    """
    V = len(emb.has)
    rows = np.zeros((len(seq), V))
    for t, tok in enumerate(seq):
        if tok in SPECIAL_IDS or not emb.has[tok]:
            rows[t, tok] = 1.0
            continue
        if cache is not None and tok in cache:
            rows[t] = cache[tok]
            continue
        row = smoothed_token_distribution(tok, params, emb, freq)
        if cache is not None:
            cache[tok] = row
        rows[t] = row
    return rows
