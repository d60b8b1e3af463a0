"""Sampling from the exponentiated-payoff target distribution.

For Hamming rewards the target r(y|y*) ~ exp(-d(y,y*)/tau) factorizes over
distance strata, so we sample exactly: draw a distance d from its closed-form
marginal, pick a uniform d-subset of positions, substitute uniformly from the
restricted vocabulary excluding the current token.  For BLEU/CIDEr rewards we
draw from the Hamming sampler as a proposal and self-normalize importance
weights.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import gammaln, logsumexp

from .corpus import Batch, Example, SPECIAL_IDS, Vocabulary

ENUMERATION_BOUND = 10**6


class SamplingError(ValueError):
    pass


def _log_binom(n, k):
    return gammaln(n + 1) - gammaln(k + 1) - gammaln(n - k + 1)


@dataclass(frozen=True)
class DistancePrior:
    """Closed-form marginal over Hamming distance d in {0..T}:

        p(d) = C(T,d) (V-1)^d e^{-d/tau} / ((V-1) e^{-1/tau} + 1)^T

    with V the size of the restricted substitution vocabulary.  Computed in
    log-space and normalized."""

    length: int
    sub_size: int
    tau: float
    log_probs: np.ndarray

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs)

    def mean(self) -> float:
        return float(np.arange(self.length + 1) @ self.probs)

    def log_partition(self) -> float:
        """log of the closed-form normalizer ((V-1) e^{-1/tau} + 1)^T."""
        return self.length * np.logaddexp(
            math.log(self.sub_size - 1) - 1.0 / self.tau, 0.0
        )


def distance_prior(T: int, sub_size: int, tau: float) -> DistancePrior:
    if T < 1:
        raise SamplingError("sequence length must be >= 1")
    if sub_size < 2:
        raise SamplingError("degenerate substitution vocabulary")
    if tau <= 0:
        raise SamplingError("tau must be > 0")
    d = np.arange(T + 1)
    lp = _log_binom(T, d) + d * math.log(sub_size - 1) - d / tau
    lp -= logsumexp(lp)
    return DistancePrior(T, sub_size, tau, lp)


def resolve_subvocab(
    kind: str,
    example: Example | None,
    batch: Batch | None,
    vocab: Vocabulary,
) -> tuple[int, ...]:
    """Resolve the restricted substitution vocabulary.

    full  -> all non-special ids
    refs  -> token ids of the example's references
    batch -> token ids of all references in the mini-batch

    Structural ids (pad, bos, eos, unk) are never substitutes.
    """
    if kind == "full":
        ids = set(vocab.content_ids())
    elif kind == "refs":
        if example is None:
            raise SamplingError("refs policy needs an example")
        ids = {i for ref in example.references for i in ref}
    elif kind == "batch":
        if batch is None:
            raise SamplingError("batch policy needs a batch")
        if example is not None and example not in batch.examples:
            raise SamplingError("example not in batch")
        ids = set(batch.batch_vocab)
    else:
        raise SamplingError(f"unknown subvocab policy: {kind}")
    ids -= set(SPECIAL_IDS)
    if len(ids) < 2:
        raise SamplingError("resolved substitution vocabulary smaller than 2")
    return tuple(sorted(ids))


def stratified_sample_batch(
    y_star: Sequence[int],
    tau: float,
    sub: Sequence[int],
    rng: np.random.Generator,
    n: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Draw ``n`` sequences from the Hamming reward distribution around
    ``y_star`` (content tokens only, no eos).

    Returns (samples (n,T), distances (n,), log_q (n,)) where log_q is the
    exact per-sequence proposal log-density
    log p(d) - log C(T,d) - sum over edited positions of log #choices.
    """
    y = np.asarray(y_star, dtype=np.int64)
    T = len(y)
    sub_arr = np.asarray(sorted(sub), dtype=np.int64)
    V = len(sub_arr)
    prior = distance_prior(T, V, tau)
    d = rng.choice(T + 1, size=n, p=prior.probs)
    # uniform d-subset of positions via random ranks
    ranks = np.argsort(np.argsort(rng.random((n, T)), axis=1), axis=1)
    mask = ranks < d[:, None]
    samples = np.tile(y, (n, 1))
    log_choices = np.zeros(T)
    pos_in_sub = {int(v): i for i, v in enumerate(sub_arr)}
    for t in range(T):
        m = mask[:, t]
        cnt = int(m.sum())
        if cnt == 0:
            # keep the rng stream length-independent of the mask draw order
            log_choices[t] = math.log(V - 1 if int(y[t]) in pos_in_sub else V)
            continue
        k = pos_in_sub.get(int(y[t]))
        if k is None:
            draws = rng.integers(0, V, size=cnt)
            log_choices[t] = math.log(V)
        else:
            draws = rng.integers(0, V - 1, size=cnt)
            draws = draws + (draws >= k)
            log_choices[t] = math.log(V - 1)
        samples[m, t] = sub_arr[draws]
    log_q = prior.log_probs[d] - _log_binom(T, d) - mask @ log_choices
    return samples, d, log_q


def stratified_sample(
    y_star: Sequence[int],
    tau: float,
    sub: Sequence[int],
    rng: np.random.Generator,
) -> tuple[int, ...]:
    """Single exact draw from the Hamming reward distribution."""
    samples, _, _ = stratified_sample_batch(y_star, tau, sub, rng, 1)
    return tuple(int(t) for t in samples[0])


@dataclass(frozen=True)
class WeightedSample:
    """An augmented sequence with its self-normalized importance weight."""

    sequence: tuple[int, ...]
    weight: float
    distance: int
    log_q: float
    reward: float


def uniform_samples(
    y_star: Sequence[int],
    tau: float,
    sub: Sequence[int],
    rng: np.random.Generator,
    L: int,
) -> list[WeightedSample]:
    """L exact Hamming-reward draws, uniformly weighted 1/L."""
    seqs, dists, log_q = stratified_sample_batch(y_star, tau, sub, rng, L)
    return [
        WeightedSample(tuple(int(t) for t in seqs[l]), 1.0 / L, int(dists[l]),
                       float(log_q[l]), -float(dists[l]))
        for l in range(L)
    ]


def importance_sample(
    y_star: Sequence[int],
    refs: Sequence[Sequence[int]],
    reward: Callable[[Sequence[int]], float],
    tau: float,
    proposal_tau: float,
    sub: Sequence[int],
    rng: np.random.Generator,
    L: int,
) -> list[WeightedSample]:
    """Self-normalized importance sampling for intractable rewards.

    Draws L sequences from the Hamming stratified proposal around ``y_star``,
    scores the target mass exp(reward(y)/tau) against ``refs``, and reweighs:
    omega_l = softmax over l of (reward_l/tau - log q_l).  ``reward`` is any
    callable y -> float (e.g. a bound BLEU-4 or CIDEr scorer).
    """
    if L < 1:
        raise SamplingError("L must be >= 1")
    seqs, dists, log_q = stratified_sample_batch(y_star, tau=proposal_tau, sub=sub, rng=rng, n=L)
    cache: dict[bytes, float] = {}
    rewards = np.empty(L)
    for l in range(L):
        key = seqs[l].tobytes()
        if key not in cache:
            cache[key] = float(reward(tuple(int(t) for t in seqs[l])))
        rewards[l] = cache[key]
    log_w = rewards / tau - log_q
    weights = np.exp(log_w - logsumexp(log_w))
    weights /= weights.sum()
    return [
        WeightedSample(tuple(int(t) for t in seqs[l]), float(weights[l]),
                       int(dists[l]), float(log_q[l]), float(rewards[l]))
        for l in range(L)
    ]


def exact_reward_distribution(
    y_star: Sequence[int],
    reward: Callable[[Sequence[int]], float],
    tau: float,
    sub: Sequence[int],
) -> dict[tuple[int, ...], float]:
    """Test oracle: the fully normalized target over sub^T by enumeration.

    Only valid for |sub|^T <= 10^6.
    """
    T = len(y_star)
    sub = tuple(sorted(sub))
    if len(sub) ** T > ENUMERATION_BOUND:
        raise SamplingError("enumeration bound exceeded")
    seqs = list(itertools.product(sub, repeat=T))
    log_mass = np.array([reward(s) / tau for s in seqs])
    probs = np.exp(log_mass - logsumexp(log_mass))
    return {s: float(p) for s, p in zip(seqs, probs)}
