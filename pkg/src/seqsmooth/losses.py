"""The interpolated loss family.

Every loss reduces to cross-entropy of model log-probability rows against
per-position target rows; the target-entropy constant is dropped since it
does not affect the parameter gradient.  A provider is any callable mapping
a conditioning sequence (ending with eos) to its teacher-forced (T, V)
log-probability rows.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .sampling import WeightedSample

Provider = Callable[[tuple[int, ...]], np.ndarray]


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossMixParams:
    alpha: float = 0.5      # single-smoother mix
    alpha1: float = 0.5     # combined: sequence-level weight
    alpha2: float = 0.5     # combined: token-level weight
    gamma: float = 0.0      # entropy regularizer weight
    lazy: bool = False

    def __post_init__(self):
        for name in ("alpha", "alpha1", "alpha2"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise LossError(f"{name} must be in [0,1]")
        if self.gamma < 0:
            raise LossError("gamma must be >= 0")


def _rows(provider: Provider, seq: Sequence[int]) -> np.ndarray:
    rows = provider(tuple(seq))
    if rows.shape[0] != len(seq):
        raise LossError("row count does not match sequence length")
    return rows


def _nll(rows: np.ndarray, seq: Sequence[int]) -> float:
    return -float(rows[np.arange(len(seq)), list(seq)].sum())


def mle_loss(y_star: Sequence[int], provider: Provider) -> float:
    """Negative log-likelihood of the ground truth, summed over positions
    (eos included)."""
    return _nll(_rows(provider, y_star), y_star)


def row_entropies(rows: np.ndarray) -> np.ndarray:
    p = np.exp(rows)
    return -np.sum(p * rows, axis=1)


def entropy_reg_loss(y_star: Sequence[int], provider: Provider, gamma: float) -> float:
    """MLE minus gamma times the summed entropy of the predictive rows."""
    rows = _rows(provider, y_star)
    return _nll(rows, y_star) - gamma * float(row_entropies(rows).sum())


def token_loss(
    y_star: Sequence[int],
    provider: Provider,
    smoothed: np.ndarray,
    alpha: float,
) -> float:
    """Cross-entropy against alpha * smoothed + (1-alpha) * Dirac targets.

    ``smoothed`` holds the pure per-position smoothed rows (T, V).
    """
    rows = _rows(provider, y_star)
    if smoothed.shape != rows.shape:
        raise LossError("row length mismatch")
    ce_smooth = -float(np.sum(smoothed * rows))
    return alpha * ce_smooth + (1.0 - alpha) * _nll(rows, y_star)


def seq_loss(
    y_star: Sequence[int],
    samples: Sequence[WeightedSample],
    provider: Provider,
    alpha: float,
    lazy: bool,
) -> float:
    """Sequence-level smoothed loss.

    (1-alpha) * MLE(y*) + alpha * sum_l w_l * loss(y^l), where a sample's
    loss scores its tokens under its own teacher-forced states (exact) or
    under the ground-truth states h* (lazy, one forward pass in total).
    """
    if not samples:
        raise LossError("empty sample list")
    star_rows = _rows(provider, y_star)
    base = _nll(star_rows, y_star)
    smooth = 0.0
    for s in samples:
        if len(s.sequence) != len(y_star):
            raise LossError("sample length differs from ground truth")
        rows = star_rows if lazy else _rows(provider, s.sequence)
        smooth += s.weight * _nll(rows, s.sequence)
    return (1.0 - alpha) * base + alpha * smooth


def combined_loss(
    y_star: Sequence[int],
    samples: Sequence[WeightedSample],
    provider: Provider,
    smoothed_builder: Callable[[Sequence[int]], np.ndarray],
    alpha1: float,
    alpha2: float,
    lazy: bool,
) -> float:
    """Token smoothing applied to the sampled sequences and the ground truth:

    alpha1 * sum_l w_l [alpha2 Tok(y^l) + (1-alpha2) MLE(y^l)]
      + (1-alpha1) * [alpha2 Tok(y*) + (1-alpha2) MLE(y*)]

    with sample terms conditioned on h* when lazy.  ``smoothed_builder`` maps
    a sequence to its pure smoothed target rows.
    """
    if not samples:
        raise LossError("empty sample list")
    star_rows = _rows(provider, y_star)

    def tok_mix(rows, seq):
        smoothed = smoothed_builder(seq)
        return alpha2 * (-float(np.sum(smoothed * rows))) + (1.0 - alpha2) * _nll(rows, seq)

    total = (1.0 - alpha1) * tok_mix(star_rows, y_star)
    for s in samples:
        rows = star_rows if lazy else _rows(provider, s.sequence)
        total += alpha1 * s.weight * tok_mix(rows, s.sequence)
    return total
