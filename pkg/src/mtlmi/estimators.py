"""Mutual-information lower bounds and in-batch negative sampling.

Two estimators over critic scores: a softplus-based Jensen-Shannon surrogate
(one derangement negative per positive, the one used during training) and a
noise-contrastive bound over the full in-batch score matrix (kept for
evaluation and cross-checks).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError

# Scores are clamped before softplus / log-sum-exp; at this magnitude the
# clamp changes the bound by far less than 1e-12.
SCORE_CLAMP = 30.0


@dataclass
class PairScores:
    """Critic scores on matched pairs and on derangement-mismatched pairs."""

    positive_scores: Tensor
    negative_scores: Tensor

    def __post_init__(self):
        p, q = self.positive_scores.data, self.negative_scores.data
        if p.ndim != 1 or q.ndim != 1 or p.shape != q.shape:
            raise DimensionError("pair scores must be equal-length vectors")
        if p.shape[0] < 2:
            raise ContractError("pair scores need at least 2 samples")


def derangement_shuffle(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random permutation of {0..n-1} with no fixed points."""
    if n < 2:
        raise ContractError(f"derangement needs n >= 2, got {n}")
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


def jsd_lower_bound(scores: PairScores) -> Tensor:
    """mean(-sp(-pos)) - mean(sp(neg)); always <= 0, tight limit 0."""
    pos = ad.clip(scores.positive_scores, -SCORE_CLAMP, SCORE_CLAMP)
    neg = ad.clip(scores.negative_scores, -SCORE_CLAMP, SCORE_CLAMP)
    pos_term = ad.mean(ad.neg(ad.softplus(ad.neg(pos))))
    neg_term = ad.mean(ad.softplus(neg))
    return ad.sub(pos_term, neg_term)


def nce_lower_bound(score_matrix: Tensor) -> Tensor:
    """mean_i [s(i,i) - logsumexp_j s(i,j)] over an (N, N) score matrix.

    Diagonal entries are the matched pairs. The degenerate N = 1 case is 0
    by construction (the positive is its own normalizer).
    """
    data = score_matrix.data
    if data.ndim != 2 or data.shape[0] != data.shape[1]:
        raise DimensionError("nce_lower_bound expects a square score matrix")
    n = data.shape[0]
    if n == 1:
        return Tensor(0.0)
    clamped = ad.clip(score_matrix, -SCORE_CLAMP, SCORE_CLAMP)
    return ad.mean(ad.gather_logit(ad.log_softmax(clamped), np.arange(n)))
