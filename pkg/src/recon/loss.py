"""Contrastive losses: plain InfoNCE and its relevance-weighted variants.

The weighted form scales each positive pair's InfoNCE term by its normalized
similarity score, so pairs the current model judges more relevant dominate
the loss. Weights are treated as constants when differentiating: the model
acts as a frozen scorer of its own training pairs, and no gradient may flow
through the weights themselves.

Two weighting scopes exist:
  relevance_doc   weights normalized over the n positives of one document
  relevance_batch weights normalized over every pair in the batch
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

MODES = ("uniform", "relevance_doc", "relevance_batch")


@dataclass
class LossConfig:
    tau: float = 0.1
    mode: str = "relevance_doc"
    weight_floor: float = 1e-6

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not (0 < self.weight_floor <= 1e-3):
            raise ConfigError("weight_floor must lie in (0, 1e-3]")


@dataclass
class ScoredGroup:
    """Raw similarities for one document's pairs.

    pos_scores: (n,) similarity of the query with each positive.
    neg_scores: (n, D) similarities of the query with the D negatives of each
        pair (rows may be identical when negatives are shared).
    weight_scores: (n,) detached similarities used only for weighting.
    """

    pos_scores: np.ndarray
    neg_scores: np.ndarray
    weight_scores: np.ndarray

    def __post_init__(self):
        self.pos_scores = np.asarray(self.pos_scores, dtype=np.float64)
        self.neg_scores = np.asarray(self.neg_scores, dtype=np.float64)
        self.weight_scores = np.asarray(self.weight_scores, dtype=np.float64)
        n = self.pos_scores.shape[0]
        if self.neg_scores.ndim != 2 or self.neg_scores.shape[0] != n:
            raise ConfigError("neg_scores must have shape (n, D)")
        if self.weight_scores.shape != (n,):
            raise ConfigError("weight_scores must have shape (n,)")
        for arr in (self.pos_scores, self.neg_scores, self.weight_scores):
            if arr.size and not np.all(np.isfinite(arr)):
                raise ConfigError("scores must be finite")

    @property
    def n(self) -> int:
        return int(self.pos_scores.shape[0])


def info_nce(pos: float, negs, tau: float) -> float:
    """-log softmax probability of the positive among (positive, negatives).

    Stabilized with the log-sum-exp trick; shift-invariant and >= 0. An empty
    negative list gives exactly 0.
    """
    if tau <= 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    negs = np.asarray(negs, dtype=np.float64)
    if not np.isfinite(pos) or (negs.size and not np.all(np.isfinite(negs))):
        raise ConfigError("scores must be finite")
    logits = np.concatenate(([pos], negs)) / tau
    m = logits.max()
    return float(m + np.log(np.exp(logits - m).sum()) - pos / tau)


def relevance_weights(weight_scores, floor: float) -> np.ndarray:
    """Clamp each score to at least `floor`, then normalize to sum to 1.

    The clamp keeps the weighting well defined when a raw similarity is
    non-positive; if every score clamps, the weights collapse to uniform.
    When no score clamps (the usual regime: similarities stay positive),
    the output is exactly invariant to scaling all scores by a positive
    constant; clamped entries hold onto the constant floor instead.
    """
    scores = np.asarray(weight_scores, dtype=np.float64)
    if scores.ndim != 1 or scores.size < 1:
        raise ConfigError("weight_scores must be a non-empty vector")
    clamped = np.maximum(scores, floor)
    return clamped / clamped.sum()


def relevance_loss(groups: list[ScoredGroup], cfg: LossConfig) -> float:
    """Per-document weighted loss: mean over groups of sum_j w_j * InfoNCE_j.

    Each group's weights are its normalized (clamped) weight_scores, so they
    sum to 1 within the group and n=1 or equal scores reduce this to the
    uniform loss exactly.
    """
    if not groups:
        raise ConfigError("empty batch")
    n = groups[0].n
    for g in groups:
        if g.n != n:
            raise ConfigError(f"mixed group sizes: {g.n} != {n}")
    total = 0.0
    for g in groups:
        w = relevance_weights(g.weight_scores, cfg.weight_floor)
        nce = np.array(
            [info_nce(g.pos_scores[j], g.neg_scores[j], cfg.tau) for j in range(n)]
        )
        total += float(w @ nce)
    return total / len(groups)


def uniform_loss(groups: list[ScoredGroup], cfg: LossConfig) -> float:
    """Plain multi-pair InfoNCE: mean over all m*n pairs."""
    if not groups:
        raise ConfigError("empty batch")
    values = [
        info_nce(g.pos_scores[j], g.neg_scores[j], cfg.tau)
        for g in groups
        for j in range(g.n)
    ]
    return float(np.mean(values))


def batch_relevance_loss(
    pos_scores, neg_scores, weight_scores, cfg: LossConfig
) -> float:
    """Batch-normalized variant: weights sum to 1 across all N pairs.

    pos_scores and weight_scores are (N,), neg_scores (N, D). The result is a
    weighted mean of the per-pair InfoNCE values, comparable in scale to the
    uniform loss.
    """
    pos_scores = np.asarray(pos_scores, dtype=np.float64)
    weight_scores = np.asarray(weight_scores, dtype=np.float64)
    neg_scores = np.asarray(neg_scores, dtype=np.float64)
    if pos_scores.size == 0:
        raise ConfigError("empty batch")
    w = relevance_weights(weight_scores, cfg.weight_floor)
    nce = np.array(
        [info_nce(pos_scores[i], neg_scores[i], cfg.tau) for i in range(pos_scores.size)]
    )
    return float(w @ nce)
