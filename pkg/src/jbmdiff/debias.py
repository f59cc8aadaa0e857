"""Modality-coherence confidence weights for BPR training triples."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .substrate import ag
from .substrate.autograd import Tensor


@dataclass
class ModalityBias:
    gaps: np.ndarray  # (n, |M|) per-modality probability gaps
    mean: np.ndarray  # (n,)
    var: np.ndarray  # (n,), population variance


@dataclass(frozen=True)
class DebiasConfig:
    lam: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        if self.lam <= 0 or self.gamma <= 0:
            raise ValueError("debias temperatures must be positive")


def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def modality_bias(users, pos, neg, user_modal, item_modal) -> ModalityBias:
    """Gap σ(⟨u,i+⟩) − σ(⟨u,i−⟩) per modality; inputs are plain arrays (no gradient)."""
    users, pos, neg = (np.asarray(a) for a in (users, pos, neg))
    gaps = []
    for eu, ei in zip(user_modal, item_modal):
        eu = eu.data if isinstance(eu, Tensor) else np.asarray(eu)
        ei = ei.data if isinstance(ei, Tensor) else np.asarray(ei)
        u = eu[users]
        gaps.append(_sigmoid(np.sum(u * ei[pos], axis=1)) - _sigmoid(np.sum(u * ei[neg], axis=1)))
    gaps = np.stack(gaps, axis=1)
    return ModalityBias(gaps, gaps.mean(axis=1), gaps.var(axis=1))


def confidence_from_stats(mean, var, cfg: DebiasConfig = DebiasConfig()):
    return _sigmoid(cfg.lam * np.asarray(mean)) * np.exp(-cfg.gamma * np.asarray(var))


def confidence(bias: ModalityBias, cfg: DebiasConfig = DebiasConfig()) -> np.ndarray:
    return confidence_from_stats(bias.mean, bias.var, cfg)


def bpr_scores(emb, users, pos, neg, n_users):
    """Gather ŷ(u,i+) and ŷ(u,i−) from stacked user/item embeddings."""
    emb = ag.as_tensor(emb)
    eu = ag.take_rows(emb, np.asarray(users))
    ep = ag.take_rows(emb, np.asarray(pos) + n_users)
    en = ag.take_rows(emb, np.asarray(neg) + n_users)
    return ag.row_sum(eu * ep), ag.row_sum(eu * en)


def weighted_bpr(pos_scores, neg_scores, weights=None):
    """Batch mean of w · −log σ(ŷ+ − ŷ−)."""
    diff = ag.sub(pos_scores, neg_scores)
    per = ag.scale(ag.log_sigmoid(diff), -1.0)
    if weights is not None:
        per = per * np.asarray(weights, dtype=per.data.dtype).reshape(per.shape)
    return ag.mean(per)


def histogram(weights, bins=20) -> list[tuple[str, int]]:
    counts, edges = np.histogram(np.asarray(weights), bins=bins, range=(0.0, 1.0))
    return [(f"{edges[k]:.2f}-{edges[k + 1]:.2f}", int(c)) for k, c in enumerate(counts)]
