"""Behavior-gated fusion of modality views and cross-view contrastive alignment."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .substrate import ag
from .substrate.autograd import Tensor
from .substrate.optim import Parameter, xavier_init

log = logging.getLogger(__name__)


class FusionParams:
    def __init__(self, dim: int, rng, prefix: str = "gate"):
        self.weight = Parameter(xavier_init(dim, dim, rng), f"{prefix}.weight")
        self.bias = Parameter(np.zeros((1, dim), np.float32), f"{prefix}.bias")

    def parameters(self):
        return [self.weight, self.bias]


@dataclass
class FusedEmbeddings:
    semantic: Tensor  # E_s
    final: Tensor  # E = E_s + Ê_c


def gated_fuse(modal, collab, params: FusionParams):
    """E_s = mean_m(Ê_m ⊙ σ(Ê_c Wᵀ + b))."""
    collab = ag.as_tensor(collab)
    modal = [ag.as_tensor(m) for m in modal]
    if not modal:
        raise ValueError("need at least one modality view")
    for m in modal:
        if m.shape != collab.shape:
            raise ValueError(f"modality view shape {m.shape} != collaborative shape {collab.shape}")
    gate = ag.sigmoid(collab @ ag.transpose(params.weight) + params.bias)
    acc = modal[0] * gate
    for m in modal[1:]:
        acc = acc + m * gate
    return ag.scale(acc, 1.0 / len(modal))


def final_embed(semantic, collab) -> FusedEmbeddings:
    semantic, collab = ag.as_tensor(semantic), ag.as_tensor(collab)
    if semantic.shape != collab.shape:
        raise ValueError(f"shape mismatch {semantic.shape} vs {collab.shape}")
    return FusedEmbeddings(semantic, ag.add(semantic, collab))


def _infonce(anchor, other, tau, normalize):
    if normalize:
        anchor, other = ag.row_normalize(anchor), ag.row_normalize(other)
    logits = anchor @ ag.transpose(other)
    if tau != 1.0:
        logits = ag.scale(logits, 1.0 / tau)
    return ag.cross_entropy_diag(logits)


def cross_view_loss(semantic, collab, tau=0.2, users=None, items=None, n_users=None,
                    normalize=True, cap=4096):
    """User-side plus item-side InfoNCE between semantic and collaborative rows.

    ``users``/``items`` are index batches; item indices are offset by ``n_users``
    into the stacked embedding matrices. ``normalize=False`` with ``tau=1``
    gives the unnormalized dot-product form.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    semantic, collab = ag.as_tensor(semantic), ag.as_tensor(collab)
    terms = []
    for idx, offset in ((users, 0), (items, n_users or 0)):
        if idx is None:
            continue
        idx = np.unique(np.asarray(idx))[:cap] + offset
        if len(idx) < 2:
            log.warning("contrastive batch of size %d has no negatives; term is 0", len(idx))
            continue
        terms.append(_infonce(ag.take_rows(semantic, idx), ag.take_rows(collab, idx), tau, normalize))
    if not terms:
        return Tensor(np.zeros((), dtype=semantic.data.dtype))
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out
