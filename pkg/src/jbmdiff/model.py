"""JBM-Diff and the two in-repo reference models (LightGCN, BPR-MF).

All three share one surface used by the trainer: ``parameters()``,
``start_epoch(rng)``, ``batch_losses(triples, rng)`` and ``embeddings()``.
"""
from __future__ import annotations

import numpy as np

from . import diffusion as dm
from .data import MODALITIES, build_interaction_matrix
from .debias import DebiasConfig, bpr_scores, confidence, modality_bias, weighted_bpr
from .fusion import FusionParams, cross_view_loss, final_embed, gated_fuse
from .graphs import (
    aggregate_user_modal,
    build_collab_graph,
    build_semantic_graph,
    propagate_collab,
    propagate_semantic,
    user_item_norm,
)
from .substrate import ag
from .substrate.autograd import Tensor
from .substrate.optim import Parameter, xavier_init


class BPRMF:
    name = "bpr-mf"

    def __init__(self, n_users, n_items, train, config, rng):
        self.n_users, self.n_items = n_users, n_items
        self.config = config
        self.embedding = Parameter(xavier_init(n_users + n_items, config.embed_dim, rng), "embedding")

    def parameters(self) -> list[Parameter]:
        return [self.embedding]

    def start_epoch(self, rng):
        pass

    def propagate(self):
        return self.embedding

    def batch_losses(self, triples, rng):
        pos, neg = bpr_scores(self.propagate(), triples[:, 0], triples[:, 1], triples[:, 2], self.n_users)
        return {"bpr": weighted_bpr(pos, neg)}, np.ones(len(triples))

    def embeddings(self) -> np.ndarray:
        return np.asarray(self.propagate().data)

    def state(self) -> dict:
        return {p.name: p.data for p in self.parameters()}

    def load_state(self, tensors: dict):
        for p in self.parameters():
            p.data = np.array(tensors[p.name], dtype=np.float32).reshape(p.data.shape)


class LightGCN(BPRMF):
    name = "lightgcn"

    def __init__(self, n_users, n_items, train, config, rng):
        super().__init__(n_users, n_items, train, config, rng)
        o = build_interaction_matrix(train, n_users, n_items).matrix
        self.graph = build_collab_graph(o, config.layers)

    def propagate(self):
        return propagate_collab(self.graph, self.embedding)


class JBMDiff:
    name = "jbm-diff"

    def __init__(self, n_users, n_items, train, features: dict, config, rng,
                 graph_features: dict | None = None):
        self.n_users, self.n_items = n_users, n_items
        self.config = config
        self.modalities = [m for m in MODALITIES if m in features]
        if not self.modalities:
            raise ValueError("JBM-Diff needs at least one modality")
        self.raw = {m: np.asarray(getattr(features[m], "matrix", features[m]), np.float32)
                    for m in self.modalities}
        d = config.embed_dim
        inter = build_interaction_matrix(train, n_users, n_items)
        self.collab_graph = build_collab_graph(inter.matrix, config.layers)
        self.o_norm = user_item_norm(inter.matrix)
        # graph structure comes from the raw features and stays fixed
        gsrc = graph_features or self.raw
        self.semantic = {
            m: build_semantic_graph(getattr(gsrc[m], "matrix", gsrc[m]), config.K, m)
            for m in self.modalities
        }
        self.schedule = dm.build_schedule(config.T, config.beta_start, config.beta_end)
        self.debias = DebiasConfig(config.lam, config.gamma)

        self.embedding = Parameter(xavier_init(n_users + n_items, d, rng), "embedding")
        self.proj = {m: Parameter(xavier_init(self.raw[m].shape[1], d, rng), f"proj.{m}")
                     for m in self.modalities}
        self.gate = FusionParams(d, rng)
        self.denoisers = {m: dm.Denoiser(self.raw[m].shape[1], d, config.T, rng, f"denoiser.{m}")
                          for m in self.modalities}
        self.denoised = dict(self.raw)

    # -- parameters / state -------------------------------------------------
    def parameters(self) -> list[Parameter]:
        params = [self.embedding]
        params += [self.proj[m] for m in self.modalities]
        params += self.gate.parameters()
        for m in self.modalities:
            params += self.denoisers[m].parameters()
        return params

    def state(self) -> dict:
        out = {p.name: p.data for p in self.parameters()}
        for m in self.modalities:
            out[f"cache.denoised.{m}"] = self.denoised[m]
        return out

    def load_state(self, tensors: dict):
        for p in self.parameters():
            p.data = np.array(tensors[p.name], dtype=np.float32).reshape(p.data.shape)
        for m in self.modalities:
            key = f"cache.denoised.{m}"
            if key in tensors:
                self.denoised[m] = np.array(tensors[key], dtype=np.float32).reshape(self.raw[m].shape)

    # -- per-epoch work ------------------------------------------------------
    def collab_items(self) -> np.ndarray:
        ec = propagate_collab(self.collab_graph, Tensor(self.embedding.data)).data
        return ec[self.n_users:]

    def start_epoch(self, rng):
        """Refresh the cached denoised features from the current collaborative view."""
        if self.config.no_mmd:
            self.denoised = dict(self.raw)
            return
        e_c = self.collab_items()
        for m in self.modalities:
            x_hat = dm.reverse_denoise(
                self.raw[m], self.schedule, e_c, self.denoisers[m], mode="deterministic",
                rng=rng, parameterization=self.config.reverse_mean,
            )
            self.denoised[m] = np.asarray(dm.blend(self.raw[m], x_hat, self.config.omega), np.float32)

    # -- forward -------------------------------------------------------------
    def forward(self):
        collab = propagate_collab(self.collab_graph, self.embedding)
        users, items, stacked = {}, {}, []
        for m in self.modalities:
            node = ag.matmul(self.denoised[m], self.proj[m])
            items[m] = propagate_semantic(self.semantic[m], node)
            users[m] = aggregate_user_modal(items[m], self.o_norm)
            stacked.append(ag.concat_rows([users[m], items[m]]))
        if self.config.no_ff:
            semantic = ag.scale(_sum(stacked), 1.0 / len(stacked))
            final = ag.scale(_sum([collab] + stacked), 1.0 / (len(stacked) + 1))
        else:
            semantic = gated_fuse(stacked, collab, self.gate)
            final = final_embed(semantic, collab).final
        return {"collab": collab, "user_modal": users, "item_modal": items,
                "semantic": semantic, "final": final}

    def batch_losses(self, triples, rng, fwd=None, weights=None, cond=None):
        """Per-component losses for one triple batch, plus the BPR weights used.

        ``weights`` and ``cond`` pin the two stop-gradient inputs (confidence
        weights and the item-block diffusion conditioning) to given values.
        """
        cfg = self.config
        fwd = fwd or self.forward()
        u, ip, ineg = triples[:, 0], triples[:, 1], triples[:, 2]
        if weights is not None:
            w = np.asarray(weights)
        elif cfg.no_bd:
            w = np.ones(len(triples))
        else:
            bias = modality_bias(u, ip, ineg,
                                 [fwd["user_modal"][m].data for m in self.modalities],
                                 [fwd["item_modal"][m].data for m in self.modalities])
            w = confidence(bias, self.debias)
        pos, neg = bpr_scores(fwd["final"], u, ip, ineg, self.n_users)
        losses = {"bpr": weighted_bpr(pos, neg, w)}
        losses["cl"] = cross_view_loss(
            fwd["semantic"], fwd["collab"], cfg.tau_cl, users=u,
            items=np.concatenate([ip, ineg]), n_users=self.n_users,
            normalize=not cfg.unnormalized_cl, cap=cfg.item_batch,
        )
        if not cfg.no_mmd:
            n = min(cfg.item_batch, self.n_items)
            idx = np.sort(rng.choice(self.n_items, size=n, replace=False))
            if cond is None:
                cond = fwd["collab"].data[self.n_users:]
            e_c = np.asarray(cond)[idx]  # conditioning is a constant here
            blended = {}
            for m in self.modalities:
                x0 = self.raw[m][idx]
                losses[f"dm.{m}"], pred = dm.diffusion_loss(
                    x0, self.schedule, e_c, self.denoisers[m], rng, return_prediction=True)
                blended[m] = dm.blend(x0, pred, cfg.omega) if cfg.omega > 0 else pred
            if "textual" in blended and "visual" in blended:
                losses["mm"] = dm.modality_align_loss(
                    blended["textual"], blended["visual"], cfg.tau,
                    self.proj["textual"], self.proj["visual"])
        return losses, w

    def embeddings(self) -> np.ndarray:
        return np.asarray(self.forward()["final"].data)


def _sum(parts):
    out = parts[0]
    for p in parts[1:]:
        out = ag.add(out, p)
    return out


MODELS = {"jbm-diff": JBMDiff, "lightgcn": LightGCN, "bpr-mf": BPRMF}


def build_model(name, n_users, n_items, train, features, config, rng, graph_features=None):
    if name == "jbm-diff":
        return JBMDiff(n_users, n_items, train, features, config, rng, graph_features)
    if name not in MODELS:
        raise ValueError(f"unknown model {name!r}")
    return MODELS[name](n_users, n_items, train, config, rng)
