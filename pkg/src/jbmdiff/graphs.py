"""Collaborative (user-item) and semantic (item-item kNN) propagation views."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .substrate import ag
from .substrate.sparse import bipartite_normalize, csr, sym_normalize

log = logging.getLogger(__name__)


@dataclass
class CollabGraph:
    adjacency: sp.csr_matrix  # normalized, (|U|+|I|)^2
    n_users: int
    n_items: int
    layers: int = 2


@dataclass
class SemanticGraph:
    modality: str
    knn: sp.csr_matrix  # kept cosine weights, at most K per row
    adjacency: sp.csr_matrix  # value-degree normalized
    k: int


def build_collab_graph(o: sp.csr_matrix, layers: int = 2) -> CollabGraph:
    n_users, n_items = o.shape
    o = sp.csr_matrix(o, dtype=np.float32)
    a = sp.bmat([[sp.csr_matrix((n_users, n_users)), o],
                 [o.T, sp.csr_matrix((n_items, n_items))]], format="csr").astype(np.float32)
    return CollabGraph(sym_normalize(a, degree="count"), n_users, n_items, layers)


def propagate_collab(graph: CollabGraph, e0):
    """Mean of layer outputs E^(0..L), E^(l+1) = Â E^(l)."""
    e0 = ag.as_tensor(e0)
    if e0.shape[0] != graph.n_users + graph.n_items:
        raise ValueError(
            f"expected {graph.n_users + graph.n_items} embedding rows, got {e0.shape[0]}"
        )
    layer = e0
    acc = e0
    for _ in range(graph.layers):
        layer = ag.spmm(graph.adjacency, layer)
        acc = ag.add(acc, layer)
    return ag.scale(acc, 1.0 / (graph.layers + 1))


def cosine_similarity(features: np.ndarray) -> np.ndarray:
    x = np.asarray(features, dtype=np.float32)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    x = np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)
    return x @ x.T


def topk_neighbors(sim_row: np.ndarray, k: int, self_index: int) -> np.ndarray:
    """Indices of the k largest entries excluding ``self_index``; ties to smaller index."""
    cand = np.delete(np.arange(len(sim_row)), self_index)
    vals = sim_row[cand]
    order = np.lexsort((cand, -vals))
    return cand[order[:k]]


def knn_rows(features: np.ndarray, k: int, block: int = 2048):
    """Per-row kept (neighbor, weight) lists. Zero-feature rows keep nothing."""
    x = np.asarray(features, dtype=np.float32)
    n = x.shape[0]
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    xn = np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)
    zero = norms.ravel() == 0
    rows, cols, vals = [], [], []
    for start in range(0, n, block):
        stop = min(start + block, n)
        sim = xn[start:stop] @ xn.T
        sim[np.arange(stop - start), np.arange(start, stop)] = -np.inf
        sim[:, zero] = -np.inf
        # stable descending order by value; stable sort keeps smaller index first on ties
        part = np.argsort(-sim, axis=1, kind="stable")[:, :k]
        for r in range(stop - start):
            a = start + r
            if zero[a]:
                continue
            nb = part[r][np.isfinite(sim[r, part[r]])]
            rows.append(np.full(len(nb), a))
            cols.append(nb)
            vals.append(sim[r, nb])
    if not rows:
        return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0, np.float32)
    return np.concatenate(rows), np.concatenate(cols), np.concatenate(vals).astype(np.float32)


def build_semantic_graph(features, k: int, modality: str | None = None) -> SemanticGraph:
    """Cosine kNN item graph normalized by value-sum degrees.

    Each row keeps its K most similar items with the similarity as weight; the
    graph is left directed. Negative similarities that reach top-K stay in
    ``knn`` but are clipped to zero for the propagation matrix.
    """
    matrix = getattr(features, "matrix", features)
    modality = modality or getattr(features, "modality", "unknown")
    n = matrix.shape[0]
    if k < 1:
        raise ValueError("K must be >= 1")
    if k >= n:
        log.warning("K=%d >= item count %d; clamping to %d", k, n, n - 1)
        k = n - 1
    r, c, v = knn_rows(matrix, k)
    knn = csr(r, c, v, (n, n))
    pos = knn.copy()
    pos.data = np.maximum(pos.data, 0)
    pos.eliminate_zeros()
    return SemanticGraph(modality, knn, sym_normalize(pos, degree="value"), k)


def propagate_semantic(graph: SemanticGraph, item_embeddings):
    return ag.spmm(graph.adjacency, item_embeddings)


def aggregate_user_modal(item_modal, o_norm: sp.csr_matrix):
    """Ê_u^m[u] = Σ_{i∈N_u} Ê_i^m[i] / √(|N_u||N_i|); ``o_norm`` from ``user_item_norm``."""
    return ag.spmm(o_norm, item_modal)


def user_item_norm(o: sp.csr_matrix) -> sp.csr_matrix:
    return bipartite_normalize(sp.csr_matrix(o, dtype=np.float32))


def save_semantic_graph(path, graph: SemanticGraph) -> None:
    coo = graph.knn.tocoo()
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# modality={graph.modality} k={graph.k} n={graph.knn.shape[0]}\n")
        for a, b, w in zip(coo.row, coo.col, coo.data):
            fh.write(f"{a}\t{b}\t{w:.9g}\n")


def load_semantic_graph(path, k: int, n_items: int) -> sp.csr_matrix:
    """Load a triplet file written by ``save_semantic_graph``, enforcing the K bound."""
    rows, cols, vals = [], [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("#") or not line.strip():
                continue
            a, b, w = line.split("\t")
            rows.append(int(a))
            cols.append(int(b))
            vals.append(float(w))
    m = csr(rows, cols, vals, (n_items, n_items))
    counts = np.diff(m.indptr)
    if counts.size and counts.max() > k:
        raise ValueError(f"row with {counts.max()} neighbors exceeds bound for K={k}")
    return m
