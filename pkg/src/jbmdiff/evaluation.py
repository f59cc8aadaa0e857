"""Full-catalog top-K ranking with training-positive masking."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp


class UndefinedMetricError(ValueError):
    pass


@dataclass
class RankingResult:
    users: np.ndarray
    topk: np.ndarray  # (n_users_evaluated, K); -1 pads short lists
    recall: dict = field(default_factory=dict)  # K -> mean
    ndcg: dict = field(default_factory=dict)
    per_user: dict = field(default_factory=dict)  # (metric, K) -> array


def score_users(emb: np.ndarray, users, n_users: int) -> np.ndarray:
    emb = np.asarray(emb)
    return emb[np.asarray(users)] @ emb[n_users:].T


def topk_items(scores: np.ndarray, k: int, mask: sp.csr_matrix | None = None, rows=None) -> np.ndarray:
    """Top-k per row, ties to the smaller item index, masked items excluded."""
    scores = np.array(scores, dtype=np.float64, copy=True)
    if mask is not None:
        sub = mask[rows] if rows is not None else mask
        sub = sub.tocoo()
        scores[sub.row, sub.col] = -np.inf
    n_items = scores.shape[1]
    k_eff = min(k, n_items)
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k_eff]
    valid = np.isfinite(np.take_along_axis(scores, order, axis=1))
    out = np.full((scores.shape[0], k), -1, dtype=np.int64)
    out[:, :k_eff] = np.where(valid, order, -1)
    return out


def _ground_truth(test_pairs, n_users):
    truth = [[] for _ in range(n_users)]
    for u, i in np.asarray(test_pairs).reshape(-1, 2):
        truth[int(u)].append(int(i))
    return truth


def recall_at_k(topk, truth, k: int) -> float:
    """Mean over users with at least one held-out item; ``truth`` is a list of item lists."""
    vals = per_user_recall(topk, truth, k)
    if len(vals) == 0:
        raise UndefinedMetricError("no user has held-out positives")
    return float(np.mean(vals))


def ndcg_at_k(topk, truth, k: int) -> float:
    vals = per_user_ndcg(topk, truth, k)
    if len(vals) == 0:
        raise UndefinedMetricError("no user has held-out positives")
    return float(np.mean(vals))


def per_user_recall(topk, truth, k):
    out = []
    for row, items in zip(topk, truth):
        if not items:
            continue
        hits = len(set(int(x) for x in row[:k] if x >= 0) & set(items))
        out.append(hits / len(set(items)))
    return np.array(out)


def per_user_ndcg(topk, truth, k):
    out = []
    for row, items in zip(topk, truth):
        if not items:
            continue
        rel = set(items)
        dcg = sum(1.0 / math.log2(r + 2) for r, x in enumerate(row[:k]) if x >= 0 and x in rel)
        idcg = sum(1.0 / math.log2(r + 2) for r in range(min(len(rel), k)))
        out.append(dcg / idcg)
    return np.array(out)


def evaluate(emb, n_users: int, test_pairs, train_matrix: sp.csr_matrix, ks=(10, 20),
             batch_size: int = 1024) -> RankingResult:
    """Rank all items for every user with a held-out positive."""
    truth_all = _ground_truth(test_pairs, n_users)
    users = np.array([u for u in range(n_users) if truth_all[u]], dtype=np.int64)
    if len(users) == 0:
        raise UndefinedMetricError("no user has held-out positives")
    kmax = max(ks)
    chunks = []
    for s in range(0, len(users), batch_size):
        batch = users[s : s + batch_size]
        chunks.append(topk_items(score_users(emb, batch, n_users), kmax, train_matrix, batch))
    topk = np.concatenate(chunks)
    truth = [truth_all[u] for u in users]
    res = RankingResult(users, topk)
    for k in ks:
        r, n = per_user_recall(topk, truth, k), per_user_ndcg(topk, truth, k)
        res.per_user[("recall", k)], res.per_user[("ndcg", k)] = r, n
        res.recall[k], res.ndcg[k] = float(r.mean()), float(n.mean())
    return res


def write_metrics_csv(path, result: RankingResult, seed: int) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "K", "value", "seed"])
        for k in sorted(result.recall):
            w.writerow(["recall", k, f"{result.recall[k]:.6f}", seed])
        for k in sorted(result.ndcg):
            w.writerow(["ndcg", k, f"{result.ndcg[k]:.6f}", seed])


def write_per_user_jsonl(path, result: RankingResult) -> None:
    with open(path, "w") as fh:
        for n, u in enumerate(result.users):
            rec = {"user": int(u), "topk": [int(x) for x in result.topk[n]]}
            for (metric, k), vals in result.per_user.items():
                rec[f"{metric}@{k}"] = float(vals[n])
            fh.write(json.dumps(rec) + "\n")
