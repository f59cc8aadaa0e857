"""Modality and feedback corruption protocols plus comparative noise grids."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass

import numpy as np

from .data import MODALITIES, Dataset, ModalityFeatureMatrix, Split
from .evaluation import evaluate
from .model import build_model
from .substrate.optim import make_rng
from .trainer import SEED_INIT, TrainConfig, TrainState, fit

log = logging.getLogger(__name__)

KINDS = ("modality-replace", "feedback-add", "feedback-remove")
MAX_RATIO = 0.20
SEED_CORRUPT = 7
RESULT_FIELDS = ["model", "corruption_kind", "modality", "ratio", "seed", "recall@20", "ndcg@20"]


class CorruptionError(ValueError):
    pass


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    ratio: float
    modality: str | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise CorruptionError(f"unknown corruption kind {self.kind!r}")
        if not 0.0 <= self.ratio <= MAX_RATIO + 1e-12:
            raise CorruptionError(f"corruption ratio {self.ratio} rejected: limited to 20%")
        if self.kind == "modality-replace" and self.modality not in MODALITIES:
            raise CorruptionError("modality-replace needs modality 'visual' or 'textual'")


def corrupt_modality(features, ratio: float, rng):
    """Replace ⌊ratio·|I|⌋ distinct items' rows with the row of a random other item."""
    fm = features if isinstance(features, ModalityFeatureMatrix) else None
    mat = np.asarray(fm.matrix if fm is not None else features)
    n = mat.shape[0]
    if n < 2:
        raise CorruptionError("need at least two items")
    count = int(np.floor(ratio * n + 1e-9))
    targets = np.sort(rng.choice(n, size=count, replace=False))
    sources = rng.integers(n - 1, size=count)
    sources = sources + (sources >= targets)  # uniform over j != i
    out = mat.copy()
    out[targets] = mat[sources]
    record = [{"item": int(i), "source": int(j)} for i, j in zip(targets, sources)]
    if fm is not None:
        out = ModalityFeatureMatrix(fm.modality, out)
    return out, record


def corrupt_feedback_add(train, ratio: float, rng, n_users: int, n_items: int, exclude=()):
    """Add ⌊ratio·|train|⌋ pairs absent from train and every array in ``exclude``."""
    train = np.asarray(train, dtype=np.int64).reshape(-1, 2)
    count = int(np.floor(ratio * len(train) + 1e-9))
    occupied = [train] + [np.asarray(e, dtype=np.int64).reshape(-1, 2) for e in exclude]
    taken = np.unique(np.concatenate([o[:, 0] * n_items + o[:, 1] for o in occupied]))
    free = n_users * n_items - len(taken)
    if count > free:
        log.warning("only %d free slots for %d requested additions; clamping", free, count)
        count = free
    added = np.zeros(0, dtype=np.int64)
    if count:
        if free <= 4 * count:
            pool = np.setdiff1d(np.arange(n_users * n_items), taken, assume_unique=True)
            added = np.sort(rng.choice(pool, size=count, replace=False))
        else:
            chosen = set()
            while len(chosen) < count:
                draw = rng.integers(n_users * n_items, size=2 * (count - len(chosen)))
                draw = draw[~np.isin(draw, taken)]
                for key in draw:
                    if len(chosen) == count:
                        break
                    chosen.add(int(key))
            added = np.sort(np.fromiter(chosen, dtype=np.int64))
    new_pairs = np.column_stack([added // n_items, added % n_items])
    out = np.concatenate([train, new_pairs])
    record = [{"op": "add", "user": int(u), "item": int(i)} for u, i in new_pairs]
    return out, record


def corrupt_feedback_remove(train, ratio: float, rng):
    train = np.asarray(train, dtype=np.int64).reshape(-1, 2)
    count = int(np.floor(ratio * len(train) + 1e-9))
    drop = np.sort(rng.choice(len(train), size=count, replace=False))
    keep = np.ones(len(train), dtype=bool)
    keep[drop] = False
    record = [{"op": "remove", "user": int(u), "item": int(i)} for u, i in train[drop]]
    return train[keep], record


def apply_corruption(dataset: Dataset, split: Split, spec: CorruptionSpec):
    """Return (features, train, log) after corruption; val/test are never touched."""
    rng = make_rng(spec.seed, SEED_CORRUPT)
    features = dict(dataset.features)
    train = split.train
    record = []
    if spec.kind == "modality-replace":
        features[spec.modality], record = corrupt_modality(features[spec.modality], spec.ratio, rng)
    elif spec.kind == "feedback-add":
        train, record = corrupt_feedback_add(train, spec.ratio, rng, dataset.n_users, dataset.n_items,
                                             exclude=(split.valid, split.test))
    else:
        train, record = corrupt_feedback_remove(train, spec.ratio, rng)
    return features, train, record


def run_cell(dataset: Dataset, split: Split, model_name: str, spec: CorruptionSpec | None,
             config: TrainConfig):
    features, train = dataset.features, split.train
    record = []
    if spec is not None:
        features, train, record = apply_corruption(dataset, split, spec)
    model = build_model(model_name, dataset.n_users, dataset.n_items, train, features, config,
                        make_rng(config.seed, SEED_INIT))
    state = TrainState(model, dataset.n_users, dataset.n_items, train, config)
    ckpt = fit(state, split.valid)
    model.load_state(ckpt.tensors)
    res = evaluate(model.embeddings(), dataset.n_users, split.test, state.train_matrix,
                   ks=(20,), batch_size=config.eval_batch)
    return res, record


def run_noise_grid(dataset: Dataset, split: Split, models, specs, config: TrainConfig,
                   out_csv=None, log_path=None) -> list[dict]:
    for m in models:
        if m not in ("jbm-diff", "lightgcn", "bpr-mf"):
            raise ValueError(f"unknown model {m!r}")
    rows = []
    log_fh = open(log_path, "w") if log_path else None
    try:
        for spec in specs:
            for model_name in models:
                res, record = run_cell(dataset, split, model_name, spec, config)
                rows.append({
                    "model": model_name,
                    "corruption_kind": spec.kind,
                    "modality": spec.modality or "",
                    "ratio": spec.ratio,
                    "seed": spec.seed,
                    "recall@20": f"{res.recall[20]:.6f}",
                    "ndcg@20": f"{res.ndcg[20]:.6f}",
                })
                if log_fh is not None:
                    for entry in record:
                        log_fh.write(json.dumps({"model": model_name, "kind": spec.kind,
                                                 "ratio": spec.ratio, **entry}) + "\n")
    finally:
        if log_fh is not None:
            log_fh.close()
    if out_csv is not None:
        with open(out_csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, RESULT_FIELDS)
            w.writeheader()
            w.writerows(rows)
    return rows
