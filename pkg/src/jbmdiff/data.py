"""Interaction/feature ingestion, splitting and triple sampling."""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .substrate.sparse import csr

log = logging.getLogger(__name__)

MODALITIES = ("visual", "textual")
FEATURE_MAGIC = b"JBMF"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIIIB3x")


class DataFormatError(ValueError):
    pass


class EmptyDatasetError(DataFormatError):
    pass


@dataclass
class ModalityFeatureMatrix:
    modality: str
    matrix: np.ndarray

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        self.matrix = np.ascontiguousarray(self.matrix, dtype=np.float32)
        if self.matrix.ndim != 2 or self.matrix.shape[1] < 1:
            raise ValueError("feature matrix must be 2-d with at least one column")
        if not np.all(np.isfinite(self.matrix)):
            raise ValueError(f"non-finite values in {self.modality} features")

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


@dataclass
class Dataset:
    n_users: int
    n_items: int
    interactions: np.ndarray  # (n, 2) int64 of (user, item)
    user_ids: list = field(default_factory=list)
    item_ids: list = field(default_factory=list)
    features: dict = field(default_factory=dict)

    @property
    def density(self) -> float:
        return len(self.interactions) / (self.n_users * self.n_items)

    def summary(self) -> dict:
        return {
            "users": self.n_users,
            "items": self.n_items,
            "interactions": int(len(self.interactions)),
            "density": self.density,
            "density_pct": f"{100 * self.density:.3f}%",
        }


@dataclass
class Split:
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    seed: int = 0
    ratios: tuple = (0.8, 0.1, 0.1)

    def manifest(self) -> str:
        return (
            f"seed\t{self.seed}\n"
            f"ratios\t{self.ratios[0]:g},{self.ratios[1]:g},{self.ratios[2]:g}\n"
            f"protocol\tper-user random\n"
            f"train\t{len(self.train)}\n"
            f"valid\t{len(self.valid)}\n"
            f"test\t{len(self.test)}\n"
        )


def load_interactions(path) -> Dataset:
    users: dict[str, int] = {}
    items: dict[str, int] = {}
    pairs = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) < 2 or not parts[0] or not parts[1]:
                raise DataFormatError(f"{path}:{lineno}: expected 'user<TAB>item', got {line!r}")
            u = users.setdefault(parts[0], len(users))
            i = items.setdefault(parts[1], len(items))
            if (u, i) not in seen:
                seen.add((u, i))
                pairs.append((u, i))
    if not pairs:
        raise EmptyDatasetError(f"{path}: no interactions")
    return Dataset(
        n_users=len(users),
        n_items=len(items),
        interactions=np.array(pairs, dtype=np.int64),
        user_ids=list(users),
        item_ids=list(items),
    )


def write_features(path, fm: ModalityFeatureMatrix) -> None:
    rows, cols = fm.matrix.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, rows, cols, MODALITIES.index(fm.modality)))
        fh.write(fm.matrix.astype("<f4", copy=False).tobytes(order="C"))


def read_feature_file(path) -> ModalityFeatureMatrix:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DataFormatError(f"{path}: truncated header")
    magic, version, rows, cols, tag = _HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    if tag >= len(MODALITIES):
        raise DataFormatError(f"{path}: bad modality tag {tag}")
    expected = _HEADER.size + 4 * rows * cols
    if len(raw) != expected:
        raise DataFormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    mat = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(rows, cols)
    return ModalityFeatureMatrix(MODALITIES[tag], mat.astype(np.float32))


def load_features(path, modality: str, n_items: int) -> ModalityFeatureMatrix:
    fm = read_feature_file(path)
    if fm.modality != modality:
        raise DataFormatError(f"{path}: modality tag is {fm.modality}, expected {modality}")
    if fm.matrix.shape[0] != n_items:
        raise DataFormatError(
            f"{path}: shape mismatch, expected {n_items} rows, found {fm.matrix.shape[0]}"
        )
    return fm


def split_dataset(dataset: Dataset, ratios=(0.8, 0.1, 0.1), rng=None, seed: int = 0) -> Split:
    """Per-user random partition. Users with fewer than 3 interactions stay in train."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("split ratios must sum to 1")
    rng = rng if rng is not None else np.random.default_rng(seed)
    inter = dataset.interactions
    order = np.argsort(inter[:, 0], kind="stable")
    bounds = np.searchsorted(inter[order, 0], np.arange(dataset.n_users + 1))
    train, valid, test = [], [], []
    for u in range(dataset.n_users):
        rows = order[bounds[u] : bounds[u + 1]]
        n = len(rows)
        if n < 3:
            train.append(rows)
            continue
        rows = rng.permutation(rows)
        n_valid = max(1, int(round(n * ratios[1])))
        n_test = max(1, int(round(n * ratios[2])))
        n_train = n - n_valid - n_test
        train.append(rows[:n_train])
        valid.append(rows[n_train : n_train + n_valid])
        test.append(rows[n_train + n_valid :])

    def gather(chunks):
        if not chunks:
            return np.zeros((0, 2), dtype=np.int64)
        idx = np.sort(np.concatenate(chunks))
        return inter[idx]

    return Split(gather(train), gather(valid), gather(test), seed=seed, ratios=tuple(ratios))


@dataclass
class InteractionMatrix:
    matrix: sp.csr_matrix
    user_degree: np.ndarray
    item_degree: np.ndarray


def build_interaction_matrix(train: np.ndarray, n_users: int, n_items: int) -> InteractionMatrix:
    train = np.asarray(train, dtype=np.int64).reshape(-1, 2)
    o = csr(train[:, 0], train[:, 1], np.ones(len(train)), (n_users, n_items))
    o.data[:] = 1.0
    return InteractionMatrix(
        matrix=o,
        user_degree=np.diff(o.indptr).astype(np.int64),
        item_degree=np.bincount(o.indices, minlength=n_items).astype(np.int64),
    )


class NegativeSampler:
    """Uniform negatives excluding each user's training positives."""

    def __init__(self, train: np.ndarray, n_users: int, n_items: int):
        self.train = np.asarray(train, dtype=np.int64).reshape(-1, 2)
        self.n_items = n_items
        self.keys = np.unique(self.train[:, 0] * n_items + self.train[:, 1])
        deg = np.bincount(self.train[:, 0], minlength=n_users)
        self.saturated = deg >= n_items

    def is_positive(self, users, items) -> np.ndarray:
        keys = np.asarray(users) * self.n_items + np.asarray(items)
        pos = np.searchsorted(self.keys, keys)
        pos = np.minimum(pos, len(self.keys) - 1)
        return self.keys[pos] == keys if len(self.keys) else np.zeros(len(keys), bool)

    def negatives(self, users, rng) -> np.ndarray:
        users = np.asarray(users)
        neg = rng.integers(self.n_items, size=len(users))
        bad = self.is_positive(users, neg)
        while bad.any():
            neg[bad] = rng.integers(self.n_items, size=int(bad.sum()))
            bad[bad] = self.is_positive(users[bad], neg[bad])
        return neg

    def triples_for(self, positives: np.ndarray, rng) -> np.ndarray:
        """Attach one negative to each (u, i+) row; saturated users are dropped."""
        positives = np.asarray(positives).reshape(-1, 2)
        keep = ~self.saturated[positives[:, 0]]
        if not keep.all():
            log.warning("skipping %d pairs from users who interacted with every item", int((~keep).sum()))
            positives = positives[keep]
        neg = self.negatives(positives[:, 0], rng)
        return np.column_stack([positives, neg]).astype(np.int64)


def sample_triples(train: np.ndarray, batch_size: int, rng, n_users=None, n_items=None,
                   sampler: NegativeSampler | None = None) -> np.ndarray:
    """Draw ``batch_size`` (u, i+, i-) rows; (u, i+) uniform over training pairs."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    train = np.asarray(train, dtype=np.int64).reshape(-1, 2)
    if sampler is None:
        n_users = n_users if n_users is not None else int(train[:, 0].max()) + 1
        n_items = n_items if n_items is not None else int(train[:, 1].max()) + 1
        sampler = NegativeSampler(train, n_users, n_items)
    usable = train[~sampler.saturated[train[:, 0]]]
    if len(usable) < len(train):
        log.warning("skipping users who interacted with every item")
    if len(usable) == 0:
        return np.zeros((0, 3), dtype=np.int64)
    pos = usable[rng.integers(len(usable), size=batch_size)]
    return np.column_stack([pos, sampler.negatives(pos[:, 0], rng)]).astype(np.int64)


def pairs_to_set(pairs) -> set:
    return {(int(u), int(i)) for u, i in np.asarray(pairs).reshape(-1, 2)}
