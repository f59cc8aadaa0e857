"""Joint objective, epoch loop, early stopping, checkpoints and grid search."""
from __future__ import annotations

import csv
import dataclasses
import itertools
import json
import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import NegativeSampler, build_interaction_matrix
from .evaluation import evaluate
from .substrate.autograd import Tensor
from .substrate.optim import TrainingAborted, adam_step, make_rng

log = logging.getLogger(__name__)

# grids searched in the original experiments; values outside only warn
REFERENCE_GRIDS = {
    "T": (5, 10, 15, 20),
    "K": (5, 10, 15, 20),
    "omega": (0.1, 0.3, 0.5, 0.7, 0.9),
    "lambda_dm": (0.0001, 0.0005, 0.001, 0.005, 0.1, 0.5),
    "lambda_mm": (0.0001, 0.0005, 0.001, 0.005, 0.1, 0.5),
    "lambda_cl": (0.0001, 0.0005, 0.001, 0.005, 0.1, 0.5),
    "lam": (0.1, 0.2, 0.5, 1.0, 2.0, 3.0),
    "gamma": (0.1, 0.2, 0.5, 1.0, 2.0, 3.0),
}

# sub-stream offsets under the single run seed
SEED_INIT, SEED_TRAIN, SEED_DENOISE = 1, 2, 3


class ConfigError(ValueError):
    pass


class TrainingDiverged(TrainingAborted):
    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    batch_size: int = 512
    eval_batch: int = 1024
    embed_dim: int = 64
    layers: int = 2
    lr: float = 0.001
    max_epochs: int = 1000
    patience: int = 10
    T: int = 5
    K: int = 5
    omega: float = 0.3
    tau: float = 0.2
    tau_cl: float = 0.2
    lambda_dm: float = 0.005
    lambda_mm: float = 0.001
    lambda_cl: float = 0.01
    lam: float = 1.0
    gamma: float = 1.0
    seed: int = 2024
    no_mmd: bool = False
    no_ff: bool = False
    no_bd: bool = False
    # extensions beyond the core field set
    beta_start: float = 1e-4
    beta_end: float = 0.02
    item_batch: int = 4096
    reverse_mean: str = "x0"
    unnormalized_cl: bool = False

    def __post_init__(self):
        for name in ("batch_size", "eval_batch", "embed_dim", "max_epochs", "T", "K", "item_batch"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("lr", "tau", "tau_cl", "lam", "gamma"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("lambda_dm", "lambda_mm", "lambda_cl", "layers", "patience"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if not 0.0 <= self.omega <= 1.0:
            raise ConfigError("omega must lie in [0, 1]")
        if self.reverse_mean not in ("x0", "eps"):
            raise ConfigError("reverse_mean must be 'x0' or 'eps'")

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**raw)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def total_loss(losses: dict, config: TrainConfig) -> Tensor:
    """L = L_bpr + λ_dm Σ_m L_dm^m + λ_mm L_mm + λ_cl L_cl; ablations drop their terms."""
    for name, value in losses.items():
        if not np.all(np.isfinite(value.data)):
            raise TrainingAborted(f"non-finite loss component {name!r}")
    total = losses["bpr"]
    for name, value in losses.items():
        if name.startswith("dm."):
            if not config.no_mmd and config.lambda_dm:
                total = total + value * config.lambda_dm
        elif name == "mm":
            if not config.no_mmd and config.lambda_mm:
                total = total + value * config.lambda_mm
        elif name == "cl":
            if config.lambda_cl:
                total = total + value * config.lambda_cl
    return total


def component_values(losses: dict) -> dict:
    out = {"L_bpr": 0.0, "L_dm": 0.0, "L_mm": 0.0, "L_cl": 0.0}
    for name, value in losses.items():
        v = float(value.data)
        if name == "bpr":
            out["L_bpr"] += v
        elif name.startswith("dm."):
            out["L_dm"] += v
        elif name == "mm":
            out["L_mm"] += v
        elif name == "cl":
            out["L_cl"] += v
    return out


@dataclass
class TrainState:
    model: object
    n_users: int
    n_items: int
    train: np.ndarray
    config: TrainConfig
    sampler: NegativeSampler = None
    train_matrix: object = None

    def __post_init__(self):
        self.train = np.asarray(self.train, dtype=np.int64).reshape(-1, 2)
        self.sampler = NegativeSampler(self.train, self.n_users, self.n_items)
        self.train_matrix = build_interaction_matrix(self.train, self.n_users, self.n_items).matrix


def run_epoch(state: TrainState, rng, denoise_rng=None, on_batch=None) -> dict:
    """Refresh denoised features, then one shuffled pass of BPR triples with Adam updates."""
    cfg = state.config
    start = time.perf_counter()
    report = {"L_bpr": 0.0, "L_dm": 0.0, "L_mm": 0.0, "L_cl": 0.0, "batches": 0, "weights": []}
    if len(state.train) == 0:
        report["seconds"] = time.perf_counter() - start
        return report
    state.model.start_epoch(denoise_rng if denoise_rng is not None else rng)
    params = state.model.parameters()
    order = rng.permutation(len(state.train))
    triples = state.sampler.triples_for(state.train[order], rng)
    for s in range(0, len(triples), cfg.batch_size):
        batch = triples[s : s + cfg.batch_size]
        for p in params:
            p.zero_grad()
        losses, w = state.model.batch_losses(batch, rng)
        loss = total_loss(losses, cfg)
        loss.backward()
        for p in params:
            adam_step(p, cfg.lr)
        vals = component_values(losses)
        for k, v in vals.items():
            report[k] += v
        report["batches"] += 1
        report["weights"].append(np.asarray(w, dtype=np.float64))
        if on_batch is not None:
            on_batch(report["batches"], vals, w)
    for k in ("L_bpr", "L_dm", "L_mm", "L_cl"):
        report[k] /= report["batches"]
    report["weights"] = np.concatenate(report["weights"])
    report["seconds"] = time.perf_counter() - start
    return report


@dataclass
class Checkpoint:
    tensors: dict
    config: TrainConfig
    best_metric: float
    best_epoch: int
    log: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)


CKPT_MAGIC = b"JBMC"
CKPT_VERSION = 1


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Tensors go in the JBMC container; config and metadata in ``<path>.json``."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(ckpt.tensors)))
        for name, arr in ckpt.tensors.items():
            arr = np.asarray(arr, dtype="<f4")
            if arr.ndim == 1:
                arr = arr[None, :]
            enc = name.encode("utf-8")
            fh.write(struct.pack("<I", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
            fh.write(np.ascontiguousarray(arr).tobytes())
    meta = {
        "config": ckpt.config.to_dict(),
        "best_metric": ckpt.best_metric,
        "best_epoch": ckpt.best_epoch,
        **ckpt.meta,
    }
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off : off + n].decode("utf-8")
        off += n
        rows, cols = struct.unpack_from("<II", raw, off)
        off += 8
        size = 4 * rows * cols
        if off + size > len(raw):
            raise ValueError(f"{path}: truncated tensor {name!r}")
        tensors[name] = np.frombuffer(raw, dtype="<f4", count=rows * cols, offset=off).reshape(rows, cols).astype(np.float32)
        off += size
    meta_path = Path(str(path) + ".json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    config = TrainConfig.from_dict(meta.pop("config", {}))
    return Checkpoint(tensors, config, meta.pop("best_metric", float("nan")),
                      meta.pop("best_epoch", -1), meta=meta)


def validation_recall(state: TrainState, valid, k=20) -> float:
    emb = state.model.embeddings()
    res = evaluate(emb, state.n_users, valid, state.train_matrix, ks=(k,),
                   batch_size=state.config.eval_batch)
    return res.recall[k]


def fit(state: TrainState, valid, epoch_log=None, on_epoch=None) -> Checkpoint:
    """Train with early stopping on validation Recall@20; returns the best checkpoint."""
    cfg = state.config
    rng = make_rng(cfg.seed, SEED_TRAIN)
    denoise_rng = make_rng(cfg.seed, SEED_DENOISE)
    best = Checkpoint(_snapshot(state.model), cfg, -np.inf, 0)
    bad = 0
    rows = []
    writer = None
    if epoch_log is not None:
        fh = open(epoch_log, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["epoch", "L_bpr", "L_dm", "L_mm", "L_cl", "val_recall@20", "seconds"])
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            try:
                rep = run_epoch(state, rng, denoise_rng)
            except TrainingAborted as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}", best) from exc
            metric = validation_recall(state, valid)
            row = [epoch, rep["L_bpr"], rep["L_dm"], rep["L_mm"], rep["L_cl"], metric, rep["seconds"]]
            rows.append(row)
            if writer is not None:
                writer.writerow([epoch] + [f"{v:.6f}" for v in row[1:6]] + [f"{row[6]:.2f}"])
                fh.flush()
            log.info("epoch %d  L_bpr=%.5f  val R@20=%.5f", epoch, rep["L_bpr"], metric)
            if metric > best.best_metric:
                best = Checkpoint(_snapshot(state.model), cfg, metric, epoch)
                bad = 0
            else:
                bad += 1
            if on_epoch is not None:
                on_epoch(epoch, rep, metric)
            if bad >= max(cfg.patience, 1):
                break
    finally:
        if writer is not None:
            fh.close()
    best.log = rows
    return best


def _snapshot(model) -> dict:
    return {k: np.array(v, dtype=np.float32, copy=True) for k, v in model.state().items()}


def grid_combos(grid: dict):
    keys = sorted(grid)
    for values in itertools.product(*(grid[k] for k in keys)):
        yield dict(zip(keys, values))


def check_grid(grid: dict) -> None:
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    for key, values in grid.items():
        if key not in known:
            raise ConfigError(f"unknown grid key {key!r}")
        if not isinstance(values, (list, tuple)) or not values:
            raise ConfigError(f"grid entry {key!r} needs a nonempty list")
        ref = REFERENCE_GRIDS.get(key)
        if ref is not None and any(v not in ref for v in values):
            log.warning("grid values for %s fall outside %s", key, ref)


def grid_search(make_state, valid, test, base: TrainConfig, grid: dict, out_csv=None) -> list[dict]:
    """One fit per combination. ``make_state(config)`` builds a fresh TrainState."""
    check_grid(grid)
    results = []
    for combo in grid_combos(grid):
        cfg = base.replace(**combo)
        state = make_state(cfg)
        ckpt = fit(state, valid)
        state.model.load_state(ckpt.tensors)
        res = evaluate(state.model.embeddings(), state.n_users, test, state.train_matrix,
                       ks=(20,), batch_size=cfg.eval_batch)
        results.append({"combo": json.dumps(combo, sort_keys=True), "best_val_recall@20": ckpt.best_metric,
                        "best_epoch": ckpt.best_epoch, "test_recall@20": res.recall[20],
                        "test_ndcg@20": res.ndcg[20]})
    if out_csv is not None:
        with open(out_csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, ["combo", "best_val_recall@20", "best_epoch", "test_recall@20", "test_ndcg@20"])
            w.writeheader()
            w.writerows(results)
    return results
