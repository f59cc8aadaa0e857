"""Command-line entry point: prepare, train, evaluate, noise, grid."""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .data import (
    MODALITIES,
    DataFormatError,
    Dataset,
    ModalityFeatureMatrix,
    Split,
    load_features,
    load_interactions,
    read_feature_file,
    split_dataset,
    write_features,
)
from .debias import histogram
from .evaluation import evaluate, write_metrics_csv
from .model import build_model
from .noiselab import CorruptionError, CorruptionSpec, run_noise_grid
from .substrate.optim import TrainingAborted, make_rng
from .trainer import (
    SEED_INIT,
    ConfigError,
    TrainConfig,
    TrainState,
    fit,
    grid_search,
    load_checkpoint,
    save_checkpoint,
)

log = logging.getLogger("jbmdiff")

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_CONSISTENCY, EXIT_NUMERIC = 0, 1, 2, 3, 4
SEED_SPLIT = 0
PREPARED_FILES = ("users.txt", "items.txt", "train.tsv", "valid.tsv", "test.tsv",
                  "visual.jbmf", "textual.jbmf")


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out: Path, command: str, argv, config=None, seed=None, inputs=(), artifacts=()):
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": config,
        "seed": seed,
        "inputs": {str(p): sha256(p) for p in inputs if Path(p).is_file()},
        "artifacts": [str(a) for a in artifacts],
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))


# -- prepared dataset directory ---------------------------------------------

def _write_pairs(path, pairs):
    with open(path, "w", encoding="utf-8") as fh:
        for u, i in np.asarray(pairs).reshape(-1, 2):
            fh.write(f"{u}\t{i}\n")


def _read_pairs(path):
    arr = np.loadtxt(path, dtype=np.int64, delimiter="\t", ndmin=2)
    return arr.reshape(-1, 2)


def _reorder_features(fm: ModalityFeatureMatrix, order_path, item_ids):
    order = [line.strip() for line in open(order_path, encoding="utf-8") if line.strip()]
    if len(order) != fm.matrix.shape[0]:
        raise DataFormatError(f"{order_path}: {len(order)} ids for {fm.matrix.shape[0]} feature rows")
    pos = {iid: r for r, iid in enumerate(order)}
    missing = [iid for iid in item_ids if iid not in pos]
    if missing:
        raise DataFormatError(f"{order_path}: no feature row for item {missing[0]!r}")
    return ModalityFeatureMatrix(fm.modality, fm.matrix[[pos[iid] for iid in item_ids]])


def dataset_fingerprint(data_dir) -> str:
    h = hashlib.sha256()
    for name in PREPARED_FILES:
        p = Path(data_dir) / name
        if p.exists():
            h.update(name.encode())
            h.update(sha256(p).encode())
    return h.hexdigest()


def load_prepared(data_dir):
    data_dir = Path(data_dir)
    if not (data_dir / "summary.json").exists():
        raise CliError(f"{data_dir} is not a prepared dataset directory", EXIT_INPUT)
    summary = json.loads((data_dir / "summary.json").read_text())
    nu, ni = summary["users"], summary["items"]
    train, valid, test = (_read_pairs(data_dir / f"{s}.tsv") for s in ("train", "valid", "test"))
    features = {}
    for m in MODALITIES:
        p = data_dir / f"{m}.jbmf"
        if p.exists():
            features[m] = load_features(p, m, ni).matrix
    inter = np.concatenate([train, valid, test])
    ds = Dataset(nu, ni, inter, features=features)
    split = Split(train, valid, test, seed=summary.get("split_seed", 0))
    return ds, split, dataset_fingerprint(data_dir)


# -- commands -----------------------------------------------------------------

def cmd_prepare(args, argv):
    for flag, path in (("--interactions", args.interactions), ("--visual", args.visual),
                       ("--textual", args.textual)):
        if not Path(path).is_file():
            raise CliError(f"{flag}: file not found: {path}", EXIT_INPUT)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = load_interactions(args.interactions)
    for flag, m, path, order in (("--visual", "visual", args.visual, args.visual_ids),
                                 ("--textual", "textual", args.textual, args.textual_ids)):
        try:
            if order:
                fm = _reorder_features(read_feature_file(path), order, ds.item_ids)
                if fm.modality != m:
                    raise DataFormatError(f"{path}: modality tag is {fm.modality}, expected {m}")
            else:
                fm = load_features(path, m, ds.n_items)
        except DataFormatError as exc:
            raise CliError(f"{flag}: {exc}", EXIT_INPUT) from exc
        write_features(out / f"{m}.jbmf", fm)
    split = split_dataset(ds, rng=make_rng(args.seed, SEED_SPLIT), seed=args.seed)
    (out / "users.txt").write_text("".join(f"{u}\n" for u in ds.user_ids), encoding="utf-8")
    (out / "items.txt").write_text("".join(f"{i}\n" for i in ds.item_ids), encoding="utf-8")
    for name, pairs in (("train", split.train), ("valid", split.valid), ("test", split.test)):
        _write_pairs(out / f"{name}.tsv", pairs)
    (out / "split_manifest.txt").write_text(split.manifest())
    summary = {**ds.summary(), "split_seed": args.seed, "split_protocol": "per-user random 8:1:1",
               "train": len(split.train), "valid": len(split.valid), "test": len(split.test)}
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    write_manifest(out, "prepare", argv, seed=args.seed,
                   inputs=[args.interactions, args.visual, args.textual],
                   artifacts=[out / f for f in PREPARED_FILES] + [out / "split_manifest.txt"])
    print(f"users={summary['users']} items={summary['items']} "
          f"interactions={summary['interactions']} density={summary['density_pct']}")


def _load_config(args):
    raw = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            raw = json.load(fh)
    try:
        cfg = TrainConfig.from_dict(raw)
        flags = {f.replace("-", "_"): True for f in (getattr(args, "ablate", None) or [])}
        if getattr(args, "seed", None) is not None:
            flags["seed"] = args.seed
        return cfg.replace(**flags) if flags else cfg
    except (ConfigError, TypeError) as exc:
        raise CliError(f"config rejected: {exc}", EXIT_USAGE) from exc


def cmd_train(args, argv):
    ds, split, fp = load_prepared(args.data)
    cfg = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = build_model(args.model, ds.n_users, ds.n_items, split.train, ds.features, cfg,
                        make_rng(cfg.seed, SEED_INIT))
    state = TrainState(model, ds.n_users, ds.n_items, split.train, cfg)
    last_weights = {}

    def on_epoch(epoch, rep, metric):
        last_weights["w"] = rep["weights"]

    try:
        ckpt = fit(state, split.valid, epoch_log=out / "epochs.csv", on_epoch=on_epoch)
    except TrainingAborted as exc:
        good = getattr(exc, "checkpoint", None)
        if good is not None:
            good.meta.update(model=args.model, dataset_fingerprint=fp)
            save_checkpoint(out / "last_good.jbmc", good)
        raise CliError(f"training diverged: {exc}", EXIT_NUMERIC) from exc
    ckpt.meta.update(model=args.model, dataset_fingerprint=fp)
    save_checkpoint(out / "checkpoint.jbmc", ckpt)
    model.load_state(ckpt.tensors)
    res = evaluate(model.embeddings(), ds.n_users, split.test, state.train_matrix,
                   ks=(10, 20), batch_size=cfg.eval_batch)
    write_metrics_csv(out / "metrics.csv", res, cfg.seed)
    cache = _write_denoised_cache(out, model, ckpt.best_epoch, cfg)
    if "w" in last_weights and len(last_weights["w"]):
        with open(out / "confidence_hist.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bucket", "count"])
            w.writerows(histogram(last_weights["w"]))
    write_manifest(out, "train", argv, config=cfg.to_dict(), seed=cfg.seed,
                   inputs=[Path(args.data) / f for f in PREPARED_FILES] + ([args.config] if args.config else []),
                   artifacts=[out / "checkpoint.jbmc", out / "epochs.csv", out / "metrics.csv", *cache])
    print(f"best epoch {ckpt.best_epoch}: val R@20={ckpt.best_metric:.4f}  "
          f"test R@20={res.recall[20]:.4f} N@20={res.ndcg[20]:.4f}")


def _write_denoised_cache(out: Path, model, epoch: int, cfg: TrainConfig) -> list:
    """Export the best checkpoint's denoised features as JBMF files plus a text manifest."""
    denoised = getattr(model, "denoised", None)
    if not denoised:
        return []
    paths = []
    for m, mat in denoised.items():
        path = out / f"denoised_{m}.jbmf"
        write_features(path, ModalityFeatureMatrix(m, np.asarray(mat, np.float32)))
        paths.append(path)
    manifest = out / "denoised_manifest.txt"
    manifest.write_text(f"epoch\t{epoch}\nomega\t{cfg.omega}\nT\t{cfg.T}\nseed\t{cfg.seed}\n"
                        f"no_mmd\t{cfg.no_mmd}\n")
    return paths + [manifest]


def cmd_evaluate(args, argv):
    ds, split, fp = load_prepared(args.data)
    try:
        ckpt = load_checkpoint(args.checkpoint)
    except (OSError, ValueError) as exc:
        raise CliError(f"--checkpoint: {exc}", EXIT_INPUT) from exc
    if ckpt.meta.get("dataset_fingerprint") not in (None, fp):
        raise CliError("checkpoint was trained on a different dataset (fingerprint mismatch)",
                       EXIT_CONSISTENCY)
    try:
        ks = tuple(int(k) for k in args.k.split(","))
    except ValueError as exc:
        raise CliError(f"--k: {exc}", EXIT_USAGE) from exc
    cfg = ckpt.config
    model = build_model(ckpt.meta.get("model", "jbm-diff"), ds.n_users, ds.n_items, split.train,
                        ds.features, cfg, make_rng(cfg.seed, SEED_INIT))
    try:
        model.load_state(ckpt.tensors)
    except (KeyError, ValueError) as exc:
        raise CliError(f"checkpoint does not match dataset: {exc}", EXIT_CONSISTENCY) from exc
    state = TrainState(model, ds.n_users, ds.n_items, split.train, cfg)
    res = evaluate(model.embeddings(), ds.n_users, split.test, state.train_matrix, ks=ks,
                   batch_size=cfg.eval_batch)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out / "eval_metrics.csv", res, cfg.seed)
    write_manifest(out, "evaluate", argv, config=cfg.to_dict(), seed=cfg.seed,
                   inputs=[args.checkpoint], artifacts=[out / "eval_metrics.csv"])
    for k in ks:
        print(f"R@{k}={res.recall[k]:.4f}  N@{k}={res.ndcg[k]:.4f}")


def _parse_list(text, cast, flag):
    try:
        return [cast(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise CliError(f"{flag}: {exc}", EXIT_USAGE) from exc


def cmd_noise(args, argv):
    ratios = _parse_list(args.ratios, float, "--ratios")
    models = _parse_list(args.models, str, "--models")
    cfg = _load_config(args)
    try:
        specs = [CorruptionSpec(args.kind, r, args.modality, cfg.seed) for r in ratios]
    except CorruptionError as exc:
        raise CliError(str(exc), EXIT_USAGE) from exc
    ds, split, _ = load_prepared(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = run_noise_grid(ds, split, models, specs, cfg, out_csv=out / "noise_results.csv",
                          log_path=out / "corruption_log.jsonl")
    write_manifest(out, "noise", argv, config=cfg.to_dict(), seed=cfg.seed,
                   inputs=[Path(args.data) / f for f in PREPARED_FILES],
                   artifacts=[out / "noise_results.csv", out / "corruption_log.jsonl"])
    print(f"{len(rows)} result rows -> {out / 'noise_results.csv'}")


def cmd_grid(args, argv):
    cfg = _load_config(args)
    try:
        grid = json.loads(Path(args.grid).read_text())
    except (OSError, ValueError) as exc:
        raise CliError(f"--grid: {exc}", EXIT_INPUT) from exc
    ds, split, _ = load_prepared(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def make_state(c):
        model = build_model(args.model, ds.n_users, ds.n_items, split.train, ds.features, c,
                            make_rng(c.seed, SEED_INIT))
        return TrainState(model, ds.n_users, ds.n_items, split.train, c)

    try:
        rows = grid_search(make_state, split.valid, split.test, cfg, grid, out / "grid_results.csv")
    except ConfigError as exc:
        raise CliError(str(exc), EXIT_USAGE) from exc
    write_manifest(out, "grid", argv, config=cfg.to_dict(), seed=cfg.seed,
                   inputs=[args.grid] + [Path(args.data) / f for f in PREPARED_FILES],
                   artifacts=[out / "grid_results.csv"])
    print(f"{len(rows)} grid rows -> {out / 'grid_results.csv'}")


def build_parser():
    p = _Parser(prog="jbmdiff", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("prepare", help="index interactions, validate features, split")
    s.add_argument("--interactions", required=True)
    s.add_argument("--visual", required=True)
    s.add_argument("--textual", required=True)
    s.add_argument("--visual-ids", help="item id per visual feature row (reorders rows)")
    s.add_argument("--textual-ids", help="item id per textual feature row (reorders rows)")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=2024)
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("train", help="fit a model with early stopping")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--ablate", action="append", choices=["no-mmd", "no-ff", "no-bd"])
    s.add_argument("--model", default="jbm-diff", choices=["jbm-diff", "lightgcn", "bpr-mf"])
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="full-ranking test metrics for a checkpoint")
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--k", default="10,20")
    s.add_argument("--out")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("noise", help="corruption robustness grid")
    s.add_argument("--data", required=True)
    s.add_argument("--kind", required=True, choices=["modality-replace", "feedback-add", "feedback-remove"])
    s.add_argument("--modality", choices=list(MODALITIES))
    s.add_argument("--ratios", required=True)
    s.add_argument("--models", default="jbm-diff,lightgcn")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_noise)

    s = sub.add_parser("grid", help="hyperparameter grid search")
    s.add_argument("--data", required=True)
    s.add_argument("--grid", required=True)
    s.add_argument("--config")
    s.add_argument("--model", default="jbm-diff", choices=["jbm-diff", "lightgcn", "bpr-mf"])
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_grid)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    limits = None
    threads = os.environ.get("JBM_THREADS")
    if threads:
        from threadpoolctl import threadpool_limits

        limits = threadpool_limits(int(threads))
    try:
        args.func(args, argv)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (DataFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except TrainingAborted as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    finally:
        if limits is not None:
            limits.restore_original_limits()
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
