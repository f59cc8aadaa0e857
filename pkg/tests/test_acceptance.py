"""Acceptance criteria, one test per criterion, each printing a PASS/FAIL line.

Criteria 1-7 run on synthetic data. Criteria 8-12 need the Amazon Baby data
(``JBM_BABY_DIR`` with ``interactions.tsv``, ``visual.jbmf``, ``textual.jbmf``)
and are skipped without it.
"""
import math
import os
from pathlib import Path

import numpy as np
import pytest

from jbmdiff import diffusion as dm
from jbmdiff import evaluation as ev
from jbmdiff import model as model_mod
from jbmdiff import trainer as tr
from jbmdiff.data import load_features, load_interactions, sample_triples, split_dataset
from jbmdiff.debias import confidence_from_stats, weighted_bpr
from jbmdiff.graphs import build_semantic_graph
from jbmdiff.model import build_model
from jbmdiff.noiselab import CorruptionSpec, run_cell
from jbmdiff.substrate import ag, adam_step, grad_check, make_rng
from tests.conftest import make_toy

RESULTS = []


def record(number, ok, detail):
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def skip(number, reason):
    line = f"criterion {number:2d}: SKIP  {reason}"
    RESULTS.append(line)
    print(line)
    pytest.skip(reason)


# -- 1 ------------------------------------------------------------------------

def test_c01_gradient_integrity():
    ds = make_toy(n_users=4, n_items=6, per_user=3, seed=5, dv=5, dt=4)
    cfg = tr.TrainConfig(embed_dim=4, T=3, K=2, lambda_dm=1.0, lambda_mm=1.0, lambda_cl=1.0)
    model = build_model("jbm-diff", 4, 6, ds.interactions, ds.features, cfg, make_rng(1))
    model.start_epoch(make_rng(2))
    triples = sample_triples(ds.interactions, 6, make_rng(4), 4, 6)
    # stop-gradient inputs (confidence weights, diffusion conditioning) are held fixed
    _, w = model.batch_losses(triples, make_rng(9))
    cond = model.forward()["collab"].data[4:].copy()

    def loss():
        return tr.total_loss(model.batch_losses(triples, make_rng(9), weights=w, cond=cond)[0], cfg)

    worst, covered = 0.0, []
    for k, p in enumerate(model.parameters()):
        rep = grad_check(loss, [p], probe_count=min(p.data.size, 8), tol=1e-4, rng=make_rng(100 + k))
        worst = max(worst, rep.max_rel_error)
        covered.append(p.name)
    groups = {"embedding", "proj", "gate", "denoiser"}
    ok = worst <= 1e-4 and groups <= {n.split(".")[0] for n in covered}
    record(1, ok, f"max rel error {worst:.2e} over {len(covered)} parameter tensors (tol 1e-4, float64)")


# -- 2 ------------------------------------------------------------------------

def test_c02_diffusion_moments():
    n, x0 = 10_000, np.array([[1.5, -0.7, 0.2, 3.0]])
    worst = 0.0
    for T in (5, 20):
        s = dm.build_schedule(T)
        for t in (1, (T + 1) // 2, T):
            xt, _ = dm.q_sample(np.repeat(x0, n, axis=0), t, s, make_rng(T * 100 + t))
            ab = s.alpha_bar[t - 1]
            z_mean = np.abs(xt.mean(0) - np.sqrt(ab) * x0[0]) / np.sqrt((1 - ab) / n)
            z_var = np.abs(xt.var(0, ddof=1) - (1 - ab)) / ((1 - ab) * np.sqrt(2 / (n - 1)))
            worst = max(worst, z_mean.max(), z_var.max())
    record(2, worst < 3, f"largest deviation {worst:.2f} standard errors (limit 3)")


# -- 3 ------------------------------------------------------------------------

def _oracle(scores, truth, k):
    rec, nd = [], []
    for u, items in enumerate(truth):
        if not items:
            continue
        ranked = sorted(range(len(scores[u])), key=lambda i: (-scores[u][i], i))[:k]
        hits = [r for r, i in enumerate(ranked) if i in items]
        rec.append(len(hits) / len(items))
        nd.append(sum(1 / math.log2(r + 2) for r in hits) / sum(1 / math.log2(r + 2) for r in range(min(len(items), k))))
    return np.mean(rec), np.mean(nd)


def test_c03_ranking_oracle():
    mismatches = 0
    for inst in range(100):
        rng = make_rng(inst, 33)
        n_u, n_i = int(rng.integers(1, 11)), int(rng.integers(1, 16))
        scores = rng.integers(-2, 3, size=(n_u, n_i)).astype(float)
        truth = [rng.choice(n_i, size=int(rng.integers(0, n_i + 1)), replace=False).tolist() for _ in range(n_u)]
        if not any(truth):
            truth[0] = [0]
        for k in (1, 5, 10, 20):
            top = ev.topk_items(scores, k)
            want = _oracle(scores, truth, k)
            if (ev.recall_at_k(top, truth, k), ev.ndcg_at_k(top, truth, k)) != pytest.approx(want, abs=1e-12):
                mismatches += 1
    rank2 = ev.ndcg_at_k(np.array([[3, 7, 1]]), [[7]], 3)
    ok = mismatches == 0 and abs(rank2 - 1 / math.log2(3)) <= 1e-9
    record(3, ok, f"{mismatches} mismatches over 100 instances x 4 K; rank-2 NDCG {rank2:.12f}")


# -- 4 ------------------------------------------------------------------------

def test_c04_confidence_contract():
    rng = make_rng(4, 44)
    mu, eps = rng.uniform(-1, 1, 10_000), rng.uniform(0, 1, 10_000)
    w = confidence_from_stats(mu, eps)
    in_range = bool(np.all((w > 0) & (w < 1)))
    # pairwise: sort by one coordinate while holding the other fixed
    a, b = rng.integers(0, 10_000, (2, 10_000))
    mono_mu = confidence_from_stats(np.maximum(mu[a], mu[b]), eps[a]) >= confidence_from_stats(np.minimum(mu[a], mu[b]), eps[a])
    anti_eps = confidence_from_stats(mu[a], np.maximum(eps[a], eps[b])) <= confidence_from_stats(mu[a], np.minimum(eps[a], eps[b]))
    origin = confidence_from_stats(0.0, 0.0)
    ok = in_range and mono_mu.all() and anti_eps.all() and origin == 0.5
    record(4, ok, f"range ok={in_range}, monotone={mono_mu.all()}, anti-monotone={anti_eps.all()}, w(0,0)={float(origin)}")


# -- 5 ------------------------------------------------------------------------

def _plain_bpr(pos, neg, weights=None):
    # independent formulation: mean softplus(neg - pos), weights ignored
    gap = ag.sub(neg, pos)
    return ag.mean(ag.scale(ag.log_sigmoid(ag.scale(gap, -1.0)), -1.0))


def test_c05_reduction_identities(monkeypatch, toy, small_config):
    rng = make_rng(5, 55)
    pos, neg = rng.standard_normal((64, 1)), rng.standard_normal((64, 1))
    plain = float(np.mean(np.log1p(np.exp(neg - pos))))
    bpr_gap = abs(float(weighted_bpr(pos, neg, np.ones(64)).data) - plain)

    x0, xh = rng.standard_normal((5, 3)).astype(np.float32), rng.standard_normal((5, 3)).astype(np.float32)
    blended = dm.blend(x0, xh, 0.0)
    blend_exact = blended.tobytes() == x0.tobytes()

    ds, split = toy

    def first_epoch(cfg):
        m = build_model("jbm-diff", ds.n_users, ds.n_items, split.train, ds.features, cfg,
                        make_rng(cfg.seed, tr.SEED_INIT))
        state = tr.TrainState(m, ds.n_users, ds.n_items, split.train, cfg)
        return tr.run_epoch(state, make_rng(cfg.seed, tr.SEED_TRAIN), make_rng(cfg.seed, tr.SEED_DENOISE))["L_bpr"]

    no_bd = first_epoch(small_config.replace(no_bd=True))
    with monkeypatch.context() as mp:
        mp.setattr(model_mod, "weighted_bpr", _plain_bpr)
        reference = first_epoch(small_config)
    run_gap = abs(no_bd - reference)
    ok = bpr_gap <= 1e-6 and blend_exact and run_gap <= 1e-6
    record(5, ok, f"|wBPR(w=1) - BPR|={bpr_gap:.1e}, blend(w=0) bit-exact={blend_exact}, "
                  f"no-bd vs plain-BPR first-epoch L_bpr gap={run_gap:.1e}")


# -- 6 ------------------------------------------------------------------------

def test_c06_knn_oracle():
    bad = 0
    for inst in range(50):
        rng = make_rng(inst, 66)
        n = int(rng.integers(3, 31))
        k = int(rng.integers(1, min(5, n - 1) + 1))
        feats = rng.standard_normal((n, int(rng.integers(2, 8)))).astype(np.float32)
        if inst % 2:  # duplicated rows produce exact similarity ties
            dup = rng.integers(0, n, size=n // 3)
            feats[rng.integers(0, n, size=n // 3)] = feats[dup]
        graph = build_semantic_graph(feats, k)
        x = feats.astype(np.float64)
        norm = np.linalg.norm(x, axis=1)
        sim = (x @ x.T) / np.outer(norm, norm)
        for a in range(n):
            # brute force on the full matrix: descending value, then ascending index
            want = sorted((b for b in range(n) if b != a), key=lambda b: (-sim[a, b], b))[:k]
            got = graph.knn[a].indices.tolist()
            if set(got) != set(want):
                # tolerate only float32-vs-float64 near-ties at the K boundary
                edge = sim[a, want[-1]]
                if not all(abs(sim[a, b] - edge) < 1e-6 for b in set(got) ^ set(want)):
                    bad += 1
    record(6, bad == 0, f"{bad} rows disagree with brute-force top-K over 50 instances")


# -- 7 ------------------------------------------------------------------------

def _denoise_gain(T, beta_end, epochs=200, seed=0):
    rng = make_rng(seed, 77)
    n, d, d_m = 512, 64, 16
    e_c = rng.standard_normal((n, d)).astype(np.float32)
    clean = (e_c @ (rng.standard_normal((d, d_m)) / np.sqrt(d))).astype(np.float32)
    noisy = (clean + rng.standard_normal(clean.shape) * clean.std()).astype(np.float32)  # SNR 1:1
    schedule = dm.build_schedule(T, 1e-4, beta_end)
    den = dm.Denoiser(d_m, d, T, rng)
    for _ in range(epochs):
        perm = rng.permutation(n)
        for s in range(0, n, 128):
            idx = perm[s : s + 128]
            for p in den.parameters():
                p.zero_grad()
            dm.diffusion_loss(noisy[idx], schedule, e_c[idx], den, rng).backward()
            for p in den.parameters():
                adam_step(p, 1e-3)
    recon = dm.reverse_denoise(noisy, schedule, e_c, den, rng=make_rng(seed, 78))
    return float(np.mean((recon - clean) ** 2) / np.mean((noisy - clean) ** 2))


def test_c07_denoising_gain():
    ratio = _denoise_gain(T=10, beta_end=0.5)
    default = _denoise_gain(T=5, beta_end=0.02)
    record(7, ratio <= 0.5, f"recon/noisy MSE ratio {ratio:.3f} with T=10, beta in [1e-4, 0.5] (limit 0.5); "
                            f"default short schedule T=5, beta_end=0.02 gives {default:.3f}")


# -- 8-12: Amazon Baby --------------------------------------------------------

BABY = os.environ.get("JBM_BABY_DIR")
_runs = {}


@pytest.fixture(scope="module")
def baby():
    root = Path(BABY)
    ds = load_interactions(root / "interactions.tsv")
    for m in ("visual", "textual"):
        ds.features[m] = load_features(root / f"{m}.jbmf", m, ds.n_items).matrix
    return ds, split_dataset(ds, rng=make_rng(2024, 0), seed=2024)


def _baby_run(baby, name, **flags):
    key = (name, tuple(sorted(flags.items())))
    if key not in _runs:
        ds, split = baby
        spec = flags.pop("corrupt", None)
        cfg = tr.TrainConfig(**flags)
        res, _ = run_cell(ds, split, name, spec, cfg)
        _runs[key] = res.recall[20]
    return _runs[key]


def need_baby(number):
    if not BABY:
        skip(number, "JBM_BABY_DIR not set; Amazon Baby data unavailable")


@pytest.mark.e2e
def test_c08_baby_statistics(request):
    need_baby(8)
    ds, _ = request.getfixturevalue("baby")
    s = ds.summary()
    got = (s["users"], s["items"], s["interactions"], s["density_pct"])
    record(8, got == (19445, 7050, 160792, "0.117%"), f"users/items/interactions/density = {got}")


@pytest.mark.e2e
def test_c09_relative_performance(request):
    need_baby(9)
    b = request.getfixturevalue("baby")
    full, lgcn = _baby_run(b, "jbm-diff"), _baby_run(b, "lightgcn")
    record(9, full >= 1.15 * lgcn, f"JBM-Diff R@20 {full:.4f} vs LightGCN {lgcn:.4f} (ratio {full / lgcn:.3f}, need 1.15)")


@pytest.mark.e2e
def test_c10_ablation_order(request):
    need_baby(10)
    b = request.getfixturevalue("baby")
    full = _baby_run(b, "jbm-diff")
    mmd, ff, bd = (_baby_run(b, "jbm-diff", **{f: True}) for f in ("no_mmd", "no_ff", "no_bd"))
    record(10, mmd < ff < full and bd < full,
           f"w/o MMD {mmd:.4f}, w/o FF {ff:.4f}, w/o BD {bd:.4f}, full {full:.4f}")


@pytest.mark.e2e
def test_c11_noise_robustness(request):
    need_baby(11)
    b = request.getfixturevalue("baby")
    spec = CorruptionSpec("feedback-add", 0.2, seed=2024)
    drops = {}
    for name in ("jbm-diff", "lightgcn"):
        clean = _baby_run(b, name)
        noisy = _baby_run(b, name, corrupt=spec)
        drops[name] = (clean - noisy) / clean
    record(11, drops["jbm-diff"] < drops["lightgcn"],
           f"relative R@20 drop at 20% feedback-add: JBM-Diff {drops['jbm-diff']:.3f}, LightGCN {drops['lightgcn']:.3f}")


@pytest.mark.e2e
def test_c12_determinism(request):
    need_baby(12)
    ds, split = request.getfixturevalue("baby")
    logs, metrics = [], []
    for _ in range(2):
        cfg = tr.TrainConfig()
        m = build_model("jbm-diff", ds.n_users, ds.n_items, split.train, ds.features, cfg,
                        make_rng(cfg.seed, tr.SEED_INIT))
        state = tr.TrainState(m, ds.n_users, ds.n_items, split.train, cfg)
        ck = tr.fit(state, split.valid)
        m.load_state(ck.tensors)
        res = ev.evaluate(m.embeddings(), ds.n_users, split.test, state.train_matrix)
        logs.append([row[:6] for row in ck.log])
        metrics.append((res.recall, res.ndcg))
    record(12, logs[0] == logs[1] and metrics[0] == metrics[1], "two seeded runs: identical epoch logs and metrics")
