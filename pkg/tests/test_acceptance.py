"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line (printed in the terminal summary) before asserting.
"""

import math
import os
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from threadpoolctl import threadpool_limits

from mixsgcl.augmentation import MixupConfig, draw_plan, edge_mixup, sample_simplex_weights
from mixsgcl.cli import main as cli_main
from mixsgcl.dataset import (
    SplitConfig,
    apply_k_core,
    build_dataset,
    clustered_dataset,
    dataset_from_edges,
    load_interactions,
    two_block_dataset,
)
from mixsgcl.evaluator import embedding_shift, evaluate, ndcg_at_k, rank_items, recall_at_k
from mixsgcl.objectives import (
    infonce_gcl_loss,
    l2_normalize,
    normalize_backward,
    sgcl_loss,
    sgcl_pair_lower_bound,
    sslrec_identity_lower_bound,
    sslrec_loss,
)
from mixsgcl.propagation import (
    backward,
    build_normalized_adjacency,
    combine_layers,
    propagate,
    uniform_layer_weights,
)
from mixsgcl.trainer import NegativeSampler, TrainBatch, TrainConfig, fit, objective_from_base, with_model
from conftest import ACCEPTANCE, random_bipartite
from oracles import (
    brute_ndcg,
    brute_recall,
    brute_topk,
    central_differences,
    dense_layers,
    dense_normalized_adjacency,
    naive_infonce,
    naive_sgcl,
    rel_error,
)


def record(n, ok, detail):
    ACCEPTANCE[n] = (bool(ok), detail)
    assert ok, f"criterion {n}: {detail}"


def _unit(rng, n, d):
    return l2_normalize(rng.normal(size=(n, d)))[0]


# ---------------------------------------------------------------- 1

def _gradient_errors(seed):
    """Relative FD error of every loss w.r.t. base embeddings on a 10x15 graph, K=2, d=8."""
    rng = np.random.default_rng(seed)
    train = random_bipartite(10, 15, 40, seed=seed)
    ds = dataset_from_edges(10, 15, train, train[:0], train[:0])
    adj = build_normalized_adjacency(ds)
    w = uniform_layer_weights(2)
    base = rng.normal(0.0, 0.5, size=(25, 8))
    pick = rng.choice(len(train), size=10, replace=False)
    users, items = train[pick, 0], train[pick, 1]
    negs = NegativeSampler(ds)(users, rng)
    errors = {}

    for model in ("bpr", "sslrec", "sgcl", "mixsgcl"):
        cfg = with_model(TrainConfig(n_layers=2, embedding_dim=8), model)
        batch = TrainBatch(users, items, negs if model in ("bpr", "sslrec") else None)
        plan = draw_plan(10, 3, cfg.mixup, rng) if cfg.mixup.n_mix else None
        _, grad = objective_from_base(adj, base, w, batch, cfg, plan, seed=seed)
        numeric = central_differences(lambda x: objective_from_base(adj, x, w, batch, cfg, plan, seed=seed)[0], base)
        errors[model] = rel_error(grad, numeric)

    # user-item InfoNCE on normalized final rows, pulled back through propagation
    def infonce(x, with_grad=False):
        final = combine_layers(propagate(adj, x, 2), w)
        a, na = l2_normalize(final[users])
        b, nb = l2_normalize(final[items + 10])
        out = infonce_gcl_loss(a, b, 0.2)
        if not with_grad:
            return out.value
        g = np.zeros_like(final)
        np.add.at(g, users, normalize_backward(out.grad_users, a, na))
        np.add.at(g, items + 10, normalize_backward(out.grad_items, b, nb))
        return backward(adj, g, w)

    errors["infonce"] = rel_error(infonce(base, True), central_differences(infonce, base))
    return errors


def test_criterion_1_gradient_correctness():
    worst = {}
    start = time.perf_counter()

    @settings(max_examples=8, deadline=None, derandomize=True)
    @given(st.integers(0, 2**31 - 1))
    def check(seed):
        for name, err in _gradient_errors(seed).items():
            worst[name] = max(worst.get(name, 0.0), err)

    check()
    elapsed = time.perf_counter() - start
    detail = ", ".join(f"{k} {v:.1e}" for k, v in sorted(worst.items())) + f"; {elapsed:.1f}s"
    record(1, all(v < 1e-5 for v in worst.values()) and elapsed < 10, detail)


# ---------------------------------------------------------------- 2

def test_criterion_2_oracle_equivalence():
    start = time.perf_counter()
    rng = np.random.default_rng(2)
    prop_err = 0.0
    for seed in range(5):
        train = random_bipartite(9, 11, 30, seed=seed)
        ds = dataset_from_edges(9, 11, train, train[:0], train[:0])
        base = rng.normal(size=(20, 6))
        got = propagate(build_normalized_adjacency(ds), base, 3)
        want = dense_layers(dense_normalized_adjacency(9, 11, train), base, 3)
        prop_err = max(prop_err, max(np.max(np.abs(g - h)) for g, h in zip(got, want)))

    loss_err = 0.0
    for b in (1, 2, 7, 16, 32):
        u, v = _unit(rng, b, 8), _unit(rng, b, 8)
        loss_err = max(loss_err, abs(sgcl_loss(u, v, 0.2).value - naive_sgcl(u, v, 0.2)))
        loss_err = max(loss_err, abs(infonce_gcl_loss(u, v, 0.2).value - naive_infonce(u, v, 0.2)))

    metric_mismatch = 0
    for _ in range(100):
        n_items = int(rng.integers(20, 80))
        k = int(rng.integers(1, 30))
        scores = rng.integers(0, 10, size=n_items).astype(float)  # ties on purpose
        masked = set(rng.choice(n_items, size=5, replace=False).tolist())
        relevant = [i for i in rng.choice(n_items, size=4, replace=False).tolist() if i not in masked] or [
            min(set(range(n_items)) - masked)]
        final = np.zeros((1 + n_items, 2))
        final[0, 0] = 1.0
        final[1:, 0] = scores
        ours = rank_items(final, 1, 0, sorted(masked), k).tolist()
        ref = brute_topk(scores, masked, k)
        metric_mismatch += ours != ref
        metric_mismatch += recall_at_k(ours, relevant, k) != brute_recall(ref, relevant)
        metric_mismatch += ndcg_at_k(ours, relevant, k) != brute_ndcg(ref, relevant, k)

    elapsed = time.perf_counter() - start
    ok = prop_err <= 1e-10 and loss_err <= 1e-12 and metric_mismatch == 0 and elapsed < 30
    record(2, ok, f"propagation {prop_err:.1e}, losses {loss_err:.1e}, metric mismatches {metric_mismatch}, "
                  f"{elapsed:.1f}s")


# ---------------------------------------------------------------- 3

def test_criterion_3_formula_identities():
    rng = np.random.default_rng(3)
    u, v = rng.normal(size=(64, 8)), rng.normal(size=(64, 8))
    beta = rng.uniform(0, 0.5, size=64)
    ub, vb = edge_mixup(u, v, beta)
    conservation = float(np.max(np.abs(ub + vb - u - v)))
    simplex = float(np.max(np.abs(sample_simplex_weights(4, rng, size=10_000).sum(axis=1) - 1)))
    u0, v0 = edge_mixup(u, v, np.zeros(64))
    identity = bool(np.array_equal(u0, u) and np.array_equal(v0, v))
    self_pair = max(abs(sgcl_loss(x, x.copy(), tau).value - math.log(2))
                    for tau in (0.05, 0.2, 1.0, 5.0) for x in [_unit(rng, 1, 6)])
    violations = 0
    for _ in range(100):
        b = int(rng.integers(1, 64))
        tau = float(rng.uniform(0.05, 1.0))
        x, y = _unit(rng, b, 8), _unit(rng, b, 8)
        violations += sgcl_loss(x, y, tau).value < sgcl_pair_lower_bound(b, tau)
    ok = conservation <= 1e-12 and simplex <= 1e-12 and identity and self_pair <= 1e-12 and violations == 0
    record(3, ok, f"conservation {conservation:.1e}, simplex {simplex:.1e}, beta0 identity {identity}, "
                  f"self-pair {self_pair:.1e}, bound violations {violations}/100")


# ---------------------------------------------------------------- 4

def test_criterion_4_joint_loss_bound():
    rng = np.random.default_rng(4)
    equality = 0.0
    strict = 0
    for _ in range(50):
        b = int(rng.integers(1, 40))
        tau = float(rng.uniform(0.1, 1.0))
        lam = float(rng.uniform(0.0, 1.0))
        u, neg = _unit(rng, b, 8), _unit(rng, b, 8)
        equality = max(equality, abs(sslrec_loss(u, u, neg, tau, lam).value
                                     - sslrec_identity_lower_bound(u, u, neg, tau, lam)))
        v = _unit(rng, b, 8)
        strict += sslrec_loss(u, v, neg, tau, lam).value > sslrec_identity_lower_bound(u, v, neg, tau, lam)
    record(4, equality <= 1e-9 and strict == 50, f"aligned gap {equality:.1e}, strict {strict}/50")


# ---------------------------------------------------------------- 5

def _uniform_recall(dataset, k):
    """Expected Recall@k of a uniformly random ranking on the test split."""
    n_cand = np.full(dataset.n_users, dataset.n_items)
    for edges in (dataset.train_edges, dataset.valid_edges):
        n_cand -= np.bincount(edges[:, 0], minlength=dataset.n_users)
    users = np.unique(dataset.test_edges[:, 0])
    return float(np.mean(np.minimum(k, n_cand[users]) / n_cand[users]))


@pytest.mark.slow
def test_criterion_5_synthetic_end_to_end():
    start = time.perf_counter()
    ds = two_block_dataset(200, 200, density=0.9, seed=0)
    cfg = with_model(TrainConfig(batch_size=256, max_epochs=50), "mixsgcl")
    with threadpool_limits(limits=1):
        state, hist = fit(ds, cfg)
    recall = evaluate(state.final, ds, "test", ks=(20,)).recall[20]
    elapsed = time.perf_counter() - start
    baseline = _uniform_recall(ds, 20)
    ok = recall >= 5 * baseline and hist.n_epochs <= 50 and elapsed < 60
    record(5, ok, f"Recall@20 {recall:.4f} vs 5x random {5 * baseline:.4f}, {hist.n_epochs} epochs, "
                  f"{elapsed:.1f}s")


# ---------------------------------------------------------------- 6

def _find_beauty():
    root = Path(os.environ.get("MIXSGCL_DATA_DIR", "data"))
    for name, delimiter, ts_col in (("ratings_Beauty.csv", ",", 3), ("Beauty.inter", "\t", 3),
                                    ("beauty.tsv", "\t", 2)):
        if (root / name).exists():
            return root / name, delimiter, ts_col
    return None


@pytest.mark.slow
def test_criterion_6_beauty_reproduction(tmp_path):
    found = _find_beauty()
    if found is None:
        record(6, False, "Beauty interactions not found: put ratings_Beauty.csv, Beauty.inter or beauty.tsv under "
                         "$MIXSGCL_DATA_DIR to run this check")
    path, delimiter, ts_col = found
    if path.suffix == ".inter":
        # drop the typed header line
        body = path.read_text().split("\n", 1)[1]
        path = tmp_path / "beauty.tsv"
        path.write_text(body)
    raw = apply_k_core(load_interactions(path, delimiter=delimiter, timestamp_col=ts_col), 5)
    ds = build_dataset(raw, SplitConfig(seed=2024))
    recalls = {}
    with threadpool_limits(limits=1):
        for model in ("bpr", "sgcl", "mixsgcl"):
            state, _ = fit(ds, with_model(TrainConfig(), model))
            recalls[model] = evaluate(state.final, ds, "test", ks=(20,)).recall[20]
    in_band = abs(recalls["mixsgcl"] - 0.143) <= 0.0143 and abs(recalls["bpr"] - 0.1224) <= 0.01224
    ordered = recalls["mixsgcl"] > recalls["sgcl"] > recalls["bpr"]
    ok = (in_band and recalls["mixsgcl"] > recalls["bpr"]) or ordered
    record(6, ok, f"{ds.stats()['interactions']} interactions; Recall@20 "
                  + ", ".join(f"{m} {r:.4f}" for m, r in recalls.items()))


# ---------------------------------------------------------------- 7

@pytest.mark.slow
def test_criterion_7_efficiency_ordering():
    ds = clustered_dataset(seed=0)
    base = TrainConfig(dtype="float32")
    with threadpool_limits(limits=1):
        _, h_bpr = fit(ds, with_model(base, "bpr"))
        _, h_sgcl = fit(ds, with_model(base, "sgcl"))
        _, h_mix = fit(ds, with_model(replace(base, max_epochs=5), "mixsgcl"))

    def per_epoch(h):
        return float(np.mean([r.train_seconds for r in h.epochs]))

    t_bpr, t_sgcl, t_mix = per_epoch(h_bpr), per_epoch(h_sgcl), per_epoch(h_mix)
    parts = {
        "sgcl<=bpr": t_sgcl <= t_bpr,
        "mix<=2x sgcl": t_mix <= 2 * t_sgcl,
        "stop ratio<=0.7": h_sgcl.n_epochs <= 0.7 * h_bpr.n_epochs,
    }
    detail = (f"s/epoch bpr {t_bpr:.2f} sgcl {t_sgcl:.2f} mixsgcl {t_mix:.2f}; "
              f"epochs bpr {h_bpr.n_epochs} sgcl {h_sgcl.n_epochs}; "
              + ", ".join(f"{k} {'ok' if v else 'no'}" for k, v in parts.items()))
    record(7, all(parts.values()), detail)


# ---------------------------------------------------------------- 8

@pytest.mark.slow
def test_criterion_8_distribution_shift():
    ds = two_block_dataset(200, 200, density=0.9, seed=0)
    shifts = {}
    with threadpool_limits(limits=1):
        for model in ("sgcl", "sslrec"):
            cfg = with_model(TrainConfig(batch_size=256, max_epochs=20, patience=20), model)
            state, _ = fit(ds, cfg)
            shifts[model] = embedding_shift(state.final, ds)["centroid_distance"]
    record(8, shifts["sgcl"] < shifts["sslrec"],
           f"centroid distance sgcl {shifts['sgcl']:.5f} vs sslrec {shifts['sslrec']:.5f}")


# ---------------------------------------------------------------- 9

def test_criterion_9_determinism(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("MIXSGCL_DATA_DIR", str(tmp_path))
    ds = two_block_dataset(40, 40, density=0.5, seed=9)
    lines = [f"u{u}\ti{i}" for u, i in np.concatenate([ds.train_edges, ds.valid_edges, ds.test_edges])]
    (tmp_path / "raw.tsv").write_text("\n".join(lines) + "\n")
    assert cli_main(["prepare", "--input", "raw.tsv", "--out", "ds.bin", "--k-core", "1"]) == 0
    flags = ["--model", "mixsgcl", "--dim", "16", "--batch-size", "64", "--epochs", "4",
             "--threads", "1", "--dtype", "float64"]
    for run in ("a", "b"):
        assert cli_main(["train", "--cache", "ds.bin", "--out", run, *flags]) == 0
        assert cli_main(["evaluate", "--checkpoint", run, "--cache", "ds.bin", "--out", f"{run}.json"]) == 0
    files = ["config.json", "embeddings.bin", "embeddings.bin.index.json", "history.json"]
    same = [f for f in files if (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()]
    report_same = (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    record(9, len(same) == len(files) and report_same,
           f"identical checkpoint files {len(same)}/{len(files)}, metric report identical {report_same}")
