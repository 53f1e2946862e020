"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line."""

import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE
from glta import ndgrad as nd
from glta import pipeline
from glta.checkpoint import file_digest
from glta.config import load_config
from glta.gllm import gllm_loss
from glta.graph import InteractionGraph, lightgcn_propagate
from glta.metrics import ndcg_at_k, precision_at_k, random_expectation

HERE = Path(__file__).parent

# the planted-signal run: synthetic fixture defaults (40 users, 60 items, 2 clusters,
# in_cluster_p 0.3, noise_p 0.02) with the sizes fixed by the criterion; epoch counts
# and learning rates were picked on seeds 1-5 so that seed 0 stays held out
PLANTED = {
    "seed": "0", "data.synthetic": "true",
    "graph.d": "32", "graph.epochs": "50", "graph.lr": "0.01",
    "lm.d_model": "64", "lm.depth": "2", "lm.heads": "4",
    "align.k": "10", "align.lr": "0.01", "align.stage2_epochs": "20", "align.stage3_epochs": "40",
    "eval.cutoffs": "5,10",
}


def report(n, ok, detail):
    ACCEPTANCE.append(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    print(ACCEPTANCE[-1])
    return ok


def full_run(cfg, d):
    d.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    pipeline.cmd_pretrain(cfg, d / "s1")
    pipeline.cmd_align_items(cfg, d / "s1", d / "s2")
    pipeline.cmd_align_users(cfg, d / "s2", d / "s3")
    reports = pipeline.cmd_evaluate(cfg, d / "s3", pipeline.INFERENCE_MODES, baseline=True)
    return reports, time.perf_counter() - t0


@pytest.fixture(scope="module")
def planted(tmp_path_factory):
    cfg = load_config(overrides=PLANTED)
    base = tmp_path_factory.mktemp("planted")
    first = full_run(cfg, base / "a")
    second = full_run(cfg, base / "b")
    return cfg, base, first, second


def test_1_gradient_suite():
    t0 = time.perf_counter()
    proc = subprocess.run(
        [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
         str(HERE / "test_ndgrad.py"), str(HERE / "test_graph.py"), str(HERE / "test_text_lm.py"),
         str(HERE / "test_alignment.py"), "-k", "gradient"],
        capture_output=True, text=True)
    dt = time.perf_counter() - t0
    tail = proc.stdout.strip().splitlines()[-1]
    ok = proc.returncode == 0 and dt < 60
    assert report(1, ok, f"finite-difference suite ({tail}), {dt:.1f}s < 60s"), proc.stdout[-2000:]


def dense_oracle(g, e_u, e_i, layers):
    n = g.num_users + g.num_items
    R = g.dense_adjacency().astype(np.float64)
    A = np.zeros((n, n))
    A[:g.num_users, g.num_users:] = R
    A[g.num_users:, :g.num_users] = R.T
    deg = A.sum(1)
    inv = np.zeros(n)
    inv[deg > 0] = deg[deg > 0] ** -0.5
    A_hat = inv[:, None] * A * inv[None, :]
    x = np.concatenate([e_u, e_i]).astype(np.float64)
    acc, cur = x.copy(), x
    for _ in range(layers):
        cur = A_hat @ cur
        acc += cur
    acc /= layers + 1
    return acc[:g.num_users], acc[g.num_users:]


def test_2_propagation_oracle():
    worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        nu, ni = int(rng.integers(2, 10)), int(rng.integers(2, 10))
        cells = rng.random((nu, ni)) < 0.35
        g = InteractionGraph(nu, ni, np.argwhere(cells))
        assert nu + ni <= 20
        e_u, e_i = rng.normal(size=(nu, 4)), rng.normal(size=(ni, 4))
        layers = int(rng.integers(1, 4))
        with nd.float64_mode():
            got_u, got_i = lightgcn_propagate(g, e_u, e_i, layers)
        want_u, want_i = dense_oracle(g, e_u, e_i, layers)
        worst = max(worst, np.abs(got_u.data - want_u).max(), np.abs(got_i.data - want_i).max())
    assert report(2, worst < 1e-6, f"10 random graphs, max abs diff {worst:.2e} < 1e-6")


def test_3_loss_anchors():
    worst = 0.0
    for n_items in (2, 7, 60, 1000):
        with nd.float64_mode():
            got = gllm_loss(nd.Tensor(np.zeros((10, n_items))), [(t, t % n_items) for t in range(10)], 10).item()
        worst = max(worst, abs(got - np.log(n_items)))
    bitwise = True
    for seed in range(20):
        rng = np.random.default_rng(seed)
        k = int(rng.integers(1, 8))
        Z = rng.normal(size=(k + 5, 9)).astype(np.float32)
        targets = [(t, int(rng.integers(9))) for t in range(k)]
        base = gllm_loss(nd.Tensor(Z), targets, k).data.tobytes()
        Z[k:] = rng.normal(size=(5, 9)) * 1e3
        bitwise &= gllm_loss(nd.Tensor(Z), targets, k).data.tobytes() == base
    ok = worst < 1e-6 and bitwise
    assert report(3, ok, f"zero-logit loss vs ln|I| max diff {worst:.1e}; masking bitwise={bitwise}")


def test_4_frozen_set(planted):
    _, base, _, _ = planted
    digests = [pipeline.frozen_digest(base / "a" / s) for s in ("s1", "s2", "s3")]
    ok = len(set(digests)) == 1
    assert report(4, ok, f"backbone + E_u/E_i checksum {digests[0][:12]} across stages 1-3")


def brute_precision(ranked, relevant, k):
    return sum(1 for x in ranked[:k] if x in relevant) / k


def brute_ndcg(ranked, relevant, k):
    dcg = sum(1.0 / np.log2(i + 2) for i, x in enumerate(ranked[:k]) if x in relevant)
    idcg = sum(1.0 / np.log2(i + 2) for i in range(min(len(relevant), k)))
    return dcg / idcg


def test_5_metric_oracles():
    rng = np.random.default_rng(12345)
    mismatches = 0
    for _ in range(1000):
        ranked = [int(x) for x in rng.permutation(50)[:int(rng.integers(1, 25))]]
        relevant = {int(x) for x in rng.choice(50, size=int(rng.integers(1, 12)), replace=False)}
        k = int(rng.integers(1, 20))
        mismatches += precision_at_k(ranked, relevant, k) != brute_precision(ranked, relevant, k)
        mismatches += ndcg_at_k(ranked, relevant, k) != brute_ndcg(ranked, relevant, k)
    assert report(5, mismatches == 0, f"1000 instances, {mismatches} exact mismatches")


def test_6_planted_signal(planted):
    cfg, _, (reports, seconds), _ = planted
    split = pipeline.prepare(cfg).split
    rand = random_expectation(split, 5)["P@5"]
    by_mode = {r.mode: r.metrics for r in reports}
    p5, base = by_mode["firstk"]["P@5"], by_mode["dot-baseline"]["P@5"]
    ok_random, ok_base, ok_time = p5 >= 3 * rand, p5 >= base - 0.02, seconds < 600
    detail = (f"firstk P@5 {p5:.4f} vs random {rand:.4f} (x{p5 / rand:.2f}, need x3: {ok_random}); "
              f"dot baseline {base:.4f} (need >= {base - 0.02:.4f}: {ok_base}); {seconds:.1f}s")
    assert report(6, ok_random and ok_base and ok_time, detail)


def test_7_ablation_harness(tmp_path):
    cfg = load_config(overrides=PLANTED)
    rows = pipeline.cmd_ablate(cfg, tmp_path)
    split = pipeline.prepare(cfg).split
    cells = {(r["variant"], r["mode"]) for r in rows}
    want = {(v, m) for v in pipeline.VARIANTS for m in pipeline.INFERENCE_MODES}
    table = (tmp_path / "ablation.txt").read_text().splitlines()
    well_formed = cells == want and len(table) == 2 + len(rows) and all(
        set(r["metrics"]) == {"P@5", "P@10", "N@5", "N@10"} and all(np.isfinite(list(r["metrics"].values())))
        for r in rows)
    # rankings under AR are rechecked for validity (evaluate already enforces this)
    ar_ok = True
    for variant in pipeline.VARIANTS:
        vcfg = pipeline.variant_config(cfg, variant)
        (rep,) = pipeline.cmd_evaluate(vcfg, tmp_path / f"stage3_{pipeline._slug(variant)}.ckpt", ["ar"])
        for u, r in rep.rankings.items():
            train = set(split.train.user_items(u).tolist())
            ar_ok &= len(r) == len(set(r)) == 10 and all(0 <= x < split.num_items and x not in train for x in r)
    ar = {r["variant"]: r["metrics"]["P@5"] for r in rows if r["mode"] == "ar"}
    fk = {r["variant"]: r["metrics"]["P@5"] for r in rows if r["mode"] == "firstk"}
    note = ", ".join(f"{v}: ar {ar[v]:.3f}/firstk {fk[v]:.3f}" for v in pipeline.VARIANTS)
    print("\n" + "\n".join(table))
    assert report(7, well_formed and ar_ok,
                  f"{len(rows)} rows, table well-formed={well_formed}, AR valid={ar_ok}; P@5 {note}")


def losses(path):
    return [json.loads(x)["loss"] for x in path.read_text().splitlines()]


def test_8_determinism(planted):
    _, base, (ra, _), (rb, _) = planted
    same_ckpt = all(file_digest(base / "a" / s) == file_digest(base / "b" / s) for s in ("s1", "s2", "s3"))
    # wall_ms differs between runs, so only the per-epoch losses are compared
    same_logs = all(losses(base / "a" / f"{s}.log.jsonl") == losses(base / "b" / f"{s}.log.jsonl")
                    for s in ("s2", "s3"))
    same_reports = [r.to_json() for r in ra] == [r.to_json() for r in rb] and all(
        x.rankings == y.rankings for x, y in zip(ra, rb))
    ok = same_ckpt and same_reports and same_logs
    assert report(8, ok, f"checkpoints identical={same_ckpt}, reports identical={same_reports}, "
                         f"losses identical={same_logs}")


def test_9_no_hallucination(planted, tmp_path):
    cfg, base, (reports, _), _ = planted
    split = pipeline.prepare(cfg).split
    runs = list(reports)
    for variant in ("w/o PF", "w/o PD", "w/o UA"):
        vcfg = pipeline.variant_config(cfg, variant)
        s3 = tmp_path / f"{pipeline._slug(variant)}.ckpt"
        pipeline.cmd_align_users(vcfg, base / "a" / "s2", s3)
        runs += pipeline.cmd_evaluate(vcfg, s3, pipeline.INFERENCE_MODES)
    emitted = bad = 0
    for rep in runs:
        for u, r in rep.rankings.items():
            train = set(split.train.user_items(u).tolist())
            emitted += len(r)
            bad += sum(1 for x in r if not 0 <= x < split.num_items or x in train)
            bad += len(r) - len(set(r))
    ok = emitted > 0 and bad == 0
    assert report(9, ok, f"{len(runs)} mode/run reports, {emitted} emitted ids, {bad} invalid or excluded")
