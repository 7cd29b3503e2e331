"""Acceptance criteria, each run at its stated tolerance.

Every test appends one ``CRITERION n: PASS|FAIL ...`` line to the shared list
in conftest (echoed in the terminal summary) and prints it, then asserts.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from helpers import LossProblem
from worstcase_fsl.cli import ExperimentConfig, build_store, main
from worstcase_fsl.data import BASE, SrPool, file_sha256, load_episodes, partition_base, rng_stream
from worstcase_fsl.losses import stability_regularization
from worstcase_fsl.metrics import (
    acc_mean,
    acc_worst_k,
    chebyshev_tail_bound,
    compute_report,
    normal_cdf,
    sigma_to_z95,
    surrogate_mu_minus_3sigma,
    z95_to_sigma,
)
from worstcase_fsl.model import backbone_forward, load_checkpoint
from worstcase_fsl.numcore import finite_diff_check, numeric_gradient, relative_error
from worstcase_fsl.trainer import (
    FinetuneConfig,
    finetune_episode,
    member_stream,
    prepare_pool,
    read_run_results,
    run_ensemble_episode,
    run_single_episode,
)


def record(n, ok, detail):
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def cli(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Default configuration: a pretrained checkpoint shared by the CLI criteria."""
    out = tmp_path_factory.mktemp("default")
    assert cli("pretrain", "--out", out) == 0
    return out


@pytest.fixture(scope="module")
def default_world(workspace):
    cfg = ExperimentConfig()
    store = build_store(cfg)
    backbone, _, _ = load_checkpoint(workspace / "backbone.ckpt")
    episodes = load_episodes(_episode_file(workspace, "e20.jsonl", 20))
    return cfg, store, backbone, episodes


def _episode_file(out, name, n, *extra):
    path = out / name
    if not path.exists():
        assert cli("episodes", "--out", out, "--episodes", path, "--set", f"n_episodes={n}", *extra) == 0
    return path


# -- 1 ------------------------------------------------------------------------------------

def test_criterion_01_gradient_correctness():
    start = time.perf_counter()
    worst = {}
    for kind in ("ce", "sr", "total"):
        errs = []
        for seed in range(100):
            prob = LossProblem(seed, kind)
            prob.backward()
            errs.append(finite_diff_check(prob.loss, prob.params, h=1e-5))
        worst[kind] = (max(errs), int(np.argmax(errs)), sum(e > 1e-6 for e in errs))
    elapsed = time.perf_counter() - start
    ok = all(w[0] <= 1e-6 for w in worst.values()) and elapsed <= 60
    detail = ", ".join(f"{k} max rel err {e:.2e} (config {s}, {c}/100 over 1e-6)" for k, (e, s, c) in worst.items())
    assert record(1, ok, f"{detail}; {elapsed:.1f}s"), "see decisions ledger: roundoff on near-zero coordinates"


def test_gradient_discrepancies_are_roundoff():
    """Companion to criterion 1: every mismatch sits at the float64 central-difference floor."""
    for kind in ("ce", "sr", "total"):
        for seed in range(100):
            prob = LossProblem(seed, kind)
            base = abs(prob.backward())
            numeric = numeric_gradient(prob.loss, prob.params, 1e-5)
            for p, n in zip(prob.params, numeric):
                # truncation O(h^2) plus cancellation eps*|L|/h, with a generous constant
                floor = 1e-9 + 50 * np.finfo(float).eps * max(base, 1.0) / 1e-5
                bad = (relative_error(p.grad, n) > 1e-6) & (np.abs(p.grad - n) > floor)
                assert not bad.any(), (kind, seed)


# -- 2 ------------------------------------------------------------------------------------

def test_criterion_02_sr_invariants():
    rng = np.random.default_rng(0)
    in_range = exact_self = exact_scaled = True
    worst_dot = 0.0
    for trial in range(1000):
        b, d = rng.integers(1, 9), rng.integers(1, 17)
        f = rng.standard_normal((b, d)) * rng.uniform(1e-3, 1e3)
        g = rng.standard_normal((b, d))
        loss, grad = stability_regularization(f, g)
        in_range &= -1.0 <= loss <= 1.0
        exact_self &= stability_regularization(f, f)[0] == -1.0
        exact_scaled &= stability_regularization(f, 2 * f)[0] == -1.0
        gn = np.linalg.norm(grad, axis=1) * np.linalg.norm(g, axis=1)
        dots = np.abs(np.sum(grad * g, axis=1)) / np.where(gn > 0, gn, 1.0)
        worst_dot = max(worst_dot, float(dots.max()))
    ok = in_range and exact_self and exact_scaled and worst_dot <= 1e-9
    assert record(2, ok, f"range {in_range}, L(f,f)=-1 {exact_self}, L(f,2f)=-1 {exact_scaled}, "
                         f"max normalized dot {worst_dot:.1e} over 1000 draws")


# -- 3 ------------------------------------------------------------------------------------

def test_criterion_03_z95_conversion():
    s1, s2 = z95_to_sigma(0.18, 10000), z95_to_sigma(0.20, 10000)
    rng = np.random.default_rng(3)
    trips = [(rng.uniform(1e-3, 50), int(rng.integers(1, 20000))) for _ in range(1000)]
    worst = max(max(abs(z95_to_sigma(sigma_to_z95(s, n), n) - s), abs(sigma_to_z95(z95_to_sigma(s, n), n) - s))
                for s, n in trips)
    ok = abs(s1 - 9.18) <= 0.005 and abs(s2 - 10.20) <= 0.005 and worst <= 1e-12
    assert record(3, ok, f"sigma(0.18)={s1:.4f}, sigma(0.20)={s2:.4f}, round-trip max err {worst:.1e}")


# -- 4 ------------------------------------------------------------------------------------

def test_criterion_04_surrogate():
    a, b = surrogate_mu_minus_3sigma(69.38, 9.71), surrogate_mu_minus_3sigma(85.87, 6.47)
    ok = f"{a:.2f}" == "40.25" and f"{b:.2f}" == "66.46"
    assert record(4, ok, f"69.38-3*9.71 -> {a:.2f}, 85.87-3*6.47 -> {b:.2f}")


# -- 5 ------------------------------------------------------------------------------------

def test_criterion_05_tail_constants():
    phi, cheb = normal_cdf(-3.0), chebyshev_tail_bound(3)
    ok = abs(phi - 0.00135) <= 1e-5 and cheb == 0.1
    assert record(5, ok, f"Phi(-3)={phi:.6f}, Chebyshev(3)={cheb!r}")


# -- 6 ------------------------------------------------------------------------------------

def test_criterion_06_metric_oracle():
    rng = np.random.default_rng(6)
    mismatches = monotone_violations = 0
    for i in range(1000):
        # half continuous, half on the 1/75 grid of a 5-way 15-query episode (many ties)
        v = rng.random(500) if i % 2 else rng.integers(0, 76, 500) / 75
        ordered = np.sort(v)
        worst = {}
        for k in (1, 10, 100):
            worst[k] = acc_worst_k(v, k)
            mismatches += worst[k] != float(np.mean(ordered[:k]))
        monotone_violations += not (worst[1] <= worst[10] <= worst[100] <= acc_mean(v))
    ok = mismatches == 0 and monotone_violations == 0
    assert record(6, ok, f"{mismatches} oracle mismatches, {monotone_violations} monotonicity violations "
                         "over 1000 samples of 500")


# -- 7 ------------------------------------------------------------------------------------

def test_criterion_07_freezing(default_world):
    cfg, store, backbone, episodes = default_world
    n_groups = len(backbone.groups)
    probe = store.features[store.indices_in(BASE)[::7]]
    failures = []
    for j in range(n_groups + 1):
        fit = finetune_episode(backbone, episodes[0], store, FinetuneConfig(adaptability=j), rng_stream(0, "c7", j))
        for g in range(n_groups - j):
            before = [p.value.tobytes() for layer in backbone.groups[g] for p in layer.params]
            after = [p.value.tobytes() for layer in fit.model.groups[g] for p in layer.params]
            if before != after:
                failures.append(f"j={j} group {g}")
        if j == 0 and backbone_forward(fit.model, probe).tobytes() != backbone_forward(backbone, probe).tobytes():
            failures.append("j=0 features differ")
    ok = not failures
    assert record(7, ok, f"j in 0..{n_groups}, full fine-tuning; violations: {failures or 'none'}")


# -- 8 ------------------------------------------------------------------------------------

def test_criterion_08_ensemble_discipline(default_world):
    cfg, store, backbone, episodes = default_world
    ft = FinetuneConfig()
    base = store.indices_in(BASE)
    part = partition_base(store, 4, seed=0)
    union = np.concatenate(part.subsets)
    disjoint_covering = union.size == base.size and np.array_equal(np.sort(union), np.sort(base))
    violations = steps = 0
    for ep in episodes[:3]:
        audit = {}
        run_ensemble_episode(backbone, ep, store, ft, part, seed=0, audit=audit)
        for m, log in audit.items():
            allowed = set(part.subsets[m].tolist())
            steps += len(log)
            violations += sum(not set(batch.tolist()) <= allowed for batch in log)

    # M=1: same SR draws, same parameters, same accuracy as the single-model path
    one = partition_base(store, 1, seed=0)
    pool = prepare_pool(backbone, SrPool.from_store(store), len(backbone.groups) - ft.adaptability)
    bitwise = np.array_equal(one.subsets[0], base)
    for ep in episodes[:5]:
        bitwise &= (run_ensemble_episode(backbone, ep, store, ft, one, seed=0, sr_pool=pool)
                    == run_single_episode(backbone, ep, store, ft, seed=0, sr_pool=pool))
        a = finetune_episode(backbone, ep, store, ft, member_stream(0, 0, ep.episode_id, 0), pool.subset(np.searchsorted(pool.pool.indices, one.subsets[0])))
        b = finetune_episode(backbone, ep, store, ft, member_stream(0, 0, ep.episode_id, 0), pool)
        bitwise &= all(p.value.tobytes() == q.value.tobytes()
                       for p, q in zip(a.model.params() + [a.head.weights], b.model.params() + [b.head.weights]))
    ok = disjoint_covering and violations == 0 and bitwise
    assert record(8, ok, f"{violations} audit violations in {steps} member-steps, disjoint+covering "
                         f"{disjoint_covering}, M=1 bitwise equal to AC+SR {bool(bitwise)}")


# -- 9 ------------------------------------------------------------------------------------

def test_criterion_09_determinism_and_desk_runtime(workspace, tmp_path):
    ep = _episode_file(workspace, "e10.jsonl", 10)
    common = ["--checkpoint", workspace / "backbone.ckpt", "--episodes", ep, "--set", "n_runs=2",
              "--variant", "ac-ensr"]
    outs = [tmp_path / n for n in ("a", "b", "par")]
    assert cli("bench", "--out", outs[0], *common) == 0
    assert cli("bench", "--out", outs[1], *common) == 0
    assert cli("bench", "--out", outs[2], *common, "--workers", 2) == 0
    files = [sorted(o.glob("*_run*.csv")) for o in outs]
    blobs = [[f.read_bytes() for f in fs] for fs in files]
    rerun_equal = blobs[0] == blobs[1] and len(blobs[0]) == 2
    parallel_equal = blobs[0] == blobs[2]

    desk_eps = _episode_file(workspace, "e100.jsonl", 100)
    start = time.perf_counter()
    assert cli("bench", "--out", tmp_path / "desk", "--checkpoint", workspace / "backbone.ckpt",
               "--episodes", desk_eps, "--set", "n_runs=1") == 0
    elapsed = time.perf_counter() - start
    ok = rerun_equal and parallel_equal and elapsed <= 600
    assert record(9, ok, f"rerun byte-identical {rerun_equal}, parallel == serial {parallel_equal}, "
                         f"desk benchmark (default ac-sr, 100 episodes, 1 run, K=1) {elapsed:.1f}s")


# -- 10 -----------------------------------------------------------------------------------

def test_criterion_10_directional_pattern(workspace, tmp_path):
    ep = _episode_file(workspace, "e200.jsonl", 200)
    out = tmp_path / "c10"
    for variant in ("plain", "ac-sr"):
        assert cli("bench", "--out", out, "--checkpoint", workspace / "backbone.ckpt", "--episodes", ep,
                   "--set", "n_runs=2", "--variant", variant) == 0
    assert cli("report", out, "--out", out) == 0
    report = json.loads((out / "report.json").read_text())
    plain, sr = report["plain"], report["ac-sr"]
    d_acc1 = 100 * (sr["acc_worst"]["1"] - plain["acc_worst"]["1"])
    d_sigma = 100 * (sr["sigma"] - plain["sigma"])
    ok = d_acc1 >= 0 and d_sigma <= 0.5
    assert record(10, ok, f"ACC_1 plain {100 * plain['acc_worst']['1']:.2f} vs AC+SR {100 * sr['acc_worst']['1']:.2f} "
                          f"(margin {d_acc1:+.2f}); sigma plain {100 * plain['sigma']:.2f} vs AC+SR "
                          f"{100 * sr['sigma']:.2f} (margin {d_sigma:+.2f}); ACC_m {100 * plain['acc_m']:.2f} vs "
                          f"{100 * sr['acc_m']:.2f}")


# -- 11 -----------------------------------------------------------------------------------

def test_criterion_11_protocol_shape(workspace, tmp_path):
    ep = _episode_file(workspace, "e500.jsonl", 500)
    episodes = load_episodes(ep)
    shape_ok = len(episodes) == 500 and all(
        len(e.support) == 5 and len(e.query) == 75 and not set(e.support) & set(e.query)
        and len(set(e.support)) == 5 and len(set(e.query)) == 75 for e in episodes)
    out = tmp_path / "c11"
    assert cli("bench", "--out", out, "--checkpoint", workspace / "backbone.ckpt", "--episodes", ep,
               "--set", "epochs=1") == 0
    runs = [read_run_results(p) for p in sorted(out.glob("*_run*.csv"))]
    rows = [len(r.per_episode_accuracy) for r in runs]
    grid = all(abs(a * 75 - round(a * 75)) < 1e-9 for r in runs for a in r.per_episode_accuracy)
    hashes = {r.episode_file_hash for r in runs}
    ok = shape_ok and rows == [500] * 5 and grid and hashes == {file_sha256(ep)}
    assert record(11, ok, f"500 episodes of 5 support / 75 query, disjoint {shape_ok}; "
                          f"bench emitted {len(runs)} files with rows {sorted(set(rows))}")
