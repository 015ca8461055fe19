"""Acceptance gate: one PASS/FAIL line per criterion, printed in the run summary."""

import time
from dataclasses import replace

import numpy as np

from altgrad import bench as B
from altgrad import causal as C
from altgrad import exact as E
from altgrad import fastgrad as F
from altgrad import linalg as la
from altgrad import model as M
from altgrad.kernel import KernelConfig, approx_attention
from conftest import linear_probe_loss, record, single_layer


def _elapsed(t0):
    return time.perf_counter() - t0


def test_1_oracle_triangle():
    t0 = time.perf_counter()
    worst_cd = worst_fd = 0.0
    for seed in range(20):
        x, wts, g_i = single_layer(seed, 16, 3)
        cache = E.forward_exact(x, wts)
        d = E.grad_T_exact_dterms(cache, x, wts, g_i)
        worst_cd = max(worst_cd, la.linf(E.grad_T_exact_cterms(cache, x, wts, g_i) - d))
        worst_fd = max(worst_fd, la.linf(d - E.finite_diff_grad(linear_probe_loss(g_i, wts), x)))
    secs = _elapsed(t0)
    ok = worst_cd <= 1e-10 and worst_fd <= 1e-5 and secs < 10
    record(1, "oracle triangle", ok, f"C-vs-D {worst_cd:.2e} (<=1e-10), D-vs-FD {worst_fd:.2e} (<=1e-5), {secs:.2f}s")
    assert ok


def test_2_fast_path_fidelity():
    t0 = time.perf_counter()
    x, wts, g_i = single_layer(0, 16, 3)
    cache = E.forward_exact(x, wts)
    dense = E.dense_d_terms(cache, x, wts, g_i)
    f_lr, h, s = F.fast_forward(x, wts, KernelConfig(10, bound_R=0.5))
    fast = F.fast_d_terms(x, wts, f_lr, h, s, g_i)
    errs = {k: la.linf(fast[k] - dense[k]) for k in F.TERM_ORDER}
    errs["g_w"] = la.linf(F.fast_grad_W(x, f_lr, g_i, h) - E.grad_W_exact(cache, x, g_i))
    errs["g_v"] = la.linf(F.fast_grad_WV(x, f_lr, g_i) - E.grad_WV_exact(cache, x, g_i))
    secs = _elapsed(t0)
    worst = max(errs.values())
    ok = worst <= 1e-6 and secs < 10
    record(2, "fast-path fidelity", ok, f"max term error {worst:.2e} (<=1e-6), {secs:.2f}s")
    assert ok


def _worst(g: M.ModelGradients, ref: dict) -> float:
    worst = la.linf(g.g_x - ref["g_x"])
    for i, lg in enumerate(g.layers):
        for name in ("g_wq", "g_wk", "g_wv", "g_wg"):
            worst = max(worst, la.linf(getattr(lg, name) - ref[(i, name)]))
    return worst


def test_3_full_model_fidelity():
    t0 = time.perf_counter()
    cfg = M.ModelConfig(
        m=3, n=12, d=4, heads=2, use_residual=True, use_causal=True,
        kernel=KernelConfig(10, bound_R=4.0),
    )
    x, weights, cfg = M.random_instance(0, cfg, x_bound=0.4)
    ref = B.model_fd_gradients(x, weights, cfg)
    errs = {}
    for path in ("exact", "fast"):
        c = replace(cfg, path=path)
        tapes, _ = M.forward(x, weights, c)
        errs[path] = _worst(M.multigrad(tapes, weights, c), ref)
    secs = _elapsed(t0)
    ok = errs["fast"] <= 1e-3 and errs["exact"] <= 1e-5 and secs < 60
    record(3, "full-model fidelity", ok, f"fast-vs-FD {errs['fast']:.2e} (<=1e-3), exact-vs-FD {errs['exact']:.2e} (<=1e-5), {secs:.2f}s")
    assert ok


def test_4_prefix_sum_exactness():
    t0 = time.perf_counter()
    rng = la.make_rng(2024)
    worst, flops_exact = 0.0, True
    for _ in range(100):
        n, k = int(rng.integers(1, 65)), int(rng.integers(1, 9))
        u0, v0 = la.random_matrix(rng, n, k, 1.0), la.random_matrix(rng, n, k, 1.0)
        v = la.random_matrix(rng, n, 1, 1.0).ravel()
        counter = la.FlopCounter()
        y = C.causal_multiply_vec(u0, v0, v, counter)
        worst = max(worst, la.linf(y - np.tril(u0 @ v0.T) @ v))
        flops_exact &= counter.flops == 4 * n * k
    secs = _elapsed(t0)
    ok = worst <= 1e-12 and flops_exact and secs < 5
    record(4, "prefix-sum masked multiply", ok, f"max error {worst:.2e} (<=1e-12), flops==4nk: {flops_exact}, {secs:.2f}s")
    assert ok


def test_5_near_linear_scaling():
    t0 = time.perf_counter()
    report = B.run(B.RunSpec("scaling"))
    secs = _elapsed(t0)
    fast, dense = report.summary["fast_flop_slope"], report.summary["dense_flop_slope"]
    ok = fast <= 1.15 and dense >= 1.85 and secs < 300
    record(5, "near-linear scaling", ok, f"fast slope {fast:.3f} (<=1.15), dense slope {dense:.3f} (>=1.85), {secs:.2f}s")
    assert ok


def test_6_error_vs_degree():
    t0 = time.perf_counter()
    monotone = bounded = True
    for seed in range(3):
        report = B.run(B.RunSpec("errsweep", seed=seed))
        monotone &= report.summary["monotone"]
        bounded &= report.summary["within_bound"]
    secs = _elapsed(t0)
    ok = monotone and bounded and secs < 30
    record(6, "error non-increasing in degree", ok, f"monotone {monotone}, within bound {bounded}, 3 instances, {secs:.2f}s")
    assert ok


def test_7_structural_invariants():
    x, wts, g_i = single_layer(5, 64, 4)
    cfg = KernelConfig(6)
    checks = {}
    checks["f row sums"] = la.linf(E.forward_exact(x, wts).f.sum(axis=1) - 1)
    checks["f_approx row sums"] = la.linf(approx_attention(x, wts, cfg).row_sums() - 1)
    rng = la.make_rng(0)
    u1, v1, u2, v2 = (la.random_matrix(rng, 8, 3, 1.0) for _ in range(4))
    checks["row-kron identity"] = la.linf(
        la.rowwise_kron(u1, u2) @ la.rowwise_kron(v1, v2).T - (u1 @ v1.T) * (u2 @ v2.T)
    )
    p1, p2 = E.dense_p(E.forward_exact(x, wts), g_i)
    checks["p row sums"] = la.linf((p1 - p2).sum(axis=1))
    limits = {"f row sums": 1e-10, "f_approx row sums": 1e-10, "row-kron identity": 1e-12, "p row sums": 1e-10}
    ok = all(checks[k] <= limits[k] for k in limits)

    n = 512
    xs, ws, gs = single_layer(1, n, 4)
    counter = la.FlopCounter()
    a = F.single_grad(xs, ws, np.eye(4), "identity", gs, KernelConfig(3), counter=counter)
    no_square = not any(len(sh) == 2 and min(sh) >= n for sh in counter.allocations)
    mcounter = la.FlopCounter()
    C.masked_bundle(xs, ws, gs, KernelConfig(3), counter=mcounter)
    no_square &= not any(len(sh) == 2 and min(sh) >= n for sh in mcounter.allocations)
    b = F.single_grad(xs, ws, np.eye(4), "identity", gs, KernelConfig(3))
    same = all(np.array_equal(getattr(a, k), getattr(b, k)) for k in ("g_t", "g_w", "g_v"))
    spec = B.RunSpec("gradcheck", n=8, causal=True, heads=2)
    same &= B.run(spec).to_json() == B.run(spec).to_json()
    ok = ok and no_square and same
    detail = ", ".join(f"{k} {v:.1e}" for k, v in checks.items())
    record(7, "structural invariants", ok, f"{detail}, no n x n allocation {no_square}, bit-exact reruns {same}")
    assert ok


def test_8_training_demo():
    t0 = time.perf_counter()
    report = B.run(B.RunSpec("train-demo", seed=7, n=16, d=4, layers=2, residual=True, steps=20))
    secs = _elapsed(t0)
    first, last = report.summary["initial_loss"], report.summary["final_loss"]
    drop = 1 - last / first
    ok = drop >= 0.5 and secs < 30
    record(8, "training demo", ok, f"loss {first:.3f} -> {last:.3f}, reduction {drop:.1%} (>=50%), {secs:.2f}s")
    assert ok
