import numpy as np
import pytest

from altgrad import exact as E
from altgrad import fastgrad as F
from altgrad import linalg as la
from altgrad.kernel import KernelConfig
from conftest import single_layer

CFG = KernelConfig(10)


def _fast(x, wts, g_i, cfg=CFG, counter=None):
    f_lr, h, s = F.fast_forward(x, wts, cfg, counter=counter)
    return f_lr, h, s


@pytest.mark.parametrize("seed", range(5))
def test_d_terms_match_dense_termwise(seed):
    x, wts, g_i = single_layer(seed, 16, 3)
    cache = E.forward_exact(x, wts)
    dense = E.dense_d_terms(cache, x, wts, g_i)
    f_lr, h, s = _fast(x, wts, g_i)
    fast = F.fast_d_terms(x, wts, f_lr, h, s, g_i)
    assert set(fast) == set(F.TERM_ORDER)
    for name in F.TERM_ORDER:
        assert la.linf(fast[name] - dense[name]) <= 1e-6, name


def test_k_vector():
    ones = np.ones((5, 3))
    assert np.array_equal(F.compute_K(ones, ones), np.full(5, 3.0))
    assert not F.compute_K(np.zeros((5, 3)), ones).any()
    rng = la.make_rng(0)
    g, s = la.random_matrix(rng, 8, 3, 1.0), la.random_matrix(rng, 8, 3, 1.0)
    brute = np.array([sum(g[i, j] * s[i, j] for j in range(3)) for i in range(8)])
    assert la.linf(F.compute_K(g, s) - brute) <= 1e-15


def test_weight_gradients_match_dense():
    x, wts, g_i = single_layer(3, 16, 3)
    exact = E.exact_bundle(x, wts, g_i)
    f_lr, h, s = _fast(x, wts, g_i)
    g_w = F.fast_grad_W(x, f_lr, g_i, h)
    assert g_w.shape == (3, 3)
    assert la.linf(g_w - exact.g_w) <= 1e-6
    assert la.linf(F.fast_grad_WV(x, f_lr, g_i) - exact.g_v) <= 1e-6


def test_zero_cases():
    x, wts, g_i = single_layer(4, 16, 3)
    f_lr, h, s = _fast(x, wts, g_i)
    zg = np.zeros_like(g_i)
    assert not F.fast_grad_T(x, wts, f_lr, h, s, zg).any()
    assert not F.fast_grad_WV(x, f_lr, zg).any()
    dead = E.AttentionWeights(wts.w_q, wts.w_k, np.zeros((3, 3)))
    f_lr, h, s = _fast(x, dead, g_i)
    assert not F.fast_grad_W(x, f_lr, g_i, h).any()


def test_grad_wv_uniform_closed_form():
    x, wts, g_i = single_layer(5, 16, 3)
    zero = np.zeros((3, 3))
    f_lr, _, _ = _fast(x, E.AttentionWeights(zero, zero, wts.w_v), g_i)
    closed = x.T @ (np.full((16, 16), 1 / 16) @ g_i)
    assert la.linf(F.fast_grad_WV(x, f_lr, g_i) - closed) <= 1e-12


def test_single_grad_matches_exact_bundle():
    x, wts, up = single_layer(6, 16, 3)
    w_g = np.eye(3)
    got = F.single_grad(x, wts, w_g, "identity", up, CFG)
    want = E.exact_bundle(x, wts, up)
    for name in ("g_t", "g_w", "g_v"):
        assert la.linf(getattr(got, name) - getattr(want, name)) <= 1e-6
    zero = F.single_grad(x, wts, w_g, "identity", np.zeros_like(up), CFG)
    assert not (zero.g_t.any() or zero.g_w.any() or zero.g_v.any())


def test_single_grad_is_deterministic():
    x, wts, up = single_layer(8, 16, 3)
    w_g = np.eye(3) + 0.1
    a = F.single_grad(x, wts, w_g, "gelu-tanh", up, CFG)
    b = F.single_grad(x, wts, w_g, "gelu-tanh", up, CFG)
    for name in ("g_t", "g_w", "g_v"):
        assert np.array_equal(getattr(a, name), getattr(b, name))


def _flops(n, fast):
    x, wts, up = single_layer(0, n, 3)
    counter = la.FlopCounter()
    if fast:
        F.single_grad(x, wts, np.eye(3), "identity", up, KernelConfig(4), counter=counter)
    else:
        cache = E.forward_exact(x, wts, counter=counter)
        E.grad_T_exact_dterms(cache, x, wts, up, counter)
        E.grad_W_exact(cache, x, up, counter)
        E.grad_WV_exact(cache, x, up, counter)
    return counter


@pytest.mark.parametrize("n", [64, 128, 256])
def test_flops_under_doubling(n):
    assert _flops(2 * n, True).flops / _flops(n, True).flops <= 2.2
    assert _flops(2 * n, False).flops / _flops(n, False).flops >= 3.8


def test_no_quadratic_allocation():
    n = 512
    counter = _flops(n, True)
    assert not counter.saw_shape((n, n))
    assert not any(len(sh) == 2 and min(sh) >= n for sh in counter.allocations)
    assert _flops(n, False).saw_shape((n, n))


def test_error_non_increasing_in_degree():
    x, wts, g_i = single_layer(2, 16, 3, x_bound=1.0, w_bound=1.0)
    want = E.grad_T_exact_dterms(E.forward_exact(x, wts), x, wts, g_i)
    errs = []
    for g in (2, 4, 6, 8, 10):
        f_lr, h, s = _fast(x, wts, g_i, KernelConfig(g))
        errs.append(la.linf(F.fast_grad_T(x, wts, f_lr, h, s, g_i) - want))
    assert all(b <= a + 1e-14 for a, b in zip(errs, errs[1:])), errs
