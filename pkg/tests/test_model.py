from dataclasses import replace

import numpy as np
import pytest

from altgrad import exact as E
from altgrad import linalg as la
from altgrad import model as M
from altgrad.bench import model_fd_gradients
from altgrad.errors import ParameterError
from altgrad.kernel import KernelConfig

KERNEL = KernelConfig(10, bound_R=4.0)


def instance(seed=0, loss_kind="squared", x_bound=0.5, **kw):
    base = dict(m=2, n=12, d=4, kernel=KERNEL)
    base.update(kw)
    return M.random_instance(seed, M.ModelConfig(**base), x_bound=x_bound, loss_kind=loss_kind)


def grads(x, weights, cfg, path):
    c = replace(cfg, path=path)
    tapes, _ = M.forward(x, weights, c)
    return M.multigrad(tapes, weights, c)


def worst_vs(g: M.ModelGradients, ref: dict) -> float:
    worst = la.linf(g.g_x - ref["g_x"])
    for i, lg in enumerate(g.layers):
        worst = max(worst, la.linf(g.g_t[i] - ref[(i, "g_t")]))
        for name in ("g_wq", "g_wk", "g_wv", "g_wg"):
            worst = max(worst, la.linf(getattr(lg, name) - ref[(i, name)]))
    return worst


def test_single_head_forward_reduction():
    x, weights, cfg = instance(m=1, heads=1)
    eye = [replace(weights[0], w_g=np.eye(4))]
    tape = M.forward(x, eye, cfg)[0][0]
    head = E.forward_exact(x, M.head_weights(eye[0], slice(0, 4)))
    assert np.array_equal(tape.attn_out, head.s)
    assert np.array_equal(tape.t_out, head.s)


@pytest.mark.parametrize("causal", [False, True])
def test_fast_forward_matches_exact(causal):
    x, weights, cfg = instance(n=16, use_causal=causal)
    t_exact = M.forward(x, weights, cfg)[0][-1].t_out
    t_fast = M.forward(x, weights, replace(cfg, path="fast"))[0][-1].t_out
    assert la.linf(t_exact - t_fast) <= 1e-6


def test_one_layer_gradients_reduce_to_attention_bundle():
    x, weights, cfg = instance(m=1)
    weights = [replace(weights[0], w_g=np.eye(4))]
    tapes, _ = M.forward(x, weights, cfg)
    g = M.multigrad(tapes, weights, cfg)
    upstream = E.loss_and_upstream(tapes[-1].t_out, cfg.loss)[1]
    wts = M.head_weights(weights[0], slice(0, 4))
    bundle = E.exact_bundle(x, wts, upstream, scale=0.25)
    assert la.linf(g.g_x - bundle.g_t) <= 1e-14
    assert la.linf(g.layers[0].g_wv - bundle.g_v) <= 1e-14
    g_wq, g_wk = E.grad_WQ_WK_from_W(bundle.g_w, wts)
    assert la.linf(g.layers[0].g_wq - g_wq) <= 1e-14
    assert la.linf(g.layers[0].g_wk - g_wk) <= 1e-14


LATTICE = [
    dict(use_residual=r, use_causal=c, heads=h, activation=a)
    for r in (False, True)
    for c in (False, True)
    for h in (1, 2)
    for a in ("identity", "gelu-tanh")
]


@pytest.mark.parametrize("switches", LATTICE, ids=lambda s: "-".join(f"{k[4:] if k.startswith('use_') else k}={v}" for k, v in s.items()))
def test_paths_agree_on_switch_lattice(switches):
    x, weights, cfg = instance(seed=3, n=8, **switches)
    exact = grads(x, weights, cfg, "exact")
    fast = grads(x, weights, cfg, "fast")
    ref = {"g_x": exact.g_x}
    for i, lg in enumerate(exact.layers):
        ref[(i, "g_t")] = exact.g_t[i]
        for name in ("g_wq", "g_wk", "g_wv", "g_wg"):
            ref[(i, name)] = getattr(lg, name)
    assert worst_vs(fast, ref) <= 1e-4


def test_full_model_against_finite_differences():
    x, weights, cfg = instance(seed=1, m=3, use_residual=True, use_causal=True, heads=2, x_bound=0.4)
    ref = model_fd_gradients(x, weights, cfg)
    assert worst_vs(grads(x, weights, cfg, "exact"), ref) <= 1e-5
    assert worst_vs(grads(x, weights, cfg, "fast"), ref) <= 1e-3


@pytest.mark.parametrize("activation", ["relu", "gelu-tanh"])
def test_cross_entropy_against_finite_differences(activation):
    x, weights, cfg = instance(seed=2, loss_kind="cross-entropy", use_residual=True, activation=activation)
    ref = model_fd_gradients(x, weights, cfg)
    assert worst_vs(grads(x, weights, cfg, "exact"), ref) <= 1e-5
    assert worst_vs(grads(x, weights, cfg, "fast"), ref) <= 1e-5


def test_gradients_bit_identical_across_runs():
    x, weights, cfg = instance(seed=4, use_residual=True, use_causal=True, heads=2)
    a, b = grads(x, weights, cfg, "fast"), grads(x, weights, cfg, "fast")
    assert np.array_equal(a.g_x, b.g_x)
    for la_, lb in zip(a.layers, b.layers):
        for name in ("g_wq", "g_wk", "g_wv", "g_wg"):
            assert np.array_equal(getattr(la_, name), getattr(lb, name))


def test_sgd_step_edge_cases():
    x, weights, cfg = instance()
    g = grads(x, weights, cfg, "exact")
    for old, new in zip(weights, M.gradient_descent_step(weights, g, 0.0)):
        assert all(np.array_equal(getattr(old, k), getattr(new, k)) for k in ("w_q", "w_k", "w_v", "w_g"))
    zeros = M.ModelGradients(
        [M.LayerGradients(*(np.zeros((4, 4)),) * 4) for _ in weights], np.zeros_like(x)
    )
    for old, new in zip(weights, M.gradient_descent_step(weights, zeros, 0.1)):
        assert np.array_equal(old.w_q, new.w_q) and np.array_equal(old.w_g, new.w_g)
    with pytest.raises(ParameterError):
        M.gradient_descent_step(weights, g, -1.0)


def test_twenty_steps_strictly_decrease_loss():
    x, weights, cfg = instance(seed=7, n=16, use_residual=True)
    cfg = replace(cfg, path="fast")
    losses = []
    for _ in range(21):
        tapes, loss = M.forward(x, weights, cfg)
        losses.append(loss)
        weights = M.gradient_descent_step(weights, M.multigrad(tapes, weights, cfg), 0.005)
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_config_validation():
    with pytest.raises(ParameterError):
        M.ModelConfig(m=1, n=4, d=4, heads=3)
    with pytest.raises(ParameterError):
        M.ModelConfig(m=1, n=4, d=4, activation="tanh")
    x, weights, cfg = instance()
    with pytest.raises(ParameterError):
        M.forward(x, weights[:1], cfg)
