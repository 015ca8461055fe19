"""m-layer attention model: forward pass, top-down gradient loop and SGD.

Layer i maps ``T_{i-1}`` to ``T_i``:

    A = MultiHead(T_{i-1})
    without residual:  T_i = phi(A W_g)
    with residual:     Z_i = T_{i-1} + A,   T_i = Z_i + phi(Z_i W_g)

Head l uses the column slice ``[l d_h, (l+1) d_h)`` of ``W_Q, W_K, W_V`` and
score scale ``1/d_h``; head outputs are concatenated in slice order.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import causal, fastgrad
from . import linalg as la
from .errors import ParameterError
from .exact import (
    ACTIVATIONS,
    AttentionWeights,
    ForwardCache,
    GradientBundle,
    LossSpec,
    activate,
    activation_grad,
    forward_exact,
    grad_T_exact_dterms,
    grad_W_exact,
    grad_WQ_WK_from_W,
    grad_WV_exact,
    loss_and_upstream,
    output_head_grad,
    propagate_through_g,
)
from .kernel import KernelConfig
from .linalg import FlopCounter


@dataclass(frozen=True)
class LayerWeights:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_g: np.ndarray


@dataclass(frozen=True)
class ModelConfig:
    m: int
    n: int
    d: int
    heads: int = 1
    use_residual: bool = False
    use_causal: bool = False
    activation: str = "identity"
    loss: LossSpec | None = None
    kernel: KernelConfig = field(default_factory=lambda: KernelConfig(degree=10))
    path: str = "exact"

    def __post_init__(self):
        if self.m < 1 or self.n < 1 or self.d < 1:
            raise ParameterError(f"m, n, d must be positive, got {self.m}, {self.n}, {self.d}")
        if self.heads < 1 or self.d % self.heads:
            raise ParameterError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.activation not in ACTIVATIONS:
            raise ParameterError(f"unknown activation {self.activation!r}")
        if self.path not in ("exact", "fast"):
            raise ParameterError(f"unknown path {self.path!r}")

    @property
    def d_head(self) -> int:
        return self.d // self.heads

    def head_slices(self) -> list[slice]:
        dh = self.d_head
        return [slice(l * dh, (l + 1) * dh) for l in range(self.heads)]


@dataclass
class HeadTape:
    wts: AttentionWeights
    scale: float
    h: np.ndarray
    s: np.ndarray
    # ForwardCache (exact), LowRankFactor (fast) or MaskedAttentionFactors (fast, causal)
    factors: object


@dataclass
class LayerTape:
    t_in: np.ndarray
    heads: list[HeadTape]
    attn_out: np.ndarray
    z: np.ndarray | None
    t_out: np.ndarray


@dataclass(frozen=True)
class LayerGradients:
    g_wq: np.ndarray
    g_wk: np.ndarray
    g_wv: np.ndarray
    g_wg: np.ndarray


@dataclass(frozen=True)
class ModelGradients:
    layers: list[LayerGradients]
    g_x: np.ndarray
    # g_t[i] is dL/dT_i for i = 0..m-1, i.e. the gradient entering layer i+1
    g_t: list[np.ndarray] = field(default_factory=list)
    g_out: np.ndarray | None = None


def head_weights(lw: LayerWeights, sl: slice) -> AttentionWeights:
    return AttentionWeights(lw.w_q[:, sl], lw.w_k[:, sl], lw.w_v[:, sl])


def _head_forward(x, wts, scale, cfg: ModelConfig, counter) -> HeadTape:
    if cfg.path == "exact":
        cache = forward_exact(x, wts, scale=scale, causal=cfg.use_causal, counter=counter)
        return HeadTape(wts, scale, cache.h, cache.s, cache)
    if cfg.use_causal:
        maf, h, s = causal.masked_forward(x, wts, cfg.kernel, scale, counter)
        return HeadTape(wts, scale, h, s, maf)
    f_lr, h, s = fastgrad.fast_forward(x, wts, cfg.kernel, scale, counter)
    return HeadTape(wts, scale, h, s, f_lr)


def _head_backward(x, tape: HeadTape, g_i, cfg: ModelConfig, counter) -> GradientBundle:
    fac, c, cap = tape.factors, tape.scale, cfg.kernel.rank_cap
    if isinstance(fac, ForwardCache):
        return GradientBundle(
            g_t=grad_T_exact_dterms(fac, x, tape.wts, g_i, counter),
            g_w=grad_W_exact(fac, x, g_i, counter),
            g_v=grad_WV_exact(fac, x, g_i, counter),
        )
    if isinstance(fac, causal.MaskedAttentionFactors):
        terms, g_w, g_v = causal.masked_d_terms(
            fac, x, tape.wts, tape.h, tape.s, g_i, c, cap, counter
        )
        return GradientBundle(g_t=fastgrad.sum_terms(terms, counter), g_w=g_w, g_v=g_v)
    return GradientBundle(
        g_t=fastgrad.fast_grad_T(x, tape.wts, fac, tape.h, tape.s, g_i, c, cap, counter),
        g_w=fastgrad.fast_grad_W(x, fac, g_i, tape.h, c, cap, counter),
        g_v=fastgrad.fast_grad_WV(x, fac, g_i, counter),
    )


def layer_forward(
    t_in: np.ndarray, lw: LayerWeights, cfg: ModelConfig, counter: FlopCounter | None = None
) -> LayerTape:
    scale = 1.0 / cfg.d_head
    heads = [_head_forward(t_in, head_weights(lw, sl), scale, cfg, counter) for sl in cfg.head_slices()]
    attn_out = np.concatenate([ht.s for ht in heads], axis=1)
    if cfg.use_residual:
        z = t_in + attn_out
        t_out = z + activate(la.matmul(z, lw.w_g, counter), cfg.activation)
    else:
        z = None
        t_out = activate(la.matmul(attn_out, lw.w_g, counter), cfg.activation)
    return LayerTape(t_in, heads, attn_out, z, t_out)


def forward(
    x: np.ndarray,
    weights: list[LayerWeights],
    cfg: ModelConfig,
    counter: FlopCounter | None = None,
) -> tuple[list[LayerTape], float]:
    """Run all layers (``g_0`` is the identity) and evaluate the loss on ``T_m``."""
    if len(weights) != cfg.m:
        raise ParameterError(f"expected {cfg.m} layers of weights, got {len(weights)}")
    if x.shape != (cfg.n, cfg.d):
        raise ParameterError(f"input shape {x.shape} does not match (n, d)=({cfg.n}, {cfg.d})")
    tapes = []
    t = x
    for lw in weights:
        tape = layer_forward(t, lw, cfg, counter)
        tapes.append(tape)
        t = tape.t_out
    loss = loss_and_upstream(t, cfg.loss)[0] if cfg.loss is not None else float("nan")
    return tapes, loss


def total_loss(x: np.ndarray, weights: list[LayerWeights], cfg: ModelConfig) -> float:
    return forward(x, weights, cfg)[1]


def loss_from_layer(t: np.ndarray, weights: list[LayerWeights], cfg: ModelConfig, start: int) -> float:
    """Loss as a function of ``T_start``, running layers ``start+1..m``."""
    for lw in weights[start:]:
        t = layer_forward(t, lw, cfg).t_out
    return loss_and_upstream(t, cfg.loss)[0]


def multigrad(
    tapes: list[LayerTape],
    weights: list[LayerWeights],
    cfg: ModelConfig,
    counter: FlopCounter | None = None,
) -> ModelGradients:
    """Backward pass from dL/dT_m down to dL/dX, one layer at a time."""
    if cfg.loss is None:
        raise ParameterError("multigrad needs a loss")
    g = loss_and_upstream(tapes[-1].t_out, cfg.loss)[1]
    g_out = None
    if cfg.loss.kind == "cross-entropy":
        g_out = output_head_grad(tapes[-1].t_out, cfg.loss)
    layer_grads: list[LayerGradients] = []
    g_ts: list[np.ndarray] = []
    for tape, lw in zip(reversed(tapes), reversed(weights)):
        pre_in = tape.z if cfg.use_residual else tape.attn_out
        pre = la.matmul(pre_in, lw.w_g, counter)
        g_pre = la.hadamard(g, activation_grad(pre, cfg.activation), counter)
        g_wg = la.matmul(pre_in.T, g_pre, counter)
        back = propagate_through_g(g, pre_in, lw.w_g, cfg.activation, counter)
        g_attn = la.add(g, back, counter) if cfg.use_residual else back

        g_wq = np.zeros_like(lw.w_q)
        g_wk = np.zeros_like(lw.w_k)
        g_wv = np.zeros_like(lw.w_v)
        g_in = np.zeros_like(tape.t_in)
        for sl, ht in zip(cfg.head_slices(), tape.heads):
            bundle = _head_backward(tape.t_in, ht, g_attn[:, sl], cfg, counter)
            g_in = la.add(g_in, bundle.g_t, counter)
            g_wq[:, sl], g_wk[:, sl] = grad_WQ_WK_from_W(bundle.g_w, ht.wts)
            g_wv[:, sl] = bundle.g_v
        g = la.add(g_attn, g_in, counter) if cfg.use_residual else g_in
        layer_grads.append(LayerGradients(g_wq, g_wk, g_wv, g_wg))
        g_ts.append(g)
    layer_grads.reverse()
    g_ts.reverse()
    return ModelGradients(layer_grads, g, g_ts, g_out)


def gradient_descent_step(
    weights: list[LayerWeights], grads: ModelGradients, lr: float
) -> list[LayerWeights]:
    if lr < 0:
        raise ParameterError(f"learning rate must be nonnegative, got {lr}")
    return [
        LayerWeights(
            w_q=lw.w_q - lr * lg.g_wq,
            w_k=lw.w_k - lr * lg.g_wk,
            w_v=lw.w_v - lr * lg.g_wv,
            w_g=lw.w_g - lr * lg.g_wg,
        )
        for lw, lg in zip(weights, grads.layers)
    ]


def random_weights(
    rng: np.random.Generator, cfg: ModelConfig, bound: float | None = None
) -> list[LayerWeights]:
    """Attention weights uniform in ``±0.5/d``; ``W_g`` is identity plus the same noise."""
    b = 0.5 / cfg.d if bound is None else bound
    d = cfg.d
    out = []
    for _ in range(cfg.m):
        w_q, w_k, w_v, w_g = (la.random_matrix(rng, d, d, b) for _ in range(4))
        out.append(LayerWeights(w_q, w_k, w_v, np.eye(d) + w_g))
    return out


def random_instance(
    seed: int,
    cfg: ModelConfig,
    x_bound: float = 0.5,
    loss_kind: str = "squared",
    d_voc: int = 8,
) -> tuple[np.ndarray, list[LayerWeights], ModelConfig]:
    """Seeded ``(X, weights, cfg_with_loss)``; X uniform in ``±x_bound``."""
    rng = la.make_rng(seed)
    x = la.random_matrix(rng, cfg.n, cfg.d, x_bound)
    weights = random_weights(rng, cfg)
    if loss_kind == "squared":
        loss = LossSpec("squared", la.random_matrix(rng, cfg.n, cfg.d, x_bound))
    elif loss_kind == "cross-entropy":
        labels = rng.integers(0, d_voc, size=cfg.n)
        target = np.eye(d_voc)[labels]
        loss = LossSpec("cross-entropy", target, la.random_matrix(rng, cfg.d, d_voc, 1.0))
    else:
        raise ParameterError(f"unknown loss kind {loss_kind!r}")
    return x, weights, replace(cfg, loss=loss)
