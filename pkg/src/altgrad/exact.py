"""Exact (quadratic) attention forward pass, losses and gradient oracles.

Conventions used throughout the package: for one head with input ``X`` (n×d),
key-query matrix ``W`` (d×d) and value matrix ``W_V`` (d×d_v),

    S = c · X W X^T,   u = exp(S),   alpha = u 1,   f = diag(alpha)^{-1} u,
    h = X W_V,         s = f h,

where ``c`` is the score scale (1/d for a single head, 1/d_h per head).
``f`` is row-stochastic: row ``i`` is the distribution token ``i`` attends with.
With ``G = dL/ds``, ``q = G h^T``, ``p1 = f ⊙ q``, ``K = (G ⊙ s) 1`` and
``p = p1 - diag(K) f``, the gradients are

    dL/dX   = c·(p X W^T + p^T X W) + f^T G W_V^T
    dL/dW   = c · X^T p X
    dL/dW_V = X^T f^T G.

The five matrix terms of dL/dX are returned individually by :func:`dense_d_terms`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import linalg as la
from .errors import DimensionError, NumericalDomainError, ParameterError, RangeError
from .linalg import FlopCounter

# exp overflows a double just above 709.78
_EXP_LIMIT = 700.0

ACTIVATIONS = ("identity", "relu", "gelu-tanh")


@dataclass(frozen=True)
class AttentionWeights:
    """Query/key/value weights of one head; ``w`` caches ``w_q @ w_k.T``."""

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.w_q.shape != self.w_k.shape:
            raise DimensionError(f"w_q {self.w_q.shape} and w_k {self.w_k.shape} differ")
        if self.w_v.shape[0] != self.w_q.shape[0]:
            raise DimensionError(f"w_v {self.w_v.shape} does not match d={self.w_q.shape[0]}")
        object.__setattr__(self, "w", self.w_q @ self.w_k.T)

    @property
    def d(self) -> int:
        return self.w_q.shape[0]


@dataclass(frozen=True)
class ForwardCache:
    u: np.ndarray
    alpha: np.ndarray
    f: np.ndarray
    h: np.ndarray
    s: np.ndarray
    scale: float
    causal: bool = False


@dataclass(frozen=True)
class GradientBundle:
    """Per-layer gradients: w.r.t. the layer input, ``W`` and ``W_V``."""

    g_t: np.ndarray
    g_w: np.ndarray
    g_v: np.ndarray


@dataclass(frozen=True)
class LossSpec:
    """``kind`` is "squared" or "cross-entropy".

    For squared loss ``target`` is the reference matrix. For cross-entropy it is
    the one-hot ground truth (n×d_voc) and ``projection`` is the d×d_voc head.
    """

    kind: str
    target: np.ndarray
    projection: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("squared", "cross-entropy"):
            raise ParameterError(f"unknown loss kind {self.kind!r}")
        if self.kind == "cross-entropy":
            if self.projection is None:
                raise ParameterError("cross-entropy loss needs an output projection")
            t = self.target
            if not (np.all((t == 0) | (t == 1)) and np.all(t.sum(axis=1) == 1)):
                raise ParameterError("cross-entropy targets must be one-hot rows")


def softmax_row(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - np.max(z))
    return e / e.sum()


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def causal_mask(n: int) -> np.ndarray:
    """Dense lower-triangular mask; for the exact path and tests only."""
    return np.tril(np.ones((n, n)))


def forward_exact(
    x: np.ndarray,
    wts: AttentionWeights,
    scale: float | None = None,
    causal: bool = False,
    counter: FlopCounter | None = None,
) -> ForwardCache:
    n, d = x.shape
    if n < 1 or d < 1:
        raise DimensionError(f"empty input {x.shape}")
    if wts.d != d:
        raise DimensionError(f"weights are {wts.d}-dimensional, input is {x.shape}")
    c = 1.0 / d if scale is None else float(scale)
    scores = la.scale(la.matmul(la.matmul(x, wts.w, counter), x.T, counter), c, counter)
    peak = la.linf(scores)
    if peak > _EXP_LIMIT:
        raise RangeError(
            f"attention scores reach {peak:.3g}; exp would overflow, use smaller input bound R"
        )
    u = np.exp(scores)
    if counter is not None:
        counter.add(u.size, u.shape)
    if causal:
        u = la.hadamard(u, causal_mask(n), counter)
    alpha = la.row_sums(u, counter)
    f = la.diag_scale(1.0 / alpha, u, counter=counter)
    h = la.matmul(x, wts.w_v, counter)
    s = la.matmul(f, h, counter)
    return ForwardCache(u=u, alpha=alpha, f=f, h=h, s=s, scale=c, causal=causal)


def loss_and_upstream(s_final: np.ndarray, spec: LossSpec) -> tuple[float, np.ndarray]:
    """Scalar loss and its gradient with respect to ``s_final``."""
    if spec.kind == "squared":
        if spec.target.shape != s_final.shape:
            raise DimensionError(f"target {spec.target.shape} vs output {s_final.shape}")
        diff = s_final - spec.target
        return float(np.sum(diff * diff)), 2.0 * diff
    proj = spec.projection
    if proj.shape[0] != s_final.shape[1] or spec.target.shape != (s_final.shape[0], proj.shape[1]):
        raise DimensionError(
            f"output {s_final.shape}, head {proj.shape}, targets {spec.target.shape} do not conform"
        )
    probs = _softmax_rows(s_final @ proj)
    picked = probs[spec.target == 1]
    if np.any(picked <= 0):
        raise NumericalDomainError("log of a nonpositive predicted probability")
    loss = -float(np.sum(np.log(picked)))
    return loss, (probs - spec.target) @ proj.T


def output_head_grad(s_final: np.ndarray, spec: LossSpec) -> np.ndarray:
    """Gradient of the cross-entropy loss with respect to the output head."""
    if spec.kind != "cross-entropy":
        raise ParameterError("only the cross-entropy loss has an output head")
    probs = _softmax_rows(s_final @ spec.projection)
    return s_final.T @ (probs - spec.target)


def grad_T_exact_cterms(
    cache: ForwardCache, x: np.ndarray, wts: AttentionWeights, g_i: np.ndarray
) -> np.ndarray:
    """dL/dX by summing ``G[i0,j0] * ds[i0,j0]/dX[i1,j1]`` entry by entry.

    The per-entry derivative splits into five terms when ``i1 == i0`` and three
    when ``i1 != i0``; the ``j1`` index is vectorised. O(n^2 d^2); small n only.
    """
    f, h, s, c = cache.f, cache.h, cache.s, cache.scale
    n, d = x.shape
    w, w_v = wts.w, wts.w_v
    xw = x @ w  # row i0 is W^T x_{i0}
    xwt = x @ w.T  # row k is W x_k
    out = np.zeros((n, d))
    for i0 in range(n):
        for j0 in range(h.shape[1]):
            g = g_i[i0, j0]
            if g == 0.0:
                continue
            s0 = s[i0, j0]
            for i1 in range(n):
                if i1 == i0:
                    c1 = -s0 * f[i0, i0] * xw[i0] * c
                    c2 = -s0 * (f[i0] @ xwt) * c
                    c3 = f[i0, i0] * h[i0, j0] * xw[i0] * c
                    c4 = ((f[i0] * h[:, j0]) @ xwt) * c
                    c5 = f[i0, i0] * w_v[:, j0]
                    out[i1] += g * (c1 + c2 + c3 + c4 + c5)
                else:
                    c6 = -s0 * f[i0, i1] * xw[i0] * c
                    c7 = f[i0, i1] * h[i1, j0] * xw[i0] * c
                    c8 = f[i0, i1] * w_v[:, j0]
                    out[i1] += g * (c6 + c7 + c8)
    return out


def compute_K(g_i: np.ndarray, s: np.ndarray, counter: FlopCounter | None = None) -> np.ndarray:
    """Row-wise inner products ``(G ⊙ s) 1``."""
    if g_i.shape != s.shape:
        raise DimensionError(f"G {g_i.shape} and s {s.shape} differ")
    return la.row_sums(la.hadamard(g_i, s, counter), counter)


def dense_d_terms(
    cache: ForwardCache,
    x: np.ndarray,
    wts: AttentionWeights,
    g_i: np.ndarray,
    counter: FlopCounter | None = None,
) -> dict[str, np.ndarray]:
    """The five n×d components of dL/dX with dense ``f``.

    d6 = -c f^T diag(K) X W,  d7 = c (f ⊙ G h^T)^T X W,  d8 = f^T G W_V^T,
    d2 = -c diag(K) f X W^T,  d4 = c (f ⊙ G h^T) X W^T.
    """
    f, h, s, c = cache.f, cache.h, cache.s, cache.scale
    k_vec = compute_K(g_i, s, counter)
    xw = la.scale(la.matmul(x, wts.w, counter), c, counter)
    xwt = la.scale(la.matmul(x, wts.w.T, counter), c, counter)
    p1 = la.hadamard(f, la.matmul(g_i, h.T, counter), counter)
    kf = la.diag_scale(k_vec, f, counter=counter)
    return {
        "d6": -la.matmul(kf.T, xw, counter),
        "d7": la.matmul(p1.T, xw, counter),
        "d8": la.matmul(la.matmul(f.T, g_i, counter), wts.w_v.T, counter),
        "d2": -la.matmul(kf, xwt, counter),
        "d4": la.matmul(p1, xwt, counter),
    }


TERM_ORDER = ("d6", "d7", "d8", "d2", "d4")


def sum_terms(terms: dict[str, np.ndarray], counter: FlopCounter | None = None) -> np.ndarray:
    out = terms[TERM_ORDER[0]]
    for key in TERM_ORDER[1:]:
        out = la.add(out, terms[key], counter)
    return out


def grad_T_exact_dterms(
    cache: ForwardCache,
    x: np.ndarray,
    wts: AttentionWeights,
    g_i: np.ndarray,
    counter: FlopCounter | None = None,
) -> np.ndarray:
    return sum_terms(dense_d_terms(cache, x, wts, g_i, counter), counter)


def dense_p(
    cache: ForwardCache, g_i: np.ndarray, counter: FlopCounter | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Dense ``p1 = f ⊙ (G h^T)`` and ``p2 = diag(p1 1) f``."""
    q = la.matmul(g_i, cache.h.T, counter)
    p1 = la.hadamard(cache.f, q, counter)
    p2 = la.diag_scale(la.row_sums(p1, counter), cache.f, counter=counter)
    return p1, p2


def grad_W_exact(
    cache: ForwardCache, x: np.ndarray, g_i: np.ndarray, counter: FlopCounter | None = None
) -> np.ndarray:
    p1, p2 = dense_p(cache, g_i, counter)
    p = la.sub(p1, p2, counter)
    return la.scale(la.matmul(la.matmul(x.T, p, counter), x, counter), cache.scale, counter)


def grad_WQ_WK_from_W(g_w: np.ndarray, wts: AttentionWeights) -> tuple[np.ndarray, np.ndarray]:
    """Chain ``W = W_Q W_K^T``: returns (dL/dW_Q, dL/dW_K)."""
    return g_w @ wts.w_k, g_w.T @ wts.w_q


def grad_WV_exact(
    cache: ForwardCache, x: np.ndarray, g_i: np.ndarray, counter: FlopCounter | None = None
) -> np.ndarray:
    return la.matmul(x.T, la.matmul(cache.f.T, g_i, counter), counter)


def exact_bundle(
    x: np.ndarray,
    wts: AttentionWeights,
    g_i: np.ndarray,
    scale: float | None = None,
    causal: bool = False,
    counter: FlopCounter | None = None,
) -> GradientBundle:
    cache = forward_exact(x, wts, scale=scale, causal=causal, counter=counter)
    return GradientBundle(
        g_t=grad_T_exact_dterms(cache, x, wts, g_i, counter),
        g_w=grad_W_exact(cache, x, g_i, counter),
        g_v=grad_WV_exact(cache, x, g_i, counter),
    )


# -- non-attention map g(Z) = phi(Z W_g) -------------------------------------

_GELU_C = math.sqrt(2.0 / math.pi)


def activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "identity":
        return z
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "gelu-tanh":
        return 0.5 * z * (1.0 + np.tanh(_GELU_C * (z + 0.044715 * z**3)))
    raise ParameterError(f"unknown activation {activation!r}")


def activation_grad(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "identity":
        return np.ones_like(z)
    if activation == "relu":
        # subgradient 0 at the kink
        return (z > 0).astype(np.float64)
    if activation == "gelu-tanh":
        inner = _GELU_C * (z + 0.044715 * z**3)
        t = np.tanh(inner)
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * z**2)
        return 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * dinner
    raise ParameterError(f"unknown activation {activation!r}")


def propagate_through_g(
    g_t_next: np.ndarray,
    attn_out: np.ndarray,
    w_g: np.ndarray,
    activation: str,
    counter: FlopCounter | None = None,
) -> np.ndarray:
    """``(g_t_next ⊙ phi'(attn_out W_g)) W_g^T``."""
    if activation not in ACTIVATIONS:
        raise ParameterError(f"unknown activation {activation!r}")
    pre = la.matmul(attn_out, w_g, counter)
    return la.matmul(la.hadamard(g_t_next, activation_grad(pre, activation), counter), w_g.T, counter)


def finite_diff_grad(
    loss_of: Callable[[np.ndarray], float], at: np.ndarray, step: float | None = None
) -> np.ndarray:
    """Central differences ``(L(x+he) - L(x-he)) / 2h`` entry by entry."""
    at = np.asarray(at, dtype=np.float64)
    if step is None:
        step = default_fd_step(at)
    if not step > 0:
        raise ParameterError(f"step must be positive, got {step}")
    grad = np.zeros_like(at)
    probe = at.copy()
    for idx in np.ndindex(at.shape):
        orig = probe[idx]
        probe[idx] = orig + step
        hi = loss_of(probe)
        probe[idx] = orig - step
        lo = loss_of(probe)
        probe[idx] = orig
        grad[idx] = (hi - lo) / (2.0 * step)
    return grad


def default_fd_step(at: np.ndarray) -> float:
    return 1e-5 * max(1.0, la.linf(at))
