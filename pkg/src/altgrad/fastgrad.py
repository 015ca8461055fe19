"""Almost-linear gradients of one attention head from low-rank factors of ``f``.

Given ``f ≈ U1 V1^T`` (so ``f^T ≈ V1 U1^T``) every term is evaluated right to
left through rank-sized intermediates, so no n×n array is ever formed:

    d6 = -c · V1 ((diag(K) U1)^T X) W           f^T diag(K) X W
    d7 =  c · (V1⊘h) ((U1⊘G)^T X) W             (f ⊙ G h^T)^T X W
    d8 =  V1 ((U1^T G) W_V^T)                    f^T G W_V^T
    d2 = -c · (diag(K) U1) (V1^T X) W^T          diag(K) f X W^T
    d4 =  c · (U1⊘G) ((V1⊘h)^T X) W^T           (f ⊙ G h^T) X W^T
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import linalg as la
from .exact import (
    TERM_ORDER,
    AttentionWeights,
    GradientBundle,
    compute_K,
    propagate_through_g,
    sum_terms,
)
from .kernel import DEFAULT_RANK_CAP, KernelConfig, LowRankFactor, approx_attention, lr_hadamard, lr_p_factors
from .linalg import FlopCounter

__all__ = [
    "TERM_ORDER",
    "ZFactors",
    "compute_K",
    "z_factors",
    "fast_d_terms",
    "fast_grad_T",
    "fast_grad_W",
    "fast_grad_WV",
    "single_grad",
]


@dataclass(frozen=True)
class ZFactors:
    """Factored n×n coefficient matrices of the five dL/dX terms.

    z6 ≈ f^T diag(K), z7 ≈ (f ⊙ G h^T)^T, z2 ≈ diag(K) f, z4 ≈ f ⊙ G h^T.
    """

    z6: LowRankFactor
    z7: LowRankFactor
    z2: LowRankFactor
    z4: LowRankFactor
    k_vec: np.ndarray


def z_factors(
    f_lr: LowRankFactor,
    h: np.ndarray,
    s: np.ndarray,
    g_i: np.ndarray,
    rank_cap: int = DEFAULT_RANK_CAP,
    counter: FlopCounter | None = None,
) -> ZFactors:
    k_vec = compute_K(g_i, s, counter)
    k_u1 = la.diag_scale(k_vec, f_lr.u, counter=counter)
    z4 = lr_hadamard(f_lr, g_i, h, rank_cap, counter, desc="z4")
    return ZFactors(
        z6=LowRankFactor(f_lr.v, k_u1, "z6"),
        z7=LowRankFactor(z4.v, z4.u, "z7"),
        z2=LowRankFactor(k_u1, f_lr.v, "z2"),
        z4=z4,
        k_vec=k_vec,
    )


def _apply(z: LowRankFactor, x: np.ndarray, w: np.ndarray, counter) -> np.ndarray:
    # z.u ((z.v^T X) w); bracketing keeps every intermediate rank×d or n×d
    return la.matmul(z.u, la.matmul(la.matmul(z.v.T, x, counter), w, counter), counter)


def fast_d_terms(
    x: np.ndarray,
    wts: AttentionWeights,
    f_lr: LowRankFactor,
    h: np.ndarray,
    s: np.ndarray,
    g_i: np.ndarray,
    scale: float | None = None,
    rank_cap: int = DEFAULT_RANK_CAP,
    counter: FlopCounter | None = None,
) -> dict[str, np.ndarray]:
    c = 1.0 / x.shape[1] if scale is None else float(scale)
    z = z_factors(f_lr, h, s, g_i, rank_cap, counter)
    cw = la.scale(wts.w, c, counter)
    cwt = cw.T
    d8 = la.matmul(
        f_lr.v, la.matmul(la.matmul(f_lr.u.T, g_i, counter), wts.w_v.T, counter), counter
    )
    return {
        "d6": -_apply(z.z6, x, cw, counter),
        "d7": _apply(z.z7, x, cw, counter),
        "d8": d8,
        "d2": -_apply(z.z2, x, cwt, counter),
        "d4": _apply(z.z4, x, cwt, counter),
    }


def fast_grad_T(
    x: np.ndarray,
    wts: AttentionWeights,
    f_lr: LowRankFactor,
    h: np.ndarray,
    s: np.ndarray,
    g_i: np.ndarray,
    scale: float | None = None,
    rank_cap: int = DEFAULT_RANK_CAP,
    counter: FlopCounter | None = None,
) -> np.ndarray:
    terms = fast_d_terms(x, wts, f_lr, h, s, g_i, scale, rank_cap, counter)
    return sum_terms(terms, counter)


def fast_grad_W(
    x: np.ndarray,
    f_lr: LowRankFactor,
    g_i: np.ndarray,
    h: np.ndarray,
    scale: float | None = None,
    rank_cap: int = DEFAULT_RANK_CAP,
    counter: FlopCounter | None = None,
) -> np.ndarray:
    """``c · X^T (p1 - p2) X`` as ``(X^T U3)(V3^T X) - (X^T U4)(V4^T X)``."""
    c = 1.0 / x.shape[1] if scale is None else float(scale)
    p1, p2 = lr_p_factors(f_lr, g_i, h, rank_cap, counter)
    a = la.matmul(la.matmul(x.T, p1.u, counter), la.matmul(p1.v.T, x, counter), counter)
    b = la.matmul(la.matmul(x.T, p2.u, counter), la.matmul(p2.v.T, x, counter), counter)
    return la.scale(la.sub(a, b, counter), c, counter)


def fast_grad_WV(
    x: np.ndarray, f_lr: LowRankFactor, g_i: np.ndarray, counter: FlopCounter | None = None
) -> np.ndarray:
    """``X^T f^T G`` as ``(X^T V1)(U1^T G)``."""
    return la.matmul(la.matmul(x.T, f_lr.v, counter), la.matmul(f_lr.u.T, g_i, counter), counter)


def fast_forward(
    x: np.ndarray,
    wts: AttentionWeights,
    cfg: KernelConfig,
    scale: float | None = None,
    counter: FlopCounter | None = None,
) -> tuple[LowRankFactor, np.ndarray, np.ndarray]:
    """``(f_lr, h, s)`` with ``s = U1 (V1^T h)``."""
    f_lr = approx_attention(x, wts, cfg, scale, counter)
    h = la.matmul(x, wts.w_v, counter)
    s = la.matmul(f_lr.u, la.matmul(f_lr.v.T, h, counter), counter)
    return f_lr, h, s


def single_grad(
    x: np.ndarray,
    wts: AttentionWeights,
    w_g: np.ndarray,
    activation: str,
    g_t_upstream: np.ndarray,
    cfg: KernelConfig,
    scale: float | None = None,
    attn_out: np.ndarray | None = None,
    counter: FlopCounter | None = None,
) -> GradientBundle:
    """One head, non-residual layer ``T = phi(Attn(x) W_g)``.

    ``g_t_upstream`` is dL/dT; the returned ``g_t`` is dL/dx.
    """
    f_lr, h, s = fast_forward(x, wts, cfg, scale, counter)
    if attn_out is None:
        attn_out = s
    g_i = propagate_through_g(g_t_upstream, attn_out, w_g, activation, counter)
    return GradientBundle(
        g_t=fast_grad_T(x, wts, f_lr, h, s, g_i, scale, cfg.rank_cap, counter),
        g_w=fast_grad_W(x, f_lr, g_i, h, scale, cfg.rank_cap, counter),
        g_v=fast_grad_WV(x, f_lr, g_i, counter),
    )
