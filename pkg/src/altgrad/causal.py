"""Causal-mask attention in factored form.

``M[i, j] = 1`` iff ``i >= j`` and is never materialised. Products with
``M ⊙ (U V^T)`` use the prefix-sum recurrence; products with the transposed
(upper-triangular) pattern reuse it on row-reversed inputs, since reversing
rows and columns maps ``M^T`` onto ``M``.

With ``f_hat = D^{-1} (M ⊙ U0 V0^T)`` the gradient terms are the non-causal
ones with ``f`` replaced by ``f_hat``; ``f_hat ⊙ (G h^T) = M ⊙ (U_M V_M^T)``
where ``U_M = (D^{-1} U0) ⊘ G`` and ``V_M = V0 ⊘ h``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import linalg as la
from .errors import CapacityError, DegeneracyError, DimensionError
from .exact import AttentionWeights, GradientBundle, compute_K, sum_terms
from .kernel import KernelConfig, exp_factors, f_error_bound
from .linalg import FlopCounter


@dataclass(frozen=True)
class CausalMaskSpec:
    n: int

    def __contains__(self, ij: tuple[int, int]) -> bool:
        i, j = ij
        return i >= j


@dataclass(frozen=True)
class MaskedAttentionFactors:
    """Unnormalised ``U0, V0`` plus ``d_inv = 1 / ((M ⊙ U0 V0^T) 1)``."""

    u0: np.ndarray
    v0: np.ndarray
    d_inv: np.ndarray
    est_error: float = math.inf

    @property
    def n(self) -> int:
        return self.u0.shape[0]

    def materialize(self) -> np.ndarray:
        """Dense ``f_hat``. Test/diagnostic use only."""
        return self.d_inv[:, None] * np.tril(self.u0 @ self.v0.T)


def causal_multiply_vec(
    u0: np.ndarray, v0: np.ndarray, v: np.ndarray, counter: FlopCounter | None = None
) -> np.ndarray:
    """``(M ⊙ U0 V0^T) v`` in O(nk).

    ``c_j = c_{j-1} + V0[j] v[j]`` accumulated in row order, then ``Y_j = <U0[j], c_j>``.
    """
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if u0.shape != v0.shape or v.shape[0] != u0.shape[0]:
        raise DimensionError(f"causal multiply: U0 {u0.shape}, V0 {v0.shape}, v {v.shape}")
    n, k = u0.shape
    prefix = np.cumsum(v0 * v[:, None], axis=0)
    y = np.einsum("jk,jk->j", u0, prefix)
    if counter is not None:
        counter.add(4 * n * k, y.shape)
    return y


def causal_multiply_mat(
    u0: np.ndarray, v0: np.ndarray, h: np.ndarray, counter: FlopCounter | None = None
) -> np.ndarray:
    """``(M ⊙ U0 V0^T) H`` one column at a time."""
    if h.ndim != 2 or h.shape[0] != u0.shape[0]:
        raise DimensionError(f"causal multiply: U0 {u0.shape} vs H {h.shape}")
    out = np.empty(h.shape)
    for col in range(h.shape[1]):
        out[:, col] = causal_multiply_vec(u0, v0, h[:, col], counter)
    return out


def anticausal_multiply_mat(
    u0: np.ndarray, v0: np.ndarray, h: np.ndarray, counter: FlopCounter | None = None
) -> np.ndarray:
    """``(M^T ⊙ U0 V0^T) H`` via the prefix recurrence on reversed rows."""
    return causal_multiply_mat(u0[::-1], v0[::-1], h[::-1], counter)[::-1]


def masked_attention(
    x: np.ndarray,
    wts: AttentionWeights,
    cfg: KernelConfig,
    scale: float | None = None,
    counter: FlopCounter | None = None,
) -> MaskedAttentionFactors:
    u0, v0, B = exp_factors(x, wts, cfg, scale, counter)
    sums = causal_multiply_vec(u0, v0, np.ones(x.shape[0]), counter)
    if np.any(sums <= 0):
        bad = int(np.argmin(sums))
        raise DegeneracyError(
            f"masked row sum {sums[bad]:.3g} at row {bad} is nonpositive; raise the degree"
        )
    # row i averages over i+1 entries; the first row is the loosest
    return MaskedAttentionFactors(u0, v0, 1.0 / sums, f_error_bound(B, cfg.degree, 1))


def f_hat_times(maf: MaskedAttentionFactors, h: np.ndarray, counter=None) -> np.ndarray:
    """``f_hat H``: masked multiply, then normalise."""
    return la.diag_scale(maf.d_inv, causal_multiply_mat(maf.u0, maf.v0, h, counter), counter=counter)


def f_hat_t_times(maf: MaskedAttentionFactors, h: np.ndarray, counter=None) -> np.ndarray:
    """``f_hat^T H = (M ⊙ U0 V0^T)^T (D^{-1} H)``."""
    scaled = la.diag_scale(maf.d_inv, h, counter=counter)
    return anticausal_multiply_mat(maf.v0, maf.u0, scaled, counter)


def hadamard_factors(
    maf: MaskedAttentionFactors,
    g_i: np.ndarray,
    h: np.ndarray,
    rank_cap: int,
    counter: FlopCounter | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """``(U_M, V_M)`` with ``M ⊙ (U_M V_M^T) = f_hat ⊙ (G h^T)``."""
    r = maf.u0.shape[1] * g_i.shape[1]
    if r > rank_cap:
        raise CapacityError(f"masked hadamard factor rank {r} exceeds cap {rank_cap}")
    u_scaled = la.diag_scale(maf.d_inv, maf.u0, counter=counter)
    return la.rowwise_kron(u_scaled, g_i, counter), la.rowwise_kron(maf.v0, h, counter)


def masked_forward(
    x: np.ndarray,
    wts: AttentionWeights,
    cfg: KernelConfig,
    scale: float | None = None,
    counter: FlopCounter | None = None,
) -> tuple[MaskedAttentionFactors, np.ndarray, np.ndarray]:
    maf = masked_attention(x, wts, cfg, scale, counter)
    h = la.matmul(x, wts.w_v, counter)
    return maf, h, f_hat_times(maf, h, counter)


def masked_dot_components(
    maf: MaskedAttentionFactors,
    x: np.ndarray,
    wts: AttentionWeights,
    g_i: np.ndarray,
    k_vec: np.ndarray,
    scale: float | None = None,
    counter: FlopCounter | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Terms linear in ``f_hat``: ``(d6, d2, d8, g_v)``."""
    c = 1.0 / x.shape[1] if scale is None else float(scale)
    xw = la.matmul(x, la.scale(wts.w, c, counter), counter)
    xwt = la.matmul(x, la.scale(wts.w.T, c, counter), counter)
    d6 = -f_hat_t_times(maf, la.diag_scale(k_vec, xw, counter=counter), counter)
    d2 = -la.diag_scale(k_vec, f_hat_times(maf, xwt, counter), counter=counter)
    d8 = f_hat_t_times(maf, la.matmul(g_i, wts.w_v.T, counter), counter)
    g_v = la.matmul(x.T, f_hat_t_times(maf, g_i, counter), counter)
    return d6, d2, d8, g_v


def masked_hadamard_components(
    maf: MaskedAttentionFactors,
    x: np.ndarray,
    wts: AttentionWeights,
    g_i: np.ndarray,
    h: np.ndarray,
    scale: float | None = None,
    rank_cap: int = 4096,
    counter: FlopCounter | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Terms through ``p_hat1 = f_hat ⊙ (G h^T)``: ``(d7, d4, g_w)``."""
    c = 1.0 / x.shape[1] if scale is None else float(scale)
    um, vm = hadamard_factors(maf, g_i, h, rank_cap, counter)
    xw = la.matmul(x, la.scale(wts.w, c, counter), counter)
    xwt = la.matmul(x, la.scale(wts.w.T, c, counter), counter)
    d7 = anticausal_multiply_mat(vm, um, xw, counter)
    d4 = causal_multiply_mat(um, vm, xwt, counter)
    p1x = causal_multiply_mat(um, vm, x, counter)
    p1_rows = causal_multiply_vec(um, vm, np.ones(x.shape[0]), counter)
    p2x = la.diag_scale(p1_rows, f_hat_times(maf, x, counter), counter=counter)
    g_w = la.scale(la.matmul(x.T, la.sub(p1x, p2x, counter), counter), c, counter)
    return d7, d4, g_w


def masked_d_terms(
    maf: MaskedAttentionFactors,
    x: np.ndarray,
    wts: AttentionWeights,
    h: np.ndarray,
    s: np.ndarray,
    g_i: np.ndarray,
    scale: float | None = None,
    rank_cap: int = 4096,
    counter: FlopCounter | None = None,
) -> tuple[dict[str, np.ndarray], np.ndarray, np.ndarray]:
    """All five masked dL/dX terms plus ``(g_w, g_v)``."""
    k_vec = compute_K(g_i, s, counter)
    d6, d2, d8, g_v = masked_dot_components(maf, x, wts, g_i, k_vec, scale, counter)
    d7, d4, g_w = masked_hadamard_components(maf, x, wts, g_i, h, scale, rank_cap, counter)
    return {"d6": d6, "d7": d7, "d8": d8, "d2": d2, "d4": d4}, g_w, g_v


def masked_bundle(
    x: np.ndarray,
    wts: AttentionWeights,
    g_i: np.ndarray,
    cfg: KernelConfig,
    scale: float | None = None,
    counter: FlopCounter | None = None,
) -> GradientBundle:
    maf, h, s = masked_forward(x, wts, cfg, scale, counter)
    terms, g_w, g_v = masked_d_terms(maf, x, wts, h, s, g_i, scale, cfg.rank_cap, counter)
    return GradientBundle(g_t=sum_terms(terms, counter), g_w=g_w, g_v=g_v)
