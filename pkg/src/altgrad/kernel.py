"""Low-rank factorisation of the softmax attention matrix via Taylor features.

The degree-g Taylor polynomial of ``exp(<q, k>)`` factors through the feature
map that lists, for every multiset ``a`` of at most g coordinates,
``sqrt(1 / prod_j a_j!) * prod_j m_j^{a_j}``. With ``Q' = c X W`` and
``K' = X`` this gives ``U0 V0^T ≈ exp(c X W X^T)`` with rank C(d+g, g).
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import linalg as la
from .errors import CapacityError, DegeneracyError, ParameterError
from .exact import AttentionWeights
from .linalg import FlopCounter

DEFAULT_RANK_CAP = 4096
# math.exp overflows just past 709
_EXP_CAP = 700.0


def monomial_count(d: int, degree: int) -> int:
    return math.comb(d + degree, degree)


@dataclass(frozen=True)
class KernelConfig:
    degree: int
    bound_R: float = 0.5
    rank_cap: int = DEFAULT_RANK_CAP

    def __post_init__(self):
        if self.degree < 0:
            raise ParameterError(f"degree must be >= 0, got {self.degree}")

    def rank(self, d: int) -> int:
        return monomial_count(d, self.degree)

    def check_rank(self, d: int) -> int:
        r = self.rank(d)
        if r > self.rank_cap:
            raise CapacityError(
                f"degree {self.degree} in {d} variables needs rank {r} > cap {self.rank_cap}"
            )
        return r


@dataclass(frozen=True)
class LowRankFactor:
    """``u @ v.T`` kept in factored form."""

    u: np.ndarray
    v: np.ndarray
    target_desc: str = ""
    est_error: float = math.inf

    def __post_init__(self):
        if self.u.shape != self.v.shape:
            raise ParameterError(f"factor shapes differ: {self.u.shape} vs {self.v.shape}")

    @property
    def rank(self) -> int:
        return self.u.shape[1]

    @property
    def n(self) -> int:
        return self.u.shape[0]

    def materialize(self) -> np.ndarray:
        """Dense n×n product. Test/diagnostic use only."""
        return self.u @ self.v.T

    def row_sums(self, counter: FlopCounter | None = None) -> np.ndarray:
        ones = np.ones((self.n, 1))
        return la.matmul(self.u, la.matmul(self.v.T, ones, counter), counter).ravel()


def taylor_remainder(B: float, degree: int) -> float:
    """Lagrange bound ``e^B B^{g+1} / (g+1)!`` on ``|exp(z) - T_g(z)|`` for ``|z| <= B``."""
    if B > _EXP_CAP:
        return math.inf
    return math.exp(B) * B ** (degree + 1) / math.factorial(degree + 1)


def taylor_tail(B: float, degree: int) -> float:
    """``sum_{t > g} B^t / t!``, the sharp remainder bound; non-increasing in g."""
    if B == 0:
        return 0.0
    if B > _EXP_CAP:
        return math.inf
    term = B ** (degree + 1) / math.factorial(degree + 1)
    total, t = 0.0, degree + 1
    while term > 1e-300 and (total == 0.0 or term > total * 1e-17):
        total += term
        t += 1
        term *= B / t
    return total


def choose_degree(
    bound_R: float, eps: float, d: int, rank_cap: int = DEFAULT_RANK_CAP
) -> KernelConfig:
    """Smallest degree whose Taylor remainder on ``|z| <= R^2`` is at most eps."""
    if not 0 < eps < 1:
        raise ParameterError(f"eps must lie in (0, 1), got {eps}")
    if not bound_R > 0:
        raise ParameterError(f"bound_R must be positive, got {bound_R}")
    B = bound_R * bound_R
    g = 0
    while taylor_remainder(B, g) > eps:
        g += 1
    r = monomial_count(d, g)
    if r > rank_cap:
        raise CapacityError(f"eps={eps} at R={bound_R} needs degree {g}, rank {r} > cap {rank_cap}")
    return KernelConfig(degree=g, bound_R=bound_R, rank_cap=rank_cap)


@lru_cache(maxsize=None)
def _monomials(d: int, degree: int) -> tuple[tuple[tuple[int, ...], float], ...]:
    out = []
    for t in range(degree + 1):
        for combo in itertools.combinations_with_replacement(range(d), t):
            counts = np.bincount(combo, minlength=d) if combo else np.zeros(d, dtype=int)
            weight = 1.0 / math.prod(math.factorial(int(a)) for a in counts)
            out.append((combo, math.sqrt(weight)))
    return tuple(out)


def poly_features(
    m: np.ndarray, cfg: KernelConfig, counter: FlopCounter | None = None
) -> np.ndarray:
    """Taylor feature map; ``phi(Q) phi(K)^T == sum_{t<=g} (Q K^T)^t / t!`` entry-wise."""
    n, d = m.shape
    r = cfg.check_rank(d)
    out = np.empty((n, r))
    for col, (combo, weight) in enumerate(_monomials(d, cfg.degree)):
        if combo:
            out[:, col] = weight * np.prod(m[:, list(combo)], axis=1)
        else:
            out[:, col] = 1.0
    if counter is not None:
        counter.add(n * r * max(cfg.degree, 1), out.shape)
    return out


def exp_factors(
    x: np.ndarray,
    wts: AttentionWeights,
    cfg: KernelConfig,
    scale: float | None = None,
    counter: FlopCounter | None = None,
) -> tuple[np.ndarray, np.ndarray, float]:
    """Unnormalised factors ``U0 V0^T ≈ exp(c X W X^T)`` and the score bound B used."""
    n, d = x.shape
    c = 1.0 / d if scale is None else float(scale)
    xw = la.matmul(x, wts.w, counter)
    if la.linf(xw) > cfg.bound_R or la.linf(x) > cfg.bound_R:
        warnings.warn(
            f"input exceeds bound R={cfg.bound_R}: |XW|={la.linf(xw):.3g}, |X|={la.linf(x):.3g}",
            stacklevel=3,
        )
    q = la.scale(xw, c, counter)
    # Cauchy-Schwarz bound on every score entry
    B = float(np.sqrt((q * q).sum(axis=1).max() * (x * x).sum(axis=1).max()))
    return poly_features(q, cfg, counter), poly_features(x, cfg, counter), B


def f_error_bound(B: float, degree: int, row_len: int) -> float:
    """Bound on ``|f_approx - f|`` entry-wise when all scores satisfy ``|z| <= B``.

    Each kernel entry and each row sum carries relative error at most
    ``rho = tail * e^B``, and an attention entry is at most ``e^{2B} / row_len``.
    """
    if B > _EXP_CAP:
        return math.inf
    rho = taylor_tail(B, degree) * math.exp(B)
    if rho >= 1:
        return math.inf
    return 2 * rho / (1 - rho) * min(1.0, math.exp(2 * B) / row_len)


def approx_attention(
    x: np.ndarray,
    wts: AttentionWeights,
    cfg: KernelConfig,
    scale: float | None = None,
    counter: FlopCounter | None = None,
) -> LowRankFactor:
    """Row-normalised factors ``U1 V1^T ≈ f``; rows of ``U1 V1^T`` sum to exactly 1."""
    u0, v0, B = exp_factors(x, wts, cfg, scale, counter)
    ones = np.ones((x.shape[0], 1))
    alpha = la.matmul(u0, la.matmul(v0.T, ones, counter), counter).ravel()
    if np.any(alpha <= 0):
        bad = int(np.argmin(alpha))
        raise DegeneracyError(
            f"approximate row sum {alpha[bad]:.3g} at row {bad} is nonpositive; raise the degree"
        )
    u1 = la.diag_scale(1.0 / alpha, u0, counter=counter)
    return LowRankFactor(u1, v0, "f", f_error_bound(B, cfg.degree, x.shape[0]))


def lr_hadamard(
    a: LowRankFactor,
    p: np.ndarray,
    q: np.ndarray,
    rank_cap: int = DEFAULT_RANK_CAP,
    counter: FlopCounter | None = None,
    desc: str = "",
) -> LowRankFactor:
    """Factors of ``(a.u a.v^T) ⊙ (p q^T)``."""
    if p.shape != q.shape or p.shape[0] != a.n:
        raise ParameterError(f"cannot combine rank-{a.rank} factor with {p.shape}, {q.shape}")
    r = a.rank * p.shape[1]
    if r > rank_cap:
        raise CapacityError(f"hadamard factor rank {r} exceeds cap {rank_cap}")
    return LowRankFactor(
        la.rowwise_kron(a.u, p, counter), la.rowwise_kron(a.v, q, counter), desc or a.target_desc
    )


def lr_p_factors(
    f_lr: LowRankFactor,
    g_i: np.ndarray,
    h: np.ndarray,
    rank_cap: int = DEFAULT_RANK_CAP,
    counter: FlopCounter | None = None,
) -> tuple[LowRankFactor, LowRankFactor]:
    """Factors of ``p1 = f ⊙ (G h^T)`` and ``p2 = diag(p1 1) f``."""
    p1 = lr_hadamard(f_lr, g_i, h, rank_cap, counter, desc="p1")
    rows = p1.row_sums(counter)
    p2 = LowRankFactor(la.diag_scale(rows, f_lr.u, counter=counter), f_lr.v, "p2")
    return p1, p2
