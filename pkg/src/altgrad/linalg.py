"""Dense matrix primitives with explicit operation accounting.

Matrices are plain ``float64`` numpy arrays. Every kernel accepts an optional
:class:`FlopCounter`; when given, it records the arithmetic cost of the call
and the shape of the array it allocated. The counter is what the scaling
benchmarks and the no-quadratic-allocation checks read, so kernels that want
to be audited must route their arithmetic through this module.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, ParameterError, RangeError


@dataclass
class FlopCounter:
    """Single-owner ledger of arithmetic operations and allocations."""

    flops: int = 0
    allocations: list[tuple[int, ...]] = field(default_factory=list)

    def add(self, flops: int, shape: tuple[int, ...] | None = None) -> None:
        self.flops += int(flops)
        if shape is not None:
            self.allocations.append(tuple(int(s) for s in shape))

    def largest_allocation(self) -> int:
        return max((int(np.prod(s)) for s in self.allocations), default=0)

    def saw_shape(self, shape: tuple[int, ...]) -> bool:
        return tuple(shape) in self.allocations

    def reset(self) -> None:
        self.flops = 0
        self.allocations.clear()


def _tick(counter: FlopCounter | None, flops: int, out: np.ndarray) -> np.ndarray:
    if counter is not None:
        counter.add(flops, out.shape)
    return out


def _finite(out: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(out)):
        raise RangeError(f"{what} produced non-finite entries")
    return out


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce to a 2-D float64 array with finite entries."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    return _finite(arr, name)


def matmul(a: np.ndarray, b: np.ndarray, counter: FlopCounter | None = None) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = a @ b
    if out.size == 0:
        out = np.zeros((a.shape[0], b.shape[1]))
    return _tick(counter, 2 * a.shape[0] * a.shape[1] * b.shape[1], _finite(out, "matmul"))


def hadamard(a: np.ndarray, b: np.ndarray, counter: FlopCounter | None = None) -> np.ndarray:
    if a.shape != b.shape:
        raise DimensionError(f"hadamard needs equal shapes, got {a.shape} and {b.shape}")
    return _tick(counter, a.size, _finite(a * b, "hadamard"))


def add(a: np.ndarray, b: np.ndarray, counter: FlopCounter | None = None) -> np.ndarray:
    if a.shape != b.shape:
        raise DimensionError(f"add needs equal shapes, got {a.shape} and {b.shape}")
    return _tick(counter, a.size, a + b)


def sub(a: np.ndarray, b: np.ndarray, counter: FlopCounter | None = None) -> np.ndarray:
    if a.shape != b.shape:
        raise DimensionError(f"sub needs equal shapes, got {a.shape} and {b.shape}")
    return _tick(counter, a.size, a - b)


def scale(a: np.ndarray, c: float, counter: FlopCounter | None = None) -> np.ndarray:
    return _tick(counter, a.size, a * c)


def rowwise_kron(u1: np.ndarray, u2: np.ndarray, counter: FlopCounter | None = None) -> np.ndarray:
    """Row-wise Kronecker product.

    Column ``l1 + l2 * k1`` (0-based) of the result holds ``u1[i, l1] * u2[i, l2]``,
    so that ``(U1 ⊘ U2)(V1 ⊘ V2)^T == (U1 V1^T) ⊙ (U2 V2^T)``.
    """
    if u1.ndim != 2 or u2.ndim != 2 or u1.shape[0] != u2.shape[0]:
        raise DimensionError(f"rowwise_kron needs equal row counts, got {u1.shape} and {u2.shape}")
    n, k1 = u1.shape
    k2 = u2.shape[1]
    out = (u1[:, :, None] * u2[:, None, :]).transpose(0, 2, 1).reshape(n, k1 * k2)
    return _tick(counter, n * k1 * k2, _finite(out, "rowwise_kron"))


def diag_scale(
    k: np.ndarray, m: np.ndarray, side: str = "left", counter: FlopCounter | None = None
) -> np.ndarray:
    """``diag(k) @ m`` (side="left") or ``m @ diag(k)`` (side="right")."""
    k = np.asarray(k, dtype=np.float64).reshape(-1)
    if side == "left":
        if k.shape[0] != m.shape[0]:
            raise DimensionError(f"diag_scale: vector of length {k.shape[0]} vs {m.shape[0]} rows")
        out = k[:, None] * m
    elif side == "right":
        if k.shape[0] != m.shape[1]:
            raise DimensionError(f"diag_scale: vector of length {k.shape[0]} vs {m.shape[1]} cols")
        out = m * k[None, :]
    else:
        raise ParameterError(f"unknown side {side!r}")
    return _tick(counter, m.size, _finite(out, "diag_scale"))


def row_sums(m: np.ndarray, counter: FlopCounter | None = None) -> np.ndarray:
    return _tick(counter, m.size, m.sum(axis=1))


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 stream; identical seeds give bit-identical draws."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def random_matrix(rng: np.random.Generator, rows: int, cols: int, bound: float) -> np.ndarray:
    """I.i.d. uniform entries in ``[-bound, bound]``."""
    if not bound > 0:
        raise ParameterError(f"bound must be positive, got {bound}")
    return rng.uniform(-bound, bound, size=(rows, cols))


def linf(a: np.ndarray) -> float:
    """Entry-wise max norm; 0 for empty input."""
    a = np.asarray(a)
    return float(np.max(np.abs(a))) if a.size else 0.0
