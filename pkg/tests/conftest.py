import warnings

import numpy as np
import pytest

from altgrad import exact as E
from altgrad import linalg as la


def single_layer(seed: int, n: int, d: int, x_bound: float = 0.5, w_bound: float | None = None):
    """Seeded ``(X, weights, G)`` for one head; weights default to ``±0.5/d``."""
    rng = la.make_rng(seed)
    wb = 0.5 / d if w_bound is None else w_bound
    x = la.random_matrix(rng, n, d, x_bound)
    wts = E.AttentionWeights(*(la.random_matrix(rng, d, d, wb) for _ in range(3)))
    g_i = la.random_matrix(rng, n, d, 1.0)
    return x, wts, g_i


def linear_probe_loss(g_i, wts=None, causal=False, scale=None):
    """``L = <G, s>`` so that dL/ds is exactly G."""

    def loss(x, w=wts):
        return float(np.sum(g_i * E.forward_exact(x, w, scale=scale, causal=causal).s))

    return loss


@pytest.fixture(autouse=True)
def _quiet_bound_warnings():
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="input exceeds bound")
        yield


# criterion number -> (title, passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def record(num: int, title: str, passed: bool, detail: str) -> None:
    ACCEPTANCE[num] = (title, bool(passed), detail)
    print(f"[acceptance {num}] {'PASS' if passed else 'FAIL'} {title}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        title, passed, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"{num}. {'PASS' if passed else 'FAIL'}  {title}: {detail}")
