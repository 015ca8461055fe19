"""Seeded experiments: gradient checks, error-vs-degree sweeps, scaling, training.

Every runner takes a :class:`RunSpec` and returns a :class:`Report` whose
``results`` rows are flat dicts, so the same report serialises to JSON and CSV
with identical values. Flop counts, not wall time, decide pass/fail.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import __version__, fastgrad
from . import exact as E
from . import linalg as la
from . import model as M
from .errors import CapacityError, DegeneracyError, ParameterError, RangeError
from .kernel import KernelConfig, approx_attention

COMMANDS = ("gradcheck", "errsweep", "scaling", "train-demo")

GRADCHECK_MAX_N = 256
DENSE_MAX_N = 2048
FAST_SLOPE_MAX = 1.15
DENSE_SLOPE_MIN = 1.85
GRADCHECK_TOL = 1e-5
# below this, differences between degrees are double-precision rounding
ROUNDING_FLOOR = 1e-14

_DEFAULT_DEGREE = {"gradcheck": 10, "errsweep": 10, "scaling": 4, "train-demo": 10}


@dataclass
class RunSpec:
    command: str
    n: int = 16
    d: int = 4
    layers: int = 2
    heads: int = 1
    seed: int = 0
    degree: int | None = None
    degrees: list[int] = field(default_factory=lambda: [2, 4, 6, 8, 10])
    n_list: list[int] = field(default_factory=lambda: [256, 512, 1024, 2048, 4096])
    residual: bool | None = None
    causal: bool = False
    loss: str = "sq"
    path: str = "fast"
    activation: str = "identity"
    steps: int = 20
    lr: float = 0.005
    out: str | None = None
    format: str = "json"

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise ParameterError(f"unknown command {self.command!r}")
        if any(b <= a for a, b in zip(self.n_list, self.n_list[1:])):
            raise ParameterError(f"n_list must be strictly increasing: {self.n_list}")
        if any(b <= a for a, b in zip(self.degrees, self.degrees[1:])):
            raise ParameterError(f"degrees must be strictly increasing: {self.degrees}")
        if self.loss not in ("sq", "ce"):
            raise ParameterError(f"unknown loss {self.loss!r}")
        if self.format not in ("json", "csv"):
            raise ParameterError(f"unknown format {self.format!r}")
        if self.degree is None:
            self.degree = _DEFAULT_DEGREE[self.command]
        if self.residual is None:
            # plain attention stacks average tokens and barely train
            self.residual = self.command == "train-demo"


@dataclass
class Report:
    config: dict
    seed: int
    version: str
    results: list[dict]
    summary: dict = field(default_factory=dict)
    passed: bool = True

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "seed": self.seed,
            "version": self.version,
            "passed": self.passed,
            "summary": self.summary,
            "results": self.results,
        }

    def to_json(self) -> str:
        return dumps_17g(self.to_dict())

    def to_csv(self) -> str:
        keys: list[str] = []
        for row in self.results:
            keys.extend(k for k in row if k not in keys)
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(keys)
        for row in self.results:
            writer.writerow([_fmt(row.get(k, "")) for k in keys])
        return buf.getvalue()

    def render(self, fmt: str) -> str:
        return self.to_json() if fmt == "json" else self.to_csv()


def _fmt(v) -> str:
    if isinstance(v, bool) or v is None:
        return "" if v is None else str(v).lower()
    if isinstance(v, float):
        return _float17(v)
    return str(v)


def _float17(x: float) -> str:
    if math.isnan(x):
        return "NaN"
    if math.isinf(x):
        return "Infinity" if x > 0 else "-Infinity"
    return format(x, ".17g")


def dumps_17g(obj) -> str:
    """JSON with every float written to 17 significant digits."""
    floats: list[str] = []

    def swap(o):
        if isinstance(o, bool) or o is None:
            return o
        if isinstance(o, float | np.floating):
            floats.append(_float17(float(o)))
            return f"@@F{len(floats) - 1}@@"
        if isinstance(o, np.integer):
            return int(o)
        if isinstance(o, dict):
            return {k: swap(v) for k, v in o.items()}
        if isinstance(o, list | tuple):
            return [swap(v) for v in o]
        return o

    text = json.dumps(swap(obj), indent=2)
    for i, f in enumerate(floats):
        text = text.replace(f'"@@F{i}@@"', f, 1)
    return text


def _report(spec: RunSpec, results, summary, passed) -> Report:
    return Report(asdict(spec), spec.seed, __version__, results, summary, passed)


def _model_config(spec: RunSpec, path: str) -> M.ModelConfig:
    return M.ModelConfig(
        m=spec.layers,
        n=spec.n,
        d=spec.d,
        heads=spec.heads,
        use_residual=spec.residual,
        use_causal=spec.causal,
        activation=spec.activation,
        kernel=KernelConfig(spec.degree, bound_R=4.0),
        path=path,
    )


def _instance(spec: RunSpec):
    cfg = _model_config(spec, "exact")
    kind = "squared" if spec.loss == "sq" else "cross-entropy"
    return M.random_instance(spec.seed, cfg, loss_kind=kind)


def identity_instance(spec: RunSpec):
    """All weights identity, zero target: the degenerate gradcheck case."""
    cfg = _model_config(spec, "exact")
    eye = np.eye(spec.d)
    weights = [M.LayerWeights(eye, eye, eye, eye) for _ in range(spec.layers)]
    x = la.random_matrix(la.make_rng(spec.seed), spec.n, spec.d, 0.5)
    return x, weights, replace(cfg, loss=E.LossSpec("squared", np.zeros((spec.n, spec.d))))


def model_fd_gradients(x, weights, cfg: M.ModelConfig) -> dict:
    """Central-difference gradients of the exact total loss for every parameter."""
    exact_cfg = replace(cfg, path="exact")
    out = {"g_x": E.finite_diff_grad(lambda a: M.total_loss(a, weights, exact_cfg), x)}
    tapes, _ = M.forward(x, weights, exact_cfg)
    for i, lw in enumerate(weights):
        for name in ("w_q", "w_k", "w_v", "w_g"):

            def loss_of(a, i=i, name=name):
                ws = list(weights)
                ws[i] = replace(weights[i], **{name: a})
                return M.total_loss(x, ws, exact_cfg)

            out[(i, "g_" + name.replace("_", ""))] = E.finite_diff_grad(loss_of, getattr(lw, name))
        t_in = tapes[i].t_in
        out[(i, "g_t")] = E.finite_diff_grad(
            lambda t, i=i: M.loss_from_layer(t, weights, exact_cfg, i), t_in
        )
    return out


def _grad_map(g: M.ModelGradients) -> dict:
    out = {"g_x": g.g_x}
    for i, lg in enumerate(g.layers):
        out[(i, "g_t")] = g.g_t[i]
        for name in ("g_wq", "g_wk", "g_wv", "g_wg"):
            out[(i, name)] = getattr(lg, name)
    return out


def run_gradcheck(spec: RunSpec, instance=None) -> Report:
    """Fast-vs-exact and exact-vs-finite-difference l_inf errors per quantity."""
    if spec.n > GRADCHECK_MAX_N:
        raise CapacityError(f"n={spec.n} exceeds the dense-oracle limit {GRADCHECK_MAX_N}")
    x, weights, cfg = instance if instance is not None else _instance(spec)
    grads = {}
    for path in ("exact", "fast"):
        c = replace(cfg, path=path)
        tapes, _ = M.forward(x, weights, c)
        grads[path] = _grad_map(M.multigrad(tapes, weights, c))
    fd = model_fd_gradients(x, weights, cfg)
    rows = []
    for key, ref in fd.items():
        layer, qty = (key if isinstance(key, tuple) else (-1, key))
        rows.append(
            {
                "layer": layer + 1,
                "quantity": qty,
                "fast_vs_exact": la.linf(grads["fast"][key] - grads["exact"][key]),
                "exact_vs_fd": la.linf(grads["exact"][key] - ref),
                "fast_vs_fd": la.linf(grads["fast"][key] - ref),
            }
        )
    rows.sort(key=lambda r: (r["layer"], r["quantity"]))
    worst_fast = max(r["fast_vs_exact"] for r in rows)
    worst_fd = max(r["exact_vs_fd"] for r in rows)
    summary = {"max_fast_vs_exact": worst_fast, "max_exact_vs_fd": worst_fd}
    return _report(spec, rows, summary, worst_fast <= GRADCHECK_TOL and worst_fd <= GRADCHECK_TOL)


def errsweep_instance(seed: int, n: int, d: int):
    """Single head with O(1) scores so truncation error stays above rounding."""
    rng = la.make_rng(seed)
    x = la.random_matrix(rng, n, d, 1.0)
    wts = E.AttentionWeights(*(la.random_matrix(rng, d, d, 1.0) for _ in range(3)))
    g_i = la.random_matrix(rng, n, d, 1.0)
    return x, wts, g_i


def run_errsweep(spec: RunSpec, instance=None) -> Report:
    x, wts, g_i = instance if instance is not None else errsweep_instance(spec.seed, spec.n, spec.d)
    cache = E.forward_exact(x, wts)
    exact = E.exact_bundle(x, wts, g_i)
    rows = []
    for g in spec.degrees:
        cfg = KernelConfig(g, bound_R=math.inf)
        row = {"degree": g, "rank": cfg.rank(spec.d)}
        try:
            f_lr, h, s = fastgrad.fast_forward(x, wts, cfg)
        except (DegeneracyError, CapacityError) as err:
            row.update(status=type(err).__name__)
            rows.append(row)
            continue
        row.update(
            status="ok",
            f_error=la.linf(f_lr.materialize() - cache.f),
            f_bound=f_lr.est_error,
            g_t_error=la.linf(fastgrad.fast_grad_T(x, wts, f_lr, h, s, g_i) - exact.g_t),
            g_w_error=la.linf(fastgrad.fast_grad_W(x, f_lr, g_i, h) - exact.g_w),
            g_v_error=la.linf(fastgrad.fast_grad_WV(x, f_lr, g_i) - exact.g_v),
        )
        rows.append(row)
    ok = [r for r in rows if r["status"] == "ok"]
    monotone = all(
        b[k] <= a[k] + ROUNDING_FLOOR for a, b in zip(ok, ok[1:]) for k in ("f_error", "g_t_error")
    )
    bounded = all(r["f_error"] <= r["f_bound"] + ROUNDING_FLOOR for r in ok)
    summary = {"monotone": monotone, "within_bound": bounded}
    return _report(spec, rows, summary, monotone and bounded)


def scaling_instance(seed: int, n: int, d: int):
    rng = la.make_rng(seed)
    x = la.random_matrix(rng, n, d, 0.5)
    wts = E.AttentionWeights(*(la.random_matrix(rng, d, d, 0.5 / d) for _ in range(3)))
    w_g = np.eye(d) + la.random_matrix(rng, d, d, 0.5 / d)
    upstream = la.random_matrix(rng, n, d, 1.0)
    return x, wts, w_g, upstream


def fast_single_grad_flops(x, wts, w_g, upstream, cfg: KernelConfig) -> tuple[int, int]:
    counter = la.FlopCounter()
    t0 = time.perf_counter_ns()
    fastgrad.single_grad(x, wts, w_g, "identity", upstream, cfg, counter=counter)
    return counter.flops, time.perf_counter_ns() - t0


def dense_single_grad_flops(x, wts, w_g, upstream) -> tuple[int, int]:
    counter = la.FlopCounter()
    t0 = time.perf_counter_ns()
    cache = E.forward_exact(x, wts, counter=counter)
    g_i = E.propagate_through_g(upstream, cache.s, w_g, "identity", counter)
    E.grad_T_exact_dterms(cache, x, wts, g_i, counter)
    E.grad_W_exact(cache, x, g_i, counter)
    E.grad_WV_exact(cache, x, g_i, counter)
    return counter.flops, time.perf_counter_ns() - t0


def loglog_slope(ns, values) -> float:
    return float(np.polyfit(np.log(ns), np.log(values), 1)[0])


def run_scaling(spec: RunSpec) -> Report:
    cfg = KernelConfig(spec.degree, bound_R=1.0)
    rows = []
    for n in spec.n_list:
        x, wts, w_g, up = scaling_instance(spec.seed, n, spec.d)
        row = {"n": n, "rank": cfg.rank(spec.d)}
        row["fast_flops"], row["fast_ns"] = fast_single_grad_flops(x, wts, w_g, up, cfg)
        if n <= DENSE_MAX_N:
            row["dense_flops"], row["dense_ns"] = dense_single_grad_flops(x, wts, w_g, up)
        rows.append(row)
    fast_slope = loglog_slope([r["n"] for r in rows], [r["fast_flops"] for r in rows])
    dense = [r for r in rows if "dense_flops" in r]
    dense_slope = (
        loglog_slope([r["n"] for r in dense], [r["dense_flops"] for r in dense])
        if len(dense) >= 2
        else math.nan
    )
    summary = {"fast_flop_slope": fast_slope, "dense_flop_slope": dense_slope}
    passed = fast_slope <= FAST_SLOPE_MAX and (math.isnan(dense_slope) or dense_slope >= DENSE_SLOPE_MIN)
    return _report(spec, rows, summary, passed)


def run_train_demo(spec: RunSpec, instance=None) -> Report:
    """SGD driven by ``spec.path`` gradients (fast by default)."""
    x, weights, cfg = instance if instance is not None else _instance(spec)
    cfg = replace(cfg, path=spec.path)
    rows = []
    failed_at = None
    for step in range(spec.steps + 1):
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                tapes, loss = M.forward(x, weights, cfg)
        except (RangeError, DegeneracyError):
            # weights blew up past the representable score range
            loss = math.nan
        rows.append({"step": step, "loss": loss})
        if not math.isfinite(loss):
            failed_at = step
            break
        if step < spec.steps:
            weights = M.gradient_descent_step(weights, M.multigrad(tapes, weights, cfg), spec.lr)
    first, last = rows[0]["loss"], rows[-1]["loss"]
    summary = {"initial_loss": first, "final_loss": last, "failed_step": failed_at}
    passed = failed_at is None and (last < first or spec.lr == 0 or spec.steps == 0)
    return _report(spec, rows, summary, passed)


RUNNERS = {
    "gradcheck": run_gradcheck,
    "errsweep": run_errsweep,
    "scaling": run_scaling,
    "train-demo": run_train_demo,
}


def run(spec: RunSpec) -> Report:
    return RUNNERS[spec.command](spec)
