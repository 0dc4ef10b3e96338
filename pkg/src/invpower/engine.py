"""Outer inverse iteration.

Starting from a Y-unit vector w_0 each step solves A(u_{n+1}) = B(w_n), sets

    lambda_n = ||u_{n+1}||_Y^(1-p),      w_{n+1} = u_{n+1} / ||u_{n+1}||_Y

and checks, within a slack, the chain

    ||w_{n+1}||_X^p <= lambda_n <= ||w_{n+1}||_X^(p-1) ||w_n||_X
                    <= lambda_n^((p-1)/p) lambda_{n-1}^(1/p)

together with lambda_n <= lambda_{n-1} and lambda_n >= mu_hat.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DegenerateIterate, InnerSolveFailed, InvariantViolation, ZeroField
from .grid import Field, normalize_y, read_field_csv, x_norm, y_norm
from .inner import InnerConfig, solve_inner
from .operators import OperatorPair, apply_B, residual

TRACE_COLUMNS = [
    "n", "lambda_n", "xnorm_w_np1_p", "ynorm_diff",
    "inner_iters", "inner_residual", "sign_flipped",
]


@dataclass(frozen=True)
class EngineConfig:
    """Outer-iteration settings.

    ``inner_tol`` and ``inner_tol_floor`` are per unit cell volume: the inner
    solver is asked for ||A(u) - f||_inf <= tol * h^N * max(1, ||f||_inf), which
    bounds the pairing error <A(u) - f, w> by roughly tol * ||w||_1.
    """

    rtol: float = 1e-10
    wtol: float = 1e-10
    max_outer: int = 1000
    inner_tol: float = 1e-10
    inner_tol_floor: float = 1e-12
    inner: InnerConfig = InnerConfig()
    stall_accept: float = 1e-6
    strict: bool = False
    mu_hat: float | None = None
    mu_hat_rtol: float = 1e-6
    warm_start: bool = True

    def __post_init__(self):
        for name in ("rtol", "wtol", "inner_tol", "inner_tol_floor", "mu_hat_rtol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.max_outer < 1:
            raise ValueError("max_outer must be >= 1")

    @property
    def inner_tol_cap(self) -> float:
        return self.inner_tol


@dataclass
class IterationState:
    n: int
    w: Field  # w_{n+1}
    lam: float  # lambda_n
    xnorm_w_np1_p: float
    xnorm_w_n: float
    ynorm_u: float  # ||u_{n+1}||_Y
    ynorm_diff: float  # ||w_{n+1} - w_n||_Y
    inner_iters: int
    inner_residual: float
    inner_tol: float
    inner_status: str
    sign_flipped: bool = False


@dataclass
class LedgerEntry:
    n: int
    check: str
    magnitude: float


@dataclass
class Trace:
    states: list = field(default_factory=list)
    ledger: list = field(default_factory=list)
    termination: str = ""
    slack: float = 0.0
    margins: dict = field(default_factory=dict)  # worst (largest) excess per check

    @property
    def lambdas(self) -> np.ndarray:
        return np.array([s.lam for s in self.states])

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for s in self.states:
            writer.writerow([
                s.n, _fmt(s.lam), _fmt(s.xnorm_w_np1_p), _fmt(s.ynorm_diff),
                s.inner_iters, _fmt(s.inner_residual), int(s.sign_flipped),
            ])
        return buf.getvalue()


@dataclass
class EigenResult:
    lam: float
    w: Field
    trace: Trace
    converged: bool
    residual: float
    mu_hat: float | None = None

    @property
    def iterations(self) -> int:
        return len(self.trace.states)


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def read_trace_csv(text: str) -> list[dict]:
    rows = list(csv.DictReader(io.StringIO(text)))
    out = []
    for r in rows:
        out.append({
            "n": int(r["n"]),
            "lambda_n": float(r["lambda_n"]),
            "xnorm_w_np1_p": float(r["xnorm_w_np1_p"]),
            "ynorm_diff": float(r["ynorm_diff"]),
            "inner_iters": int(r["inner_iters"]),
            "inner_residual": float(r["inner_residual"]),
            "sign_flipped": bool(int(r["sign_flipped"])),
        })
    return out


# ---------------------------------------------------------------- seeds


def seed(pair: OperatorPair, choice: str = "const-one", rng_seed: int = 0,
         path=None) -> Field:
    grid = pair.grid
    if choice == "const-one":
        u = Field(grid, np.ones(grid.n_nodes))
    elif choice == "random":
        rng = np.random.default_rng(rng_seed)
        u = Field(grid, rng.uniform(0.0, 1.0, grid.n_nodes))
    elif choice in ("file", "from-file"):
        if path is None:
            raise ValueError("file seed needs a path")
        u = read_field_csv(path, grid)
    else:
        raise ValueError(f"unknown seed kind {choice!r}")
    try:
        w, _ = normalize_y(u, pair.q)
    except ZeroField as exc:
        raise ZeroField(f"seed {choice!r} has zero Y-norm") from exc
    return w


def rayleigh(pair: OperatorPair, w: Field) -> float:
    yn = y_norm(w, pair.q)
    if yn == 0.0:
        raise ZeroField("Rayleigh quotient of a field with zero Y-norm")
    return x_norm(w, pair.p, s=pair.s) ** pair.p / yn**pair.p


# ---------------------------------------------------------------- iteration


def step(pair: OperatorPair, state, cfg: EngineConfig | None = None,
         inner_tol: float | None = None) -> IterationState:
    """One inverse-iteration step from ``state`` (a Y-unit Field w_0 or the previous state)."""
    cfg = cfg or EngineConfig()
    if isinstance(state, IterationState):
        n, w_n, warm = state.n + 1, state.w, state.ynorm_u * state.w
        xw_n = state.xnorm_w_np1_p ** (1.0 / pair.p)
    else:
        n, w_n, warm = 0, state, None
        xw_n = x_norm(w_n, pair.p, s=pair.s)
    if not cfg.warm_start:
        warm = None
    tol = cfg.inner_tol_cap if inner_tol is None else inner_tol
    inner_cfg = replace(cfg.inner, tolerance=tol * pair.grid.cell_volume)
    f = apply_B(pair, w_n)
    out = solve_inner(pair, f, inner_cfg, warm_start=warm)
    if not out.converged:
        # a stalled Newton sits at the rounding floor of A; accept it within a sanity bound
        allowed = cfg.stall_accept * max(1.0, float(np.max(np.abs(f.values))))
        if out.status != "stalled" or out.residual > allowed:
            raise InnerSolveFailed(
                f"step {n}: inner residual {out.residual:.3e} above {allowed:.3e} ({out.status})",
                outcome=out,
            )
    t = y_norm(out.u, pair.q)
    if t == 0.0:
        raise ZeroField(f"step {n}: inner solution vanished")
    lam = t ** (1.0 - pair.p)
    if not (math.isfinite(t) and math.isfinite(lam) and lam > 0):
        raise DegenerateIterate(f"step {n}: ||u||_Y = {t!r} gives lambda = {lam!r}")
    w_next = out.u / t
    flipped = float(np.dot(f.values, w_next.values)) < 0
    if flipped:
        w_next = -w_next
    return IterationState(
        n=n,
        w=w_next,
        lam=lam,
        xnorm_w_np1_p=x_norm(w_next, pair.p, s=pair.s) ** pair.p,
        xnorm_w_n=xw_n,
        ynorm_u=t,
        ynorm_diff=y_norm(w_next - w_n, pair.q),
        inner_iters=out.iterations,
        inner_residual=out.residual,
        inner_tol=tol,
        inner_status=out.status,
        sign_flipped=flipped,
    )


def _checks(pair, st, prev, mu_hat, mu_tol):
    """Excess of each invariant at this step (positive = violated by that much)."""
    p = pair.p
    lam = st.lam
    mid = st.xnorm_w_np1_p ** ((p - 1.0) / p) * st.xnorm_w_n
    out = {
        "sandwich_lower": st.xnorm_w_np1_p - lam,
        "sandwich_mid": lam - mid,
        "xnorm_monotone": st.xnorm_w_np1_p ** (1.0 / p) - st.xnorm_w_n,
    }
    if prev is not None:
        out["sandwich_upper"] = mid - lam ** ((p - 1.0) / p) * prev.lam ** (1.0 / p)
        out["lambda_monotone"] = lam - prev.lam
    if mu_hat is not None:
        out["lower_bound"] = (mu_hat - mu_tol) - lam
    return out


def run(pair: OperatorPair, w0: Field, cfg: EngineConfig | None = None) -> EigenResult:
    cfg = cfg or EngineConfig()
    if abs(y_norm(w0, pair.q) - 1.0) > 1e-10:
        raise ValueError("initial vector must be Y-unit; use seed() or normalize_y()")
    trace = Trace()
    cap, floor = cfg.inner_tol_cap, min(cfg.inner_tol_floor, cfg.inner_tol_cap)
    mu_tol = None if cfg.mu_hat is None else cfg.mu_hat_rtol * cfg.mu_hat
    prev, state = None, w0
    converged = False
    for k in range(cfg.max_outer):
        lams = trace.lambdas
        tol = cap
        if k >= 2:
            tol = min(cap, max(floor, 0.01 * abs(lams[-2] - lams[-1])))
        st = step(pair, state, cfg, inner_tol=tol)
        if k == 0:
            trace.slack = 10.0 * cap * max(1.0, st.lam)
        for name, excess in _checks(pair, st, prev, cfg.mu_hat, mu_tol or 0.0).items():
            trace.margins[name] = max(trace.margins.get(name, -math.inf), excess)
            if excess > trace.slack:
                entry = LedgerEntry(st.n, name, excess)
                trace.ledger.append(entry)
                if cfg.strict:
                    trace.states.append(st)
                    trace.termination = f"invariant violated: {name}"
                    raise InvariantViolation(
                        f"step {st.n}: {name} exceeded by {excess:.3e} (slack {trace.slack:.3e})",
                        entry=entry,
                    )
        trace.states.append(st)
        if prev is not None and abs(prev.lam - st.lam) <= cfg.rtol * st.lam \
                and st.ynorm_diff <= cfg.wtol:
            converged = True
            break
        prev, state = st, st
    trace.termination = "converged" if converged else "max-outer"
    last = trace.states[-1]
    return EigenResult(
        lam=last.lam,
        w=last.w,
        trace=trace,
        converged=converged,
        residual=residual(pair, last.lam, last.w),
        mu_hat=cfg.mu_hat,
    )
