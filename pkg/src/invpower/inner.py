"""Solver for the (AB) step: find u with A(u) = f.

p = 2 is a linear SPD system and is solved by a cached sparse factorization.
Otherwise u minimizes the strictly convex energy

    E(u) = (1/p) ||u||_X^p - <f, u>

by damped Newton with Armijo backtracking.  Every |z|^(p-2) is replaced by
(|z|^2 + eps^2)^((p-2)/2) during a sequence of annealing stages; the last
stage minimizes the exact energy (eps only floors its Hessian) and the
reported residual is always that of the unregularized operator.

For p < 2 the flux |z|^(p-2) z has an unbounded derivative at z = 0 and
Newton in u alone crawls wherever the solution gradient is small.  The last
stage then also carries the flux s as an unknown and linearizes the smooth
inverse relation z = |s|^(p'-2) s, p' = p/(p-1), instead (primal-dual Newton).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla
import scipy.sparse.linalg as spla

from .errors import SingularSystem
from .grid import DualVector, Field
from .operators import OperatorPair, assemble_weighted, energy_values, gradient_values, hessian


@dataclass(frozen=True)
class InnerConfig:
    tolerance: float = 1e-11
    max_iter: int = 200
    eps_min: float = 1e-8  # relative to the initial gradient scale
    rho: float = 0.1
    stage_iters: int = 1
    stall_iters: int = 3
    armijo: float = 1e-4
    backtrack: float = 0.5
    method: str = "auto"  # "auto" | "newton"
    debug_csv: str | None = None

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if not 0 < self.rho < 1:
            raise ValueError("rho must lie in (0, 1)")
        if not 0 < self.armijo <= 0.5:
            raise ValueError("Armijo constant must lie in (0, 0.5]")
        if not 0 < self.backtrack < 1:
            raise ValueError("backtrack factor must lie in (0, 1)")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.method not in ("auto", "newton"):
            raise ValueError(f"unknown inner method {self.method!r}")


@dataclass
class InnerOutcome:
    u: Field
    residual: float
    iterations: int
    status: str  # "converged" | "max-iters" | "stalled"
    energies: list = field(default_factory=list)  # (stage eps, energy) per accepted iterate
    log: list = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.status == "converged"


def energy(pair: OperatorPair, u: Field, f: DualVector) -> float:
    if u.grid != f.grid or u.grid != pair.grid:
        from .errors import GridMismatch

        raise GridMismatch("energy: field, data and operator must share a grid")
    return energy_values(pair, u.values) - float(np.dot(f.values, u.values))


def _linear_factor(pair: OperatorPair):
    cache = pair.__dict__.setdefault("_inner_cache", {})
    if "lu" not in cache:
        K = pair.stiffness
        try:
            if pair.structure.dense:
                cache["lu"] = ("chol", sla.cho_factor(K))
            else:
                cache["lu"] = ("splu", spla.splu(K.tocsc()))
        except (RuntimeError, np.linalg.LinAlgError) as exc:
            raise SingularSystem(f"p=2 system for {pair.kind} is singular: {exc}") from exc
    return cache["lu"]


def linear_solve(pair: OperatorPair, rhs: np.ndarray) -> np.ndarray:
    kind, fac = _linear_factor(pair)
    if kind == "chol":
        return sla.cho_solve(fac, rhs)
    return fac.solve(rhs)


def _residual(pair, u, f):
    return float(np.max(np.abs(gradient_values(pair, u) - f)))


def residual_floor(pair: OperatorPair, u: Field, f: DualVector) -> float:
    """Residual change caused by moving every nodal value of u by one ulp.

    No double-precision vector does better than this near u, so a residual
    below it is as good as the arithmetic allows.  Each term moves by the
    rounding of its own inputs and the flux change is taken from |z|^(p-1)
    itself, which stays finite at z = 0 where the derivative does not.
    """
    st = pair.structure
    eps = np.finfo(float).eps
    au = np.abs(u.values)
    mag = st.magnitude(st.terms(u.values))
    dz = eps * np.sqrt(sum((Ga @ au) ** 2 for Ga in st.abs_blocks))
    dflux = st.weights * np.abs((mag + dz) ** (pair.p - 1.0) - mag ** (pair.p - 1.0))
    out = sum(Ga.T @ dflux for Ga in st.abs_blocks) + eps * np.abs(f.values)
    return float(np.max(out))


def solve_inner(pair: OperatorPair, f: DualVector, cfg: InnerConfig | None = None,
                warm_start: Field | None = None) -> InnerOutcome:
    cfg = cfg or InnerConfig()
    if f.grid != pair.grid:
        from .errors import GridMismatch

        raise GridMismatch("right-hand side lives on a different grid")
    fv = f.values
    fmax = float(np.max(np.abs(fv)))
    allowed = cfg.tolerance * max(1.0, fmax)
    if fmax == 0.0:
        return InnerOutcome(Field.zeros(pair.grid), 0.0, 0, "converged")

    if pair.p == 2.0 and cfg.method == "auto":
        u = linear_solve(pair, fv)
        res = _residual(pair, u, fv)
        if res > allowed:
            # one step of iterative refinement
            u = u - linear_solve(pair, gradient_values(pair, u) - fv)
            res = _residual(pair, u, fv)
        # a refined direct solve that still misses the target sits at the rounding floor
        status = "converged" if res <= allowed else "stalled"
        return InnerOutcome(Field(pair.grid, u), res, 1, status)

    return _newton(pair, fv, allowed, cfg, warm_start)


def _initial_guess(pair, fv, warm_start):
    p = pair.p
    u = warm_start.values.copy() if warm_start is not None else linear_solve(pair, fv)
    # best multiple of u: minimize t^p X^p / p - t <f, u>
    c = float(np.dot(fv, u))
    xp = p * energy_values(pair, u)
    if c <= 0 or xp == 0:
        u = linear_solve(pair, fv)
        c, xp = float(np.dot(fv, u)), p * energy_values(pair, u)
    return u * (c / xp) ** (1.0 / (p - 1.0))


def _flux_terms(st, zs, p):
    """Unweighted flux |z|^(p-2) z of each term."""
    mag = st.magnitude(zs)
    c = np.zeros_like(mag)
    nz = mag > 0
    c[nz] = mag[nz] ** (p - 2.0)
    return [c * z for z in zs]


def _dual_direction(pair, zs, sig, fv, dense):
    """Primal-dual Newton step (du, dsig) for G^T W s = f, z(u) = |s|^(p'-2) s."""
    st = pair.structure
    pd = pair.p / (pair.p - 1.0)
    mag = np.sqrt(sum(x * x for x in sig))
    floor = 1e-12 * float(np.max(mag, initial=0.0)) or 1e-300
    mag = np.sqrt(mag * mag + floor * floor)
    r2 = [z - mag ** (pd - 2.0) * x for z, x in zip(zs, sig)]
    # inverse of the Jacobian of s -> |s|^(p'-2) s, per term
    base = mag ** (2.0 - pd)
    d = len(zs)
    if d == 1:
        C = {(0, 0): base / (pd - 1.0)}
    else:
        n = [x / mag for x in sig]
        k = (pd - 2.0) / (pd - 1.0)
        C = {(a, b): base * (float(a == b) - k * n[a] * n[b]) for a in range(d) for b in range(d)}
    Cr = [sum(C[(a, b)] * r2[b] for b in range(d)) for a in range(d)]
    rhs = fv - sum(G.T @ (st.weights * (x + c)) for G, x, c in zip(st.blocks, sig, Cr))
    H = assemble_weighted(pair, C)
    du = _solve(H, rhs, dense)
    Gd = [G @ du for G in st.blocks]
    dsig = [sum(C[(a, b)] * (r2[b] + Gd[b]) for b in range(d)) for a in range(d)]
    return du, dsig


def _solve(H, rhs, dense):
    if dense:
        try:
            return sla.cho_solve(sla.cho_factor(H), rhs)
        except np.linalg.LinAlgError:
            return np.linalg.lstsq(H, rhs, rcond=None)[0]
    return spla.spsolve(H, rhs)


def _line_search(E, pair, fv, eps, u, Eu, d, slope, gres, cfg):
    """Armijo backtracking; once energy differences reach rounding level, accept any
    step that lowers the residual.  Returns (t, new u, new energy) or None."""
    t = 1.0
    while t > 1e-12:
        un = u + t * d
        En = E(un)
        if En <= Eu + cfg.armijo * t * slope:
            return t, un, En
        if abs(t * slope) < 1e-13 * max(abs(Eu), 1e-300):
            if float(np.max(np.abs(gradient_values(pair, un, eps) - fv))) < gres:
                return t, un, En
            return None
        t *= cfg.backtrack
    return None


def _newton(pair, fv, allowed, cfg, warm_start):
    dense = pair.structure.dense
    u = _initial_guess(pair, fv, warm_start)
    st = pair.structure
    scale = float(np.max(st.magnitude(st.terms(u)), initial=0.0)) or 1.0
    eps_floor = cfg.eps_min * scale
    stages = []
    eps = scale
    while eps > eps_floor:
        stages.append(eps)
        eps *= cfg.rho
    stages.append(0.0)
    dual = pair.p < 2.0

    energies, log = [], []
    iters = 0
    status = "max-iters"
    for eps in stages:
        final = eps == 0.0
        E = lambda x: energy_values(pair, x, eps) - float(np.dot(fv, x))  # noqa: E731
        Eu = E(u)
        energies.append((eps, Eu))
        stage_count, best, no_progress, drop = 0, np.inf, 0, np.inf
        sig = _flux_terms(st, st.terms(u), pair.p) if final and dual else None
        while iters < cfg.max_iter:
            g = gradient_values(pair, u, eps) - fv
            gres = float(np.max(np.abs(g)))
            if final:
                if gres <= allowed:
                    status = "converged"
                    break
                if gres < 0.5 * best or drop > 1e-13 * abs(Eu):
                    best, no_progress = min(gres, best), 0
                else:
                    no_progress += 1
                    if no_progress > cfg.stall_iters:
                        status = "stalled"
                        break
            elif gres <= allowed or stage_count >= cfg.stage_iters:
                break
            step = None
            if sig is not None:
                d, dsig = _dual_direction(pair, st.terms(u), sig, fv, dense)
                slope = float(np.dot(g, d))
                if slope < 0:
                    step = _line_search(E, pair, fv, eps, u, Eu, d, slope, gres, cfg)
                if step is not None:
                    sig = [x + step[0] * dx for x, dx in zip(sig, dsig)]
            if step is None:
                H = hessian(pair, u, eps if eps > 0 else eps_floor)
                d = -_solve(H, g, dense)
                slope = float(np.dot(g, d))
                if not slope < 0:
                    d, slope = -g, -float(np.dot(g, g))
                step = _line_search(E, pair, fv, eps, u, Eu, d, slope, gres, cfg)
                if step is not None and sig is not None:
                    sig = _flux_terms(st, st.terms(step[1]), pair.p)
            iters += 1
            stage_count += 1
            if step is None:
                if final:
                    status = "stalled"
                break
            t, un, En = step
            drop = Eu - En
            u, Eu = un, En
            energies.append((eps, En))
            log.append((iters, eps, En, gres, t))
    res = _residual(pair, u, fv)
    if res <= allowed:
        status = "converged"
    if cfg.debug_csv:
        _write_debug(cfg.debug_csv, log)
    return InnerOutcome(Field(pair.grid, u), res, iters, status, energies, log)


def _write_debug(path, log):
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(["iteration", "eps", "energy", "residual", "step"])
        for row in log:
            w.writerow([row[0]] + [format(x, ".17g") for x in row[1:]])
