"""Concrete (A, B) operator pairs and checkers for the structural hypotheses.

``A`` is always the exact gradient of the discrete energy (1/p)||u||_X^p, and
``B`` the gradient of (1/q)||w||_Y^q, so that

    <A(u), u> = ||u||_X^p        and        <B(w), w> = ||w||_Y^q

hold to rounding for every kind.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .errors import GridMismatch, KindMismatch, ZeroField
from .grid import (
    DualVector,
    Exponents,
    Field,
    GridSpec,
    build_grid,
    energy_structure,
    phi,
    x_norm,
    y_norm,
    y_weights,
)

PAIR_KINDS = ("dirichlet-1d", "dirichlet-2d", "fractional-1d", "steklov-1d")


def parse_kind(label: str, N: int | None = None) -> tuple[str, int]:
    """Split ``"dirichlet-2d"`` into ("dirichlet", 2); plain ``"dirichlet"`` uses ``N``."""
    label = label.strip().lower()
    if "-" in label:
        base, dim = label.rsplit("-", 1)
        if not dim.endswith("d") or not dim[:-1].isdigit():
            raise KindMismatch(f"cannot parse problem kind {label!r}")
        n = int(dim[:-1])
        if N is not None and N != n:
            raise KindMismatch(f"kind {label!r} conflicts with N={N}")
        return base, n
    return label, 1 if N is None else int(N)


@dataclass(frozen=True, eq=False)
class OperatorPair:
    grid: GridSpec
    p: float
    q: float
    s: float | None = None

    def __post_init__(self):
        Exponents(p=self.p, q=self.q, N=self.grid.N, kind=self.grid.kind, s=self.s)
        if self.grid.kind == "fractional":
            # build (and validate) the kernel table eagerly
            self.structure

    @property
    def kind(self) -> str:
        return f"{self.grid.kind}-{self.grid.N}d"

    @property
    def exponents(self) -> Exponents:
        return Exponents(p=self.p, q=self.q, N=self.grid.N, kind=self.grid.kind, s=self.s)

    @cached_property
    def structure(self):
        return energy_structure(self.grid, self.p, self.s)

    @property
    def kernel(self) -> np.ndarray | None:
        return self.structure.kernel

    @cached_property
    def stiffness(self):
        """The p = 2 matrix G^T W G of this pair's X-structure."""
        return hessian(self, None, linear=True)

    def with_p(self, p: float) -> "OperatorPair":
        return OperatorPair(self.grid, p, self.q, self.s)


def make_pair(kind: str, M: int, p: float, q: float, s: float | None = None,
              R: float = 1.0, N: int | None = None) -> OperatorPair:
    base, n = parse_kind(kind, N)
    grid = build_grid(n, M, base, R=R)
    if base == "fractional" and s is None:
        s = 0.5
    return OperatorPair(grid, float(p), float(q), None if base != "fractional" else float(s))


def _check_grid(pair: OperatorPair, v):
    if v.grid != pair.grid:
        raise GridMismatch(f"field grid {v.grid} does not match operator grid {pair.grid}")


def apply_B(pair: OperatorPair, w: Field) -> DualVector:
    _check_grid(pair, w)
    return DualVector(pair.grid, y_weights(pair.grid) * phi(w.values, pair.q))


def _flux(st, zs, p, eps=0.0):
    """Per-term derivative of (1/p)|z|^p (or its eps-regularization), times weights."""
    if len(zs) == 1 and eps == 0.0:
        return [st.weights * phi(zs[0], p)]
    if eps == 0.0:
        mag = st.magnitude(zs)
        coef = np.zeros_like(mag)
        nz = mag > 0
        coef[nz] = mag[nz] ** (p - 2.0)
    else:
        coef = (sum(z * z for z in zs) + eps * eps) ** ((p - 2.0) / 2.0)
    return [st.weights * coef * z for z in zs]


def gradient_values(pair: OperatorPair, u: np.ndarray, eps: float = 0.0) -> np.ndarray:
    """A(u) as a raw array; ``eps > 0`` gives the regularized operator."""
    st = pair.structure
    zs = st.terms(u)
    out = np.zeros(pair.grid.n_nodes)
    for G, fl in zip(st.blocks, _flux(st, zs, pair.p, eps)):
        out += G.T @ fl
    return out


def apply_A(pair: OperatorPair, u: Field) -> DualVector:
    _check_grid(pair, u)
    return DualVector(pair.grid, gradient_values(pair, u.values))


def energy_values(pair: OperatorPair, u: np.ndarray, eps: float = 0.0) -> float:
    """(1/p)||u||_X^p, or the regularized (1/p) sum w [(|z|^2+eps^2)^(p/2) - eps^p]."""
    st = pair.structure
    zs = st.terms(u)
    p = pair.p
    if eps == 0.0:
        return float(np.sum(st.weights * st.magnitude(zs) ** p) / p)
    r = sum(z * z for z in zs) + eps * eps
    return float(np.sum(st.weights * (r ** (p / 2.0) - eps**p)) / p)


def hessian(pair: OperatorPair, u: np.ndarray | None, eps: float = 0.0, linear: bool = False):
    """Hessian of the eps-regularized energy at u (sparse, or dense for fractional).

    ``linear=True`` ignores ``u`` and returns the p = 2 matrix.
    """
    st = pair.structure
    d = len(st.blocks)
    p = pair.p
    if linear:
        C = {(a, a): np.ones_like(st.weights) for a in range(d)}
    else:
        if eps <= 0:
            raise ValueError("the Hessian needs a positive regularization eps")
        zs = st.terms(u)
        r = sum(z * z for z in zs) + eps * eps
        base = r ** ((p - 2.0) / 2.0)
        tail = (p - 2.0) * r ** ((p - 4.0) / 2.0)
        C = {}
        for a in range(d):
            for b in range(a, d):
                c = tail * zs[a] * zs[b]
                if a == b:
                    c = c + base
                C[(a, b)] = c
    return assemble_weighted(pair, C, symmetric_upper=True)


def assemble_weighted(pair: OperatorPair, C: dict, symmetric_upper: bool = False):
    """Sum of G_a^T diag(weights * C[a, b]) G_b over the given block pairs.

    With ``symmetric_upper`` only a <= b is given and the lower part is mirrored.
    """
    st = pair.structure
    H = None
    for (a, b), c in C.items():
        term = st.blocks[a].T @ sp.diags(st.weights * c) @ st.blocks[b]
        if symmetric_upper and a != b:
            term = term + term.T
        H = term if H is None else H + term
    H = H.tocsc()
    if st.dense:
        return H.toarray()
    return H


def residual(pair: OperatorPair, lam: float, w: Field) -> float:
    """max-norm of the dual vector A(w) - lam ||w||_Y^(p-q) B(w)."""
    _check_grid(pair, w)
    yn = y_norm(w, pair.q)
    if yn == 0.0:
        raise ZeroField("residual is undefined for a field with zero Y-norm")
    r = apply_A(pair, w).values - lam * yn ** (pair.p - pair.q) * apply_B(pair, w).values
    return float(np.max(np.abs(r)))


# ---------------------------------------------------------------- hypotheses


@dataclass
class HypothesisResult:
    passed: bool
    worst: float
    witness: dict = field(default_factory=dict)


@dataclass
class HypothesisReport:
    kind: str
    p: float
    q: float
    samples: int
    tolerance: float
    results: dict

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results.values())

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True, default=float)


def _rel(num, den):
    return float(num) / max(float(den), 1e-300)


def check_hypotheses(pair: OperatorPair, n_samples: int = 100, rng_seed: int = 0,
                     tol: float = 1e-9, inner_cfg=None) -> HypothesisReport:
    """Sample random fields and measure how far (A1), (A2), (B1), (B2), (AB) are from holding.

    Inequalities report relative excess; identities report relative error.
    The (AB) entry is the ratio achieved-residual / required-residual of the
    inner solver, so it passes when <= 1.  The required residual is the inner
    tolerance, raised to the rounding floor of the computed solution in the
    rare samples where that floor lies above it (see ``residual_floor``).
    """
    from .inner import InnerConfig, residual_floor, solve_inner

    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    inner_cfg = inner_cfg or InnerConfig()
    rng = np.random.default_rng(rng_seed)
    p, q, grid = pair.p, pair.q, pair.grid
    n = grid.n_nodes
    worst = {k: (0.0, {}) for k in ("A1", "B1", "A2", "A2_equality", "B2", "B2_equality", "AB")}

    def record(name, value, witness):
        if value > worst[name][0] or not worst[name][1]:
            worst[name] = (max(value, 0.0), witness)

    for k in range(n_samples):
        u = Field(grid, rng.standard_normal(n))
        v = Field(grid, rng.standard_normal(n))
        t = float(rng.choice([-1.0, 1.0]) * rng.uniform(0.1, 10.0))
        Au, Bu = apply_A(pair, u), apply_B(pair, u)

        scale_a = abs(t) ** (p - 1) * np.max(np.abs(Au.values))
        err = np.max(np.abs(apply_A(pair, t * u).values - abs(t) ** (p - 2) * t * Au.values))
        record("A1", _rel(err, scale_a), {"sample": k, "t": t})
        scale_b = abs(t) ** (q - 1) * np.max(np.abs(Bu.values))
        err = np.max(np.abs(apply_B(pair, t * u).values - abs(t) ** (q - 2) * t * Bu.values))
        record("B1", _rel(err, scale_b), {"sample": k, "t": t})

        xu, xv = x_norm(u, p, s=pair.s), x_norm(v, p, s=pair.s)
        rhs = xu ** (p - 1) * xv
        lhs = float(np.dot(Au.values, v.values))
        record("A2", _rel(lhs - rhs, rhs), {"sample": k, "slack": _rel(rhs - lhs, rhs)})
        yu, yv = y_norm(u, q), y_norm(v, q)
        rhs = yu ** (q - 1) * yv
        lhs = float(np.dot(Bu.values, v.values))
        record("B2", _rel(lhs - rhs, rhs), {"sample": k, "slack": _rel(rhs - lhs, rhs)})

        tp = abs(t)
        tv = tp * v
        lhs = float(np.dot(apply_A(pair, tv).values, v.values))
        rhs = x_norm(tv, p, s=pair.s) ** (p - 1) * xv
        record("A2_equality", _rel(abs(lhs - rhs), rhs), {"sample": k, "t": tp})
        lhs = float(np.dot(apply_B(pair, tv).values, v.values))
        rhs = y_norm(tv, q) ** (q - 1) * yv
        record("B2_equality", _rel(abs(lhs - rhs), rhs), {"sample": k, "t": tp})

        f = apply_B(pair, Field(grid, rng.standard_normal(n)))
        out = solve_inner(pair, f, inner_cfg)
        allowed = inner_cfg.tolerance * max(1.0, float(np.max(np.abs(f.values))))
        floor = residual_floor(pair, out.u, f)
        record("AB", out.residual / max(allowed, floor),
               {"sample": k, "status": out.status, "iterations": out.iterations,
                "residual": out.residual, "tolerance": allowed, "floor": floor})

    results = {}
    for name, (value, witness) in worst.items():
        limit = 1.0 if name == "AB" else tol
        results[name] = HypothesisResult(passed=bool(value <= limit), worst=value, witness=witness)
    return HypothesisReport(pair.kind, p, q, n_samples, tol, results)

