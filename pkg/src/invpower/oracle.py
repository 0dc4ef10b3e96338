"""Independent reference computations.

Nothing here calls into ``operators`` or ``inner``: the p = 2 matrices, the
X-energies and their gradients are assembled again from the grid geometry so
that agreement with the iteration engine means something.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import UnsupportedKind, ZeroField
from .grid import Field, GridSpec


@dataclass
class OracleResult:
    mu_hat: float
    w_hat: Field
    method: str
    optimality: float  # max |A(w) - mu B(w)| on the unit sphere
    iterations: int = 0
    converged: bool = True


@dataclass(frozen=True)
class OracleConfig:
    gtol: float = 1e-10  # target optimality, relative to mu
    accept: float = 1e-6  # the Rayleigh value error scales like its square
    max_iter: int = 20000
    stall_iters: int = 200
    delta: float = 1e-6  # regularization of |z|^(p-2), relative to max|z|
    newton_below: float = 1e-3  # switch to tangent Newton steps once optimality is this small
    armijo: float = 1e-4
    backtrack: float = 0.5


def _phi(t, r):
    a = np.abs(t)
    out = np.zeros_like(t, dtype=float)
    nz = a > 0
    out[nz] = a[nz] ** (r - 2.0) * t[nz]
    return out


# ---------------------------------------------------------------- p = 2 assembly


def _lap1d(n: int, h: float) -> sp.csr_matrix:
    return sp.diags([-np.ones(n - 1), 2 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1]) / h**2


def _frac_full(grid: GridSpec, p: float, s: float):
    """Positions of every node of [-R, 1+R] and the full kernel table h^2/|x-y|^(1+sp)."""
    M, h, E = grid.M, grid.h, grid.n_exterior
    idx = np.arange(-E, M + E + 1)
    gap = np.abs(idx[:, None] - idx[None, :]) * h
    with np.errstate(divide="ignore"):
        K = np.where(gap > 0, h**2 / gap ** (1.0 + s * p), 0.0)
    interior = (idx >= 1) & (idx <= M - 1)
    return idx, K, interior


def assemble_p2(pair) -> tuple[np.ndarray | sp.spmatrix, np.ndarray]:
    """Matrix pencil (K, b) of the linear problem: K v = lambda diag(b) v."""
    grid = pair.grid
    M, h = grid.M, grid.h
    if grid.kind == "dirichlet" and grid.N == 1:
        return (h * _lap1d(M - 1, h)).tocsr(), np.full(M - 1, h)
    if grid.kind == "dirichlet" and grid.N == 2:
        T = _lap1d(M - 1, h)
        Id = sp.identity(M - 1)
        L = sp.kron(T, Id) + sp.kron(Id, T)
        return (h * h * L).tocsr(), np.full((M - 1) ** 2, h * h)
    if grid.kind == "steklov":
        main = np.full(M + 1, 2.0 / h)
        main[0] = main[-1] = 1.0 / h
        mass = np.full(M + 1, h)
        mass[0] = mass[-1] = h / 2
        K = sp.diags([-np.ones(M) / h, main + mass, -np.ones(M) / h], [-1, 0, 1])
        b = np.zeros(M + 1)
        b[0] = b[-1] = 1.0
        return K.tocsr(), b
    if grid.kind == "fractional":
        _, K, interior = _frac_full(grid, 2.0, pair.s)
        L = 2.0 * (np.diag(K.sum(axis=1)) - K)
        return L[np.ix_(interior, interior)], np.full(M - 1, h)
    raise UnsupportedKind(f"no p=2 assembly for {grid}")


def _sign_normalize(v: np.ndarray) -> np.ndarray:
    k = np.argmax(np.abs(v))
    return -v if v[k] < 0 else v


def dense_eig_p2(pair) -> tuple[float, Field]:
    """Smallest eigenpair of the linear (p = q = 2) problem, eigenvector Y-unit."""
    if pair.p != 2.0 or pair.q != 2.0:
        raise UnsupportedKind("dense_eig_p2 needs p = q = 2")
    grid = pair.grid
    if grid.kind == "fractional" and grid.M > 512:
        warnings.warn("dense fractional assembly above M=512 is slow", stacklevel=2)
    K, b = assemble_p2(pair)
    if grid.kind == "dirichlet" and grid.N == 1:
        # symmetric tridiagonal: bisection for the lowest eigenvalue
        Kd = K.toarray() if sp.issparse(K) else K
        d, e = np.diag(Kd) / grid.h, np.diag(Kd, 1) / grid.h
        lam, vec = sla.eigh_tridiagonal(d, e, select="i", select_range=(0, 0))
        lam, v = float(lam[0]), vec[:, 0]
    elif grid.N == 2 and grid.M > 64:
        # the 5-point pencil separates: lowest pair is (2 mu, e x e) of the 1D problem
        n, h = grid.M - 1, grid.h
        mu, e = sla.eigh_tridiagonal(np.full(n, 2.0 / h**2), np.full(n - 1, -1.0 / h**2),
                                     select="i", select_range=(0, 0))
        lam, v = 2.0 * float(mu[0]), np.kron(e[:, 0], e[:, 0])
    elif grid.kind == "steklov":
        # eliminate the interior: Schur complement on the two boundary nodes
        Kd = K.toarray()
        bnd = np.array([0, grid.M])
        inn = np.arange(1, grid.M)
        Kii = Kd[np.ix_(inn, inn)]
        Kib = Kd[np.ix_(inn, bnd)]
        S = Kd[np.ix_(bnd, bnd)] - Kib.T @ np.linalg.solve(Kii, Kib)
        vals, vecs = np.linalg.eigh(S)
        lam, vb = float(vals[0]), vecs[:, 0]
        v = np.zeros(grid.M + 1)
        v[bnd] = vb
        v[inn] = -np.linalg.solve(Kii, Kib @ vb)
    else:
        Kd = K.toarray() if sp.issparse(K) else np.asarray(K)
        # diagonal pencil: symmetric scaling to a standard problem
        s = 1.0 / np.sqrt(b)
        vals, vecs = sla.eigh(s[:, None] * Kd * s[None, :], subset_by_index=[0, 0])
        lam, v = float(vals[0]), s * vecs[:, 0]
    y = np.sqrt(np.sum(b * v * v))
    return lam, Field(grid, _sign_normalize(v / y))


# ---------------------------------------------------------------- energies


_ULP = 8 * np.finfo(float).eps


def _sub(a, b):
    """a - b, with differences no larger than the rounding of a and b set to 0.

    Nodes that should tie (mirror images of a symmetric field) otherwise differ
    by an ulp, and |z|^(p-2) z inflates that to eps^(p-1) when p < 2.
    """
    d = a - b
    d[np.abs(d) <= _ULP * (np.abs(a) + np.abs(b))] = 0.0
    return d


def _xp_and_grad(pair, u: np.ndarray) -> tuple[float, np.ndarray]:
    """||u||_X^p and its gradient, written out per kind."""
    grid, p = pair.grid, pair.p
    M, h = grid.M, grid.h
    if grid.kind == "dirichlet" and grid.N == 1:
        ext = np.concatenate([[0.0], u, [0.0]])
        D = _sub(ext[1:], ext[:-1]) / h
        fl = _phi(D, p)
        return float(h * np.sum(np.abs(D) ** p)), p * (fl[:-1] - fl[1:])
    if grid.kind == "dirichlet" and grid.N == 2:
        U = np.zeros((M + 1, M + 1))
        U[1:M, 1:M] = u.reshape(M - 1, M - 1)
        Dx = _sub(U[1:, :-1], U[:-1, :-1]) / h
        Dy = _sub(U[:-1, 1:], U[:-1, :-1]) / h
        mag = np.hypot(Dx, Dy)
        c = np.zeros_like(mag)
        c[mag > 0] = mag[mag > 0] ** (p - 2)
        Fx, Fy = h * c * Dx, h * c * Dy
        G = np.zeros_like(U)
        G[1:, :-1] += Fx
        G[:-1, :-1] -= Fx + Fy
        G[:-1, 1:] += Fy
        return float(h * h * np.sum(mag**p)), p * G[1:M, 1:M].ravel()
    if grid.kind == "steklov":
        D = _sub(u[1:], u[:-1]) / h
        fl = _phi(D, p)
        trap = np.full(M + 1, h)
        trap[0] = trap[-1] = h / 2
        g = np.zeros(M + 1)
        g[:-1] -= fl
        g[1:] += fl
        g += trap * _phi(u, p)
        return float(h * np.sum(np.abs(D) ** p) + np.sum(trap * np.abs(u) ** p)), p * g
    if grid.kind == "fractional":
        idx, K, interior = _frac_full(grid, p, pair.s)
        U = np.zeros(idx.size)
        U[interior] = u
        D = _sub(U[:, None], U[None, :])
        val = float(np.sum(K * np.abs(D) ** p))
        g = 2.0 * p * np.sum(K * _phi(D, p), axis=1)
        return val, g[interior]
    raise UnsupportedKind(f"no oracle energy for {grid}")


@lru_cache(maxsize=8)
def _grad_2d(M: int) -> sp.csr_matrix:
    """Stacked [Dx; Dy] on the M x M cells, lower-left anchored, interior unknowns only."""
    h = 1.0 / M
    n = M - 1
    idx = -np.ones((M + 1, M + 1), dtype=int)
    idx[1:M, 1:M] = np.arange(n * n).reshape(n, n)
    rows, cols, vals = [], [], []
    for c, (di, dj) in enumerate([(1, 0), (0, 1)]):
        for i in range(M):
            for j in range(M):
                r = c * M * M + i * M + j
                for node, sgn in ((idx[i + di, j + dj], 1.0), (idx[i, j], -1.0)):
                    if node >= 0:
                        rows.append(r)
                        cols.append(node)
                        vals.append(sgn / h)
    return sp.csr_matrix((vals, (rows, cols)), shape=(2 * M * M, n * n))


def _x_matrix(pair, u: np.ndarray, delta: float, exact: bool = False):
    """Lagged-coefficient matrix G^T diag(w |z|_d^(p-2)) G at u, or the Hessian of X^p.

    |z|_d = sqrt(|z|^2 + d^2) with d = delta * max|z|; with ``exact`` the result
    is the Hessian of the d-regularized X^p, including the factor p.
    """
    grid, p = pair.grid, pair.p
    M, h = grid.M, grid.h

    def scalar(mag, top=None):
        d = delta * (np.max(mag) if top is None else top)
        r = mag * mag + d * d
        if not exact:
            return r ** ((p - 2.0) / 2.0)
        # second derivative of (z^2 + d^2)^(p/2)
        return p * r ** ((p - 2.0) / 2.0) + p * (p - 2.0) * mag * mag * r ** ((p - 4.0) / 2.0)

    if grid.kind == "dirichlet" and grid.N == 1:
        D = sp.diags([np.ones(M - 1), -np.ones(M - 1)], [-1, 0], shape=(M, M - 1)) / h
        z = D @ u
        return (D.T @ sp.diags(h * scalar(np.abs(z))) @ D).tocsc()
    if grid.kind == "dirichlet" and grid.N == 2:
        G = _grad_2d(M)
        Dx, Dy = G[: M * M], G[M * M:]
        z = G @ u
        zx, zy = z[: M * M], z[M * M:]
        mag = np.hypot(zx, zy)
        d = delta * np.max(mag)
        r = mag * mag + d * d
        base = r ** ((p - 2.0) / 2.0)
        if not exact:
            return (G.T @ sp.diags(np.tile(h * h * base, 2)) @ G).tocsc()
        # p [r^((p-2)/2) I + (p-2) r^((p-4)/2) z z^T] per cell
        tail = (p - 2.0) * r ** ((p - 4.0) / 2.0)
        cxx = sp.diags(h * h * p * (base + tail * zx * zx))
        cyy = sp.diags(h * h * p * (base + tail * zy * zy))
        cxy = sp.diags(h * h * p * tail * zx * zy)
        H = Dx.T @ cxx @ Dx + Dy.T @ cyy @ Dy
        off = Dx.T @ cxy @ Dy
        return (H + off + off.T).tocsc()
    if grid.kind == "steklov":
        D = sp.diags([-np.ones(M), np.ones(M)], [0, 1], shape=(M, M + 1)) / h
        z = D @ u
        top = max(np.max(np.abs(z)), np.max(np.abs(u)))
        trap = np.full(M + 1, h)
        trap[0] = trap[-1] = h / 2
        return (D.T @ sp.diags(h * scalar(np.abs(z), top)) @ D
                + sp.diags(trap * scalar(np.abs(u), top))).tocsc()
    if grid.kind == "fractional":
        idx, K, interior = _frac_full(grid, p, pair.s)
        U = np.zeros(idx.size)
        U[interior] = u
        Kc = K * scalar(np.abs(U[:, None] - U[None, :]))  # diagonal of K is zero
        L = 2.0 * (np.diag(Kc.sum(axis=1)) - Kc)
        return L[np.ix_(interior, interior)]
    raise UnsupportedKind(f"no oracle energy for {grid}")


def _newton_direction(pair, w, mu, grad, b, delta):
    """Tangent Newton step for X^p - mu Y^p on the Y-unit sphere, or None if unusable.

    Solves the bordered system [H c; c^T 0][d; nu] = [-grad; 0] where c is the
    sphere normal; the rank-one part of the Hessian of Y^p drops out on the
    tangent space.
    """
    p, q = pair.p, pair.q
    Hx = _x_matrix(pair, w, delta, exact=True)
    aw = np.abs(w)
    dw = delta * np.max(aw)
    hy = p * (q - 1.0) * b * (aw * aw + dw * dw) ** ((q - 2.0) / 2.0) if q != 1.0 else 0.0 * b
    c = b * _phi(w, q)
    rhs = np.concatenate([-grad, [0.0]])
    try:
        if sp.issparse(Hx):
            H = Hx - sp.diags(mu * hy)
            Kb = sp.bmat([[H, sp.csc_matrix(c[:, None])], [sp.csr_matrix(c[None, :]), None]])
            with warnings.catch_warnings():
                warnings.simplefilter("error", spla.MatrixRankWarning)
                sol = spla.spsolve(Kb.tocsc(), rhs)
        else:
            H = Hx - np.diag(mu * hy)
            Kb = np.block([[H, c[:, None]], [c[None, :], np.zeros((1, 1))]])
            sol = np.linalg.solve(Kb, rhs)
    except (np.linalg.LinAlgError, RuntimeError, spla.MatrixRankWarning):
        return None
    d = sol[:-1]
    if not np.all(np.isfinite(d)) or not float(np.dot(grad, d)) < 0:
        return None
    return d


def _factor(K):
    if sp.issparse(K):
        return spla.splu(K.tocsc()).solve
    fac = sla.cho_factor(K)
    return lambda r: sla.cho_solve(fac, r)


def _y_weights(grid):
    if grid.kind == "steklov":
        b = np.zeros(grid.M + 1)
        b[0] = b[-1] = 1.0
        return b
    return np.full(grid.n_nodes, grid.h**grid.N)


def _normalize(v, b, q):
    y = np.sum(b * np.abs(v) ** q) ** (1.0 / q)
    if y == 0:
        raise ZeroField("oracle iterate has zero Y-norm")
    return v / y


def rayleigh_minimize_direct(pair, seed: Field | None = None,
                             cfg: OracleConfig | None = None) -> OracleResult:
    """Minimize ||w||_X^p over the Y-unit sphere by projected gradient descent.

    Search directions are preconditioned by the p = 2 matrix with coefficients
    |z|^(p-2) frozen at the current iterate (plain p = 2 matrix when p = 2).
    Trial points are pulled back to the sphere by rescaling and the step is
    chosen by Armijo backtracking, starting from 1/p, which for p = 2 is one
    inverse-iteration step.  For p != 2, once the iterate is close, tangent
    Newton steps on the Lagrangian take over whenever they point downhill.
    """
    cfg = cfg or OracleConfig()
    grid, p, q = pair.grid, pair.p, pair.q
    b = _y_weights(grid)
    w = np.ones(grid.n_nodes) if seed is None else seed.values.copy()
    w = _normalize(w, b, q)
    mu, gx = _xp_and_grad(pair, w)
    measure, best, idle = np.inf, np.inf, 0
    precond = None
    used_newton = 0
    it = 0
    for it in range(1, cfg.max_iter + 1):
        # gradient of X^p - mu Y^q at a unit point; divided by p it is the dual residual
        grad = gx - p * mu * b * _phi(w, q)
        measure = float(np.max(np.abs(grad))) / p
        if measure <= cfg.gtol * mu:
            break
        if measure < 0.5 * best:
            best, idle = measure, 0
        else:
            idle += 1
            if idle > cfg.stall_iters:
                break
        d = None
        if p != 2.0 and measure <= cfg.newton_below * mu:
            d = _newton_direction(pair, w, mu, grad, b, cfg.delta)
        if d is not None:
            t0 = 1.0
            used_newton += 1
        else:
            if p == 2.0:
                precond = precond or _factor(assemble_p2(pair)[0])
            else:
                # coefficients frozen at the current iterate
                precond = _factor(_x_matrix(pair, w, cfg.delta))
            d = -precond(grad)
            # for p = 2 the unit-free step 1/p is exactly one inverse-iteration step
            t0 = 1.0 / p
        slope = float(np.dot(grad, d))
        t, accepted = t0, False
        while t > 1e-12:
            trial = _normalize(w + t * d, b, q)
            val, gtrial = _xp_and_grad(pair, trial)
            if val <= mu + cfg.armijo * t * slope:
                accepted = True
                break
            if abs(t * slope) < 1e-13 * mu:
                # energy differences at rounding level: accept if the residual shrinks
                gt = gtrial - p * val * b * _phi(trial, q)
                accepted = float(np.max(np.abs(gt))) / p < measure
                break
            t *= cfg.backtrack
        if not accepted:
            break
        if t == t0 and t0 < 1.0:
            # the first trial passed: try longer steps while the energy keeps falling
            for _ in range(20):
                t2 = 2.0 * t
                trial2 = _normalize(w + t2 * d, b, q)
                val2, g2 = _xp_and_grad(pair, trial2)
                if not val2 < val:
                    break
                t, trial, val, gtrial = t2, trial2, val2, g2
        w, mu, gx = trial, val, gtrial
    converged = measure <= cfg.accept * mu
    return OracleResult(
        mu_hat=float(mu),
        w_hat=Field(grid, _sign_normalize(w)),
        method="projected-gradient+newton" if used_newton else "projected-gradient",
        optimality=measure,
        iterations=it,
        converged=converged,
    )


def brute_gagliardo(u: Field, p: float, s: float, R: float | None = None) -> float:
    """Naive double sum  sum_{i != j} h^2 |u_i - u_j|^p / |x_i - x_j|^(1+sp)  over the truncated line."""
    grid = u.grid
    if grid.N != 1 or grid.kind == "steklov":
        raise UnsupportedKind("brute_gagliardo needs a zero-extended 1D field")
    M, h = grid.M, grid.h
    E = int(round((grid.R if R is None else R) * M))
    values = {}
    for k, val in zip(range(1, M), u.values):
        values[k] = float(val)
    nodes = range(-E, M + E + 1)
    total = 0.0
    for i in nodes:
        ui = values.get(i, 0.0)
        for j in nodes:
            if i == j:
                continue
            diff = abs(ui - values.get(j, 0.0))
            if diff == 0.0:
                continue
            total += h * h * diff**p / (abs(i - j) * h) ** (1.0 + s * p)
    return total
