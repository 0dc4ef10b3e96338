"""Uniform grids, nodal fields, quadrature and the X/Y norms.

Three problem kinds share this module:

* ``dirichlet``  -- interior nodes of [0,1]^N (N = 1, 2), zero boundary values.
* ``fractional`` -- interior nodes of [0,1], zero extension to the real line
  (truncated at distance ``R`` beyond each endpoint).
* ``steklov``    -- all nodes of [0,1]; the Y-space lives on the two endpoints.

The X-norm of every kind is written as a weighted sum over "terms"::

    ||u||_X^p = sum_k  weight_k * |z_k|^p,      z_k = (G_1 u, ..., G_d u)_k

where each ``G_b`` is a sparse difference matrix.  The operators module
differentiates the same representation, which is what keeps the discrete
identities <A(u), u> = ||u||_X^p exact.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import (
    GridMismatch,
    InvalidExponent,
    KindMismatch,
    TooCoarse,
    UnsupportedDimension,
    ZeroField,
)

KINDS = ("dirichlet", "fractional", "steklov")
TIE_RTOL = 8 * np.finfo(float).eps  # differences this small relative to |G| |u| count as ties


@dataclass(frozen=True)
class GridSpec:
    N: int
    M: int
    kind: str = "dirichlet"
    R: float = 1.0  # exterior truncation radius, fractional kind only

    @property
    def h(self) -> float:
        return 1.0 / self.M

    @property
    def node_shape(self) -> tuple[int, ...]:
        if self.kind == "steklov":
            return (self.M + 1,)
        return (self.M - 1,) * self.N

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.node_shape))

    @property
    def cell_volume(self) -> float:
        return self.h**self.N

    @property
    def boundary_convention(self) -> str:
        return "free" if self.kind == "steklov" else "zero-extended"

    @property
    def node_indices(self) -> np.ndarray:
        """Integer grid indices of every node, shape (n_nodes, N), lexicographic."""
        if self.kind == "steklov":
            return np.arange(self.M + 1)[:, None]
        axes = [np.arange(1, self.M)] * self.N
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    @property
    def coords(self) -> np.ndarray:
        return self.node_indices * self.h

    @property
    def n_exterior(self) -> int:
        """Exterior nodes added on each side of [0,1] for the fractional kind."""
        return int(round(self.R * self.M))


def build_grid(N: int, M: int, kind: str = "dirichlet", R: float = 1.0) -> GridSpec:
    if kind not in KINDS:
        raise KindMismatch(f"unknown problem kind {kind!r}; expected one of {KINDS}")
    if N not in (1, 2):
        raise UnsupportedDimension(f"N={N}; only N=1 and N=2 are supported")
    if N == 2 and kind != "dirichlet":
        raise UnsupportedDimension(f"N=2 is only available for the dirichlet kind, not {kind}")
    if M < 2:
        raise TooCoarse(f"M={M}; at least 2 subdivisions are required")
    if kind == "fractional" and not R > 0:
        raise ValueError(f"truncation radius must be positive, got {R}")
    return GridSpec(N=int(N), M=int(M), kind=kind, R=float(R))


class _NodalVector:
    """Shared behaviour of Field and DualVector: a read-only array tied to a grid."""

    def __post_init__(self):
        values = np.array(self.values, dtype=float).reshape(-1)
        if values.size != self.grid.n_nodes:
            raise GridMismatch(
                f"{type(self).__name__} has {values.size} values, grid has {self.grid.n_nodes} nodes"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError(f"{type(self).__name__} values must be finite")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    def _check(self, other):
        if other.grid != self.grid:
            raise GridMismatch(f"grids differ: {self.grid} vs {other.grid}")

    def __add__(self, other):
        self._check(other)
        return type(self)(self.grid, self.values + other.values)

    def __sub__(self, other):
        self._check(other)
        return type(self)(self.grid, self.values - other.values)

    def __mul__(self, t):
        return type(self)(self.grid, float(t) * self.values)

    __rmul__ = __mul__

    def __truediv__(self, t):
        return type(self)(self.grid, self.values / float(t))

    def __neg__(self):
        return type(self)(self.grid, -self.values)

    def __len__(self):
        return self.values.size

    @classmethod
    def zeros(cls, grid: GridSpec):
        return cls(grid, np.zeros(grid.n_nodes))


@dataclass(frozen=True, eq=False)
class Field(_NodalVector):
    grid: GridSpec
    values: np.ndarray

    @property
    def boundary_convention(self) -> str:
        return self.grid.boundary_convention


@dataclass(frozen=True, eq=False)
class DualVector(_NodalVector):
    """Coefficients g with <g, v> = sum_i g_i v_i."""

    grid: GridSpec
    values: np.ndarray


def sobolev_critical(N: int, p: float) -> float:
    return N * p / (N - p) if p < N else np.inf


def fractional_critical(N: int, p: float, s: float) -> float:
    return N * p / (N - p * s) if s * p < N else np.inf


def trace_critical(N: int, p: float) -> float:
    return p * (N - 1) / (N - p) if p < N else np.inf


@dataclass(frozen=True)
class Exponents:
    p: float
    q: float
    N: int = 1
    kind: str = "dirichlet"
    s: float | None = None

    def __post_init__(self):
        problems = self.violations()
        if problems:
            raise InvalidExponent(problems)

    @property
    def critical(self) -> float:
        if self.kind == "fractional":
            return fractional_critical(self.N, self.p, self.s)
        if self.kind == "steklov":
            return trace_critical(self.N, self.p)
        return sobolev_critical(self.N, self.p)

    def violations(self) -> list[str]:
        out = []
        if not self.p > 1:
            out.append(f"p must exceed 1 (got p={self.p})")
        if not self.q >= 1:
            out.append(f"q must be at least 1 (got q={self.q})")
        if self.kind == "fractional":
            if self.s is None or not 0 < self.s < 1:
                out.append(f"fractional kind needs 0 < s < 1 (got s={self.s})")
                return out
        if out:
            return out
        crit = self.critical
        name = {"dirichlet": "p*", "fractional": "p_s*", "steklov": "p_*"}[self.kind]
        if not self.q < crit:
            out.append(f"q ≥ {name} = {crit:.17g} (got q={self.q:.17g}; need q < {name})")
        return out


def phi(t: np.ndarray, r: float) -> np.ndarray:
    """|t|^(r-2) t, continuously extended by 0 at t = 0."""
    a = np.abs(t)
    out = np.zeros_like(t, dtype=float)
    nz = a > 0
    out[nz] = a[nz] ** (r - 2.0) * t[nz]
    return out


# ---------------------------------------------------------------- Y side


@lru_cache(maxsize=64)
def _y_weights(grid: GridSpec) -> np.ndarray:
    if grid.kind == "steklov":
        w = np.zeros(grid.n_nodes)
        w[0] = w[-1] = 1.0
    else:
        w = np.full(grid.n_nodes, grid.cell_volume)
    w.flags.writeable = False
    return w


def y_weights(grid: GridSpec) -> np.ndarray:
    """Quadrature weights of the Y-space integral (rectangle rule or boundary point masses)."""
    return _y_weights(grid)


def y_norm(w: Field, q: float) -> float:
    if q < 1:
        raise InvalidExponent(f"q must be at least 1 (got q={q})")
    wts = y_weights(w.grid)
    a = np.abs(w.values)
    scale = a.max(initial=0.0)
    if scale == 0.0:
        return 0.0
    # scaled to stay in range for large q
    return float(scale * np.sum(wts * (a / scale) ** q) ** (1.0 / q))


def normalize_y(u: Field, q: float) -> tuple[Field, float]:
    t = y_norm(u, q)
    if t == 0.0:
        raise ZeroField("cannot normalize a field with zero Y-norm")
    return u / t, t


# ---------------------------------------------------------------- X side


@dataclass(frozen=True, eq=False)
class EnergyStructure:
    """Terms of ||u||_X^p: per-term vectors z_k = (G_b u)_k and quadrature weights."""

    blocks: tuple
    weights: np.ndarray
    dense: bool = False
    kernel: np.ndarray | None = field(default=None, repr=False)

    @cached_property
    def abs_blocks(self) -> tuple:
        return tuple(abs(G) for G in self.blocks)

    def terms(self, u: np.ndarray) -> list[np.ndarray]:
        """z = G u, with entries below their own rounding level set to exactly 0.

        A difference of two nodal values that agree to a few ulps (for example
        mirror-image nodes of a symmetric field) carries no information, but
        |z|^(p-2) z would still turn 1e-16 into 1e-8 when p = 1.5.
        """
        au = np.abs(u)
        out = []
        for G, Ga in zip(self.blocks, self.abs_blocks):
            z = G @ u
            z[np.abs(z) <= TIE_RTOL * (Ga @ au)] = 0.0
            out.append(z)
        return out

    def magnitude(self, zs: list[np.ndarray]) -> np.ndarray:
        if len(zs) == 1:
            return np.abs(zs[0])
        return np.sqrt(sum(z * z for z in zs))


def _diff_1d(M: int, h: float, free_ends: bool) -> sp.csr_matrix:
    """Forward differences over the M cells of [0,1].

    With ``free_ends`` the unknowns are all M+1 nodes; otherwise the M-1
    interior nodes, the end values being zero.
    """
    full = sp.diags([-np.ones(M), np.ones(M)], [0, 1], shape=(M, M + 1)) / h
    if free_ends:
        return full.tocsr()
    return full.tocsr()[:, 1:M]


def fractional_kernel(grid: GridSpec, p: float, s: float) -> tuple[np.ndarray, np.ndarray]:
    """Kernel table h^2 / |x_i - x_j|^(1 + s p) of the 1D zero-extended Gagliardo sum.

    Returns ``(K, ext)``: ``K`` is the symmetric interior-interior table with a
    zero diagonal, ``ext[i]`` the summed weights of node i against every zero
    node of the truncated line (the two boundary nodes plus the exterior ones).
    """
    return _fractional_kernel(grid, float(p), float(s))


@lru_cache(maxsize=32)
def _fractional_kernel(grid, p, s):
    if grid.kind != "fractional" or grid.N != 1:
        raise KindMismatch("fractional kernel requires a 1D fractional grid")
    M, h, E = grid.M, grid.h, grid.n_exterior
    alpha = 1.0 + s * p
    idx = np.arange(1, M)
    diff = np.abs(idx[:, None] - idx[None, :]).astype(float)
    K = np.zeros_like(diff)
    off = diff > 0
    K[off] = h**2 / (diff[off] * h) ** alpha
    zero_nodes = np.concatenate([np.arange(-E, 1), np.arange(M, M + E + 1)])
    dz = np.abs(idx[:, None] - zero_nodes[None, :]) * h
    ext = np.sum(h**2 / dz**alpha, axis=1)
    K.flags.writeable = False
    ext.flags.writeable = False
    return K, ext


@lru_cache(maxsize=64)
def _structure(grid: GridSpec, p: float, s: float | None) -> EnergyStructure:
    M, h = grid.M, grid.h
    if grid.kind == "dirichlet" and grid.N == 1:
        D = _diff_1d(M, h, free_ends=False)
        return EnergyStructure((D,), np.full(M, h))
    if grid.kind == "dirichlet" and grid.N == 2:
        # lower-left anchored cells (a, b), a, b = 0..M-1, on the full node lattice
        D = _diff_1d(M, h, free_ends=True)  # M x (M+1)
        S = sp.eye(M, M + 1, format="csr")  # restriction to the anchor node
        keep = np.zeros((M + 1) ** 2, dtype=bool)
        keep.reshape(M + 1, M + 1)[1:M, 1:M] = True
        Dx = sp.kron(D, S, format="csr")[:, keep]
        Dy = sp.kron(S, D, format="csr")[:, keep]
        return EnergyStructure((Dx, Dy), np.full(M * M, h * h))
    if grid.kind == "steklov":
        D = _diff_1d(M, h, free_ends=True)
        trap = np.full(M + 1, h)
        trap[0] = trap[-1] = h / 2
        G = sp.vstack([D, sp.eye(M + 1)], format="csr")
        return EnergyStructure((G,), np.concatenate([np.full(M, h), trap]))
    if grid.kind == "fractional":
        if s is None:
            raise InvalidExponent("fractional kind needs s")
        K, ext = fractional_kernel(grid, p, s)
        n = M - 1
        iu, ju = np.triu_indices(n, k=1)
        rows = np.arange(iu.size)
        pairs = sp.csr_matrix(
            (np.concatenate([np.ones(iu.size), -np.ones(iu.size)]),
             (np.concatenate([rows, rows]), np.concatenate([iu, ju]))),
            shape=(iu.size, n),
        )
        G = sp.vstack([pairs, sp.eye(n)], format="csr")
        # ordered pairs (i,j) and (j,i) both appear in the double sum
        weights = np.concatenate([2.0 * K[iu, ju], 2.0 * ext])
        return EnergyStructure((G,), weights, dense=True, kernel=K)
    raise KindMismatch(f"no X-structure for {grid}")


def energy_structure(grid: GridSpec, p: float, s: float | None = None) -> EnergyStructure:
    # the kernel only depends on p for the fractional kind
    key_p = float(p) if grid.kind == "fractional" else 2.0
    return _structure(grid, key_p, None if s is None else float(s))


def x_norm(u: Field, p: float, kind: str | None = None, s: float | None = None) -> float:
    if kind is not None and kind != u.grid.kind:
        raise KindMismatch(f"field lives on a {u.grid.kind} grid, not {kind}")
    st = energy_structure(u.grid, p, s)
    mag = st.magnitude(st.terms(u.values))
    scale = mag.max(initial=0.0)
    if scale == 0.0:
        return 0.0
    return float(scale * np.sum(st.weights * (mag / scale) ** p) ** (1.0 / p))


def pairing(g: DualVector, v: Field) -> float:
    if g.grid != v.grid:
        raise GridMismatch(f"grids differ: {g.grid} vs {v.grid}")
    return float(np.dot(g.values, v.values))


# ---------------------------------------------------------------- CSV


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def field_to_csv(w: Field) -> str:
    grid = w.grid
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    names = ["i", "j"][: grid.N]
    coords = ["x", "y"][: grid.N]
    writer.writerow(names + coords + ["value"])
    for idx, x, val in zip(grid.node_indices, grid.coords, w.values):
        writer.writerow([int(k) for k in idx] + [_fmt(c) for c in x] + [_fmt(val)])
    return buf.getvalue()


def write_field_csv(w: Field, path) -> Path:
    path = Path(path)
    path.write_text(field_to_csv(w))
    return path


def read_field_csv(path, grid: GridSpec) -> Field:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if len(rows) != grid.n_nodes:
        raise GridMismatch(f"{path}: {len(rows)} rows, grid has {grid.n_nodes} nodes")
    names = ["i", "j"][: grid.N]
    got = np.array([[int(r[k]) for k in names] for r in rows])
    if not np.array_equal(got, grid.node_indices):
        raise GridMismatch(f"{path}: node indices do not match the grid layout")
    return Field(grid, np.array([float(r["value"]) for r in rows]))
