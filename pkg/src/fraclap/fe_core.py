"""P1 finite elements for the integral fractional Laplacian on an interval.

This module discretizes the homogeneous Dirichlet problem for the integral
fractional Laplacian ``(-Delta)^s`` on an interval with continuous piecewise
linear elements on a uniform mesh. Nodal vectors are plain 1-D ``float``
arrays over the interior nodes; matrices are wrapped in
:class:`SymDenseMatrix`, which checks symmetry on construction.

The stiffness matrix is assembled from exact band values: substituting
``y = x + t`` reduces the double integral for a pair of hat functions to a
one-dimensional integral of the hat autocorrelation against the kernel
``|t|^(-1-2s)``. The three singular bands (``|i-j| <= 2``) are integrated in
closed form; the remaining bands have an analytic integrand and are computed
with fixed Gauss-Legendre panels that are exact to machine precision and,
unlike the naive fourth-difference closed form, do not lose accuracy to
cancellation on fine meshes.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy import linalg

from .errors import AssemblyError, DimensionError, SolveError

__all__ = [
    "FractionalOrder",
    "UniformMesh1D",
    "SymDenseMatrix",
    "NodalVector",
    "normalization_constant",
    "assemble_mass",
    "assemble_stiffness",
    "solve_elliptic",
    "exact_getoor_solution",
    "error_l2",
    "error_energy",
    "prolongation",
    "convergence_study",
    "ConvergenceRow",
    "write_matrix_csv",
    "read_matrix_csv",
]

#: Nodal vectors are 1-D float arrays with one entry per interior mesh node.
NodalVector = np.ndarray

_MODULE = "fraclap.fe_core"


@dataclass(frozen=True)
class FractionalOrder:
    """Order ``s`` of the fractional Laplacian, constrained to ``(0, 1)``.

    Parameters
    ----------
    s : float
        Differentiation order. The endpoints are excluded; the local limits
        are not covered by this discretization.
    """

    s: float

    def __post_init__(self):
        s = float(self.s)
        if not (0.0 < s < 1.0) or not math.isfinite(s):
            raise ValueError(f"fractional order must lie in (0, 1), got {self.s!r}")
        object.__setattr__(self, "s", s)


def _order_value(s) -> float:
    """Return the float order from either a float or a FractionalOrder."""
    if isinstance(s, FractionalOrder):
        return s.s
    return FractionalOrder(float(s)).s


@dataclass(frozen=True)
class UniformMesh1D:
    """Uniform mesh on ``(a, b)`` with ``n_interior`` interior nodes.

    Nodes are ``x_i = a + i*h`` for ``i = 0..n_interior+1`` with
    ``h = (b - a) / (n_interior + 1)``; degrees of freedom are attached to
    the interior nodes only (homogeneous Dirichlet data).
    """

    a: float
    b: float
    n_interior: int

    def __post_init__(self):
        if not (self.b > self.a):
            raise ValueError(f"interval endpoints must satisfy a < b, got ({self.a}, {self.b})")
        if int(self.n_interior) != self.n_interior or self.n_interior < 1:
            raise ValueError(f"n_interior must be a positive integer, got {self.n_interior!r}")
        object.__setattr__(self, "n_interior", int(self.n_interior))

    @property
    def h(self) -> float:
        """Mesh width ``(b - a) / (n_interior + 1)``."""
        return (self.b - self.a) / (self.n_interior + 1)

    @property
    def nodes(self) -> np.ndarray:
        """All nodes including the two boundary nodes, length ``n_interior + 2``."""
        return self.a + self.h * np.arange(self.n_interior + 2)

    @property
    def interior_nodes(self) -> np.ndarray:
        """Interior nodes carrying degrees of freedom, length ``n_interior``."""
        return self.nodes[1:-1]

    @classmethod
    def from_h(cls, a: float, b: float, h: float) -> "UniformMesh1D":
        """Build the mesh on ``(a, b)`` whose width is (up to rounding) ``h``.

        Raises
        ------
        ValueError
            If ``h`` does not divide ``b - a`` into an integer number of
            elements (within 1e-9 relative).
        """
        n_elem = (b - a) / h
        n_round = round(n_elem)
        if n_round < 2 or abs(n_elem - n_round) > 1e-9 * n_round:
            raise ValueError(f"h={h!r} does not uniformly divide ({a}, {b})")
        return cls(a, b, n_round - 1)


class SymDenseMatrix:
    """Dense symmetric matrix with its entries stored row-major.

    Construction validates squareness and symmetry (1e-12 relative). The
    raw array is available as :attr:`entries`; ``@`` delegates to it.
    """

    __slots__ = ("entries",)

    def __init__(self, entries: np.ndarray):
        entries = np.asarray(entries, dtype=float)
        if entries.ndim != 2 or entries.shape[0] != entries.shape[1]:
            raise DimensionError(
                f"symmetric matrix needs a square array, got shape {entries.shape}",
                module=_MODULE,
            )
        scale = float(np.max(np.abs(entries))) or 1.0
        skew = float(np.max(np.abs(entries - entries.T)))
        if skew > 1e-12 * scale:
            raise AssemblyError(
                f"matrix is not symmetric: max|A - A^T| = {skew:.3e} "
                f"(relative {skew / scale:.3e})",
                module=_MODULE,
            )
        self.entries = entries

    @property
    def order(self) -> int:
        """Number of rows (= columns)."""
        return self.entries.shape[0]

    def __matmul__(self, other):
        if isinstance(other, SymDenseMatrix):
            other = other.entries
        return self.entries @ other

    def __rmatmul__(self, other):
        return other @ self.entries

    def dot(self, x: np.ndarray) -> np.ndarray:
        """Matrix-vector product."""
        return self.entries @ x

    def __repr__(self):
        return f"SymDenseMatrix(order={self.order})"


def normalization_constant(d: int, s) -> float:
    """Normalization constant of the integral fractional Laplacian.

    Parameters
    ----------
    d : int
        Space dimension (positive).
    s : float or FractionalOrder
        Fractional order in ``(0, 1)``.

    Returns
    -------
    float
        ``s * 2^(2s) * Gamma(s + d/2) / (pi^(d/2) * Gamma(1 - s))``. In one
        dimension with ``s = 1/2`` this equals ``1/pi``.
    """
    if int(d) != d or d < 1:
        raise ValueError(f"dimension must be a positive integer, got {d!r}")
    s = _order_value(s)
    return (
        s
        * 2.0 ** (2.0 * s)
        * math.gamma(s + d / 2.0)
        / (math.pi ** (d / 2.0) * math.gamma(1.0 - s))
    )


# ---------------------------------------------------------------------------
# Stiffness bands
#
# With hats phi_i(x) = phi((x - x_i)/h) and the substitutions y = x + t,
# t = h*tau, the entry for nodes at distance k reduces to
#
#   a_{i,i+k} = C(1,s) * h^(1-2s) * Phi(k, s),
#   Phi(k,s)  = Int_0^inf S_k(tau) tau^(-1-2s) dtau,
#   S_k(tau)  = 2*rho(k) - rho(k + tau) - rho(k - tau),
#
# where rho is the autocorrelation of the unit hat: an even piecewise cubic
# with rho(theta) = 2/3 - theta^2 + |theta|^3/2 on [0,1], (2-|theta|)^3/6 on
# [1,2] and zero beyond. S_k vanishes to second order at tau = 0, so each
# band is an absolutely convergent one-dimensional integral.
# ---------------------------------------------------------------------------


def _hat_autocorrelation(theta):
    """Autocorrelation of the unit hat function, vectorized."""
    t = np.abs(np.asarray(theta, dtype=float))
    out = np.zeros_like(t)
    near = t <= 1.0
    mid = (t > 1.0) & (t < 2.0)
    out[near] = 2.0 / 3.0 - t[near] ** 2 + t[near] ** 3 / 2.0
    out[mid] = (2.0 - t[mid]) ** 3 / 6.0
    return out


def _power_integral(m: int, lo: float, hi: float, s: float) -> float:
    """Exact ``Int_lo^hi sigma^(m - 1 - 2s) d sigma`` for ``0 <= lo < hi``.

    The exponent ``m - 2s`` may vanish (s = 1/2, m = 1), where the
    antiderivative is logarithmic; near-zero exponents are evaluated with
    ``expm1`` so there is no cancellation in the power difference.
    """
    e = m - 2.0 * s
    if lo == 0.0:
        if e <= 0.0:
            raise ValueError("divergent power integral at the origin")
        return hi**e / e
    if e == 0.0:
        return math.log(hi / lo)
    return lo**e * math.expm1(e * math.log(hi / lo)) / e


# Piecewise polynomial coefficients of S_k(tau) in the monomial basis
# {1, tau, tau^2, tau^3}, per interval, for the three singular bands.
_S_PIECES = {
    0: (
        ((0.0, 1.0), (0.0, 0.0, 2.0, -1.0)),
        ((1.0, 2.0), (-4.0 / 3.0, 4.0, -2.0, 1.0 / 3.0)),
    ),
    1: (
        ((0.0, 1.0), (0.0, 0.0, -1.0, 2.0 / 3.0)),
        ((1.0, 2.0), (7.0 / 6.0, -7.0 / 2.0, 5.0 / 2.0, -1.0 / 2.0)),
        ((2.0, 3.0), (-25.0 / 6.0, 9.0 / 2.0, -3.0 / 2.0, 1.0 / 6.0)),
    ),
    2: (
        ((0.0, 1.0), (0.0, 0.0, 0.0, -1.0 / 6.0)),
        ((1.0, 2.0), (-2.0 / 3.0, 2.0, -2.0, 1.0 / 2.0)),
        ((2.0, 3.0), (22.0 / 3.0, -10.0, 4.0, -1.0 / 2.0)),
        ((3.0, 4.0), (-32.0 / 3.0, 8.0, -2.0, 1.0 / 6.0)),
    ),
}

# Constant value of S_k beyond its last breakpoint: 2*rho(k).
_S_TAILS = {0: 4.0 / 3.0, 1: 1.0 / 3.0, 2: 0.0}


def _phi_singular(k: int, s: float) -> float:
    """Band integral Phi(k, s) for the singular bands k in {0, 1, 2}."""
    total = 0.0
    for (lo, hi), coeffs in _S_PIECES[k]:
        for m, c in enumerate(coeffs):
            if c != 0.0:
                total += c * _power_integral(m, lo, hi, s)
    tail = _S_TAILS[k]
    if tail != 0.0:
        t0 = _S_PIECES[k][-1][0][1]
        total += tail * t0 ** (-2.0 * s) / (2.0 * s)
    return total


@lru_cache(maxsize=8)
def _gauss_panels(points_per_panel: int = 32):
    """Gauss-Legendre nodes over [-2, 2] split at the knots of rho.

    Returns the flattened nodes and the weights premultiplied by the
    autocorrelation values, so a far band integrates as a single dot
    product against the kernel.
    """
    x, w = leggauss(points_per_panel)
    nodes = []
    weights = []
    for left in (-2.0, -1.0, 0.0, 1.0):
        nodes.append(left + 0.5 + 0.5 * x)
        weights.append(0.5 * w)
    theta = np.concatenate(nodes)
    weight = np.concatenate(weights) * _hat_autocorrelation(theta)
    theta.setflags(write=False)
    weight.setflags(write=False)
    return theta, weight


@lru_cache(maxsize=128)
def _stiffness_band_values(n_bands: int, s: float) -> np.ndarray:
    """Band integrals Phi(k, s) for k = 0..n_bands-1 (dimensionless)."""
    phi = np.empty(n_bands)
    for k in range(min(3, n_bands)):
        phi[k] = _phi_singular(k, s)
    if n_bands > 3:
        theta, weight = _gauss_panels()
        k = np.arange(3, n_bands, dtype=float)[:, None]
        # Phi(k) = -Int rho(theta) (k - theta)^(-1-2s) dtheta for rho(k)=0.
        phi[3:] = -((k - theta[None, :]) ** (-1.0 - 2.0 * s)) @ weight
    phi.setflags(write=False)
    return phi


def assemble_mass(mesh: UniformMesh1D) -> SymDenseMatrix:
    """Mass matrix of the P1 space on the interior nodes.

    Tridiagonal with diagonal ``2h/3`` and off-diagonal ``h/6``; rows away
    from the boundary sum exactly to ``h``.
    """
    n = mesh.n_interior
    h = mesh.h
    entries = np.zeros((n, n))
    idx = np.arange(n)
    entries[idx, idx] = 2.0 * h / 3.0
    entries[idx[:-1], idx[:-1] + 1] = h / 6.0
    entries[idx[:-1] + 1, idx[:-1]] = h / 6.0
    return SymDenseMatrix(entries)


def assemble_stiffness(mesh: UniformMesh1D, s) -> SymDenseMatrix:
    """Stiffness matrix of ``(-Delta)^s`` on the interior nodes.

    The matrix is dense, symmetric positive definite and Toeplitz: entries
    depend only on ``|i - j|``. Entries with ``|i - j| >= 2`` are strictly
    negative and the diagonal is strictly positive; violations raise
    :class:`AssemblyError` with the offending band index.
    """
    s = _order_value(s)
    n = mesh.n_interior
    h = mesh.h
    scale = normalization_constant(1, s) * h ** (1.0 - 2.0 * s)
    bands = scale * _stiffness_band_values(n, s)
    if not np.all(np.isfinite(bands)):
        band = int(np.flatnonzero(~np.isfinite(bands))[0])
        raise AssemblyError(
            f"stiffness band {band} is not finite for s={s}",
            band=band, module=_MODULE,
        )
    if bands[0] <= 0.0:
        raise AssemblyError(
            f"stiffness diagonal must be positive, got {bands[0]:.3e}",
            band=0, module=_MODULE,
        )
    if n > 2:
        far = bands[2:]
        if np.any(far >= 0.0):
            band = int(np.flatnonzero(far >= 0.0)[0]) + 2
            raise AssemblyError(
                f"stiffness band {band} must be negative, got {bands[band]:.3e}",
                band=band, module=_MODULE,
            )
    return SymDenseMatrix(linalg.toeplitz(bands))


def solve_elliptic(A: SymDenseMatrix, load: NodalVector) -> NodalVector:
    """Solve ``A u = load`` by dense Cholesky factorization.

    Parameters
    ----------
    A : SymDenseMatrix
        Stiffness matrix.
    load : ndarray
        Assembled right-hand side, ``load_i = (f, phi_i)``. For a constant
        source ``f = c`` on a uniform mesh this is exactly ``c * h`` at every
        interior node (each hat integrates to ``h``); for general data pass
        ``M @ f_nodal`` to use the interpolated source.

    Returns
    -------
    ndarray
        Solution coefficients, with relative residual at most 1e-10.

    Raises
    ------
    SolveError
        If the factorization fails or the residual contract is violated.
    """
    rhs = np.asarray(load, dtype=float)
    if rhs.shape != (A.order,):
        raise DimensionError(
            f"incompatible solve operands: A order {A.order}, load shape {rhs.shape}",
            module=_MODULE,
        )
    try:
        factor = linalg.cho_factor(A.entries)
    except linalg.LinAlgError as exc:
        raise SolveError(f"stiffness Cholesky factorization failed: {exc}",
                         module=_MODULE) from exc
    u = linalg.cho_solve(factor, rhs)
    denom = float(np.linalg.norm(rhs)) or 1.0
    residual = float(np.linalg.norm(A.entries @ u - rhs)) / denom
    if residual > 1e-10:
        raise SolveError(
            f"elliptic solve residual {residual:.3e} exceeds 1e-10",
            module=_MODULE,
        )
    return u


def exact_getoor_solution(s, x):
    """Closed-form solution of ``(-Delta)^s u = 1`` on ``(-1, 1)``.

    ``u(x) = gamma_s (1 - x^2)_+^s`` with
    ``gamma_s = 2^(-2s) sqrt(pi) / (Gamma((1+2s)/2) Gamma(1+s))``; at
    ``s = 1/2`` the prefactor equals 1.
    """
    s = _order_value(s)
    gamma_s = (
        2.0 ** (-2.0 * s)
        * math.sqrt(math.pi)
        / (math.gamma((1.0 + 2.0 * s) / 2.0) * math.gamma(1.0 + s))
    )
    x = np.asarray(x, dtype=float)
    core = np.clip(1.0 - x * x, 0.0, None)
    out = gamma_s * core**s
    return out if out.ndim else float(out)


def _gauss_on_elements(mesh: UniformMesh1D, npoints: int = 7):
    """Gauss points and weights on every element, shape (n_elem, npoints)."""
    xg, wg = leggauss(npoints)
    nodes = mesh.nodes
    h = mesh.h
    mid = 0.5 * (nodes[:-1] + nodes[1:])
    pts = mid[:, None] + 0.5 * h * xg[None, :]
    wts = np.full_like(pts, 0.5 * h) * wg[None, :]
    return pts, wts


def error_l2(u_h: NodalVector, u_exact, mesh: UniformMesh1D, npoints: int = 7) -> float:
    """L2 distance between the P1 interpolant of ``u_h`` and a callable.

    Integrated with ``npoints``-point Gauss quadrature per element
    (``npoints >= 5`` enforced).
    """
    if npoints < 5:
        raise ValueError("use at least 5 Gauss points per element")
    u_h = np.asarray(u_h, dtype=float)
    if u_h.shape != (mesh.n_interior,):
        raise DimensionError(
            f"nodal vector of length {u_h.shape} does not match mesh with "
            f"{mesh.n_interior} interior nodes",
            module=_MODULE,
        )
    full = np.concatenate(([0.0], u_h, [0.0]))
    pts, wts = _gauss_on_elements(mesh, npoints)
    frac = (pts - mesh.nodes[:-1, None]) / mesh.h
    lin = full[:-1, None] * (1.0 - frac) + full[1:, None] * frac
    diff = lin - u_exact(pts)
    return float(math.sqrt(np.sum(wts * diff * diff)))


def prolongation(coarse: UniformMesh1D, fine: UniformMesh1D):
    """Linear interpolation operator from a coarse mesh into a nested fine one.

    Returns a callable mapping coarse nodal vectors to fine nodal vectors.

    Raises
    ------
    DimensionError
        If the meshes do not share endpoints or the coarse width is not an
        integer multiple of the fine width.
    """
    if abs(coarse.a - fine.a) > 1e-12 or abs(coarse.b - fine.b) > 1e-12:
        raise DimensionError(
            f"meshes cover different intervals: ({coarse.a}, {coarse.b}) vs "
            f"({fine.a}, {fine.b})",
            module=_MODULE,
        )
    ratio = coarse.h / fine.h
    if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
        raise DimensionError(
            f"fine mesh width must divide the coarse width; ratio {ratio!r}",
            module=_MODULE,
        )
    coarse_nodes = coarse.nodes
    fine_interior = fine.interior_nodes

    def prolong(u_coarse: NodalVector) -> NodalVector:
        u_coarse = np.asarray(u_coarse, dtype=float)
        if u_coarse.shape != (coarse.n_interior,):
            raise DimensionError(
                f"expected {coarse.n_interior} coarse coefficients, got "
                f"{u_coarse.shape}",
                module=_MODULE,
            )
        full = np.concatenate(([0.0], u_coarse, [0.0]))
        return np.interp(fine_interior, coarse_nodes, full)

    return prolong


def error_energy(u_h: NodalVector, A: SymDenseMatrix, u_ref: NodalVector,
                 A_ref: SymDenseMatrix, prolong) -> float:
    """Energy-norm distance to a reference solution on a finer mesh.

    Computes ``sqrt(e^T A_ref e)`` with ``e = prolong(u_h) - u_ref``. The
    reference mesh must be at least four times finer (by element count).
    """
    u_h = np.asarray(u_h, dtype=float)
    u_ref = np.asarray(u_ref, dtype=float)
    if u_h.shape != (A.order,) or u_ref.shape != (A_ref.order,):
        raise DimensionError(
            "nodal vectors do not match their matrices",
            module=_MODULE,
        )
    if (len(u_ref) + 1) < 4 * (len(u_h) + 1):
        raise DimensionError(
            f"reference mesh must be at least 4x finer: {len(u_h)} coarse vs "
            f"{len(u_ref)} reference unknowns",
            module=_MODULE,
        )
    e = np.asarray(prolong(u_h), dtype=float) - u_ref
    if e.shape != u_ref.shape:
        raise DimensionError(
            "prolongation output does not match the reference mesh",
            module=_MODULE,
        )
    return float(math.sqrt(e @ (A_ref.entries @ e)))


@dataclass(frozen=True)
class ConvergenceRow:
    """One mesh level of a convergence study."""

    h: float
    err_l2: float
    err_energy: float
    rate_l2: float  # log2(err(2h) / err(h)); nan on the first row
    rate_energy: float


def convergence_study(s, h_sequence, reference_refinement: int = 4) -> list[ConvergenceRow]:
    """Uniform-load convergence study on ``(-1, 1)``.

    For every width in ``h_sequence`` (finest last), solves
    ``(-Delta)^s u = 1``, measures the L2 error against the closed-form
    solution and the energy error against a reference solve on a mesh
    ``reference_refinement`` times finer than the finest level, and reports
    rates between consecutive levels as ``log2(err(h)/err(h/2))``.
    """
    s = _order_value(s)
    hs = sorted(float(h) for h in h_sequence)[::-1]
    if len(hs) < 2:
        raise ValueError("a convergence study needs at least two mesh widths")
    if reference_refinement < 4:
        raise ValueError("the reference mesh must be at least 4x finer")

    fine = UniformMesh1D.from_h(-1.0, 1.0, hs[-1] / reference_refinement)
    A_ref = assemble_stiffness(fine, s)
    u_ref = solve_elliptic(A_ref, fine.h * np.ones(fine.n_interior))

    exact = lambda x: exact_getoor_solution(s, x)
    rows = []
    prev = None
    for h in hs:
        mesh = UniformMesh1D.from_h(-1.0, 1.0, h)
        A = assemble_stiffness(mesh, s)
        u_h = solve_elliptic(A, mesh.h * np.ones(mesh.n_interior))
        el2 = error_l2(u_h, exact, mesh)
        een = error_energy(u_h, A, u_ref, A_ref, prolongation(mesh, fine))
        if prev is None:
            rl2 = ren = float("nan")
        else:
            rl2 = math.log2(prev.err_l2 / el2)
            ren = math.log2(prev.err_energy / een)
        prev = ConvergenceRow(h=h, err_l2=el2, err_energy=een,
                              rate_l2=rl2, rate_energy=ren)
        rows.append(prev)
    return rows


def write_matrix_csv(matrix: SymDenseMatrix, path, s: float, h: float) -> None:
    """Serialize a matrix to CSV: header ``order,s,h``, then row-major entries."""
    with open(path, "w", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["order", "s", "h"])
        writer.writerow([matrix.order, f"{s:.17g}", f"{h:.17g}"])
        for row in matrix.entries:
            writer.writerow([f"{v:.17g}" for v in row])


def read_matrix_csv(path):
    """Read a matrix written by :func:`write_matrix_csv`.

    Returns
    -------
    (SymDenseMatrix, float, float)
        The matrix and the ``s``, ``h`` metadata.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["order", "s", "h"]:
            raise ValueError(f"unexpected matrix CSV header: {header!r}")
        order_s, s_s, h_s = next(reader)
        order = int(order_s)
        entries = np.array([[float(v) for v in next(reader)] for _ in range(order)])
    return SymDenseMatrix(entries), float(s_s), float(h_s)
