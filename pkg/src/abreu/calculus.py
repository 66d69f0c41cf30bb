"""
Finite-difference calculus on masked grids.

Second derivatives are built from directional second differences along the
four lattice lines (two axes, two diagonals).  Arms that would leave the
domain are shortened to the boundary crossing, with the Dirichlet value taken
at the foot; the unequal-arm three-point formulas are exact on quadratic
polynomials, which keeps Monge-Ampere residuals of quadratic data at rounding
level.

With d_1, d_2 the axis second differences and xi_p, xi_m the diagonal ones
(along (1,1)/sqrt2 and (1,-1)/sqrt2),

    D11 = d_1,  D22 = d_2,  D12 = (xi_p - xi_m)/2,

and a second-order operator a D11 + 2 b D12 + c D22 admits the sign-matched
split (a - |b|) d_1 + (c - |b|) d_2 + |b| * 2 xi_s with xi_s the diagonal
matching sign(b), which is monotone whenever |b| <= min(a, c).

All operators are exposed as sparse matrices acting separately on inside
values and on foot (boundary) values, so adjoints of the discrete quadrature
functionals are exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from weakref import WeakKeyDictionary

import numpy as np
import scipy.sparse as sp
from numpy.typing import NDArray

from .geometry import Grid, ScalarField

__all__ = [
    "MatrixField", "ConvexityCertificate", "DiffOps", "get_ops",
    "hessian", "gradient", "det_cofactor", "certify_convexity",
    "momentum_divergence", "second_operator_matrix", "divergence_form_matrix",
]


@dataclass
class MatrixField:
    """Symmetric 2x2 matrix per inside node (upper triangle stored)."""

    grid: Grid
    h11: NDArray
    h12: NDArray
    h22: NDArray

    def det(self) -> NDArray:
        return self.h11 * self.h22 - self.h12 * self.h12

    def cofactor(self) -> "MatrixField":
        return MatrixField(self.grid, self.h22.copy(), -self.h12, self.h11.copy())

    def trace(self) -> NDArray:
        return self.h11 + self.h22

    def eig_min(self) -> NDArray:
        half = 0.5 * (self.h11 + self.h22)
        rad = np.sqrt((0.5 * (self.h11 - self.h22)) ** 2 + self.h12**2)
        return half - rad

    def eig_max(self) -> NDArray:
        half = 0.5 * (self.h11 + self.h22)
        rad = np.sqrt((0.5 * (self.h11 - self.h22)) ** 2 + self.h12**2)
        return half + rad

    def apply(self, vx: NDArray, vy: NDArray) -> tuple[NDArray, NDArray]:
        return self.h11 * vx + self.h12 * vy, self.h12 * vx + self.h22 * vy

    @classmethod
    def from_function(cls, grid: Grid, f11, f12, f22) -> "MatrixField":
        x, y = grid.xy[:, 0], grid.xy[:, 1]
        z = np.zeros(grid.n_inside)
        return cls(grid, np.asarray(f11(x, y), float) + z,
                   np.asarray(f12(x, y), float) + z,
                   np.asarray(f22(x, y), float) + z)


@dataclass(frozen=True)
class ConvexityCertificate:
    is_convex: bool
    worst_node: int
    worst_eigenvalue: float
    tolerance: float


@dataclass(frozen=True)
class _Op:
    """One difference operator split into inside and foot column blocks."""

    A_in: sp.csr_matrix      # (n_inside, n_inside)
    A_bc: sp.csr_matrix      # (n_inside, n_feet)

    def __call__(self, f: ScalarField) -> NDArray:
        return self.A_in @ f.inside + self.A_bc @ f.feet

    def apply_raw(self, inside: NDArray, feet: NDArray) -> NDArray:
        return self.A_in @ inside + self.A_bc @ feet


def _second_difference(grid: Grid, d_plus: int, d_minus: int, spacing: float) -> _Op:
    """Unequal-arm second difference along the (d_plus, d_minus) line."""
    n = grid.n_inside
    tp = grid.theta[d_plus]
    tm = grid.theta[d_minus]
    s2 = spacing * spacing
    wp = 2.0 / (tp * (tp + tm) * s2)
    wm = 2.0 / (tm * (tp + tm) * s2)
    w0 = -2.0 / (tp * tm * s2)
    rows_in, cols_in, vals_in = [np.arange(n)], [np.arange(n)], [w0]
    rows_bc, cols_bc, vals_bc = [], [], []
    for d, w in ((d_plus, wp), (d_minus, wm)):
        interior = ~grid.cut[d]
        k = np.nonzero(interior)[0]
        rows_in.append(k)
        cols_in.append(grid.neighbor[d, k])
        vals_in.append(w[k])
        kc = np.nonzero(grid.cut[d])[0]
        rows_bc.append(kc)
        cols_bc.append(grid.foot_slot[d, kc])
        vals_bc.append(w[kc])
    A_in = sp.csr_matrix((np.concatenate(vals_in),
                          (np.concatenate(rows_in), np.concatenate(cols_in))),
                         shape=(n, n))
    if rows_bc and grid.n_feet:
        A_bc = sp.csr_matrix((np.concatenate(vals_bc),
                              (np.concatenate(rows_bc), np.concatenate(cols_bc))),
                             shape=(n, grid.n_feet))
    else:
        A_bc = sp.csr_matrix((n, grid.n_feet))
    return _Op(A_in, A_bc)


def _first_difference(grid: Grid, d_plus: int, d_minus: int, spacing: float,
                      ex: float, ey: float) -> tuple[_Op, float, float]:
    """Unequal-arm first derivative along a line with unit direction (ex, ey)."""
    n = grid.n_inside
    a = grid.theta[d_minus] * spacing   # arm toward d_minus
    b = grid.theta[d_plus] * spacing    # arm toward d_plus
    wp = a / (b * (a + b))
    wm = -b / (a * (a + b))
    w0 = (b - a) / (a * b)
    rows_in, cols_in, vals_in = [np.arange(n)], [np.arange(n)], [w0]
    rows_bc, cols_bc, vals_bc = [], [], []
    for d, w in ((d_plus, wp), (d_minus, wm)):
        interior = ~grid.cut[d]
        k = np.nonzero(interior)[0]
        rows_in.append(k)
        cols_in.append(grid.neighbor[d, k])
        vals_in.append(w[k])
        kc = np.nonzero(grid.cut[d])[0]
        rows_bc.append(kc)
        cols_bc.append(grid.foot_slot[d, kc])
        vals_bc.append(w[kc])
    A_in = sp.csr_matrix((np.concatenate(vals_in),
                          (np.concatenate(rows_in), np.concatenate(cols_in))),
                         shape=(n, n))
    if grid.n_feet:
        A_bc = sp.csr_matrix((np.concatenate(vals_bc),
                              (np.concatenate(rows_bc), np.concatenate(cols_bc))),
                             shape=(n, grid.n_feet))
    else:
        A_bc = sp.csr_matrix((n, grid.n_feet))
    return _Op(A_in, A_bc), ex, ey


class DiffOps:
    """Per-grid difference operator table (built once, cached)."""

    def __init__(self, grid: Grid):
        h = grid.spacing
        self.grid = grid
        self.d1 = _second_difference(grid, 0, 1, h)           # along e1
        self.d2 = _second_difference(grid, 2, 3, h)           # along e2
        self.xp = _second_difference(grid, 4, 7, h * math.sqrt(2.0))  # (1,1)/sqrt2
        self.xm = _second_difference(grid, 6, 5, h * math.sqrt(2.0))  # (1,-1)/sqrt2
        self.gx, _, _ = _first_difference(grid, 0, 1, h, 1.0, 0.0)
        self.gy, _, _ = _first_difference(grid, 2, 3, h, 0.0, 1.0)
        # D12 = (xi_p - xi_m) / 2
        self.d12 = _Op(((self.xp.A_in - self.xm.A_in) * 0.5).tocsr(),
                       ((self.xp.A_bc - self.xm.A_bc) * 0.5).tocsr())


_OPS_CACHE: "WeakKeyDictionary[Grid, DiffOps]" = WeakKeyDictionary()


def get_ops(grid: Grid) -> DiffOps:
    ops = _OPS_CACHE.get(grid)
    if ops is None:
        ops = DiffOps(grid)
        _OPS_CACHE[grid] = ops
    return ops


def hessian(u: ScalarField) -> MatrixField:
    """Nodewise Hessian of a field.

    Central differences on full stencils; unequal-arm (boundary-projected)
    stencils where an arm is cut.  Exact on quadratics everywhere.
    """
    if not u.finite():
        raise ValueError("field has non-finite values on non-exterior nodes")
    ops = get_ops(u.grid)
    return MatrixField(u.grid, ops.d1(u), ops.d12(u), ops.d2(u))


def gradient(u: ScalarField) -> tuple[NDArray, NDArray]:
    ops = get_ops(u.grid)
    return ops.gx(u), ops.gy(u)


def det_cofactor(H: MatrixField) -> tuple[NDArray, MatrixField]:
    """Determinant and cofactor matrix, nodewise.

    In 2-d, cof [[a, b], [b, c]] = [[c, -b], [-b, a]]; the determinant may be
    nonpositive, callers decide what that means.
    """
    return H.det(), H.cofactor()


def certify_convexity(u: ScalarField, tol: float | None = None) -> ConvexityCertificate:
    """Nodewise-PSD convexity certificate from Hessian eigenvalues.

    Default tolerance 1e-8 * ||u||_inf / spacing^2 scales like the rounding
    noise of second differences.
    """
    H = hessian(u)
    lam = H.eig_min()
    k = int(np.argmin(lam))
    if tol is None:
        tol = 1e-8 * max(np.max(np.abs(u.inside)), 1e-300) / u.grid.spacing**2
    return ConvexityCertificate(bool(lam[k] >= -tol), k, float(lam[k]), float(tol))


def momentum_divergence(u: ScalarField, L) -> ScalarField:
    """Total divergence of the momentum map x -> dF1/dp(x, Du(x)).

    Expanded by the chain rule as sum_ij F1_pipj(x, Du) D_ij u plus the trace
    of the mixed derivatives F1_pixi(x, Du); never computed by differencing
    momentum values.
    """
    g = u.grid
    px, py = gradient(u)
    H = hessian(u)
    x, y = g.xy[:, 0], g.xy[:, 1]
    Fpp = L.F1_pp(x, y, px, py)          # (2, 2, n)
    Fpx = L.F1_px(x, y, px, py)          # (2, 2, n), [i, j] = d2F1/dpi dxj
    val = (Fpp[0, 0] * H.h11 + (Fpp[0, 1] + Fpp[1, 0]) * H.h12
           + Fpp[1, 1] * H.h22 + Fpx[0, 0] + Fpx[1, 1])
    return ScalarField(g, val, np.zeros(g.n_feet))


def second_operator_matrix(grid: Grid, a11: NDArray, a12: NDArray, a22: NDArray,
                           monotone: bool = True,
                           bx: NDArray | None = None, by: NDArray | None = None,
                           ) -> tuple[sp.csr_matrix, sp.csr_matrix, int]:
    """Matrix of a11 D11 + 2 a12 D12 + a22 D22 (+ b . D), inside/foot blocks.

    With ``monotone`` the cross term uses the sign-matched diagonal split,
    which yields an M-matrix wherever |a12| <= min(a11, a22); the returned
    count is the number of nodes violating that condition (where the scheme is
    still consistent but not monotone).
    """
    ops = get_ops(grid)
    n_bad = int(np.count_nonzero(np.abs(a12) > np.minimum(a11, a22) + 1e-14))
    if monotone:
        bpos = np.maximum(a12, 0.0)
        bneg = np.maximum(-a12, 0.0)
        babs = bpos + bneg
        cd1 = sp.diags(a11 - babs)
        cd2 = sp.diags(a22 - babs)
        cxp = sp.diags(2.0 * bpos)
        cxm = sp.diags(2.0 * bneg)
        A_in = (cd1 @ ops.d1.A_in + cd2 @ ops.d2.A_in
                + cxp @ ops.xp.A_in + cxm @ ops.xm.A_in)
        A_bc = (cd1 @ ops.d1.A_bc + cd2 @ ops.d2.A_bc
                + cxp @ ops.xp.A_bc + cxm @ ops.xm.A_bc)
    else:
        cd1 = sp.diags(a11)
        cd2 = sp.diags(a22)
        cx = sp.diags(2.0 * a12)
        A_in = cd1 @ ops.d1.A_in + cd2 @ ops.d2.A_in + cx @ ops.d12.A_in
        A_bc = cd1 @ ops.d1.A_bc + cd2 @ ops.d2.A_bc + cx @ ops.d12.A_bc
    if bx is not None:
        A_in = A_in + sp.diags(bx) @ ops.gx.A_in + sp.diags(by) @ ops.gy.A_in
        A_bc = A_bc + sp.diags(bx) @ ops.gx.A_bc + sp.diags(by) @ ops.gy.A_bc
    return A_in.tocsr(), A_bc.tocsr(), n_bad


def divergence_form_matrix(grid: Grid, a11: NDArray, a12: NDArray, a22: NDArray,
                           weights: NDArray) -> sp.csr_matrix:
    """Adjoint (divergence-form) operator restricted to inside columns.

    Row i is (1/weights_i) * d/dv_i of sum_k weights_k (A : D^2 v)_k with the
    matrix field A held fixed; consistent with D_ij(a^ij v) = a^ij D_ij v for
    divergence-free cofactor coefficients.
    """
    ops = get_ops(grid)
    w11 = sp.diags(weights * a11)
    w22 = sp.diags(weights * a22)
    w12 = sp.diags(weights * a12)
    M = (ops.d1.A_in.T @ w11 + ops.d2.A_in.T @ w22
         + (ops.xp.A_in.T - ops.xm.A_in.T) @ w12)
    return (sp.diags(1.0 / weights) @ M).tocsr()
