"""
Dirichlet Monge-Ampere solver: det D^2 u = g in Omega, u = phi on the boundary,
for strictly positive g.

Damped Newton on the nodewise residual det D^2 u - g.  The linearization is
the cofactor-weighted second-order operator U^ij D_ij (the linearized
Monge-Ampere operator), assembled from the same difference stencils as the
residual, so quadratic data is reproduced to rounding in one step.  The line
search halves the step until the iterate keeps a nodewise-PSD Hessian and the
residual norm decreases.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from numpy.typing import NDArray

from .calculus import certify_convexity, get_ops, hessian
from .geometry import Grid, ScalarField

__all__ = ["solve_dirichlet_ma", "ma_residual", "NonConvergence", "LossOfConvexity"]


class NonConvergence(RuntimeError):
    """Iteration cap hit; carries the best iterate and its residual."""

    def __init__(self, message: str, best: ScalarField, residual: float, iterations: int):
        super().__init__(message)
        self.best = best
        self.residual = residual
        self.iterations = iterations


class LossOfConvexity(RuntimeError):
    """Damping could not maintain a nodewise PSD Hessian."""


def _quadratic_init(grid: Grid, phi_feet: NDArray, g_mean: float) -> NDArray:
    """Least-squares convex quadratic matching the boundary data.

    No determinant rescaling: boundary compatibility matters more than the
    initial residual size, since a jump between interior values and the pinned
    foot values would wreck the collar Hessians.  On symmetric boundaries the
    monomial basis is rank-deficient (on a circle 1 = x^2 + y^2), so the fit
    is pushed along null directions of the design matrix -- which leaves the
    boundary values untouched -- to make the quadratic part as uniformly
    convex as possible.
    """
    fx, fy = grid.feet_xy[:, 0], grid.feet_xy[:, 1]
    A = np.stack([np.ones_like(fx), fx, fy, fx * fx, fx * fy, fy * fy], axis=1)
    c, *_ = np.linalg.lstsq(A, phi_feet, rcond=None)
    _, S, Vt = np.linalg.svd(A, full_matrices=False)

    def qmat(cc):
        return np.array([[2 * cc[3], cc[4]], [cc[4], 2 * cc[5]]])

    for v in Vt[S <= 1e-8 * S[0]]:
        dQ = qmat(v)
        scale = max(np.abs(qmat(c)).max(), math.sqrt(max(g_mean, 1e-12)), 1e-6)
        ts = np.linspace(-4.0, 4.0, 801) * scale / max(np.abs(dQ).max(), 1e-12)
        lam_min = np.array([np.linalg.eigvalsh(qmat(c) + t * dQ)[0] for t in ts])
        lam_max = np.array([np.linalg.eigvalsh(qmat(c) + t * dQ)[1] for t in ts])
        # favor well-conditioned convex Q; among ties take the smallest shift
        score = np.minimum(lam_min, 0.35 * lam_max)
        k = int(np.argmax(score - 1e-12 * np.abs(ts)))
        c = c + ts[k] * v
    Q = qmat(c)
    x, y = grid.xy[:, 0], grid.xy[:, 1]
    return (c[0] + c[1] * x + c[2] * y
            + 0.5 * (Q[0, 0] * x * x + 2 * Q[0, 1] * x * y + Q[1, 1] * y * y))


def _hessian_parts(grid: Grid):
    ops = get_ops(grid)
    X_in = ops.d12.A_in
    X_bc = ops.d12.A_bc
    return (ops.d1.A_in, ops.d1.A_bc, ops.d2.A_in, ops.d2.A_bc, X_in, X_bc)


def solve_dirichlet_ma(g: ScalarField | Callable, phi: Callable, grid: Grid,
                       initial_guess: ScalarField | None = None,
                       tol: float = 1e-8, max_iter: int = 200) -> ScalarField:
    """Solve det D^2 u = g with boundary trace phi.

    Returns a convex field whose nodewise residual satisfies
    |det D^2 u - g| <= tol * ||g||_inf and whose foot values are phi exactly.
    Raises :class:`LossOfConvexity` if damping cannot keep the Hessian PSD and
    :class:`NonConvergence` when the iteration cap is reached.
    """
    if not isinstance(g, ScalarField):
        g = ScalarField.from_function(grid, g)
    gv = g.inside
    g_sup = float(np.max(np.abs(gv)))
    if np.any(gv < 1e-12 * g_sup) or g_sup <= 0.0:
        raise ValueError("g must be strictly positive (nodewise >= 1e-12 * ||g||_inf)")
    phi_feet = np.asarray(phi(grid.feet_xy[:, 0], grid.feet_xy[:, 1]), float) \
        + np.zeros(grid.n_feet)

    A1i, A1b, A2i, A2b, Xi, Xb = _hessian_parts(grid)
    b11 = A1b @ phi_feet
    b22 = A2b @ phi_feet
    b12 = Xb @ phi_feet

    if initial_guess is not None:
        u = initial_guess.inside.copy()
    else:
        u = _quadratic_init(grid, phi_feet, float(np.mean(gv)))

    def hess_of(uv: NDArray) -> tuple[NDArray, NDArray, NDArray]:
        return A1i @ uv + b11, A2i @ uv + b22, Xi @ uv + b12

    def min_eig(h11, h22, h12) -> float:
        half = 0.5 * (h11 + h22)
        rad = np.sqrt((0.5 * (h11 - h22)) ** 2 + h12**2)
        return float(np.min(half - rad))

    h11, h22, h12 = hess_of(u)
    if min_eig(h11, h22, h12) <= 0.0:
        raise LossOfConvexity("initial guess is not nodewise strictly convex")
    res = h11 * h22 - h12 * h12 - gv
    res_norm = float(np.max(np.abs(res)))
    target = tol * g_sup

    for it in range(max_iter):
        if res_norm <= target:
            break
        J = (sp.diags(h22) @ A1i + sp.diags(h11) @ A2i
             - sp.diags(2.0 * h12) @ Xi).tocsc()
        try:
            delta = spla.spsolve(J, -res)
        except RuntimeError as exc:
            raise NonConvergence(f"linearization solve failed: {exc}",
                                 ScalarField(grid, u, phi_feet), res_norm, it)
        d11 = A1i @ delta
        d22 = A2i @ delta
        d12 = Xi @ delta
        t = 1.0
        while t >= 1e-10:
            n11, n22, n12 = h11 + t * d11, h22 + t * d22, h12 + t * d12
            if min_eig(n11, n22, n12) > 0.0:
                new_res = n11 * n22 - n12 * n12 - gv
                new_norm = float(np.max(np.abs(new_res)))
                if new_norm <= (1.0 - 1e-4 * t) * res_norm or new_norm <= target:
                    break
            t *= 0.5
        else:
            raise LossOfConvexity(
                f"damping stalled at residual {res_norm:.3e} (iteration {it})")
        u = u + t * delta
        h11, h22, h12 = n11, n22, n12
        res, res_norm = new_res, new_norm
    else:
        raise NonConvergence(f"residual {res_norm:.3e} after {max_iter} iterations",
                             ScalarField(grid, u, phi_feet), res_norm, max_iter)

    out = ScalarField(grid, u, phi_feet)
    cert = certify_convexity(out)
    if not cert.is_convex:
        raise LossOfConvexity("converged iterate failed the convexity certificate")
    out.convexity = cert
    return out


def ma_residual(u: ScalarField, g: ScalarField | Callable) -> ScalarField:
    """Nodewise det D^2 u - g."""
    if not isinstance(g, ScalarField):
        g = ScalarField.from_function(u.grid, g)
    H = hessian(u)
    return ScalarField(u.grid, H.det() - g.inside, np.zeros(u.grid.n_feet))
