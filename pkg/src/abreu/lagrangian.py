"""
Split Lagrangians F(x, z, p) = F0(x, z) + F1(x, p) and the penalized functional.

The product-line pricing Lagrangian ("rochet_chone") is the built-in family:

    F(x, z, p) = (|p|^q / q - x . p + z) * eta0(x),

convex in z and p, with density eta0 >= 0.  Structural constants: D_star
bounds the momentum Hessian (0 <= F1_pp <= D_star I) and the mixed
derivatives (|F1_pixi| <= D_star (|p| + 1)); eta is the growth bound for F0.

The penalized functional on strictly convex fields v with Hessian H is

    J_eps(v) = int_{Omega0} F(x, v, Dv)
             + 1/(2 eps) int_{annulus} (v - mu_eps)^2
             - eps int_{Omega} log det H,

a convex functional; its exact discrete gradient (adjoint of every quadrature
term, log-det differentiated through the cofactor) is what
:func:`first_variation_J` returns, as a density with respect to the cell
weights.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.typing import NDArray

from .calculus import get_ops, hessian, gradient, momentum_divergence, divergence_form_matrix
from .geometry import Grid, NestedDomains, ScalarField

__all__ = [
    "Lagrangian", "FepsilonField", "AssumptionReport", "BarrierDomainError",
    "rochet_chone", "validate_assumptions", "assemble_f_epsilon",
    "quadrature_F", "quadrature_F_gradient", "variational_source_density",
    "evaluate_J", "first_variation_J", "f_upper_bound",
]

MONOPOLIST_TERM, ANNULUS_TERM = 0, 1


class BarrierDomainError(ValueError):
    """log det barrier evaluated at a field with a nonpositive Hessian determinant."""


@dataclass(frozen=True)
class Lagrangian:
    """Callables for F0, F1 and their derivatives, plus structural constants.

    All callables are vectorized over numpy arrays.  ``F1_pp`` returns shape
    (2, 2, n); ``F1_px[i, j]`` is d^2 F1 / dp_i dx_j.  Derivatives are
    analytic (supplied by constructors), never automatic: the structural
    assumptions are statements about exact derivative bounds and the test
    oracles need closed forms.
    """

    F0: Callable
    dF0_dz: Callable
    d2F0_dz2: Callable
    F1: Callable
    F1_p: Callable
    F1_pp: Callable
    F1_px: Callable
    eta0: Callable
    D_star: float
    eta_growth: Callable
    name: str = "custom"

    def F(self, x, y, z, p1, p2):
        return self.F0(x, y, z) + self.F1(x, y, p1, p2)


def rochet_chone(q_cost: float, eta0: float | Callable = 1.0,
                 eta0_grad: Callable | None = None,
                 p_range: float = 2.0, smoothing: float | None = None) -> Lagrangian:
    """Product-line pricing Lagrangian with q-power cost.

    F0 = z eta0(x), F1 = (|p|^q / q - x . p) eta0(x).  For q = 2 the momentum
    Hessian is exactly eta0 * I.  For q > 2 it grows like |p|^(q-2), so the
    declared D_star bounds it only on |p| <= p_range.  1 < q < 2 has an
    unbounded momentum Hessian near p = 0 and is accepted only with an
    explicit smoothing parameter.
    """
    if q_cost <= 1.0:
        raise ValueError("q_cost must exceed 1")
    if q_cost < 2.0 and not smoothing:
        raise ValueError("q_cost < 2 requires an explicit smoothing parameter")
    delta2 = (smoothing or 0.0) ** 2

    if callable(eta0):
        eta_fn = eta0
        if eta0_grad is None:
            d = 1e-6

            def eta_grad(x, y):
                return ((eta_fn(x + d, y) - eta_fn(x - d, y)) / (2 * d),
                        (eta_fn(x, y + d) - eta_fn(x, y - d)) / (2 * d))
        else:
            eta_grad = eta0_grad
        s = np.linspace(-2.0, 2.0, 41)
        gx, gy = np.meshgrid(s, s)
        eta_max = float(np.max(eta_fn(gx.ravel(), gy.ravel())))
    else:
        c = float(eta0)
        if c < 0:
            raise ValueError("eta0 must be nonnegative")
        eta_fn = lambda x, y: c + 0.0 * np.asarray(x, float)
        eta_grad = lambda x, y: (0.0 * np.asarray(x, float), 0.0 * np.asarray(x, float))
        eta_max = c

    q = float(q_cost)

    def _rpow(p1, p2, k):
        # |p|^k with the configured smoothing; safe at p = 0 for k >= 0
        r2 = p1 * p1 + p2 * p2 + delta2
        return r2 ** (k / 2.0)

    def F0(x, y, z):
        return z * eta_fn(x, y)

    def dF0_dz(x, y, z):
        return eta_fn(x, y) + 0.0 * np.asarray(z, float)

    def d2F0_dz2(x, y, z):
        return 0.0 * np.asarray(z, float)

    def F1(x, y, p1, p2):
        return (_rpow(p1, p2, q) / q - x * p1 - y * p2) * eta_fn(x, y)

    def F1_p(x, y, p1, p2):
        rq2 = _rpow(p1, p2, q - 2.0)
        e = eta_fn(x, y)
        return np.stack([(rq2 * p1 - x) * e, (rq2 * p2 - y) * e])

    def F1_pp(x, y, p1, p2):
        e = eta_fn(x, y) + 0.0 * np.asarray(p1, float)
        rq2 = _rpow(p1, p2, q - 2.0)
        if abs(q - 2.0) < 1e-14 and not delta2:
            zz = np.zeros_like(e)
            return np.stack([np.stack([e, zz]), np.stack([zz, e])])
        r2 = p1 * p1 + p2 * p2 + delta2
        r2 = np.maximum(r2, 1e-300)
        a = (q - 2.0) * rq2 / r2
        return np.stack([
            np.stack([e * (rq2 + a * p1 * p1), e * a * p1 * p2]),
            np.stack([e * a * p1 * p2, e * (rq2 + a * p2 * p2)]),
        ])

    def F1_px(x, y, p1, p2):
        rq2 = _rpow(p1, p2, q - 2.0)
        e = eta_fn(x, y) + 0.0 * np.asarray(p1, float)
        ex, ey = eta_grad(x, y)
        ex = ex + 0.0 * e
        ey = ey + 0.0 * e
        m1 = rq2 * p1 - x
        m2 = rq2 * p2 - y
        return np.stack([
            np.stack([m1 * ex - e, m1 * ey]),
            np.stack([m2 * ex, m2 * ey - e]),
        ])

    D_star = eta_max * max(1.0, (q - 1.0) * max(1.0, p_range) ** (q - 2.0))

    def eta_growth(t):
        return eta_max * (1.0 + np.asarray(t, float))

    return Lagrangian(F0, dF0_dz, d2F0_dz2, F1, F1_p, F1_pp, F1_px,
                      eta_fn, D_star, eta_growth, name=f"rochet_chone(q={q_cost:g})")


@dataclass
class AssumptionReport:
    n_samples: int
    monotonicity_violations: int
    growth_violations: int
    psd_violations: int
    upper_bound_violations: int
    mixed_bound_violations: int
    worst: dict

    @property
    def passed(self) -> bool:
        return (self.monotonicity_violations == 0 and self.growth_violations == 0
                and self.psd_violations == 0 and self.upper_bound_violations == 0
                and self.mixed_bound_violations == 0)


def validate_assumptions(L: Lagrangian, sample_count: int = 1000,
                         box: tuple[float, float] = (-1.0, 1.0),
                         z_range: float = 3.0, p_range: float = 2.0,
                         seed: int = 0, tol: float = 1e-9) -> AssumptionReport:
    """Monte-Carlo check of the structural inequalities on the working box.

    Report-only: lists counts and the worst offending sample per inequality.
    """
    if sample_count < 100:
        raise ValueError("sample_count must be at least 100")
    rng = np.random.default_rng(seed)
    lo, hi = box
    x = rng.uniform(lo, hi, sample_count)
    y = rng.uniform(lo, hi, sample_count)
    z = rng.uniform(-z_range, z_range, sample_count)
    zt = rng.uniform(-z_range, z_range, sample_count)
    p1 = rng.uniform(-p_range, p_range, sample_count)
    p2 = rng.uniform(-p_range, p_range, sample_count)

    worst: dict = {}
    mono = (L.dF0_dz(x, y, z) - L.dF0_dz(x, y, zt)) * (z - zt)
    n_mono = int(np.count_nonzero(mono < -tol))
    if n_mono:
        k = int(np.argmin(mono))
        worst["monotonicity"] = (float(x[k]), float(y[k]), float(z[k]), float(zt[k]))

    growth = np.abs(L.F0(x, y, z)) + np.abs(L.dF0_dz(x, y, z)) - L.eta_growth(np.abs(z))
    n_growth = int(np.count_nonzero(growth > tol))
    if n_growth:
        k = int(np.argmax(growth))
        worst["growth"] = (float(x[k]), float(y[k]), float(z[k]))

    Fpp = L.F1_pp(x, y, p1, p2)
    half = 0.5 * (Fpp[0, 0] + Fpp[1, 1])
    rad = np.sqrt((0.5 * (Fpp[0, 0] - Fpp[1, 1])) ** 2 + Fpp[0, 1] ** 2)
    lam_min, lam_max = half - rad, half + rad
    n_psd = int(np.count_nonzero(lam_min < -tol))
    n_up = int(np.count_nonzero(lam_max > L.D_star + tol))
    if n_psd:
        k = int(np.argmin(lam_min))
        worst["psd"] = (float(x[k]), float(y[k]), float(p1[k]), float(p2[k]))
    if n_up:
        k = int(np.argmax(lam_max))
        worst["upper"] = (float(x[k]), float(y[k]), float(p1[k]), float(p2[k]))

    Fpx = L.F1_px(x, y, p1, p2)
    pmag = np.hypot(p1, p2)
    bound = L.D_star * (pmag + 1.0)
    mixed = np.maximum(np.abs(Fpx[0, 0]), np.abs(Fpx[1, 1])) - bound
    n_mixed = int(np.count_nonzero(mixed > tol))
    if n_mixed:
        k = int(np.argmax(mixed))
        worst["mixed"] = (float(x[k]), float(y[k]), float(p1[k]), float(p2[k]))

    return AssumptionReport(sample_count, n_mono, n_growth, n_psd, n_up, n_mixed, worst)


@dataclass
class FepsilonField:
    """Right-hand side of the coupled system with per-node provenance."""

    field: ScalarField
    provenance: NDArray  # int8: MONOPOLIST_TERM on Omega0 nodes, ANNULUS_TERM outside

    @property
    def inside(self) -> NDArray:
        return self.field.inside


def assemble_f_epsilon(u: ScalarField, L: Lagrangian, domains: NestedDomains,
                       eps: float, mu: ScalarField) -> FepsilonField:
    """Chain-rule assembly of the singular right-hand side.

    On inner-domain nodes: dF0/dz(x, u) minus the momentum divergence; on
    annulus nodes: (u - mu_eps) / eps.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    g = u.grid
    x, y = g.xy[:, 0], g.xy[:, 1]
    vals = np.where(
        g.is_inner,
        L.dF0_dz(x, y, u.inside) - momentum_divergence(u, L).inside,
        (u.inside - mu.inside) / eps,
    )
    prov = np.where(g.is_inner, MONOPOLIST_TERM, ANNULUS_TERM).astype(np.int8)
    return FepsilonField(ScalarField(g, vals, np.zeros(g.n_feet)), prov)


def f_upper_bound(u: ScalarField, L: Lagrangian, domains: NestedDomains) -> float:
    """Explicit upper bound eta(||u||_inf) + n D_star (||Du||_inf,Omega0 + 1)."""
    sup_u = float(np.max(np.abs(u.inside))) if u.grid.n_inside else 0.0
    gx, gy = gradient(u)
    mag = np.hypot(gx, gy)
    sup_du = float(np.max(mag[u.grid.is_inner])) if np.any(u.grid.is_inner) else 0.0
    n = 2
    return float(L.eta_growth(sup_u) + n * L.D_star * (sup_du + 1.0))


def quadrature_F(v: ScalarField, L: Lagrangian, grid: Grid) -> float:
    """Midpoint quadrature of F(x, v, Dv) over the inner domain (cut cells
    weighted by their covered fraction)."""
    x, y = grid.xy[:, 0], grid.xy[:, 1]
    gx, gy = gradient(v)
    return float(np.sum(grid.w_inner * L.F(x, y, v.inside, gx, gy)))


def quadrature_F_gradient(v: ScalarField, L: Lagrangian, grid: Grid) -> NDArray:
    """Exact gradient of :func:`quadrature_F` with respect to inside values."""
    ops = get_ops(grid)
    x, y = grid.xy[:, 0], grid.xy[:, 1]
    gx, gy = gradient(v)
    Fp = L.F1_p(x, y, gx, gy)
    out = grid.w_inner * L.dF0_dz(x, y, v.inside)
    out = out + ops.gx.A_in.T @ (grid.w_inner * Fp[0])
    out = out + ops.gy.A_in.T @ (grid.w_inner * Fp[1])
    return out


def variational_source_density(v: ScalarField, L: Lagrangian, grid: Grid,
                               eps: float, mu: ScalarField) -> NDArray:
    """Density (per unit area) of the non-barrier part of the J gradient.

    Equals the weak-form counterpart of the chain-rule right-hand side; the
    annulus part is (v - mu)/eps exactly.
    """
    raw = quadrature_F_gradient(v, L, grid) + grid.w_annulus * (v.inside - mu.inside) / eps
    return raw / grid.w_omega


def evaluate_J(v: ScalarField, L: Lagrangian, domains: NestedDomains,
               eps: float, mu: ScalarField) -> float:
    """Value of the penalized functional at a strictly convex field."""
    grid = v.grid
    H = hessian(v)
    det = H.det()
    if np.any(det <= 0.0):
        k = int(np.argmin(det))
        raise BarrierDomainError(
            f"log det barrier undefined: det D^2 v = {det[k]:.3e} at node {k}")
    term1 = quadrature_F(v, L, grid)
    term2 = 0.5 / eps * float(np.sum(grid.w_annulus * (v.inside - mu.inside) ** 2))
    term3 = -eps * float(np.sum(grid.w_omega * np.log(det)))
    return term1 + term2 + term3


def first_variation_J(v: ScalarField, L: Lagrangian, domains: NestedDomains,
                      eps: float, mu: ScalarField) -> ScalarField:
    """Exact discrete gradient of J with respect to inside node values.

    Returned as a density (gradient divided by the Omega cell weights), so in
    the interior it is consistent with the strong Euler-Lagrange operator.
    Every quadrature term is differentiated analytically; the log-det term
    goes through the cofactor identity d log det H = (cof H / det H) : dH.
    """
    grid = v.grid
    H = hessian(v)
    det = H.det()
    if np.any(det <= 0.0):
        k = int(np.argmin(det))
        raise BarrierDomainError(
            f"log det barrier undefined: det D^2 v = {det[k]:.3e} at node {k}")
    U = H.cofactor()
    Ldiv = divergence_form_matrix(grid, U.h11, U.h12, U.h22, grid.w_omega)
    density = (variational_source_density(v, L, grid, eps, mu)
               - eps * (Ldiv @ (1.0 / det)))
    return ScalarField(grid, density, np.zeros(grid.n_feet))
