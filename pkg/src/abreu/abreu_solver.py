"""
Coupled solver for the penalized second boundary value problem

    eps U^ij D_ij w = f_eps(u)   in Omega,      f_eps = monopolist term on Omega0,
    det D^2 u = 1/w              in Omega,              (u - mu_eps)/eps outside,
    u = phi,  w = psi            on the boundary,

with U the cofactor of D^2 u.  The pair (u, w) is advanced by a damped Newton
method on the split second-order system; the interior rows of the w-equation
use the divergence-form (adjoint) discretization whose vanishing is exactly
the discrete criticality of the penalized functional, while rows in the
boundary collar use the forward stencils that carry the Dirichlet data psi.
The annulus penalty is differentiated implicitly, contributing 1/eps to the
diagonal of the u-block, which is what makes small-eps continuation stable.

In two dimensions the cofactor is linear in the Hessian, so every Jacobian
block is assembled exactly from the stencil matrices; w is then eliminated
through the diagonal coupling block and each step solves one sparse system in
the u increment.

A priori bound monitors record the quantities the solution is known to
control: the sup norm of u, the Hessian determinant range, the inner gradient
bound 2 ||u||_inf / dist(Omega0, boundary), and the boundary gap of the
auxiliary function log w - M u with M = 1 + ||f_eps^+||_inf / eps, whose
interior minimum cannot drop below its boundary minimum.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from numpy.typing import NDArray

from .calculus import divergence_form_matrix, get_ops, gradient, hessian
from .geometry import Grid, NestedDomains, ScalarField, mu_epsilon
from .lagrangian import (Lagrangian, assemble_f_epsilon, f_upper_bound,
                         variational_source_density)
from .ma_solver import solve_dirichlet_ma

__all__ = ["AbreuState", "BoundReport", "ContinuationResult", "InfeasibleEpsilon",
           "solve_abreu", "epsilon_continuation", "monitor_bounds"]


class InfeasibleEpsilon(RuntimeError):
    """Damping stalled; a warm start from a larger eps is the usual fix."""


@dataclass
class BoundReport:
    sup_abs_u: float
    det_min: float
    det_max: float
    grad_sup_inner: float
    cw_boundary_gap: float
    cw_M: float
    f_plus_sup: float
    f_upper_bound: float
    f_upper_bound_ok: bool

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "sup_abs_u", "det_min", "det_max", "grad_sup_inner",
            "cw_boundary_gap", "cw_M", "f_plus_sup", "f_upper_bound",
            "f_upper_bound_ok")}


@dataclass
class AbreuState:
    eps: float
    u: ScalarField
    w: ScalarField
    mu: ScalarField
    residual_ma: float
    residual_lma: float
    residual_coupling: float
    iterations: int
    converged: bool
    monitor: BoundReport | None = None


@dataclass
class ContinuationResult:
    states: list
    failed_eps: float | None = None
    message: str = ""

    @property
    def all_converged(self) -> bool:
        return self.failed_eps is None and all(s.converged for s in self.states)


def _check_boundary_data(grid: Grid, phi: Callable, psi: Callable) -> tuple[NDArray, NDArray]:
    phi_feet = np.asarray(phi(grid.feet_xy[:, 0], grid.feet_xy[:, 1]), float) \
        + np.zeros(grid.n_feet)
    psi_feet = np.asarray(psi(grid.feet_xy[:, 0], grid.feet_xy[:, 1]), float) \
        + np.zeros(grid.n_feet)
    if grid.n_feet and psi_feet.min() <= 0.0:
        raise ValueError("psi must be positive on the boundary")
    phi_field = ScalarField.from_function(grid, phi)
    H = hessian(phi_field)
    if float(H.eig_min().min()) < -1e-8 * max(1.0, float(np.abs(phi_field.inside).max())):
        raise ValueError("phi fails the sampled convexity check")
    return phi_feet, psi_feet


class _System:
    """Residuals and Jacobian blocks of the split system at fixed grid data."""

    def __init__(self, grid: Grid, L: Lagrangian, domains: NestedDomains,
                 eps: float, mu: ScalarField, phi_feet: NDArray, psi_feet: NDArray):
        self.grid = grid
        self.L = L
        self.domains = domains
        self.eps = eps
        self.mu = mu
        self.phi_feet = phi_feet
        self.psi_feet = psi_feet
        ops = get_ops(grid)
        self.A1i, self.A1b = ops.d1.A_in, ops.d1.A_bc
        self.A2i, self.A2b = ops.d2.A_in, ops.d2.A_bc
        self.Xi = ops.d12.A_in
        self.Xb = ops.d12.A_bc
        self.XpT = ops.xp.A_in.T.tocsr()
        self.XmT = ops.xm.A_in.T.tocsr()
        self.Gxi, self.Gxb = ops.gx.A_in, ops.gx.A_bc
        self.Gyi, self.Gyb = ops.gy.A_in, ops.gy.A_bc
        self.b11 = self.A1b @ phi_feet
        self.b22 = self.A2b @ phi_feet
        self.b12 = self.Xb @ phi_feet
        self.collar = grid.collar
        self.DB = sp.diags((~self.collar).astype(float))
        self.DC = sp.diags(self.collar.astype(float))

    def hess(self, u_in: NDArray) -> tuple[NDArray, NDArray, NDArray]:
        return (self.A1i @ u_in + self.b11,
                self.A2i @ u_in + self.b22,
                self.Xi @ u_in + self.b12)

    def residuals(self, u_in: NDArray, w_in: NDArray):
        g, eps = self.grid, self.eps
        h11, h22, h12 = self.hess(u_in)
        det = h11 * h22 - h12 * h12
        u_f = ScalarField(g, u_in, self.phi_feet)
        fvar = variational_source_density(u_f, self.L, g, eps, self.mu)
        Ldiv = divergence_form_matrix(g, h22, -h12, h11, g.w_omega)
        R1 = eps * (Ldiv @ w_in) - fvar
        # Forward rows on the collar carry the Dirichlet data for w.
        Afwd_in = (sp.diags(h22) @ self.A1i + sp.diags(h11) @ self.A2i
                   - sp.diags(2.0 * h12) @ self.Xi)
        Afwd_bc = (sp.diags(h22) @ self.A1b + sp.diags(h11) @ self.A2b
                   - sp.diags(2.0 * h12) @ self.Xb)
        fchain = assemble_f_epsilon(u_f, self.L, self.domains, eps,
                                    self.mu).inside
        R1_fwd = eps * (Afwd_in @ w_in + Afwd_bc @ self.psi_feet) - fchain
        c = self.collar
        R1 = np.where(c, R1_fwd, R1)
        R2 = w_in * det - 1.0
        return R1, R2, (h11, h22, h12, det, fvar, Ldiv, Afwd_in)

    def newton_step(self, u_in: NDArray, w_in: NDArray):
        """Assemble the coupled Jacobian, eliminate the w increment through the
        diagonal coupling block, and return (R1, R2, delta_u, delta_w)."""
        g, eps, L = self.grid, self.eps, self.L
        R1, R2, (h11, h22, h12, det, fvar, Ldiv, Afwd_in) = self.residuals(u_in, w_in)
        wom = g.w_omega
        x, y = g.xy[:, 0], g.xy[:, 1]

        # d(R1 interior)/du: divergence-form coefficients depend linearly on D^2 u
        ww = sp.diags(wom * w_in)
        K_B = sp.diags(1.0 / wom) @ (self.A1i.T @ ww @ self.A2i
                                     + self.A2i.T @ ww @ self.A1i
                                     - (self.XpT - self.XmT) @ ww @ self.Xi)
        gx, gy = gradient(ScalarField(g, u_in, self.phi_feet))
        Fpp = L.F1_pp(x, y, gx, gy)
        win = g.w_inner
        S_B = sp.diags(1.0 / wom) @ (
            sp.diags(win * L.d2F0_dz2(x, y, u_in))
            + self.Gxi.T @ sp.diags(win * Fpp[0, 0]) @ self.Gxi
            + self.Gxi.T @ sp.diags(win * Fpp[0, 1]) @ self.Gyi
            + self.Gyi.T @ sp.diags(win * Fpp[1, 0]) @ self.Gxi
            + self.Gyi.T @ sp.diags(win * Fpp[1, 1]) @ self.Gyi
            + sp.diags(g.w_annulus / eps))
        J1u_B = eps * K_B - S_B

        # d(R1 collar)/du: forward bilinearity U(du) : D^2 w, chain-rule source
        w_h11 = self.A1i @ w_in + self.A1b @ self.psi_feet
        w_h22 = self.A2i @ w_in + self.A2b @ self.psi_feet
        w_h12 = self.Xi @ w_in + self.Xb @ self.psi_feet
        Kfwd = (sp.diags(w_h11) @ self.A2i + sp.diags(w_h22) @ self.A1i
                - sp.diags(2.0 * w_h12) @ self.Xi)
        m_in = g.is_inner.astype(float)
        m_an = 1.0 - m_in
        S_C = (sp.diags(m_in * L.d2F0_dz2(x, y, u_in) + m_an / eps)
               - sp.diags(m_in * Fpp[0, 0]) @ self.A1i
               - sp.diags(m_in * (Fpp[0, 1] + Fpp[1, 0])) @ self.Xi
               - sp.diags(m_in * Fpp[1, 1]) @ self.A2i)
        J1u_C = eps * Kfwd - S_C

        J1u = self.DB @ J1u_B + self.DC @ J1u_C
        J1w = (self.DB @ (eps * Ldiv) + self.DC @ (eps * Afwd_in)).tocsr()
        # d(R2)/du = w * (cof H : D^2 du);  d(R2)/dw = det (diagonal)
        J2u = sp.diags(w_in) @ (sp.diags(h22) @ self.A1i + sp.diags(h11) @ self.A2i
                                - sp.diags(2.0 * h12) @ self.Xi)
        inv_det = 1.0 / det
        # Eliminate dw = -inv_det * (R2 + J2u du)
        J_red = (J1u - J1w @ sp.diags(inv_det) @ J2u).tocsc()
        rhs = -R1 + J1w @ (inv_det * R2)
        delta_u = spla.spsolve(J_red, rhs)
        delta_w = -inv_det * (R2 + J2u @ delta_u)
        return R1, R2, delta_u, delta_w


def _merit(R1: NDArray, R2: NDArray, s1: float) -> float:
    return float(np.sum((R1 / s1) ** 2) + np.sum(R2**2))


def solve_abreu(eps: float, L: Lagrangian, domains: NestedDomains, grid: Grid,
                phi: Callable, psi: Callable,
                warm_start: AbreuState | None = None,
                tol: float = 1e-6, max_sweeps: int = 200,
                ma_tol: float = 1e-8, ma_max_iter: int = 200) -> AbreuState:
    """Solve the coupled problem at one eps.

    Returns a state whose w-equation, Monge-Ampere and coupling residuals are
    at or below tol times their data scales (the Newton endgame typically
    drives them far lower).  On an iteration cap the best state is returned
    with ``converged=False``; a stalled line search raises
    :class:`InfeasibleEpsilon`.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    phi_feet, psi_feet = _check_boundary_data(grid, phi, psi)
    phi_field = ScalarField.from_function(grid, phi)
    mu = mu_epsilon(phi_field, domains, eps)
    sys_ = _System(grid, L, domains, eps, mu, phi_feet, psi_feet)

    if warm_start is not None:
        if warm_start.u.grid is not grid:
            raise ValueError("warm start must live on the same grid")
        u_in = warm_start.u.inside.copy()
        w_in = warm_start.w.inside.copy()
    else:
        g0 = 1.0 / float(np.mean(psi_feet)) if grid.n_feet else 1.0
        u0 = solve_dirichlet_ma(lambda xx, yy: g0 + 0.0 * xx, phi, grid,
                                tol=ma_tol, max_iter=ma_max_iter)
        u_in = u0.inside.copy()
        h11, h22, h12 = sys_.hess(u_in)
        w_in = 1.0 / (h11 * h22 - h12 * h12)

    stalls = 0
    polish = 0
    it = 0
    R1 = R2 = np.zeros(grid.n_inside)
    for it in range(1, max_sweeps + 1):
        R1, R2, du, dw = sys_.newton_step(u_in, w_in)
        s1 = 1.0 + float(np.max(np.abs(
            variational_source_density(ScalarField(grid, u_in, phi_feet),
                                       L, grid, eps, mu))))
        m0 = _merit(R1, R2, s1)
        t = 1.0
        accepted = False
        while t >= 1e-8:
            u_try = u_in + t * du
            w_try = w_in + t * dw
            if np.min(w_try) > 0.0:
                h11, h22, h12 = sys_.hess(u_try)
                lam_min = 0.5 * (h11 + h22) - np.sqrt(((h11 - h22) * 0.5) ** 2 + h12**2)
                if float(lam_min.min()) > 0.0:
                    R1_t, R2_t, _ = sys_.residuals(u_try, w_try)
                    if _merit(R1_t, R2_t, s1) < (1.0 - 1e-4 * t) * m0:
                        accepted = True
                        break
            t *= 0.5
        if not accepted:
            stalls += 1
            if stalls >= 2:
                raise InfeasibleEpsilon(
                    f"damping stalled at eps={eps:g} (iteration {it}); "
                    f"warm start from a larger eps")
            continue
        stalls = 0
        u_in, w_in = u_try, w_try
        R1, R2 = R1_t, R2_t
        res_lma = float(np.max(np.abs(R1))) / eps
        res_cpl = float(np.max(np.abs(R2)))
        scale_lma = float(np.max(np.abs(
            variational_source_density(ScalarField(grid, u_in, phi_feet),
                                       L, grid, eps, mu)))) / eps + 1.0
        if res_lma <= tol * scale_lma and res_cpl <= tol:
            # Newton endgame: a few extra full steps crush the coupling residual
            polish += 1
            if res_cpl <= 1e-12 or polish >= 6:
                break
    u_field = ScalarField(grid, u_in, phi_feet)
    w_field = ScalarField(grid, w_in, psi_feet)
    h11, h22, h12 = sys_.hess(u_in)
    det = h11 * h22 - h12 * h12
    res_ma = float(np.max(np.abs(det - 1.0 / w_in)))
    res_lma = float(np.max(np.abs(R1))) / eps
    res_cpl = float(np.max(np.abs(R2)))
    scale_lma = float(np.max(np.abs(
        variational_source_density(u_field, L, grid, eps, mu)))) / eps + 1.0
    scale_ma = float(np.max(1.0 / np.abs(w_in)))
    converged = (res_lma <= tol * scale_lma and res_cpl <= tol
                 and res_ma <= tol * scale_ma)
    state = AbreuState(eps=eps, u=u_field, w=w_field, mu=mu,
                       residual_ma=res_ma, residual_lma=res_lma,
                       residual_coupling=res_cpl, iterations=it,
                       converged=converged)
    state.monitor = monitor_bounds(state, L, domains)
    return state


def monitor_bounds(state: AbreuState, L: Lagrangian, domains: NestedDomains) -> BoundReport:
    """Populate the a priori bound monitors for a state."""
    if np.min(state.w.inside) <= 0.0:
        raise ValueError("monitors require positive w")
    g = state.u.grid
    H = hessian(state.u)
    det = H.det()
    f = assemble_f_epsilon(state.u, L, domains, state.eps, state.mu)
    f_plus = float(np.max(np.maximum(f.inside, 0.0)))
    M = 1.0 + f_plus / state.eps
    v_in = np.log(state.w.inside) - M * state.u.inside
    v_bd = np.log(state.w.feet) - M * state.u.feet if g.n_feet else np.array([np.inf])
    gx, gy = gradient(state.u)
    mag = np.hypot(gx, gy)
    grad_inner = float(np.max(mag[g.is_inner])) if np.any(g.is_inner) else 0.0
    sup_u = float(max(np.max(np.abs(state.u.inside)),
                      np.max(np.abs(state.u.feet)) if g.n_feet else 0.0))
    fub = f_upper_bound(state.u, L, domains)
    f_on_inner = f.inside[g.is_inner] if np.any(g.is_inner) else np.zeros(0)
    ok = bool(np.all(f_on_inner <= fub + 1e-9 * (1.0 + abs(fub))))
    return BoundReport(
        sup_abs_u=sup_u,
        det_min=float(det.min()),
        det_max=float(det.max()),
        grad_sup_inner=grad_inner,
        cw_boundary_gap=float(v_in.min() - v_bd.min()),
        cw_M=M,
        f_plus_sup=f_plus,
        f_upper_bound=fub,
        f_upper_bound_ok=ok,
    )


def epsilon_continuation(schedule: Sequence[float], L: Lagrangian,
                         domains: NestedDomains, grid: Grid,
                         phi: Callable, psi: Callable,
                         tol: float = 1e-6, max_sweeps: int = 200,
                         ma_tol: float = 1e-8, ma_max_iter: int = 200) -> ContinuationResult:
    """Solve along a decreasing eps schedule, warm-starting each solve.

    Stops early when a solve fails to converge or stalls, returning the states
    gathered so far together with the failing eps.
    """
    sched = [float(e) for e in schedule]
    if any(e <= 0 for e in sched) or any(b >= a for a, b in zip(sched, sched[1:])):
        raise ValueError("schedule must be positive and strictly decreasing")
    states: list[AbreuState] = []
    warm = None
    for e in sched:
        try:
            st = solve_abreu(e, L, domains, grid, phi, psi, warm_start=warm,
                             tol=tol, max_sweeps=max_sweeps,
                             ma_tol=ma_tol, ma_max_iter=ma_max_iter)
        except InfeasibleEpsilon as exc:
            return ContinuationResult(states, failed_eps=e, message=str(exc))
        states.append(st)
        if not st.converged:
            return ContinuationResult(
                states, failed_eps=e,
                message=f"solver returned non-converged state at eps={e:g}")
        warm = st
    return ContinuationResult(states)
