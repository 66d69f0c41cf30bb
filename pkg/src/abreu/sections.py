"""
Section geometry of convex potentials and the twisted-gauge machinery.

The section of a convex u centered at x* with height h is the sublevel set of
u minus its supporting plane at x*:

    S(x*, h) = { y : u(y) < u(x*) + Du(x*) . (y - x*) + h },

the natural ball of Monge-Ampere geometry.  This module measures the
quantities the regularity theory controls:

- section volumes |S| / h^(n/2) (bounded above and below for pinched
  determinants),
- John normalization: an affine map T with B_1 in T^-1(S) in B_n, built from
  the minimum-volume enclosing ellipsoid of the section's node hull and the
  largest concentric inscribed copy (which John's theorem bounds below by the
  1/n shrink),
- the rescaled problem data (u, A, b, f) -> (u~, A~, b~, f~) under T,
- the multiplicative gauge of the coupled system: for an anchor z,
      G_z(x) = exp(D* |Du(x) - Du(z)|^2 / (2 eps)) >= 1,   G_z(z) = 1,
      b_z(x) = -(det D^2 u) (D*/eps) (Du(x) - Du(z)),
  under which eta = w G_z satisfies a drifted equation with right-hand side
  ((f_eps + D* Lap u)/eps) G_z; the discrete residual of that identity is a
  testable quantity,
- Harnack quotients sup/inf over S(x*, h/8) and the decay exponent of the
  distribution function |{v > t}| / |S| ~ t^(-eps_hat),
- Holder seminorms over node pairs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy.spatial import ConvexHull, QhullError

from .calculus import MatrixField, get_ops, gradient, hessian
from .geometry import Grid, ScalarField, interp_at
from .lagrangian import assemble_f_epsilon

__all__ = [
    "Section", "TwistBundle", "RescaledProblem", "AffineMap",
    "SectionError", "EmptySection", "SectionNotCompactlyContained",
    "DegenerateSection", "InsufficientDecadeCoverage",
    "compute_section", "john_normalize", "rescale_problem", "twist_bundle",
    "transformed_residual", "harnack_quotient", "distribution_decay",
    "holder_seminorm", "holder_exponent_estimate",
]


class SectionError(RuntimeError):
    pass


class EmptySection(SectionError):
    pass


class SectionNotCompactlyContained(SectionError):
    pass


class DegenerateSection(SectionError):
    pass


class InsufficientDecadeCoverage(SectionError):
    pass


@dataclass
class AffineMap:
    """x = A y + b."""

    A: NDArray
    b: NDArray

    def __call__(self, pts: NDArray) -> NDArray:
        return pts @ self.A.T + self.b

    def inverse(self, pts: NDArray) -> NDArray:
        return (pts - self.b) @ np.linalg.inv(self.A).T

    @property
    def det(self) -> float:
        return float(np.linalg.det(self.A))


@dataclass
class Section:
    center: NDArray
    center_node: int
    height: float
    node_ids: NDArray
    plane_value: NDArray        # supporting plane at the section nodes
    measure: float              # cut-cell area of the sublevel set
    grid: Grid
    john: AffineMap | None = None
    normalized_radius_check: tuple[float, float] | None = None
    cell_fraction: NDArray | None = None

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)


@dataclass
class TwistBundle:
    anchor: NDArray
    anchor_node: int
    G_z: ScalarField
    b_z: tuple[NDArray, NDArray]
    f_z: ScalarField
    gamma: float
    gamma_seminorm: float
    K_stat: float


@dataclass
class RescaledProblem:
    grid: "NormalizedGrid"
    u_tilde: NDArray
    A_tilde: tuple[NDArray, NDArray, NDArray]
    b_tilde: tuple[NDArray, NDArray] | None
    f_tilde: NDArray
    det_Ah: float


@dataclass
class NormalizedGrid:
    """Plain square lattice used for fields pulled back by a John map."""

    xs: NDArray
    ys: NDArray
    mask: NDArray      # (ny, nx) valid samples

    @property
    def spacing(self) -> float:
        return float(self.xs[1] - self.xs[0])

    def meshgrid(self):
        return np.meshgrid(self.xs, self.ys)


def _nearest_node(grid: Grid, x_star) -> int:
    p = np.asarray(x_star, float)
    return int(np.argmin((grid.xy[:, 0] - p[0]) ** 2 + (grid.xy[:, 1] - p[1]) ** 2))


def compute_section(u: ScalarField, x_star, h: float,
                    allow_boundary: bool = False) -> Section:
    """Nodes strictly below the supporting plane at x* lifted by h.

    Ties at the sublevel boundary are excluded (strict inequality).  Raises
    :class:`SectionNotCompactlyContained` when the node set touches the
    boundary collar and :class:`EmptySection` when h is below one-cell
    resolvability.
    """
    grid = u.grid
    k0 = _nearest_node(grid, x_star)
    gx, gy = gradient(u)
    c = grid.xy[k0]
    plane = u.inside[k0] + gx[k0] * (grid.xy[:, 0] - c[0]) \
        + gy[k0] * (grid.xy[:, 1] - c[1])
    level = u.inside - plane - h
    ids = np.nonzero(level < 0.0)[0]
    if len(ids) < 5:
        raise EmptySection(f"section of height {h:g} resolves {len(ids)} nodes")
    if not allow_boundary and bool(grid.collar[ids].any()):
        raise SectionNotCompactlyContained(
            "section touches the boundary collar; shrink the height")
    # cut-cell measure of the sublevel set via the linearized level function
    slope = np.hypot(gx - gx[k0], gy - gy[k0])
    d = level / np.maximum(slope, 1e-12)
    frac = np.clip(0.5 - d / grid.spacing, 0.0, 1.0)
    near = np.abs(d) <= grid.spacing
    covered = np.where(near, frac, (level < 0.0).astype(float))
    measure = float(np.sum(grid.spacing**2 * covered))
    return Section(center=c.copy(), center_node=k0, height=float(h),
                   node_ids=ids, plane_value=plane, measure=measure,
                   grid=grid, cell_fraction=covered)


def _mvee(points: NDArray, tol: float = 1e-6, max_iter: int = 5000):
    """Minimum-volume enclosing ellipsoid (Khachiyan iteration).

    Returns (center, M) with the ellipsoid { c + M v : |v| <= 1 }.
    """
    n, d = points.shape
    Q = np.column_stack([points, np.ones(n)]).T
    wts = np.full(n, 1.0 / n)
    for _ in range(max_iter):
        V = Q @ (wts[:, None] * Q.T)
        g = np.einsum("ij,ji->i", Q.T @ np.linalg.inv(V), Q)
        j = int(np.argmax(g))
        step = (g[j] - d - 1.0) / ((d + 1.0) * (g[j] - 1.0))
        new = (1.0 - step) * wts
        new[j] += step
        if np.linalg.norm(new - wts) < tol * max(np.linalg.norm(wts), 1e-300):
            wts = new
            break
        wts = new
    c = points.T @ wts
    S = points.T @ (wts[:, None] * points) - np.outer(c, c)
    P = np.linalg.inv(S) / d
    lam, V = np.linalg.eigh(P)
    M = V @ np.diag(1.0 / np.sqrt(np.maximum(lam, 1e-300))) @ V.T
    return c, M


def john_normalize(section: Section, u: ScalarField) -> tuple[AffineMap, Section]:
    """John map T with B_1 in T^-1(S) in B_n (up to one-cell fuzz).

    The enclosing ellipsoid of the section's hull vertices is computed by the
    Khachiyan iteration; the inscribed factor is the largest concentric
    scaling that stays inside the hull, which John's theorem bounds below by
    1/n.  The map sends the unit ball onto the inscribed ellipsoid.
    """
    if section.n_nodes < 25:
        raise DegenerateSection(f"need at least 25 nodes, got {section.n_nodes}")
    pts = section.grid.xy[section.node_ids]
    try:
        hull = ConvexHull(pts)
    except QhullError as exc:
        raise DegenerateSection(str(exc)) from exc
    verts = pts[hull.vertices]
    c, M = _mvee(verts)
    # hull H-representation rows a . x + off <= 0 with |a| = 1
    a = hull.equations[:, :2]
    off = hull.equations[:, 2]
    slack = -(off + a @ c)
    if np.any(slack <= 0):
        raise DegenerateSection("enclosing-ellipsoid center left the hull")
    t = float(np.min(slack / np.linalg.norm(a @ M, axis=1)))
    A_h = t * M
    T = AffineMap(A_h, c)
    local = T.inverse(pts)
    r_out = float(np.max(np.linalg.norm(local, axis=1)))
    r_in = float(np.min(slack / np.linalg.norm(a @ A_h, axis=1)))
    sec = Section(center=section.center, center_node=section.center_node,
                  height=section.height, node_ids=section.node_ids,
                  plane_value=section.plane_value, measure=section.measure,
                  grid=section.grid, john=T,
                  normalized_radius_check=(r_in, r_out),
                  cell_fraction=section.cell_fraction)
    return T, sec


def rescale_problem(u: ScalarField, A: MatrixField | None, b, f: ScalarField | None,
                    section: Section, T: AffineMap,
                    resolution: int = 65) -> RescaledProblem:
    """Pull the problem data back through the John map.

    With d = det A_h:  u~ = d^(-2/n) (u - plane - h) o T,
    A~ = d^(2/n) A_h^-1 A (A_h^-1)^t o T,  b~ = d^(2/n) A_h^-1 b o T,
    f~ = d^(2/n) f o T, all sampled on a fresh normalized lattice by bilinear
    interpolation; the rescaled operator residual equals d^(2/n) times the
    original residual composed with T.
    """
    n_dim = 2
    d = abs(T.det)
    if d < 1e-12:
        raise DegenerateSection("John map has vanishing determinant")
    pow_ = d ** (2.0 / n_dim)
    grid = section.grid
    lim = n_dim + 0.25
    xs = np.linspace(-lim, lim, resolution)
    ys = np.linspace(-lim, lim, resolution)
    X, Y = np.meshgrid(xs, ys)
    pts_local = np.column_stack([X.ravel(), Y.ravel()])
    pts = T(pts_local)

    plane_at = _plane_interp(u, section)
    u_vals = interp_at(u, pts) - plane_at(pts) - section.height
    mask = np.isfinite(u_vals)
    # keep only samples inside the original section (with a small apron)
    mask &= u_vals <= 0.05 * section.height
    u_t = np.where(mask, u_vals / pow_, np.nan).reshape(resolution, resolution)

    Ainv = np.linalg.inv(T.A)

    def pull_matrix(Mf: MatrixField):
        m11 = interp_at(ScalarField(grid, Mf.h11, np.zeros(grid.n_feet)), pts)
        m12 = interp_at(ScalarField(grid, Mf.h12, np.zeros(grid.n_feet)), pts)
        m22 = interp_at(ScalarField(grid, Mf.h22, np.zeros(grid.n_feet)), pts)
        out11 = np.empty_like(m11)
        out12 = np.empty_like(m11)
        out22 = np.empty_like(m11)
        a, bb, cdd = Ainv[0, 0], Ainv[0, 1], (Ainv[1, 0], Ainv[1, 1])
        c2, d2 = cdd
        out11 = pow_ * (a * (a * m11 + bb * m12) + bb * (a * m12 + bb * m22))
        out12 = pow_ * (c2 * (a * m11 + bb * m12) + d2 * (a * m12 + bb * m22))
        out22 = pow_ * (c2 * (c2 * m11 + d2 * m12) + d2 * (c2 * m12 + d2 * m22))
        shp = (resolution, resolution)
        return (np.where(mask, out11, np.nan).reshape(shp),
                np.where(mask, out12, np.nan).reshape(shp),
                np.where(mask, out22, np.nan).reshape(shp))

    A_t = pull_matrix(A) if A is not None else None
    if b is not None:
        bx = interp_at(ScalarField(grid, b[0], np.zeros(grid.n_feet)), pts)
        by = interp_at(ScalarField(grid, b[1], np.zeros(grid.n_feet)), pts)
        tb1 = pow_ * (Ainv[0, 0] * bx + Ainv[0, 1] * by)
        tb2 = pow_ * (Ainv[1, 0] * bx + Ainv[1, 1] * by)
        shp = (resolution, resolution)
        b_t = (np.where(mask, tb1, np.nan).reshape(shp),
               np.where(mask, tb2, np.nan).reshape(shp))
    else:
        b_t = None
    if f is not None:
        fv = interp_at(f, pts)
        f_t = (pow_ * np.where(mask, fv, np.nan)).reshape(resolution, resolution)
    else:
        f_t = np.full((resolution, resolution), np.nan)
    ngrid = NormalizedGrid(xs, ys, mask.reshape(resolution, resolution))
    return RescaledProblem(ngrid, u_t, A_t, b_t, f_t, float(T.det))


def _plane_interp(u: ScalarField, section: Section):
    grid = u.grid
    gx, gy = gradient(u)
    k0 = section.center_node
    c = section.center

    def at(pts: NDArray) -> NDArray:
        return (u.inside[k0] + gx[k0] * (pts[:, 0] - c[0])
                + gy[k0] * (pts[:, 1] - c[1]))

    return at


def twist_bundle(state, z, L, domains, gamma: float | None = None) -> TwistBundle:
    """Gauge data anchored at z for a coupled-system state.

    G_z = exp(D* |Du - Du(z)|^2 / (2 eps)), b_z = -(det D^2 u)(D*/eps)(Du - Du(z)),
    f_z = ((f_eps + D* Lap u)/eps) G_z.  The measured Holder-gamma constant of
    G_z at z and the drift sup norm make up the K statistic.
    """
    grid = state.u.grid
    kz = _nearest_node(grid, z)
    gx, gy = gradient(state.u)
    dpx = gx - gx[kz]
    dpy = gy - gy[kz]
    eps = state.eps
    dstar = L.D_star
    G = np.exp(dstar * (dpx**2 + dpy**2) / (2.0 * eps))
    H = hessian(state.u)
    det = H.det()
    bx = -det * (dstar / eps) * dpx
    by = -det * (dstar / eps) * dpy
    f_eps = assemble_f_epsilon(state.u, L, domains, eps, state.mu).inside
    f_z = (f_eps + dstar * H.trace()) / eps * G
    if gamma is None:
        gamma = holder_exponent_estimate(np.column_stack([gx, gy]), grid,
                                         grid.interior_mask(1))
    dist = np.hypot(grid.xy[:, 0] - grid.xy[kz, 0], grid.xy[:, 1] - grid.xy[kz, 1])
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(dist > 0, (G - 1.0) / dist**gamma, 0.0)
    seminorm = float(np.max(ratio))
    k_stat = float(np.max(np.hypot(bx, by))) + seminorm
    zf = np.zeros(grid.n_feet)
    return TwistBundle(anchor=grid.xy[kz].copy(), anchor_node=kz,
                       G_z=ScalarField(grid, G, zf), b_z=(bx, by),
                       f_z=ScalarField(grid, f_z, zf),
                       gamma=float(gamma), gamma_seminorm=seminorm, K_stat=k_stat)


def transformed_residual(state, z, L, domains) -> ScalarField:
    """Discrete residual of the gauge-transformed equation at anchor z:

        U^ij D_ij (w G_z) + b_z . D(w G_z) - ((f_eps + D* Lap u)/eps) G_z,

    evaluated with forward stencils on nodes whose full stencil neighborhood
    is interior (the gauge has no boundary data); other nodes carry zero.
    """
    bundle = twist_bundle(state, z, L, domains)
    grid = state.u.grid
    ops = get_ops(grid)
    H = hessian(state.u)
    U11, U12, U22 = H.h22, -H.h12, H.h11
    eta = state.w.inside * bundle.G_z.inside
    mask = grid.interior_mask(2)
    eta_f = ScalarField(grid, eta, np.zeros(grid.n_feet))
    e11 = ops.d1.A_in @ eta
    e22 = ops.d2.A_in @ eta
    e12 = ops.d12.A_in @ eta
    egx = ops.gx.A_in @ eta
    egy = ops.gy.A_in @ eta
    bx, by = bundle.b_z
    res = (U11 * e11 + 2.0 * U12 * e12 + U22 * e22
           + bx * egx + by * egy - bundle.f_z.inside)
    return ScalarField(grid, np.where(mask, res, 0.0), np.zeros(grid.n_feet))


def harnack_quotient(v: ScalarField, u: ScalarField, x_star, h: float) -> float:
    """sup v / inf v over the node set of S(x*, h/8).

    v must be nonnegative on S(x*, h); returns +inf when the infimum
    vanishes.
    """
    outer = compute_section(u, x_star, h)
    if np.any(v.inside[outer.node_ids] < 0):
        raise ValueError("v must be nonnegative on the section")
    inner = compute_section(u, x_star, h / 8.0)
    vals = v.inside[inner.node_ids]
    lo = float(vals.min())
    hi = float(vals.max())
    if lo <= 0.0:
        return math.inf
    return hi / lo


def distribution_decay(v: ScalarField, section: Section, t_grid) -> tuple[float, dict]:
    """Least-squares decay exponent of the distribution function.

    Fits |{v > t} cap S| / |S| ~ C t^(-eps_hat) over thresholds whose
    measure fraction lies in (0.001, 0.5); needs at least three usable
    thresholds.  The infimum of v over the inner eighth-section must be at
    most 1 (normalization convention of the decay estimate).
    """
    grid = section.grid
    w = section.cell_fraction if section.cell_fraction is not None else None
    ids = section.node_ids
    if w is None:
        weights = np.ones(len(ids))
        vals = v.inside[ids]
    else:
        weights = w
        vals = v.inside
    total = float(np.sum(weights))
    fractions = []
    ts = []
    for t in sorted(float(t) for t in t_grid):
        if t <= 0:
            continue
        fr = float(np.sum(weights[vals > t])) / total
        if 1e-3 < fr < 0.5:
            ts.append(t)
            fractions.append(fr)
    if len(ts) < 3:
        raise InsufficientDecadeCoverage(
            f"only {len(ts)} usable thresholds in (0.001, 0.5)")
    lt = np.log(np.asarray(ts))
    lf = np.log(np.asarray(fractions))
    A = np.column_stack([lt, np.ones_like(lt)])
    coef, res, *_ = np.linalg.lstsq(A, lf, rcond=None)
    eps_hat = -float(coef[0])
    c1 = float(np.exp(coef[1]))
    resid = float(np.sqrt(res[0] / len(ts))) if len(res) else 0.0
    return eps_hat, {"n_thresholds": len(ts), "fit_residual": resid,
                     "prefactor": c1, "thresholds": ts, "fractions": fractions}


def holder_seminorm(v: ScalarField, region: NDArray, alpha: float,
                    max_pairs: int = 100_000, seed: int = 0) -> float:
    """max |v(x) - v(y)| / |x - y|^alpha over node pairs in the region.

    Exhaustive when the region has at most 2000 nodes, otherwise a seeded
    random sample of pairs.
    """
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must lie in (0, 1]")
    grid = v.grid
    ids = np.nonzero(region)[0] if region.dtype == bool else np.asarray(region)
    pts = grid.xy[ids]
    vals = v.inside[ids]
    n = len(ids)
    if n < 2:
        return 0.0
    if n <= 2000:
        best = 0.0
        for k in range(n - 1):
            dx = pts[k + 1:] - pts[k]
            dist = np.hypot(dx[:, 0], dx[:, 1])
            best = max(best, float(np.max(np.abs(vals[k + 1:] - vals[k])
                                          / dist**alpha)))
        return best
    rng = np.random.default_rng(seed)
    i = rng.integers(0, n, max_pairs)
    j = rng.integers(0, n, max_pairs)
    keep = i != j
    i, j = i[keep], j[keep]
    dist = np.hypot(pts[i, 0] - pts[j, 0], pts[i, 1] - pts[j, 1])
    return float(np.max(np.abs(vals[i] - vals[j]) / dist**alpha))


def holder_exponent_estimate(values: NDArray, grid: Grid, region: NDArray,
                             max_pairs: int = 50_000, seed: int = 0) -> float:
    """Fit the growth exponent of max increments against distance.

    ``values`` may be scalar (n,) or vector (n, m) samples; uses dyadic
    distance bins and a log-log slope, clipped to (0.05, 1.0].
    """
    ids = np.nonzero(region)[0] if region.dtype == bool else np.asarray(region)
    pts = grid.xy[ids]
    vals = values[ids]
    if vals.ndim == 1:
        vals = vals[:, None]
    n = len(ids)
    rng = np.random.default_rng(seed)
    m = min(max_pairs, n * (n - 1) // 2)
    i = rng.integers(0, n, m)
    j = rng.integers(0, n, m)
    keep = i != j
    i, j = i[keep], j[keep]
    dist = np.hypot(pts[i, 0] - pts[j, 0], pts[i, 1] - pts[j, 1])
    inc = np.linalg.norm(vals[i] - vals[j], axis=1)
    lo = max(dist.min(), grid.spacing)
    hi = dist.max()
    edges = np.geomspace(lo, hi, 9)
    xs, ys = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        sel = (dist >= a) & (dist < b) & (inc > 0)
        if sel.sum() >= 10:
            xs.append(math.sqrt(a * b))
            ys.append(np.max(inc[sel]))
    if len(xs) < 3:
        return 1.0
    slope = np.polyfit(np.log(xs), np.log(ys), 1)[0]
    return float(np.clip(slope, 0.05, 1.0))
