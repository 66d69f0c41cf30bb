"""
Nested convex domains on a masked Cartesian grid.

A pair of convex domains Omega0 strictly inside Omega is described by level-set
defining functions rho (rho < 0 inside, rho = 0 on the boundary).  The grid is
a uniform lattice over the bounding box of the outer domain.  Lattice nodes are
classified as

    INNER    -- inside the inner domain Omega0,
    ANNULUS  -- inside Omega but outside Omega0,
    BOUNDARY -- outside Omega but adjacent to an inside node (ghost layer),
    EXTERIOR -- everything else.

Every stencil arm that leaves Omega is shortened to its crossing with the
boundary ("foot"), located by bisection along the lattice line.  Scalar fields
carry one value per inside node plus one value per foot, so Dirichlet data is
represented exactly at the points where difference stencils consume it.

Quadrature weights use the midpoint rule with cut cells weighted by a
linearized covered-fraction estimate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.typing import NDArray

__all__ = [
    "EXTERIOR", "BOUNDARY", "ANNULUS", "INNER",
    "ConvexDomain", "NestedDomains", "Grid", "ScalarField",
    "GridConstructionError",
    "disk", "ellipse", "polynomial_domain", "nested_disks",
    "build_grid", "mu_epsilon", "extend_boundary_data", "interp_at",
]

EXTERIOR, BOUNDARY, ANNULUS, INNER = 0, 1, 2, 3

# Direction table: E, W, N, S, NE, NW, SE, SW as (di, dj) lattice steps.
DIRS: tuple[tuple[int, int], ...] = (
    (1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (-1, 1), (1, -1), (-1, -1),
)
# Opposite-direction pairs forming the four stencil lines.
LINE_PAIRS = ((0, 1), (2, 3), (4, 7), (6, 5))  # E-W, N-S, NE-SW, SE-NW


class GridConstructionError(RuntimeError):
    """Raised when the lattice cannot resolve the requested geometry."""


@dataclass(frozen=True)
class ConvexDomain:
    """A bounded convex domain given by a defining function rho.

    rho < 0 strictly inside, rho = 0 on the boundary, grad rho != 0 on the
    boundary.  ``uniform_convexity_modulus`` is the declared lower bound for
    the Hessian of rho; :meth:`sampled_convexity_modulus` measures it.
    """

    rho: Callable[[NDArray, NDArray], NDArray]
    grad_rho: Callable[[NDArray, NDArray], tuple[NDArray, NDArray]]
    uniform_convexity_modulus: float
    bounding_box: tuple[float, float, float, float]  # xmin, xmax, ymin, ymax
    name: str = "custom"

    def contains(self, x: NDArray, y: NDArray) -> NDArray:
        return self.rho(np.asarray(x, float), np.asarray(y, float)) < 0.0

    def sampled_convexity_modulus(self, n_samples: int = 400, seed: int = 0) -> float:
        """Smallest Hessian eigenvalue of rho over sampled interior points.

        Second differences with a small step; recorded, not enforced (the
        declared modulus is the contract, the measurement is the evidence).
        """
        rng = np.random.default_rng(seed)
        xmin, xmax, ymin, ymax = self.bounding_box
        xs = rng.uniform(xmin, xmax, 4 * n_samples)
        ys = rng.uniform(ymin, ymax, 4 * n_samples)
        inside = self.contains(xs, ys)
        xs, ys = xs[inside][:n_samples], ys[inside][:n_samples]
        d = 1e-4 * max(xmax - xmin, ymax - ymin)
        r = self.rho
        rxx = (r(xs + d, ys) - 2 * r(xs, ys) + r(xs - d, ys)) / d**2
        ryy = (r(xs, ys + d) - 2 * r(xs, ys) + r(xs, ys - d)) / d**2
        rxy = (r(xs + d, ys + d) + r(xs - d, ys - d)
               - r(xs + d, ys - d) - r(xs - d, ys + d)) / (4 * d**2)
        half_tr = 0.5 * (rxx + ryy)
        lam_min = half_tr - np.sqrt((0.5 * (rxx - ryy)) ** 2 + rxy**2)
        return float(lam_min.min()) if lam_min.size else math.nan

    def boundary_gradient_ok(self, feet_xy: NDArray, tol: float = 1e-10) -> bool:
        gx, gy = self.grad_rho(feet_xy[:, 0], feet_xy[:, 1])
        return bool(np.all(np.hypot(gx, gy) > tol))


def disk(radius: float = 1.0, center: tuple[float, float] = (0.0, 0.0),
         margin: float = 0.05, rho_scale: float = 1.0) -> ConvexDomain:
    """Disk with rho = s (|x - c|^2 - r^2)/2, uniformly convex with modulus s.

    ``rho_scale`` rescales the defining function (any positive multiple of a
    defining function is again one); the convexification barrier inherits the
    scale, so small values keep the barrier shift well below the
    discretization floor.
    """
    cx, cy = center
    r2 = radius * radius
    s = float(rho_scale)
    if s <= 0:
        raise ValueError("rho_scale must be positive")

    def rho(x, y):
        return 0.5 * s * ((x - cx) ** 2 + (y - cy) ** 2 - r2)

    def grad(x, y):
        return s * (x - cx), s * (y - cy)

    pad = margin * radius
    box = (cx - radius - pad, cx + radius + pad, cy - radius - pad, cy + radius + pad)
    return ConvexDomain(rho, grad, s, box, name=f"disk(r={radius:g})")


def ellipse(a: float, b: float, center: tuple[float, float] = (0.0, 0.0),
            margin: float = 0.05, rho_scale: float = 1.0) -> ConvexDomain:
    """Axis-aligned ellipse with rho = s (x^2/a^2 + y^2/b^2 - 1)/2."""
    cx, cy = center
    s = float(rho_scale)
    if s <= 0:
        raise ValueError("rho_scale must be positive")

    def rho(x, y):
        return 0.5 * s * (((x - cx) / a) ** 2 + ((y - cy) / b) ** 2 - 1.0)

    def grad(x, y):
        return s * (x - cx) / a**2, s * (y - cy) / b**2

    pad = margin * max(a, b)
    box = (cx - a - pad, cx + a + pad, cy - b - pad, cy + b + pad)
    return ConvexDomain(rho, grad, s * min(1.0 / a**2, 1.0 / b**2), box,
                        name=f"ellipse(a={a:g},b={b:g})")


def polynomial_domain(coeffs: dict[tuple[int, int], float],
                      bounding_box: tuple[float, float, float, float],
                      modulus: float = 0.0) -> ConvexDomain:
    """Domain whose rho is the polynomial sum c_ij * x^i * y^j."""
    items = sorted(coeffs.items())

    def rho(x, y):
        out = np.zeros_like(np.asarray(x, float))
        for (i, j), c in items:
            out = out + c * np.asarray(x, float) ** i * np.asarray(y, float) ** j
        return out

    def grad(x, y):
        gx = np.zeros_like(np.asarray(x, float))
        gy = np.zeros_like(np.asarray(x, float))
        for (i, j), c in items:
            if i > 0:
                gx = gx + c * i * np.asarray(x, float) ** (i - 1) * np.asarray(y, float) ** j
            if j > 0:
                gy = gy + c * j * np.asarray(x, float) ** i * np.asarray(y, float) ** (j - 1)
        return gx, gy

    return ConvexDomain(rho, grad, modulus, bounding_box, name="polynomial")


@dataclass(frozen=True)
class NestedDomains:
    """Outer domain Omega containing the closure of the inner domain Omega0.

    ``separation`` is the declared distance dist(Omega0, boundary of Omega).
    An inner domain with ``empty=True`` has no inner nodes (used for
    barrier-only configurations).
    """

    outer: ConvexDomain
    inner: ConvexDomain
    separation: float
    empty_inner: bool = False


def nested_disks(outer_radius: float = 1.0, inner_radius: float = 0.5,
                 margin: float = 0.05, rho_scale: float = 1.0) -> NestedDomains:
    return NestedDomains(disk(outer_radius, margin=margin, rho_scale=rho_scale),
                         disk(inner_radius),
                         separation=outer_radius - inner_radius)


@dataclass(frozen=True, eq=False)
class Grid:
    """Masked uniform lattice with boundary crossings and quadrature weights.

    Immutable after construction; safe to share between threads.  All arrays
    indexed by the dense inside-node index follow row-major lattice order, so
    reductions are deterministic.

    Attributes of shape (8, n_inside) follow the direction table ``DIRS``.
    ``neighbor[d, k]`` is the dense index of the neighbor of node k in
    direction d, or -1 when that neighbor is not inside; in that case
    ``cut[d, k]`` is True, ``theta[d, k]`` in (0, 1] is the fractional arm
    length to the boundary crossing, and ``foot_slot[d, k]`` indexes the foot
    in the global feet arrays.
    """

    domains: NestedDomains
    resolution: int
    spacing: float
    origin: tuple[float, float]
    nx: int
    ny: int
    code: NDArray               # (ny, nx) int8 classification
    inside_ji: NDArray          # (n_inside, 2) lattice (j, i)
    index_of: NDArray           # (ny, nx) dense index or -1
    xy: NDArray                 # (n_inside, 2) node positions
    neighbor: NDArray           # (8, n_inside) int
    cut: NDArray                # (8, n_inside) bool
    theta: NDArray              # (8, n_inside) float
    foot_slot: NDArray          # (8, n_inside) int, -1 where not cut
    feet_xy: NDArray            # (n_feet, 2)
    boundary_projection: dict   # (j, i) ghost lattice node -> (x, y) foot
    rho_inside: NDArray
    rho_feet: NDArray
    is_inner: NDArray           # (n_inside,) bool
    w_omega: NDArray            # cell weights for integrals over Omega
    w_inner: NDArray            # ... over Omega0
    w_annulus: NDArray          # ... over Omega \ Omega0
    collar: NDArray             # (n_inside,) bool: any cut arm

    @property
    def n_inside(self) -> int:
        return self.inside_ji.shape[0]

    @property
    def n_feet(self) -> int:
        return self.feet_xy.shape[0]

    @property
    def is_annulus(self) -> NDArray:
        return ~self.is_inner

    def node_positions(self) -> tuple[NDArray, NDArray]:
        return self.xy[:, 0], self.xy[:, 1]

    def interior_mask(self, depth: int = 1) -> NDArray:
        """Inside nodes whose full (2*depth+1)^2 lattice neighborhood is inside."""
        ins = np.zeros((self.ny + 2 * depth, self.nx + 2 * depth), bool)
        ins[depth:-depth, depth:-depth] = self.code >= ANNULUS
        ok = np.ones((self.ny, self.nx), bool)
        for dj in range(-depth, depth + 1):
            for di in range(-depth, depth + 1):
                ok &= ins[depth + dj:depth + dj + self.ny, depth + di:depth + di + self.nx]
        return ok[self.inside_ji[:, 0], self.inside_ji[:, 1]]

    def inner_core_mask(self, scale: float = 0.8) -> NDArray:
        """Nodes of the compact subset: inner domain shrunk by ``scale`` about
        the centroid of its nodes."""
        if not np.any(self.is_inner):
            return np.zeros(self.n_inside, bool)
        c = self.xy[self.is_inner].mean(axis=0)
        px = c[0] + (self.xy[:, 0] - c[0]) / scale
        py = c[1] + (self.xy[:, 1] - c[1]) / scale
        return self.domains.inner.rho(px, py) < 0.0


@dataclass
class ScalarField:
    """Node-indexed values: one per inside node, one per boundary foot."""

    grid: Grid
    inside: NDArray
    feet: NDArray

    def __post_init__(self):
        self.inside = np.asarray(self.inside, float)
        self.feet = np.asarray(self.feet, float)
        if self.inside.shape != (self.grid.n_inside,):
            raise ValueError("inside values shape mismatch")
        if self.feet.shape != (self.grid.n_feet,):
            raise ValueError("feet values shape mismatch")

    @classmethod
    def from_function(cls, grid: Grid, fn: Callable[[NDArray, NDArray], NDArray]) -> "ScalarField":
        xi, yi = grid.xy[:, 0], grid.xy[:, 1]
        xf, yf = grid.feet_xy[:, 0], grid.feet_xy[:, 1]
        ins = np.asarray(fn(xi, yi), float) + np.zeros(grid.n_inside)
        ft = (np.asarray(fn(xf, yf), float) + np.zeros(grid.n_feet)
              if grid.n_feet else np.zeros(0))
        return cls(grid, ins, ft)

    @classmethod
    def zeros(cls, grid: Grid) -> "ScalarField":
        return cls(grid, np.zeros(grid.n_inside), np.zeros(grid.n_feet))

    def copy(self) -> "ScalarField":
        return ScalarField(self.grid, self.inside.copy(), self.feet.copy())

    def with_inside(self, values: NDArray) -> "ScalarField":
        return ScalarField(self.grid, np.asarray(values, float), self.feet.copy())

    def lattice(self) -> NDArray:
        """(ny, nx) array with NaN at non-inside nodes."""
        out = np.full((self.grid.ny, self.grid.nx), np.nan)
        out[self.grid.inside_ji[:, 0], self.grid.inside_ji[:, 1]] = self.inside
        return out

    def finite(self) -> bool:
        return bool(np.all(np.isfinite(self.inside)) and np.all(np.isfinite(self.feet)))

    def __add__(self, other):
        if isinstance(other, ScalarField):
            return ScalarField(self.grid, self.inside + other.inside, self.feet + other.feet)
        return ScalarField(self.grid, self.inside + other, self.feet + other)

    def __sub__(self, other):
        if isinstance(other, ScalarField):
            return ScalarField(self.grid, self.inside - other.inside, self.feet - other.feet)
        return ScalarField(self.grid, self.inside - other, self.feet - other)

    def __mul__(self, c: float):
        return ScalarField(self.grid, self.inside * c, self.feet * c)

    __rmul__ = __mul__


def _bisect_feet(rho: Callable, p_in: NDArray, p_out: NDArray, iters: int = 60) -> NDArray:
    """Vectorized bisection for the boundary crossing on segments [p_in, p_out].

    rho(p_in) < 0 <= rho(p_out).  60 halvings put the bracket at machine size,
    so |rho(foot)| is far below the spacing^2 contract.
    """
    a = p_in.copy()
    b = p_out.copy()
    for _ in range(iters):
        m = 0.5 * (a + b)
        neg = rho(m[:, 0], m[:, 1]) < 0.0
        a[neg] = m[neg]
        b[~neg] = m[~neg]
    return 0.5 * (a + b)


def build_grid(domains: NestedDomains, resolution: int) -> Grid:
    """Discretize the nested domains on a resolution x resolution lattice.

    The lattice spans the outer bounding box.  Boundary crossings are found by
    bisection along lattice lines (axis and diagonal), giving the foot points
    used by shortened difference stencils and by Dirichlet data.
    """
    if resolution < 8:
        raise GridConstructionError("resolution must be at least 8")
    xmin, xmax, ymin, ymax = domains.outer.bounding_box
    if not all(map(math.isfinite, (xmin, xmax, ymin, ymax))):
        raise GridConstructionError("outer bounding box must be finite")
    nx = ny = int(resolution)
    # Square cells: use the larger extent for both axes so spacing is isotropic.
    extent = max(xmax - xmin, ymax - ymin)
    h = extent / (resolution - 1)
    cx, cy = 0.5 * (xmin + xmax), 0.5 * (ymin + ymax)
    x0, y0 = cx - 0.5 * extent, cy - 0.5 * extent

    xs = x0 + h * np.arange(nx)
    ys = y0 + h * np.arange(ny)
    X, Y = np.meshgrid(xs, ys)            # shape (ny, nx), [j, i]
    rho = domains.outer.rho(X, Y)
    inside = rho < 0.0
    if inside[0, :].any() or inside[-1, :].any() or inside[:, 0].any() or inside[:, -1].any():
        raise GridConstructionError("outer domain touches the lattice edge; "
                                    "enlarge the bounding box margin")

    code = np.full((ny, nx), EXTERIOR, np.int8)
    rho0 = domains.inner.rho(X, Y)
    inner = inside & (rho0 < 0.0) & (not domains.empty_inner)
    code[inside] = ANNULUS
    code[inner] = INNER
    if not domains.empty_inner and not inner.any():
        raise GridConstructionError("inner domain contains no node at this resolution")

    # Ghost layer: outside nodes with an inside 8-neighbor.
    ghost = np.zeros_like(inside)
    for di, dj in DIRS:
        ghost |= np.roll(np.roll(inside, dj, axis=0), di, axis=1)
    ghost &= ~inside
    code[ghost] = BOUNDARY

    jj, ii = np.nonzero(inside)
    order = np.lexsort((ii, jj))          # row-major, deterministic
    inside_ji = np.stack([jj[order], ii[order]], axis=1)
    n_in = inside_ji.shape[0]
    index_of = np.full((ny, nx), -1, np.int64)
    index_of[inside_ji[:, 0], inside_ji[:, 1]] = np.arange(n_in)
    xy = np.stack([xs[inside_ji[:, 1]], ys[inside_ji[:, 0]]], axis=1)

    neighbor = np.full((8, n_in), -1, np.int64)
    cut = np.zeros((8, n_in), bool)
    theta = np.ones((8, n_in))
    foot_slot = np.full((8, n_in), -1, np.int64)
    feet: list[NDArray] = []
    theta_min = 1e-3

    slot = 0
    for d, (di, dj) in enumerate(DIRS):
        j2 = inside_ji[:, 0] + dj
        i2 = inside_ji[:, 1] + di
        nb = index_of[j2, i2]
        neighbor[d] = nb
        cut_d = nb < 0
        cut[d] = cut_d
        if not cut_d.any():
            continue
        p_in = xy[cut_d]
        p_out = p_in + h * np.array([di, dj], float)
        rv = domains.outer.rho(p_out[:, 0], p_out[:, 1])
        if np.any(rv < 0.0):
            raise GridConstructionError("no sign change along a cut lattice line "
                                        "(degenerate geometry)")
        f = _bisect_feet(domains.outer.rho, p_in, p_out)
        th = np.hypot(f[:, 0] - p_in[:, 0], f[:, 1] - p_in[:, 1]) / (h * math.hypot(di, dj))
        th = np.maximum(th, theta_min)
        theta[d, cut_d] = th
        foot_slot[d, cut_d] = slot + np.arange(len(f))
        slot += len(f)
        feet.append(f)
    feet_xy = np.concatenate(feet, axis=0) if feet else np.zeros((0, 2))

    # Representative projection per ghost node: the foot of the first cut arm
    # pointing at it, in direction-table order.
    boundary_projection: dict[tuple[int, int], tuple[float, float]] = {}
    for d, (di, dj) in enumerate(DIRS):
        ks = np.nonzero(cut[d])[0]
        for k in ks:
            gj = int(inside_ji[k, 0] + dj)
            gi = int(inside_ji[k, 1] + di)
            if (gj, gi) not in boundary_projection:
                fx, fy = feet_xy[foot_slot[d, k]]
                boundary_projection[(gj, gi)] = (float(fx), float(fy))

    rho_in = rho[inside_ji[:, 0], inside_ji[:, 1]]
    rho_ft = (domains.outer.rho(feet_xy[:, 0], feet_xy[:, 1])
              if len(feet_xy) else np.zeros(0))
    is_inner_arr = code[inside_ji[:, 0], inside_ji[:, 1]] == INNER

    def covered_fraction(dom: ConvexDomain) -> NDArray:
        r = dom.rho(xy[:, 0], xy[:, 1])
        gx, gy = dom.grad_rho(xy[:, 0], xy[:, 1])
        g = np.maximum(np.hypot(gx, gy), 1e-14)
        return np.clip(0.5 - (r / g) / h, 0.0, 1.0)

    frac_om = covered_fraction(domains.outer)
    frac_in = covered_fraction(domains.inner) if not domains.empty_inner else np.zeros(n_in)
    w_omega = h * h * frac_om
    w_inner = h * h * np.minimum(frac_om, frac_in)
    w_annulus = w_omega - w_inner

    collar = cut.any(axis=0)

    return Grid(domains=domains, resolution=resolution, spacing=h, origin=(x0, y0),
                nx=nx, ny=ny, code=code, inside_ji=inside_ji, index_of=index_of,
                xy=xy, neighbor=neighbor, cut=cut, theta=theta, foot_slot=foot_slot,
                feet_xy=feet_xy, boundary_projection=boundary_projection,
                rho_inside=rho_in, rho_feet=rho_ft, is_inner=is_inner_arr,
                w_omega=w_omega, w_inner=w_inner, w_annulus=w_annulus, collar=collar)


def mu_epsilon(phi: ScalarField, domains: NestedDomains, eps: float, n: int = 2) -> ScalarField:
    """Convexifying barrier mu = phi + eps^(1/(3 n^2)) (exp(rho) - 1).

    Equal to phi on the outer boundary (rho = 0) and strictly below phi inside.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    g = phi.grid
    c = eps ** (1.0 / (3.0 * n * n))
    ins = phi.inside + c * (np.exp(g.rho_inside) - 1.0)
    ft = phi.feet + c * (np.exp(g.rho_feet) - 1.0)
    return ScalarField(g, ins, ft)


def extend_boundary_data(gfun: Callable[[NDArray, NDArray], NDArray], grid: Grid) -> ScalarField:
    """Field holding g at the boundary feet, zero at inside nodes."""
    ft = (np.asarray(gfun(grid.feet_xy[:, 0], grid.feet_xy[:, 1]), float)
          + np.zeros(grid.n_feet)) if grid.n_feet else np.zeros(0)
    return ScalarField(grid, np.zeros(grid.n_inside), ft)


def interp_at(f: ScalarField, points: NDArray) -> NDArray:
    """Bilinear interpolation at arbitrary points; NaN where the cell has no
    usable inside corners."""
    g = f.grid
    lat = f.lattice()
    x0, y0 = g.origin
    h = g.spacing
    pts = np.asarray(points, float)
    fx = (pts[:, 0] - x0) / h
    fy = (pts[:, 1] - y0) / h
    i0 = np.clip(np.floor(fx).astype(int), 0, g.nx - 2)
    j0 = np.clip(np.floor(fy).astype(int), 0, g.ny - 2)
    tx = fx - i0
    ty = fy - j0
    c00 = lat[j0, i0]
    c10 = lat[j0, i0 + 1]
    c01 = lat[j0 + 1, i0]
    c11 = lat[j0 + 1, i0 + 1]
    out = ((1 - tx) * (1 - ty) * c00 + tx * (1 - ty) * c10
           + (1 - tx) * ty * c01 + tx * ty * c11)
    # Cells with some exterior corners: fall back to the nearest finite corner.
    bad = ~np.isfinite(out)
    if bad.any():
        stacked = np.stack([c00, c10, c01, c11])
        dist = np.stack([
            tx**2 + ty**2, (1 - tx)**2 + ty**2,
            tx**2 + (1 - ty)**2, (1 - tx)**2 + (1 - ty)**2,
        ])
        dist[~np.isfinite(stacked)] = np.inf
        pick = np.argmin(dist, axis=0)
        nearest = stacked[pick, np.arange(len(pts))]
        out[bad] = nearest[bad]
    return out
