"""Closed-form pieces: the single-sphere dipole field, the Dirichlet Green's
function of a ball, and a method-of-reflections solver for many spheres.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .domain import DomainSpec, InclusionConfiguration
from .expr import ScalarExpr
from .grid import (Grid, GridField, gradient, sphere_normal_derivative, sphere_quadrature)
from .solver import solve_background, solve_point_source, sphere_edge_fluxes

INV_4PI = 1.0 / (4.0 * math.pi)


class SingularEvaluationError(ValueError):
    pass


class UnsupportedDomainError(ValueError):
    pass


class ReflectionDivergenceError(RuntimeError):
    pass


class InclusionOutsideDomainError(ValueError):
    pass


# -- dipole ----------------------------------------------------------------------

def ball_quadrature(n_radial: int = 12, n_angular: int = 400):
    """Nodes and weights on the unit ball (Gauss-Legendre in r^3-weighted radius)."""
    x, w = np.polynomial.legendre.leggauss(n_radial)
    r = 0.5 * (x + 1.0)
    wr = 0.5 * w * r**2
    s, ws = sphere_quadrature(n_angular)
    pts = (r[:, None, None] * s[None]).reshape(-1, 3)
    wts = (wr[:, None] * ws[None]).ravel()
    return pts, wts


def _conductivity_callable(conductivity):
    if isinstance(conductivity, ScalarExpr):
        return conductivity
    return ScalarExpr(conductivity)


def dipole_constant(domain: DomainSpec, eta, epsilon: float, background_gradient,
                    n_radial: int = 12, n_angular: int = 400) -> float:
    """Inhomogeneity constant ``C_a`` making the dipole field flux-free.

    ``C_a = (2/eps) ∫_B grad a · g dx / ∫_{∂B} a ds`` with ``g`` the
    background gradient at the center, both integrals by quadrature.
    """
    eta = np.asarray(eta, dtype=float)
    if domain.distance_to_boundary(eta[None])[0] < epsilon:
        raise InclusionOutsideDomainError("ball B(eta, epsilon) is not inside the domain")
    a = _conductivity_callable(domain.conductivity)
    if a.is_constant:
        return 0.0
    g = np.asarray(background_gradient, dtype=float)
    pts, wts = ball_quadrature(n_radial, n_angular)
    vol = float(np.sum(wts * (a.gradient(eta + epsilon * pts) @ g))) * epsilon**3
    s, ws = sphere_quadrature(n_angular)
    surf = float(np.sum(ws * a(eta + epsilon * s))) * epsilon**2
    return 2.0 / epsilon * vol / surf


@dataclass
class DipoleParams:
    """Single-sphere dipole response to a locally uniform background gradient."""

    center: np.ndarray
    radius: float
    background_gradient: np.ndarray
    Ca: float = 0.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        self.background_gradient = np.asarray(self.background_gradient, dtype=float)

    def __call__(self, x, branch: str = "auto") -> np.ndarray:
        return dipole_field(self, x, branch)

    def gradient(self, x) -> np.ndarray:
        """Gradient of the field (exterior branch for ``|x - eta| >= eps``)."""
        x = np.asarray(x, dtype=float)
        d = x - self.center
        r = np.linalg.norm(d, axis=-1)
        g = self.background_gradient
        eps = self.radius
        ext = r >= eps * (1 - 1e-12)
        rs = np.where(ext, r, 1.0)[..., None]
        dg = (d @ g)[..., None]
        e3 = eps**3
        grad_ext = -e3 * (g / rs**3 - 3 * dg * d / rs**5) - self.Ca * e3 * d / rs**3
        grad_int = np.broadcast_to(-g, d.shape)
        return np.where(ext[..., None], grad_ext, grad_int)


def dipole_field(params: DipoleParams, x, branch: str = "auto") -> np.ndarray:
    """Evaluate the dipole field.

    Outside the sphere: ``-(x-eta)·g eps^3/r^3 + C_a eps^3/r``.
    Inside: ``-(x-eta)·g + C_a eps^2``.  ``branch`` forces one of
    ``"exterior"``/``"interior"``.
    """
    x = np.asarray(x, dtype=float)
    d = x - params.center
    r = np.linalg.norm(d, axis=-1)
    eps = params.radius
    dg = d @ params.background_gradient
    if branch == "interior":
        return -dg + params.Ca * eps**2
    if branch == "exterior":
        if np.any(r == 0):
            raise SingularEvaluationError("exterior branch evaluated at the sphere center")
        return (-dg / r**3 + params.Ca / r) * eps**3
    if branch != "auto":
        raise ValueError(f"unknown branch {branch!r}")
    ext = r >= eps
    rs = np.where(ext, r, 1.0)
    return np.where(ext, (-dg / rs**3 + params.Ca / rs) * eps**3, -dg + params.Ca * eps**2)


def make_dipole(domain: DomainSpec, eta, epsilon: float, background_gradient) -> DipoleParams:
    ca = dipole_constant(domain, eta, epsilon, background_gradient)
    return DipoleParams(eta, epsilon, background_gradient, ca)


# -- Green's function of a ball ---------------------------------------------------

@dataclass(frozen=True)
class BallGreen:
    """Dirichlet Green's function of ``-Δ`` in a ball (Kelvin image)."""

    radius: float = 1.0
    center: tuple = (0.0, 0.0, 0.0)

    def _rel(self, x, xi):
        c = np.asarray(self.center, dtype=float)
        return np.asarray(x, dtype=float) - c, np.asarray(xi, dtype=float) - c

    def __call__(self, x, xi) -> np.ndarray:
        return greens_function_ball(self, x, xi)

    def image_q(self, x, xi):
        R = self.radius
        x2 = np.sum(x * x, axis=-1)
        s2 = np.sum(xi * xi, axis=-1)
        return s2 * x2 - 2 * R**2 * np.sum(x * xi, axis=-1) + R**4

    def gradient_x(self, x, xi) -> np.ndarray:
        """``∇_x G(x, xi)``."""
        x, xi = self._rel(x, xi)
        R = self.radius
        d = x - xi
        r = np.linalg.norm(d, axis=-1)[..., None]
        Q = self.image_q(x, xi)[..., None]
        s2 = np.sum(xi * xi, axis=-1)[..., None]
        dQ = 2 * s2 * x - 2 * R**2 * xi
        return INV_4PI * (-d / r**3 + 0.5 * R * Q**-1.5 * dQ)


def greens_function_ball(green: BallGreen, x, xi) -> np.ndarray:
    """``(1/4π)(1/|x-xi| - R/(|xi| |x - R² xi/|xi|²|))`` written without the division by ``|xi|``."""
    x, xi = green._rel(x, xi)
    r = np.linalg.norm(x - xi, axis=-1)
    if np.any(r == 0):
        raise SingularEvaluationError("coincident points")
    Q = green.image_q(x, xi)
    return INV_4PI * (1.0 / r - green.radius / np.sqrt(Q))


# -- discrete Green columns and decay bounds --------------------------------------------

@dataclass
class GreenBoundReport:
    order: int
    sup_value: float
    pair_count: int
    h: float

    def row(self) -> list:
        return [self.order, self.sup_value, self.pair_count, self.h]


def sample_green_pairs(domain: DomainSpec, n_pairs: int, n_sources: int, min_sep: float,
                       margin: float, seed: int, snap=None):
    """Source points and field points at log-uniform distances from them.

    ``snap`` optionally moves each source (e.g. onto the grid node carrying
    the discrete delta) before its field points are drawn.
    """
    rng = np.random.Generator(np.random.Philox(key=seed))
    lo, hi = domain.bounds
    mid = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    sources = []
    while len(sources) < n_sources:
        p = mid + 0.5 * half * (2 * rng.random(3) - 1)
        if domain.distance_to_boundary(p[None])[0] > 0.25 * half.min():
            sources.append(p if snap is None else snap(p))
    sources = np.array(sources)
    xs, owner = [], []
    per = int(math.ceil(n_pairs / n_sources))
    rmax = 2 * half.max()
    for k, s in enumerate(sources):
        got = 0
        while got < per and len(xs) < n_pairs:
            u = rng.standard_normal(3)
            u /= np.linalg.norm(u)
            r = min_sep * (rmax / min_sep) ** rng.random()
            x = s + r * u
            if domain.distance_to_boundary(x[None])[0] > margin:
                xs.append(x)
                owner.append(k)
                got += 1
    return sources, np.array(xs), np.array(owner)


def _hessian_max(field: GridField) -> GridField:
    gr = gradient(field)
    out = np.zeros(field.grid.shape)
    for i in range(3):
        hi = gradient(GridField(field.grid, gr.values[..., i], None))
        out = np.maximum(out, np.abs(hi.values).max(axis=-1))
    return GridField(field.grid, out, None)


def greens_bound_check(domain: DomainSpec, h: float, sample_pairs: int = 500,
                       derivative_order: int | tuple = 0, n_sources: int = 4, seed: int = 0,
                       min_sep: float | None = None, margin: float | None = None,
                       backend=None) -> list[GreenBoundReport]:
    """Empirical decay constants of the discrete Green's function.

    Solves ``L G = delta_xi`` for a few sampled sources and reports, for each
    requested derivative order ``k``, the sup over sampled pairs of
    ``max_|beta|=k |D^beta G(x, xi)| · |x - xi|^(1+k)``.  Pairs closer than
    ``min_sep`` (default ``4 h``) are excluded; field points keep ``margin``
    (default ``3 h``) clearance from the boundary so the differences stay
    interior.  Fix both in physical units to compare resolutions on the same
    pair sample.
    """
    orders = (derivative_order,) if np.ndim(derivative_order) == 0 else tuple(derivative_order)
    if any(o not in (0, 1, 2) for o in orders):
        raise ValueError("derivative order must be 0, 1 or 2")
    min_sep = 4 * h if min_sep is None else min_sep
    margin = 3 * h if margin is None else max(margin, 3 * h)
    grid = Grid(domain, h)

    def snap(p):
        return grid.points(np.ravel_multi_index(grid.index_of(p), grid.shape))

    sources, xs, owner = sample_green_pairs(domain, sample_pairs, n_sources, min_sep,
                                            margin, seed, snap)
    sup = {o: 0.0 for o in orders}
    count = 0
    for k, s in enumerate(sources):
        col = solve_point_source(domain, h, s, backend=backend, grid=grid)
        snapped = grid.points(np.ravel_multi_index(grid.index_of(s), grid.shape))
        sel = owner == k
        x = xs[sel]
        r = np.linalg.norm(x - snapped, axis=-1)
        ok = r >= min_sep
        x, r = x[ok], r[ok]
        count += len(x)
        for o in orders:
            if o == 0:
                v = np.abs(col.interpolate(x))
            elif o == 1:
                gr = gradient(col)
                v = np.abs(gr.interpolate(x)).max(axis=-1)
            else:
                v = _hessian_max(col).interpolate(x)
            sup[o] = max(sup[o], float(np.max(v * r ** (1 + o))) if len(v) else 0.0)
    return [GreenBoundReport(o, sup[o], count, h) for o in orders]


# -- integral representation ----------------------------------------------------------

def integral_representation(domain: DomainSpec, solve, config: InclusionConfiguration,
                            green: BallGreen, x, background=None, method: str = "edges",
                            n_points: int | None = None):
    """Rebuild the potential at ``x`` from the inclusion fluxes.

    ``phi(x) = phi_bar(x) - sum_n ∫_{∂B_n} G(x, xi) a ∂phi/∂r ds`` with ``r``
    the radial direction of each sphere.  ``method="edges"`` uses the
    discrete fluxes of the merged system at the edge crossings;
    ``"quadrature"`` uses interpolated normal derivatives on a surface
    quadrature.  The edge method needs a solve run with ``keep_assembly=True``.  ``background`` is a callable ``phi_bar`` (default: the
    boundary data when it is harmonic, otherwise a background solve on the
    solution's grid).
    """
    a = domain.conductivity
    if domain.shape != "ball" or not a.is_constant:
        raise UnsupportedDomainError("integral representation needs a ball with constant conductivity")
    if abs(domain.radius - green.radius) > 1e-12 or tuple(domain.center) != tuple(green.center):
        raise UnsupportedDomainError("Green's function does not match the domain")
    a0 = float(a(np.zeros((1, 3)))[0])
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if background is None:
        if domain.boundary_data.is_harmonic:
            background = domain.boundary_data
        else:
            background = solve_background(domain, solve.field.grid.h, grid=solve.field.grid).field.interpolate
    out = np.asarray(background(x), dtype=float).copy()
    if not len(config):
        return out
    if method == "edges":
        for xi, f in sphere_edge_fluxes(solve, config.centers, config.epsilon):
            out -= (greens_function_ball(green, x[:, None, :], xi[None]) * f[None]).sum(axis=1)
        return out
    if method != "quadrature":
        raise ValueError(f"unknown method {method!r}")
    for c, C in zip(config.centers, solve.inclusion_constants):
        _, w, xi, dn = sphere_normal_derivative(solve.field, c, config.epsilon, n_points,
                                                surface_value=C)
        G = greens_function_ball(green, x[:, None, :], xi[None])
        out -= a0 * config.epsilon**2 * (G * (w * dn)[None]).sum(axis=1)
    return out


# -- method of reflections --------------------------------------------------------------

def _image_potential(green: BallGreen, q, eta, x):
    """Image part of the dipole ``q`` at ``eta`` evaluated at ``x`` (rows)."""
    c = np.asarray(green.center, dtype=float)
    x = np.asarray(x, dtype=float) - c
    xi = np.asarray(eta, dtype=float) - c
    R = green.radius
    Q = green.image_q(x, xi)
    x2 = np.sum(x * x, axis=-1)
    dQ = 2 * x2[..., None] * xi - 2 * R**2 * x
    return 0.5 * R * Q**-1.5 * (dQ @ q)


def _image_gradient(green: BallGreen, q, eta, x):
    c = np.asarray(green.center, dtype=float)
    x = np.asarray(x, dtype=float) - c
    xi = np.asarray(eta, dtype=float) - c
    R = green.radius
    Q = green.image_q(x, xi)[..., None]
    s2 = np.sum(xi * xi, axis=-1)
    x2 = np.sum(x * x, axis=-1)[..., None]
    dQx = 2 * s2 * x - 2 * R**2 * xi
    qxi = float(np.dot(q, xi))
    qx = (x @ q)[..., None]
    inner = x2 * qxi - R**2 * qx
    return R * (-1.5 * Q**-2.5 * dQx * inner + Q**-1.5 * (2 * x * qxi - R**2 * q))


def _free_dipole(q, eta, x):
    d = np.asarray(x, dtype=float) - eta
    r = np.linalg.norm(d, axis=-1)
    return (d @ q) / r**3


def _free_dipole_gradient(q, eta, x):
    d = np.asarray(x, dtype=float) - eta
    r = np.linalg.norm(d, axis=-1)[..., None]
    return q / r**3 - 3 * (d @ q)[..., None] * d / r**5


class ReflectionSolution:
    """Superposed dipoles (with ball images) from :func:`reflection_solve`."""

    def __init__(self, green, config, background, moments, constants, sweeps):
        self.green = green
        self.config = config
        self.background = background
        self.moments = moments
        self.constants = constants
        self.sweeps = sweeps

    def disturbance(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1])
        for q, eta in zip(self.moments, self.config.centers):
            out += _free_dipole(q, eta, x) + _image_potential(self.green, q, eta, x)
        return out

    def disturbance_gradient(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape)
        for q, eta in zip(self.moments, self.config.centers):
            out += _free_dipole_gradient(q, eta, x) + _image_gradient(self.green, q, eta, x)
        return out

    def __call__(self, x) -> np.ndarray:
        """Potential at exterior points; inside a sphere its constant."""
        x = np.asarray(x, dtype=float)
        out = np.asarray(self.background(x), dtype=float) + self.disturbance(x)
        for k, eta in enumerate(self.config.centers):
            inside = np.linalg.norm(x - eta, axis=-1) < self.config.epsilon
            out = np.where(inside, self.constants[k], out)
        return out

    def gradient(self, x) -> np.ndarray:
        return self.background.gradient(x) + self.disturbance_gradient(x)

    def to_json(self) -> str:
        return json.dumps({"moments": self.moments.tolist(),
                           "constants": [float(c) for c in self.constants],
                           "sweeps": self.sweeps})


def reflection_solve(green: BallGreen, config: InclusionConfiguration, background,
                     max_sweeps: int = 200, tol: float = 1e-12,
                     check: bool = True) -> ReflectionSolution:
    """Dipole-order method of reflections in a ball with unit conductivity.

    Each sphere's moment is ``-eps^3`` times the gradient at its center of
    the background plus all other dipoles plus its own boundary image.
    ``background`` is a harmonic potential with ``__call__`` and
    ``gradient`` (a :class:`ScalarExpr` works).  ``check=False`` skips the
    clearance and separation preconditions; the sweep then fails only if the
    iteration itself diverges.
    """
    if not isinstance(background, ScalarExpr) and not hasattr(background, "gradient"):
        background = ScalarExpr(background)
    eps = config.epsilon
    centers = config.centers
    n = len(centers)
    c0 = np.asarray(green.center, dtype=float)
    if n and check:
        dist = green.radius - np.linalg.norm(centers - c0, axis=-1)
        if (dist < 2 * eps * (1 - 1e-12)).any():
            raise ReflectionDivergenceError("sphere closer than 2 eps to the outer boundary")
        if n > 1:
            dd = np.linalg.norm(centers[:, None] - centers[None], axis=-1)
            dd[np.diag_indices(n)] = np.inf
            if dd.min() < 4 * eps * (1 - 1e-12):
                raise ReflectionDivergenceError("sphere separation below 4 eps")
    g0 = np.asarray(background.gradient(centers), dtype=float).reshape(n, 3)
    e3 = eps**3
    q = -e3 * g0
    sweeps = 0
    scale = max(float(np.abs(q).max()) if n else 0.0, 1e-300)
    while n:
        new = np.empty_like(q)
        for k in range(n):
            grad = g0[k].copy()
            for m in range(n):
                if m != k:
                    grad += _free_dipole_gradient(q[m], centers[m], centers[k])
                grad += _image_gradient(green, q[m], centers[m], centers[k])
            new[k] = -e3 * grad
        inc = float(np.abs(new - q).max())
        q = new
        sweeps += 1
        if inc <= tol * scale or scale <= 1e-300:
            break
        if sweeps >= max_sweeps or not np.isfinite(inc):
            raise ReflectionDivergenceError(f"no convergence after {sweeps} sweeps (increment {inc:.3g})")
    consts = np.zeros(n)
    for k in range(n):
        v = float(np.asarray(background(centers[k][None]))[0])
        for m in range(n):
            if m != k:
                v += float(_free_dipole(q[m], centers[m], centers[k][None])[0])
            v += float(_image_potential(green, q[m], centers[m], centers[k][None])[0])
        consts[k] = v
    return ReflectionSolution(green, config, background, q, consts, sweeps)
