"""Uniform structured grids over the domain and scalar fields sampled on them.

Nodes sit on a lattice of spacing ``h`` centered on the domain's bounding box
(cell centers when the box extent is a multiple of ``h``), with one layer of
padding so that every interior node has six in-range neighbours.  A grid
edge from an interior node to an exterior one is a *cut face*; the fraction
``theta`` of the edge lying inside the domain is stored with the boundary
point so Dirichlet data can be imposed at the true boundary location.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.ndimage import map_coordinates

from .domain import DomainSpec

AXES = (0, 1, 2)
_CHUNK = 1 << 20


class GridError(ValueError):
    pass


class EmptyRegionError(GridError):
    pass


class SphereOutsideDomainError(GridError):
    pass


@dataclass
class CutFaces:
    """Grid edges leaving the domain: ``node`` (flat index), ``axis``, ``sign``,
    ``theta`` (inside fraction of the edge) and the boundary ``point``."""

    node: np.ndarray
    axis: np.ndarray
    sign: np.ndarray
    theta: np.ndarray
    point: np.ndarray

    def __len__(self) -> int:
        return len(self.node)


class Grid:
    """Uniform lattice covering ``domain`` with spacing ``h``."""

    def __init__(self, domain: DomainSpec, h: float, pad: int = 1, theta_min: float = 1e-3):
        if h <= 0:
            raise GridError("h must be positive")
        self.domain = domain
        self.h = float(h)
        lo, hi = domain.bounds
        ext = hi - lo
        n = np.ceil(ext / h - 1e-9).astype(int)
        if (n < 3).any():
            raise GridError(f"degenerate grid: {tuple(n)} nodes per axis (need >= 3)")
        mid = 0.5 * (lo + hi)
        self.origin = mid - 0.5 * (n - 1) * h - pad * h
        self.shape = tuple(int(v) for v in n + 2 * pad)
        self.strides = (self.shape[1] * self.shape[2], self.shape[2], 1)
        self.theta_min = theta_min
        self.inside = self._classify()
        if not self.inside.any():
            raise GridError("no grid node lies inside the domain")
        self.cuts = self._cut_faces()

    # -- lattice helpers --------------------------------------------------
    def axis_coords(self, axis: int) -> np.ndarray:
        return self.origin[axis] + self.h * np.arange(self.shape[axis])

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def points(self, flat: np.ndarray) -> np.ndarray:
        """Coordinates of nodes given by flat indices."""
        ijk = np.unravel_index(np.asarray(flat), self.shape)
        return np.stack([self.origin[a] + self.h * ijk[a] for a in AXES], axis=-1)

    def index_of(self, point) -> tuple[int, int, int]:
        """Nearest lattice node to ``point``."""
        ijk = np.rint((np.asarray(point, dtype=float) - self.origin) / self.h).astype(int)
        return tuple(int(v) for v in ijk)

    def _classify(self) -> np.ndarray:
        x, y, z = (self.axis_coords(a) for a in AXES)
        dom = self.domain
        if dom.shape == "ball":
            c = dom.center
            r2 = ((x - c[0]) ** 2)[:, None, None] + ((y - c[1]) ** 2)[None, :, None] \
                + ((z - c[2]) ** 2)[None, None, :]
            return r2 < dom.radius**2
        lo, hi = dom.bounds
        mx = (x > lo[0]) & (x < hi[0])
        my = (y > lo[1]) & (y < hi[1])
        mz = (z > lo[2]) & (z < hi[2])
        return mx[:, None, None] & my[None, :, None] & mz[None, None, :]

    def _cut_faces(self) -> CutFaces:
        nodes, axes, signs, thetas, pts = [], [], [], [], []
        ins = self.inside
        for a in AXES:
            for s in (1, -1):
                nb = np.roll(ins, -s, axis=a)
                flat = np.flatnonzero((ins & ~nb).ravel())
                if not len(flat):
                    continue
                p = self.points(flat)
                q = p.copy()
                q[:, a] += s * self.h
                t = self.domain.segment_exit(p, q)
                t = np.maximum(t, self.theta_min)
                nodes.append(flat)
                axes.append(np.full(len(flat), a, dtype=np.int8))
                signs.append(np.full(len(flat), s, dtype=np.int8))
                thetas.append(t)
                pts.append(p + t[:, None] * (q - p))
        return CutFaces(np.concatenate(nodes), np.concatenate(axes), np.concatenate(signs),
                        np.concatenate(thetas), np.concatenate(pts))

    @cached_property
    def inside_flat(self) -> np.ndarray:
        return np.flatnonzero(self.inside.ravel())

    @cached_property
    def volume_fraction(self) -> np.ndarray:
        """Fraction of each node's cell inside the domain (4^3 sub-samples near the boundary)."""
        w = self.inside.astype(float)
        flat = self.inside_flat
        pts = self.points(flat)
        d = self.domain.distance_to_boundary(pts)
        near = flat[d < 0.5 * math.sqrt(3) * self.h]
        if len(near):
            off = (np.arange(4) + 0.5) / 4 - 0.5
            sub = np.stack(np.meshgrid(off, off, off, indexing="ij"), -1).reshape(-1, 3) * self.h
            for start in range(0, len(near), 4096):
                blk = near[start:start + 4096]
                p = self.points(blk)[:, None, :] + sub[None]
                frac = self.domain.contains(p.reshape(-1, 3)).reshape(len(blk), -1).mean(axis=1)
                w.ravel()[blk] = frac
        return w

    def same_as(self, other: "Grid") -> bool:
        return other is self or (
            self.shape == other.shape and self.h == other.h
            and np.array_equal(self.origin, other.origin) and self.domain == other.domain)

    def evaluate(self, func, flat: np.ndarray | None = None) -> np.ndarray:
        """Evaluate ``func(points)`` at the nodes given by ``flat`` (default: interior)."""
        flat = self.inside_flat if flat is None else flat
        out = np.empty(len(flat))
        for start in range(0, len(flat), _CHUNK):
            blk = flat[start:start + _CHUNK]
            out[start:start + len(blk)] = func(self.points(blk))
        return out


class GridField:
    """Scalar (or vector, trailing axis 3) field on a grid.

    ``values`` has the grid shape and is zero outside the domain.  ``trace``
    holds the field's value at each cut-face boundary point (``None`` for
    vector fields).
    """

    def __init__(self, grid: Grid, values: np.ndarray, trace: np.ndarray | None = None):
        self.grid = grid
        self.values = values
        self.trace = trace
        if values.shape[:3] != grid.shape:
            raise GridError("values do not match grid shape")

    @classmethod
    def from_function(cls, grid: Grid, func) -> "GridField":
        vals = np.zeros(grid.shape)
        vals.ravel()[grid.inside_flat] = grid.evaluate(func)
        trace = np.asarray(func(grid.cuts.point), dtype=float) if len(grid.cuts) else np.zeros(0)
        return cls(grid, vals, trace)

    @classmethod
    def zeros(cls, grid: Grid) -> "GridField":
        return cls(grid, np.zeros(grid.shape), np.zeros(len(grid.cuts)))

    @property
    def interior_mask(self) -> np.ndarray:
        return self.grid.inside

    @property
    def is_vector(self) -> bool:
        return self.values.ndim == 4

    def copy(self) -> "GridField":
        return GridField(self.grid, self.values.copy(),
                         None if self.trace is None else self.trace.copy())

    def __add__(self, other):
        return combine([self, other], [1.0, 1.0])

    def __sub__(self, other):
        return combine([self, other], [1.0, -1.0])

    def __mul__(self, alpha: float):
        return combine([self], [float(alpha)])

    __rmul__ = __mul__

    def __neg__(self):
        return combine([self], [-1.0])

    def interpolate(self, points) -> np.ndarray:
        """Trilinear interpolation at arbitrary points."""
        p = np.asarray(points, dtype=float)
        coords = ((p.reshape(-1, 3) - self.grid.origin) / self.grid.h).T
        if self.is_vector:
            out = np.stack([map_coordinates(self.values[..., i], coords, order=1, mode="nearest")
                            for i in range(self.values.shape[-1])], axis=-1)
            return out.reshape(p.shape[:-1] + (self.values.shape[-1],))
        out = map_coordinates(self.values, coords, order=1, mode="nearest")
        return out.reshape(p.shape[:-1])

    def to_text(self, path) -> None:
        """Plain-text dump: header ``dims nx ny nz h x0 y0 z0``, then x-fastest values."""
        g = self.grid
        with open(path, "w") as fh:
            fh.write("dims {} {} {} {!r} {!r} {!r} {!r}\n".format(*g.shape, g.h, *g.origin.tolist()))
            np.savetxt(fh, self.values.ravel(order="F"), fmt="%.17g")

    def probe_csv(self, path, start, direction, s_values) -> None:
        d = np.asarray(direction, dtype=float)
        d = d / np.linalg.norm(d)
        s = np.asarray(s_values, dtype=float)
        pts = np.asarray(start, dtype=float) + s[:, None] * d
        vals = self.interpolate(pts)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["s", "x", "y", "z", "value"])
            for si, p, v in zip(s, pts, vals):
                w.writerow([repr(float(si)), *map(lambda t: repr(float(t)), p), repr(float(v))])


def read_field_text(path) -> tuple[tuple[int, int, int], float, np.ndarray, np.ndarray]:
    """Inverse of :meth:`GridField.to_text`: returns (shape, h, origin, values)."""
    with open(path) as fh:
        head = fh.readline().split()
        if head[0] != "dims":
            raise GridError("not a field dump")
        shape = tuple(int(v) for v in head[1:4])
        h = float(head[4])
        origin = np.array([float(v) for v in head[5:8]])
        vals = np.loadtxt(fh).reshape(shape, order="F")
    return shape, h, origin, vals


@dataclass
class NormReport:
    l2: float
    h1_seminorm: float
    h1: float
    linf: float


def _check_same(fields):
    g = fields[0].grid
    for f in fields[1:]:
        if not g.same_as(f.grid):
            raise GridError("grid mismatch")
    return g


def combine(fields, weights) -> GridField:
    """Pointwise weighted sum of fields on a common grid."""
    fields = list(fields)
    weights = [float(w) for w in weights]
    if not fields or len(fields) != len(weights):
        raise GridError("need one weight per field")
    g = _check_same(fields)
    vals = np.zeros_like(fields[0].values)
    has_trace = all(f.trace is not None for f in fields)
    trace = np.zeros(len(g.cuts)) if has_trace else None
    for f, w in zip(fields, weights):
        vals += w * f.values
        if has_trace:
            trace += w * f.trace
    return GridField(g, vals, trace)


def gradient(field: GridField) -> GridField:
    """Second-order finite-difference gradient on the interior mask.

    Central differences where both neighbours are interior, second-order
    one-sided differences where only one side has two interior neighbours,
    first-order otherwise.
    """
    g = field.grid
    if min(n - 2 for n in g.shape) < 3:
        raise GridError("degenerate grid")
    u = field.values
    m = g.inside
    h = g.h
    out = np.zeros(g.shape + (3,))
    for a in AXES:
        def sh(arr, k):
            return np.roll(arr, -k, axis=a)
        mp, mm = sh(m, 1), sh(m, -1)
        mp2, mm2 = sh(m, 2), sh(m, -2)
        up, um, up2, um2 = sh(u, 1), sh(u, -1), sh(u, 2), sh(u, -2)
        d = np.zeros(g.shape)
        central = m & mp & mm
        d[central] = ((up - um) / (2 * h))[central]
        fwd2 = m & ~central & mp & mp2
        d[fwd2] = ((-3 * u + 4 * up - up2) / (2 * h))[fwd2]
        bwd2 = m & ~central & ~fwd2 & mm & mm2
        d[bwd2] = ((3 * u - 4 * um + um2) / (2 * h))[bwd2]
        fwd1 = m & ~central & ~fwd2 & ~bwd2 & mp
        d[fwd1] = ((up - u) / h)[fwd1]
        bwd1 = m & ~central & ~fwd2 & ~bwd2 & ~fwd1 & mm
        d[bwd1] = ((u - um) / h)[bwd1]
        out[..., a] = d
    return GridField(g, out, None)


def _seminorm_sq(field: GridField, region: np.ndarray) -> float:
    """Edge-midpoint quadrature of |grad u|^2 over ``region``, boundary edges via the trace."""
    g = field.grid
    u = field.values
    h = g.h
    total = 0.0
    for a in AXES:
        sl_lo = [slice(None)] * 3
        sl_hi = [slice(None)] * 3
        sl_lo[a] = slice(0, -1)
        sl_hi[a] = slice(1, None)
        both = region[tuple(sl_lo)] & region[tuple(sl_hi)]
        du = (u[tuple(sl_hi)] - u[tuple(sl_lo)])[both]
        total += float(np.dot(du, du)) * h
    if field.trace is not None and len(g.cuts):
        sel = region.ravel()[g.cuts.node]
        du = field.trace[sel] - u.ravel()[g.cuts.node[sel]]
        total += float(np.sum(du * du / g.cuts.theta[sel])) * h
    return total


def norms(field: GridField, region_mask: np.ndarray | None = None) -> NormReport:
    """L2, H1-seminorm, H1 and max norms over the interior (or a sub-region)."""
    g = field.grid
    region = g.inside if region_mask is None else (np.asarray(region_mask, dtype=bool))
    if region_mask is not None and (region & ~g.inside).any():
        raise GridError("region mask must be a subset of the interior mask")
    if not region.any():
        raise EmptyRegionError("empty region")
    w = g.volume_fraction[region]
    v = field.values[region]
    l2sq = float(np.sum(w * v * v)) * g.h**3
    semi = _seminorm_sq(field, region)
    return NormReport(math.sqrt(l2sq), math.sqrt(semi), math.sqrt(l2sq + semi),
                      float(np.abs(v).max()))


def h1_inner(f1: GridField, f2: GridField, region_mask: np.ndarray | None = None) -> float:
    """H1 inner product matching :func:`norms` (polarisation identity)."""
    a = norms(f1 + f2, region_mask).h1 ** 2
    b = norms(f1 - f2, region_mask).h1 ** 2
    return 0.25 * (a - b)


# -- spheres and surface quadrature -----------------------------------------------

def sphere_quadrature(n_points: int) -> tuple[np.ndarray, np.ndarray]:
    """Unit-sphere nodes and weights (Gauss-Legendre in cos(theta) x trapezoid in phi).

    At least ``n_points`` nodes; exact for spherical harmonics of degree below
    the number of latitude rings.
    """
    nt = max(4, int(math.ceil(math.sqrt(n_points / 2.0))))
    mu, wmu = np.polynomial.legendre.leggauss(nt)
    nphi = 2 * nt
    phi = (np.arange(nphi) + 0.5) * (2 * math.pi / nphi)
    s = np.sqrt(1 - mu**2)
    pts = np.stack([
        (s[:, None] * np.cos(phi)[None, :]).ravel(),
        (s[:, None] * np.sin(phi)[None, :]).ravel(),
        np.repeat(mu, nphi),
    ], axis=-1)
    w = np.repeat(wmu, nphi) * (2 * math.pi / nphi)
    return pts, w


def _conductivity_at(conductivity, points) -> np.ndarray:
    if conductivity is None:
        return np.ones(points.shape[:-1])
    if isinstance(conductivity, GridField):
        return conductivity.interpolate(points)
    if callable(conductivity):
        return np.asarray(conductivity(points), dtype=float)
    return np.full(points.shape[:-1], float(conductivity))


def sphere_normal_derivative(field, center, radius: float, n_points: int | None = None,
                             surface_value: float | None = None):
    """Outward normal derivative on the sphere ``|x - center| = radius``.

    Returns ``(unit_nodes, weights, points, dn)`` for the surface quadrature
    of :func:`sphere_quadrature`.  ``field`` is a :class:`GridField` (one-sided
    differences of trilinear interpolants taken outside the sphere) or any
    object with a ``gradient(points)`` method.  ``surface_value`` supplies the
    known trace on the sphere, e.g. an inclusion constant, in which case
    samples start ``1.5 h`` outside.
    """
    c = np.asarray(center, dtype=float)
    if isinstance(field, GridField):
        h = field.grid.h
        n = n_points or max(50, int(math.ceil(6 * (radius / h) ** 2)))
    else:
        n = n_points or 50
    nodes, w = sphere_quadrature(n)
    xi = c + radius * nodes
    if isinstance(field, GridField):
        g = field.grid
        if surface_value is None:
            steps = np.array([0.0, 1.0, 2.0]) * h
        else:
            steps = np.array([1.5, 3.0]) * h
        probe = xi[None] + steps[:, None, None] * nodes[None]
        inside = g.domain.distance_to_boundary(probe.reshape(-1, 3)) > h
        if not inside.all():
            raise SphereOutsideDomainError("sphere (plus probe layer) leaves the domain interior")
        vals = field.interpolate(probe.reshape(-1, 3)).reshape(len(steps), -1)
        if surface_value is None:
            dn = (-3 * vals[0] + 4 * vals[1] - vals[2]) / (2 * h)
        else:
            s1, s2 = steps
            f1, f2 = vals
            c0 = float(surface_value)
            dn = (f1 * s2**2 - f2 * s1**2 - c0 * (s2**2 - s1**2)) / (s1 * s2 * (s2 - s1))
    else:
        dn = np.einsum("ij,ij->i", np.asarray(field.gradient(xi), dtype=float), nodes)
    return nodes, w, xi, dn


def surface_flux(field, conductivity, center, radius: float, n_points: int | None = None,
                 surface_value: float | None = None) -> float:
    """Outward flux ``∫ a ∂u/∂ν ds`` over the sphere ``|x - center| = radius``.

    See :func:`sphere_normal_derivative` for how the normal derivative is
    obtained.
    """
    _, w, xi, dn = sphere_normal_derivative(field, center, radius, n_points, surface_value)
    a = _conductivity_at(conductivity, xi)
    return float(np.sum(w * a * dn)) * radius**2
