"""Finite-difference solvers for the conduction problems on a structured grid.

All problems share one discretisation: the conservative 7-point stencil with
harmonic-mean face conductivities, scaled so that the operator ``A`` satisfies
``A u = h^2 F`` for ``-div(a grad u) = F``.  Dirichlet data on the outer
boundary enters through cut faces at the true boundary location
(coefficient ``a_f / theta``).

Perfectly conducting inclusions are handled by merging every node inside a
sphere into one unknown.  The merged row is the sum of the member rows, so the
discrete net flux through each sphere vanishes by construction.  Edges that
leave a sphere are shortened to the part outside it, the same way as the
outer-boundary cut faces.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import kernels
from .domain import DomainSpec, InclusionConfiguration
from .expr import ScalarExpr
from .grid import AXES, Grid, GridError, GridField, SphereOutsideDomainError, surface_flux

TOL = 1e-10
PENALTY = 1e8
MIN_NODES = 16


class SolverError(RuntimeError):
    pass


class ConvergenceError(SolverError):
    def __init__(self, msg, stats=None):
        super().__init__(msg)
        self.stats = stats


class ConductivityBoundError(SolverError):
    pass


class UnderResolvedInclusionError(SolverError):
    pass


@dataclass
class LinearSystemStats:
    unknown_count: int
    nonzeros: int
    cg_iterations: int
    final_relative_residual: float


@dataclass
class SolveOutput:
    """Solution field with per-inclusion constants and diagnostics."""

    field: GridField
    inclusion_constants: list = dc_field(default_factory=list)
    dirichlet_energy: float = 0.0
    flux_residuals: list = dc_field(default_factory=list)
    iterations: int = 0
    residual: float = 0.0
    stats: LinearSystemStats | None = None
    conductivity: GridField | None = None
    assembly: "Assembly | None" = None

    def summary(self) -> dict:
        return {
            "C_n": [float(c) for c in self.inclusion_constants],
            "energy": float(self.dirichlet_energy),
            "flux_residuals": [float(f) for f in self.flux_residuals],
            "iterations": int(self.iterations),
            "residual": float(self.residual),
        }


# -- helpers ------------------------------------------------------------------

def _hm(a, b):
    return 2.0 * a * b / (a + b)


def _as_callable(f):
    if f is None or callable(f):
        return f
    return ScalarExpr(f)


def node_values(grid: Grid, func) -> np.ndarray:
    """``func`` evaluated at every lattice node (padding included), grid-shaped."""
    out = np.empty(grid.size)
    nyz = grid.shape[1] * grid.shape[2]
    for i in range(grid.shape[0]):
        flat = np.arange(i * nyz, (i + 1) * nyz)
        out[flat] = func(grid.points(flat))
    return out.reshape(grid.shape)


def conductivity_field(grid: Grid, conductivity=None, check: bool = True) -> GridField:
    """Host conductivity at the nodes, optionally checked against the ellipticity bounds."""
    dom = grid.domain
    expr = dom.conductivity if conductivity is None else _as_callable(conductivity)
    if isinstance(expr, ScalarExpr) and expr.is_constant:
        vals = np.full(grid.shape, float(expr(np.zeros((1, 3)))[0]))
    else:
        vals = node_values(grid, expr)
    if check:
        v = vals[grid.inside]
        bad = (v < dom.lambda_bound) | (v > dom.Lambda_bound) | ~np.isfinite(v)
        if bad.any():
            p = grid.points(grid.inside_flat[np.flatnonzero(bad)[0]])
            raise ConductivityBoundError(
                f"conductivity {v[bad][0]:.6g} at {p.tolist()} outside "
                f"[{dom.lambda_bound}, {dom.Lambda_bound}]")
    cut_a = None
    if len(grid.cuts):
        cut_a = np.asarray(expr(grid.cuts.point), dtype=float) if callable(expr) else None
    return GridField(grid, vals, cut_a)


def label_spheres(grid: Grid, centers, radius: float) -> np.ndarray:
    """Per-node sphere label (``-1`` outside every sphere)."""
    labels = np.full(grid.shape, -1, dtype=np.int32)
    h = grid.h
    for k, c in enumerate(np.asarray(centers, dtype=float).reshape(-1, 3)):
        lo = np.maximum(np.floor((c - radius - grid.origin) / h).astype(int), 0)
        hi = np.minimum(np.ceil((c + radius - grid.origin) / h).astype(int) + 1, grid.shape)
        if (hi <= lo).any():
            continue
        ax = [grid.origin[a] + h * np.arange(lo[a], hi[a]) - c[a] for a in AXES]
        r2 = ax[0][:, None, None] ** 2 + ax[1][None, :, None] ** 2 + ax[2][None, None, :] ** 2
        sub = labels[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
        sub[(r2 < radius**2) & grid.inside[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]] = k
    return labels


def _sphere_param(p, axis, h, center, radius, larger):
    """Edge parameter where ``p + t h e_axis`` meets the sphere (root choice by ``larger``)."""
    d = p - center
    b = d[:, axis]
    c = np.einsum("ij,ij->i", d, d) - radius**2
    disc = np.sqrt(np.maximum(b * b - c, 0.0))
    t = (-b + disc) / h if larger else (-b - disc) / h
    return np.clip(t, 0.0, 1.0)


def edge_coefficients(grid: Grid, a: np.ndarray, centers=None, radius: float = 0.0,
                      labels: np.ndarray | None = None):
    """Face coefficients ``(cx, cy, cz)`` and cut-face coefficients.

    ``c[axis][p]`` belongs to the edge from node ``p`` to ``p + e_axis``.
    Edges with one end outside the domain get zero (they are cut faces);
    edges inside one sphere get zero; edges entering or leaving spheres are
    divided by the fraction of their length that lies outside the spheres.
    """
    ins = grid.inside
    h = grid.h
    tmin = grid.theta_min
    if centers is not None and len(centers) and labels is None:
        labels = label_spheres(grid, centers, radius)
    coefs = []
    for ax in AXES:
        sl0 = [slice(None)] * 3
        sl1 = [slice(None)] * 3
        sl0[ax] = slice(0, -1)
        sl1[ax] = slice(1, None)
        sl0, sl1 = tuple(sl0), tuple(sl1)
        c = np.zeros(grid.shape)
        both = ins[sl0] & ins[sl1]
        c[sl0] = np.where(both, _hm(a[sl0], a[sl1]), 0.0)
        if labels is not None:
            l0, l1 = labels[sl0], labels[sl1]
            touch = both & ((l0 >= 0) | (l1 >= 0))
            same = touch & (l0 == l1)
            cv = c[sl0]
            cv[same] = 0.0
            sel = touch & ~same
            if sel.any():
                flat = np.ravel_multi_index(np.nonzero(sel), grid.shape)
                p = grid.points(flat)
                k0 = l0[sel]
                k1 = l1[sel]
                cs = np.asarray(centers, dtype=float)
                t0 = np.zeros(len(flat))
                t1 = np.ones(len(flat))
                m0 = k0 >= 0
                m1 = k1 >= 0
                t0[m0] = _sphere_param(p[m0], ax, h, cs[k0[m0]], radius, larger=True)
                t1[m1] = _sphere_param(p[m1], ax, h, cs[k1[m1]], radius, larger=False)
                gap = np.maximum(t1 - t0, tmin)
                cv[sel] = cv[sel] / gap
        coefs.append(c)
    cuts = grid.cuts
    cut_c = np.zeros(len(cuts))
    if len(cuts):
        ap = a.ravel()[cuts.node]
        cut_c = ap / cuts.theta
    return coefs, cut_c


# -- assembly -------------------------------------------------------------------

@dataclass
class Assembly:
    grid: Grid
    active: np.ndarray
    idx: np.ndarray
    diag: np.ndarray
    coefs: list
    cut_c: np.ndarray
    n_free: int
    n_float: int
    float_ids: np.ndarray
    labels: np.ndarray | None
    free_nodes: np.ndarray

    @property
    def n(self) -> int:
        return self.n_free + self.n_float

    def nonzeros(self) -> int:
        nz = self.n
        for c in self.coefs:
            nz += 2 * int(np.count_nonzero(c))
        return nz

    def matvec(self, x: np.ndarray, backend=None) -> np.ndarray:
        sx, sy, _ = self.grid.strides
        return kernels.get(backend).apply(self.active, self.idx, self.diag, *self.coefs, sx, sy, x)


def assemble(grid: Grid, a: np.ndarray, centers=None, radius: float = 0.0,
             fixed: dict | None = None) -> Assembly:
    """Build the merged-unknown operator.

    ``fixed`` maps inclusion index to a prescribed potential; every other
    inclusion floats with one unknown.
    """
    fixed = fixed or {}
    centers = np.zeros((0, 3)) if centers is None else np.asarray(centers, dtype=float).reshape(-1, 3)
    labels = label_spheres(grid, centers, radius) if len(centers) else None
    coefs, cut_c = edge_coefficients(grid, a, centers, radius, labels)
    lab = labels.ravel() if labels is not None else None
    ins = grid.inside.ravel()
    free = ins.copy()
    if lab is not None:
        free &= lab < 0
    free_nodes = np.flatnonzero(free)
    n_free = len(free_nodes)
    # slots follow the lexicographic order of the centers, so relabelling the
    # inclusions leaves every floating-point operation unchanged
    order = np.lexsort(centers.T[::-1]) if len(centers) else np.zeros(0, dtype=np.int64)
    float_ids = np.array([k for k in order if k not in fixed], dtype=np.int64)
    n = n_free + len(float_ids)
    idx = np.full(grid.size, n, dtype=np.int32)
    idx[free_nodes] = np.arange(n_free, dtype=np.int32)
    active_mask = free.copy()
    if lab is not None and len(float_ids):
        slot = np.full(len(centers), n, dtype=np.int32)
        slot[float_ids] = n_free + np.arange(len(float_ids), dtype=np.int32)
        incl = lab >= 0
        idx[incl] = slot[lab[incl]]
        active_mask |= incl & (idx < n)
    diag = np.zeros(grid.size)
    for ax, c in enumerate(coefs):
        cf = c.ravel()
        s = grid.strides[ax]
        diag += cf
        diag[s:] += cf[:-s]
    np.add.at(diag, grid.cuts.node, cut_c)
    return Assembly(grid, np.flatnonzero(active_mask).astype(np.int64), idx, diag,
                    [np.ascontiguousarray(c.ravel()) for c in coefs], cut_c, n_free,
                    len(float_ids), float_ids, labels, free_nodes)


def _rhs(asm: Assembly, boundary_values, fixed, centers, sink_values=None):
    """Right-hand side from the Dirichlet data and prescribed inclusion potentials."""
    g = asm.grid
    b = np.zeros(asm.n + 1)
    cuts = g.cuts
    if len(cuts) and boundary_values is not None:
        rows = asm.idx[cuts.node]
        np.add.at(b, rows, asm.cut_c * boundary_values)
    if fixed and asm.labels is not None:
        lab = asm.labels.ravel()
        val = np.zeros(len(centers))
        for k, v in fixed.items():
            val[k] = v
        fixed_mask = np.zeros(len(centers), dtype=bool)
        fixed_mask[list(fixed)] = True
        for ax, c in enumerate(asm.coefs):
            s = g.strides[ax]
            e = np.flatnonzero(c)
            p, q = e, e + s
            lp, lq = lab[p], lab[q]
            fp = (lp >= 0) & fixed_mask[np.maximum(lp, 0)]
            fq = (lq >= 0) & fixed_mask[np.maximum(lq, 0)]
            m = fq & ~fp
            np.add.at(b, asm.idx[p[m]], c[e[m]] * val[lq[m]])
            m = fp & ~fq
            np.add.at(b, asm.idx[q[m]], c[e[m]] * val[lp[m]])
    b[asm.n] = 0.0
    return b


def _maxiter(grid: Grid) -> int:
    return int(50 * round(grid.size ** (1.0 / 3.0)))


def _run_cg(asm: Assembly, b, x0, tol, backend=None):
    sx, sy, _ = asm.grid.strides
    dinv = np.zeros(asm.n + 1)
    d = np.zeros(asm.n + 1)
    np.add.at(d, asm.idx[asm.active], asm.diag[asm.active])
    nz = d[:asm.n] > 0
    dinv[:asm.n][nz] = 1.0 / d[:asm.n][nz]
    x = np.ascontiguousarray(x0, dtype=float).copy()
    x[asm.n] = 0.0
    maxiter = _maxiter(asm.grid)
    it, rel = kernels.get(backend).pcg(asm.active, asm.idx, asm.diag, *asm.coefs, sx, sy,
                                       np.ascontiguousarray(b), x, dinv, tol, maxiter)
    stats = LinearSystemStats(asm.n, asm.nonzeros(), int(it), float(rel))
    if rel > tol:
        raise ConvergenceError(
            f"CG did not reach relative residual {tol:g} in {maxiter} iterations (got {rel:.3g})",
            stats)
    return x, stats


def _expand(asm: Assembly, x, fixed, n_incl) -> tuple[np.ndarray, list]:
    g = asm.grid
    vals = np.zeros(g.size)
    vals[asm.free_nodes] = x[:asm.n_free]
    consts = np.zeros(n_incl)
    if n_incl:
        consts[asm.float_ids] = x[asm.n_free:asm.n]
        for k, v in (fixed or {}).items():
            consts[k] = v
        lab = asm.labels.ravel()
        incl = lab >= 0
        vals[incl] = consts[lab[incl]]
    return vals.reshape(g.shape), list(consts)


def _check_resolution(grid: Grid):
    if min(grid.shape) - 2 < MIN_NODES:
        raise GridError(f"grid has {min(grid.shape) - 2} nodes on its shortest axis "
                        f"(need >= {MIN_NODES})")


# -- public solves --------------------------------------------------------------

def solve_system(domain: DomainSpec, h: float, centers=None, radius: float = 0.0,
                 fixed: dict | None = None, boundary=None, a=None, rhs_extra=None,
                 x0=None, tol: float = TOL, backend=None, fluxes: bool = True,
                 grid: Grid | None = None, check_bounds: bool = True,
                 keep_assembly: bool = False) -> SolveOutput:
    """General driver behind the public solves.

    Parameters
    ----------
    centers, radius : inclusion spheres (merged unknowns).
    fixed : dict, optional
        Inclusion index to prescribed potential.
    boundary : callable or expression, optional
        Dirichlet data; defaults to the domain's boundary data.  ``0`` gives
        homogeneous data.
    a : GridField, optional
        Node conductivity; defaults to the domain's conductivity.
    rhs_extra : ndarray, optional
        Extra right-hand side in unknown space (length ``n + 1``), e.g. sources.
    x0 : callable, optional
        Initial guess as a function of position (default: the boundary data).
    keep_assembly : bool
        Keep the operator on the output (needed by :func:`sphere_edge_fluxes`).
    """
    grid = grid or Grid(domain, h)
    _check_resolution(grid)
    centers = np.zeros((0, 3)) if centers is None else np.asarray(centers, dtype=float).reshape(-1, 3)
    n_incl = len(centers)
    if n_incl and radius < 4 * grid.h * (1 - 1e-12):
        raise UnderResolvedInclusionError(
            f"inclusion radius {radius:g} is below 4h = {4 * grid.h:g}")
    afield = a if a is not None else conductivity_field(grid, check=check_bounds)
    asm = assemble(grid, afield.values, centers, radius, fixed)
    bfun = domain.boundary_data if boundary is None else _as_callable(boundary)
    if isinstance(bfun, ScalarExpr) and bfun.is_constant:
        bval = np.full(len(grid.cuts), float(bfun(np.zeros((1, 3)))[0]))
    else:
        bval = np.asarray(bfun(grid.cuts.point), dtype=float)
    b = _rhs(asm, bval, fixed, centers)
    if rhs_extra is not None:
        b = b + rhs_extra
        b[asm.n] = 0.0
    guess = bfun if x0 is None else x0
    xv = np.zeros(asm.n + 1)
    if not (x0 is None and isinstance(bfun, ScalarExpr) and bfun.is_constant
            and bval.size and bval[0] == 0):
        xv[:asm.n_free] = grid.evaluate(guess, asm.free_nodes)
        if asm.n_float:
            xv[asm.n_free:asm.n] = np.asarray(guess(centers[asm.float_ids]), dtype=float)
    x, stats = _run_cg(asm, b, xv, tol, backend)
    del xv, b
    vals, consts = _expand(asm, x, fixed, n_incl)
    fieldv = GridField(grid, vals, bval.copy())
    energy = _energy(fieldv, asm.coefs, asm.cut_c)
    out = SolveOutput(fieldv, consts, energy, [], stats.cg_iterations,
                      stats.final_relative_residual, stats, afield)
    out.assembly = asm if keep_assembly else None
    if fluxes and n_incl:
        out.flux_residuals = [_safe_flux(fieldv, afield, c, radius, C)
                              for c, C in zip(centers, consts)]
    return out


def _safe_flux(fieldv, afield, center, radius, C):
    try:
        return surface_flux(fieldv, afield, center, radius, surface_value=C)
    except SphereOutsideDomainError:
        return float("nan")


def solve_background(domain: DomainSpec, h: float, **kw) -> SolveOutput:
    """Background field: ``div(a grad u) = 0`` in the domain, ``u = f`` on its boundary."""
    return solve_system(domain, h, **kw)


def solve_with_inclusions(domain: DomainSpec, config: InclusionConfiguration, h: float,
                          mode: str = "merge", **kw) -> SolveOutput:
    """Potential around perfectly conducting, flux-free spheres.

    ``mode="merge"`` ties each sphere to one unknown.  ``mode="penalty"``
    instead gives inclusion nodes conductivity ``1e8`` and solves the plain
    stencil (a cross-check; needs many more iterations).
    """
    config.validate(domain)
    if mode == "merge":
        return solve_system(domain, h, config.centers, config.epsilon, **kw)
    if mode != "penalty":
        raise ValueError(f"unknown mode {mode!r}")
    grid = kw.pop("grid", None) or Grid(domain, h)
    if len(config) and config.epsilon < 4 * grid.h * (1 - 1e-12):
        raise UnderResolvedInclusionError("inclusion radius below 4h")
    afield = conductivity_field(grid)
    lab = label_spheres(grid, config.centers, config.epsilon) if len(config) else None
    avals = afield.values.copy()
    if lab is not None:
        avals[lab >= 0] = PENALTY
    out = solve_system(domain, h, a=GridField(grid, avals, afield.trace), grid=grid,
                       fluxes=False, tol=kw.pop("tol", TOL), **kw)
    consts = []
    for k in range(len(config)):
        consts.append(float(out.field.values[lab == k].mean()))
    out.inclusion_constants = consts
    out.flux_residuals = [_safe_flux(out.field, afield, c, config.epsilon, C)
                          for c, C in zip(config.centers, consts)]
    out.conductivity = afield
    return out


def solve_effective(domain: DomainSpec, beta_field: GridField, h: float, **kw) -> SolveOutput:
    """Effective-medium problem with conductivity ``a (1 + 3 beta)``.

    The multiplier is normalised by its maximum so that a constant ``beta``
    reproduces the background solve exactly.
    """
    grid = beta_field.grid
    if abs(grid.h - h) > 1e-12 * h:
        raise GridError("beta field grid spacing differs from h")
    beta = beta_field.values
    bi = beta[grid.inside]
    if (bi < 0).any() or (bi > 1.0 / 3.0).any():
        raise ValueError("beta must lie in [0, 1/3]")
    afield = conductivity_field(grid)
    m = 1.0 + 3.0 * beta
    mmax = float(m[grid.inside].max())
    m = np.where(grid.inside, m / mmax, 1.0)
    # pad nodes take the multiplier of their interior neighbour via the cut faces
    return _solve_scaled(domain, grid, afield, m, **kw)


def _solve_scaled(domain, grid, afield, m, **kw):
    _check_resolution(grid)
    asm = assemble(grid, afield.values)
    for ax, c in enumerate(asm.coefs):
        s = grid.strides[ax]
        mf = m.ravel()
        mm = np.ones_like(mf)
        mm[:-s] = _hm(mf[:-s], mf[s:])
        c *= mm
    cuts = grid.cuts
    if len(cuts):
        asm.cut_c = asm.cut_c * m.ravel()[cuts.node]
    diag = np.zeros(grid.size)
    for ax, c in enumerate(asm.coefs):
        s = grid.strides[ax]
        diag += c
        diag[s:] += c[:-s]
    np.add.at(diag, cuts.node, asm.cut_c)
    asm.diag = diag
    bfun = domain.boundary_data
    bval = np.asarray(bfun(cuts.point), dtype=float)
    b = _rhs(asm, bval, None, None)
    x0 = np.zeros(asm.n + 1)
    x0[:asm.n_free] = grid.evaluate(bfun, asm.free_nodes)
    x, stats = _run_cg(asm, b, x0, kw.get("tol", TOL), kw.get("backend"))
    vals, _ = _expand(asm, x, None, 0)
    fieldv = GridField(grid, vals, bval.copy())
    energy = _energy(fieldv, asm.coefs, asm.cut_c)
    out = SolveOutput(fieldv, [], energy, [], stats.cg_iterations,
                      stats.final_relative_residual, stats, afield)
    out.assembly = None
    return out


def divergence_rhs(grid: Grid, F: np.ndarray, asm: Assembly) -> np.ndarray:
    """``h^2 div F`` at the unknowns from face averages of the vector field ``F``."""
    ins = grid.inside
    h = grid.h
    div = np.zeros(grid.shape)
    for ax in AXES:
        Fa = np.where(ins, F[..., ax], 0.0)
        up = np.roll(Fa, -1, axis=ax)
        dn = np.roll(Fa, 1, axis=ax)
        mup = np.roll(ins, -1, axis=ax)
        mdn = np.roll(ins, 1, axis=ax)
        f_plus = np.where(mup, 0.5 * (Fa + up), Fa)
        f_minus = np.where(mdn, 0.5 * (Fa + dn), Fa)
        div += f_plus - f_minus
    b = np.zeros(asm.n + 1)
    np.add.at(b, asm.idx[asm.active], h * div.ravel()[asm.active])
    b[asm.n] = 0.0
    return b


def apply_inverse_L(domain: DomainSpec, rhs_divergence_form: GridField, h: float,
                    tol: float = TOL, backend=None) -> GridField:
    """Solve ``-div(a grad w) = div F`` with ``w = 0`` on the boundary."""
    F = rhs_divergence_form
    if not F.is_vector:
        raise GridError("right-hand side must be a vector field")
    grid = F.grid
    if abs(grid.h - h) > 1e-12 * h:
        raise GridError("field grid spacing differs from h")
    _check_resolution(grid)
    afield = conductivity_field(grid)
    asm = assemble(grid, afield.values)
    b = divergence_rhs(grid, F.values, asm)
    x, _ = _run_cg(asm, b, np.zeros(asm.n + 1), tol, backend)
    vals, _ = _expand(asm, x, None, 0)
    return GridField(grid, vals, np.zeros(len(grid.cuts)))


def solve_point_source(domain: DomainSpec, h: float, xi, tol: float = TOL, backend=None,
                       grid: Grid | None = None) -> GridField:
    """Discrete Green's function: ``-div(a grad G) = delta_xi``, ``G = 0`` on the boundary.

    The source sits at the lattice node nearest ``xi``.
    """
    grid = grid or Grid(domain, h)
    _check_resolution(grid)
    afield = conductivity_field(grid)
    asm = assemble(grid, afield.values)
    node = np.ravel_multi_index(grid.index_of(xi), grid.shape)
    if asm.idx[node] >= asm.n:
        raise GridError("source point is not an interior node")
    b = np.zeros(asm.n + 1)
    b[asm.idx[node]] = 1.0 / grid.h
    x, _ = _run_cg(asm, b, np.zeros(asm.n + 1), tol, backend)
    vals, _ = _expand(asm, x, None, 0)
    return GridField(grid, vals, np.zeros(len(grid.cuts)))


# -- energy -----------------------------------------------------------------------

def _energy(field: GridField, coefs, cut_c) -> float:
    g = field.grid
    u = field.values.ravel()
    total = 0.0
    for ax, c in enumerate(coefs):
        s = g.strides[ax]
        e = np.flatnonzero(c)
        du = u[e + s] - u[e]
        total += float(np.dot(c[e] * du, du))
    if field.trace is not None and len(cut_c):
        du = field.trace - u[g.cuts.node]
        total += float(np.dot(cut_c * du, du))
    return total * g.h


def dirichlet_energy(field: GridField, conductivity: GridField | None = None,
                     exclusion=None) -> float:
    """Discrete ``∫ a |grad w|^2`` over the domain minus the excluded spheres.

    ``exclusion`` is ``(centers, radius)`` or a list of ``(center, radius)``
    pairs with a common radius.  Edges crossing a sphere use the part outside
    it, with the field value at the inside node taken as the sphere's trace;
    this is the functional minimised by :func:`solve_with_inclusions`.
    """
    g = field.grid
    if conductivity is None:
        a = np.ones(g.shape)
    else:
        if not g.same_as(conductivity.grid):
            raise GridError("grid mismatch")
        a = conductivity.values
    centers, radius = None, 0.0
    if exclusion:
        if isinstance(exclusion, tuple) and len(exclusion) == 2 and np.ndim(exclusion[1]) == 0 \
                and np.ndim(exclusion[0]) == 2:
            centers, radius = np.asarray(exclusion[0], dtype=float), float(exclusion[1])
        else:
            centers = np.array([c for c, _ in exclusion], dtype=float)
            radii = {float(r) for _, r in exclusion}
            if len(radii) != 1:
                raise ValueError("excluded spheres must share one radius")
            radius = radii.pop()
    coefs, cut_c = edge_coefficients(g, a, centers, radius)
    coefs = [c.ravel() for c in coefs]
    return _energy(field, coefs, cut_c)


def sphere_edge_fluxes(out: SolveOutput, centers, radius: float) -> list:
    """Discrete fluxes through each merged sphere.

    For every grid edge leaving sphere ``k`` returns the point where the edge
    crosses the sphere and the flux ``c_e (u_P - C_k) h`` carried by it
    (positive outward, ``≈ ∫ a ∂u/∂r ds`` over the edge's dual face).  The
    fluxes of a floating sphere sum to zero up to the solver tolerance.
    """
    asm = out.assembly
    if asm is None:
        raise SolverError("solve was run without keep_assembly=True")
    g = asm.grid
    centers = np.asarray(centers, dtype=float).reshape(-1, 3)
    if asm.labels is None:
        return []
    lab = asm.labels.ravel()
    u = out.field.values.ravel()
    pts = [[] for _ in centers]
    flx = [[] for _ in centers]
    for ax, c in enumerate(asm.coefs):
        s = g.strides[ax]
        e = np.flatnonzero(c)
        l0, l1 = lab[e], lab[e + s]
        for inside_end, outside_end, lk, larger in ((e, e + s, l0, True), (e + s, e, l1, False)):
            m = (lk >= 0) & (lab[outside_end] != lk)
            if not m.any():
                continue
            ee = e[m]
            k = lk[m]
            p0 = g.points(ee)
            t = _sphere_param(p0, ax, g.h, centers[k], radius, larger)
            xi = p0.copy()
            xi[:, ax] += t * g.h
            f = c[ee] * (u[outside_end[m]] - u[inside_end[m]]) * g.h
            for kk in np.unique(k):
                sel = k == kk
                pts[kk].append(xi[sel])
                flx[kk].append(f[sel])
    return [(np.concatenate(p) if p else np.zeros((0, 3)), np.concatenate(f) if f else np.zeros(0))
            for p, f in zip(pts, flx)]
