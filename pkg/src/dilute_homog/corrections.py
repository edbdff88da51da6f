"""Single- and two-inclusion corrections, superposition and capacity.

All fields of one computation live on one grid: the background, the
single-inclusion corrections and the pair field are re-solved at the same
``h`` so that differences between them carry no interpolation bias.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field as dc_field
from itertools import combinations

import numpy as np

from .analytic import DipoleParams, dipole_constant
from .domain import DomainSpec, InclusionConfiguration
from .grid import Grid, GridField, NormReport, gradient, norms
from .solver import SolveOutput, solve_background, solve_system, solve_with_inclusions


class InsufficientLevelsError(ValueError):
    pass


class PairBudgetExceededError(RuntimeError):
    pass


class UnderResolvedGapError(ValueError):
    pass


# -- slope reports --------------------------------------------------------------------

@dataclass
class SlopeRow:
    quantity: str
    level: float
    value: float
    fitted_slope: float
    expected_slope: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return abs(self.fitted_slope - self.expected_slope) <= self.tolerance


HEADER = ["quantity", "level", "value", "fitted_slope", "expected_slope", "tolerance"]


def fit_slope(x, y) -> tuple[float, float]:
    """Least-squares slope of ``log y`` against ``log x`` and the RMS residual."""
    lx = np.log(np.asarray(x, dtype=float))
    ly = np.log(np.abs(np.asarray(y, dtype=float)))
    A = np.stack([lx, np.ones_like(lx)], axis=-1)
    coef, *_ = np.linalg.lstsq(A, ly, rcond=None)
    res = ly - A @ coef
    return float(coef[0]), float(np.sqrt(np.mean(res**2)))


def slope_rows(quantity: str, levels, values, expected: float, tol: float) -> list[SlopeRow]:
    slope, _ = fit_slope(levels, values)
    return [SlopeRow(quantity, float(l), float(v), slope, expected, tol)
            for l, v in zip(levels, values)]


def write_slope_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HEADER)
        for r in rows:
            w.writerow([r.quantity, repr(r.level), repr(r.value), repr(r.fitted_slope),
                        repr(r.expected_slope), repr(r.tolerance)])


# -- background gradient -----------------------------------------------------------------

def background_gradient_at(domain: DomainSpec, background: SolveOutput, eta) -> np.ndarray:
    """``grad phi_bar(eta)``: exact when the boundary data is harmonic and ``a`` constant."""
    eta = np.asarray(eta, dtype=float)
    f = domain.boundary_data
    if domain.conductivity.is_constant and f.is_harmonic:
        return f.gradient(eta[None])[0]
    return gradient(background.field).interpolate(eta[None])[0]


# -- single inclusion ----------------------------------------------------------------------

@dataclass
class CorrectionBundle:
    phi1: GridField
    v1: GridField
    C1: float
    dipole: DipoleParams
    norms: dict = dc_field(default_factory=dict)
    iterations: int = 0


def single_inclusion(domain: DomainSpec, eta, epsilon: float, h: float,
                     background: SolveOutput | None = None, grid: Grid | None = None,
                     **kw) -> CorrectionBundle:
    """One-sphere correction ``phi1 = psi1 - phi_bar`` and remainder ``v1 = phi1 - phi0``.

    ``phi0`` is the dipole field built from the background gradient at
    ``eta``.  ``norms`` holds :class:`NormReport` entries for ``"phi1"`` and
    ``"v1"`` over the whole domain.
    """
    eta = np.asarray(eta, dtype=float)
    cfg = InclusionConfiguration(epsilon, eta[None])
    cfg.validate(domain)
    grid = grid or (background.field.grid if background is not None else Grid(domain, h))
    if background is None:
        background = solve_background(domain, h, grid=grid, **kw)
    g = background_gradient_at(domain, background, eta)
    dip = DipoleParams(eta, epsilon, g, dipole_constant(domain, eta, epsilon, g))
    bg = background.field

    def guess(p):
        return domain.boundary_data(p) + dip(p)

    psi = solve_system(domain, h, cfg.centers, epsilon, grid=grid, x0=guess, fluxes=False, **kw)
    phi1 = psi.field - bg
    phi1.trace = np.zeros_like(phi1.trace)
    C1 = float(psi.inclusion_constants[0])
    iters = psi.iterations
    del psi
    phi0 = GridField.from_function(grid, dip)
    v1 = phi1 - phi0
    del phi0
    out = CorrectionBundle(phi1, v1, C1, dip, iterations=iters)
    out.norms = {"phi1": norms(phi1), "v1": norms(v1)}
    return out


def far_field_profile(bundle: CorrectionBundle, direction, r_values) -> np.ndarray:
    """``|grad phi1(x)| |x - eta|^3 / eps^3`` along a ray from the inclusion center."""
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    r = np.asarray(r_values, dtype=float)
    pts = bundle.dipole.center + r[:, None] * d
    gr = gradient(bundle.phi1).interpolate(pts)
    return np.linalg.norm(gr, axis=-1) * r**3 / bundle.dipole.radius**3


@dataclass
class ScalingReport:
    rows: list
    bundles_norms: list
    profile: np.ndarray | None = None
    profile_r: np.ndarray | None = None

    def slope(self, quantity: str) -> float:
        for r in self.rows:
            if r.quantity == quantity:
                return r.fitted_slope
        raise KeyError(quantity)


def remainder_scaling_study(domain: DomainSpec, eta, epsilons, h_rule=None,
                            probe_direction=(1.0, 0.0, 0.0), n_probe: int = 16,
                            **kw) -> ScalingReport:
    """Log-log slopes of the single-inclusion norms over dyadic ``epsilons``.

    Quantities: ``grad_phi1`` (expected 1.5), ``phi1_inf`` (1.0), ``grad_v1``
    (2.5).  The far-field profile ``|grad phi1| r^3/eps^3`` along
    ``probe_direction`` from ``4 eps`` to half the domain scale is recorded
    for the smallest ``epsilon``.
    """
    eps = sorted((float(e) for e in epsilons), reverse=True)
    if len(eps) < 3:
        raise InsufficientLevelsError("need at least three epsilon levels")
    h_rule = h_rule or (lambda e: e / 4.0)
    g1, inf1, gv = [], [], []
    profile = prof_r = None
    eta = np.asarray(eta, dtype=float)
    scale = domain.radius if domain.shape == "ball" else 0.5 * float(np.min(np.subtract(domain.upper, domain.lower)))
    for k, e in enumerate(eps):
        b = single_inclusion(domain, eta, e, h_rule(e), **kw)
        g1.append(b.norms["phi1"].h1_seminorm)
        inf1.append(b.norms["phi1"].linf)
        gv.append(b.norms["v1"].h1_seminorm)
        if k == len(eps) - 1:
            prof_r = np.geomspace(4 * e, 0.5 * scale, n_probe)
            profile = far_field_profile(b, probe_direction, prof_r)
        del b
    rows = (slope_rows("grad_phi1", eps, g1, 1.5, 0.2)
            + slope_rows("phi1_inf", eps, inf1, 1.0, 0.15)
            + slope_rows("grad_v1", eps, gv, 2.5, 0.3))
    return ScalingReport(rows, list(zip(eps, g1, inf1, gv)), profile, prof_r)


# -- pairs ------------------------------------------------------------------------------------

@dataclass
class PairBundle:
    psi2: GridField
    v2: GridField
    C_pair: tuple
    norms: dict = dc_field(default_factory=dict)


def _canonical(eta1, eta2):
    a, b = np.asarray(eta1, dtype=float), np.asarray(eta2, dtype=float)
    return (a, b, False) if tuple(a) <= tuple(b) else (b, a, True)


def pair_inclusion(domain: DomainSpec, eta1, eta2, epsilon: float, h: float,
                   background: SolveOutput | None = None, singles: dict | None = None,
                   grid: Grid | None = None, **kw) -> PairBundle:
    """Two-sphere field ``psi2`` and remainder ``v2 = psi2 - phi_bar - phi1(eta1) - phi1(eta2)``.

    The pair is processed in a canonical order, so swapping the centers gives
    the same ``v2`` bit for bit.  ``singles`` may cache
    :class:`CorrectionBundle` objects keyed by center tuple.
    """
    p, q, swapped = _canonical(eta1, eta2)
    cfg = InclusionConfiguration(epsilon, np.stack([p, q]))
    cfg.validate(domain)
    grid = grid or (background.field.grid if background is not None else Grid(domain, h))
    if background is None:
        background = solve_background(domain, h, grid=grid, **kw)
    singles = {} if singles is None else singles
    for c in (p, q):
        if tuple(c) not in singles:
            singles[tuple(c)] = single_inclusion(domain, c, epsilon, h, background, grid, **kw)
    s1, s2 = singles[tuple(p)], singles[tuple(q)]

    def guess(x):
        return domain.boundary_data(x) + s1.dipole(x) + s2.dipole(x)

    psi = solve_system(domain, h, cfg.centers, epsilon, grid=grid, x0=guess, fluxes=False, **kw)
    v2 = psi.field - background.field - s1.phi1 - s2.phi1
    v2.trace = np.zeros_like(v2.trace)
    C = tuple(float(c) for c in psi.inclusion_constants)
    if swapped:
        C = C[::-1]
    return PairBundle(psi.field, v2, C, {"v2": norms(v2)})


def pair_scaling_study(domain: DomainSpec, epsilon: float, separations, h: float,
                       axis=(1.0, 0.0, 0.0), **kw) -> ScalingReport:
    """Slopes of ``|grad v2|_2`` and ``|v2|_inf`` against the separation.

    Centers sit symmetrically at ``mid ± (d/2) axis``.
    """
    seps = sorted(float(d) for d in separations)
    if len(seps) < 3:
        raise InsufficientLevelsError("need at least three separations")
    ax = np.asarray(axis, dtype=float)
    ax = ax / np.linalg.norm(ax)
    mid = domain.middle
    grid = Grid(domain, h)
    bg = solve_background(domain, h, grid=grid, **kw)
    gv, inf = [], []
    for d in seps:
        e1 = mid - 0.5 * d * ax
        e2 = mid + 0.5 * d * ax
        b = pair_inclusion(domain, e1, e2, epsilon, h, background=bg, grid=grid, **kw)
        gv.append(b.norms["v2"].h1_seminorm)
        inf.append(b.norms["v2"].linf)
        del b
    rows = slope_rows("grad_v2", seps, gv, -3.0, 0.4) + slope_rows("v2_inf", seps, inf, -3.0, 0.4)
    return ScalingReport(rows, list(zip(seps, gv, inf)))


# -- superposition -------------------------------------------------------------------------------

@dataclass
class SuperpositionResult:
    fields: dict
    residuals: dict
    pair_count: int
    full: GridField


def _pair_task(args):
    domain, p, q, eps, h, kw = args
    grid = Grid(domain, h)
    bg = solve_background(domain, h, grid=grid, **kw)
    return pair_inclusion(domain, p, q, eps, h, background=bg, grid=grid, **kw).v2.values


def superposition(domain: DomainSpec, config: InclusionConfiguration, h: float, order: int = 2,
                  pair_cutoff: float | None = None, max_pairs: int = 200, workers: int = 1,
                  **kw) -> SuperpositionResult:
    """Truncated expansion ``phi_bar + sum phi1 + sum_{i<j} v2`` against the full solve.

    Residuals are ``|grad(phi - truncation)|_2`` for every order up to
    ``order``.  Pairs farther apart than ``pair_cutoff`` (default
    ``20 eps``) are dropped.
    """
    if order not in (0, 1, 2):
        raise ValueError("order must be 0, 1 or 2")
    config.validate(domain)
    eps = config.epsilon
    grid = Grid(domain, h)
    bg = solve_background(domain, h, grid=grid, **kw)
    full = solve_with_inclusions(domain, config, h, grid=grid, fluxes=False, **kw).field
    trunc = bg.field.copy()
    fields = {0: trunc.copy()}
    residuals = {0: norms(full - trunc).h1_seminorm}
    singles = {}
    npairs = 0
    if order >= 1:
        for c in config.centers:
            b = single_inclusion(domain, c, eps, h, bg, grid, **kw)
            singles[tuple(c)] = b
            trunc = trunc + b.phi1
        fields[1] = trunc.copy()
        residuals[1] = norms(full - trunc).h1_seminorm
    if order >= 2:
        cutoff = 20 * eps if pair_cutoff is None else pair_cutoff
        pairs = [(i, j) for i, j in combinations(range(len(config)), 2)
                 if np.linalg.norm(config.centers[i] - config.centers[j]) <= cutoff]
        if len(pairs) > max_pairs:
            raise PairBudgetExceededError(f"{len(pairs)} pair solves exceed the cap of {max_pairs}")
        npairs = len(pairs)
        if workers > 1 and pairs:
            tasks = [(domain, config.centers[i], config.centers[j], eps, h, kw) for i, j in pairs]
            with ProcessPoolExecutor(workers) as ex:
                v2s = list(ex.map(_pair_task, tasks))
        else:
            v2s = [pair_inclusion(domain, config.centers[i], config.centers[j], eps, h,
                                  background=bg, singles=singles, grid=grid, **kw).v2.values
                   for i, j in pairs]
        vals = trunc.values.copy()
        for v in v2s:
            vals += v
        trunc = GridField(grid, vals, trunc.trace)
        fields[2] = trunc
        residuals[2] = norms(full - trunc).h1_seminorm
    return SuperpositionResult(fields, residuals, npairs, full)


# -- capacity ------------------------------------------------------------------------------------

@dataclass
class CapacityResult:
    value: float
    minimizer: GridField
    delta_list: list


def delta_values(domain: DomainSpec, config: InclusionConfiguration) -> list:
    """``delta_k = min(1, d(eta_k, boundary)/eps - 1)``."""
    d = domain.distance_to_boundary(config.centers)
    return [float(min(1.0, v / config.epsilon - 1.0)) for v in d]


def capacity(domain: DomainSpec, config: InclusionConfiguration, h: float, **kw) -> CapacityResult:
    """Minimal Dirichlet energy of a potential equal to 1 on the spheres and 0 on the boundary.

    Uses unit conductivity regardless of the domain's ``a``.
    """
    config.validate(domain)
    grid = kw.pop("grid", None) or Grid(domain, h)
    ones = GridField(grid, np.ones(grid.shape), np.ones(len(grid.cuts)))
    fixed = {k: 1.0 for k in range(len(config))}
    out = solve_system(domain, h, config.centers, config.epsilon, fixed=fixed, boundary="0",
                       a=ones, grid=grid, fluxes=False, **kw)
    return CapacityResult(out.dirichlet_energy, out.field, delta_values(domain, config))


@dataclass
class CapacityStudy:
    deltas: list
    values: list
    compensated: list

    @property
    def band(self) -> float:
        c = np.asarray(self.compensated)
        return float(c.max() / c.min())


def capacity_boundary_study(domain: DomainSpec, epsilon: float, delta_list, h: float,
                            direction=(1.0, 0.0, 0.0), **kw) -> CapacityStudy:
    """Single-sphere capacity as the sphere approaches the boundary.

    The center sits at distance ``(1 + delta) eps`` from the boundary along
    ``direction`` from the domain middle; reports
    ``C1 / (eps (1 + ln(1/delta)))``.
    """
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    mid = domain.middle
    if domain.shape == "ball":
        reach = domain.radius
    else:
        lo, hi = domain.bounds
        with np.errstate(divide="ignore"):
            reach = float(np.min(np.where(d > 0, (hi - mid) / d, np.where(d < 0, (lo - mid) / d, np.inf))))
    vals, comp = [], []
    grid = Grid(domain, h)
    for delta in delta_list:
        if not 0 < delta <= 1:
            raise ValueError("delta must lie in (0, 1]")
        if delta * epsilon < 4 * h * (1 - 1e-12):
            raise UnderResolvedGapError(f"gap {delta * epsilon:g} below 4h = {4 * h:g}")
        eta = mid + (reach - (1 + delta) * epsilon) * d
        cfg = InclusionConfiguration(epsilon, eta[None])
        c = capacity(domain, cfg, h, grid=grid, **kw).value
        vals.append(c)
        comp.append(c / (epsilon * (1 + math.log(1 / delta))))
    return CapacityStudy(list(map(float, delta_list)), vals, comp)
