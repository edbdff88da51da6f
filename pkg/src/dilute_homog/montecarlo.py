"""Monte Carlo ensemble averages and the effective-medium comparison.

Samples are solved independently (optionally in worker processes) and always
accumulated in sample-index order with compensated summation, so every number
is independent of the worker count.  Standard errors come from a
delete-a-group jackknife over contiguous sample groups.
"""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field as dc_field

import numpy as np

from .analytic import BallGreen, reflection_solve
from .corrections import fit_slope, single_inclusion
from .domain import (DiluteRegime, DomainSpec, local_volume_fraction, n_for_volume_fraction,
                     sample_configuration)
from .grid import Grid, GridError, GridField, gradient, norms
from .solver import apply_inverse_L, solve_background, solve_effective, solve_system

MAX_GROUPS = 20


class StudyError(RuntimeError):
    def __init__(self, msg, seed=None, partial=None):
        super().__init__(msg)
        self.seed = seed
        self.partial = partial


class KahanSum:
    """Compensated elementwise running sum."""

    def __init__(self, shape):
        self.s = np.zeros(shape)
        self.c = np.zeros(shape)

    def add(self, x):
        y = x - self.c
        t = self.s + y
        self.c = (t - self.s) - y
        self.s = t

    @property
    def value(self):
        return self.s


def _group_bounds(m: int, groups: int | None = None) -> list[tuple[int, int]]:
    g = min(m, MAX_GROUPS) if groups is None else groups
    edges = [round(k * m / g) for k in range(g + 1)]
    return [(edges[k], edges[k + 1]) for k in range(g)]


@dataclass
class EnsembleEstimate:
    mean_field: GridField
    second_moment_field: GridField
    sample_count: int
    seed_base: int
    group_sums: list = dc_field(default_factory=list)
    group_sizes: list = dc_field(default_factory=list)
    failed_seed: int | None = None

    @property
    def variance(self) -> np.ndarray:
        return self.second_moment_field.values - self.mean_field.values**2

    def jackknife_means(self):
        """Leave-one-group-out mean fields."""
        total = np.zeros_like(self.mean_field.values)
        for s in self.group_sums:
            total = total + s
        out = []
        for s, n in zip(self.group_sums, self.group_sizes):
            vals = (total - s) / (self.sample_count - n)
            out.append(GridField(self.mean_field.grid, vals, self.mean_field.trace))
        return out


def jackknife_stderr(values) -> float:
    v = np.asarray(values, dtype=float)
    g = len(v)
    if g < 2:
        return float("nan")
    return float(math.sqrt((g - 1) / g * np.sum((v - v.mean()) ** 2)))


# -- per-sample work ------------------------------------------------------------------------

def _solve_sample(args):
    domain, epsilon, n, h, seed, kw = args
    grid = Grid(domain, h)
    if n == 0:
        out = solve_background(domain, h, grid=grid, **kw)
    else:
        cfg = sample_configuration(domain, epsilon, n, seed)
        out = solve_system(domain, h, cfg.centers, epsilon, grid=grid, fluxes=False, **kw)
    return out.field.values


def _map(fn, tasks, workers):
    if workers and workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            yield from ex.map(fn, tasks, chunksize=1)
    else:
        for t in tasks:
            yield fn(t)


def expectation_field(domain: DomainSpec, epsilon: float, n: int, samples: int, h: float,
                      seed_base: int, workers: int = 1, seeds=None, **kw) -> EnsembleEstimate:
    """Monte Carlo mean and second moment of the solution over sampled configurations.

    Sample ``i`` uses seed ``seed_base + i`` unless ``seeds`` lists them
    explicitly.  With ``n = 0`` the mean is the background field itself.
    """
    if samples < 2:
        raise ValueError("need at least two samples")
    seeds = [seed_base + i for i in range(samples)] if seeds is None else list(seeds)
    if len(seeds) != samples:
        raise ValueError("one seed per sample required")
    grid = Grid(domain, h)
    trace = np.asarray(domain.boundary_data(grid.cuts.point), dtype=float)
    bounds = _group_bounds(samples)
    if n == 0:
        v = solve_background(domain, h, grid=grid, **kw).field.values
        groups = [v * (b - a) for a, b in bounds]
        return EnsembleEstimate(GridField(grid, v.copy(), trace), GridField(grid, v * v, trace),
                                samples, seed_base, groups, [b - a for a, b in bounds])
    s1 = KahanSum(grid.shape)
    s2 = KahanSum(grid.shape)
    gsum = [KahanSum(grid.shape) for _ in bounds]
    gid = np.concatenate([np.full(b - a, k) for k, (a, b) in enumerate(bounds)])
    tasks = [(domain, epsilon, n, h, s, kw) for s in seeds]
    i = 0
    try:
        for vals in _map(_solve_sample, tasks, workers):
            s1.add(vals)
            s2.add(vals * vals)
            gsum[gid[i]].add(vals)
            i += 1
    except Exception as err:
        raise StudyError(f"sample with seed {seeds[i]} failed: {err}", seed=seeds[i]) from err
    mean = GridField(grid, s1.value / samples, trace)
    second = GridField(grid, s2.value / samples, trace * trace)
    return EnsembleEstimate(mean, second, samples, seed_base, [g.value for g in gsum],
                            [b - a for a, b in bounds])


# -- effective-medium error ----------------------------------------------------------------------

@dataclass
class TheoremError:
    err_effective: float
    err_background: float
    stderr: float
    stderr_background: float


def beta_field(domain: DomainSpec, grid: Grid, epsilon: float, n: int,
               density_model="uniform") -> GridField:
    """Local volume fraction at the interior nodes (zero elsewhere)."""
    vals = np.zeros(grid.shape)
    vals.ravel()[grid.inside_flat] = grid.evaluate(
        lambda p: local_volume_fraction(domain, epsilon, n, p, density_model))
    return GridField(grid, vals, None)


def theorem_error(estimate: EnsembleEstimate, beta: GridField, domain: DomainSpec, h: float,
                  background: GridField | None = None, **kw) -> TheoremError:
    """H1 distances of the ensemble mean to the effective and the background solutions."""
    grid = estimate.mean_field.grid
    if not grid.same_as(beta.grid):
        raise GridError("grid mismatch between estimate and beta field")
    phi_e = solve_effective(domain, beta, h, **kw).field
    phi_b = background if background is not None else solve_background(domain, h, grid=grid, **kw).field
    mean = estimate.mean_field
    e_eff = norms(mean - phi_e).h1
    e_bg = norms(mean - phi_b).h1
    jk = estimate.jackknife_means()
    se = jackknife_stderr([norms(m - phi_e).h1 for m in jk])
    sb = jackknife_stderr([norms(m - phi_b).h1 for m in jk])
    return TheoremError(e_eff, e_bg, se, sb)


# -- linearised identity ------------------------------------------------------------------------

@dataclass
class LinearizedReport:
    deviation: float
    reference: float
    ratio: float
    stderr: float
    epsilon: float
    n: int
    samples: int
    method: str


def _phi1_sample(args):
    domain, epsilon, h, seed, method, kw = args
    grid = Grid(domain, h)
    cfg = sample_configuration(domain, epsilon, 1, seed)
    eta = cfg.centers[0]
    if method == "grid":
        return single_inclusion(domain, eta, epsilon, h, grid=grid, **kw).phi1.values
    green = BallGreen(domain.radius, domain.center)
    ref = reflection_solve(green, cfg, domain.boundary_data, check=False)
    pts = grid.points(grid.inside_flat)
    inside = np.linalg.norm(pts - eta, axis=-1) < epsilon
    out = np.empty(len(pts))
    out[~inside] = ref.disturbance(pts[~inside])
    out[inside] = ref.constants[0] - domain.boundary_data(pts[inside])
    vals = np.zeros(grid.shape)
    vals.ravel()[grid.inside_flat] = out
    return vals


def linearized_check(domain: DomainSpec, epsilon: float, n: int, samples: int, h: float,
                     seed: int = 0, workers: int = 1, method: str | None = None,
                     **kw) -> LinearizedReport:
    """Compare ``N E(phi1)`` with the effective-medium response ``3 L^-1 div(a beta grad phi_bar)``.

    ``L = -div(a grad .)`` with zero boundary values; the deviation is the H1
    norm of ``N E(phi1) - 3 L^-1 div(a beta grad phi_bar)`` and the ratio is
    taken against the H1 norm of the second term.  ``method`` selects how
    each ``phi1`` is obtained: ``"reflection"`` (dipole with its ball image;
    default for a ball with constant conductivity and harmonic data) or
    ``"grid"`` (a full single-inclusion solve at spacing ``h``).
    """
    grid = Grid(domain, h)
    if method is None:
        easy = (domain.shape == "ball" and domain.conductivity.is_constant
                and domain.boundary_data.is_harmonic)
        method = "reflection" if easy else "grid"
    if n == 0:
        return LinearizedReport(0.0, 0.0, 0.0, 0.0, epsilon, 0, samples, method)
    bg = solve_background(domain, h, grid=grid, **kw)
    gphi = gradient(bg.field).values
    a = domain.conductivity
    avals = np.zeros(grid.shape)
    avals.ravel()[grid.inside_flat] = grid.evaluate(a)
    beta = beta_field(domain, grid, epsilon, n).values
    F = GridField(grid, (3.0 * beta * avals)[..., None] * gphi, None)
    w = apply_inverse_L(domain, F, h, **kw)
    bounds = _group_bounds(samples)
    gid = np.concatenate([np.full(b - a_, k) for k, (a_, b) in enumerate(bounds)])
    s1 = KahanSum(grid.shape)
    gsum = [KahanSum(grid.shape) for _ in bounds]
    tasks = [(domain, epsilon, h, seed + i, method, kw) for i in range(samples)]
    for i, vals in enumerate(_map(_phi1_sample, tasks, workers)):
        s1.add(vals)
        gsum[gid[i]].add(vals)
    zero_trace = np.zeros(len(grid.cuts))
    mean = GridField(grid, n * s1.value / samples, zero_trace)
    dev = norms(mean - w).h1
    ref = norms(w).h1
    total = s1.value
    jk = []
    for g, (a_, b) in zip(gsum, bounds):
        m = GridField(grid, n * (total - g.value) / (samples - (b - a_)), zero_trace)
        jk.append(norms(m - w).h1)
    return LinearizedReport(dev, ref, dev / ref if ref else float("nan"), jackknife_stderr(jk),
                            epsilon, n, samples, method)


# -- study ------------------------------------------------------------------------------------------

def default_epsilon_rule(beta_bar: float) -> float:
    return 0.3 * math.sqrt(beta_bar)


def default_h_rule(epsilon: float) -> float:
    return epsilon / 4.0


def row_seed(seed: int, row: int) -> int:
    """Independent seed stream for row ``row`` of a study."""
    return int(np.random.SeedSequence([seed, row]).generate_state(1, dtype=np.uint32)[0]) * 1000


@dataclass
class StudyRow:
    beta_bar: float
    epsilon: float
    N: int
    samples: int
    h: float
    err_effective: float
    err_background: float
    ratio: float
    stderr: float
    stderr_background: float


@dataclass
class StudyReport:
    rows: list
    fitted_exponent: float
    fit_residual: float
    background_exponent: float
    complete: bool = True

    def to_csv(self, path) -> None:
        names = list(StudyRow.__dataclass_fields__)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(names)
            for r in self.rows:
                w.writerow([repr(getattr(r, k)) for k in names])

    def to_json(self) -> str:
        return json.dumps({"fitted_exponent": self.fitted_exponent,
                           "fit_residual": self.fit_residual,
                           "background_exponent": self.background_exponent,
                           "complete": self.complete,
                           "rows": [asdict(r) for r in self.rows]}, indent=2)


def _fit(rows, key):
    if len(rows) < 2:
        return float("nan"), float("nan")
    return fit_slope([r.beta_bar for r in rows], [getattr(r, key) for r in rows])


def run_study(domain: DomainSpec, beta_bars, epsilon_rule=None, samples_rule=200, h_rule=None,
              seed: int = 0, workers: int = 1, n_rule=None, **kw) -> StudyReport:
    """Ensemble error against the effective and the background solutions for each ``beta_bar``.

    ``epsilon_rule`` maps ``beta_bar`` to the radius, ``n_rule`` (optional)
    maps ``(beta_bar, epsilon)`` to the inclusion count (default: the count
    closest to ``beta_bar``), ``samples_rule`` is a count or a callable and
    ``h_rule`` maps the radius to the grid spacing.
    """
    bbs = [float(b) for b in beta_bars]
    if any(b2 > b1 for b1, b2 in zip(bbs, bbs[1:])):
        raise ValueError("beta_bars must be in descending order")
    epsilon_rule = epsilon_rule or default_epsilon_rule
    h_rule = h_rule or default_h_rule
    rows = []
    for k, bb in enumerate(bbs):
        eps = float(epsilon_rule(bb))
        n = int(n_rule(bb, eps)) if n_rule else n_for_volume_fraction(domain, bb, eps)
        m = int(samples_rule(bb) if callable(samples_rule) else samples_rule)
        h = float(h_rule(eps))
        DiluteRegime(eps, n, bb).check()
        try:
            est = expectation_field(domain, eps, n, m, h, row_seed(seed, k), workers, **kw)
            beta = beta_field(domain, est.mean_field.grid, eps, n)
            te = theorem_error(est, beta, domain, h, **kw)
        except Exception as err:
            e_fit, e_res = _fit(rows, "err_effective")
            b_fit, _ = _fit(rows, "err_background")
            raise StudyError(f"row {k} (beta_bar={bb}) failed: {err}",
                             seed=getattr(err, "seed", None),
                             partial=StudyReport(rows, e_fit, e_res, b_fit, complete=False)) from err
        rows.append(StudyRow(bb, eps, n, m, h, te.err_effective, te.err_background,
                             te.err_effective / te.err_background if te.err_background else float("nan"),
                             te.stderr, te.stderr_background))
    e_fit, e_res = _fit(rows, "err_effective")
    b_fit, _ = _fit(rows, "err_background")
    return StudyReport(rows, e_fit, e_res, b_fit)
