import json
import math

import numpy as np
import pytest

from dilute_homog.analytic import (BallGreen, DipoleParams, InclusionOutsideDomainError,
                                   ReflectionDivergenceError, SingularEvaluationError,
                                   UnsupportedDomainError, dipole_constant, dipole_field,
                                   greens_bound_check, greens_function_ball, integral_representation,
                                   make_dipole, reflection_solve)
from dilute_homog.corrections import fit_slope
from dilute_homog.domain import InclusionConfiguration, unit_ball, unit_box
from dilute_homog.expr import ScalarExpr
from dilute_homog.grid import Grid, GridField, norms, sphere_quadrature, surface_flux
from dilute_homog.solver import solve_background, solve_with_inclusions


def test_dipole_constant_cases():
    assert dipole_constant(unit_ball(), [0, 0, 0], 0.05, [1, 0, 0]) == 0.0
    ca = dipole_constant(unit_ball(conductivity="exp(x)"), [0, 0, 0], 0.05, [1, 0, 0])
    assert ca == pytest.approx(2 / 3, rel=0.02)
    assert abs(dipole_constant(unit_ball(conductivity="1 + y"), [0, 0, 0], 0.05, [1, 0, 0])) < 1e-10


def test_dipole_constant_outside_domain():
    with pytest.raises(InclusionOutsideDomainError):
        dipole_constant(unit_ball(), [0.97, 0, 0], 0.05, [1, 0, 0])


def test_dipole_branches_continuous(rng):
    p = DipoleParams([0.1, 0.2, -0.1], 0.07, [0.3, -1.0, 0.5], Ca=1.7)
    d = rng.normal(size=(50, 3))
    x = p.center + 0.07 * d / np.linalg.norm(d, axis=1)[:, None]
    assert np.allclose(dipole_field(p, x, "exterior"), dipole_field(p, x, "interior"), atol=1e-15)


def test_dipole_value_at_two_radii():
    eps = 0.1
    p = DipoleParams([0, 0, 0], eps, [1, 0, 0])
    assert dipole_field(p, np.array([2 * eps, 0, 0])) == pytest.approx(-eps / 4, rel=1e-14)


def test_dipole_singular():
    p = DipoleParams([0, 0, 0], 0.1, [1, 0, 0])
    with pytest.raises(SingularEvaluationError):
        dipole_field(p, np.zeros(3), "exterior")


def test_dipole_flux_with_true_conductivity():
    dom = unit_ball(conductivity="exp(x)")
    eps = 0.05
    p = make_dipole(dom, [0, 0, 0], eps, [1, 0, 0])
    flux = surface_flux(p, dom.conductivity, p.center, eps, n_points=2000)
    assert abs(flux) <= 1e-6 * eps**2


def test_green_center_and_boundary(rng):
    G = BallGreen()
    x = rng.uniform(-0.5, 0.5, (20, 3))
    r = np.linalg.norm(x, axis=1)
    assert np.allclose(G(x, np.zeros(3)), (1 / r - 1) / (4 * math.pi), rtol=1e-12)
    xb = rng.normal(size=(20, 3))
    xb /= np.linalg.norm(xb, axis=1)[:, None]
    xi = rng.uniform(-0.4, 0.4, (20, 3))
    assert np.abs(G(xb, xi)).max() < 1e-12


def test_green_symmetric_positive(rng):
    G = BallGreen(radius=2.0, center=(0.5, 0, 0))
    c = np.array(G.center)
    x = c + rng.uniform(-1.1, 1.1, (100, 3))
    xi = c + rng.uniform(-1.1, 1.1, (100, 3))
    a, b = G(x, xi), G(xi, x)
    assert np.all(a > 0)
    assert np.allclose(a, b, rtol=1e-12, atol=0)


def test_green_coincident():
    with pytest.raises(SingularEvaluationError):
        greens_function_ball(BallGreen(), np.zeros(3), np.zeros(3))


def test_green_gradient_matches_differences(rng):
    G = BallGreen()
    x = rng.uniform(-0.5, 0.5, (5, 3))
    xi = rng.uniform(-0.5, 0.5, (5, 3))
    e = 1e-6
    fd = np.stack([(G(x + e * np.eye(3)[i], xi) - G(x - e * np.eye(3)[i], xi)) / (2 * e)
                   for i in range(3)], -1)
    assert np.allclose(fd, G.gradient_x(x, xi), atol=1e-6)


def test_green_mean_value(rng):
    G = BallGreen()
    x = np.array([0.5, 0.1, 0.0])
    xi = np.array([-0.3, 0.2, 0.1])
    pts, w = sphere_quadrature(400)
    rho = 0.2
    mean = np.sum(w * G(x, xi + rho * pts)) / (4 * math.pi)
    assert mean == pytest.approx(float(G(x, xi)), rel=1e-8)


def test_green_bound_constant_conductivity():
    reps = greens_bound_check(unit_ball(), 1 / 24, 200, (0, 1), seed=1)
    assert reps[0].sup_value <= 1.05 / (4 * math.pi)
    assert reps[1].sup_value <= 1.2 / (4 * math.pi)
    assert all(150 <= r.pair_count <= 200 for r in reps)
    assert reps[0].row()[0] == 0


def test_green_bound_rejects_order():
    with pytest.raises(ValueError):
        greens_bound_check(unit_ball(), 1 / 16, 10, 3)


def test_integral_representation_empty(ball):
    bg = solve_background(ball, 1 / 16, keep_assembly=True)
    cfg = InclusionConfiguration(0.1, np.zeros((0, 3)))
    x = np.array([[0.2, 0.1, 0.3], [-0.5, 0.2, 0.0]])
    rec = integral_representation(ball, bg, cfg, BallGreen(), x)
    assert np.array_equal(rec, x[:, 0])


def test_integral_representation_unsupported():
    dom = unit_box()
    cfg = InclusionConfiguration(0.1, np.zeros((0, 3)))
    with pytest.raises(UnsupportedDomainError):
        integral_representation(dom, None, cfg, BallGreen(), np.zeros((1, 3)))
    with pytest.raises(UnsupportedDomainError):
        integral_representation(unit_ball(conductivity="exp(x)"), None, cfg, BallGreen(), np.zeros((1, 3)))


def test_integral_representation_centered(ball):
    cfg = InclusionConfiguration(0.1, [[0.0, 0, 0]])
    out = solve_with_inclusions(ball, cfg, 0.025, keep_assembly=True)
    x = np.array([[0.3, 0.1, 0.0], [-0.2, 0.4, 0.1], [0.0, -0.1, 0.6]])
    rec = integral_representation(ball, out, cfg, BallGreen(), x)
    assert np.abs(rec - out.field.interpolate(x)).max() < 5e-4


def test_reflection_single_sphere():
    eps = 0.1
    cfg = InclusionConfiguration(eps, [[0.0, 0, 0]])
    r = reflection_solve(BallGreen(), cfg, ScalarExpr("x"))
    assert np.allclose(r.moments[0], [-eps**3 / (1 - eps**3), 0, 0], rtol=1e-10)
    x = np.array([[0.4, 0.2, 0.1]])
    p = DipoleParams([0, 0, 0], eps, [1, 0, 0])
    assert abs(r(x)[0] - (x[0, 0] + dipole_field(p, x)[0])) < 5 * eps**3


def test_reflection_constant_background():
    cfg = InclusionConfiguration(0.1, [[0.0, 0, 0], [0.5, 0, 0]])
    r = reflection_solve(BallGreen(), cfg, ScalarExpr("2"))
    assert not r.moments.any()
    assert np.allclose(r(np.array([[0.2, 0.3, 0.0]])), 2.0)


def test_reflection_pair_slope():
    eps = 0.03
    iso = reflection_solve(BallGreen(), InclusionConfiguration(eps, [[0.0, 0, 0]]), ScalarExpr("x")).moments[0]
    seps = [6 * eps, 12 * eps, 24 * eps]
    dev = []
    for d in seps:
        cfg = InclusionConfiguration(eps, [[-d / 2, 0, 0], [d / 2, 0, 0]])
        m = reflection_solve(BallGreen(), cfg, ScalarExpr("x")).moments[0]
        dev.append(np.linalg.norm(m - iso))
    slope, _ = fit_slope(seps, dev)
    assert slope == pytest.approx(-3.0, abs=0.2)


def test_reflection_preconditions():
    cfg = InclusionConfiguration(0.1, [[0.0, 0, 0], [0.3, 0, 0]])
    with pytest.raises(ReflectionDivergenceError):
        reflection_solve(BallGreen(), cfg, ScalarExpr("x"))


def test_reflection_divergence_reported():
    cfg = InclusionConfiguration(0.3, [[0.0, 0, 0], [0.6, 0, 0]])
    with pytest.raises(ReflectionDivergenceError):
        reflection_solve(BallGreen(), cfg, ScalarExpr("x"), max_sweeps=2, check=False)


def test_reflection_against_grid(ball):
    eps, h = 0.1, 0.025
    cfg = InclusionConfiguration(eps, [[-0.4, 0, 0], [0.4, 0, 0]])
    out = solve_with_inclusions(ball, cfg, h)
    ref = reflection_solve(BallGreen(), cfg, ScalarExpr("x"))
    g = out.field.grid
    pts = g.points(np.arange(g.size))
    dist = np.min(np.linalg.norm(pts[:, None] - cfg.centers[None], axis=-1), axis=1).reshape(g.shape)
    region = g.inside & (dist > 2 * eps)
    vals = np.where(g.inside, ref(pts).reshape(g.shape), 0.0)
    rf = GridField(g, vals, out.field.trace)
    assert norms(out.field - rf, region).h1 <= 0.05 * norms(rf, region).h1


def test_reflection_json():
    cfg = InclusionConfiguration(0.1, [[0.0, 0, 0]])
    d = json.loads(reflection_solve(BallGreen(), cfg, ScalarExpr("x")).to_json())
    assert len(d["moments"]) == 1 and len(d["moments"][0]) == 3
