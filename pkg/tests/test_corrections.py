import csv
import math

import numpy as np
import pytest

from dilute_homog.corrections import (HEADER, InsufficientLevelsError, PairBudgetExceededError,
                                      UnderResolvedGapError, capacity, capacity_boundary_study,
                                      delta_values, fit_slope, pair_inclusion, pair_scaling_study,
                                      remainder_scaling_study, single_inclusion, slope_rows,
                                      superposition, write_slope_csv)
from dilute_homog.domain import InclusionConfiguration, sample_configuration, unit_ball, unit_box
from dilute_homog.grid import norms
from dilute_homog.solver import label_spheres


def test_fit_slope_exact():
    x = np.array([0.1, 0.05, 0.025])
    slope, rms = fit_slope(x, 3 * x**2.5)
    assert slope == pytest.approx(2.5, abs=1e-12) and rms < 1e-12


def test_slope_csv(tmp_path):
    rows = slope_rows("q", [1, 2, 4], [1, 0.125, 0.015625], -3.0, 0.4)
    assert all(r.passed for r in rows)
    path = tmp_path / "s.csv"
    write_slope_csv(path, rows)
    table = list(csv.reader(open(path)))
    assert table[0] == HEADER and len(table) == 4
    assert float(table[1][3]) == pytest.approx(-3.0)


def test_single_constant_data():
    dom = unit_ball(boundary_data="2.5")
    b = single_inclusion(dom, [0.1, 0, 0], 0.1, 0.025)
    assert np.abs(b.phi1.values).max() < 1e-9
    assert b.C1 == pytest.approx(2.5, abs=1e-9)


@pytest.fixture(scope="module")
def centered_bundle():
    return single_inclusion(unit_ball(), [0, 0, 0], 0.1, 0.025)


def test_single_bounded_and_max_on_sphere(centered_bundle):
    b = centered_bundle
    eps = 0.1
    sup = b.norms["phi1"].linf
    assert 0.2 <= sup / eps <= 5
    g = b.phi1.grid
    pts = g.points(np.arange(g.size))
    r = np.linalg.norm(pts, axis=1).reshape(g.shape)
    where = np.abs(b.phi1.values) == sup
    assert np.all(r[where] <= eps + 2 * g.h)


def test_single_boundary_and_inclusion_invariants(centered_bundle):
    b = centered_bundle
    assert not b.phi1.trace.any()
    g = b.phi1.grid
    lab = label_spheres(g, np.zeros((1, 3)), 0.1)
    x = g.points(np.arange(g.size))[:, 0].reshape(g.shape)
    assert np.allclose((b.phi1.values + x)[lab == 0], b.C1, atol=1e-12)


def test_dipole_captures_leading_field(centered_bundle):
    b = centered_bundle
    assert b.norms["v1"].h1_seminorm <= 0.1 * b.norms["phi1"].h1_seminorm


def test_insufficient_levels():
    with pytest.raises(InsufficientLevelsError):
        remainder_scaling_study(unit_ball(), [0, 0, 0], [0.2, 0.1])
    with pytest.raises(InsufficientLevelsError):
        pair_scaling_study(unit_ball(), 0.1, [0.6, 1.2], 0.025)


def test_pair_constant_data():
    dom = unit_ball(boundary_data="-1")
    b = pair_inclusion(dom, [-0.3, 0, 0], [0.3, 0, 0], 0.1, 0.025)
    assert np.abs(b.v2.values).max() < 1e-9
    assert np.allclose(b.psi2.values[b.psi2.grid.inside], -1.0, atol=1e-9)


def test_pair_swap_bit_exact(ball):
    p = pair_inclusion(ball, [0.1, 0, 0], [-0.3, 0.1, 0], 0.1, 0.025)
    q = pair_inclusion(ball, [-0.3, 0.1, 0], [0.1, 0, 0], 0.1, 0.025)
    assert np.array_equal(p.v2.values, q.v2.values)
    assert p.C_pair == q.C_pair[::-1]
    assert not p.v2.trace.any()


def test_pair_decay_relative_to_single(ball, centered_bundle):
    eps = 0.1
    b = pair_inclusion(ball, [0.0, 0, 0], [12 * eps * 0.5, 0, 0], eps, 0.025)
    ratio = b.norms["v2"].h1_seminorm / centered_bundle.norms["phi1"].h1_seminorm
    assert ratio <= 0.2


def test_superposition_trivial_cases(ball):
    empty = InclusionConfiguration(0.1, np.zeros((0, 3)))
    r0 = superposition(ball, empty, 0.025, order=2)
    assert all(v == 0.0 for v in r0.residuals.values())
    one = InclusionConfiguration(0.1, [[0.2, -0.1, 0.0]])
    r1 = superposition(ball, one, 0.025, order=1)
    assert r1.residuals[1] <= 1e-6 * r1.residuals[0]


def test_superposition_pair_budget(ball):
    cfg = sample_configuration(ball, 0.1, 6, seed=5)
    with pytest.raises(PairBudgetExceededError):
        superposition(ball, cfg, 0.025, order=2, pair_cutoff=10.0, max_pairs=3)


def test_superposition_assembly_weights(ball):
    cfg = InclusionConfiguration(0.1, [[0.45, 0, 0], [-0.25, 0.4, 0], [-0.25, -0.4, 0]])
    res = superposition(ball, cfg, 0.025, order=2)
    assert res.residuals[0] > res.residuals[1] > res.residuals[2]
    assert res.pair_count == 3


def test_capacity_concentric():
    c = capacity(unit_ball(), InclusionConfiguration(0.1, [[0.0, 0, 0]]), 0.025)
    assert c.value == pytest.approx(4 * math.pi * 0.1 / 0.9, rel=0.03)
    assert c.delta_list == [1.0]
    g = c.minimizer.grid
    lab = label_spheres(g, np.zeros((1, 3)), 0.1)
    assert np.all(c.minimizer.values[lab == 0] == 1.0) and not c.minimizer.trace.any()


def test_capacity_isolated_sphere():
    c = capacity(unit_box(), InclusionConfiguration(0.05, [[0.5, 0.5, 0.5]]), 0.0125)
    assert c.value == pytest.approx(4 * math.pi * 0.05, rel=0.10)


def test_capacity_monotone(ball):
    base = InclusionConfiguration(0.1, [[0.2, 0, 0]])
    bigger = InclusionConfiguration(0.125, [[0.2, 0, 0]])
    more = InclusionConfiguration(0.1, [[0.2, 0, 0], [-0.4, 0.1, 0]])
    c0 = capacity(ball, base, 0.025).value
    assert capacity(ball, bigger, 0.025).value > c0
    assert capacity(ball, more, 0.025).value >= c0


def test_capacity_subadditive(ball):
    cfg = InclusionConfiguration(0.1, [[0.3, 0, 0], [-0.1, 0.3, 0]])
    both = capacity(ball, cfg, 0.025).value
    s = sum(capacity(ball, InclusionConfiguration(0.1, c[None]), 0.025).value for c in cfg.centers)
    assert both < s


def test_delta_values(ball):
    cfg = InclusionConfiguration(0.1, [[0.0, 0, 0], [0.85, 0, 0]])
    assert delta_values(ball, cfg) == pytest.approx([1.0, 0.5])


def test_boundary_study_delta_one():
    dom = unit_box(boundary_data="0")
    cs = capacity_boundary_study(dom, 0.1, [1.0], 0.025)
    assert 4 * math.pi * 0.9 <= cs.values[0] / 0.1 <= 4 * math.pi * 3


def test_whole_space_limit():
    dom = unit_box(boundary_data="0", lower=(-1, -1, -1), upper=(1, 1, 1))
    cfg = InclusionConfiguration(0.05, [[0.0, 0, 0]])
    assert delta_values(dom, cfg) == [1.0]
    assert capacity(dom, cfg, 0.0125).value == pytest.approx(4 * math.pi * 0.05, rel=0.10)


def test_boundary_study_gap_check():
    with pytest.raises(UnderResolvedGapError):
        capacity_boundary_study(unit_box(boundary_data="0"), 0.1, [0.1], 0.025)
    with pytest.raises(ValueError):
        capacity_boundary_study(unit_box(boundary_data="0"), 0.1, [1.5], 0.025)
