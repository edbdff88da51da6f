import os
import subprocess
import sys

import numpy as np
import pytest

from dilute_homog import kernels
from dilute_homog.domain import InclusionConfiguration, unit_ball
from dilute_homog.grid import Grid
from dilute_homog.solver import assemble, conductivity_field, solve_with_inclusions

compiled = pytest.mark.skipif(kernels.BACKEND != "compiled", reason="extension not built")


@pytest.fixture(scope="module")
def assembly():
    dom = unit_ball(conductivity="1 + 0.3*x*y")
    grid = Grid(dom, 0.08)
    a = conductivity_field(grid)
    return assemble(grid, a.values, [[0.3, 0.0, 0.0], [-0.3, 0.1, 0.0]], 0.32)


def test_backend_name():
    assert kernels.BACKEND in ("compiled", "python")
    assert kernels.get() is kernels.get(kernels.BACKEND)
    with pytest.raises(ValueError):
        kernels.get("fortran")


def test_env_var_forces_fallback():
    env = dict(os.environ, DILUTE_HOMOG_BACKEND="python")
    out = subprocess.run([sys.executable, "-c", "import dilute_homog; print(dilute_homog.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


@compiled
def test_apply_agrees(assembly, rng):
    x = rng.standard_normal(assembly.n + 1)
    x[-1] = 0.0
    yc = assembly.matvec(x, "compiled")
    yp = assembly.matvec(x, "python")
    assert np.allclose(yc, yp, rtol=1e-13, atol=1e-12)


def test_operator_symmetric_positive(assembly, rng):
    u = rng.standard_normal(assembly.n + 1)
    v = rng.standard_normal(assembly.n + 1)
    u[-1] = v[-1] = 0.0
    Au, Av = assembly.matvec(u), assembly.matvec(v)
    assert abs(v @ Au - u @ Av) < 1e-10 * abs(v @ Au)
    assert u @ Au > 0


@compiled
def test_solutions_agree():
    dom = unit_ball()
    cfg = InclusionConfiguration(0.2, [[0.2, 0.1, 0.0], [-0.3, -0.2, 0.1]])
    oc = solve_with_inclusions(dom, cfg, 0.05, backend="compiled")
    op = solve_with_inclusions(dom, cfg, 0.05, backend="python")
    assert abs(oc.dirichlet_energy - op.dirichlet_energy) < 1e-9 * op.dirichlet_energy
    assert np.allclose(oc.inclusion_constants, op.inclusion_constants, atol=1e-8)
    assert np.max(np.abs(oc.field.values - op.field.values)) < 1e-8
