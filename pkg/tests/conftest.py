"""Shared fixtures: grids and the expensive converged solves."""

import time

import numpy as np
import pytest

from hessmin.analysis import refinement_driver
from hessmin.energy import ProblemConfig
from hessmin.grid import boundary_constant, boundary_radial_bump, build_grid
from hessmin.operators import frobenius_operator, trace_operator
from hessmin.solver import SolveOptions, minimize

QUARTIC_GP = 1.0
QUARTIC_A = 0.2


def quartic_oracle(x, gp=QUARTIC_GP, a=QUARTIC_A):
    """Closed-form minimizer of the 1-D instance (trace, p=2, gm=0, g=a).

    Stationarity of int (u'')^2 + gp*u+ with only the endpoint values pinned
    gives u'''' = -gp/2 on {u > 0} with natural conditions u''(+-1) = 0;
    substituting the ansatz and the boundary values yields

        u(x) = a + gp*(6x^2 - x^4 - 5)/48,

    positive throughout provided a > 5*gp/48.  Its density is
    m = u'' = gp*(1 - x^2)/4 >= 0.
    """
    return a + gp * (6.0 * x**2 - x**4 - 5.0) / 48.0


def quartic_density_oracle(x, gp=QUARTIC_GP):
    return gp * (1.0 - x**2) / 4.0


def quartic_config(grid, gp=QUARTIC_GP, a=QUARTIC_A):
    return ProblemConfig(
        p=2.0,
        gamma_plus=gp,
        gamma_minus=0.0,
        operator=trace_operator(1),
        boundary=boundary_constant(grid, a),
    )


def convex_2d_config(grid):
    """The convex 2-D study instance: trace, p=2, gp=1, radial bump trace."""
    return ProblemConfig(
        p=2.0,
        gamma_plus=1.0,
        gamma_minus=0.0,
        operator=trace_operator(2),
        boundary=boundary_radial_bump(grid, 0.3),
    )


@pytest.fixture(scope="session")
def grid_1d_65():
    return build_grid(1, 65, band_width=0.5)


@pytest.fixture(scope="session")
def grid_2d_33():
    return build_grid(2, 33)


@pytest.fixture(scope="session")
def grid_2d_65():
    return build_grid(2, 65)


@pytest.fixture(scope="session")
def quartic_solves():
    """Converged 1-D quartic solves at n = 65 and 129 (plus wall time)."""
    out = {}
    t0 = time.perf_counter()
    for n in (65, 129):
        g = build_grid(1, n, band_width=0.5)
        cfg = quartic_config(g)
        res = minimize(cfg, g, SolveOptions(max_iters=3000, grad_tol=1e-7, seed=0))
        out[n] = (g, cfg, res)
    out["elapsed"] = time.perf_counter() - t0
    return out


@pytest.fixture(scope="session")
def convex_2d_refinement():
    """Warm-started refinement study at n in {33, 65, 129} (criteria 6 and 7)."""
    grids = [build_grid(2, n) for n in (33, 65, 129)]
    cfg = convex_2d_config(grids[0])
    opts = SolveOptions(max_iters=4000, grad_tol=3e-8, seed=0)
    t0 = time.perf_counter()
    rr = refinement_driver(
        cfg,
        grids,
        opts,
        checks=("L44_1", "L44_2", "T44", "P26"),
        k_tests=25,
        test_seed=0,
    )
    return grids, cfg, rr, time.perf_counter() - t0


@pytest.fixture(scope="session")
def frobenius_p3_refinement():
    """p = 3 Frobenius instance at n in {65, 129} (criterion 8)."""
    grids = [build_grid(2, n) for n in (65, 129)]
    cfg = ProblemConfig(
        p=3.0,
        gamma_plus=1.0,
        gamma_minus=0.0,
        operator=frobenius_operator(2),
        boundary=boundary_radial_bump(grids[0], 0.3),
    )
    opts = SolveOptions(max_iters=4000, grad_tol=3e-8, seed=0)
    t0 = time.perf_counter()
    rr = refinement_driver(
        cfg, grids, opts, checks=("C45", "T44", "L44_2"), k_tests=9, test_seed=0
    )
    return grids, cfg, rr, time.perf_counter() - t0


def random_field_with_trace(grid, cfg, seed, scale=0.1):
    """A trace-respecting random field for gradient and coercivity tests."""
    from hessmin.grid import ScalarField, apply_trace

    rng = np.random.default_rng(seed)
    vals = scale * rng.standard_normal(grid.shape)
    return apply_trace(ScalarField(grid, vals), cfg.boundary)
