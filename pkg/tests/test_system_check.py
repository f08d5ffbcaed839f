import numpy as np
import pytest

from hessmin.energy import ProblemConfig
from hessmin.errors import InputError
from hessmin.grid import ScalarField, boundary_constant, boundary_radial_bump, build_grid
from hessmin.operators import trace_operator
from hessmin.solver import SolveOptions, harmonic_extension, minimize
from hessmin.system_check import (
    SolutionPair,
    TestFunction,
    build_pair,
    check_first_equation,
    default_phase_tau,
    default_test_suite,
    weak_residual_second_equation,
)

from conftest import quartic_density_oracle


def _cfg(grid, **kw):
    defaults = dict(
        p=2.0,
        gamma_plus=1.0,
        gamma_minus=0.0,
        operator=trace_operator(grid.dim),
        boundary=boundary_constant(grid, 0.2),
    )
    defaults.update(kw)
    return ProblemConfig(**defaults)


class TestBuildPair:
    def test_paraboloid_density_is_constant(self, grid_2d_33):
        # u = c|x|^2/2 has laplacian c*d, so m = (c*d)^(p-1) = c*d at p = 2
        g = grid_2d_33
        c = 1.5
        cfg = _cfg(g)
        u = ScalarField.from_callable(g, lambda p: 0.5 * c * np.sum(p * p, axis=-1))
        pair = build_pair(cfg, u)
        np.testing.assert_allclose(pair.m.values[g.interior], c * 2.0, atol=1e-10)
        assert pair.clamped_nodes == 0

    def test_affine_field_zero_density(self, grid_2d_33):
        g = grid_2d_33
        u = ScalarField.from_callable(g, lambda p: 0.3 + p[..., 0])
        pair = build_pair(_cfg(g), u)
        np.testing.assert_allclose(pair.m.values, 0.0, atol=1e-12)

    def test_quartic_density_closed_form(self, quartic_solves):
        g, cfg, res = quartic_solves[129]
        pair = build_pair(cfg, res.u_star)
        exact = quartic_density_oracle(g.points[..., 0])
        err = np.max(np.abs(pair.m.values[g.interior] - exact[g.interior]))
        assert err <= 20.0 * g.h**2
        assert pair.clamped_nodes == 0

    def test_negative_density_rejected(self, grid_2d_33):
        g = grid_2d_33
        u = ScalarField.zeros(g)
        m = ScalarField(g, np.full(g.shape, -1.0))
        with pytest.raises(InputError):
            SolutionPair(u=u, m=m, p=2.0, operator=trace_operator(2))


class TestFirstEquation:
    def test_unclamped_pair_zero_residual(self, quartic_solves):
        g, cfg, res = quartic_solves[65]
        pair = build_pair(cfg, res.u_star)
        assert check_first_equation(pair) == 0.0

    def test_detector_sees_perturbation(self, quartic_solves):
        g, cfg, res = quartic_solves[65]
        pair = build_pair(cfg, res.u_star)
        shifted = SolutionPair(
            u=pair.u,
            m=ScalarField(g, pair.m.values + 1.0),
            p=pair.p,
            operator=pair.operator,
        )
        assert check_first_equation(shifted) > 0.5


class TestTestFunctions:
    def test_hessian_matches_finite_differences(self):
        tf = TestFunction(id="t", center=(0.05, -0.15), radius=0.4)
        rng = np.random.default_rng(3)
        pts = np.array(tf.center) + rng.uniform(-0.35, 0.35, size=(50, 2))
        H = tf.hessian(pts)
        t = 1e-5
        for a in range(2):
            for b in range(2):
                ea = np.zeros(2)
                eb = np.zeros(2)
                ea[a] = t
                eb[b] = t
                fd = (
                    tf.value(pts + ea + eb)
                    - tf.value(pts + ea - eb)
                    - tf.value(pts - ea + eb)
                    + tf.value(pts - ea - eb)
                ) / (4.0 * t * t)
                assert np.max(np.abs(fd - H[:, a, b])) < 1e-4

    def test_vanishes_outside_support(self):
        tf = TestFunction(id="t", center=(0.0, 0.0), radius=0.3)
        pts = np.array([[0.31, 0.0], [0.9, 0.0], [0.0, -0.5]])
        np.testing.assert_array_equal(tf.value(pts), 0.0)
        np.testing.assert_array_equal(tf.hessian(pts), 0.0)

    def test_rejects_support_leaving_ball(self):
        with pytest.raises(InputError):
            TestFunction(id="t", center=(0.8, 0.0), radius=0.3)


class TestDefaultSuite:
    def test_first_is_origin_bump(self, grid_2d_65):
        suite = default_test_suite(grid_2d_65, 1, seed=0)
        assert len(suite) == 1
        assert suite[0].center == (0.0, 0.0)
        assert suite[0].radius == pytest.approx(0.3)

    def test_extents_clear_band(self, grid_2d_33):
        suite = default_test_suite(grid_2d_33, 25, seed=0)
        cap = 1.0 - (grid_2d_33.band_width + 2.0) * grid_2d_33.h
        for tf in suite:
            assert np.linalg.norm(tf.center) + tf.radius <= min(0.99, cap) + 1e-12

    def test_distinct_ids_and_determinism(self, grid_2d_65):
        a = default_test_suite(grid_2d_65, 25, seed=4)
        b = default_test_suite(grid_2d_65, 25, seed=4)
        assert len({t.id for t in a}) == 25
        assert [(t.center, t.radius) for t in a] == [(t.center, t.radius) for t in b]


class TestWeakResidual:
    def test_zero_instance_all_zero(self):
        g = build_grid(2, 33)
        cfg = _cfg(g, gamma_minus=1.0, boundary=boundary_constant(g, 0.0))
        res = minimize(cfg, g, SolveOptions(max_iters=200, grad_tol=1e-9, seed=0))
        pair = build_pair(cfg, res.u_star)
        rep = weak_residual_second_equation(pair, cfg, default_test_suite(g, 5, 0))
        assert rep.el_residual_max == 0.0
        for _, lhs, rhs, diff in rep.weak_residuals:
            assert lhs == rhs == diff == 0.0

    def test_quartic_against_quadrature_oracle(self, quartic_solves):
        # rhs should equal -(gp/2) * int(phi): u > 0 everywhere, p = 2
        g, cfg, res = quartic_solves[129]
        pair = build_pair(cfg, res.u_star)
        tf = TestFunction(id="b", center=(0.0,), radius=0.5)
        rep = weak_residual_second_equation(pair, cfg, [tf])
        _, lhs, rhs, diff = rep.weak_residuals[0]
        xs = np.linspace(-0.5, 0.5, 40001)
        with np.errstate(divide="ignore"):
            profile = np.exp(-1.0 / np.maximum(1.0 - (xs / 0.5) ** 2, 1e-300))
        profile[0] = profile[-1] = 0.0
        int_phi = float(np.trapezoid(profile, xs))
        assert rhs == pytest.approx(-(1.0 / 2.0) * int_phi, rel=1e-3)
        assert diff <= 10.0 * g.h

    def test_unminimized_pair_residual_stays_large(self):
        # the harmonic extension of the boundary data does not satisfy the
        # variational identity; the detector must not vanish under refinement
        vals = []
        for n in (33, 65):
            g = build_grid(2, n)
            cfg = _cfg(g, boundary=boundary_radial_bump(g, 0.3))
            u = harmonic_extension(g, cfg.boundary)
            pair = build_pair(cfg, u)
            rep = weak_residual_second_equation(
                pair, cfg, default_test_suite(build_grid(2, 33), 9, 0)
            )
            vals.append(rep.el_residual_max)
        assert min(vals) > 0.05

    def test_rhs_bounded_by_source_bound(self, quartic_solves):
        g, cfg, res = quartic_solves[65]
        pair = build_pair(cfg, res.u_star)
        suite = default_test_suite(g, 7, seed=2)
        rep = weak_residual_second_equation(pair, cfg, suite)
        w = g.weights
        for tf, (_, _, rhs, _) in zip(suite, rep.weak_residuals):
            phi_int = float(np.sum(np.abs(tf.value(g.points)) * w))
            bound = max(cfg.gamma_plus, abs(cfg.gamma_minus)) / cfg.p * phi_int
            assert abs(rhs) <= bound + 1e-12

    def test_tau_sensitivity_within_reported_bound(self, quartic_solves):
        g, cfg, res = quartic_solves[65]
        pair = build_pair(cfg, res.u_star)
        rep = weak_residual_second_equation(pair, cfg, default_test_suite(g, 7, 2))
        for _, delta, bound in rep.tau_sensitivity:
            assert delta <= bound + 1e-12

    def test_support_touching_band_rejected(self, grid_2d_33):
        g = grid_2d_33
        cfg = _cfg(g)
        u = ScalarField.from_callable(g, lambda p: 0.2 + 0.0 * p[..., 0])
        pair = build_pair(cfg, u)
        wide = TestFunction(id="wide", center=(0.55, 0.0), radius=0.42)
        with pytest.raises(InputError, match="boundary band"):
            weak_residual_second_equation(pair, cfg, [wide])

    def test_default_tau_scales_with_solution(self, quartic_solves):
        g, cfg, res = quartic_solves[65]
        tau = default_phase_tau(res.u_star)
        scale = float(np.max(np.abs(res.u_star.values)))
        assert tau == pytest.approx(10.0 * g.h**2 * scale)
