import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hessmin.errors import InputError, SingularityError
from hessmin.operators import (
    CertificationReport,
    Operator,
    SymMatrix,
    builtin_operator,
    certify_A1,
    certify_A2,
    certify_A3,
    certify_derivative_bounds,
    constant_coefficient,
    derivative,
    frobenius_operator,
    positive_trace_operator,
    scaled_derivative,
    trace_operator,
    weighted_frobenius_operator,
)
from hessmin.operators import eval as op_eval


def _rand_sym(rng, d, k=1):
    raw = rng.standard_normal((k, d, d))
    return 0.5 * (raw + np.swapaxes(raw, -1, -2))


class TestSymMatrix:
    def test_roundtrip(self):
        rng = np.random.default_rng(0)
        for d in (1, 2, 3):
            mat = _rand_sym(rng, d)[0]
            sm = SymMatrix.from_array(mat)
            assert sm.dim == d
            assert sm.entries.shape == (d * (d + 1) // 2,)
            np.testing.assert_allclose(sm.full(), mat, atol=0)

    def test_rejects_asymmetric(self):
        with pytest.raises(InputError):
            SymMatrix.from_array([[0.0, 1.0], [0.0, 0.0]])

    def test_rejects_unsupported_dim(self):
        with pytest.raises(InputError):
            SymMatrix(4, np.zeros(10))


class TestEval:
    def test_trace_at_zero(self):
        assert op_eval(trace_operator(2), np.zeros((2, 2))) == 0.0

    def test_frobenius_identity(self):
        assert op_eval(frobenius_operator(2), np.eye(2)) == pytest.approx(math.sqrt(2.0))

    def test_weighted_constant_two(self):
        op = weighted_frobenius_operator(2, constant_coefficient(2.0), 2.0, 2.0)
        val = op_eval(op, np.diag([3.0, 4.0]))
        assert val == pytest.approx(10.0)  # 2 * sqrt(9 + 16)

    def test_dimension_mismatch(self):
        with pytest.raises(InputError):
            op_eval(trace_operator(2), np.zeros((3, 3)))

    def test_accepts_symmatrix(self):
        sm = SymMatrix.from_array(np.diag([1.0, 2.0]))
        assert op_eval(trace_operator(2), sm) == pytest.approx(3.0)


class TestDerivative:
    def test_trace_is_identity(self):
        rng = np.random.default_rng(1)
        M = _rand_sym(rng, 2)[0]
        np.testing.assert_allclose(derivative(trace_operator(2), M), np.eye(2), atol=0)

    def test_frobenius_gradient(self):
        M = np.diag([1.0, 0.0])
        np.testing.assert_allclose(derivative(frobenius_operator(2), M), M, atol=1e-15)

    def test_weighted_fallback_agrees(self):
        # same operator without an analytic derivative exercises the
        # central-difference fallback; the two must agree to 1e-8
        op = weighted_frobenius_operator(2, constant_coefficient(2.0), 2.0, 2.0)
        fallback = Operator(
            name="weighted_fd",
            dim=2,
            lam=2.0,
            Lam=2.0,
            value_fn=op.value_fn,
            derivative_fn=None,
            coefficient_fn=op.coefficient_fn,
            coefficient_bounds=op.coefficient_bounds,
            nonnegative=True,
        )
        M = np.eye(2)
        expected = (2.0 / math.sqrt(2.0)) * np.eye(2)
        np.testing.assert_allclose(derivative(op, M), expected, atol=1e-12)
        np.testing.assert_allclose(derivative(fallback, M), expected, atol=1e-8)

    def test_fallback_matches_analytic_on_random_samples(self):
        rng = np.random.default_rng(2)
        op = frobenius_operator(2)
        no_analytic = Operator(
            name="frob_fd", dim=2, lam=1.0, Lam=1.0, value_fn=op.value_fn
        )
        Ms = _rand_sym(rng, 2, k=30)
        Ms = Ms[np.linalg.norm(Ms, axis=(1, 2)) > 0.3]
        exact = derivative(op, Ms)
        approx = derivative(no_analytic, Ms)
        assert np.max(np.abs(exact - approx)) < 1e-7

    def test_derivative_always_symmetric(self):
        rng = np.random.default_rng(3)
        for op in (trace_operator(2), frobenius_operator(2), positive_trace_operator(3)):
            Ms = _rand_sym(rng, op.dim, k=20) + 0.5 * np.eye(op.dim)
            der = derivative(op, Ms)
            assert np.max(np.abs(der - np.swapaxes(der, -1, -2))) <= 1e-12

    def test_singularity_error_at_zero(self):
        with pytest.raises(SingularityError):
            derivative(frobenius_operator(2), np.zeros((2, 2)))

    def test_scaled_derivative_zero_weight_at_singularity(self):
        op = frobenius_operator(2)
        mats = np.stack([np.zeros((2, 2)), np.eye(2)])
        out = scaled_derivative(op, mats, np.array([0.0, 2.0 * math.sqrt(2.0)]))
        np.testing.assert_allclose(out[0], 0.0, atol=0)
        np.testing.assert_allclose(out[1], 2.0 * np.eye(2), atol=1e-12)


class TestCertifyA1:
    def test_trace_passes(self):
        report = certify_A1(trace_operator(2), 2000, seed=0)
        assert report.verdict == "pass"
        assert report.n_violations == 0

    def test_trace_bounds_against_eigenvalue_oracle(self):
        # independent check of the inequality the certifier samples:
        # for PSD N, tr(N) = sum(eigs) >= ||N||_F and <= sqrt(d)*||N||_F
        rng = np.random.default_rng(4)
        g = rng.standard_normal((200, 2, 2))
        Ns = np.swapaxes(g, -1, -2) @ g
        eigs = np.linalg.eigvalsh(Ns)
        assert np.all(eigs >= -1e-12)
        tr = eigs.sum(axis=-1)
        fro = np.sqrt((eigs**2).sum(axis=-1))
        assert np.all(tr >= fro - 1e-12)
        assert np.all(tr <= math.sqrt(2.0) * fro + 1e-12)

    def test_frobenius_fails_with_recorded_probe_family(self):
        report = certify_A1(frobenius_operator(2), 2000, seed=0)
        assert report.verdict == "fail"
        eye = np.eye(2)
        probe_hits = [
            v
            for v in report.violations
            if np.allclose(v["M"], -eye) and np.allclose(np.diag(np.diag(v["N"])), v["N"])
        ]
        assert probe_hits, "the M = -I, N = eps*I counterexample family must be recorded"
        # verify one recorded counterexample numerically: F(M+N)-F(M) < lam*||N||
        v = probe_hits[0]
        M, N = np.array(v["M"]), np.array(v["N"])
        op = frobenius_operator(2)
        diff = op_eval(op, M + N) - op_eval(op, M)
        assert diff < np.linalg.norm(N) - 1e-12

    def test_zero_samples_vacuous_pass(self):
        # probes are still evaluated; a pass over them is the vacuous verdict
        report = certify_A1(trace_operator(2), 0, seed=0)
        assert report.verdict == "pass"


class TestCertifyA2:
    def test_trace_passes(self):
        assert certify_A2(trace_operator(2), 2000, seed=1).verdict == "pass"

    def test_frobenius_passes(self):
        assert certify_A2(frobenius_operator(2), 2000, seed=1).verdict == "pass"

    def test_concave_synthetic_fails_with_midpoint_violation(self):
        neg = Operator(
            name="neg_frobenius",
            dim=2,
            lam=1.0,
            Lam=1.0,
            value_fn=lambda m: -np.sqrt(np.sum(m * m, axis=(-2, -1))),
        )
        report = certify_A2(neg, 500, seed=1)
        assert report.verdict == "fail"
        assert report.violations
        assert "t" in report.violations[0]


class TestCertifyA3:
    def test_frobenius_exact_bounds(self):
        assert certify_A3(frobenius_operator(2), 2000, seed=2).verdict == "pass"

    def test_trace_fails_on_negative_definite(self):
        report = certify_A3(trace_operator(2), 2000, seed=2)
        assert report.verdict == "fail"
        assert any(np.allclose(v["M"], -np.eye(2)) for v in report.violations)

    def test_weighted_passes_on_grid_positions(self, grid_2d_33):
        op = weighted_frobenius_operator(2, constant_coefficient(1.7), 1.7, 1.7)
        positions = grid_2d_33.points[grid_2d_33.interior]
        report = certify_A3(op, 2000, seed=2, positions=positions)
        assert report.verdict == "pass"


class TestCertifyDerivativeBounds:
    def test_trace_quadratic_form_is_identity(self):
        assert certify_derivative_bounds(trace_operator(2), 2000, seed=3).verdict == "pass"

    def test_frobenius_fails_at_negative_definite(self):
        report = certify_derivative_bounds(frobenius_operator(2), 2000, seed=3)
        assert report.verdict == "fail"
        assert any(np.allclose(v["M"], -np.eye(2)) for v in report.violations)

    def test_zero_direction_never_violates(self):
        report = certify_derivative_bounds(trace_operator(2), 0, seed=3)
        # probes include xi = 0; both sides vanish there
        assert report.verdict == "pass"


class TestDeterminismAndReports:
    def test_identical_seeds_identical_reports(self):
        a = certify_A1(frobenius_operator(2), 500, seed=7)
        b = certify_A1(frobenius_operator(2), 500, seed=7)
        assert a.worst_margin == b.worst_margin
        assert a.n_violations == b.n_violations
        assert a.to_dict() == b.to_dict()

    def test_report_invariant_verdict_matches_violations(self):
        with pytest.raises(InputError):
            CertificationReport(
                assumption="A1",
                samples=1,
                n_violations=1,
                violations=({"margin": -1.0},),
                verdict="pass",
                worst_margin=-1.0,
            )

    def test_builtin_registry(self):
        for name in ("trace", "frobenius", "positive_trace", "weighted_frobenius"):
            op = builtin_operator(name, 2, coefficient=1.5)
            assert op.dim == 2
        with pytest.raises(InputError):
            builtin_operator("pucci", 2)

    def test_a1_claim_requires_f0_zero(self):
        with pytest.raises(InputError):
            Operator(
                name="shifted",
                dim=2,
                lam=1.0,
                Lam=1.0,
                value_fn=lambda m: np.trace(m, axis1=-2, axis2=-1) + 1.0,
                claims={"A1_elliptic"},
            )


class TestConvexityGradientInequality:
    @given(seed=st.integers(min_value=0, max_value=10_000))
    @settings(max_examples=25, deadline=None)
    def test_supporting_hyperplane(self, seed):
        # for convex F with a derivative: F(M2) >= F(M1) + <F'(M1), M2 - M1>
        rng = np.random.default_rng(seed)
        op = frobenius_operator(2)
        M1 = _rand_sym(rng, 2)[0] + 0.3 * np.eye(2)
        if np.linalg.norm(M1) < 1e-6:
            M1 = np.eye(2)
        M2 = _rand_sym(rng, 2)[0]
        lhs = op_eval(op, M2)
        rhs = op_eval(op, M1) + np.sum(derivative(op, M1) * (M2 - M1))
        assert lhs >= rhs - 1e-8
