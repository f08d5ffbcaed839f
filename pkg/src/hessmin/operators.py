"""Fully nonlinear operators on symmetric matrices.

An :class:`Operator` evaluates ``F(M)`` and its entrywise derivative
``F_ij(M) = dF/dm_ij`` on a single matrix or a batch of shape ``(..., d, d)``,
and can be certified against the structural assumptions used by the energy:

* A1 (uniform ellipticity): ``lam*||N|| <= F(M+N) - F(M) <= Lam*||N||`` for
  positive semidefinite increments ``N``, with ``F(0) = 0``;
* A2 (convexity in ``M``);
* A3 (two-sided growth): ``lam*||M|| <= F(M) <= Lam*||M||`` on all of S(d);
* derivative ellipticity: ``lam*|xi|^2 <= F_ij(M) xi_i xi_j <= Lam*|xi|^2``.

All matrix norms are Frobenius norms; the equivalence constants between norm
conventions can be absorbed into ``(lam, Lam)``.  Certification is sampling
based and therefore evidence, not proof; reports record the sample count.
Operators are immutable and all evaluations are pure, so instances may be
shared freely across threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import InputError, SingularityError

CLAIM_A1 = "A1_elliptic"
CLAIM_A2 = "A2_convex"
CLAIM_A3 = "A3_growth"

#: absolute tolerance for exact-arithmetic certification margins
CERT_TOL = 1e-12
#: looser tolerance when the derivative comes from the finite-difference fallback
CERT_TOL_FD = 1e-8
#: relative step for the central-difference derivative fallback
FD_STEP = 1e-5

_MAX_RECORDED_VIOLATIONS = 20


def frobenius_norm(mats: np.ndarray) -> np.ndarray:
    """Frobenius norm over the trailing two axes."""
    mats = np.asarray(mats, dtype=float)
    return np.sqrt(np.sum(mats * mats, axis=(-2, -1)))


@dataclass(frozen=True)
class SymMatrix:
    """Dense real symmetric matrix stored as packed upper-triangle entries.

    Supported dimensions are 1, 2 and 3.  ``entries`` holds the
    ``d*(d+1)/2`` upper-triangle values in row-major order.
    """

    dim: int
    entries: np.ndarray

    def __post_init__(self):
        if self.dim not in (1, 2, 3):
            raise InputError(f"SymMatrix dim must be 1, 2 or 3, got {self.dim}")
        entries = np.asarray(self.entries, dtype=float)
        expected = self.dim * (self.dim + 1) // 2
        if entries.shape != (expected,):
            raise InputError(
                f"SymMatrix(dim={self.dim}) needs {expected} packed entries, "
                f"got shape {entries.shape}"
            )
        if not np.all(np.isfinite(entries)):
            raise InputError("SymMatrix entries must be finite")
        object.__setattr__(self, "entries", entries)

    @classmethod
    def from_array(cls, mat, tol: float = 1e-12) -> "SymMatrix":
        mat = np.asarray(mat, dtype=float)
        if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
            raise InputError(f"expected a square matrix, got shape {mat.shape}")
        d = mat.shape[0]
        if np.max(np.abs(mat - mat.T)) > tol * (1.0 + np.max(np.abs(mat))):
            raise InputError("matrix is not symmetric")
        iu = np.triu_indices(d)
        return cls(d, mat[iu].copy())

    def full(self) -> np.ndarray:
        """Expand to a dense (d, d) array."""
        d = self.dim
        out = np.zeros((d, d))
        iu = np.triu_indices(d)
        out[iu] = self.entries
        out.T[iu] = self.entries
        return out


def _as_matrix_batch(M, dim: int) -> np.ndarray:
    if isinstance(M, SymMatrix):
        if M.dim != dim:
            raise InputError(f"matrix dim {M.dim} does not match operator dim {dim}")
        return M.full()
    M = np.asarray(M, dtype=float)
    if M.ndim < 2 or M.shape[-1] != dim or M.shape[-2] != dim:
        raise InputError(
            f"expected matrices of shape (..., {dim}, {dim}), got {M.shape}"
        )
    return M


@dataclass(frozen=True)
class Operator:
    """A fully nonlinear operator with declared ellipticity constants.

    ``value_fn`` maps ``(..., d, d)`` symmetric matrices to values ``(...)``;
    ``derivative_fn``, when present, returns the matrix of partial derivatives
    with respect to the matrix entries.  When absent, :func:`derivative` falls
    back to symmetric central differences.  ``coefficient_fn`` multiplies the
    value by a spatial weight ``A(x)`` evaluated at positions ``(..., d)``;
    spatial operators default to the origin when no position is supplied.
    ``singular_fn`` marks matrices where the derivative does not exist.
    """

    name: str
    dim: int
    lam: float
    Lam: float
    value_fn: Callable[[np.ndarray], np.ndarray]
    derivative_fn: Callable[[np.ndarray], np.ndarray] | None = None
    claims: frozenset = frozenset()
    coefficient_fn: Callable[[np.ndarray], np.ndarray] | None = None
    coefficient_bounds: tuple[float, float] | None = None
    nonnegative: bool = False
    singular_fn: Callable[[np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        if self.dim not in (1, 2, 3):
            raise InputError(f"operator dim must be 1, 2 or 3, got {self.dim}")
        if not (0.0 < self.lam <= self.Lam):
            raise InputError(
                f"ellipticity constants need 0 < lam <= Lam, got ({self.lam}, {self.Lam})"
            )
        object.__setattr__(self, "claims", frozenset(self.claims))
        if CLAIM_A1 in self.claims:
            zero = np.zeros((self.dim, self.dim))
            if abs(float(self.value_fn(zero))) > 1e-14:
                raise InputError(f"operator {self.name!r} claims A1 but F(0) != 0")

    @property
    def is_spatial(self) -> bool:
        return self.coefficient_fn is not None

    def _coefficient(self, x, batch_shape) -> np.ndarray | float:
        if self.coefficient_fn is None:
            return 1.0
        if x is None:
            x = np.zeros(self.dim)
        x = np.asarray(x, dtype=float)
        a = np.asarray(self.coefficient_fn(x), dtype=float)
        return np.broadcast_to(a, batch_shape) if a.shape != batch_shape else a


def eval(op: Operator, M, x=None):  # noqa: A001 - spec operation name
    """Evaluate ``F(M)`` (times the spatial coefficient, if any).

    Returns a float for a single matrix, an array for a batch.
    """
    mats = _as_matrix_batch(M, op.dim)
    vals = np.asarray(op.value_fn(mats), dtype=float)
    vals = vals * op._coefficient(x, vals.shape)
    return float(vals) if vals.ndim == 0 else vals


def _fd_derivative(op: Operator, mats: np.ndarray) -> np.ndarray:
    """Symmetric central differences in the packed entry directions.

    The step scales like ``FD_STEP * (1 + ||M||)`` to balance truncation and
    rounding in double precision.
    """
    d = op.dim
    steps = FD_STEP * (1.0 + frobenius_norm(mats))
    out = np.zeros_like(mats)
    for i in range(d):
        for j in range(i, d):
            direction = np.zeros((d, d))
            if i == j:
                direction[i, i] = 1.0
            else:
                direction[i, j] = direction[j, i] = 0.5
            t = steps[..., None, None] * direction
            df = (op.value_fn(mats + t) - op.value_fn(mats - t)) / (2.0 * steps)
            out[..., i, j] = df
            out[..., j, i] = df
    return out


def derivative(op: Operator, M, x=None):
    """Matrix derivative ``F_ij(M)``, analytic when available.

    Raises :class:`SingularityError` at declared non-differentiable points
    (for instance the Frobenius-norm operator at ``M = 0``).
    """
    mats = _as_matrix_batch(M, op.dim)
    if op.singular_fn is not None:
        singular = np.asarray(op.singular_fn(mats))
        if np.any(singular):
            raise SingularityError(
                f"operator {op.name!r} is not differentiable at the requested "
                f"point(s); first singular matrix:\n{mats[singular][0] if mats.ndim > 2 else mats}"
            )
    if op.derivative_fn is not None:
        der = np.asarray(op.derivative_fn(mats), dtype=float)
    else:
        der = _fd_derivative(op, mats)
    coeff = op._coefficient(x, der.shape[:-2])
    if np.ndim(coeff) or coeff != 1.0:
        der = der * np.asarray(coeff)[..., None, None]
    return der


def scaled_derivative(op: Operator, mats: np.ndarray, scale: np.ndarray, x=None) -> np.ndarray:
    """``scale * F_ij(M)`` with the convention ``0 * undefined = 0``.

    Used by chain-rule consumers: wherever ``scale`` vanishes the product is
    zero even if ``F_ij`` itself is singular there, which matches the limit of
    ``[F]^(p-1) F_ij`` for the shipped operators.
    """
    mats = _as_matrix_batch(mats, op.dim)
    scale = np.asarray(scale, dtype=float)
    if op.singular_fn is None:
        return scale[..., None, None] * derivative(op, mats, x=x)
    singular = np.asarray(op.singular_fn(mats))
    active = ~singular & (scale != 0.0)
    out = np.zeros(mats.shape, dtype=float)
    if np.any(active):
        out[active] = scale[active, None, None] * derivative(
            op, mats[active], x=None if x is None else np.asarray(x)[active]
        )
    if np.any(singular & (scale != 0.0)):
        raise SingularityError(
            f"operator {op.name!r}: nonzero weight at a non-differentiable point"
        )
    return out


# ---------------------------------------------------------------------------
# built-in operators


def trace_operator(dim: int) -> Operator:
    """``F(M) = Tr(M)``: linear, elliptic with (1, sqrt(d)), fails A3."""

    def value(mats):
        return np.trace(mats, axis1=-2, axis2=-1)

    def deriv(mats):
        eye = np.eye(dim)
        return np.broadcast_to(eye, mats.shape).copy()

    return Operator(
        name="trace",
        dim=dim,
        lam=1.0,
        Lam=math.sqrt(dim),
        value_fn=value,
        derivative_fn=deriv,
        claims={CLAIM_A1, CLAIM_A2},
    )


def _frobenius_value(mats):
    return frobenius_norm(mats)


def _frobenius_deriv(mats):
    nrm = frobenius_norm(mats)
    safe = np.where(nrm == 0.0, 1.0, nrm)
    return mats / safe[..., None, None]


def _frobenius_singular(mats):
    return frobenius_norm(mats) == 0.0


def frobenius_operator(dim: int) -> Operator:
    """``F(M) = ||M||_F``: convex with exact growth bounds, fails A1."""
    return Operator(
        name="frobenius",
        dim=dim,
        lam=1.0,
        Lam=1.0,
        value_fn=_frobenius_value,
        derivative_fn=_frobenius_deriv,
        claims={CLAIM_A2, CLAIM_A3},
        nonnegative=True,
        singular_fn=_frobenius_singular,
    )


def weighted_frobenius_operator(
    dim: int,
    coefficient_fn: Callable[[np.ndarray], np.ndarray],
    a_min: float,
    a_max: float,
    name: str = "weighted_frobenius",
) -> Operator:
    """``F(x, M) = A(x) ||M||_F`` with ``0 < a_min <= A(x) <= a_max``."""
    if not (0.0 < a_min <= a_max):
        raise InputError("weighted operator needs 0 < a_min <= a_max")
    return Operator(
        name=name,
        dim=dim,
        lam=a_min,
        Lam=a_max,
        value_fn=_frobenius_value,
        derivative_fn=_frobenius_deriv,
        claims={CLAIM_A2, CLAIM_A3},
        coefficient_fn=coefficient_fn,
        coefficient_bounds=(a_min, a_max),
        nonnegative=True,
        singular_fn=_frobenius_singular,
    )


def constant_coefficient(a: float) -> Callable[[np.ndarray], np.ndarray]:
    def coeff(x):
        x = np.asarray(x, dtype=float)
        return np.full(x.shape[:-1], float(a))

    return coeff


def positive_trace_operator(dim: int) -> Operator:
    """``F(M) = max(Tr(M), 0)``: convex but breaks the A3 lower bound.

    Shipped for negative-test coverage only; excluded from the solve path.
    """

    def value(mats):
        return np.maximum(np.trace(mats, axis1=-2, axis2=-1), 0.0)

    def deriv(mats):
        tr = np.trace(mats, axis1=-2, axis2=-1)
        eye = np.eye(dim)
        return np.where((tr > 0.0)[..., None, None], eye, 0.0)

    def singular(mats):
        return np.trace(mats, axis1=-2, axis2=-1) == 0.0

    return Operator(
        name="positive_trace",
        dim=dim,
        lam=1.0,
        Lam=math.sqrt(dim),
        value_fn=value,
        derivative_fn=deriv,
        claims={CLAIM_A2},
        nonnegative=True,
        singular_fn=singular,
    )


_BUILTIN_FACTORIES = {
    "trace": trace_operator,
    "frobenius": frobenius_operator,
    "positive_trace": positive_trace_operator,
}


def builtin_operator(name: str, dim: int, coefficient: float = 1.0) -> Operator:
    """Instantiate a shipped operator by configuration name."""
    if name == "weighted_frobenius":
        return weighted_frobenius_operator(
            dim, constant_coefficient(coefficient), a_min=coefficient, a_max=coefficient
        )
    if name not in _BUILTIN_FACTORIES:
        raise InputError(
            f"unknown operator {name!r}; choose from "
            f"{sorted(_BUILTIN_FACTORIES) + ['weighted_frobenius']}"
        )
    return _BUILTIN_FACTORIES[name](dim)


# ---------------------------------------------------------------------------
# certification


@dataclass(frozen=True)
class CertificationReport:
    """Outcome of sampling one structural assumption.

    ``violations`` keeps at most 20 recorded counterexamples;
    ``n_violations`` counts all of them.  ``worst_margin`` is the smallest
    slack observed across all checked inequalities (negative means violated).
    """

    assumption: str
    samples: int
    n_violations: int
    violations: tuple
    verdict: str
    worst_margin: float
    operator: str = ""
    seed: int | None = None

    def __post_init__(self):
        ok = (self.verdict == "pass") == (self.n_violations == 0)
        if not ok:
            raise InputError("verdict must be 'pass' exactly when no violations exist")

    def to_dict(self) -> dict:
        return {
            "assumption": self.assumption,
            "operator": self.operator,
            "samples": self.samples,
            "verdict": self.verdict,
            "worst_margin": self.worst_margin,
            "n_violations": self.n_violations,
            "violations": list(self.violations),
            "seed": self.seed,
        }


def _random_symmetric(rng: np.random.Generator, k: int, d: int) -> np.ndarray:
    """Gaussian symmetric matrices with log-uniform scale in [1e-2, 1e1]."""
    raw = rng.standard_normal((k, d, d))
    sym = 0.5 * (raw + np.swapaxes(raw, -1, -2))
    scales = 10.0 ** rng.uniform(-2.0, 1.0, size=k)
    return sym * scales[:, None, None]


def _random_psd(rng: np.random.Generator, k: int, d: int) -> np.ndarray:
    """PSD matrices G^T G rescaled to ||N||_F in [1e-3, 1e1].

    The rescaling keeps degenerate tiny increments from drowning in the
    certification tolerance.
    """
    g = rng.standard_normal((k, d, d))
    psd = np.swapaxes(g, -1, -2) @ g
    nrm = frobenius_norm(psd)
    nrm = np.where(nrm == 0.0, 1.0, nrm)
    targets = 10.0 ** rng.uniform(-3.0, 1.0, size=k)
    return psd * (targets / nrm)[:, None, None]


def _random_positions(rng: np.random.Generator, k: int, d: int) -> np.ndarray:
    """Uniform points in the open unit ball."""
    v = rng.standard_normal((k, d))
    v /= np.maximum(np.linalg.norm(v, axis=-1, keepdims=True), 1e-30)
    radii = rng.uniform(0.0, 1.0, size=(k, 1)) ** (1.0 / d)
    return 0.999 * v * radii


def _positions_for(op, rng, k, positions):
    if not op.is_spatial:
        return None
    if positions is not None:
        positions = np.asarray(positions, dtype=float)
        reps = int(np.ceil(k / positions.shape[0]))
        return np.tile(positions, (reps, 1))[:k]
    return _random_positions(rng, k, op.dim)


def _mat_list(m: np.ndarray) -> list:
    return np.asarray(m, dtype=float).tolist()


def _build_report(assumption, op, seed, margins, describe) -> CertificationReport:
    bad = np.flatnonzero(margins < -CERT_TOL) if margins.size else np.array([], int)
    recorded = tuple(describe(int(i)) for i in bad[:_MAX_RECORDED_VIOLATIONS])
    worst = float(margins.min()) if margins.size else 0.0
    return CertificationReport(
        assumption=assumption,
        samples=int(margins.size),
        n_violations=int(bad.size),
        violations=recorded,
        verdict="pass" if bad.size == 0 else "fail",
        worst_margin=worst,
        operator=op.name,
        seed=seed,
    )


def certify_A1(op: Operator, n_samples: int, seed: int, positions=None) -> CertificationReport:
    """Sample ``lam*||N|| <= F(M+N) - F(M) <= Lam*||N||`` over PSD ``N``.

    A deterministic probe family ``(M, N) = (-I, eps*I)`` is prepended to the
    random draw so that operators violating A1 record that counterexample.
    """
    if n_samples < 0:
        raise InputError("n_samples must be nonnegative")
    rng = np.random.default_rng(seed)
    d = op.dim
    eye = np.eye(d)
    probe_eps = (1e-3, 1e-2, 1e-1, 1.0)
    Ms = np.concatenate(
        [np.stack([-eye] * len(probe_eps)), _random_symmetric(rng, n_samples, d)]
    )
    Ns = np.concatenate(
        [np.stack([e * eye for e in probe_eps]), _random_psd(rng, n_samples, d)]
    )
    xs = _positions_for(op, rng, Ms.shape[0], positions)
    diff = eval(op, Ms + Ns, xs) - eval(op, Ms, xs)
    nrm = frobenius_norm(Ns)
    margins = np.minimum(diff - op.lam * nrm, op.Lam * nrm - diff)

    def describe(i):
        return {
            "M": _mat_list(Ms[i]),
            "N": _mat_list(Ns[i]),
            "margin": float(margins[i]),
        }

    return _build_report("A1", op, seed, margins, describe)


def certify_A2(op: Operator, n_samples: int, seed: int, positions=None) -> CertificationReport:
    """Sample the convexity inequality at random pairs and weights."""
    if n_samples < 0:
        raise InputError("n_samples must be nonnegative")
    rng = np.random.default_rng(seed)
    d = op.dim
    eye = np.eye(d)
    M1 = np.concatenate([np.stack([eye, -eye]), _random_symmetric(rng, n_samples, d)])
    M2 = np.concatenate([np.stack([-eye, 2 * eye]), _random_symmetric(rng, n_samples, d)])
    ts = np.concatenate([[0.5, 0.5], rng.uniform(0.0, 1.0, size=n_samples)])
    xs = _positions_for(op, rng, M1.shape[0], positions)
    mid = ts[:, None, None] * M1 + (1.0 - ts[:, None, None]) * M2
    margins = ts * eval(op, M1, xs) + (1.0 - ts) * eval(op, M2, xs) - eval(op, mid, xs)

    def describe(i):
        return {
            "M1": _mat_list(M1[i]),
            "M2": _mat_list(M2[i]),
            "t": float(ts[i]),
            "margin": float(margins[i]),
        }

    return _build_report("A2", op, seed, margins, describe)


def certify_A3(op: Operator, n_samples: int, seed: int, positions=None) -> CertificationReport:
    """Sample ``lam*||M|| <= F(M) <= Lam*||M||`` over all of S(d)."""
    if n_samples < 0:
        raise InputError("n_samples must be nonnegative")
    rng = np.random.default_rng(seed)
    d = op.dim
    eye = np.eye(d)
    probes = [eye, -eye]
    if d >= 2:
        ind = np.diag([1.0] + [-1.0] * (d - 1))
        probes.append(ind)
    Ms = np.concatenate([np.stack(probes), _random_symmetric(rng, n_samples, d)])
    xs = _positions_for(op, rng, Ms.shape[0], positions)
    vals = eval(op, Ms, xs)
    nrm = frobenius_norm(Ms)
    # for spatial operators the growth bounds hold pointwise in x with
    # lam = a_min, Lam = a_max, which is how the constants were declared
    margins = np.minimum(vals - op.lam * nrm, op.Lam * nrm - vals)

    def describe(i):
        return {"M": _mat_list(Ms[i]), "margin": float(margins[i])}

    return _build_report("A3", op, seed, margins, describe)


def certify_derivative_bounds(
    op: Operator, n_samples: int, seed: int, positions=None
) -> CertificationReport:
    """Sample ``lam*|xi|^2 <= F_ij(M) xi_i xi_j <= Lam*|xi|^2``.

    Uses the analytic derivative when present (tolerance 1e-12) and the
    finite-difference fallback otherwise (tolerance 1e-8).  Samples at
    declared singular points are skipped rather than silently evaluated.
    """
    if n_samples < 0:
        raise InputError("n_samples must be nonnegative")
    rng = np.random.default_rng(seed)
    d = op.dim
    eye = np.eye(d)
    e1 = np.zeros(d)
    e1[0] = 1.0
    Ms = np.concatenate([np.stack([-eye, eye]), _random_symmetric(rng, n_samples, d)])
    xis = np.concatenate(
        [np.stack([e1, np.zeros(d)]), rng.standard_normal((n_samples, d))]
    )
    xs = _positions_for(op, rng, Ms.shape[0], positions)
    if op.singular_fn is not None:
        keep = ~np.asarray(op.singular_fn(Ms))
        Ms, xis = Ms[keep], xis[keep]
        if xs is not None:
            xs = xs[keep]
    der = derivative(op, Ms, x=xs)
    quad = np.einsum("kij,ki,kj->k", der, xis, xis)
    xi2 = np.sum(xis * xis, axis=-1)
    margins = np.minimum(quad - op.lam * xi2, op.Lam * xi2 - quad)
    tol = CERT_TOL if op.derivative_fn is not None else CERT_TOL_FD
    bad = np.flatnonzero(margins < -tol)
    recorded = tuple(
        {
            "M": _mat_list(Ms[int(i)]),
            "xi": _mat_list(xis[int(i)]),
            "margin": float(margins[int(i)]),
        }
        for i in bad[:_MAX_RECORDED_VIOLATIONS]
    )
    return CertificationReport(
        assumption="derivative_bounds",
        samples=int(margins.size),
        n_violations=int(bad.size),
        violations=recorded,
        verdict="pass" if bad.size == 0 else "fail",
        worst_margin=float(margins.min()) if margins.size else 0.0,
        operator=op.name,
        seed=seed,
    )


def certify_all(op: Operator, n_samples: int, seed: int, positions=None) -> list:
    """Run the four certifications with per-assumption derived seeds."""
    return [
        certify_A1(op, n_samples, seed, positions),
        certify_A2(op, n_samples, seed + 1, positions),
        certify_A3(op, n_samples, seed + 2, positions),
        certify_derivative_bounds(op, n_samples, seed + 3, positions),
    ]
