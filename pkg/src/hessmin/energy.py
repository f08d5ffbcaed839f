"""Discrete two-phase Hessian energy: evaluation, gradient, coercivity.

The energy of a field u with trace g is

    I[u] = sum_E [F(D2u)]^p w  +  sum_{w>0} (gp * u+ + gm * u-) w,

where E is the Hessian-quadrature mask (every positive-weight node whose
stencil fits in the array), u+ = max(u, 0) and u- = max(-u, 0).  The phase
part may be smoothed: the C-infinity surrogate
``0.5*(t + sqrt(t^2 + eps^2)) - eps/2`` never differs from max(t, 0) by more
than eps/2, which gives the energy-level bound |I_eps - I_0| <=
(gp + |gm|) |B1| eps / 2.

How [F]^p treats negative F is configurable.  ``power`` is the plain power
F^p (the natural choice for even integer p, e.g. the squared-trace plate
energy; a domain error for non-integer p when F goes negative).  ``clamp``
uses max(F, 0)^p, sensible for p >= 2, and counts clamped nodes.  ``signed``
is the odd extension sign(F)|F|^p, kept as a diagnostic only.  ``auto``
resolves to ``power`` for nonnegative operators or even integer p and to
``clamp`` otherwise.  Clamping is never applied silently when an even power
is available: a clamped even-power objective admits degenerate steep "tent"
quasi-minimizers and loses the variational problem.

All functions are pure in (config, field); gradient accumulation uses fixed
slicing order, so results are bit-reproducible across thread counts.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from .errors import DomainError, InputError
from .grid import BoundaryData, Grid, ScalarField, second_differences, shifted
from .operators import Operator, frobenius_norm, scaled_derivative
from .operators import eval as op_eval

POWER_MODES = ("auto", "power", "clamp", "signed")

#: kink-flagging tolerance is this fraction of the smoothing scale
KINK_TOL_FACTOR = 0.1


@dataclass(frozen=True)
class ProblemConfig:
    """Problem data: exponent, phase coefficients, operator, boundary trace.

    Standing hypotheses: p > 1, p > d/2, gamma_plus >= 0 and
    gamma_plus + gamma_minus > 0.
    """

    p: float
    gamma_plus: float
    gamma_minus: float
    operator: Operator
    boundary: BoundaryData
    smoothing_eps: float = 0.0
    hessian_power: str = "auto"

    def __post_init__(self):
        if not self.p > 1.0:
            raise InputError(f"p must satisfy p > 1, got {self.p}")
        if self.gamma_plus < 0.0:
            raise InputError("gamma_plus must be >= 0")
        if not self.gamma_plus + self.gamma_minus > 0.0:
            raise InputError(
                "phase coefficients must satisfy gamma_plus + gamma_minus > 0"
            )
        if self.smoothing_eps < 0.0:
            raise InputError("smoothing_eps must be >= 0")
        if self.hessian_power not in POWER_MODES:
            raise InputError(f"hessian_power must be one of {POWER_MODES}")
        if not self.p > self.operator.dim / 2.0:
            raise InputError(
                f"p must exceed d/2 = {self.operator.dim / 2.0} for the solution class"
            )

    @property
    def dim(self) -> int:
        return self.operator.dim

    @property
    def holder_admissible(self) -> bool:
        """Whether the Holder analysis hypothesis p > d holds."""
        return self.p > self.operator.dim

    @property
    def power_mode(self) -> str:
        if self.hessian_power != "auto":
            return self.hessian_power
        if self.operator.nonnegative or _is_even_integer(self.p):
            return "power"
        return "clamp"

    def with_boundary(self, boundary: BoundaryData) -> "ProblemConfig":
        return replace(self, boundary=boundary)


def _is_even_integer(p: float) -> bool:
    return float(p).is_integer() and int(p) % 2 == 0


@dataclass(frozen=True)
class EnergyBreakdown:
    """Energy terms; total = hessian_term + phase_term exactly."""

    hessian_term: float
    phase_term: float
    total: float
    coercivity_lower_bound: float


class CoercivityCheck(NamedTuple):
    lhs: float
    rhs: float
    passed: bool


def smoothed_positive(t: np.ndarray, eps: float) -> np.ndarray:
    """Smooth surrogate of max(t, 0); within eps/2 of it everywhere."""
    t = np.asarray(t, dtype=float)
    if eps == 0.0:
        return np.maximum(t, 0.0)
    return 0.5 * (t + np.sqrt(t * t + eps * eps)) - eps / 2.0


def smoothed_negative(t: np.ndarray, eps: float) -> np.ndarray:
    return smoothed_positive(-np.asarray(t, dtype=float), eps)


def _phase_slopes(t: np.ndarray, eps: float) -> tuple:
    """Derivatives of the smoothed positive/negative parts.

    At eps = 0 this is the chosen subgradient: slope 1/2 at exact kinks.
    """
    t = np.asarray(t, dtype=float)
    if eps == 0.0:
        s = np.sign(t)
    else:
        s = t / np.sqrt(t * t + eps * eps)
    return 0.5 * (1.0 + s), -0.5 * (1.0 - s)


def _hessian_batch(cfg: ProblemConfig, u: ScalarField):
    grid = u.grid
    if grid.dim != cfg.operator.dim:
        raise InputError(
            f"operator dim {cfg.operator.dim} does not match grid dim {grid.dim}"
        )
    mask = grid.hess_mask
    full = second_differences(u.values, grid.h, grid.dim)
    mats = full[mask]
    xs = grid.points[mask] if cfg.operator.is_spatial else None
    fvals = op_eval(cfg.operator, mats, xs)
    return mask, mats, xs, np.atleast_1d(fvals)


def power_values(cfg: ProblemConfig, fvals: np.ndarray, mask: np.ndarray) -> np.ndarray:
    mode = cfg.power_mode
    p = cfg.p
    if mode == "power":
        if float(p).is_integer():
            return fvals ** int(p)
        if np.any(fvals < 0.0):
            idx = np.argwhere(mask)[int(np.argmax(fvals < 0.0))]
            raise DomainError(
                f"[F]^p undefined: F < 0 at node {tuple(int(i) for i in idx)} "
                f"with non-integer p={p}; use clamp mode or an even integer p"
            )
        return fvals**p
    if mode == "clamp":
        return np.maximum(fvals, 0.0) ** p
    return np.sign(fvals) * np.abs(fvals) ** p


def power_slopes(cfg: ProblemConfig, fvals: np.ndarray) -> np.ndarray:
    mode = cfg.power_mode
    p = cfg.p
    if mode == "power":
        if float(p).is_integer():
            return p * fvals ** (int(p) - 1)
        return p * fvals ** (p - 1.0)
    if mode == "clamp":
        return p * np.maximum(fvals, 0.0) ** (p - 1.0)
    return p * np.abs(fvals) ** (p - 1.0)


def evaluate(cfg: ProblemConfig, u: ScalarField, eps: float | None = None) -> EnergyBreakdown:
    """Energy of ``u`` (whose trace should already be applied).

    ``eps`` overrides the config smoothing scale; pass 0 for the exact
    (unsmoothed) phase term used in reports and acceptance checks.
    """
    if eps is None:
        eps = cfg.smoothing_eps
    grid = u.grid
    mask, mats, _, fvals = _hessian_batch(cfg, u)
    w_hess = grid.weights[mask]
    hessian_term = float(np.sum(power_values(cfg, fvals, mask) * w_hess))

    nonext = grid.nonexterior
    v = u.values[nonext]
    w_phase = grid.weights[nonext]
    phase_term = float(
        np.sum(
            (
                cfg.gamma_plus * smoothed_positive(v, eps)
                + cfg.gamma_minus * smoothed_negative(v, eps)
            )
            * w_phase
        )
    )
    coercivity = float(
        cfg.operator.lam**cfg.p * np.sum(frobenius_norm(mats) ** cfg.p * w_hess)
    )
    return EnergyBreakdown(
        hessian_term=hessian_term,
        phase_term=phase_term,
        total=hessian_term + phase_term,
        coercivity_lower_bound=coercivity,
    )


def count_clamped(cfg: ProblemConfig, u: ScalarField) -> int:
    """Number of Hessian-quadrature nodes with F(D2u) < 0."""
    _, _, _, fvals = _hessian_batch(cfg, u)
    return int(np.sum(fvals < 0.0))


def _axis_adjoint(G: np.ndarray, axis: int, dim: int, h: float) -> np.ndarray:
    e = tuple(1 if a == axis else 0 for a in range(dim))
    me = tuple(-s for s in e)
    return (shifted(G, e) + shifted(G, me) - 2.0 * G) / (h * h)


def _cross_adjoint(G: np.ndarray, h: float) -> np.ndarray:
    return (
        shifted(G, (1, 1))
        + shifted(G, (-1, -1))
        - shifted(G, (1, -1))
        - shifted(G, (-1, 1))
    ) / (4.0 * h * h)


def gradient(cfg: ProblemConfig, u: ScalarField, eps: float | None = None) -> ScalarField:
    """Gradient of the energy with respect to interior node values.

    The Hessian part is the chain rule p*[F]^(p-1)*F_ij pushed through the
    transpose of the second-difference stencils; the phase part is the
    smoothed slope (the chosen subgradient when eps = 0, with kink nodes
    reported separately by :func:`kink_nodes`).  Boundary-band components are
    zero because the trace is fixed.
    """
    if eps is None:
        eps = cfg.smoothing_eps
    grid = u.grid
    mask, mats, xs, fvals = _hessian_batch(cfg, u)
    scale = grid.weights[mask] * power_slopes(cfg, fvals)
    gmats = scaled_derivative(cfg.operator, mats, scale, xs)

    gfull = np.zeros(grid.shape + (grid.dim, grid.dim))
    gfull[mask] = gmats
    acc = np.zeros(grid.shape)
    for ax in range(grid.dim):
        acc += _axis_adjoint(gfull[..., ax, ax], ax, grid.dim, grid.h)
    if grid.dim == 2:
        acc += _cross_adjoint(gfull[..., 0, 1] + gfull[..., 1, 0], grid.h)

    slope_pos, slope_neg = _phase_slopes(u.values, eps)
    acc += grid.weights * (cfg.gamma_plus * slope_pos + cfg.gamma_minus * slope_neg)
    acc[~grid.interior] = 0.0
    return ScalarField(grid, acc)


def kink_nodes(cfg: ProblemConfig, u: ScalarField, eps: float | None = None) -> np.ndarray:
    """Interior nodes where the phase term is non-smooth at scale eps.

    With eps = 0 the subgradient returned by :func:`gradient` is flagged
    exactly at the zeros of u.
    """
    if eps is None:
        eps = cfg.smoothing_eps
    tol = KINK_TOL_FACTOR * eps
    return u.grid.interior & (np.abs(u.values) <= tol)


def coercivity_check(cfg: ProblemConfig, u: ScalarField) -> CoercivityCheck:
    """Check I[u] >= lam^p * ||D2_h u||^p_{L^p} (exact phase, eps = 0).

    Established only for gamma_plus, gamma_minus >= 0; refuses otherwise
    because the inequality chain is not available at the discrete level for
    negative phase weights.
    """
    if cfg.gamma_minus < 0.0:
        raise InputError(
            "coercivity check requires gamma_minus >= 0: for gamma_minus < 0 the "
            "discrete lower-bound chain is not established"
        )
    breakdown = evaluate(cfg, u, eps=0.0)
    lhs = breakdown.total
    rhs = breakdown.coercivity_lower_bound
    passed = lhs >= rhs - 1e-10 * (1.0 + abs(lhs))
    return CoercivityCheck(lhs=lhs, rhs=rhs, passed=passed)
