"""Discrete norms, regularity-estimate verification, free-boundary extraction.

The estimate checks measure both sides of the integrability and regularity
inequalities satisfied by weak-solution pairs and fit the implied constant:

* L44_1 (localization):  ||m||_L1(B1) <= ||m||_L1(B1/2) + C ||f~||_inf;
* L44_2 (integrability gain):  ||m||_L^{d/(d-1)}(B1) <= C1 ||m||_L1 + C2 ||f~||_inf;
* T44 (Sobolev regularity):  ||u||_W^{2,q}(B1/2) <= C (||u||_inf + ||m||_L1^{1/(p-1)}),
  with q = d(p-1)/(d-1);
* C45 (Holder gradient):  exponent alpha = 1 - (d-1)/(p-1) for p > d, seminorm
  of the discrete gradient sampled over node pairs;
* P26 (Poincare): the trace-constrained lower bound used by the coercivity
  argument, fitted over random vanishing-trace fields.

The inequalities hold with *some* constant; what is testable numerically is
that the fitted constant does not blow up under refinement, so a verdict is
"stable" when the fitted values vary by at most 50% along the refinement
trace.  The right-hand-side source is always the two-phase density bound
||f~||_inf = max(gp, |gm|) / p.

At d = 1 the gain exponent d/(d-1) degenerates; those checks fall back to
q = 2 and are flagged heuristic.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .energy import ProblemConfig
from .errors import InputError
from .grid import (
    BoundaryData,
    Grid,
    ScalarField,
    apply_trace,
    gradient_field,
    second_differences,
)
from .operators import frobenius_norm
from .solver import SolveOptions, SolveResult, minimize
from .system_check import (
    SolutionPair,
    build_pair,
    default_test_suite,
    weak_residual_second_equation,
)

STABILITY_SPREAD = 0.5

ESTIMATE_IDS = ("L44_1", "L44_2", "T44", "C45", "P26")


@dataclass(frozen=True)
class NormSuite:
    """The norms entering the section-4 estimates for one pair."""

    l1_ball: float
    l1_half: float
    l_gain: float
    f_inf: float
    w2q_half: float
    u_inf: float
    holder_alpha: float | None = None
    holder_seminorm: float | None = None


@dataclass
class EstimateVerdict:
    """One inequality check: measured sides, fitted constant, stability.

    ``refinement_trace`` holds (h, fitted_constant) pairs; the verdict is
    "stable" when the fitted constants vary by at most 50% along the trace
    and no flags (e.g. an unconverged solve) disqualify the run.
    """

    estimate_id: str
    lhs: float
    rhs_components: dict
    fitted_constant: float
    refinement_trace: list = field(default_factory=list)
    verdict: str = "stable"
    flags: tuple = ()

    def judge(self) -> "EstimateVerdict":
        vals = [c for _, c in self.refinement_trace]
        if any(f in ("unconverged_solve", "partial_trace") for f in self.flags):
            self.verdict = "unstable"
            return self
        if len(vals) <= 1:
            self.verdict = "stable"
            return self
        top = max(abs(v) for v in vals)
        spread = (max(vals) - min(vals)) / top if top > 0 else 0.0
        self.verdict = "stable" if spread <= STABILITY_SPREAD else "unstable"
        return self

    def to_dict(self) -> dict:
        return {
            "estimate_id": self.estimate_id,
            "lhs": self.lhs,
            "rhs_components": dict(self.rhs_components),
            "fitted_constant": self.fitted_constant,
            "refinement_trace": [list(t) for t in self.refinement_trace],
            "verdict": self.verdict,
            "flags": list(self.flags),
        }


@dataclass(frozen=True)
class FreeBoundary:
    """Sign partition of a field and the interface between the phases.

    The three phase masks partition the non-exterior nodes; boundary cells
    are phase nodes facing a node of a different class where at least one
    side is a strict-sign phase.
    """

    positive_cells: np.ndarray
    negative_cells: np.ndarray
    zero_cells: np.ndarray
    boundary_cells: np.ndarray
    measures: dict


def two_phase_source_bound(cfg: ProblemConfig) -> float:
    """||f~||_inf for the two-phase right-hand side."""
    return max(cfg.gamma_plus, abs(cfg.gamma_minus)) / cfg.p


def lq_norm(f: ScalarField, q: float, subdomain_radius: float = 1.0) -> float:
    """(sum_{|x|<r} |f|^q w)^(1/q) over non-exterior nodes."""
    if q < 1.0:
        raise InputError(f"Lq norms need q >= 1, got {q}")
    if not 0.0 < subdomain_radius <= 1.0:
        raise InputError("subdomain_radius must lie in (0, 1]")
    grid = f.grid
    mask = grid.nonexterior & (grid.radius < subdomain_radius)
    return float(np.sum(np.abs(f.values[mask]) ** q * grid.weights[mask]) ** (1.0 / q))


def linf_norm(f: ScalarField, subdomain_radius: float = 1.0) -> float:
    grid = f.grid
    mask = grid.nonexterior & (grid.radius < subdomain_radius)
    return float(np.max(np.abs(f.values[mask]))) if np.any(mask) else 0.0


def _gain_exponent(dim: int) -> tuple:
    """(exponent, heuristic flags) for the integrability gain."""
    if dim >= 2:
        return dim / (dim - 1.0), ()
    return 2.0, ("heuristic_d1",)


def _sobolev_exponent(p: float, dim: int) -> tuple:
    if dim >= 2:
        return dim * (p - 1.0) / (dim - 1.0), ()
    return 2.0, ("heuristic_d1",)


def holder_alpha(p: float, dim: int) -> float:
    """alpha = 1 - (d-1)/(p-1); requires p > d."""
    if p <= dim:
        raise InputError(f"Holder analysis assumes p > d (got p={p}, d={dim})")
    return 1.0 - (dim - 1.0) / (p - 1.0)


def w2q_norm(u: ScalarField, q: float, subdomain_radius: float = 0.5) -> float:
    """Discrete W^{2,q} norm: Lq norms of u, Du (Euclidean) and D2u (Frobenius)."""
    grid = u.grid
    mask = grid.interior & (grid.radius < subdomain_radius)
    w = grid.weights[mask]
    uq = np.sum(np.abs(u.values[mask]) ** q * w)
    du = gradient_field(u)[mask]
    duq = np.sum(np.linalg.norm(du, axis=-1) ** q * w)
    d2 = second_differences(u.values, grid.h, grid.dim)[mask]
    d2q = np.sum(frobenius_norm(d2) ** q * w)
    return float((uq + duq + d2q) ** (1.0 / q))


def holder_seminorm(
    u: ScalarField, alpha: float, n_pairs: int, seed: int, subdomain_radius: float = 0.5
) -> float:
    """Sampled Holder seminorm of the discrete gradient on B_{1/2}.

    max over sampled node pairs of |Du(x) - Du(y)| / |x - y|^alpha, with the
    pair separation at least 2h (below that the central-difference gradient
    carries no information).  Deterministic given the seed.
    """
    if n_pairs < 100:
        raise InputError("n_pairs must be >= 100 for a meaningful seminorm sample")
    grid = u.grid
    mask = grid.interior & (grid.radius < subdomain_radius)
    idx = np.argwhere(mask)
    if idx.shape[0] < 2:
        return 0.0
    rng = np.random.default_rng(seed)
    i = rng.integers(0, idx.shape[0], size=n_pairs)
    j = rng.integers(0, idx.shape[0], size=n_pairs)
    du = gradient_field(u)
    xi = grid.points[tuple(idx[i].T)]
    xj = grid.points[tuple(idx[j].T)]
    sep = np.linalg.norm(xi - xj, axis=-1)
    keep = sep >= 2.0 * grid.h
    if not np.any(keep):
        return 0.0
    dui = du[tuple(idx[i].T)]
    duj = du[tuple(idx[j].T)]
    num = np.linalg.norm(dui - duj, axis=-1)
    return float(np.max(num[keep] / sep[keep] ** alpha))


def norm_suite(pair: SolutionPair, cfg: ProblemConfig, n_pairs: int = 200, seed: int = 0) -> NormSuite:
    dim = pair.u.grid.dim
    gain_q, _ = _gain_exponent(dim)
    sob_q, _ = _sobolev_exponent(cfg.p, dim)
    alpha = seminorm = None
    if cfg.holder_admissible:
        alpha = holder_alpha(cfg.p, dim)
        seminorm = holder_seminorm(pair.u, alpha, n_pairs, seed)
    return NormSuite(
        l1_ball=lq_norm(pair.m, 1.0, 1.0),
        l1_half=lq_norm(pair.m, 1.0, 0.5),
        l_gain=lq_norm(pair.m, gain_q, 1.0),
        f_inf=two_phase_source_bound(cfg),
        w2q_half=w2q_norm(pair.u, sob_q),
        u_inf=linf_norm(pair.u),
        holder_alpha=alpha,
        holder_seminorm=seminorm,
    )


def check_localization(pair: SolutionPair, f_inf: float) -> EstimateVerdict:
    """L1 localization: fitted C = (||m||_L1(B1) - ||m||_L1(B1/2)) / ||f~||_inf."""
    l1_ball = lq_norm(pair.m, 1.0, 1.0)
    l1_half = lq_norm(pair.m, 1.0, 0.5)
    fitted = (l1_ball - l1_half) / max(f_inf, 1e-12)
    v = EstimateVerdict(
        estimate_id="L44_1",
        lhs=l1_ball,
        rhs_components={"l1_half": l1_half, "f_inf": f_inf},
        fitted_constant=fitted,
        refinement_trace=[(pair.u.grid.h, fitted)],
    )
    return v.judge()


def check_integrability_gain(pair: SolutionPair, f_inf: float) -> EstimateVerdict:
    """Lebesgue gain: fitted C = ||m||_{L^{d/(d-1)}} / (||m||_L1 + ||f~||_inf)."""
    dim = pair.u.grid.dim
    q, flags = _gain_exponent(dim)
    l_gain = lq_norm(pair.m, q, 1.0)
    l1 = lq_norm(pair.m, 1.0, 1.0)
    fitted = l_gain / max(l1 + f_inf, 1e-12)
    v = EstimateVerdict(
        estimate_id="L44_2",
        lhs=l_gain,
        rhs_components={"l1_ball": l1, "f_inf": f_inf},
        fitted_constant=fitted,
        refinement_trace=[(pair.u.grid.h, fitted)],
        flags=flags,
    )
    return v.judge()


def check_regularity(pair: SolutionPair, cfg: ProblemConfig) -> EstimateVerdict:
    """Interior W^{2,q} control by ||u||_inf + ||m||_L1^{1/(p-1)}."""
    if cfg.p <= 1.0:
        raise InputError("regularity check needs p > 1")
    dim = pair.u.grid.dim
    q, flags = _sobolev_exponent(cfg.p, dim)
    lhs = w2q_norm(pair.u, q)
    u_inf = linf_norm(pair.u)
    m_term = lq_norm(pair.m, 1.0, 1.0) ** (1.0 / (cfg.p - 1.0))
    fitted = lhs / max(u_inf + m_term, 1e-12)
    v = EstimateVerdict(
        estimate_id="T44",
        lhs=lhs,
        rhs_components={"u_inf": u_inf, "l1_ball_pow": m_term, "q": q},
        fitted_constant=fitted,
        refinement_trace=[(pair.u.grid.h, fitted)],
        flags=flags,
    )
    return v.judge()


def check_holder(
    pair: SolutionPair, cfg: ProblemConfig, n_pairs: int = 200, seed: int = 0
) -> EstimateVerdict:
    """Gradient Holder seminorm at alpha = 1 - (d-1)/(p-1); needs p > d."""
    dim = pair.u.grid.dim
    alpha = holder_alpha(cfg.p, dim)
    sem = holder_seminorm(pair.u, alpha, n_pairs, seed)
    u_inf = linf_norm(pair.u)
    m_term = lq_norm(pair.m, 1.0, 1.0) ** (1.0 / (cfg.p - 1.0))
    fitted = (u_inf + sem) / max(u_inf + m_term, 1e-12)
    v = EstimateVerdict(
        estimate_id="C45",
        lhs=u_inf + sem,
        rhs_components={"u_inf": u_inf, "l1_ball_pow": m_term, "alpha": alpha, "seminorm": sem},
        fitted_constant=fitted,
        refinement_trace=[(pair.u.grid.h, fitted)],
    )
    return v.judge()


def barrier_field(grid: Grid, delta: float) -> ScalarField:
    """The radial comparison profile [(1+delta)^2 - |x|^2]^2 (test authorship)."""
    if delta <= 0.0:
        raise InputError("delta must be positive")
    vals = ((1.0 + delta) ** 2 - grid.radius**2) ** 2
    return ScalarField(grid, vals)


# ---------------------------------------------------------------------------
# Poincare check


def _random_vanishing_fields(grid: Grid, n_samples: int, seed: int):
    """Smooth-ish random fields that vanish on the band and exterior."""
    rng = np.random.default_rng(seed)
    modes = []
    for kx in range(1, 4):
        for ky in range(1, 4 if grid.dim == 2 else 2):
            modes.append((kx, ky))
    pts = grid.points
    seam = 1.0 - grid.band_width * grid.h
    bubble = np.maximum(seam * seam - grid.radius**2, 0.0) ** 2
    cutoff = np.where(grid.interior, bubble, 0.0)
    fields = []
    for _ in range(n_samples):
        vals = np.zeros(grid.shape)
        for kx, ky in modes:
            c = rng.standard_normal()
            term = np.sin(np.pi * kx * (pts[..., 0] + 1.0) / 2.0)
            if grid.dim == 2:
                term = term * np.sin(np.pi * ky * (pts[..., 1] + 1.0) / 2.0)
            vals += c * term
        fields.append(ScalarField(grid, vals * cutoff))
    return fields


def poincare_check(grid: Grid, p: float, n_samples: int = 120, seed: int = 0) -> EstimateVerdict:
    """Trace-constrained Poincare inequality, fitted once per grid.

    For fields with vanishing trace the ratio int|Du|^p / int|u|^p is bounded
    below; with C below that bound there are C1 > 0, C2 >= 0 such that
    int|Du|^p - C int|u|^p + C2 >= C1 (int|Du|^p + int|u|^p).  Constants are
    fitted on the first half of the samples and verified on all of them.
    """
    if n_samples < 10:
        raise InputError("n_samples must be >= 10")
    fields = _random_vanishing_fields(grid, n_samples, seed)
    dp = np.empty(n_samples)
    up = np.empty(n_samples)
    for i, f in enumerate(fields):
        du = gradient_field(f)
        mask = grid.nonexterior
        w = grid.weights[mask]
        dp[i] = float(np.sum(np.linalg.norm(du[mask], axis=-1) ** p * w))
        up[i] = float(np.sum(np.abs(f.values[mask]) ** p * w))
    ratios = dp / np.maximum(up, 1e-300)
    half = max(n_samples // 2, 1)
    rho_fit = float(np.min(ratios[:half]))
    c_p_est = float(np.min(ratios))
    # generous margins so constants fitted on the first half of the samples
    # survive verification on all of them
    c = 0.5 * rho_fit
    c1_fit = 0.05 * rho_fit / (1.0 + rho_fit)
    c2 = 0.0
    holds = bool(np.all(dp - c * up + c2 >= c1_fit * (dp + up) - 1e-12))
    v = EstimateVerdict(
        estimate_id="P26",
        lhs=float(np.min(dp - c * up)),
        rhs_components={"C": c, "C1": c1_fit, "C2": c2, "C_p_estimate": c_p_est},
        fitted_constant=c1_fit,
        refinement_trace=[(grid.h, c1_fit)],
        flags=() if holds and c1_fit > 0 else ("poincare_violated",),
    )
    v.judge()
    if not holds or c1_fit <= 0:
        v.verdict = "unstable"
    return v


# ---------------------------------------------------------------------------
# free boundary


def _neighbor_shift(mask_vals: np.ndarray, axis: int, step: int) -> np.ndarray:
    out = np.zeros_like(mask_vals)
    src = [slice(None)] * mask_vals.ndim
    dst = [slice(None)] * mask_vals.ndim
    if step > 0:
        dst[axis] = slice(step, None)
        src[axis] = slice(None, -step)
    else:
        dst[axis] = slice(None, step)
        src[axis] = slice(-step, None)
    out[tuple(dst)] = mask_vals[tuple(src)]
    return out


def extract_free_boundary(u: ScalarField, tau: float = 0.0) -> FreeBoundary:
    """Sign partition with tolerance tau plus the interface nodes.

    Phases partition the non-exterior nodes exactly; their quadrature
    measures sum to the measure of the non-exterior region.
    """
    if tau < 0.0:
        raise InputError("tau must be >= 0")
    grid = u.grid
    domain = grid.nonexterior
    pos = domain & (u.values > tau)
    neg = domain & (u.values < -tau)
    zero = domain & ~pos & ~neg

    labels = np.zeros(grid.shape, dtype=int)
    labels[pos] = 1
    labels[neg] = -1
    labels[zero] = 9  # distinct from exterior 0
    boundary = np.zeros(grid.shape, dtype=bool)
    for ax in range(grid.dim):
        for s in (-1, 1):
            nb_labels = _neighbor_shift(labels, ax, s)
            nb_domain = _neighbor_shift(domain.astype(int), ax, s) > 0
            differs = domain & nb_domain & (nb_labels != labels)
            strict = (np.abs(labels) == 1) | (np.abs(nb_labels) == 1)
            boundary |= differs & strict
    w = grid.weights
    measures = {
        "positive": float(np.sum(w[pos])),
        "negative": float(np.sum(w[neg])),
        "zero": float(np.sum(w[zero])),
    }
    return FreeBoundary(
        positive_cells=pos,
        negative_cells=neg,
        zero_cells=zero,
        boundary_cells=boundary,
        measures=measures,
    )


# ---------------------------------------------------------------------------
# refinement driver


@dataclass
class RefinementResult:
    """Per-estimate verdicts with traces, plus the weak-residual trace."""

    verdicts: list
    residual_trace: list
    solves: list
    pairs: list


def interpolate_field(u: ScalarField, target: Grid) -> ScalarField:
    """Linear interpolation onto a finer grid (warm starts)."""
    src = u.grid
    if src.dim != target.dim:
        raise InputError("grids have different dimensions")
    if src.dim == 1:
        vals = np.interp(target.points[..., 0], src.axes, u.values)
    else:
        interp = RegularGridInterpolator(
            (src.axes, src.axes), u.values, method="linear", bounds_error=False, fill_value=None
        )
        vals = interp(target.points.reshape(-1, src.dim)).reshape(target.shape)
    return ScalarField(target, vals)


def refinement_driver(
    cfg: ProblemConfig,
    grids,
    opts: SolveOptions | None = None,
    checks=("L44_1", "L44_2", "T44", "C45", "P26"),
    k_tests: int = 25,
    test_seed: int = 0,
    holder_pairs: int = 200,
    poincare_samples: int = 120,
) -> RefinementResult:
    """Solve on each grid (warm-started), run the checks, assemble traces.

    Needs at least two grids with strictly increasing n and a boundary
    profile that can be re-materialized.  Solver failures on later grids
    flag the partial trace instead of discarding it; failures on the first
    grid propagate.
    """
    grids = list(grids)
    if len(grids) < 2:
        raise InputError("refinement needs at least two grids")
    if any(a.n >= b.n for a, b in zip(grids, grids[1:])):
        raise InputError("grids must have strictly increasing n")
    opts = opts or SolveOptions()
    checks = tuple(checks)
    unknown = set(checks) - set(ESTIMATE_IDS)
    if unknown:
        raise InputError(f"unknown estimate ids: {sorted(unknown)}")

    solves: list = []
    pairs: list = []
    residual_trace: list = []
    per_grid_verdicts: list = []
    flags: list = []
    prev_u: ScalarField | None = None
    # one suite built on the coarsest grid keeps the residual trace a true
    # refinement study of fixed functionals (supports stay valid on finer grids)
    suite = default_test_suite(grids[0], k_tests, test_seed)

    for grid in grids:
        bd = cfg.boundary.on_grid(grid)
        cfg_g = cfg.with_boundary(bd)
        run_opts = opts
        if prev_u is not None:
            run_opts = replace(opts, init="provided", init_field=interpolate_field(prev_u, grid))
        try:
            result = minimize(cfg_g, grid, run_opts)
        except Exception:
            if not solves:
                raise
            flags.append("partial_trace")
            break
        if not result.converged:
            flags.append("unconverged_solve")
        solves.append(result)
        prev_u = result.u_star
        pair = build_pair(cfg_g, result.u_star)
        pairs.append(pair)
        report = weak_residual_second_equation(pair, cfg_g, suite)
        residual_trace.append((grid.h, report.el_residual_max))

        f_inf = two_phase_source_bound(cfg_g)
        here = {}
        if "L44_1" in checks:
            here["L44_1"] = check_localization(pair, f_inf)
        if "L44_2" in checks:
            here["L44_2"] = check_integrability_gain(pair, f_inf)
        if "T44" in checks:
            here["T44"] = check_regularity(pair, cfg_g)
        if "C45" in checks and cfg_g.holder_admissible:
            here["C45"] = check_holder(pair, cfg_g, n_pairs=holder_pairs, seed=test_seed)
        if "P26" in checks:
            here["P26"] = poincare_check(grid, cfg_g.p, n_samples=poincare_samples, seed=test_seed)
        per_grid_verdicts.append(here)

    verdicts = []
    run_flags = tuple(flags)
    ids = [i for i in checks if any(i in v for v in per_grid_verdicts)]
    for est_id in ids:
        entries = [v[est_id] for v in per_grid_verdicts if est_id in v]
        final = entries[-1]
        final.refinement_trace = [e.refinement_trace[0] for e in entries]
        final.flags = tuple(final.flags) + run_flags
        verdicts.append(final.judge())
    return RefinementResult(
        verdicts=verdicts, residual_trace=residual_trace, solves=solves, pairs=pairs
    )
