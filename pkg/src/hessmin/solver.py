"""Minimization of the discrete energy over fields with fixed boundary trace.

The optimizer is monotone accelerated gradient descent (FISTA-style momentum
with adaptive restart) plus backtracking line search, wrapped in a smoothing
continuation: each stage minimizes the eps-smoothed energy and warm-starts
the next, ending at a small positive eps.  Step acceptance always uses the
smoothed energy of the current stage, never a clamped diagnostic.

Only the Dirichlet trace is constrained: band and exterior values stay
pinned to g and the iterate moves in the interior nodes.  Stationarity is
measured as max over interior nodes of |dI/du_j| / w_j, a quadrature-density
scale that is comparable across grid resolutions.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp
from scipy.fft import dstn
from scipy.sparse.linalg import splu

from .energy import ProblemConfig, count_clamped, evaluate, gradient
from .errors import InputError, NumericFailure, SolverFailure
from .grid import Grid, ScalarField, apply_trace, shifted
from .operators import CLAIM_A2, CLAIM_A3

_STEP_GROW = 1.3
_STEP_MIN = 1e-20
_STATIONARITY_CHECK_EVERY = 10
_DIVERGENCE_FACTOR = 1e3

INIT_MODES = ("boundary_extension", "zero", "random", "provided")


@dataclass(frozen=True)
class SolveOptions:
    """Descent controls.

    ``eps_schedule``: strictly decreasing smoothing scales ending positive;
    ``None`` derives one from the boundary amplitude.  ``grad_tol`` applies
    to the max-norm of the projected (preconditioned) gradient over interior
    nodes, which estimates the remaining error in node values.  ``step_init``,
    ``step_shrink`` and ``sufficient_decrease`` parametrize backtracking.
    """

    max_iters: int = 4000
    grad_tol: float = 1e-7
    eps_schedule: tuple | None = None
    step_init: float = 1.0
    step_shrink: float = 0.5
    sufficient_decrease: float = 1e-4
    seed: int = 0
    init: str = "boundary_extension"
    init_field: ScalarField | None = None

    def __post_init__(self):
        if self.max_iters < 1:
            raise InputError("max_iters must be >= 1")
        if self.grad_tol <= 0.0:
            raise InputError("grad_tol must be positive")
        if self.init not in INIT_MODES:
            raise InputError(f"init must be one of {INIT_MODES}")
        if self.eps_schedule is not None:
            sched = tuple(float(e) for e in self.eps_schedule)
            if sched[-1] <= 0.0:
                raise InputError("eps_schedule must end at a positive value")
            if any(a <= b for a, b in zip(sched, sched[1:])):
                raise InputError("eps_schedule must be strictly decreasing")
            object.__setattr__(self, "eps_schedule", sched)
        if not (0.0 < self.step_shrink < 1.0):
            raise InputError("step_shrink must lie in (0, 1)")
        if self.step_init <= 0.0 or self.sufficient_decrease <= 0.0:
            raise InputError("step_init and sufficient_decrease must be positive")


@dataclass
class SolveResult:
    """Minimizer plus descent metadata.

    ``energy_history`` holds the accepted (smoothed) energies; it is
    non-increasing within each smoothing stage, whose offsets are in
    ``stage_starts``.
    """

    u_star: ScalarField
    energy_history: list
    stage_starts: list
    grad_norm_final: float
    iterations: int
    clamp_count: int
    converged: bool
    start_energies: list | None = None


def default_eps_schedule(cfg: ProblemConfig) -> tuple:
    """Four decades of smoothing below the boundary-amplitude scale."""
    g = cfg.boundary.g
    scale = float(np.max(np.abs(g.values[g.grid.nonexterior])))
    if scale == 0.0:
        scale = 1.0
    return (0.1 * scale, 0.01 * scale, 1e-3 * scale, 1e-4 * scale)


class SpectralPreconditioner:
    """Inverse of the square-domain discrete bilaplacian, via sine transforms.

    The Hessian-energy quadratic form is spectrally comparable to a weighted
    bilaplacian; on the embedding square that operator diagonalizes in sine
    modes, so its inverse costs one DST round trip per application.
    ``shift`` absorbs the diagonal curvature of the smoothed phase term.
    """

    def __init__(self, grid: Grid, shift: float = 0.0):
        self.grid = grid
        m = grid.n - 2
        k = np.arange(1, m + 1)
        mu = (2.0 - 2.0 * np.cos(np.pi * k / (grid.n - 1))) / grid.h**2
        if grid.dim == 1:
            lam = mu**2
        else:
            lam = (mu[:, None] + mu[None, :]) ** 2
        wbar = grid.h**grid.dim
        self.denom = 2.0 * wbar * (lam + shift)
        self.inner = (slice(1, -1),) * grid.dim

    def apply(self, residual: np.ndarray) -> np.ndarray:
        block = residual[self.inner]
        coeffs = dstn(block, type=1, norm="ortho")
        coeffs /= self.denom
        out = np.zeros_like(residual)
        out[self.inner] = dstn(coeffs, type=1, norm="ortho")
        out[~self.grid.interior] = 0.0
        return out


def _reference_form(grid: Grid) -> sp.csr_matrix:
    """Sparse reference quadratic form 2 L^T W L over all nodes.

    L holds the discrete-Laplacian rows of every Hessian-quadrature node;
    the form is the exact energy Hessian for the squared-trace instance and
    spectrally equivalent for the other shipped operators.
    """
    n_nodes = int(np.prod(grid.shape))
    lin = np.arange(n_nodes).reshape(grid.shape)
    rows_idx = np.where(grid.hess_mask.ravel())[0]
    nrows = rows_idx.size
    row_of = np.full(n_nodes, -1, dtype=int)
    row_of[rows_idx] = np.arange(nrows)
    center = np.where(grid.hess_mask)
    ri_base = row_of[lin[center]]
    h2 = grid.h * grid.h
    data = [np.full(nrows, -2.0 * grid.dim / h2)]
    ri = [ri_base]
    ci = [lin[center]]
    for ax in range(grid.dim):
        for s in (-1, 1):
            nb = tuple(center[a] + (s if a == ax else 0) for a in range(grid.dim))
            ri.append(ri_base)
            ci.append(lin[nb])
            data.append(np.full(nrows, 1.0 / h2))
    L = sp.coo_matrix(
        (np.concatenate(data), (np.concatenate(ri), np.concatenate(ci))),
        shape=(nrows, n_nodes),
    ).tocsr()
    W = sp.diags(grid.weights.ravel()[rows_idx])
    return (2.0 * (L.T @ W @ L)).tocsr()


class BallPreconditioner:
    """SPD preconditioner for the energy Hessian on the masked ball.

    Additive Schwarz combination of two parts: the square-domain spectral
    inverse, cut off smoothly (fixed physical ramp width) away from the
    pinned seam so the hard restriction introduces no kink energy, plus an
    exact sparse solve of the reference form on the seam annulus, which
    carries the modes the spectral part cannot see.  The measured condition
    number of the preconditioned quadratic form stays at a few hundred
    across grid resolutions, where the raw form degrades like h^-4.
    """

    _RAMP_WIDTH = 0.12

    def __init__(self, grid: Grid, shift: float = 0.0):
        self.grid = grid
        self.spectral = SpectralPreconditioner(grid, shift=shift)
        non_edge = np.zeros(grid.shape, dtype=bool)
        non_edge[(slice(1, -1),) * grid.dim] = True
        if np.array_equal(grid.interior, non_edge):
            # pinned set is exactly the array frame: the square-domain
            # spectral inverse is already the right-domain solve
            self.chi = non_edge.astype(float)
            self.annulus_idx = np.array([], dtype=int)
            self.lu = None
            return
        seam = 1.0 - grid.band_width * grid.h
        ramp = min(self._RAMP_WIDTH, seam / 3.0)
        chi = np.clip((seam - ramp / 3.0 - grid.radius) / ramp, 0.0, 1.0)
        chi = 0.5 - 0.5 * np.cos(np.pi * chi)
        chi[~grid.interior] = 0.0
        self.chi = chi
        annulus = grid.interior & (
            grid.radius >= seam - 4.0 * ramp / 3.0 - 3.0 * grid.h
        )
        self.annulus_idx = np.where(annulus.ravel())[0]
        A = _reference_form(grid)
        A_ss = A[self.annulus_idx][:, self.annulus_idx].tocsc()
        if shift > 0.0:
            w_s = grid.weights.ravel()[self.annulus_idx]
            A_ss = (A_ss + sp.diags(2.0 * shift * w_s)).tocsc()
        self.lu = splu(A_ss) if self.annulus_idx.size else None

    def apply(self, residual: np.ndarray) -> np.ndarray:
        out = self.chi * self.spectral.apply(self.chi * residual)
        if self.lu is not None:
            flat = out.ravel()
            flat[self.annulus_idx] += self.lu.solve(residual.ravel()[self.annulus_idx])
            out = flat.reshape(self.grid.shape)
        out[~self.grid.interior] = 0.0
        return out

    def inner_product(self, a: np.ndarray, pa: np.ndarray) -> float:
        return float(np.sum(a * pa))


def harmonic_extension(grid: Grid, bd, sweeps: int = 400) -> ScalarField:
    """Propagate g inward with Jacobi sweeps on the discrete Laplace equation.

    Cheap, smooth and feasible; used as the default initialization.
    """
    u = bd.g.values.copy()
    interior = grid.interior
    for _ in range(sweeps):
        acc = np.zeros_like(u)
        for ax in range(grid.dim):
            e = tuple(1 if a == ax else 0 for a in range(grid.dim))
            acc += shifted(u, e) + shifted(u, tuple(-s for s in e))
        u[interior] = acc[interior] / (2.0 * grid.dim)
    return ScalarField(grid, u)


def _initial_field(cfg: ProblemConfig, grid: Grid, opts: SolveOptions) -> ScalarField:
    bd = cfg.boundary
    if opts.init == "provided":
        if opts.init_field is None:
            raise InputError("init='provided' needs init_field")
        return apply_trace(opts.init_field, bd)
    if opts.init == "zero":
        return apply_trace(ScalarField.zeros(grid), bd)
    base = harmonic_extension(grid, bd)
    if opts.init == "random":
        rng = np.random.default_rng(opts.seed)
        scale = max(float(np.max(np.abs(bd.g.values))), 1.0)
        noise = 0.1 * scale * rng.standard_normal(grid.shape)
        vals = base.values.copy()
        vals[grid.interior] += noise[grid.interior]
        return ScalarField(grid, vals)
    return base


def _projected_max(precond: "BallPreconditioner", grad: ScalarField) -> float:
    """Max-norm of the projected gradient P g restricted to the free nodes.

    Near a minimum P g approximates the remaining solution error in node
    values, which makes a grid- and scale-robust stationarity measure; the
    raw gradient max-norm sits at the float64 line-search floor long before
    the iterate stops improving.
    """
    grid = grad.grid
    step = precond.apply(grad.values)
    return float(np.max(np.abs(step[grid.interior]))) if np.any(grid.interior) else 0.0


def _phase_curvature_shift(cfg: ProblemConfig, u_values: np.ndarray, eps: float) -> float:
    """Average curvature of the smoothed phase term at the current iterate.

    A spectral preconditioner cannot represent stiffness localized near the
    free boundary, so the shift uses the interior mean; overestimating it
    (e.g. the worst case 1/(2 eps)) would wash out the low-mode gain.
    """
    g = cfg.boundary.g
    v = u_values[g.grid.interior]
    curv = 0.5 * eps * eps / (v * v + eps * eps) ** 1.5 if eps > 0 else np.zeros_like(v)
    mean = float(np.mean(curv)) if np.size(curv) else 0.0
    return max(cfg.gamma_plus + cfg.gamma_minus, 0.0) * 0.5 * mean


def _backtrack(f, x, f_ref, g, g2, step, opts):
    """Shrink the step until sufficient decrease below ``f_ref`` holds."""
    s = step
    while True:
        z = x - s * g
        fz = f(z)
        if np.isfinite(fz) and fz <= f_ref - opts.sufficient_decrease * s * g2:
            return z, fz, s
        s *= opts.step_shrink
        if s < _STEP_MIN:
            return x, f_ref, 0.0


def minimize(cfg: ProblemConfig, grid: Grid, opts: SolveOptions | None = None) -> SolveResult:
    """Run the smoothing-continuation descent; deterministic given the seed.

    Raises :class:`SolverFailure` on energy divergence (growth beyond 1e3x
    the initial level) and :class:`NumericFailure` on NaN gradients.
    """
    opts = opts or SolveOptions()
    if cfg.boundary.g.grid.shape != grid.shape:
        raise InputError("config boundary data lives on a different grid")
    missing = {CLAIM_A2, CLAIM_A3} - cfg.operator.claims
    if missing:
        warnings.warn(
            f"operator {cfg.operator.name!r} does not claim {sorted(missing)}; "
            "minimization may be ill-posed",
            stacklevel=2,
        )

    schedule = opts.eps_schedule or default_eps_schedule(cfg)
    u = _initial_field(cfg, grid, opts).values.copy()
    interior = grid.interior

    def f_at(vals, eps):
        return evaluate(cfg, ScalarField(grid, vals), eps=eps).total

    def g_at(vals, eps):
        return gradient(cfg, ScalarField(grid, vals), eps=eps)

    history: list = []
    stage_starts: list = []
    total_iters = 0
    grad_norm = float("inf")
    converged = False
    f_initial = None

    for eps in schedule:
        stage_starts.append(len(history))
        precond = BallPreconditioner(grid, shift=_phase_curvature_shift(cfg, u, eps))
        x = u  # best (accepted) iterate: the recorded sequence is monotone
        fx = f_at(x, eps)
        if not np.isfinite(fx):
            raise NumericFailure(
                f"non-finite energy at iteration {total_iters} (eps={eps})",
                history=history,
            )
        if f_initial is None:
            f_initial = fx
        history.append(fx)
        z_old = x
        fz_old = fx
        y = x
        t_prev = 1.0
        step = opts.step_init
        hit_tol = False

        for k in range(opts.max_iters):
            gy = g_at(y, eps)
            if not np.all(np.isfinite(gy.values[interior])):
                raise NumericFailure(
                    f"NaN in gradient at iteration {total_iters + k} (eps={eps})",
                    history=history,
                )
            direction = precond.apply(gy.values)
            g2 = precond.inner_product(gy.values, direction)
            if g2 == 0.0:
                grad_norm = 0.0
                hit_tol = True
                break
            fy = f_at(y, eps)
            z, fz, s = _backtrack(
                lambda v: f_at(v, eps), y, fy, direction, g2, step * _STEP_GROW, opts
            )
            if s == 0.0:
                if np.array_equal(y, x):
                    # no descent direction at the best iterate: stationary
                    grad_norm = _projected_max(precond, gy)
                    hit_tol = grad_norm <= opts.grad_tol
                    break
                # dead extrapolated point: restart the momentum from the best
                y = x
                z_old, fz_old = x, fx
                t_prev = 1.0
                history.append(fx)
                continue
            step = s
            t = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t_prev * t_prev))
            if fz > fz_old:
                # function restart: drop momentum, keep the new point as base
                t_prev = 1.0
                y = z
            else:
                y = z + ((t_prev - 1.0) / t) * (z - z_old)
                t_prev = t
            z_old, fz_old = z, fz
            if fz < fx:
                x, fx = z, fz
            history.append(fx)
            if fz > _DIVERGENCE_FACTOR * (abs(f_initial) + 1.0):
                raise SolverFailure(
                    f"energy diverged at iteration {total_iters + k}", history=history
                )
            if (k + 1) % _STATIONARITY_CHECK_EVERY == 0 or k == opts.max_iters - 1:
                grad_norm = _projected_max(precond, g_at(x, eps))
                if grad_norm <= opts.grad_tol:
                    hit_tol = True
                    break
        total_iters += k + 1
        u = x
        converged = hit_tol

    u_star = ScalarField(grid, u)
    clamp = count_clamped(cfg, u_star) if cfg.power_mode == "clamp" else 0
    return SolveResult(
        u_star=u_star,
        energy_history=history,
        stage_starts=stage_starts,
        grad_norm_final=grad_norm,
        iterations=total_iters,
        clamp_count=clamp,
        converged=converged,
    )


def multistart(
    cfg: ProblemConfig,
    grid: Grid,
    opts: SolveOptions | None = None,
    n_starts: int = 1,
    max_workers: int | None = None,
) -> SolveResult:
    """Best-of-n minimization as a nonconvexity guard for gamma_minus < 0.

    Start 0 uses the given options, start 1 the zero field, and further
    starts random perturbations with derived seeds.  Returns the lowest-
    energy result (exact eps = 0 energy) with the per-start final energies
    attached; fails only if every start fails.
    """
    opts = opts or SolveOptions()
    if n_starts < 1:
        raise InputError("n_starts must be >= 1")
    variants = [opts]
    if n_starts >= 2:
        variants.append(replace(opts, init="zero", init_field=None))
    for i in range(2, n_starts):
        variants.append(replace(opts, init="random", init_field=None, seed=opts.seed + i))

    def run(variant):
        return minimize(cfg, grid, variant)

    results: list = [None] * len(variants)
    errors: list = []
    if max_workers and max_workers > 1 and len(variants) > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            futures = [pool.submit(run, v) for v in variants]
            for i, fut in enumerate(futures):
                try:
                    results[i] = fut.result()
                except SolverFailure as exc:  # noqa: PERF203 - per-start isolation
                    errors.append(exc)
    else:
        for i, v in enumerate(variants):
            try:
                results[i] = run(v)
            except SolverFailure as exc:
                errors.append(exc)

    succeeded = [r for r in results if r is not None]
    if not succeeded:
        raise errors[-1]
    energies = [
        evaluate(cfg, r.u_star, eps=0.0).total if r is not None else float("nan")
        for r in results
    ]
    best_idx = int(np.nanargmin(np.array(energies)))
    best = results[best_idx]
    best.start_energies = energies
    return best
