"""Flat key-value run configuration: parsing, validation, round-tripping.

The format is plain text, one ``key = value`` per line, ``#`` comments,
keys namespaced with dots.  The schema is versioned through the mandatory
``schema_version`` key (currently 1).  Values are typed: int, float, bool
(true/false), str, or comma-separated lists of ints/floats.

Validation happens before any computation; an invalid configuration raises
:class:`~hessmin.errors.ConfigError` and produces no outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError

SCHEMA_VERSION = 1

_OPERATORS = ("trace", "frobenius", "weighted_frobenius", "positive_trace")
_BOUNDARIES = ("constant", "half_affine", "radial_bump", "csv")
_INITS = ("boundary_extension", "zero", "random")
_POWER_MODES = ("auto", "power", "clamp", "signed")


@dataclass
class RunConfig:
    """Typed view of a run configuration file."""

    schema_version: int = SCHEMA_VERSION
    grid_dim: int = 2
    grid_n: int = 65
    grid_band_width: float = 2.0
    grid_refine_n: tuple = ()
    problem_operator: str = "trace"
    problem_coefficient: float = 1.0
    problem_p: float = 2.0
    problem_gamma_plus: float = 1.0
    problem_gamma_minus: float = 0.0
    problem_smoothing_eps: float = 0.0
    problem_hessian_power: str = "auto"
    problem_boundary: str = "constant"
    problem_boundary_amplitude: float = 1.0
    problem_boundary_width: float = 0.45
    problem_boundary_csv: str = ""
    problem_boundary_nonnegative: bool = True
    solver_max_iters: int = 4000
    solver_grad_tol: float = 1e-7
    solver_eps_schedule: tuple = ()
    solver_step_init: float = 1.0
    solver_step_shrink: float = 0.5
    solver_sufficient_decrease: float = 1e-4
    solver_seed: int = 0
    solver_init: str = "boundary_extension"
    solver_n_starts: int = 1
    checks_certify: bool = True
    checks_certify_samples: int = 2000
    checks_residuals: bool = True
    checks_test_functions: int = 25
    checks_test_seed: int = 0
    checks_phase_tau: float = -1.0
    checks_localization: bool = True
    checks_integrability: bool = True
    checks_regularity: bool = True
    checks_holder: bool = False
    checks_holder_pairs: int = 200
    checks_poincare: bool = True
    checks_poincare_samples: int = 120
    checks_free_boundary: bool = True
    output_dir: str = ""
    output_write_fields: bool = True


_KEY_OF_FIELD = {f.name: f.name.replace("_", ".", 1) for f in fields(RunConfig)}
_KEY_OF_FIELD["schema_version"] = "schema_version"
_FIELD_OF_KEY = {v: k for k, v in _KEY_OF_FIELD.items()}


def _parse_bool(raw: str, key: str) -> bool:
    if raw.lower() in ("true", "yes", "1"):
        return True
    if raw.lower() in ("false", "no", "0"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {raw!r}")


def _parse_value(field_type, raw: str, key: str):
    raw = raw.strip()
    try:
        if field_type is int:
            return int(raw)
        if field_type is float:
            return float(raw)
        if field_type is bool:
            return _parse_bool(raw, key)
        if field_type is tuple:
            if not raw:
                return ()
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            if "refine" in key:
                return tuple(int(p) for p in parts)
            return tuple(float(p) for p in parts)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r}: {exc}") from None


def parse_config_text(text: str) -> RunConfig:
    """Parse and validate flat key-value text into a RunConfig."""
    entries = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in _FIELD_OF_KEY:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in entries:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        entries[key] = raw.strip()

    cfg = RunConfig()
    types = {f.name: f.type for f in fields(RunConfig)}
    for key, raw in entries.items():
        name = _FIELD_OF_KEY[key]
        ftype = {"int": int, "float": float, "bool": bool, "tuple": tuple, "str": str}[
            types[name] if isinstance(types[name], str) else types[name].__name__
        ]
        setattr(cfg, name, _parse_value(ftype, raw, key))
    validate(cfg)
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text())


def validate(cfg: RunConfig) -> None:
    """Cross-field validation mirroring every module precondition."""
    if cfg.schema_version != SCHEMA_VERSION:
        raise ConfigError(
            f"schema_version must be {SCHEMA_VERSION}, got {cfg.schema_version}"
        )
    if cfg.grid_dim not in (1, 2):
        raise ConfigError(f"grid.dim must be 1 or 2, got {cfg.grid_dim}")
    if cfg.grid_n % 2 == 0 or cfg.grid_n < 9:
        raise ConfigError(f"grid.n must be odd and >= 9, got {cfg.grid_n}")
    if cfg.grid_band_width <= 0:
        raise ConfigError("grid.band_width must be positive")
    if cfg.grid_dim == 2 and cfg.grid_band_width < 1.0:
        raise ConfigError("grid.band_width must be >= 1 for dim=2")
    for m in cfg.grid_refine_n:
        if m % 2 == 0 or m < 9:
            raise ConfigError(f"grid.refine_n entries must be odd and >= 9, got {m}")
    if cfg.grid_refine_n and list(cfg.grid_refine_n) != sorted(set(cfg.grid_refine_n)):
        raise ConfigError("grid.refine_n must be strictly increasing")
    if cfg.problem_operator not in _OPERATORS:
        raise ConfigError(
            f"problem.operator must be one of {_OPERATORS}, got {cfg.problem_operator!r}"
        )
    if cfg.problem_operator == "weighted_frobenius" and cfg.problem_coefficient <= 0:
        raise ConfigError("problem.coefficient must be positive for weighted_frobenius")
    if cfg.problem_p <= 1.0:
        raise ConfigError(f"problem.p must satisfy p > 1, got {cfg.problem_p}")
    if cfg.problem_p <= cfg.grid_dim / 2.0:
        raise ConfigError("problem.p must exceed d/2 for the solution class")
    if cfg.problem_gamma_plus < 0.0:
        raise ConfigError("problem.gamma_plus must be >= 0")
    if not cfg.problem_gamma_plus + cfg.problem_gamma_minus > 0.0:
        raise ConfigError(
            "phase coefficients must satisfy gamma_plus + gamma_minus > 0"
        )
    if cfg.problem_smoothing_eps < 0.0:
        raise ConfigError("problem.smoothing_eps must be >= 0")
    if cfg.problem_hessian_power not in _POWER_MODES:
        raise ConfigError(f"problem.hessian_power must be one of {_POWER_MODES}")
    if cfg.problem_boundary not in _BOUNDARIES:
        raise ConfigError(
            f"problem.boundary must be one of {_BOUNDARIES}, got {cfg.problem_boundary!r}"
        )
    if cfg.problem_boundary == "csv" and not cfg.problem_boundary_csv:
        raise ConfigError("problem.boundary_csv must be set for the csv boundary")
    if cfg.problem_boundary_width <= 0:
        raise ConfigError("problem.boundary_width must be positive")
    if cfg.solver_max_iters < 1:
        raise ConfigError("solver.max_iters must be >= 1")
    if cfg.solver_grad_tol <= 0:
        raise ConfigError("solver.grad_tol must be positive")
    sched = cfg.solver_eps_schedule
    if sched:
        if sched[-1] <= 0:
            raise ConfigError("solver.eps_schedule must end at a positive value")
        if any(a <= b for a, b in zip(sched, sched[1:])):
            raise ConfigError("solver.eps_schedule must be strictly decreasing")
    if not (0.0 < cfg.solver_step_shrink < 1.0):
        raise ConfigError("solver.step_shrink must lie in (0, 1)")
    if cfg.solver_step_init <= 0 or cfg.solver_sufficient_decrease <= 0:
        raise ConfigError("solver.step_init and solver.sufficient_decrease must be positive")
    if cfg.solver_init not in _INITS:
        raise ConfigError(f"solver.init must be one of {_INITS}")
    if cfg.solver_n_starts < 1:
        raise ConfigError("solver.n_starts must be >= 1")
    if cfg.checks_certify_samples < 0:
        raise ConfigError("checks.certify_samples must be >= 0")
    if cfg.checks_test_functions < 1:
        raise ConfigError("checks.test_functions must be >= 1")
    if cfg.checks_holder and cfg.problem_p <= cfg.grid_dim:
        raise ConfigError(
            "checks.holder requires p > d (the Holder estimate hypothesis)"
        )
    if cfg.checks_holder_pairs < 100:
        raise ConfigError("checks.holder_pairs must be >= 100")
    if cfg.checks_poincare_samples < 10:
        raise ConfigError("checks.poincare_samples must be >= 10")


def to_flat_dict(cfg: RunConfig) -> dict:
    """Normalized flat mapping (the report's config echo)."""
    out = {}
    for f in fields(RunConfig):
        value = getattr(cfg, f.name)
        key = _KEY_OF_FIELD[f.name]
        if isinstance(value, tuple):
            out[key] = ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
        elif isinstance(value, bool):
            out[key] = "true" if value else "false"
        elif isinstance(value, float):
            out[key] = repr(value)
        else:
            out[key] = str(value)
    return out


def flat_dict_to_text(flat: dict) -> str:
    return "\n".join(f"{k} = {v}" for k, v in flat.items()) + "\n"
