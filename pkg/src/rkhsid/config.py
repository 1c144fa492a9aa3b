"""Experiment configuration: schema, strict validation, defaults, echo.

Configs are nested key-value YAML.  Unknown keys are rejected with the
offending path in the message, and the echoed configuration spells out
every default so a result file fully determines its rerun.
"""

from dataclasses import dataclass, field

import yaml

from .errors import ConfigError
from .library import LibrarySpec
from .lm import LMConfig
from .objective import Weights
from .simulate import NoiseSpec, ObservationPattern, SolverConfig
from .sparsify import SparsifierSpec

__all__ = ["ExperimentConfig", "load_config", "parse_config"]

_SYSTEM_DIMS = {
    "lorenz63": (3, 1),
    "lotka_volterra": (2, 1),
    "van_der_pol": (1, 2),
    "coupled_duffing": (5, 2),
    "nonlinear_pendulum": (1, 2),
    "damped_nonlinear_oscillator": (2, 1),
}


def _take(section: dict, path: str, key: str, default, kind=None):
    if key in section:
        val = section.pop(key)
    else:
        val = default
    if val is None:
        return None
    if kind is float:
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise ConfigError(f"{path}.{key}: expected a number, got {val!r}")
        return float(val)
    if kind is int:
        if isinstance(val, bool) or not isinstance(val, int):
            raise ConfigError(f"{path}.{key}: expected an integer, got {val!r}")
        return int(val)
    if kind is bool:
        if not isinstance(val, bool):
            raise ConfigError(f"{path}.{key}: expected true/false, got {val!r}")
        return val
    if kind is str:
        if not isinstance(val, str):
            raise ConfigError(f"{path}.{key}: expected a string, got {val!r}")
        return val
    return val


def _reject_unknown(section: dict, path: str):
    if section:
        raise ConfigError(f"{path}: unknown keys {sorted(section)}")


def _subsection(raw: dict, key: str) -> dict:
    val = raw.pop(key, {}) or {}
    if not isinstance(val, dict):
        raise ConfigError(f"{key}: expected a mapping")
    return dict(val)


@dataclass
class ExperimentConfig:
    name: str
    system_name: str
    system_params: dict
    d: int
    p: int
    horizon: float
    pattern: ObservationPattern
    noise: NoiseSpec
    seed: int
    kernel_mode: str
    kernel_n: int
    kernel_fixed: dict
    kernel_multistarts: int
    kernel_sigma2_max_rel: float
    weights: Weights
    grid_size: int
    library: LibrarySpec
    sparsifier: SparsifierSpec
    lm: LMConfig
    max_outer: int
    solver: SolverConfig
    eval_points: int
    metric_coords: list
    forward_t_end: float
    forward_points: int
    hidden_init_scale: float
    sweep_seeds: list
    sweep_sigmas: list
    sweep_horizons: list
    echo: dict = field(default_factory=dict)

    @property
    def has_sweep(self) -> bool:
        return (
            len(self.sweep_seeds) > 1
            or len(self.sweep_sigmas) > 0
            or len(self.sweep_horizons) > 0
        )


def _parse_sparsifier(raw: dict, path: str = "sparsifier") -> SparsifierSpec:
    variant = _take(raw, path, "variant", "stlsq", str)
    inner_raw = raw.pop("inner", None)
    inner = None
    if inner_raw is not None:
        if not isinstance(inner_raw, dict):
            raise ConfigError(f"{path}.inner: expected a mapping")
        inner = _parse_sparsifier(dict(inner_raw), f"{path}.inner")
    spec = SparsifierSpec(
        variant=variant,
        threshold=_take(raw, path, "threshold", 0.1, float),
        ridge=_take(raw, path, "ridge", 0.01, float),
        l1_weight=_take(raw, path, "l1_weight", 5.0, float),
        relaxation=_take(raw, path, "relaxation", 0.05, float),
        n_bags=_take(raw, path, "n_bags", 20, int),
        inclusion_freq=_take(raw, path, "inclusion_freq", 0.5, float),
        inner=inner,
        normalize_columns=_take(raw, path, "normalize_columns", True, bool),
    )
    _reject_unknown(raw, path)
    return spec


def parse_config(raw: dict, source: str = "<config>") -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    raw = dict(raw)

    name = _take(raw, source, "name", "experiment", str)
    seed = _take(raw, source, "seed", 0, int)
    horizon = _take(raw, source, "horizon", None, float)
    if horizon is None or horizon <= 0:
        raise ConfigError(f"{source}: horizon must be a positive number")
    max_outer = _take(raw, source, "max_outer", 20, int)
    hidden_init_scale = _take(raw, source, "hidden_init_scale", 0.1, float)

    sys_raw = _subsection(raw, "system")
    system_name = _take(sys_raw, "system", "name", None, str)
    if system_name not in _SYSTEM_DIMS:
        raise ConfigError(
            f"system.name: unknown system {system_name!r}; known: {sorted(_SYSTEM_DIMS)}"
        )
    system_params = _take(sys_raw, "system", "params", {}, None) or {}
    if not isinstance(system_params, dict):
        raise ConfigError("system.params: expected a mapping")
    _reject_unknown(sys_raw, "system")
    d, p = _SYSTEM_DIMS[system_name]
    if system_name == "coupled_duffing" and "d" in system_params:
        d = int(system_params["d"])

    obs_raw = _subsection(raw, "observation")
    pattern = ObservationPattern(
        kind=_take(obs_raw, "observation", "kind", "full", str),
        dt=_take(obs_raw, "observation", "dt", None, float),
        t_end=_take(obs_raw, "observation", "t_end", horizon, float),
        n_samples=_take(obs_raw, "observation", "n_samples", None, int),
        block_len=_take(obs_raw, "observation", "block_len", 10, int),
        hidden_index=_take(obs_raw, "observation", "hidden_index", 2, int),
    )
    _reject_unknown(obs_raw, "observation")

    noise_raw = _subsection(raw, "noise")
    noise = NoiseSpec(sigma=_take(noise_raw, "noise", "sigma", 0.0, float), seed=seed)
    _reject_unknown(noise_raw, "noise")

    ker_raw = _subsection(raw, "kernel")
    kernel_mode = _take(ker_raw, "kernel", "mode", "mle", str)
    if kernel_mode not in ("mle", "fixed"):
        raise ConfigError("kernel.mode: must be 'mle' or 'fixed'")
    kernel_n = _take(ker_raw, "kernel", "n", 5, int)
    kernel_multistarts = _take(ker_raw, "kernel", "multistarts", 5, int)
    kernel_sigma2_max_rel = _take(ker_raw, "kernel", "sigma2_max_rel", None, float)
    kernel_fixed = {
        "c0": _take(ker_raw, "kernel", "c0", None, float),
        "c1": _take(ker_raw, "kernel", "c1", None, float),
        "ell": _take(ker_raw, "kernel", "ell", None, float),
        "sigma2": _take(ker_raw, "kernel", "sigma2", None, float),
    }
    _reject_unknown(ker_raw, "kernel")
    if kernel_mode == "fixed":
        missing = [k for k, v in kernel_fixed.items() if v is None and k != "sigma2"]
        if missing:
            raise ConfigError(f"kernel: fixed mode needs values for {missing}")

    w_raw = _subsection(raw, "weights")
    weights = Weights(
        alpha=_take(w_raw, "weights", "alpha", 1.0, float),
        beta=_take(w_raw, "weights", "beta", 1e5, float),
        lam=_take(w_raw, "weights", "lam", 1e-3, float),
        mu=_take(w_raw, "weights", "mu", 1e-3, float),
    )
    _reject_unknown(w_raw, "weights")

    grid_raw = _subsection(raw, "grid")
    grid_size = _take(grid_raw, "grid", "n_nodes", 500, int)
    _reject_unknown(grid_raw, "grid")

    lib_raw = _subsection(raw, "library")
    library = LibrarySpec(
        d=d,
        p=p,
        max_degree=_take(lib_raw, "library", "max_degree", 2, int),
        include_constant=_take(lib_raw, "library", "include_constant", True, bool),
        cross_terms=_take(lib_raw, "library", "cross_terms", True, bool),
    )
    _reject_unknown(lib_raw, "library")

    sparsifier = _parse_sparsifier(_subsection(raw, "sparsifier"))

    lm_raw = _subsection(raw, "lm")
    gamma0 = lm_raw.pop("gamma0", "auto")
    if gamma0 == "auto":
        gamma0 = None
    elif isinstance(gamma0, bool) or not isinstance(gamma0, (int, float)):
        raise ConfigError("lm.gamma0: expected a number or 'auto'")
    lm = LMConfig(
        gamma0=gamma0,
        c=_take(lm_raw, "lm", "c", 1.2, float),
        reject_threshold=_take(lm_raw, "lm", "reject_threshold", 0.01, float),
        gain_low=_take(lm_raw, "lm", "gain_low", 0.4, float),
        gain_high=_take(lm_raw, "lm", "gain_high", 0.9, float),
        max_iter=_take(lm_raw, "lm", "max_iter", 200, int),
        grad_tol=_take(lm_raw, "lm", "grad_tol", 1e-8, float),
        step_tol=_take(lm_raw, "lm", "step_tol", 1e-10, float),
    )
    _reject_unknown(lm_raw, "lm")

    sol_raw = _subsection(raw, "solver")
    solver = SolverConfig(
        rtol=_take(sol_raw, "solver", "rtol", 1e-9, float),
        atol=_take(sol_raw, "solver", "atol", 1e-11, float),
        max_steps=_take(sol_raw, "solver", "max_steps", 1_000_000, int),
    )
    _reject_unknown(sol_raw, "solver")

    met_raw = _subsection(raw, "metrics")
    eval_points = _take(met_raw, "metrics", "eval_points", 2000, int)
    metric_coords = _take(met_raw, "metrics", "coords", None, None)
    if metric_coords is not None and not isinstance(metric_coords, list):
        raise ConfigError("metrics.coords: expected a list of coordinate indices")
    _reject_unknown(met_raw, "metrics")

    fw_raw = _subsection(raw, "forward")
    forward_t_end = _take(fw_raw, "forward", "t_end", 0.0, float)
    forward_points = _take(fw_raw, "forward", "n_points", 500, int)
    _reject_unknown(fw_raw, "forward")

    sweep_raw = _subsection(raw, "sweep")
    sweep_seeds = _take(sweep_raw, "sweep", "seeds", [], None) or []
    sweep_sigmas = _take(sweep_raw, "sweep", "sigmas", [], None) or []
    sweep_horizons = _take(sweep_raw, "sweep", "horizons", [], None) or []
    for lst, key in ((sweep_seeds, "seeds"), (sweep_sigmas, "sigmas"), (sweep_horizons, "horizons")):
        if not isinstance(lst, list):
            raise ConfigError(f"sweep.{key}: expected a list")
    _reject_unknown(sweep_raw, "sweep")

    _reject_unknown(raw, source)

    cfg = ExperimentConfig(
        name=name,
        system_name=system_name,
        system_params=dict(system_params),
        d=d,
        p=p,
        horizon=horizon,
        pattern=pattern,
        noise=noise,
        seed=seed,
        kernel_mode=kernel_mode,
        kernel_n=kernel_n,
        kernel_fixed=kernel_fixed,
        kernel_multistarts=kernel_multistarts,
        kernel_sigma2_max_rel=kernel_sigma2_max_rel,
        weights=weights,
        grid_size=grid_size,
        library=library,
        sparsifier=sparsifier,
        lm=lm,
        max_outer=max_outer,
        solver=solver,
        eval_points=eval_points,
        metric_coords=metric_coords,
        forward_t_end=forward_t_end,
        forward_points=forward_points,
        hidden_init_scale=hidden_init_scale,
        sweep_seeds=list(sweep_seeds),
        sweep_sigmas=list(sweep_sigmas),
        sweep_horizons=list(sweep_horizons),
    )
    cfg.echo = config_echo(cfg)
    return cfg


def _sparsifier_echo(s: SparsifierSpec) -> dict:
    out = {
        "variant": s.variant,
        "threshold": s.threshold,
        "ridge": s.ridge,
        "l1_weight": s.l1_weight,
        "relaxation": s.relaxation,
        "n_bags": s.n_bags,
        "inclusion_freq": s.inclusion_freq,
        "normalize_columns": s.normalize_columns,
    }
    if s.inner is not None:
        out["inner"] = _sparsifier_echo(s.inner)
    return out


def config_echo(cfg: ExperimentConfig) -> dict:
    """Fully explicit configuration dictionary (defaults resolved)."""
    return {
        "name": cfg.name,
        "seed": cfg.seed,
        "horizon": cfg.horizon,
        "max_outer": cfg.max_outer,
        "hidden_init_scale": cfg.hidden_init_scale,
        "system": {"name": cfg.system_name, "params": cfg.system_params},
        "observation": {
            "kind": cfg.pattern.kind,
            "dt": cfg.pattern.dt,
            "t_end": cfg.pattern.t_end,
            "n_samples": cfg.pattern.n_samples,
            "block_len": cfg.pattern.block_len,
            "hidden_index": cfg.pattern.hidden_index,
        },
        "noise": {"sigma": cfg.noise.sigma},
        "kernel": {
            "mode": cfg.kernel_mode,
            "n": cfg.kernel_n,
            "multistarts": cfg.kernel_multistarts,
            "sigma2_max_rel": cfg.kernel_sigma2_max_rel,
            **{k: v for k, v in cfg.kernel_fixed.items() if v is not None},
        },
        "weights": {
            "alpha": cfg.weights.alpha,
            "beta": cfg.weights.beta,
            "lam": cfg.weights.lam,
            "mu": cfg.weights.mu,
        },
        "grid": {"n_nodes": cfg.grid_size},
        "library": {
            "max_degree": cfg.library.max_degree,
            "include_constant": cfg.library.include_constant,
            "cross_terms": cfg.library.cross_terms,
        },
        "sparsifier": _sparsifier_echo(cfg.sparsifier),
        "lm": {
            "gamma0": "auto" if cfg.lm.gamma0 is None else cfg.lm.gamma0,
            "c": cfg.lm.c,
            "reject_threshold": cfg.lm.reject_threshold,
            "gain_low": cfg.lm.gain_low,
            "gain_high": cfg.lm.gain_high,
            "max_iter": cfg.lm.max_iter,
            "grad_tol": cfg.lm.grad_tol,
            "step_tol": cfg.lm.step_tol,
        },
        "solver": {
            "rtol": cfg.solver.rtol,
            "atol": cfg.solver.atol,
            "max_steps": cfg.solver.max_steps,
        },
        "metrics": {"eval_points": cfg.eval_points, "coords": cfg.metric_coords},
        "forward": {"t_end": cfg.forward_t_end, "n_points": cfg.forward_points},
        "sweep": {
            "seeds": cfg.sweep_seeds,
            "sigmas": cfg.sweep_sigmas,
            "horizons": cfg.sweep_horizons,
        },
    }


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as err:
        raise ConfigError(f"{path}: invalid YAML: {err}") from None
    return parse_config(raw, source=str(path))
