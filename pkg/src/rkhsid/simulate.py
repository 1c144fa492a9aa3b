"""Ground-truth generation: benchmark systems, integrator, observations.

The integrator is the Dormand-Prince 5(4) embedded pair with a
proportional-integral step controller.  Requested output times are hit
exactly by capping steps, so no interpolation error enters sampled
trajectories; a fixed-step mode exists for self-convergence diagnostics.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, IntegrationError
from .library import SparseCoeffs, eval_f

__all__ = [
    "BenchmarkSystem",
    "SolverConfig",
    "ObservationPattern",
    "NoiseSpec",
    "IntegrationResult",
    "make_system",
    "rhs",
    "integrate",
    "sample_observations",
    "hamiltonian",
]

# Dormand-Prince 5(4) tableau.
_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
_DP_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
# Difference between the 5th-order weights and the embedded 4th-order ones.
_DP_E = np.array(
    [71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40]
)


@dataclass(frozen=True)
class SolverConfig:
    rtol: float = 1e-9
    atol: float = 1e-11
    initial_step: float = None
    max_steps: int = 1_000_000
    safety: float = 0.9
    pi_beta: float = 0.04
    blowup_norm: float = 1e8

    def __post_init__(self):
        if self.rtol <= 0 or self.atol <= 0:
            raise ConfigError("solver tolerances must be positive")


@dataclass
class BenchmarkSystem:
    """An autonomous system in first-order reduced form.

    ``d`` is the number of position coordinates and ``p`` the ODE order;
    the reduced state stacks (x, x', ..., x^(p-1)) with dimension d*p.
    ``coeff_map`` gives the true dynamics as {output dim: {exponent
    tuple: value}} over the augmented state, used to build reference
    coefficient matrices for whatever library a run uses.
    """

    name: str
    d: int
    p: int
    fn: callable
    x0: np.ndarray
    params: dict = field(default_factory=dict)
    coeff_map: dict = None

    def true_theta(self, features) -> np.ndarray:
        """True coefficients laid out against a feature list; None if unknown."""
        if self.coeff_map is None:
            return None
        index = {f.exponents: q for q, f in enumerate(features)}
        theta = np.zeros((self.d, len(features)))
        for i, terms in self.coeff_map.items():
            for exps, val in terms.items():
                if exps not in index:
                    raise ConfigError(
                        f"library lacks the feature {exps} required by system {self.name}"
                    )
                theta[i, index[exps]] = val
        return theta


def rhs(system: BenchmarkSystem, state: np.ndarray) -> np.ndarray:
    """Reduced-form derivative of the state (stacked positions and derivatives)."""
    return system.fn(np.asarray(state, dtype=float))


def _exp(d, p, powers):
    """Exponent tuple over the augmented state from {var index: power}."""
    e = [0] * (d * p)
    for j, pw in powers.items():
        e[j] = pw
    return tuple(e)


def make_system(name: str, params: dict = None, rng: np.random.Generator = None) -> BenchmarkSystem:
    """Construct a named benchmark system, optionally overriding parameters."""
    params = dict(params or {})
    builder = _SYSTEMS.get(name)
    if builder is None:
        raise ConfigError(f"unknown system {name!r}; known: {sorted(_SYSTEMS)}")
    return builder(params, rng)


def _lorenz63(params, rng):
    sigma = params.pop("sigma", 10.0)
    rho = params.pop("rho", 28.0)
    beta = params.pop("beta", 8.0 / 3.0)
    x0 = np.asarray(params.pop("x0", (-8.0, 8.0, 27.0)), dtype=float)
    _reject_extra("lorenz63", params)

    def fn(s):
        x, y, z = s
        return np.array([sigma * (y - x), x * (rho - z) - y, x * y - beta * z])

    cmap = {
        0: {_exp(3, 1, {0: 1}): -sigma, _exp(3, 1, {1: 1}): sigma},
        1: {_exp(3, 1, {0: 1}): rho, _exp(3, 1, {1: 1}): -1.0,
            _exp(3, 1, {0: 1, 2: 1}): -1.0},
        2: {_exp(3, 1, {2: 1}): -beta, _exp(3, 1, {0: 1, 1: 1}): 1.0},
    }
    return BenchmarkSystem("lorenz63", 3, 1, fn, x0,
                           {"sigma": sigma, "rho": rho, "beta": beta}, cmap)


def _lotka_volterra(params, rng):
    p11 = params.pop("p11", 1.0)
    p12 = params.pop("p12", 1.0)
    p21 = params.pop("p21", 1.0)
    p22 = params.pop("p22", 0.5)
    x0 = np.asarray(params.pop("x0", (1.0, 2.0)), dtype=float)
    _reject_extra("lotka_volterra", params)

    def fn(s):
        x, y = s
        return np.array([p11 * x - p12 * x * y, -p21 * y + p22 * x * y])

    cmap = {
        0: {_exp(2, 1, {0: 1}): p11, _exp(2, 1, {0: 1, 1: 1}): -p12},
        1: {_exp(2, 1, {1: 1}): -p21, _exp(2, 1, {0: 1, 1: 1}): p22},
    }
    return BenchmarkSystem("lotka_volterra", 2, 1, fn, x0,
                           {"p11": p11, "p12": p12, "p21": p21, "p22": p22}, cmap)


def _van_der_pol(params, rng):
    mu = params.pop("mu", 0.5)
    x0 = np.asarray(params.pop("x0", (2.0, 0.0)), dtype=float)
    _reject_extra("van_der_pol", params)

    def fn(s):
        x, v = s
        return np.array([v, mu * (1.0 - x * x) * v - x])

    cmap = {
        0: {_exp(1, 2, {0: 1}): -1.0, _exp(1, 2, {1: 1}): mu,
            _exp(1, 2, {0: 2, 1: 1}): -mu},
    }
    return BenchmarkSystem("van_der_pol", 1, 2, fn, x0, {"mu": mu}, cmap)


# Printed reference parameters for the five-oscillator ring: the linear
# diagonal terms are 4 - alpha_i with coupling -2 and cubic weight -2.
_DUFFING_ALPHAS = (2.608, 3.289, 2.19, 2.479, 2.012)


def _coupled_duffing(params, rng):
    d = int(params.pop("d", 5))
    coupling = params.pop("coupling", -2.0)
    beta = params.pop("beta", 2.0)
    if params.pop("random_alphas", False):
        if rng is None:
            raise ConfigError("random_alphas requires a seeded generator")
        alphas = np.asarray(rng.uniform(2.0, 4.0, size=d))
    else:
        alphas = np.asarray(params.pop("alphas", _DUFFING_ALPHAS), dtype=float)
    if alphas.size != d:
        raise ConfigError(f"coupled_duffing needs {d} alphas, got {alphas.size}")
    betas = np.full(d, beta)
    x0 = np.asarray(params.pop("x0", np.concatenate([np.ones(d), np.zeros(d)])), dtype=float)
    _reject_extra("coupled_duffing", params)

    def fn(s):
        x = s[:d]
        v = s[d:]
        lap = np.roll(x, 1) - 2.0 * x + np.roll(x, -1)
        acc = -alphas * x - betas * x**3 + coupling * lap
        return np.concatenate([v, acc])

    cmap = {}
    for i in range(d):
        terms = {
            _exp(d, 2, {i: 1}): -alphas[i] - 2.0 * coupling,
            _exp(d, 2, {i: 3}): -betas[i],
        }
        left = (i - 1) % d
        right = (i + 1) % d
        terms[_exp(d, 2, {left: 1})] = terms.get(_exp(d, 2, {left: 1}), 0.0) + coupling
        terms[_exp(d, 2, {right: 1})] = terms.get(_exp(d, 2, {right: 1}), 0.0) + coupling
        cmap[i] = terms
    return BenchmarkSystem(
        "coupled_duffing", d, 2, fn, x0,
        {"alphas": alphas.tolist(), "beta": beta, "coupling": coupling}, cmap,
    )


def _nonlinear_pendulum(params, rng):
    x0 = np.asarray(params.pop("x0", (3.0, 0.0)), dtype=float)
    _reject_extra("nonlinear_pendulum", params)

    def fn(s):
        x, v = s
        return np.array([v, -np.sin(x)])

    return BenchmarkSystem("nonlinear_pendulum", 1, 2, fn, x0, {}, None)


def _damped_oscillator(params, rng):
    a = params.pop("damping", 0.1)
    b = params.pop("rotation", 2.0)
    x0 = np.asarray(params.pop("x0", (2.0, 0.0)), dtype=float)
    _reject_extra("damped_nonlinear_oscillator", params)

    def fn(s):
        x, y = s
        return np.array([-a * x**3 + b * y**3, -b * x**3 - a * y**3])

    cmap = {
        0: {_exp(2, 1, {0: 3}): -a, _exp(2, 1, {1: 3}): b},
        1: {_exp(2, 1, {0: 3}): -b, _exp(2, 1, {1: 3}): -a},
    }
    return BenchmarkSystem("damped_nonlinear_oscillator", 2, 1, fn, x0,
                           {"damping": a, "rotation": b}, cmap)


def generic_system(features, coeffs: SparseCoeffs, d: int, p: int, x0,
                   name: str = "generic") -> BenchmarkSystem:
    """A system defined by library coefficients; used for forward simulation."""
    x0 = np.asarray(x0, dtype=float)
    if x0.size != d * p:
        raise ConfigError(f"generic system expects reduced state of size {d * p}")
    if coeffs.theta.shape != (d, len(features)):
        raise ConfigError("coefficient shape does not match library and dimension")

    def fn(s):
        top = eval_f(coeffs, features, s)
        if p == 1:
            return top
        return np.concatenate([s[d:], top])

    cmap = {
        i: {features[q].exponents: coeffs.theta[i, q]
            for q in np.nonzero(coeffs.support[i])[0]}
        for i in range(d)
    }
    return BenchmarkSystem(name, d, p, fn, x0, {}, cmap)


_SYSTEMS = {
    "lorenz63": _lorenz63,
    "lotka_volterra": _lotka_volterra,
    "van_der_pol": _van_der_pol,
    "coupled_duffing": _coupled_duffing,
    "nonlinear_pendulum": _nonlinear_pendulum,
    "damped_nonlinear_oscillator": _damped_oscillator,
}


def _reject_extra(name, params):
    if params:
        raise ConfigError(f"unknown parameters for {name}: {sorted(params)}")


def hamiltonian(system: BenchmarkSystem, x: np.ndarray, v: np.ndarray) -> float:
    """Energy of the coupled Duffing ring; conserved along exact flow."""
    if system.name != "coupled_duffing":
        raise ConfigError("hamiltonian is defined for the coupled_duffing system")
    alphas = np.asarray(system.params["alphas"])
    beta = system.params["beta"]
    mu = system.params["coupling"]
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    kinetic = 0.5 * np.sum(v**2)
    potential = np.sum(0.5 * alphas * x**2 + 0.25 * beta * x**4)
    coupling = 0.5 * mu * np.sum((np.roll(x, -1) - x) ** 2)
    return float(kinetic + potential + coupling)


@dataclass
class IntegrationResult:
    times: np.ndarray
    states: np.ndarray
    status: str
    n_steps: int
    n_rejected: int
    divergence_time: float = None

    def at(self, t: float) -> np.ndarray:
        idx = np.searchsorted(self.times, t)
        idx = min(max(idx, 0), self.times.size - 1)
        if idx > 0 and abs(self.times[idx - 1] - t) < abs(self.times[idx] - t):
            idx -= 1
        if abs(self.times[idx] - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"time {t} was not among the requested output times")
        return self.states[idx]


def _initial_step(fn, t0, y0, rtol, atol, direction=1.0):
    # Hairer-style two-stage guess.
    scale = atol + rtol * np.abs(y0)
    f0 = fn(y0)
    d0 = np.sqrt(np.mean((y0 / scale) ** 2))
    d1 = np.sqrt(np.mean((f0 / scale) ** 2))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    y1 = y0 + direction * h0 * f0
    f1 = fn(y1)
    d2 = np.sqrt(np.mean(((f1 - f0) / scale) ** 2)) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** 0.2
    return min(100 * h0, h1)


def integrate(system: BenchmarkSystem, x0, t_span, config: SolverConfig = None,
              t_eval=None, fixed_step: float = None,
              on_blowup: str = "raise") -> IntegrationResult:
    """Integrate the system over t_span, hitting every t_eval point exactly.

    ``fixed_step`` disables adaptivity and propagates with the 5th-order
    weights on a constant step (for convergence studies).  Blow-ups
    (state norm beyond config.blowup_norm) either raise or truncate the
    result depending on ``on_blowup``.
    """
    config = config or SolverConfig()
    fn = system.fn
    t0, t1 = float(t_span[0]), float(t_span[1])
    if t1 <= t0:
        raise ConfigError("t_span must be increasing")
    y = np.asarray(x0, dtype=float).copy()
    if not np.all(np.isfinite(y)):
        raise ConfigError("initial state must be finite")

    if t_eval is None:
        outputs = np.array([t1])
    else:
        outputs = np.unique(np.asarray(t_eval, dtype=float))
        if outputs.size and (outputs[0] < t0 - 1e-12 or outputs[-1] > t1 + 1e-12):
            raise ConfigError("t_eval must lie within t_span")

    rec_times = []
    rec_states = []
    out_idx = 0
    if outputs.size and abs(outputs[0] - t0) <= 1e-14 * max(1.0, abs(t0)):
        rec_times.append(t0)
        rec_states.append(y.copy())
        out_idx = 1

    t = t0
    k1 = fn(y)
    h = fixed_step if fixed_step is not None else (
        config.initial_step or _initial_step(fn, t0, y, config.rtol, config.atol)
    )
    facold = 1e-4
    expo1 = 0.2 - config.pi_beta * 0.75
    n_steps = 0
    n_rejected = 0
    status = "ok"
    divergence_time = None

    while t < t1 - 1e-14 * max(1.0, abs(t1)):
        if n_steps + n_rejected >= config.max_steps:
            status = "max_steps"
            break
        h = min(h, t1 - t)
        capped = False
        if out_idx < outputs.size and t + h >= outputs[out_idx] - 1e-14:
            h = outputs[out_idx] - t
            capped = True
        if h <= 1e-14 * max(1.0, abs(t)):
            # Degenerate cap (coincident outputs); emit and advance.
            if capped:
                rec_times.append(outputs[out_idx])
                rec_states.append(y.copy())
                out_idx += 1
                continue
            status = "step_underflow"
            break

        ks = [k1]
        for stage in range(1, 7):
            yi = y + h * (np.stack(ks, axis=0).T @ _DP_A[stage])
            ks.append(fn(yi))
        kmat = np.stack(ks, axis=0)
        y_new = y + h * (kmat.T @ _DP_B5)
        err_vec = h * (kmat.T @ _DP_E)

        if fixed_step is not None:
            err = 0.0
        else:
            scale = config.atol + config.rtol * np.maximum(np.abs(y), np.abs(y_new))
            err = float(np.sqrt(np.mean((err_vec / scale) ** 2)))

        if err <= 1.0:
            n_steps += 1
            t_new = outputs[out_idx] if capped else t + h
            t = t_new
            y = y_new
            k1 = ks[6]  # first-same-as-last
            if capped:
                rec_times.append(t)
                rec_states.append(y.copy())
                out_idx += 1
            if np.max(np.abs(y)) > config.blowup_norm or not np.all(np.isfinite(y)):
                status = "diverged"
                divergence_time = t
                break
            if fixed_step is None:
                fac11 = err**expo1 if err > 0 else 1e-10
                fac = fac11 / facold**config.pi_beta
                fac = max(0.2, min(5.0, fac / config.safety))
                h = h / fac
                facold = max(err, 1e-4)
        else:
            n_rejected += 1
            fac11 = err**expo1
            h = h / min(10.0, fac11 / config.safety)

    result = IntegrationResult(
        times=np.array(rec_times),
        states=np.array(rec_states) if rec_states else np.zeros((0, y.size)),
        status=status,
        n_steps=n_steps,
        n_rejected=n_rejected,
        divergence_time=divergence_time,
    )
    if status in ("max_steps", "step_underflow") and on_blowup == "raise":
        raise IntegrationError(f"integration failed with status {status}", partial=result)
    if status == "diverged" and on_blowup == "raise":
        raise IntegrationError(
            f"state norm exceeded {config.blowup_norm:.1e} at t={divergence_time}",
            partial=result,
        )
    return result


@dataclass(frozen=True)
class ObservationPattern:
    """How the state is measured on the uniform sampling grid.

    ``kind`` is one of full, position_only, alternating_streams,
    hidden_coordinate.  For order-p systems only positions are ever
    measured (derivatives are not part of the state vector x).
    """

    kind: str
    dt: float
    t_end: float
    n_samples: int = None
    block_len: int = 10
    hidden_index: int = 2

    def __post_init__(self):
        if self.kind not in ("full", "position_only", "alternating_streams", "hidden_coordinate"):
            raise ConfigError(f"unknown observation pattern {self.kind!r}")
        if self.dt <= 0 or self.t_end <= 0:
            raise ConfigError("pattern needs positive dt and t_end")

    def times(self) -> np.ndarray:
        n = self.n_samples
        if n is None:
            n = int(np.floor(self.t_end / self.dt + 1e-9)) + 1
        return np.arange(n) * self.dt

    def mats(self, d: int) -> list:
        n = self.times().size
        if self.kind in ("full", "position_only"):
            return [np.eye(d)] * n
        if self.kind == "alternating_streams":
            out = []
            for i in range(n):
                c = (i // self.block_len) % d
                v = np.zeros((d, 1))
                v[c, 0] = 1.0
                out.append(v)
            return out
        visible = [i for i in range(d) if i != self.hidden_index]
        if not visible:
            raise ConfigError("hidden_coordinate pattern hides every coordinate")
        out = []
        for i in range(n):
            c = visible[i % len(visible)]
            v = np.zeros((d, 1))
            v[c, 0] = 1.0
            out.append(v)
        return out


@dataclass(frozen=True)
class NoiseSpec:
    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ConfigError("sigma must be nonnegative")


def sample_observations(result: IntegrationResult, system: BenchmarkSystem,
                        pattern: ObservationPattern, noise: NoiseSpec,
                        rng: np.random.Generator = None):
    """Draw y_n = V_n^T x(t_n) + eps_n with noise in time order.

    The integration result must contain the pattern's sample times among
    its outputs.  Only position coordinates are observed.
    """
    from .objective import ObservationSet

    times = pattern.times()
    mats = pattern.mats(system.d)
    if rng is None:
        rng = np.random.default_rng(noise.seed)
    ys = []
    for n, t in enumerate(times):
        x_full = result.at(t)
        x_pos = x_full[:system.d]
        clean = mats[n].T @ x_pos
        eps = rng.normal(0.0, noise.sigma, size=clean.size) if noise.sigma > 0 else 0.0
        ys.append(clean + eps)
    return ObservationSet(times, mats, ys, sigma2=noise.sigma**2)
