"""Full fit orchestration: hyperparameters, alternation, forward prediction.

A fit runs: (1) Gaussian-process maximum likelihood for the kernel
hyperparameters and noise variance, shared across coordinates; (2) a
warm start from the collocation-free ridge problem; (3) alternation of
fixed-support Levenberg-Marquardt solves with sparsifying regressions on
the frozen trajectory until the support reaches a fixed point.
"""

import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import minimize

from .errors import ConfigError, FitDegenerateError, SolverStalledError
from .kernel import KernelSpec, build_deriv_table, gram
from .library import SparseCoeffs
from .lm import LMConfig, solve_active_set
from .objective import CollocationProblem, ObservationSet, Weights
from .simulate import IntegrationResult, SolverConfig, generic_system, integrate
from .sparsify import SparsifierSpec, build_regression, sparsify
from .trajectory import (
    TrajectoryCoeffs,
    init_from_data,
    uniform_grid,
    unwhiten_coeffs,
    whitened_node_operator,
)

__all__ = ["HyperFit", "FitResult", "fit_hyperparameters", "fit", "forward_simulate"]


@dataclass
class HyperFit:
    c0: float
    c1: float
    ell: float
    sigma2: float
    log_marginal: float
    trace: list = field(default_factory=list)

    def kernel_spec(self, n: int, max_order: int) -> KernelSpec:
        return KernelSpec(c0=self.c0, c1=self.c1, ell=self.ell, n=n, max_order=max_order)


def _coordinate_series(obs: ObservationSet) -> list:
    """Split scalar observations into per-coordinate (times, values) series."""
    d = obs.state_dim
    per = [([], []) for _ in range(d)]
    for n in range(obs.n_times):
        v = obs.mats[n]
        y = obs.ys[n]
        for j in range(v.shape[1]):
            col = v[:, j]
            nz = np.nonzero(col)[0]
            if nz.size == 1 and col[nz[0]] == 1.0:
                per[nz[0]][0].append(obs.times[n])
                per[nz[0]][1].append(y[j])
    return [
        (np.asarray(t), np.asarray(x)) for t, x in per if len(t) > 0
    ]


_CORR_TABLES = {}


def _matern_half_integer(r: np.ndarray, n: int) -> np.ndarray:
    """Unit-variance Matern correlation by the closed form (order zero)."""
    table = _CORR_TABLES.get(n)
    if table is None:
        table = build_deriv_table(KernelSpec(c0=0.0, c1=1.0, ell=1.0, n=n, max_order=0))
        _CORR_TABLES[n] = table
    return table.deriv(0, r)


def fit_hyperparameters(obs: ObservationSet, n: int = 5, multistarts: int = 5,
                        sigma2_max_rel: float = None) -> HyperFit:
    """Maximum-likelihood kernel hyperparameters shared across coordinates.

    Maximizes the sum over observed coordinates of the Gaussian-process
    log marginal likelihood under k + sigma^2 I, over (c0, c1, ell,
    sigma^2) in log space: a 5^4 data-scaled grid seeds a Nelder-Mead
    refinement from the best ``multistarts`` grid points.

    ``sigma2_max_rel`` caps the fitted noise variance at that fraction of
    the data variance.  When the observation noise is known to be zero
    (or tiny), unconstrained likelihood on scarce aliased samples can
    prefer a white-noise explanation of the dynamics; capping sigma^2 at
    the known level keeps the fit in the interpolation regime.
    """
    series = _coordinate_series(obs)
    if not series or max(t.size for t, _ in series) < 3:
        raise ConfigError("hyperparameter fit needs a coordinate with >= 3 observations")

    variances = [float(np.var(x)) for _, x in series if x.size >= 2]
    v = float(np.mean([s for s in variances if s > 0])) if any(s > 0 for s in variances) else 0.0
    degenerate = v <= 0
    if degenerate:
        warnings.warn("observations are constant; hyperparameter fit is degenerate")
        v = 1.0

    all_t = np.concatenate([t for t, _ in series])
    span = float(all_t.max() - all_t.min()) or 1.0
    dts = np.diff(np.unique(all_t))
    dt_med = float(np.median(dts)) if dts.size else span / 10.0

    diffs = [np.abs(t[:, None] - t[None, :]) for t, _ in series]
    values = [x for _, x in series]
    sigma2_cap = v * sigma2_max_rel if sigma2_max_rel is not None else None

    def neg_lml(log_params):
        c0, c1, ell, sig2 = np.exp(log_params)
        if sigma2_cap is not None and sig2 > sigma2_cap:
            return np.inf
        total = 0.0
        for dist, y in zip(diffs, values):
            k = c0 + c1 * _matern_half_integer(dist / ell, n)
            k[np.diag_indices_from(k)] += sig2
            try:
                factor = cho_factor(k, lower=True, check_finite=False)
            except np.linalg.LinAlgError:
                return np.inf
            alpha = cho_solve(factor, y, check_finite=False)
            logdet = 2.0 * float(np.sum(np.log(np.diag(factor[0]))))
            total += -0.5 * float(y @ alpha) - 0.5 * logdet - 0.5 * y.size * np.log(2 * np.pi)
        return -total

    c0_grid = v * np.logspace(-4, 0, 5)
    c1_grid = v * np.logspace(-1, 1, 5)
    ell_grid = np.geomspace(max(dt_med / 2, span / 500), span / 2, 5)
    if sigma2_cap is not None:
        sig2_grid = sigma2_cap * np.logspace(-4, 0, 5)
    else:
        sig2_grid = v * np.logspace(-6, 0, 5)

    seeds = []
    for c0 in c0_grid:
        for c1 in c1_grid:
            for ell in ell_grid:
                for s2 in sig2_grid:
                    lp = np.log([c0, c1, ell, s2])
                    seeds.append((neg_lml(lp), lp))
    seeds.sort(key=lambda pair: pair[0])

    trace = []
    best_val, best_lp = seeds[0]
    if not degenerate:
        for val0, lp0 in seeds[:multistarts]:
            res = minimize(neg_lml, lp0, method="Nelder-Mead",
                           options={"maxiter": 400, "xatol": 1e-4, "fatol": 1e-8})
            trace.append({"start": np.exp(lp0).tolist(), "end": np.exp(res.x).tolist(),
                          "neg_lml": float(res.fun)})
            if res.fun < best_val:
                best_val, best_lp = res.fun, res.x
    c0, c1, ell, sig2 = np.exp(best_lp)
    return HyperFit(c0=float(c0), c1=float(c1), ell=float(ell), sigma2=float(sig2),
                    log_marginal=-float(best_val), trace=trace)


@dataclass
class FitResult:
    z_hat: TrajectoryCoeffs
    theta_hat: SparseCoeffs
    support_history: list
    objective_history: list
    lm_traces: list
    converged: bool
    termination: str
    n_outer: int
    grid: object
    gram: object
    table: object
    features: list
    weights: Weights
    hyper: HyperFit = None
    wall_time: float = 0.0
    p: int = 1

    @property
    def final_objective(self) -> float:
        return self.objective_history[-1] if self.objective_history else np.nan


def fit(obs: ObservationSet, *, d: int, p: int, horizon: float, features,
        weights: Weights, kernel: KernelSpec, grid_size: int,
        sparsifier: SparsifierSpec, lm_config: LMConfig,
        rng: np.random.Generator, max_outer: int = 20,
        hidden_init_scale: float = 0.1, beta_ramp=(1e-4, 1e-3, 1e-2, 1e-1),
        ramp_max_iter: int = 60) -> FitResult:
    """Alternating fit: dense-support start, LM solves, sparsifying steps.

    Before the first dense-support solve, the collocation weight is
    ramped up through ``beta_ramp`` (relative factors), warm-starting at
    each stage.  With scarce data a single solve at the full weight tends
    to fall into a flat-trajectory basin; the homotopy keeps the iterate
    data-consistent while the dynamics term gradually takes over.  Each
    stage runs the same damped scheme with a small budget; the final
    objective is always the full-weight one.

    Stops when the support reaches a fixed point, cycles back to an
    earlier support (best-objective iterate returned), or after
    ``max_outer`` rounds.
    """
    t_start = time.perf_counter()
    if obs.state_dim != d:
        raise ConfigError(f"observations have state dimension {obs.state_dim}, expected {d}")
    if float(obs.times.max()) > horizon * (1 + 1e-12):
        raise ConfigError("observation times extend past the collocation horizon")

    table = build_deriv_table(kernel)
    grid = uniform_grid(horizon, grid_size).merge_times(obs.times)
    g = gram(table, grid.tau, p)
    problem = CollocationProblem.whitened_at_nodes(obs, grid, g, features, weights)
    wops = [whitened_node_operator(g, r) for r in range(p + 1)]

    traj0 = init_from_data(obs, grid, g, weights.alpha, weights.lam, rng,
                           hidden_scale=hidden_init_scale)
    ztilde = traj0.ztilde

    n_feat = len(features)
    reg0 = build_regression(ztilde, grid, wops, features)
    ridge0 = sparsifier.ridge if sparsifier.variant == "stlsq" else 1e-6
    theta = np.linalg.solve(
        reg0.design.T @ reg0.design + ridge0 * np.eye(n_feat),
        reg0.design.T @ reg0.targets,
    ).T

    support = np.ones((d, n_feat), dtype=bool)
    gamma_carry = None
    ramp_traces = []
    factors = sorted(f for f in beta_ramp if 0 < f < 1)
    if factors:
        from dataclasses import replace as _replace

        stage_lm = _replace(lm_config, max_iter=min(lm_config.max_iter, ramp_max_iter),
                            grad_tol=max(lm_config.grad_tol, 1e-6))
        prev_beta = None
        for factor in factors:
            beta_stage = weights.beta * factor
            w_stage = Weights(alpha=weights.alpha, beta=beta_stage,
                              lam=weights.lam, mu=weights.mu)
            stage_prob = CollocationProblem.whitened_at_nodes(obs, grid, g, features, w_stage)
            stage_prob.set_support(support)
            eta0 = stage_prob.pack(ztilde, theta)
            g0 = None
            if gamma_carry is not None and prev_beta is not None:
                g0 = gamma_carry * beta_stage / prev_beta
            try:
                state = solve_active_set(stage_prob, eta0, stage_lm, gamma0=g0)
            except SolverStalledError as err:
                state = err.best
            ztilde, theta = stage_prob.unpack(state.eta)
            gamma_carry = state.gamma
            prev_beta = beta_stage
            ramp_traces.append(state.trace)
        if gamma_carry is not None:
            gamma_carry = gamma_carry * weights.beta / prev_beta

    support_history = [support.copy()]
    objective_history = []
    lm_traces = list(ramp_traces)
    iterates = []
    converged = False
    termination = "max_outer"

    for outer in range(max_outer):
        problem.set_support(support)
        eta0 = problem.pack(ztilde, np.where(support, theta, 0.0))
        try:
            state = solve_active_set(problem, eta0, lm_config, gamma0=gamma_carry)
        except SolverStalledError as err:
            state = err.best
            warnings.warn(f"active-set solve stalled at outer iteration {outer}")
        gamma_carry = state.gamma
        ztilde, theta = problem.unpack(state.eta)
        obj = state.objective_history[-1]
        objective_history.append(obj)
        lm_traces.append(state.trace)
        iterates.append((obj, ztilde.copy(), theta.copy(), support.copy()))

        regression = build_regression(ztilde, grid, wops, features)
        picked = sparsify(regression, sparsifier, rng)
        new_support = picked.support
        if not np.any(new_support):
            raise FitDegenerateError(
                "sparsifier evicted every feature in every dimension",
                diagnostics={"outer": outer, "objective": obj},
            )
        support_history.append(new_support.copy())

        if np.array_equal(new_support, support):
            converged = True
            termination = "fixed_point"
            break
        earlier = any(np.array_equal(new_support, s) for s in support_history[:-2])
        if earlier:
            termination = "cycle"
            best = min(iterates, key=lambda it: it[0])
            _, ztilde, theta, support = best
            break
        support = new_support
        theta = picked.theta

    z = unwhiten_coeffs(ztilde, g)
    theta_hat = SparseCoeffs(theta, support)
    return FitResult(
        z_hat=TrajectoryCoeffs(z=z, ztilde=ztilde),
        theta_hat=theta_hat,
        support_history=support_history,
        objective_history=objective_history,
        lm_traces=lm_traces,
        converged=converged,
        termination=termination,
        n_outer=len(objective_history),
        grid=grid,
        gram=g,
        table=table,
        features=list(features),
        weights=weights,
        wall_time=time.perf_counter() - t_start,
        p=p,
    )


def forward_simulate(theta_hat: SparseCoeffs, features, initial_augmented_state,
                     t_span, d: int, p: int, solver: SolverConfig = None,
                     t_eval=None) -> IntegrationResult:
    """Integrate the learned dynamics forward from an augmented state.

    Blow-ups truncate the returned trajectory and stamp the divergence
    time instead of raising, since extrapolating learned models off their
    training window legitimately diverges sometimes.
    """
    system = generic_system(features, theta_hat, d, p, initial_augmented_state,
                            name="learned")
    return integrate(system, system.x0, t_span, solver or SolverConfig(),
                     t_eval=t_eval, on_blowup="truncate")
