"""Levenberg-Marquardt solver for the fixed-support subproblems.

The model at iterate eta is the linearized least-squares term plus the
exact quadratic regularizer; damping adds (gamma/2) * step^T Q step with
the step metric equal to the regularizer Q.  The candidate therefore
solves

    (J^T J + (1 + gamma) Q) step = -(J^T F + Q eta),

a symmetric positive definite system.  Steps are accepted or rejected on
the gain ratio (observed vs. predicted decrease) and gamma follows the
multiplicative schedule with factor c.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.linalg import blas as _blas

from .errors import DampingOverflowError, SolverStalledError

__all__ = ["LMConfig", "LMState", "lm_step", "update_damping", "solve_active_set"]


@dataclass(frozen=True)
class LMConfig:
    """Damping schedule and stopping rules.

    ``gamma0`` may be None, meaning the initial damping is scaled off the
    problem: 1e-3 times the largest ratio of Gauss-Newton curvature to
    regularizer curvature over the trajectory block, so the first steps
    are meaningfully damped regardless of the data scale.  Accepted steps
    follow the three-case multiplicative schedule with factor c; rejected
    steps escalate the growth factor (c, c^2, c^4, ...) so that a badly
    underdamped iterate recovers in a handful of rejections.
    """

    gamma0: float = None
    c: float = 1.2
    reject_threshold: float = 0.01
    gain_low: float = 0.4
    gain_high: float = 0.9
    max_iter: int = 200
    grad_tol: float = 1e-8
    step_tol: float = 1e-10

    def __post_init__(self):
        if not self.c > 1:
            raise ValueError("damping factor c must exceed 1")
        if not (0 < self.reject_threshold < self.gain_low < self.gain_high < 1):
            raise ValueError("need 0 < reject_threshold < gain_low < gain_high < 1")


@dataclass
class LMState:
    eta: np.ndarray
    gamma: float
    iteration: int = 0
    objective_history: list = field(default_factory=list)
    trace: list = field(default_factory=list)
    termination: str = ""


def update_damping(gamma: float, rho: float, config: LMConfig) -> float:
    """Multiplicative damping schedule driven by the gain ratio."""
    if rho < config.gain_low:
        return gamma * config.c
    if rho > config.gain_high:
        return gamma / config.c
    return gamma


def _apply_reg(h: np.ndarray, q, scale: float) -> np.ndarray:
    out = h.copy()
    if q.ndim == 1:
        out[np.diag_indices_from(out)] += scale * q
    else:
        out += scale * q
    return out


def lm_step(eta: np.ndarray, residual: np.ndarray, jac: np.ndarray, q,
            gamma: float, config: LMConfig, normal: np.ndarray = None,
            grad: np.ndarray = None):
    """One damped step: returns (candidate, predicted_decrease, gamma_used).

    ``q`` is the regularizer, either a diagonal vector or a dense matrix.
    On factorization failure gamma is multiplied by c^2 and the solve is
    retried, up to 50 times.
    """
    if normal is None:
        normal = _syrk(jac)
    if grad is None:
        grad = jac.T @ residual + _qmul(q, eta)
    for _ in range(50):
        try:
            h = _apply_reg(normal, q, 1.0 + gamma)
            factor = cho_factor(h, lower=True, overwrite_a=True, check_finite=False)
            step = cho_solve(factor, -grad, check_finite=False)
            break
        except np.linalg.LinAlgError:
            gamma *= config.c**2
    else:
        raise DampingOverflowError(
            f"normal-equations factorization failed after 50 damping increases "
            f"(gamma={gamma:.3e})"
        )
    candidate = eta + step
    lin = residual + jac @ step
    model_value = 0.5 * float(lin @ lin) + 0.5 * float(candidate @ _qmul(q, candidate))
    current = 0.5 * float(residual @ residual) + 0.5 * float(eta @ _qmul(q, eta))
    return candidate, current - model_value, gamma


def _qmul(q, v):
    return q * v if q.ndim == 1 else q @ v


def _syrk(jac: np.ndarray) -> np.ndarray:
    """J^T J via BLAS syrk (lower triangle filled, then symmetrized)."""
    h = _blas.dsyrk(1.0, jac, trans=1, lower=1)
    iu = np.triu_indices_from(h, k=1)
    h[iu] = h.T[iu]
    return h


def _auto_gamma0(problem, jac: np.ndarray, q) -> float:
    """Initial damping scaled to the trajectory block's curvature ratio."""
    jj = np.einsum("ij,ij->j", jac, jac)
    qd = q if q.ndim == 1 else np.diag(q)
    n = getattr(problem, "n_smooth", jj.size)
    ratio = jj[:n] / np.maximum(qd[:n], 1e-300)
    top = float(np.max(ratio)) if ratio.size else 1.0
    return max(1e-3 * top, 1.0)


def solve_active_set(problem, eta0: np.ndarray, config: LMConfig,
                     gamma0: float = None) -> LMState:
    """Minimize the fixed-support objective by damped Gauss-Newton steps.

    ``problem`` provides residual(eta), jacobian(eta), objective(eta) and
    the regularizer (qdiag() or qmat()).  Terminates on a relative
    gradient tolerance, a step tolerance, or the iteration budget; every
    candidate evaluation appends one trace row.
    """
    q = problem.qdiag() if problem.whitened else problem.qmat()
    state = LMState(eta=np.asarray(eta0, dtype=float).copy(), gamma=0.0)

    residual = problem.residual(state.eta, check=False)
    obj = problem.objective(state.eta, residual=residual)
    state.objective_history.append(obj)
    grad0_norm = None
    reject_streak = 0

    while state.iteration < config.max_iter:
        jac = problem.jacobian(state.eta)
        grad = jac.T @ residual + _qmul(q, state.eta)
        grad_norm = float(np.linalg.norm(grad))
        if grad0_norm is None:
            grad0_norm = grad_norm
            if gamma0 is not None:
                state.gamma = gamma0
            elif config.gamma0 is not None:
                state.gamma = config.gamma0
            else:
                state.gamma = _auto_gamma0(problem, jac, q)
        if grad_norm <= config.grad_tol * (1.0 + grad0_norm):
            state.termination = "gradient"
            break
        normal = _syrk(jac)

        accepted = False
        while state.iteration < config.max_iter:
            state.iteration += 1
            try:
                candidate, predicted, gamma_used = lm_step(
                    state.eta, residual, jac, q, state.gamma, config,
                    normal=normal, grad=grad,
                )
            except DampingOverflowError as err:
                state.termination = "stalled"
                raise SolverStalledError(str(err), best=state) from err
            state.gamma = gamma_used
            step_norm = float(np.linalg.norm(candidate - state.eta))
            if predicted <= 1e-15 * max(1.0, abs(obj)):
                state.termination = "step"
                state.trace.append(_trace_row(state, obj, np.nan, False, grad_norm, step_norm))
                break
            cand_residual = problem.residual(candidate, check=False)
            cand_obj = problem.objective(candidate, residual=cand_residual)
            rho = (obj - cand_obj) / predicted if np.isfinite(cand_obj) else -np.inf

            if rho < config.reject_threshold:
                # Rejection growth escalates with the streak so a badly
                # underdamped gamma recovers in a few rejections.
                reject_streak += 1
                state.gamma = state.gamma * config.c ** (2 ** min(reject_streak - 1, 8))
                state.trace.append(_trace_row(state, obj, rho, False, grad_norm, step_norm))
                if step_norm <= config.step_tol * (1.0 + float(np.linalg.norm(state.eta))):
                    state.termination = "step"
                    break
                continue

            reject_streak = 0
            state.eta = candidate
            state.gamma = update_damping(gamma_used, rho, config)
            residual = cand_residual
            state.objective_history.append(cand_obj)
            state.trace.append(_trace_row(state, cand_obj, rho, True, grad_norm, step_norm))
            small_step = step_norm <= config.step_tol * (1.0 + float(np.linalg.norm(state.eta)))
            obj = cand_obj
            if small_step:
                state.termination = "step"
            accepted = True
            break

        if state.termination in ("step",):
            break
        if not accepted and state.iteration >= config.max_iter:
            break

    if not state.termination:
        state.termination = "max_iter" if state.iteration >= config.max_iter else "gradient"
    return state


def _trace_row(state: LMState, obj: float, rho: float, accepted: bool,
               grad_norm: float, step_norm: float) -> dict:
    return {
        "iteration": state.iteration,
        "objective": obj,
        "gamma": state.gamma,
        "rho": rho,
        "accepted": accepted,
        "grad_norm": grad_norm,
        "step_norm": step_norm,
    }
