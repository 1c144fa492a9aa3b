"""Residuals, Jacobians, and the regularized nonlinear least-squares objective.

The stacked residual is

    F(z, theta) = [ sqrt(alpha) * (V_n^T x(t_n; z) - y_n)          ]
                  [ sqrt(beta)  * sqrt(w_m) * (x^(p)(tau_m) - f_m) ]

with the collocation rows node-major (state dimension innermost).  F is
affine in theta, so the theta block of the Jacobian is exactly the
(negative, weighted) feature matrix restricted to the support; the z
blocks chain the feature gradients through the lower-order evaluation
operators.  Everything is assembled analytically from precomputed dense
operators; no numerical differentiation happens anywhere in a fit.
"""

from dataclasses import dataclass

import numpy as np

from .errors import NumericInputError
from .kernel import GramMatrix
from .library import eval_feature_jac, eval_features
from .trajectory import (
    CollocationGrid,
    node_operator,
    rkhs_norm_sq,
    whitened_node_operator,
)

__all__ = [
    "ObservationSet",
    "Weights",
    "CollocationProblem",
    "residual_data",
    "residual_colloc",
    "jacobian_blocks",
    "objective_value",
    "objective_terms",
]


class ObservationSet:
    """Linear measurements y_n = V_n^T x(t_n) + noise.

    ``mats[n]`` is the d x d_n measurement matrix at time n (a selection
    matrix for every built-in observation pattern) and ``ys[n]`` the
    corresponding measurement vector.  ``sigma2`` records the fitted or
    known noise variance for reporting.
    """

    def __init__(self, times, mats, ys, sigma2=None):
        self.times = np.atleast_1d(np.asarray(times, dtype=float))
        self.mats = [np.atleast_2d(np.asarray(v, dtype=float)) for v in mats]
        self.ys = [np.atleast_1d(np.asarray(y, dtype=float)) for y in ys]
        self.sigma2 = sigma2
        if len(self.mats) != self.times.size or len(self.ys) != self.times.size:
            raise ValueError("times, mats, ys must have equal length")
        if self.times.size < 1:
            raise ValueError("need at least one observation")
        d = self.mats[0].shape[0]
        for n, (v, y) in enumerate(zip(self.mats, self.ys)):
            if v.shape[0] != d:
                raise ValueError(f"observation {n}: inconsistent state dimension")
            if v.shape[1] != y.size:
                raise ValueError(
                    f"observation {n}: V has {v.shape[1]} columns but y has {y.size} entries"
                )

    @property
    def state_dim(self) -> int:
        return self.mats[0].shape[0]

    @property
    def n_times(self) -> int:
        return self.times.size

    @property
    def n_scalar(self) -> int:
        return sum(y.size for y in self.ys)

    def stacked_y(self) -> np.ndarray:
        return np.concatenate(self.ys)

    def scalar_coeffs(self) -> tuple:
        """Per scalar row: time index into self.times and d-vector of V coefficients."""
        t_idx = np.empty(self.n_scalar, dtype=np.int64)
        coeffs = np.empty((self.n_scalar, self.state_dim))
        k = 0
        for n, v in enumerate(self.mats):
            for j in range(v.shape[1]):
                t_idx[k] = n
                coeffs[k] = v[:, j]
                k += 1
        return t_idx, coeffs


@dataclass(frozen=True)
class Weights:
    """Objective weights: data alpha, collocation beta, RKHS lam, coefficient mu."""

    alpha: float = 1.0
    beta: float = 1e5
    lam: float = 1e-3
    mu: float = 1e-3

    def __post_init__(self):
        for name in ("alpha", "beta", "lam", "mu"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be strictly positive")


def residual_data(z: np.ndarray, obs: ObservationSet, evalop) -> np.ndarray:
    """Concatenated V_n^T x(t_n; z) - y_n (unweighted)."""
    x_at_obs = evalop.matrix @ z
    out = np.empty(obs.n_scalar)
    k = 0
    for n, (v, y) in enumerate(zip(obs.mats, obs.ys)):
        dn = y.size
        out[k:k + dn] = v.T @ x_at_obs[n] - y
        k += dn
    return out


def residual_colloc(z: np.ndarray, theta: np.ndarray, grid: CollocationGrid,
                    evalops, features) -> np.ndarray:
    """Per-node sqrt(w_m) * (x^(p)(tau_m; z) - f(D[x](tau_m; z); theta)).

    ``evalops`` holds operators for derivative orders 0..p; rows come out
    node-major with the state dimension innermost.
    """
    p = len(evalops) - 1
    u = np.column_stack([evalops[r] @ z for r in range(p)]) if p > 0 else None
    xp = evalops[p] @ z
    if u is not None:
        bad = ~np.all(np.isfinite(u), axis=1)
        if np.any(bad):
            m = int(np.nonzero(bad)[0][0])
            raise NumericInputError(
                f"non-finite augmented state at collocation node {m} (t={grid.tau[m]:.6g})"
            )
        phi = eval_features(features, u)
        f_val = phi @ theta.T
    else:
        f_val = np.zeros_like(xp)
    r = np.sqrt(grid.w)[:, None] * (xp - f_val)
    return r.ravel()


def jacobian_blocks(z: np.ndarray, theta: np.ndarray, support: np.ndarray,
                    obs: ObservationSet, obs_evalop, grid: CollocationGrid,
                    evalops, features, weights: Weights) -> tuple:
    """Analytic Jacobian blocks (dF/dz, dF/dtheta_S) of the weighted residual.

    Convenience wrapper over the problem assembler for spec-level use;
    returns dense blocks with z columns ordered coordinate-major.
    """
    prob = CollocationProblem(
        obs=obs,
        grid=grid,
        ops=[op.matrix for op in evalops],
        obs_op=obs_evalop.matrix,
        features=features,
        weights=weights,
        gram=None,
    )
    prob.set_support(support)
    eta = prob.pack(z, theta)
    jac = prob.jacobian(eta)
    nz = z.size
    return jac[:, :nz], jac[:, nz:]


def objective_terms(z, theta, weights: Weights, gram: GramMatrix,
                    obs: ObservationSet, obs_evalop, grid, evalops, features) -> dict:
    """Objective decomposition: data, collocation, RKHS, and coefficient terms."""
    rd = residual_data(z, obs, obs_evalop)
    rc = residual_colloc(z, theta, grid, evalops, features)
    terms = {
        "data": 0.5 * weights.alpha * float(rd @ rd),
        "colloc": 0.5 * weights.beta * float(rc @ rc),
        "rkhs": 0.5 * weights.lam * rkhs_norm_sq(z, gram),
        "coeff": 0.5 * weights.mu * float(np.sum(theta**2)),
    }
    terms["total"] = sum(terms.values())
    return terms


def objective_value(z, theta, weights: Weights, gram: GramMatrix,
                    obs: ObservationSet, obs_evalop, grid, evalops, features) -> float:
    """The regularized NLS objective value in the original variables."""
    return objective_terms(
        z, theta, weights, gram, obs, obs_evalop, grid, evalops, features
    )["total"]


class CollocationProblem:
    """Fixed-support nonlinear least-squares problem over eta = [vec(z); theta_S].

    Operators are plain dense matrices; in whitened mode they are row
    blocks of the Gram Cholesky factor and the quadratic regularizer is
    diagonal, which is how fits actually run.  z columns are stacked
    coordinate-major in eta, followed by the supported theta entries in
    row-major (dimension, feature) order.
    """

    def __init__(self, obs: ObservationSet, grid: CollocationGrid, ops, obs_op,
                 features, weights: Weights, gram=None, whitened=False):
        self.obs = obs
        self.grid = grid
        self.ops = ops
        self.obs_op = obs_op
        self.features = features
        self.weights = weights
        self.gram = gram
        self.whitened = whitened

        self.d = obs.state_dim
        self.p = len(ops) - 1
        self.b = ops[0].shape[1]
        self.n_feat = len(features)
        self.sqrt_w = np.sqrt(grid.w)
        self.sqrt_alpha = np.sqrt(weights.alpha)
        self.sqrt_beta = np.sqrt(weights.beta)
        self.n_colloc_rows = grid.n_nodes * self.d

        t_idx, coeffs = obs.scalar_coeffs()
        self._obs_t_idx = t_idx
        self._obs_coeffs = coeffs
        self._obs_y = obs.stacked_y()
        self.n_data_rows = self._obs_y.size
        self.n_rows = self.n_data_rows + self.n_colloc_rows
        # Data rows are affine in z with a constant Jacobian block.
        self._jd = np.zeros((self.n_data_rows, self.d * self.b))
        rows_at_times = obs_op[t_idx, :]
        for i in range(self.d):
            self._jd[:, i * self.b:(i + 1) * self.b] = (
                self.sqrt_alpha * coeffs[:, i:i + 1] * rows_at_times
            )
        self._jbuf = None
        self.support = None
        self._sup_rows = None
        self._sup_cols = None

    @classmethod
    def whitened_at_nodes(cls, obs, grid, gram, features, weights):
        """Standard solver construction: whitened operators at the nodes."""
        ops = [whitened_node_operator(gram, r) for r in range(gram.p + 1)]
        obs_op = ops[0][grid.index_of(obs.times), :]
        return cls(obs=obs, grid=grid, ops=ops, obs_op=obs_op, features=features,
                   weights=weights, gram=gram, whitened=True)

    @classmethod
    def original_at_nodes(cls, obs, grid, gram, features, weights):
        """Original-variable construction with Gram-row node operators."""
        ops = [node_operator(gram, r) for r in range(gram.p + 1)]
        obs_op = ops[0][grid.index_of(obs.times), :]
        return cls(obs=obs, grid=grid, ops=ops, obs_op=obs_op, features=features,
                   weights=weights, gram=gram, whitened=False)

    # -- support management ------------------------------------------------

    def set_support(self, support: np.ndarray):
        support = np.asarray(support, dtype=bool)
        if support.shape != (self.d, self.n_feat):
            raise ValueError(f"support shape {support.shape} != (d, Q)")
        self.support = support
        rows, cols = np.nonzero(support)
        self._sup_rows = rows
        self._sup_cols = cols
        self._jbuf = None

    @property
    def n_sup(self) -> int:
        return 0 if self._sup_rows is None else self._sup_rows.size

    @property
    def n_smooth(self) -> int:
        return self.d * self.b

    @property
    def n_params(self) -> int:
        return self.d * self.b + self.n_sup

    # -- packing -----------------------------------------------------------

    def pack(self, z: np.ndarray, theta: np.ndarray) -> np.ndarray:
        eta = np.empty(self.n_params)
        eta[:self.d * self.b] = z.ravel(order="F")
        eta[self.d * self.b:] = theta[self._sup_rows, self._sup_cols]
        return eta

    def unpack(self, eta: np.ndarray) -> tuple:
        z = eta[:self.d * self.b].reshape((self.b, self.d), order="F")
        theta = np.zeros((self.d, self.n_feat))
        theta[self._sup_rows, self._sup_cols] = eta[self.d * self.b:]
        return z, theta

    # -- quadratic regularizer ---------------------------------------------

    def qdiag(self) -> np.ndarray:
        """Diagonal of Q in whitened mode."""
        if not self.whitened:
            raise ValueError("qdiag is only available in whitened mode")
        q = np.empty(self.n_params)
        q[:self.d * self.b] = self.weights.lam
        q[self.d * self.b:] = self.weights.mu
        return q

    def qmat(self) -> np.ndarray:
        """Dense Q = blockdiag(lam * (I_d kron K), mu * I_|S|) in original mode."""
        if self.whitened:
            raise ValueError("qmat is only for original-variable problems")
        kjit = self.gram.matrix + self.gram.jitter * np.eye(self.gram.dim)
        q = np.zeros((self.n_params, self.n_params))
        for i in range(self.d):
            sl = slice(i * self.b, (i + 1) * self.b)
            q[sl, sl] = self.weights.lam * kjit
        idx = np.arange(self.d * self.b, self.n_params)
        q[idx, idx] = self.weights.mu
        return q

    # -- residual and Jacobian ----------------------------------------------

    def _states(self, z: np.ndarray) -> tuple:
        u = (
            np.column_stack([self.ops[r] @ z for r in range(self.p)])
            if self.p > 0
            else None
        )
        xp = self.ops[self.p] @ z
        return u, xp

    def residual(self, eta: np.ndarray, check: bool = True) -> np.ndarray:
        z, theta = self.unpack(eta)
        u, xp = self._states(z)
        out = np.empty(self.n_rows)
        x_obs = self.obs_op @ z
        pred = np.einsum("ki,ki->k", self._obs_coeffs, x_obs[self._obs_t_idx])
        out[:self.n_data_rows] = self.sqrt_alpha * (pred - self._obs_y)
        if u is not None:
            if check and not np.all(np.isfinite(u)):
                m = int(np.nonzero(~np.all(np.isfinite(u), axis=1))[0][0])
                raise NumericInputError(
                    f"non-finite augmented state at collocation node {m} "
                    f"(t={self.grid.tau[m]:.6g})"
                )
            phi = eval_features(self.features, u)
            f_val = phi @ theta.T
        else:
            f_val = np.zeros_like(xp)
        rc = self.sqrt_w[:, None] * (xp - f_val)
        out[self.n_data_rows:] = self.sqrt_beta * rc.ravel()
        return out

    def jacobian(self, eta: np.ndarray) -> np.ndarray:
        z, theta = self.unpack(eta)
        u, _ = self._states(z)
        d, b, m = self.d, self.b, self.grid.n_nodes
        if self._jbuf is None or self._jbuf.shape[1] != self.n_params:
            self._jbuf = np.zeros((self.n_rows, self.n_params))
        jac = self._jbuf
        jac[:self.n_data_rows, :d * b] = self._jd
        jac[self.n_data_rows:, :] = 0.0

        if u is not None:
            phi = eval_features(self.features, u)
            jphi = eval_feature_jac(self.features, u)
        else:
            phi = np.ones((m, self.n_feat))
            jphi = None

        wcol = (self.sqrt_beta * self.sqrt_w)[:, None]
        dp = self.ops[self.p]
        for j in range(d):
            # d f_i / d z_j chains the feature gradients through D_0..D_{p-1}.
            g = (
                np.stack([jphi[:, :, r * d + j] @ theta.T for r in range(self.p)])
                if jphi is not None
                else None
            )  # (p, m, d)
            for i in range(d):
                block = np.zeros((m, b))
                if i == j:
                    block += dp
                if g is not None:
                    for r in range(self.p):
                        gr = g[r, :, i]
                        if np.any(gr):
                            block -= gr[:, None] * self.ops[r]
                jac[self.n_data_rows + i::d, j * b:(j + 1) * b] = wcol * block

        # theta block: exactly the (negative) weighted feature columns.
        wphi = wcol * phi
        for k in range(self.n_sup):
            i = self._sup_rows[k]
            q = self._sup_cols[k]
            jac[self.n_data_rows + i::d, d * b + k] = -wphi[:, q]
        return jac

    # -- objective -----------------------------------------------------------

    def penalty(self, eta: np.ndarray) -> float:
        if self.whitened:
            return 0.5 * float(eta @ (self.qdiag() * eta))
        z, theta = self.unpack(eta)
        return 0.5 * self.weights.lam * rkhs_norm_sq(z, self.gram) + 0.5 * self.weights.mu * float(
            np.sum(theta**2)
        )

    def objective(self, eta: np.ndarray, residual=None) -> float:
        if residual is None:
            residual = self.residual(eta, check=False)
        if not np.all(np.isfinite(residual)):
            return np.inf
        return 0.5 * float(residual @ residual) + self.penalty(eta)
