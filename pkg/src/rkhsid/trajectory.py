"""Trajectory parametrization over kernel derivative sections.

A trajectory is ``x(t; z) = basis(t)^T z`` where the basis stacks the
kernel derivative sections at the collocation nodes, ordered
derivative-major (all nodes at derivative 0, then all nodes at
derivative 1, ...), consistent with the Gram matrix block layout.

Whitening: with ``K + jitter*I = C C^T`` the change of variables
``ztilde = C^T z`` turns the RKHS penalty into a plain squared norm and
turns the node-evaluation operators into row blocks of C.  Node
operators are taken as slices of the factorized matrix (jitter
included), so the original and whitened parametrizations define the
*identical* finite-dimensional objective; the jitter perturbs node
evaluations by a relative 1e-10-ish amount that is far below every
other error source and is reported in the Gram object.
"""

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from .errors import UnsupportedOrderError
from .kernel import DerivCoeffTable, GramMatrix, eval_kernel

__all__ = [
    "CollocationGrid",
    "TrajectoryCoeffs",
    "EvalOperator",
    "uniform_grid",
    "basis_vector",
    "build_eval_operator",
    "node_operator",
    "rkhs_norm_sq",
    "whiten_coeffs",
    "unwhiten_coeffs",
    "whiten_operator",
    "init_from_data",
]


@dataclass(frozen=True)
class CollocationGrid:
    """Collocation nodes tau with quadrature weights w over [0, T].

    Observation times are merged in as zero-weight nodes so that they are
    always part of the node set; ``sum(w)`` stays equal to the horizon.
    """

    tau: np.ndarray
    w: np.ndarray
    horizon: float
    contains_obs_times: bool = False

    def __post_init__(self):
        if self.tau.ndim != 1 or self.tau.shape != self.w.shape:
            raise ValueError("tau and w must be 1-d arrays of equal length")
        if np.any(np.diff(self.tau) <= 0):
            raise ValueError("tau must be strictly increasing")
        if np.any(self.w < 0):
            raise ValueError("collocation weights must be nonnegative")

    @property
    def n_nodes(self) -> int:
        return self.tau.size

    def merge_times(self, times: np.ndarray, tol: float = 1e-9) -> "CollocationGrid":
        """Return a grid whose nodes include ``times``, added with zero weight."""
        times = np.atleast_1d(np.asarray(times, dtype=float))
        tau = self.tau
        w = self.w
        scale = max(1.0, abs(self.horizon))
        extra = []
        for t in np.unique(times):
            idx = np.searchsorted(tau, t)
            near = []
            if idx > 0:
                near.append(abs(tau[idx - 1] - t))
            if idx < tau.size:
                near.append(abs(tau[idx] - t))
            if min(near) > tol * scale:
                extra.append(t)
        if extra:
            tau = np.concatenate([tau, extra])
            w = np.concatenate([w, np.zeros(len(extra))])
            order = np.argsort(tau)
            tau = tau[order]
            w = w[order]
        return CollocationGrid(tau=tau, w=w, horizon=self.horizon, contains_obs_times=True)

    def index_of(self, times: np.ndarray, tol: float = 1e-9) -> np.ndarray:
        """Node indices of the given times; they must already be nodes."""
        times = np.atleast_1d(np.asarray(times, dtype=float))
        scale = max(1.0, abs(self.horizon))
        idx = np.searchsorted(self.tau, times)
        idx = np.clip(idx, 0, self.tau.size - 1)
        left = np.clip(idx - 1, 0, self.tau.size - 1)
        use_left = np.abs(self.tau[left] - times) < np.abs(self.tau[idx] - times)
        idx = np.where(use_left, left, idx)
        if np.any(np.abs(self.tau[idx] - times) > tol * scale):
            bad = times[np.abs(self.tau[idx] - times) > tol * scale]
            raise ValueError(f"times {bad[:5]} are not collocation nodes; merge them first")
        return idx


def uniform_grid(horizon: float, n_nodes: int) -> CollocationGrid:
    """Uniformly spaced nodes covering [0, T] with uniform weights T/M."""
    if horizon <= 0 or n_nodes < 1:
        raise ValueError("horizon must be positive and n_nodes >= 1")
    tau = np.linspace(0.0, horizon, n_nodes)
    w = np.full(n_nodes, horizon / n_nodes)
    return CollocationGrid(tau=tau, w=w, horizon=horizon)


@dataclass
class TrajectoryCoeffs:
    """Coefficients z over the derivative-section basis; one column per state dim.

    ``ztilde = C^T z`` is the whitened form; either may be present, with
    conversions going through the Gram Cholesky factor.
    """

    z: np.ndarray = None
    ztilde: np.ndarray = None

    def __post_init__(self):
        if self.z is None and self.ztilde is None:
            raise ValueError("need z or ztilde")

    @property
    def d(self) -> int:
        ref = self.z if self.z is not None else self.ztilde
        return ref.shape[1]


@dataclass(frozen=True)
class EvalOperator:
    """Dense map from coefficient columns to trajectory derivative samples."""

    matrix: np.ndarray
    times: np.ndarray
    order: int

    def __call__(self, z: np.ndarray) -> np.ndarray:
        return self.matrix @ z


def basis_vector(table: DerivCoeffTable, grid: CollocationGrid, t: float, r: int, p: int) -> np.ndarray:
    """Basis derivative vector (d1^r d2^s k(t, tau_m)), derivative-major.

    ``p`` is the depth of the section basis (derivative orders 0..p at
    each node), so the vector has length (p+1)*M with entry (s*M + m)
    holding d1^r d2^s k(t, tau_m).
    """
    if r + p > table.spec.max_order:
        raise UnsupportedOrderError(
            f"evaluation order {r} with basis depth {p} exceeds max_order "
            f"{table.spec.max_order}"
        )
    m = grid.n_nodes
    out = np.empty((p + 1) * m)
    for s in range(p + 1):
        out[s * m:(s + 1) * m] = eval_kernel(table, r, s, t, grid.tau)
    return out


def build_eval_operator(table: DerivCoeffTable, grid: CollocationGrid, times, r: int, p: int) -> EvalOperator:
    """Batch basis_vector rows into a dense evaluation operator.

    The operator is built once per (grid, times, r) and reused across
    solver iterations since neither the nodes nor the evaluation times
    move during a fit.
    """
    if r + p > table.spec.max_order:
        raise UnsupportedOrderError(
            f"evaluation order {r} with basis depth {p} exceeds max_order "
            f"{table.spec.max_order}"
        )
    times = np.atleast_1d(np.asarray(times, dtype=float))
    m = grid.n_nodes
    mat = np.empty((times.size, (p + 1) * m))
    for s in range(p + 1):
        mat[:, s * m:(s + 1) * m] = eval_kernel(table, r, s, times[:, None], grid.tau[None, :])
    return EvalOperator(matrix=mat, times=times, order=r)


def node_operator(gram: GramMatrix, r: int) -> np.ndarray:
    """Order-r evaluation operator at the collocation nodes themselves.

    This is the r-th block row of the factorized Gram matrix (jitter
    included), which keeps node evaluation exactly consistent between the
    original and whitened variables.
    """
    if r > gram.p:
        raise UnsupportedOrderError(f"node operator order {r} exceeds gram block depth {gram.p}")
    m = gram.n_nodes
    block = gram.matrix[r * m:(r + 1) * m, :].copy()
    block[:, r * m:(r + 1) * m] += gram.jitter * np.eye(m)
    return block


def whitened_node_operator(gram: GramMatrix, r: int) -> np.ndarray:
    """Whitened order-r node operator: simply the r-th block row of C."""
    if r > gram.p:
        raise UnsupportedOrderError(f"node operator order {r} exceeds gram block depth {gram.p}")
    m = gram.n_nodes
    return gram.chol[r * m:(r + 1) * m, :]


def rkhs_norm_sq(z: np.ndarray, gram: GramMatrix) -> float:
    """Squared RKHS norm tr(z^T K z) summed over coefficient columns.

    Uses the factorized operator (jitter included) so the value agrees
    with the whitened identity sum ||C^T z_i||^2 to roundoff.
    """
    z = np.asarray(z, dtype=float)
    if z.shape[0] != gram.dim:
        raise ValueError(f"z has {z.shape[0]} rows, gram dimension is {gram.dim}")
    kz = gram.matrix @ z + gram.jitter * z
    return float(np.sum(z * kz))


def whiten_coeffs(z: np.ndarray, gram: GramMatrix) -> np.ndarray:
    """ztilde = C^T z, column by column."""
    return gram.chol.T @ z


def unwhiten_coeffs(ztilde: np.ndarray, gram: GramMatrix) -> np.ndarray:
    """z = C^{-T} ztilde via a triangular solve."""
    return solve_triangular(gram.chol, ztilde, lower=True, trans="T")


def whiten_operator(matrix: np.ndarray, gram: GramMatrix) -> np.ndarray:
    """Transform an evaluation operator D to whitened variables: D C^{-T}."""
    return solve_triangular(gram.chol, matrix.T, lower=True).T


def init_from_data(obs, grid: CollocationGrid, gram: GramMatrix,
                   alpha: float, lam: float, rng: np.random.Generator,
                   hidden_scale: float = 0.1) -> TrajectoryCoeffs:
    """Warm-start coefficients from the collocation-free ridge problem.

    Solving the objective with the ODE term switched off is a linear
    ridge problem per coordinate (a kernel smoother through that
    coordinate's observations).  Coordinates with no observations at all
    are seeded with zero-mean whitened perturbations of scale
    ``hidden_scale`` drawn from the run's generator, which corresponds to
    a smooth random function of modest amplitude.

    Observation matrices must be selection matrices (each column a
    standard basis vector); that is what every observation pattern in
    this package produces.
    """
    d = obs.state_dim
    node_idx = grid.index_of(obs.times)
    d0 = whitened_node_operator(gram, 0)
    b = gram.dim

    rows_per_coord = [[] for _ in range(d)]
    targets_per_coord = [[] for _ in range(d)]
    for n in range(len(obs.times)):
        v = obs.mats[n]
        y = obs.ys[n]
        for j in range(v.shape[1]):
            col = v[:, j]
            nz = np.nonzero(col)[0]
            if nz.size != 1 or col[nz[0]] != 1.0:
                raise NotImplementedError(
                    "init_from_data supports selection observation matrices only"
                )
            rows_per_coord[nz[0]].append(node_idx[n])
            targets_per_coord[nz[0]].append(y[j])

    ztilde = np.empty((b, d))
    for c in range(d):
        rows = rows_per_coord[c]
        if not rows:
            ztilde[:, c] = hidden_scale * rng.standard_normal(b)
            continue
        a_c = d0[np.array(rows), :]
        y_c = np.array(targets_per_coord[c])
        lam_c = lam
        gr = alpha * (a_c.T @ y_c)
        normal = alpha * (a_c.T @ a_c)
        while True:
            try:
                factor = cho_factor(normal + lam_c * np.eye(b), lower=True)
                ztilde[:, c] = cho_solve(factor, gr)
                break
            except np.linalg.LinAlgError:
                lam_c *= 10.0
                warnings.warn(
                    f"init ridge solve singular for coordinate {c}; "
                    f"raising ridge to {lam_c:.3e}"
                )
    z = unwhiten_coeffs(ztilde, gram)
    return TrajectoryCoeffs(z=z, ztilde=ztilde)
