"""Feature selection on the frozen trajectory estimate.

With the trajectory frozen, matching the collocation residual is a
linear least-squares problem in theta: rows are the weighted feature
evaluations at the nodes, targets the weighted p-th derivatives.  The
sparsifiers below (sequentially thresholded ridge, relaxed L1, and a
bagging ensemble wrapper) operate on that problem and return the new
support together with refit coefficients.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericInputError
from .library import SparseCoeffs, eval_features

__all__ = [
    "SparsifierSpec",
    "RegressionProblem",
    "build_regression",
    "stlsq",
    "sr3_l1",
    "ensemble",
    "sparsify",
]


@dataclass(frozen=True)
class SparsifierSpec:
    """Which sparsifier to run and with what knobs.

    ``normalize_columns`` rescales design columns to unit root mean
    square before thresholding (thresholds then act in scaled space);
    whether published threshold values assume this is problem-dependent,
    so it is a per-experiment switch.
    """

    variant: str = "stlsq"
    threshold: float = 0.1
    ridge: float = 0.01
    l1_weight: float = 5.0
    relaxation: float = 0.05
    n_bags: int = 20
    inclusion_freq: float = 0.5
    inner: "SparsifierSpec" = None
    normalize_columns: bool = True

    def __post_init__(self):
        if self.variant not in ("stlsq", "sr3_l1", "ensemble"):
            raise ConfigError(f"unknown sparsifier variant {self.variant!r}")
        if self.variant == "stlsq" and self.threshold <= 0:
            raise ConfigError("stlsq threshold must be positive")
        if self.variant == "ensemble":
            if self.n_bags < 2:
                raise ConfigError("ensemble needs n_bags >= 2")
            if not 0 < self.inclusion_freq <= 1:
                raise ConfigError("inclusion_freq must lie in (0, 1]")
            if self.inner is None or self.inner.variant == "ensemble":
                raise ConfigError("ensemble requires a non-ensemble inner sparsifier")


@dataclass
class RegressionProblem:
    """Weighted linear regression data: design A (M x Q), targets B (M x d)."""

    design: np.ndarray
    targets: np.ndarray
    col_scale: np.ndarray = None

    def __post_init__(self):
        if not np.all(np.isfinite(self.design)) or not np.all(np.isfinite(self.targets)):
            raise NumericInputError("non-finite entries in the sparsifier regression problem")
        if self.col_scale is None:
            self.col_scale = np.ones(self.design.shape[1])


def build_regression(z: np.ndarray, grid, evalops, features) -> RegressionProblem:
    """Assemble the linear problem min_theta || sqrt(w) (Xp - Phi theta^T) ||_F.

    ``evalops`` supplies operators for derivative orders 0..p evaluated
    at the collocation nodes; the trajectory derivatives entering both
    sides are exact derivatives of the current estimate.  Zero-weight
    nodes produce zero rows and thus do not influence the fit.
    """
    p = len(evalops) - 1
    sqrt_w = np.sqrt(grid.w)[:, None]
    u = np.column_stack([evalops[r] @ z for r in range(p)])
    if not np.all(np.isfinite(u)):
        raise NumericInputError("non-finite trajectory samples in sparsifier regression")
    phi = eval_features(features, u)
    design = sqrt_w * phi
    targets = sqrt_w * (evalops[p] @ z)
    return RegressionProblem(design=design, targets=targets)


def _normalized(problem: RegressionProblem):
    scale = np.sqrt(np.mean(problem.design**2, axis=0))
    scale[scale == 0] = 1.0
    return problem.design / scale, scale


def _ridge_solve(a: np.ndarray, b: np.ndarray, ridge: float) -> np.ndarray:
    q = a.shape[1]
    return np.linalg.solve(a.T @ a + ridge * np.eye(q), a.T @ b)


def stlsq(problem: RegressionProblem, threshold: float, ridge: float,
          normalize_columns: bool = True) -> SparseCoeffs:
    """Sequentially thresholded ridge regression, per output dimension.

    Alternates a ridge solve on the active columns with eviction of
    coefficients below the threshold until the active set stops
    shrinking.  If every feature of some dimension is evicted the
    dimension is left as a zero row with a warning.
    """
    if threshold <= 0 or ridge < 0:
        raise ConfigError("stlsq needs threshold > 0 and ridge >= 0")
    if normalize_columns:
        a, scale = _normalized(problem)
    else:
        a, scale = problem.design, np.ones(problem.design.shape[1])
    b = problem.targets
    m, q = a.shape
    d = b.shape[1]
    theta = np.zeros((d, q))
    support = np.zeros((d, q), dtype=bool)
    for i in range(d):
        active = np.arange(q)
        coef = None
        for _ in range(q + 1):
            coef = _ridge_solve(a[:, active], b[:, i], ridge)
            keep = np.abs(coef) >= threshold
            if np.all(keep):
                break
            active = active[keep]
            if active.size == 0:
                warnings.warn(f"stlsq evicted every feature for dimension {i}")
                break
        if active.size:
            support[i, active] = True
            theta[i, active] = coef / scale[active]
    return SparseCoeffs(theta, support)


def sr3_l1(problem: RegressionProblem, l1_weight: float, relaxation: float,
           normalize_columns: bool = True, tol: float = 1e-8,
           max_iter: int = 10_000) -> SparseCoeffs:
    """Sparse relaxed regression with an L1 penalty.

    Minimizes ``1/2 ||A xi - b||^2 + l1 ||v||_1 + 1/(2 relaxation) ||xi - v||^2``
    per output dimension by alternating a coupled ridge solve in xi with
    soft-thresholding of v at level ``l1_weight * relaxation``; the
    support is read off the auxiliary variable v at convergence.
    """
    if l1_weight < 0 or relaxation <= 0:
        raise ConfigError("sr3 needs l1_weight >= 0 and relaxation > 0")
    if normalize_columns:
        a, scale = _normalized(problem)
    else:
        a, scale = problem.design, np.ones(problem.design.shape[1])
    b = problem.targets
    m, q = a.shape
    d = b.shape[1]
    gram = a.T @ a + np.eye(q) / relaxation
    atb = a.T @ b
    soft_level = l1_weight * relaxation

    theta = np.zeros((d, q))
    support = np.zeros((d, q), dtype=bool)
    for i in range(d):
        v = np.zeros(q)
        converged = False
        for _ in range(max_iter):
            xi = np.linalg.solve(gram, atb[:, i] + v / relaxation)
            v_new = np.sign(xi) * np.maximum(np.abs(xi) - soft_level, 0.0)
            delta = np.linalg.norm(v_new - v)
            v = v_new
            if delta <= tol * max(1.0, np.linalg.norm(v)):
                converged = True
                break
        if not converged:
            warnings.warn(f"sr3 hit the iteration cap for dimension {i}")
        mask = v != 0.0
        support[i] = mask
        theta[i, mask] = v[mask] / scale[mask]
    return SparseCoeffs(theta, support)


def ensemble(problem: RegressionProblem, spec: SparsifierSpec,
             rng: np.random.Generator) -> SparseCoeffs:
    """Bagging wrapper: resample rows, run the inner sparsifier per bag,
    keep features selected in at least ``inclusion_freq`` of the bags,
    then refit by ridge on the full problem restricted to that support.
    """
    m = problem.design.shape[0]
    counts = None
    for _ in range(spec.n_bags):
        rows = rng.integers(0, m, size=m)
        sub = RegressionProblem(design=problem.design[rows], targets=problem.targets[rows])
        picked = _dispatch_single(sub, spec.inner, rng)
        counts = picked.support.astype(int) if counts is None else counts + picked.support
    support = counts >= spec.inclusion_freq * spec.n_bags

    refit_ridge = spec.inner.ridge if spec.inner.variant == "stlsq" else 1e-8
    d, q = support.shape
    theta = np.zeros((d, q))
    for i in range(d):
        cols = np.nonzero(support[i])[0]
        if cols.size:
            theta[i, cols] = _ridge_solve(problem.design[:, cols], problem.targets[:, i], refit_ridge)
    return SparseCoeffs(theta, support)


def _dispatch_single(problem: RegressionProblem, spec: SparsifierSpec,
                     rng: np.random.Generator) -> SparseCoeffs:
    if spec.variant == "stlsq":
        return stlsq(problem, spec.threshold, spec.ridge, spec.normalize_columns)
    if spec.variant == "sr3_l1":
        return sr3_l1(problem, spec.l1_weight, spec.relaxation, spec.normalize_columns)
    raise ConfigError(f"cannot run sparsifier variant {spec.variant!r} directly")


def sparsify(problem: RegressionProblem, spec: SparsifierSpec,
             rng: np.random.Generator) -> SparseCoeffs:
    """Run the configured sparsifier and return coefficients plus support."""
    if spec.variant == "ensemble":
        return ensemble(problem, spec, rng)
    return _dispatch_single(problem, spec, rng)
