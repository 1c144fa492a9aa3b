"""Polynomial feature dictionaries over derivative-augmented states.

The augmented state stacks the trajectory and its derivatives up to
order p-1, ordered derivative-major: ``u = (x_1..x_d, x_1'..x_d', ...)``
with ``len(u) = d*p``.  Features are monomials in u; the right-hand side
of the identified ODE is ``f(u; theta) = theta @ phi(u)`` with a sparse
coefficient matrix theta.
"""

from dataclasses import dataclass
from functools import lru_cache
from itertools import combinations_with_replacement

import numpy as np

from .errors import ConfigError, NumericInputError

__all__ = [
    "Feature",
    "LibrarySpec",
    "SparseCoeffs",
    "generate",
    "variable_names",
    "eval_features",
    "eval_feature_jac",
    "eval_f",
]


@dataclass(frozen=True)
class Feature:
    """A monomial over the augmented state, e.g. exponents (1,0,2) = u1*u3^2."""

    exponents: tuple
    name: str

    def __post_init__(self):
        if any(e < 0 for e in self.exponents):
            raise ValueError(f"negative exponent in feature {self.name}")

    @property
    def degree(self) -> int:
        return sum(self.exponents)


@dataclass(frozen=True)
class LibrarySpec:
    """Recipe for generating a monomial dictionary.

    ``cross_terms=False`` keeps only powers of single variables, which is
    how large coupled systems keep the dictionary small.  An explicit
    feature list overrides generation entirely (useful for deliberately
    misspecified dictionaries).
    """

    d: int
    p: int = 1
    max_degree: int = 2
    include_constant: bool = True
    cross_terms: bool = True
    explicit_features: tuple = None

    def __post_init__(self):
        if self.d < 1 or self.p < 1:
            raise ConfigError(f"library needs d >= 1 and p >= 1, got d={self.d}, p={self.p}")
        if self.max_degree < 0:
            raise ConfigError("max_degree must be nonnegative")

    @property
    def n_vars(self) -> int:
        return self.d * self.p


def variable_names(d: int, p: int) -> list:
    """Names of the augmented-state variables, primes marking derivatives."""
    return [f"x{i + 1}" + "'" * r for r in range(p) for i in range(d)]


def _monomial_name(exponents, names) -> str:
    parts = []
    for j, e in enumerate(exponents):
        if e == 1:
            parts.append(names[j])
        elif e > 1:
            parts.append(f"{names[j]}^{e}")
    return " ".join(parts) if parts else "1"


def generate(spec: LibrarySpec) -> list:
    """Generate the ordered feature list for a library spec.

    Ordering is graded lexicographic: ascending total degree, then
    lexicographic in the variable indices, with the constant first when
    included.  The ordering is deterministic so support sets are
    comparable across runs.
    """
    if spec.explicit_features is not None:
        feats = list(spec.explicit_features)
        if not feats:
            raise ConfigError("explicit feature list is empty")
        if len({f.exponents for f in feats}) != len(feats):
            raise ConfigError("explicit feature list contains duplicates")
        return feats

    names = variable_names(spec.d, spec.p)
    feats = []
    if spec.include_constant:
        feats.append(Feature(exponents=(0,) * spec.n_vars, name="1"))
    for deg in range(1, spec.max_degree + 1):
        for combo in combinations_with_replacement(range(spec.n_vars), deg):
            if not spec.cross_terms and len(set(combo)) > 1:
                continue
            exps = [0] * spec.n_vars
            for j in combo:
                exps[j] += 1
            exps = tuple(exps)
            feats.append(Feature(exponents=exps, name=_monomial_name(exps, names)))
    if not feats:
        raise ConfigError("library spec generates no features")
    return feats


@lru_cache(maxsize=64)
def _exponent_matrix(exponents: tuple) -> np.ndarray:
    return np.array(exponents, dtype=np.int64)


def exponent_matrix(features) -> np.ndarray:
    """(Q, n_vars) integer exponent matrix, cached across calls."""
    return _exponent_matrix(tuple(f.exponents for f in features))


def _check_finite(u: np.ndarray):
    if not np.all(np.isfinite(u)):
        raise NumericInputError("non-finite augmented state passed to the feature library")


def eval_features(features, u) -> np.ndarray:
    """Evaluate all features at u; u may be (n_vars,) or (M, n_vars)."""
    E = exponent_matrix(features)
    u = np.asarray(u, dtype=float)
    _check_finite(u)
    single = u.ndim == 1
    U = u[None, :] if single else u
    # (M, Q, n_vars) power tensor; dictionaries are small so this is cheap.
    phi = np.prod(U[:, None, :] ** E[None, :, :], axis=2)
    return phi[0] if single else phi


def eval_feature_jac(features, u) -> np.ndarray:
    """Analytic gradients d(phi_q)/d(u_j); (Q, n_vars) or (M, Q, n_vars)."""
    E = exponent_matrix(features)
    u = np.asarray(u, dtype=float)
    _check_finite(u)
    single = u.ndim == 1
    U = u[None, :] if single else u
    m, nv = U.shape
    q = E.shape[0]
    jac = np.zeros((m, q, nv))
    pow_cache = U[:, None, :] ** E[None, :, :]
    for j in range(nv):
        ecol = E[:, j]
        active = np.nonzero(ecol)[0]
        if active.size == 0:
            continue
        rest = np.prod(np.delete(pow_cache[:, active, :], j, axis=2), axis=2)
        jac[:, active, j] = ecol[active] * U[:, j:j + 1] ** (ecol[active] - 1) * rest
    return jac[0] if single else jac


@dataclass
class SparseCoeffs:
    """Dense coefficient matrix theta (d x Q) with a boolean support mask.

    Entries off the support are zeroed at construction so the invariant
    ``theta[m, q] == 0`` wherever ``support[m, q]`` is false holds by
    construction.
    """

    theta: np.ndarray
    support: np.ndarray = None

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        if self.support is None:
            self.support = self.theta != 0.0
        self.support = np.asarray(self.support, dtype=bool)
        if self.support.shape != self.theta.shape:
            raise ValueError(
                f"support shape {self.support.shape} != theta shape {self.theta.shape}"
            )
        self.theta = np.where(self.support, self.theta, 0.0)

    @property
    def d(self) -> int:
        return self.theta.shape[0]

    @property
    def n_features(self) -> int:
        return self.theta.shape[1]

    @property
    def n_active(self) -> int:
        return int(self.support.sum())

    def copy(self) -> "SparseCoeffs":
        return SparseCoeffs(self.theta.copy(), self.support.copy())


def eval_f(coeffs: SparseCoeffs, features, u) -> np.ndarray:
    """Apply the sparse right-hand side: theta @ phi(u); (d,) or (M, d)."""
    if coeffs.n_features != len(features):
        raise ValueError(
            f"theta has {coeffs.n_features} columns but library has {len(features)} features"
        )
    phi = eval_features(features, u)
    return phi @ coeffs.theta.T
