"""Constant-plus-Matern kernel with closed-form mixed derivatives.

For half-integer smoothness ``nu = n + 1/2`` the Matern covariance is a
polynomial times an exponential,

    h(r) = Q(u) * exp(-u),   u = sqrt(2*nu) * r,

where Q has rational coefficients.  Differentiating this form directly,

    d/du [Q(u) exp(-u)] = (Q'(u) - Q(u)) exp(-u),

keeps every coefficient rational, so the derivative polynomials of all
orders are built once per kernel by an exact recurrence over
``fractions.Fraction`` and only fixed to floats at the end.  Naive
floating-point differentiation of the polynomial-exponential product is
prone to catastrophic cancellation; the exact tables avoid it.

Mixed partial derivatives of the stationary kernel reduce to one
dimensional derivatives of kappa(s) = c0 + c1*h(|s|/ell):

    d^a/dt^a d^b/dt'^b k(t, t') = (-1)^b * kappa^(a+b)(t - t').
"""

from dataclasses import dataclass, field
from fractions import Fraction
from math import factorial

import numpy as np
from numpy.polynomial import polynomial as npoly

from .errors import IllConditionedGramError, UnsupportedOrderError

__all__ = [
    "KernelSpec",
    "DerivCoeffTable",
    "GramMatrix",
    "build_deriv_table",
    "eval_kernel",
    "kernel_deriv_matrix",
    "gram",
]


@dataclass(frozen=True)
class KernelSpec:
    """Hyperparameters of ``k(t,t') = c0 + c1 * h_nu(|t-t'| / ell)``.

    ``nu`` is stored through the integer ``n`` with ``nu = n + 1/2``; only
    half-integer smoothness is supported, which is what makes the
    closed-form derivative tables possible.  ``max_order`` is the largest
    total derivative order ``a + b`` the spec will serve; it may not
    exceed ``2 * n``, past which the kernel is no longer differentiable.
    """

    c0: float
    c1: float
    ell: float
    n: int
    max_order: int = 2

    def __post_init__(self):
        if self.c0 < 0:
            raise ValueError(f"c0 must be nonnegative, got {self.c0}")
        if self.c1 <= 0:
            raise ValueError(f"c1 must be positive, got {self.c1}")
        if self.ell <= 0:
            raise ValueError(f"ell must be positive, got {self.ell}")
        if self.n < 0 or self.n != int(self.n):
            raise ValueError(f"n must be a nonnegative integer, got {self.n}")
        if self.max_order < 0:
            raise ValueError("max_order must be nonnegative")
        if self.max_order > 2 * self.n:
            raise UnsupportedOrderError(
                f"max_order {self.max_order} exceeds 2*floor(nu) = {2 * self.n} "
                f"for nu = {self.n} + 1/2"
            )

    @property
    def nu(self) -> float:
        return self.n + 0.5

    @property
    def sqrt_2nu(self) -> float:
        return np.sqrt(2.0 * self.n + 1.0)


def _matern_base_poly(n: int) -> list:
    """Rational coefficients of Q with h(r) = Q(u) exp(-u), u = sqrt(2nu)*r.

    Q(u) = n!/(2n)! * sum_i (n+i)!/(i!(n-i)!) * (2u)^(n-i).
    """
    lead = Fraction(factorial(n), factorial(2 * n))
    coeffs = [Fraction(0)] * (n + 1)
    for m in range(n + 1):
        i = n - m
        coeffs[m] = lead * Fraction(factorial(n + i), factorial(i) * factorial(n - i)) * 2**m
    return coeffs


def _poly_deriv_minus(coeffs: list) -> list:
    """Exact coefficients of Q' - Q for ascending-order Fraction coeffs."""
    out = [-c for c in coeffs]
    for m in range(1, len(coeffs)):
        out[m - 1] += m * coeffs[m]
    while len(out) > 1 and out[-1] == 0:
        out.pop()
    return out


@dataclass(frozen=True)
class DerivCoeffTable:
    """Float-fixed polynomial tables for kappa's derivatives.

    ``polys[j]`` holds ascending coefficients of P_j with

        d^j/ds^j [c1 * h(|s|/ell)] = sign(s)^j * P_j(|s|/ell) * exp(-sqrt(2nu)|s|/ell)

    and ``at_zero[j]`` is the two-sided limit at s = 0 (exactly 0 for odd
    j, since kappa is even).  The c0 constant is not part of the table;
    it only enters the order-zero kernel value.
    """

    spec: KernelSpec
    polys: tuple = field(repr=False)
    at_zero: tuple = field(repr=False)

    def deriv(self, j: int, s):
        """Evaluate d^j/ds^j [c1*h(|s|/ell)] elementwise on ``s``."""
        if j < 0 or j > self.spec.max_order:
            raise UnsupportedOrderError(
                f"derivative order {j} outside table range 0..{self.spec.max_order}"
            )
        s = np.asarray(s, dtype=float)
        r = np.abs(s) / self.spec.ell
        val = npoly.polyval(r, self.polys[j]) * np.exp(-self.spec.sqrt_2nu * r)
        if j % 2 == 1:
            val = val * np.sign(s)
        return val


def build_deriv_table(spec: KernelSpec) -> DerivCoeffTable:
    """Build the derivative coefficient tables for orders 0..max_order.

    The recurrence runs in exact rational arithmetic in the scaled
    variable u = sqrt(2nu)*|s|/ell; irrational factors enter only as
    integer powers of (2nu) plus at most one sqrt, multiplied in at the
    final float conversion.
    """
    n = spec.n
    two_nu = 2 * n + 1
    q = _matern_base_poly(n)
    polys = []
    at_zero = []
    for j in range(spec.max_order + 1):
        # P_j(r) = c1 / ell^j * Q_j(sqrt(2nu) * r); coefficient of r^m is
        # c1/ell^j * q_m * (2nu)^((j+m)//2) * sqrt(2nu)^((j+m) % 2).
        coeffs = np.empty(len(q))
        for m, qm in enumerate(q):
            exact = qm * Fraction(two_nu) ** ((j + m) // 2)
            val = float(exact) * spec.c1 / spec.ell**j
            if (j + m) % 2 == 1:
                val *= spec.sqrt_2nu
            coeffs[m] = val
        polys.append(coeffs)
        at_zero.append(0.0 if j % 2 == 1 else float(coeffs[0]))
        q = _poly_deriv_minus(q)
    return DerivCoeffTable(spec=spec, polys=tuple(polys), at_zero=tuple(at_zero))


def eval_kernel(table: DerivCoeffTable, a: int, b: int, t, tp):
    """Mixed partial derivative d1^a d2^b k(t, tp); broadcasts over arrays."""
    if a < 0 or b < 0:
        raise ValueError("derivative orders must be nonnegative")
    j = a + b
    if j > table.spec.max_order:
        raise UnsupportedOrderError(
            f"total order {a}+{b} exceeds max_order {table.spec.max_order}"
        )
    s = np.asarray(t, dtype=float) - np.asarray(tp, dtype=float)
    val = table.deriv(j, s)
    if b % 2 == 1:
        val = -val
    if j == 0:
        val = val + table.spec.c0
    return val


def kernel_deriv_matrix(table: DerivCoeffTable, a: int, b: int, t: np.ndarray, tp: np.ndarray) -> np.ndarray:
    """Matrix [d1^a d2^b k(t_i, tp_j)]_ij."""
    t = np.asarray(t, dtype=float)
    tp = np.asarray(tp, dtype=float)
    return eval_kernel(table, a, b, t[:, None], tp[None, :])


class GramMatrix:
    """Block Gram matrix of kernel derivative sections at the nodes tau.

    Rows and columns are ordered derivative-major: index (r, i) maps to
    r * M + i, so block (r, s) holds d1^r d2^s k(tau_i, tau_j).  The
    stored Cholesky factor is of K + jitter*I with the jitter found by an
    escalating schedule (reported for reproducibility).
    """

    def __init__(self, matrix: np.ndarray, jitter: float, chol: np.ndarray, tau: np.ndarray, p: int):
        self.matrix = matrix
        self.jitter = jitter
        self.chol = chol
        self.tau = tau
        self.p = p

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.tau.shape[0]


def gram(table: DerivCoeffTable, tau: np.ndarray, p: int,
         jitter_start: float = 1e-10, jitter_cap: float = 1e-4) -> GramMatrix:
    """Assemble K for derivative orders 0..p at nodes tau and factorize.

    The jitter starts at ``jitter_start * trace(K)/dim`` and is multiplied
    by 10 until the Cholesky succeeds, capped at ``jitter_cap * trace/dim``.
    """
    if 2 * p > table.spec.max_order:
        raise UnsupportedOrderError(
            f"gram with p={p} needs order {2 * p} but max_order is {table.spec.max_order}"
        )
    tau = np.asarray(tau, dtype=float)
    if tau.ndim != 1 or tau.size < 1:
        raise ValueError("tau must be a nonempty 1-d array")
    if np.any(np.diff(tau) <= 0):
        raise ValueError("tau must be strictly increasing")

    m = tau.size
    diff = tau[:, None] - tau[None, :]
    # One table evaluation per total order; blocks reuse them with signs.
    totals = [table.deriv(j, diff) for j in range(2 * p + 1)]
    totals[0] = totals[0] + table.spec.c0

    dim = (p + 1) * m
    K = np.empty((dim, dim))
    for r in range(p + 1):
        for s in range(p + 1):
            block = totals[r + s]
            if s % 2 == 1:
                block = -block
            K[r * m:(r + 1) * m, s * m:(s + 1) * m] = block
    K = 0.5 * (K + K.T)

    scale = np.trace(K) / dim
    jitter = jitter_start * scale
    cap = jitter_cap * scale
    eye = np.eye(dim)
    while True:
        try:
            chol = np.linalg.cholesky(K + jitter * eye)
            break
        except np.linalg.LinAlgError:
            if jitter >= cap:
                raise IllConditionedGramError(
                    f"Gram factorization failed at jitter cap {jitter:.3e} "
                    f"(dim {dim}, trace/dim {scale:.3e})",
                    jitter=jitter,
                ) from None
            jitter = min(jitter * 10.0, cap)
    return GramMatrix(matrix=K, jitter=jitter, chol=chol, tau=tau, p=p)
