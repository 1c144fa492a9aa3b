"""Shared numerical oracles used across the test suite.

Everything here is deliberately independent of the implementation paths
it checks: Bessel-form Matern evaluation, high-order finite differences
in extended precision, and small brute-force solvers.
"""

from fractions import Fraction
from functools import lru_cache
from math import factorial

import numpy as np
from scipy.special import gamma, kv


@lru_cache(maxsize=None)
def fd_weights(m, half_width):
    """Exact central-difference weights for the m-th derivative.

    Solves the moment conditions sum_i w_i o_i^j = m! * delta_{j,m} over
    rationals on the symmetric offsets -half_width..half_width, so the
    only float error in the stencil is the final conversion.
    """
    offsets = list(range(-half_width, half_width + 1))
    npts = len(offsets)
    A = [[Fraction(o) ** j for o in offsets] for j in range(npts)]
    rhs = [Fraction(factorial(m)) if j == m else Fraction(0) for j in range(npts)]
    # Gaussian elimination with exact arithmetic.
    for col in range(npts):
        piv = next(r for r in range(col, npts) if A[r][col] != 0)
        A[col], A[piv] = A[piv], A[col]
        rhs[col], rhs[piv] = rhs[piv], rhs[col]
        inv = 1 / A[col][col]
        A[col] = [a * inv for a in A[col]]
        rhs[col] *= inv
        for r in range(npts):
            if r != col and A[r][col] != 0:
                f = A[r][col]
                A[r] = [a - f * b for a, b in zip(A[r], A[col])]
                rhs[r] -= f * rhs[col]
    return offsets, [float(w) for w in rhs]


def matern_bessel(r, nu):
    """Matern correlation via the modified-Bessel form (order-0 oracle)."""
    r = np.asarray(r, dtype=float)
    out = np.ones_like(r)
    pos = r > 0
    arg = np.sqrt(2.0 * nu) * r[pos]
    out[pos] = (2.0 ** (1.0 - nu) / gamma(nu)) * arg**nu * kv(nu, arg)
    return out


def fd_mixed_kernel(fun, a, b, t, tp, h=3e-3):
    """Central-difference estimate of d1^a d2^b fun(t, tp).

    Tensor product of 8th-order-accurate central stencils, accumulated in
    extended precision.  The step grows with the total order since the
    divided differences amplify the float64 rounding of the function
    values by h^-(a+b); with this schedule total orders up to 4 stay well
    below 1e-6 relative error on smooth kernels.
    """
    h = h * (1 + a + b)
    off_a, w_a = fd_weights(a, max(4, (a + 9) // 2))
    off_b, w_b = fd_weights(b, max(4, (b + 9) // 2))
    acc = np.longdouble(0.0)
    for oa, wa in zip(off_a, w_a):
        for ob, wb in zip(off_b, w_b):
            val = np.longdouble(fun(t + oa * h, tp + ob * h))
            acc += np.longdouble(wa) * np.longdouble(wb) * val
    return float(acc / np.longdouble(h) ** (a + b))


def fd_jacobian(fun, x, h=1e-6):
    """Dense central-difference Jacobian of a vector function."""
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(fun(x))
    jac = np.empty((f0.size, x.size))
    for j in range(x.size):
        step = h * max(1.0, abs(x[j]))
        xp = x.copy()
        xm = x.copy()
        xp[j] += step
        xm[j] -= step
        jac[:, j] = (np.asarray(fun(xp)) - np.asarray(fun(xm))) / (2 * step)
    return jac


def ridge_solve(A, b, lam):
    """Direct normal-equations ridge solve, used as a linear oracle."""
    q = A.shape[1]
    return np.linalg.solve(A.T @ A + lam * np.eye(q), A.T @ b)
