import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rkhsid.errors import IllConditionedGramError, UnsupportedOrderError
from rkhsid.kernel import (
    KernelSpec,
    build_deriv_table,
    eval_kernel,
    gram,
    kernel_deriv_matrix,
)

from helpers import fd_mixed_kernel, matern_bessel


def make_table(c0=0.5, c1=2.0, ell=1.0, n=5, max_order=4):
    return build_deriv_table(KernelSpec(c0=c0, c1=c1, ell=ell, n=n, max_order=max_order))


class TestSpecValidation:
    def test_rejects_order_beyond_smoothness(self):
        with pytest.raises(UnsupportedOrderError):
            KernelSpec(c0=0.0, c1=1.0, ell=1.0, n=2, max_order=5)

    def test_rejects_bad_hyperparameters(self):
        with pytest.raises(ValueError):
            KernelSpec(c0=-1.0, c1=1.0, ell=1.0, n=1)
        with pytest.raises(ValueError):
            KernelSpec(c0=0.0, c1=0.0, ell=1.0, n=1)
        with pytest.raises(ValueError):
            KernelSpec(c0=0.0, c1=1.0, ell=0.0, n=1)

    def test_deriv_request_beyond_table_raises(self):
        table = make_table(max_order=2)
        with pytest.raises(UnsupportedOrderError):
            eval_kernel(table, 2, 1, 0.3, 0.1)


class TestDerivTable:
    def test_matern_half_is_pure_exponential(self):
        # nu = 1/2: h(r) = exp(-r), so order 0 must match the Bessel form.
        table = make_table(c0=0.0, c1=1.0, ell=1.0, n=0, max_order=0)
        for r in (0.1, 1.0, 3.0):
            got = table.deriv(0, r)
            assert got == pytest.approx(np.exp(-r), rel=1e-12)
            assert got == pytest.approx(matern_bessel(np.array([r]), 0.5)[0], rel=1e-10)

    @pytest.mark.parametrize("n", [0, 1, 2, 5])
    def test_order_zero_matches_bessel_form(self, n):
        c1 = 1.7
        table = make_table(c0=0.0, c1=c1, ell=1.3, n=n, max_order=0)
        s = np.array([0.05, 0.13, 0.7, 1.0, 2.9, 6.0])
        expected = c1 * matern_bessel(s / 1.3, n + 0.5)
        np.testing.assert_allclose(table.deriv(0, s), expected, rtol=1e-10)

    def test_value_at_zero_is_c1(self):
        table = make_table(c1=3.25)
        assert table.deriv(0, 0.0) == pytest.approx(3.25, rel=1e-14)

    def test_odd_orders_vanish_at_zero(self):
        table = make_table(max_order=10, n=5)
        for j in (1, 3, 5, 7, 9):
            assert table.deriv(j, 0.0) == 0.0
            assert table.at_zero[j] == 0.0

    def test_even_orders_alternate_sign_at_zero(self):
        # kappa''(0) < 0 and kappa''''(0) > 0 for any covariance this smooth.
        table = make_table(max_order=4)
        assert table.deriv(2, 0.0) < 0
        assert table.deriv(4, 0.0) > 0


class TestEvalKernel:
    def test_diagonal_value(self):
        table = make_table(c0=0.5, c1=2.0)
        assert eval_kernel(table, 0, 0, 1.3, 1.3) == pytest.approx(2.5, rel=1e-14)

    def test_symmetry_under_argument_swap(self):
        table = make_table(max_order=4)
        rng = np.random.default_rng(0)
        for _ in range(50):
            a, b = rng.integers(0, 3, size=2)
            t, tp = rng.uniform(-2, 2, size=2)
            assert eval_kernel(table, a, b, t, tp) == pytest.approx(
                eval_kernel(table, b, a, tp, t), rel=1e-13, abs=1e-13
            )

    def test_constant_only_contributes_to_order_zero(self):
        with_c0 = make_table(c0=5.0)
        no_c0 = make_table(c0=0.0)
        assert eval_kernel(with_c0, 0, 0, 0.4, 0.1) == pytest.approx(
            eval_kernel(no_c0, 0, 0, 0.4, 0.1) + 5.0, rel=1e-14
        )
        for a, b in [(1, 0), (0, 1), (1, 1), (2, 2)]:
            assert eval_kernel(with_c0, a, b, 0.4, 0.1) == pytest.approx(
                eval_kernel(no_c0, a, b, 0.4, 0.1), rel=1e-14
            )

    @pytest.mark.parametrize("a,b", [(a, b) for a in range(3) for b in range(3) if 0 < a + b <= 4])
    def test_matches_finite_differences(self, a, b):
        table = make_table(max_order=4)
        base = lambda t, tp: eval_kernel(table, 0, 0, t, tp)
        # Near zero crossings relative error is ill-posed; anchor the
        # absolute tolerance to the derivative's scale at s = 0.
        scale = max(abs(table.deriv(a + b, 0.0)), abs(table.deriv(a + b, 0.3)))
        rng = np.random.default_rng(7)
        for _ in range(5):
            t, tp = rng.uniform(-1.5, 1.5, size=2)
            got = eval_kernel(table, a, b, t, tp)
            ref = fd_mixed_kernel(base, a, b, t, tp)
            assert got == pytest.approx(ref, rel=1e-6, abs=1e-6 * scale)

    def test_first_first_at_coincident_points(self):
        # d1 d2 k(t, t) = -kappa''(0) > 0.  For nu = 5/2 the closed form is
        # the textbook 5*c1/(3*ell^2); the smoother nu = 11/2 case is
        # checked against finite differences (the FD stencil needs more
        # smoothness across the diagonal than nu = 5/2 provides).
        table52 = make_table(n=2, max_order=2, c1=2.0, ell=0.8)
        got52 = eval_kernel(table52, 1, 1, 0.9, 0.9)
        assert got52 == pytest.approx(5.0 * 2.0 / (3.0 * 0.8**2), rel=1e-12)

        table = make_table(n=5, max_order=4)
        got = eval_kernel(table, 1, 1, 0.9, 0.9)
        ref = fd_mixed_kernel(lambda t, tp: eval_kernel(table, 0, 0, t, tp), 1, 1, 0.9, 0.9)
        assert got > 0
        assert got == pytest.approx(ref, rel=1e-6)

    def test_continuity_across_diagonal(self):
        # No jump at t = t' for orders below the smoothness bound.  The
        # value legitimately moves by ~ |kappa^(j+1)(0)| * s near the
        # diagonal, so that first-order term is added to the tolerance.
        table = make_table(n=5, max_order=10)
        for j in range(0, 10):
            a = j // 2
            b = j - a
            limit = eval_kernel(table, a, b, 0.0, 0.0)
            slope = abs(table.at_zero[j + 1]) if j + 1 <= 10 else 0.0
            tol = 1e-6 + 2e-9 * slope
            for s in (1e-9, -1e-9):
                assert abs(eval_kernel(table, a, b, s, 0.0) - limit) <= tol

    @given(
        st.floats(-3.0, 3.0),
        st.floats(-3.0, 3.0),
        st.integers(0, 2),
        st.integers(0, 2),
    )
    @settings(max_examples=80, deadline=None)
    def test_swap_symmetry_property(self, t, tp, a, b):
        table = make_table(max_order=4)
        lhs = eval_kernel(table, a, b, t, tp)
        rhs = eval_kernel(table, b, a, tp, t)
        assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)


class TestGram:
    def test_single_node_order_zero(self):
        table = make_table(c0=0.5, c1=2.0)
        g = gram(table, np.array([0.3]), p=0)
        assert g.matrix.shape == (1, 1)
        assert g.matrix[0, 0] == pytest.approx(2.5, rel=1e-14)

    def test_small_gram_matches_finite_difference_oracle(self):
        table = make_table(n=2, max_order=2, ell=0.9)
        tau = np.array([0.2, 1.1])
        g = gram(table, tau, p=1)
        base = lambda t, tp: eval_kernel(table, 0, 0, t, tp)
        m = 2
        for r in range(2):
            for s in range(2):
                for i in range(m):
                    for j in range(m):
                        ref = fd_mixed_kernel(base, r, s, tau[i], tau[j], h=1e-3)
                        assert g.matrix[r * m + i, s * m + j] == pytest.approx(
                            ref, rel=1e-6, abs=1e-9
                        )

    def test_block_layout_is_derivative_major(self):
        table = make_table(max_order=4)
        tau = np.linspace(0.0, 2.0, 5)
        g = gram(table, tau, p=2)
        m = tau.size
        block = kernel_deriv_matrix(table, 1, 2, tau, tau)
        np.testing.assert_allclose(g.matrix[m:2 * m, 2 * m:3 * m], block, rtol=1e-12, atol=1e-12)

    def test_symmetry_and_positive_definite_after_jitter(self):
        table = make_table(n=5, max_order=4, ell=0.4)
        rng = np.random.default_rng(3)
        tau = np.sort(rng.uniform(0.0, 5.0, size=30))
        g = gram(table, tau, p=2)
        K = g.matrix
        assert np.max(np.abs(K - K.T)) <= 1e-12 * np.max(np.abs(K))
        eigs = np.linalg.eigvalsh(K + g.jitter * np.eye(g.dim))
        assert eigs.min() > 0

    def test_cholesky_reconstructs_jittered_matrix(self):
        table = make_table(n=5, max_order=4)
        tau = np.linspace(0.0, 3.0, 40)
        g = gram(table, tau, p=2)
        target = g.matrix + g.jitter * np.eye(g.dim)
        rec = g.chol @ g.chol.T
        err = np.linalg.norm(rec - target) / np.linalg.norm(target)
        assert err <= 1e-8

    def test_rejects_unsorted_nodes(self):
        table = make_table()
        with pytest.raises(ValueError):
            gram(table, np.array([0.0, 0.5, 0.4]), p=1)

    def test_rejects_order_overflow(self):
        table = make_table(n=1, max_order=2)
        with pytest.raises(UnsupportedOrderError):
            gram(table, np.linspace(0, 1, 4), p=2)

    def test_jitter_cap_failure_reports_final_jitter(self):
        # With the jitter schedule pinned far below the matrix's negative
        # roundoff eigenvalues, escalation exhausts the cap and reports it.
        table = make_table(n=5, max_order=4)
        tau = np.linspace(0.0, 1.0, 40)
        with pytest.raises(IllConditionedGramError) as err:
            gram(table, tau, p=2, jitter_start=1e-30, jitter_cap=1e-28)
        assert err.value.jitter > 0

    def test_jitter_escalates_past_failed_levels(self):
        table = make_table(n=5, max_order=4)
        tau = np.linspace(0.0, 1.0, 40)
        g = gram(table, tau, p=2)
        base = np.trace(g.matrix) / g.dim
        assert 1e-10 * base <= g.jitter <= 1e-4 * base * (1 + 1e-12)
