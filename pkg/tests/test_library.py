import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rkhsid.errors import ConfigError, NumericInputError
from rkhsid.library import (
    Feature,
    LibrarySpec,
    SparseCoeffs,
    eval_f,
    eval_feature_jac,
    eval_features,
    generate,
    variable_names,
)

from helpers import fd_jacobian


def lv_library():
    return generate(LibrarySpec(d=2, p=1, max_degree=2))


class TestGenerate:
    def test_quadratic_two_dim_library(self):
        feats = lv_library()
        assert [f.name for f in feats] == ["1", "x1", "x2", "x1^2", "x1 x2", "x2^2"]
        assert len(feats) == 6

    def test_no_cross_terms_count(self):
        feats = generate(LibrarySpec(d=5, p=2, max_degree=3, cross_terms=False))
        assert len(feats) == 31

    def test_constant_only(self):
        feats = generate(LibrarySpec(d=1, p=1, max_degree=0))
        assert len(feats) == 1
        assert feats[0].name == "1"

    def test_deterministic(self):
        spec = LibrarySpec(d=3, p=2, max_degree=3)
        assert generate(spec) == generate(spec)

    def test_empty_library_rejected(self):
        with pytest.raises(ConfigError):
            generate(LibrarySpec(d=2, p=1, max_degree=0, include_constant=False))

    def test_explicit_features_override(self):
        feats = (Feature((2, 1), "x1^2 x2"), Feature((0, 3), "x2^3"))
        out = generate(LibrarySpec(d=2, p=1, max_degree=1, explicit_features=feats))
        assert out == list(feats)

    def test_explicit_duplicates_rejected(self):
        feats = (Feature((1, 0), "x1"), Feature((1, 0), "x1 again"))
        with pytest.raises(ConfigError):
            generate(LibrarySpec(d=2, p=1, explicit_features=feats))

    def test_second_order_variable_names(self):
        assert variable_names(2, 2) == ["x1", "x2", "x1'", "x2'"]


class TestEvalFeatures:
    def test_at_origin(self):
        feats = lv_library()
        np.testing.assert_array_equal(
            eval_features(feats, np.zeros(2)), [1.0, 0, 0, 0, 0, 0]
        )

    def test_hand_values(self):
        feats = lv_library()
        np.testing.assert_allclose(
            eval_features(feats, np.array([2.0, 3.0])), [1, 2, 3, 4, 6, 9]
        )

    def test_batch_shape(self):
        feats = lv_library()
        u = np.random.default_rng(0).normal(size=(7, 2))
        phi = eval_features(feats, u)
        assert phi.shape == (7, 6)
        np.testing.assert_allclose(phi[3], eval_features(feats, u[3]))

    def test_nonfinite_rejected(self):
        with pytest.raises(NumericInputError):
            eval_features(lv_library(), np.array([1.0, np.nan]))


class TestFeatureJacobian:
    def test_constant_row_is_zero(self):
        feats = lv_library()
        jac = eval_feature_jac(feats, np.array([1.5, -0.5]))
        np.testing.assert_array_equal(jac[0], [0.0, 0.0])

    def test_product_rule(self):
        feats = lv_library()
        jac = eval_feature_jac(feats, np.array([2.0, 3.0]))
        # x1*x2 row: gradient (x2, x1) = (3, 2)
        np.testing.assert_allclose(jac[4], [3.0, 2.0])

    def test_matches_finite_differences(self):
        feats = generate(LibrarySpec(d=2, p=2, max_degree=3))
        rng = np.random.default_rng(11)
        for _ in range(200):
            u = rng.uniform(-2, 2, size=4)
            jac = eval_feature_jac(feats, u)
            ref = fd_jacobian(lambda v: eval_features(feats, v), u, h=1e-6)
            np.testing.assert_allclose(jac, ref, rtol=1e-7, atol=1e-7)


class TestSparseCoeffs:
    def test_zeroed_off_support(self):
        theta = np.array([[1.0, 2.0], [3.0, 4.0]])
        support = np.array([[True, False], [False, True]])
        c = SparseCoeffs(theta, support)
        np.testing.assert_array_equal(c.theta, [[1.0, 0.0], [0.0, 4.0]])

    def test_support_defaults_to_nonzeros(self):
        c = SparseCoeffs(np.array([[0.0, 2.0]]))
        np.testing.assert_array_equal(c.support, [[False, True]])

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            SparseCoeffs(np.zeros((2, 3)), np.zeros((3, 2), dtype=bool))


class TestEvalF:
    def test_lorenz_vector_field_value(self):
        feats = generate(LibrarySpec(d=3, p=1, max_degree=2))
        names = [f.name for f in feats]
        theta = np.zeros((3, len(feats)))
        theta[0, names.index("x1")] = -10.0
        theta[0, names.index("x2")] = 10.0
        theta[1, names.index("x1")] = 28.0
        theta[1, names.index("x2")] = -1.0
        theta[1, names.index("x1 x3")] = -1.0
        theta[2, names.index("x3")] = -8.0 / 3.0
        theta[2, names.index("x1 x2")] = 1.0
        f = eval_f(SparseCoeffs(theta), feats, np.array([-8.0, 8.0, 27.0]))
        np.testing.assert_allclose(f, [160.0, -16.0, -136.0], rtol=1e-13)

    def test_zero_theta(self):
        feats = lv_library()
        c = SparseCoeffs(np.zeros((2, 6)))
        np.testing.assert_array_equal(eval_f(c, feats, np.array([1.0, 2.0])), [0.0, 0.0])

    def test_empty_support_is_zero_everywhere(self):
        feats = lv_library()
        c = SparseCoeffs(np.ones((2, 6)), np.zeros((2, 6), dtype=bool))
        u = np.random.default_rng(1).normal(size=(5, 2))
        np.testing.assert_array_equal(eval_f(c, feats, u), np.zeros((5, 2)))

    def test_dimension_mismatch(self):
        feats = lv_library()
        with pytest.raises(ValueError):
            eval_f(SparseCoeffs(np.zeros((2, 5))), feats, np.array([1.0, 2.0]))

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_linearity_in_theta(self, seed):
        feats = lv_library()
        rng = np.random.default_rng(seed)
        t1 = rng.normal(size=(2, 6))
        t2 = rng.normal(size=(2, 6))
        u = rng.normal(size=2)
        full = np.ones((2, 6), dtype=bool)
        lhs = eval_f(SparseCoeffs(t1 + t2, full), feats, u)
        rhs = eval_f(SparseCoeffs(t1, full), feats, u) + eval_f(SparseCoeffs(t2, full), feats, u)
        np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(
            eval_f(SparseCoeffs(3.0 * t1, full), feats, u),
            3.0 * eval_f(SparseCoeffs(t1, full), feats, u),
            rtol=1e-12,
            atol=1e-12,
        )
