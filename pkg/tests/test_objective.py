import numpy as np
import pytest

from rkhsid.errors import NumericInputError
from rkhsid.kernel import KernelSpec, build_deriv_table, gram
from rkhsid.library import LibrarySpec, generate
from rkhsid.objective import (
    CollocationProblem,
    ObservationSet,
    Weights,
    jacobian_blocks,
    objective_terms,
    objective_value,
    residual_colloc,
    residual_data,
)
from rkhsid.trajectory import (
    build_eval_operator,
    node_operator,
    uniform_grid,
    unwhiten_coeffs,
    whiten_coeffs,
)

from helpers import fd_jacobian


@pytest.fixture(scope="module")
def fixture():
    table = build_deriv_table(KernelSpec(c0=0.3, c1=1.5, ell=0.6, n=5, max_order=4))
    grid = uniform_grid(2.0, 18).merge_times(np.array([0.37, 1.11]))
    g = gram(table, grid.tau, p=1)
    feats = generate(LibrarySpec(d=2, p=1, max_degree=2))
    rng = np.random.default_rng(7)
    times = np.array([0.0, 0.37, 1.11, 2.0])
    mats = [np.eye(2), np.eye(2)[:, :1], np.eye(2)[:, 1:], np.eye(2)]
    ys = [rng.normal(size=v.shape[1]) for v in mats]
    obs = ObservationSet(times, mats, ys)
    evalops = [build_eval_operator(table, grid, grid.tau, r, p=1) for r in range(2)]
    obs_op = build_eval_operator(table, grid, times, 0, p=1)
    weights = Weights(alpha=1.3, beta=50.0, lam=1e-4, mu=1e-5)
    return table, grid, g, feats, obs, evalops, obs_op, weights


class TestObservationSet:
    def test_validation(self):
        with pytest.raises(ValueError):
            ObservationSet([0.0], [np.eye(2)], [np.zeros(3)])
        with pytest.raises(ValueError):
            ObservationSet([], [], [])

    def test_scalar_layout(self, fixture):
        _, _, _, _, obs, _, _, _ = fixture
        t_idx, coeffs = obs.scalar_coeffs()
        assert t_idx.tolist() == [0, 0, 1, 2, 3, 3]
        np.testing.assert_array_equal(coeffs[2], [1.0, 0.0])
        np.testing.assert_array_equal(coeffs[3], [0.0, 1.0])


class TestResidualData:
    def test_exact_observations_give_zero(self, fixture):
        table, grid, g, feats, obs, evalops, obs_op, _ = fixture
        rng = np.random.default_rng(1)
        z = rng.standard_normal((g.dim, 2))
        x_obs = obs_op.matrix @ z
        ys = [v.T @ x_obs[n] for n, v in enumerate(obs.mats)]
        obs2 = ObservationSet(obs.times, obs.mats, ys)
        res = residual_data(z, obs2, obs_op)
        assert np.max(np.abs(res)) <= 1e-12

    def test_zero_coeffs_give_negative_targets(self, fixture):
        _, _, g, _, obs, _, obs_op, _ = fixture
        res = residual_data(np.zeros((g.dim, 2)), obs, obs_op)
        np.testing.assert_allclose(res, -obs.stacked_y())

    def test_partial_observation_uses_selected_coordinate(self, fixture):
        _, _, g, _, obs, _, obs_op, _ = fixture
        rng = np.random.default_rng(2)
        z = rng.standard_normal((g.dim, 2))
        res = residual_data(z, obs, obs_op)
        x_obs = obs_op.matrix @ z
        assert res[2] == pytest.approx(x_obs[1, 0] - obs.ys[1][0])


class TestResidualColloc:
    def test_zero_theta_leaves_weighted_derivative(self, fixture):
        _, grid, g, feats, _, evalops, _, _ = fixture
        rng = np.random.default_rng(3)
        z = rng.standard_normal((g.dim, 2))
        res = residual_colloc(z, np.zeros((2, 6)), grid, [e.matrix for e in evalops], feats)
        xp = evalops[1].matrix @ z
        expected = (np.sqrt(grid.w)[:, None] * xp).ravel()
        np.testing.assert_allclose(res, expected)

    def test_zero_weight_nodes_contribute_zero_rows(self, fixture):
        _, grid, g, feats, _, evalops, _, _ = fixture
        rng = np.random.default_rng(4)
        z = rng.standard_normal((g.dim, 2))
        theta = rng.standard_normal((2, 6))
        res = residual_colloc(z, theta, grid, [e.matrix for e in evalops], feats)
        zero_nodes = np.nonzero(grid.w == 0.0)[0]
        assert zero_nodes.size > 0
        for m in zero_nodes:
            np.testing.assert_array_equal(res[2 * m:2 * m + 2], [0.0, 0.0])

    def test_nonfinite_state_names_node(self, fixture):
        _, grid, g, feats, _, evalops, _, _ = fixture
        z = np.zeros((g.dim, 2))
        z[0, 0] = np.inf
        with pytest.raises(NumericInputError, match="node"):
            residual_colloc(z, np.zeros((2, 6)), grid, [e.matrix for e in evalops], feats)


class TestJacobian:
    def test_theta_block_is_exact_affine_map(self, fixture):
        table, grid, g, feats, obs, evalops, obs_op, weights = fixture
        prob = CollocationProblem(
            obs=obs, grid=grid, ops=[e.matrix for e in evalops],
            obs_op=obs_op.matrix, features=feats, weights=weights, gram=g,
        )
        support = np.ones((2, 6), dtype=bool)
        prob.set_support(support)
        rng = np.random.default_rng(5)
        z = rng.standard_normal((g.dim, 2))
        theta = rng.standard_normal((2, 6))
        eta = prob.pack(z, theta)
        jac = prob.jacobian(eta)
        delta = np.zeros_like(eta)
        delta[g.dim * 2:] = rng.standard_normal(12)
        lhs = prob.residual(eta + delta) - prob.residual(eta)
        np.testing.assert_allclose(lhs, jac @ delta, rtol=1e-9, atol=1e-9)

    def test_full_jacobian_matches_finite_differences(self, fixture):
        table, grid, g, feats, obs, evalops, obs_op, weights = fixture
        prob = CollocationProblem(
            obs=obs, grid=grid, ops=[e.matrix for e in evalops],
            obs_op=obs_op.matrix, features=feats, weights=weights, gram=g,
        )
        prob.set_support(np.ones((2, 6), dtype=bool))
        rng = np.random.default_rng(6)
        for _ in range(20):
            eta = 0.5 * rng.standard_normal(prob.n_params)
            jac = prob.jacobian(eta)
            ref = fd_jacobian(lambda e: prob.residual(e, check=False), eta, h=1e-6)
            err = np.linalg.norm(jac - ref) / np.linalg.norm(ref)
            assert err <= 1e-5

    def test_zero_theta_reduces_z_block_to_weighted_dp(self, fixture):
        table, grid, g, feats, obs, evalops, obs_op, weights = fixture
        support = np.ones((2, 6), dtype=bool)
        z = np.random.default_rng(8).standard_normal((g.dim, 2))
        jz, jt = jacobian_blocks(z, np.zeros((2, 6)), support, obs, obs_op,
                                 grid, evalops, feats, weights)
        m = grid.n_nodes
        n_data = obs.n_scalar
        wcol = np.sqrt(weights.beta) * np.sqrt(grid.w)
        dp = evalops[1].matrix
        block = jz[n_data::2, :g.dim]
        np.testing.assert_allclose(block, wcol[:, None] * dp, rtol=1e-12, atol=1e-12)


class TestObjective:
    def test_zero_point_value(self, fixture):
        table, grid, g, feats, obs, evalops, obs_op, weights = fixture
        z = np.zeros((g.dim, 2))
        theta = np.zeros((2, 6))
        val = objective_value(z, theta, weights, g, obs, obs_op, grid,
                              [e.matrix for e in evalops], feats)
        expected = 0.5 * weights.alpha * float(obs.stacked_y() @ obs.stacked_y())
        assert val == pytest.approx(expected, rel=1e-12)

    def test_doubling_beta_doubles_colloc_term_only(self, fixture):
        table, grid, g, feats, obs, evalops, obs_op, weights = fixture
        rng = np.random.default_rng(9)
        z = rng.standard_normal((g.dim, 2))
        theta = rng.standard_normal((2, 6))
        ops = [e.matrix for e in evalops]
        t1 = objective_terms(z, theta, weights, g, obs, obs_op, grid, ops, feats)
        w2 = Weights(alpha=weights.alpha, beta=2 * weights.beta, lam=weights.lam, mu=weights.mu)
        t2 = objective_terms(z, theta, w2, g, obs, obs_op, grid, ops, feats)
        assert t2["colloc"] == pytest.approx(2 * t1["colloc"], rel=1e-12)
        for key in ("data", "rkhs", "coeff"):
            assert t2[key] == pytest.approx(t1[key], rel=1e-12)
        assert all(v >= 0 for k, v in t1.items())

    def test_residual_evaluation_is_pure(self, fixture):
        table, grid, g, feats, obs, evalops, obs_op, weights = fixture
        prob = CollocationProblem(
            obs=obs, grid=grid, ops=[e.matrix for e in evalops],
            obs_op=obs_op.matrix, features=feats, weights=weights, gram=g,
        )
        prob.set_support(np.ones((2, 6), dtype=bool))
        eta = np.random.default_rng(10).standard_normal(prob.n_params)
        r1 = prob.residual(eta)
        r2 = prob.residual(eta)
        assert np.array_equal(r1, r2)

    def test_whitened_objective_matches_original(self, fixture):
        # Cholesky reparametrization leaves the objective invariant.
        table, grid, g, feats, obs, evalops, obs_op, weights = fixture
        orig = CollocationProblem.original_at_nodes(obs, grid, g, feats, weights)
        white = CollocationProblem.whitened_at_nodes(obs, grid, g, feats, weights)
        support = np.ones((2, 6), dtype=bool)
        orig.set_support(support)
        white.set_support(support)
        rng = np.random.default_rng(11)
        for _ in range(5):
            z = rng.standard_normal((g.dim, 2))
            theta = rng.standard_normal((2, 6))
            lo = orig.objective(orig.pack(z, theta))
            lw = white.objective(white.pack(whiten_coeffs(z, g), theta))
            assert lw == pytest.approx(lo, rel=1e-8)
