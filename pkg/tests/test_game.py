import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from rateopt import game


def random_left_stochastic(rng, n):
    M = rng.uniform(0.01, 1.0, size=(n, n))
    return M / M.sum(axis=0, keepdims=True)


def linear_solve_stationary(M):
    n = M.shape[0]
    A = np.vstack([M - np.eye(n), np.ones(n)])
    b = np.zeros(n + 1)
    b[-1] = 1.0
    return np.linalg.lstsq(A, b, rcond=None)[0]


finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


class TestPayoffs:
    def test_lagrangian_example(self):
        value, grad = game.lagrangian_value(1.0, [0.5, -0.2], [2.0, 1.0])
        assert value == pytest.approx(1.8)
        np.testing.assert_array_equal(grad, [0.5, -0.2])

    def test_lagrangian_zero_multipliers(self):
        assert game.lagrangian_value(0.7, [3.0, 4.0], [0.0, 0.0])[0] == pytest.approx(0.7)

    @given(arrays(float, 3, elements=st.floats(-5, 0)), arrays(float, 3, elements=st.floats(0, 5)))
    def test_satisfied_constraints_do_not_raise_value(self, g, lam):
        assert game.lagrangian_value(1.0, g, lam)[0] <= 1.0 + 1e-12

    def test_lagrangian_length_mismatch(self):
        with pytest.raises(ValueError):
            game.lagrangian_value(0.0, [1.0, 2.0], [1.0])

    def test_proxy_lagrangian_example(self):
        lt, ll = game.proxy_lagrangian_values(1.0, [0.2, -0.3], [0.4, -0.1], [0.5, 0.3, 0.2])
        assert lt == pytest.approx(0.6)
        assert ll == pytest.approx(0.0, abs=1e-15)

    def test_proxy_lagrangian_objective_vertex(self):
        lt, ll = game.proxy_lagrangian_values(2.5, [0.2, 0.9], [0.4, 0.8], [1.0, 0.0, 0.0])
        assert (lt, ll) == (2.5, 0.0)

    def test_proxy_lagrangian_shapes(self):
        with pytest.raises(ValueError):
            game.proxy_lagrangian_values(1.0, [0.2], [0.4], [0.5, 0.3, 0.2])

    def test_proxy_lambda_gradient(self):
        np.testing.assert_array_equal(game.proxy_lambda_gradient([0.2, -0.3]), [0.0, 0.2, -0.3])


class TestProjections:
    def test_l1_interior(self):
        np.testing.assert_array_equal(game.project_l1_ball_nonneg([0.2, 0.1], 1.0), [0.2, 0.1])

    def test_l1_axis(self):
        np.testing.assert_allclose(game.project_l1_ball_nonneg([2.0, 0.0], 1.0), [1.0, 0.0])

    def test_l1_diagonal_matches_grid_search(self):
        v = np.array([1.0, 1.0])
        grid = np.linspace(0, 1, 401)
        best, best_d = None, np.inf
        for a in grid:
            for b in grid[grid <= 1.0 - a + 1e-12]:
                d = (a - v[0]) ** 2 + (b - v[1]) ** 2
                if d < best_d:
                    best, best_d = (a, b), d
        out = game.project_l1_ball_nonneg(v, 1.0)
        np.testing.assert_allclose(out, [0.5, 0.5])
        np.testing.assert_allclose(out, best, atol=1e-9)

    def test_l1_negative_entries_clipped(self):
        np.testing.assert_array_equal(game.project_l1_ball_nonneg([-1.0, 0.3], 1.0), [0.0, 0.3])

    def test_l1_bad_radius(self):
        with pytest.raises(ValueError):
            game.project_l1_ball_nonneg([1.0], 0.0)

    def test_euclidean_examples(self):
        np.testing.assert_allclose(game.project_euclidean_ball([3.0, 4.0], 1.0), [0.6, 0.8])
        np.testing.assert_array_equal(game.project_euclidean_ball([0.0, 0.0], 1.0), [0.0, 0.0])
        half = np.array([0.3, 0.4])
        np.testing.assert_array_equal(game.project_euclidean_ball(half, 1.0), half)

    def test_euclidean_bad_radius(self):
        with pytest.raises(ValueError):
            game.project_euclidean_ball([1.0], -1.0)

    @given(arrays(float, 5, elements=finite), st.floats(0.1, 20))
    def test_l1_feasible_and_idempotent(self, v, R):
        p = game.project_l1_ball_nonneg(v, R)
        assert np.all(p >= 0)
        assert p.sum() <= R * (1 + 1e-12)
        np.testing.assert_array_equal(game.project_l1_ball_nonneg(p, R), p)

    @given(arrays(float, 4, elements=finite), st.floats(0.1, 20))
    def test_euclidean_idempotent(self, v, B):
        p = game.project_euclidean_ball(v, B)
        assert np.linalg.norm(p) <= B * (1 + 1e-12)
        np.testing.assert_allclose(game.project_euclidean_ball(p, B), p, rtol=1e-15)

    def test_non_expansive_on_random_pairs(self, rng):
        for _ in range(1000):
            u, v = rng.normal(0, 3, size=(2, 6))
            R = rng.uniform(0.1, 5)
            for proj in (game.project_l1_ball_nonneg, game.project_euclidean_ball):
                d = np.linalg.norm(proj(u, R) - proj(v, R))
                assert d <= np.linalg.norm(u - v) + 1e-12

    @given(arrays(float, 4, elements=finite), st.floats(0.5, 5))
    def test_l1_projection_beats_random_feasible_points(self, v, R):
        p = game.project_l1_ball_nonneg(v, R)
        rs = np.random.default_rng(0)
        cands = rs.dirichlet(np.ones(5), size=200)[:, :4] * R
        assert np.all(np.linalg.norm(cands - v, axis=1) >= np.linalg.norm(p - v) - 1e-9)


class TestStationary:
    def test_uniform(self):
        np.testing.assert_allclose(game.stationary_distribution(game.uniform_swap_matrix(5)), np.full(5, 0.2))

    def test_two_by_two(self):
        M = np.array([[0.9, 0.2], [0.1, 0.8]])
        np.testing.assert_allclose(game.stationary_distribution(M), [2 / 3, 1 / 3], atol=1e-9)

    def test_matches_linear_solve(self, rng):
        for _ in range(100):
            n = int(rng.integers(2, 17))
            M = random_left_stochastic(rng, n)
            lam = game.stationary_distribution(M)
            assert np.abs(M @ lam - lam).max() <= 1e-8
            assert lam.sum() == pytest.approx(1.0, abs=1e-12)
            np.testing.assert_allclose(lam, linear_solve_stationary(M), atol=1e-6)

    def test_warm_start_same_fixed_point(self, rng):
        M = random_left_stochastic(rng, 6)
        cold = game.stationary_distribution(M)
        warm = game.stationary_distribution(M, start=rng.dirichlet(np.ones(6)))
        np.testing.assert_allclose(cold, warm, atol=1e-8)

    def test_non_convergence_raises(self):
        # a permutation matrix violates positivity and never converges
        P = np.array([[0.0, 1.0], [1.0, 0.0]])
        with pytest.raises(game.StationaryDistributionError):
            game.stationary_distribution(P, start=[1.0, 0.0], cap=1000)

    def test_non_square(self):
        with pytest.raises(ValueError):
            game.stationary_distribution(np.ones((2, 3)) / 2)


class TestSwapUpdate:
    def test_hand_example(self):
        out = game.swap_update(game.uniform_swap_matrix(2), [1.0, 0.0], [0.5, 0.5], math.log(4))
        np.testing.assert_allclose(out, [[2 / 3, 2 / 3], [1 / 3, 1 / 3]])

    def test_zero_step_and_zero_gradient(self, rng):
        M = random_left_stochastic(rng, 4)
        lam = rng.dirichlet(np.ones(4))
        np.testing.assert_allclose(game.swap_update(M, rng.normal(size=4), lam, 0.0), M, rtol=1e-15)
        np.testing.assert_allclose(game.swap_update(M, np.zeros(4), lam, 0.7), M, rtol=1e-15)

    @given(arrays(float, 4, elements=st.floats(-1e3, 1e3)), st.floats(0, 0.5),
           st.integers(0, 2 ** 31))
    def test_preserves_invariants(self, delta, eta, seed):
        rs = np.random.default_rng(seed)
        M = random_left_stochastic(rs, 4)
        lam = rs.dirichlet(np.ones(4))
        out = game.swap_update(M, delta, lam, eta)
        assert np.all(out > 0)
        np.testing.assert_allclose(out.sum(axis=0), 1.0, atol=1e-12)

    def test_overflow_raises(self):
        with pytest.raises(FloatingPointError):
            game.swap_update(game.uniform_swap_matrix(2), [1e6, -1e6], [0.5, 0.5], 10.0)

    def test_clamp(self):
        d, hit = game.clamp_delta([5.0, -0.5], cap=1.0)
        np.testing.assert_array_equal(d, [1.0, -0.5])
        assert hit
        d, hit = game.clamp_delta([0.5], cap=1.0)
        assert not hit

    def test_player_counts_clamp_events(self):
        player = game.SwapPlayer(3, eta=0.01, delta_cap=1.0)
        player.play()
        player.update([0.0, 5.0, 0.1])
        player.play()
        player.update([0.0, 0.5, 0.1])
        assert player.clamp_events == 1


class TestExternalUpdate:
    def test_clip_at_radius(self):
        R = 3.0
        np.testing.assert_allclose(game.external_regret_update_lambda([0.9 * R], [R], 1.0, R), [R])

    def test_zero_delta_keeps_feasible_point(self):
        np.testing.assert_array_equal(game.external_regret_update_lambda([0.2, 0.3], [0.0, 0.0], 0.5, 1.0), [0.2, 0.3])

    @given(st.floats(0.01, 10))
    def test_negative_gradient_stays_at_zero(self, eta):
        out = game.external_regret_update_lambda([0.0, 0.0], [-1.0, -0.1], eta, 1.0)
        np.testing.assert_array_equal(out, [0.0, 0.0])


class TestStepSizes:
    def test_swap_formulas(self):
        k, T, B = 5, 2000, 2.0
        assert game.swap_step_size(k, T, B) == pytest.approx(math.sqrt(k * math.log(k) / (T * B * B)))
        assert game.swap_regret_bound(k, T, B) == pytest.approx(2 * B * math.sqrt(k * math.log(k) / T))
        assert game.swap_step_size(1, T, B) == 0.0

    def test_external_formulas(self):
        assert game.external_step_size(2.0, 50, 4.0) == pytest.approx(2.0 / (4.0 * 10.0))
        assert game.external_regret_bound(2.0, 50, 4.0) == pytest.approx(8.0 * math.sqrt(2 / 50))


class TestRegret:
    def test_swap_regret_hand_example(self):
        # play coordinate 0 always while coordinate 1 would have earned 1 per round
        lams = np.array([[1.0, 0.0]] * 3)
        gains = np.array([[0.0, 1.0]] * 3)
        assert game.swap_regret(lams, gains) == pytest.approx(1.0)

    def test_swap_regret_dominates_external(self, rng):
        lams = rng.dirichlet(np.ones(4), size=30)
        gains = rng.uniform(-1, 1, size=(30, 4))
        external = (gains.sum(axis=0).max() - np.sum(lams * gains)) / 30
        assert game.swap_regret(lams, gains) >= external - 1e-12

    def test_swap_player_bound_small(self):
        m, T = 2, 400
        for seed in range(5):
            rs = np.random.default_rng(seed)
            gains = rs.uniform(-1, 1, size=(T, m + 1))
            gains[:, 0] = 0.0
            player = game.SwapPlayer(m + 1, game.swap_step_size(m + 1, T, 1.0))
            lams = []
            for t in range(T):
                lams.append(player.play())
                player.update(gains[t])
            assert game.swap_regret(np.array(lams), gains) <= game.swap_regret_bound(m + 1, T, 1.0)

    def test_external_bound_small(self):
        m, T, R = 3, 400, 2.0
        B = math.sqrt(m)
        for seed in range(5):
            gains = np.random.default_rng(seed).uniform(-1, 1, size=(T, m))
            lam, played = np.zeros(m), []
            eta = game.external_step_size(R, T, B)
            for t in range(T):
                played.append(lam)
                lam = game.external_regret_update_lambda(lam, gains[t], eta, R)
            assert game.external_regret_l1(np.array(played), gains, R) <= game.external_regret_bound(R, T, B)
