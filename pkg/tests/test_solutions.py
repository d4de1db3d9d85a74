import numpy as np
import pytest
from hypothesis import given, strategies as st

from rateopt import data, lp, rates
from rateopt import models as M
from rateopt import optimizers as O
from rateopt import solutions as S

from helpers import brute_force_lp


def make_trace(objective, constraints, family="lagrangian", lambdas=None, error=None, dim=2):
    objective = np.asarray(objective, dtype=float)
    T = objective.size
    G = np.asarray(constraints, dtype=float)
    G = G.reshape(T, -1) if T else G.reshape(0, G.shape[-1])
    if lambdas is None:
        lambdas = [np.full(G.shape[1] + (family == "proxy"), 1.0 / (G.shape[1] + 1)) for _ in range(T)]
    return O.IterateTrace(
        algorithm="stochastic_proxy_lagrangian" if family == "proxy" else "stochastic_lagrangian",
        family=family,
        iterations=list(range(T)),
        thetas=[np.full(dim, float(t)) for t in range(T)],
        lambdas=[np.asarray(l, dtype=float) for l in lambdas],
        exact_error=objective.copy() if error is None else np.asarray(error, dtype=float),
        exact_objective=objective,
        exact_constraints=G,
        constraint_names=[f"g{i}" for i in range(G.shape[1])],
        model=M.ModelSpec("linear", input_dim=dim - 1),
    )


class TestTStochastic:
    def test_uniform(self):
        clf = S.t_stochastic(make_trace([0.1, 0.2, 0.3, 0.4], [[0.0]] * 4))
        np.testing.assert_array_equal(clf.weights, [0.25] * 4)

    def test_proxy_weights(self):
        lams = [[0.0, 1.0], [0.5, 0.5], [0.5, 0.5], [1.0, 0.0]]
        trace = make_trace([0.1, 0.2, 0.3, 0.4], [[0.0]] * 4, family="proxy", lambdas=lams)
        np.testing.assert_allclose(S.t_stochastic_weights(trace), [0, 0.25, 0.25, 0.5])
        clf = S.t_stochastic(trace)
        assert clf.iterations == (1, 2, 3)
        np.testing.assert_allclose(clf.weights, [0.25, 0.25, 0.5])

    def test_degenerate_proxy(self):
        trace = make_trace([0.1, 0.2], [[0.0]] * 2, family="proxy", lambdas=[[0.0, 1.0]] * 2)
        with pytest.raises(S.DegenerateTraceError):
            S.t_stochastic(trace)

    def test_single_iterate(self):
        clf = S.t_stochastic(make_trace([0.3], [[0.1]]))
        assert len(clf) == 1 and clf.weights[0] == 1.0


class TestShrink:
    def test_hand_example(self):
        trace = make_trace([1.0, 0.5, 0.8], [[-0.1], [0.2], [-0.3]])
        clf = S.shrink(trace, epsilon=0.0)
        assert clf.iterations == (1, 2)
        np.testing.assert_allclose(clf.weights, [0.6, 0.4], atol=1e-12)
        assert clf.weights @ np.array([0.5, 0.8]) == pytest.approx(0.62)
        assert clf.info["active_constraints"] == 1

    def test_huge_epsilon_is_point_mass(self):
        clf = S.shrink(make_trace([1.0, 0.5, 0.8], [[-0.1], [0.2], [-0.3]]), epsilon=1e6)
        assert clf.iterations == (1,) and clf.weights[0] == 1.0

    def test_infeasible_epsilon_reports_floor(self):
        trace = make_trace([1.0, 0.5], [[0.2], [0.3]])
        with pytest.raises(lp.InfeasibleError, match="0.2"):
            S.shrink(trace, epsilon=0.0)

    def test_bad_objective(self):
        with pytest.raises(ValueError):
            S.shrink(make_trace([1.0], [[0.0]]), objective="logistic")

    def test_no_constraints(self):
        clf = S.shrink(make_trace([0.4, 0.2, 0.3], np.zeros((3, 0))))
        assert clf.iterations == (1,)

    def test_error_objective(self):
        trace = make_trace([0.5, 0.1], [[0.0], [0.0]], error=[0.1, 0.5])
        assert S.shrink(trace, objective="error").iterations == (0,)
        assert S.shrink(trace, objective="hinge").iterations == (1,)

    def test_matches_vertex_enumeration(self):
        rs = np.random.default_rng(4)
        for _ in range(60):
            T, m = int(rs.integers(2, 13)), int(rs.integers(1, 4))
            g0 = rs.uniform(0, 1, size=T)
            G = rs.uniform(-1, 1, size=(T, m))
            floor = lp.minimal_feasible_epsilon(G.T)
            eps = floor + rs.uniform(0, 0.3)
            clf = S.shrink(make_trace(g0, G), epsilon=eps)
            p = np.zeros(T)
            p[list(clf.iterations)] = clf.weights
            assert p @ g0 == pytest.approx(brute_force_lp(g0, G.T, eps), abs=1e-9)
            assert np.count_nonzero(p) <= m + 1
            assert np.count_nonzero(p) <= clf.info["active_constraints"] + 1
            assert np.all(G.T @ p <= eps + 1e-9)

    @given(st.integers(2, 30), st.integers(0, 4), st.integers(0, 2 ** 31))
    def test_auto_dominates_t_stochastic(self, T, m, seed):
        rs = np.random.default_rng(seed)
        trace = make_trace(rs.uniform(0, 1, size=T), rs.uniform(-1, 1, size=(T, m)))
        clf = S.shrink(trace)
        p = np.zeros(T)
        p[list(clf.iterations)] = clf.weights
        uniform = np.full(T, 1.0 / T)
        assert p @ trace.exact_objective <= uniform @ trace.exact_objective + 1e-9
        if m:
            assert np.max(trace.exact_constraints.T @ p) <= clf.info["epsilon"] + 1e-9
        assert len(clf) <= m + 1

    def test_proxy_auto_uses_lambda_weights(self):
        lams = [[1.0, 0.0], [0.0, 1.0]]
        # the violated second iterate carries no objective weight, so auto epsilon is the first one's value
        trace = make_trace([0.5, 0.1], [[-0.2], [0.4]], family="proxy", lambdas=lams)
        clf = S.shrink(trace)
        assert clf.info["epsilon"] == pytest.approx(-0.2)
        assert clf.iterations == (0,)


class TestSelection:
    def test_hand_example(self):
        lr, vr, worst = S.heuristic_ranks([0.30, 0.40, 0.35], [0.50, 0.10, 0.20])
        assert list(lr) == [1, 3, 2] and list(vr) == [3, 1, 2] and list(worst) == [3, 3, 2]
        trace = make_trace([0.30, 0.40, 0.35], [[0.50], [0.10], [0.20]])
        clf = S.best_iterate(trace)
        assert clf.iterations == (2,)

    def test_identical_iterates(self):
        assert S.best_iterate(make_trace([0.2] * 4, [[0.1]] * 4)).iterations == (0,)

    def test_single(self):
        trace = make_trace([0.2], [[0.1]])
        assert S.best_iterate(trace).iterations == S.last_iterate(trace).iterations == (0,)

    def test_tie_by_loss(self):
        # ranks (1,2) and (2,1): both max 2, lower loss wins
        assert S.heuristic_select([0.1, 0.2], [0.5, 0.4]) == 0

    def test_signed_violation(self):
        np.testing.assert_array_equal(S.max_violation([[-0.2, -0.3], [0.1, -0.5]]), [-0.2, 0.1])
        np.testing.assert_array_equal(S.max_violation(np.zeros((2, 0))), [0.0, 0.0])

    @given(st.permutations(list(range(6))), st.integers(0, 2 ** 31))
    def test_permutation_covariant(self, perm, seed):
        rs = np.random.default_rng(seed)
        losses, vios = rs.permutation(6) / 10.0, rs.permutation(6) / 10.0 - 0.2
        base = S.best_iterate(make_trace(losses, vios[:, None]))
        perm = np.array(perm)
        moved = S.best_iterate(make_trace(losses[perm], vios[perm][:, None]))
        # position j of the permuted trace holds original iterate perm[j]
        assert perm[moved.iterations[0]] == base.iterations[0]

    def test_last(self):
        clf = S.last_iterate(make_trace([0.3, 0.1, 0.2], [[0.0]] * 3))
        assert clf.iterations == (2,) and clf.weights.tolist() == [1.0]

    def test_dispatch(self):
        trace = make_trace([0.3, 0.1, 0.2], [[0.0], [0.1], [-0.1]])
        for kind in S.KINDS:
            assert S.solution(trace, kind).info["kind"] == kind
        with pytest.raises(ValueError):
            S.solution(trace, "median")

    def test_empty_trace(self):
        empty = make_trace(np.zeros(0), np.zeros((0, 1)))
        for kind in S.KINDS:
            with pytest.raises(S.DegenerateTraceError):
                S.solution(empty, kind)


class TestClassifier:
    def test_weights_validated(self):
        spec = M.ModelSpec("linear", input_dim=1)
        with pytest.raises(ValueError):
            S.StochasticClassifier((np.zeros(2), np.ones(2)), np.array([0.5, 0.6]), spec)
        with pytest.raises(ValueError):
            S.StochasticClassifier((), np.zeros(0), spec)

    def test_json_round_trip(self, tmp_path):
        trace = make_trace([1.0, 0.5, 0.8], [[-0.1], [0.2], [-0.3]])
        clf = S.shrink(trace, epsilon=0.0)
        back = S.StochasticClassifier.load(clf.save(tmp_path / "c.json"))
        assert back.spec == clf.spec and back.iterations == clf.iterations
        np.testing.assert_array_equal(back.weights, clf.weights)
        for a, b in zip(back.params, clf.params):
            np.testing.assert_array_equal(a, b)
        assert back.info == clf.info


class TestEvaluate:
    @pytest.fixture
    def setup(self):
        ds = data.synth_two_group(200, 2.0, 0.8, 3)
        spec = M.ModelSpec("linear", input_dim=ds.feature_dim)
        constraints = rates.build_goals([rates.GoalSpec("statistical_parity", slack=0.02)], ds)
        rs = np.random.default_rng(0)
        params = tuple(rs.normal(size=spec.num_params) for _ in range(3))
        return ds, spec, constraints, params

    def test_linearity(self, setup):
        ds, spec, constraints, params = setup
        w = np.array([0.2, 0.3, 0.5])
        mix = S.evaluate(S.StochasticClassifier(params, w, spec), ds, constraints)
        atoms = [S.evaluate(S.StochasticClassifier((p,), np.array([1.0]), spec), ds, constraints) for p in params]
        assert mix["error"] == pytest.approx(sum(wi * a["error"] for wi, a in zip(w, atoms)), abs=1e-15)
        assert mix["objective"] == pytest.approx(sum(wi * a["objective"] for wi, a in zip(w, atoms)), abs=1e-14)
        for name in mix["constraints"]:
            expected = sum(wi * a["constraints"][name] for wi, a in zip(w, atoms))
            assert mix["constraints"][name] == pytest.approx(expected, abs=1e-15)
        assert mix["max_violation"] == max(mix["constraints"].values())
        assert mix["support_size"] == 3

    def test_two_atom_average(self):
        labels = np.ones(5, dtype=int)
        ds = data.Dataset(np.array([[1.0], [-1.0], [1.0], [-0.2], [1.0]]), labels, (frozenset(),) * 5, ())
        spec = M.ModelSpec("linear", input_dim=1)
        a = np.array([1.0, 0.0])    # misses both negative features
        b = np.array([0.5, 0.25])   # misses only x = -1
        e_a = S.evaluate(S.StochasticClassifier((a,), np.array([1.0]), spec), ds, [])["error"]
        e_b = S.evaluate(S.StochasticClassifier((b,), np.array([1.0]), spec), ds, [])["error"]
        assert (e_a, e_b) == (pytest.approx(0.4), pytest.approx(0.2))
        mix = S.evaluate(S.StochasticClassifier((a, b), np.array([0.5, 0.5]), spec), ds, [])
        assert mix["error"] == pytest.approx(0.3)
        assert mix["max_violation"] == 0.0

    def test_dimension_mismatch(self, setup):
        ds, _, constraints, _ = setup
        spec = M.ModelSpec("linear", input_dim=7)
        with pytest.raises(ValueError):
            S.evaluate(S.StochasticClassifier((np.zeros(8),), np.array([1.0]), spec), ds, constraints)
