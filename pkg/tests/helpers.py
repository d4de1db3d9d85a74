"""Shared numerical oracles for the test-suite."""

import itertools
import math

import numpy as np

from rateopt import rates
from rateopt.optimizers import FunctionProblem
from rateopt.rates import GoalSpec

FD_STEP = 1e-5
FD_RTOL = 1e-4

CATALOG = [
    GoalSpec("coverage", bound=0.5),
    GoalSpec("min_coverage", bound=0.4),
    GoalSpec("statistical_parity", slack=0.02),
    GoalSpec("statistical_parity", slack=0.9, slack_form="multiplicative", aux={"pairwise": True}),
    GoalSpec("no_lost_benefits", slack=0.05),
    GoalSpec("accurate_coverage", slack=0.05),
    GoalSpec("equal_opportunity", slack=0.95, slack_form="multiplicative"),
    GoalSpec("equal_opportunity", slack=0.02, aux={"two_sided": True}),
    GoalSpec("equal_odds", slack=0.05),
    GoalSpec("equal_accuracy", slack=0.05),
    GoalSpec("min_accuracy", bound=0.6),
    GoalSpec("not_worse_off", slack=0.01),
    GoalSpec("min_recall", bound=0.7),
    GoalSpec("precision_lb", bound=0.6),
    GoalSpec("accuracy_lb", bound=0.7),
    GoalSpec("churn_ub", bound=0.2),
    GoalSpec("loss_only_churn_ub", bound=0.1),
    GoalSpec("wlr_lb", bound=1.0),
    GoalSpec("auc_lb", bound=0.7, aux={"L": 4, "J": 5}),
    GoalSpec("steering_min_accuracy", groups=("A",), bound=0.6),
    GoalSpec("coverage", bound=0.5, aux={"surrogate": "sigmoid", "margin": 0.5}),
    GoalSpec("equal_odds", slack=0.05, aux={"surrogate": "sigmoid", "margin": 1.0}),
    GoalSpec("wlr_lb", bound=1.0, aux={"surrogate": "sigmoid", "margin": 2.0}),
    GoalSpec("auc_lb", bound=0.7, aux={"L": 3, "J": 4, "surrogate": "sigmoid", "margin": 1.0}),
]


def catalog_id(spec):
    extra = ",".join(f"{k}={v}" for k, v in sorted(spec.aux.items()))
    return f"{spec.kind}[{spec.slack_form}{',' + extra if extra else ''}]"


def central_difference(f, x, h=FD_STEP):
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def relative_error(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale < 1e-10:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def kinks(constraint):
    """Score offsets where the constraint's surrogate is not differentiable."""
    policy = constraint.proxy_policy
    if policy.kind != "hinge":
        return np.zeros(0), np.zeros(0)
    m = policy.parameter
    if isinstance(constraint, rates.AucConstraint):
        return None, np.array([-m, m])
    thresholds = np.array(list(constraint.exact.compiled[0].keys()))
    return thresholds, np.array([-m, m])


def is_kink_free(constraint, scores, gap=1e-3):
    """Whether central differences of the proxy at ``scores`` stay on one linear piece."""
    taus, offsets = kinks(constraint)
    if isinstance(constraint, rates.AucConstraint):
        base = constraint._frozen(scores)
        for i in range(scores.size):
            for sgn in (-1, 1):
                s = scores.copy()
                s[i] += sgn * 2 * FD_STEP
                other = constraint._frozen(s)
                if not np.array_equal(base[4], other[4]):
                    return False
        if offsets.size:
            _, _, _, taus_now, chosen, _ = base
            z = scores[constraint.positives.indices][:, None] - taus_now[chosen][None, :]
            if np.any(np.abs(z[..., None] - offsets) < gap):
                return False
        # keep min/max examples unique so the thresholds move smoothly
        s = np.sort(scores)
        return bool(s.size < 2 or (s[1] - s[0] > gap and s[-1] - s[-2] > gap))
    if offsets.size == 0:
        return True
    z = scores[:, None] - taus[None, :]
    return not np.any(np.abs(z[..., None] - offsets) < gap)


def brute_force_lp(g0, G, eps):
    """Minimum of <p, g0> over vertices of {p in simplex, G p <= eps}, by enumerating bases.

    A vertex has some support S and |S| - 1 tight constraints; each pair
    (support, tight set) is solved as a square linear system.
    """
    m, T = G.shape
    best = np.inf
    for size in range(1, min(T, m + 1) + 1):
        for support in itertools.combinations(range(T), size):
            cols = list(support)
            for active in itertools.combinations(range(m), size - 1):
                A = np.vstack([G[list(active)][:, cols], np.ones(size)])
                b = np.concatenate([np.full(size - 1, eps), [1.0]])
                try:
                    q = np.linalg.solve(A, b)
                except np.linalg.LinAlgError:
                    continue
                if not np.allclose(A @ q, b, atol=1e-10) or np.any(q < -1e-12):
                    continue
                p = np.zeros(T)
                p[cols] = q
                if np.all(G @ p <= eps + 1e-9):
                    best = min(best, float(g0 @ p))
    return best


class ConvexFixture:
    """Mean hinge loss on 2-D points in the unit disc, no bias, subject to
    ``theta_1 + theta_2 <= cap`` on a Euclidean ball of radius ``bound``.

    The class also carries valid a-priori gradient bounds for the step
    sizes and a fine-grid oracle for the constrained optimum.
    """

    def __init__(self, n=200, cap=0.5, bound=2.0, radius=1.0, seed=7):
        rs = np.random.default_rng(seed)
        angle = rs.uniform(0, 2 * np.pi, n)
        r = np.sqrt(rs.uniform(0, 1, n))
        self.x = np.column_stack([r * np.cos(angle), r * np.sin(angle)])
        self.y = np.where(self.x @ np.array([1.0, 1.0]) + 0.3 * rs.standard_normal(n) >= 0, 1.0, -1.0)
        self.cap, self.bound, self.radius, self.n = cap, bound, radius, n
        # ||x|| <= 1 bounds the hinge subgradient; the constraint gradient is (1, 1)
        self.grad_bound = 1.0 + radius * math.sqrt(2.0)
        self.proxy_grad_bound = math.sqrt(2.0)
        self.delta_bound = math.sqrt(2.0) * bound + cap

    def hinge(self, theta, batch=None):
        x, y = (self.x, self.y) if batch is None else (self.x[batch], self.y[batch])
        margin = 1.0 - y * (x @ theta)
        active = margin > 0
        value = float(np.mean(np.where(active, margin, 0.0)))
        grad = -(y * active) @ x / len(y)
        return value, grad

    def constraint(self, theta):
        return np.array([theta[0] + theta[1] - self.cap]), np.array([[1.0, 1.0]])

    def problem(self):
        return FunctionProblem(self.hinge, self.constraint, dim=2, param_bound=self.bound, n=self.n)

    def grid_optimum(self, points=801):
        axis = np.linspace(-self.bound, self.bound, points)
        t1, t2 = np.meshgrid(axis, axis, indexing="ij")
        thetas = np.column_stack([t1.ravel(), t2.ravel()])
        keep = (np.linalg.norm(thetas, axis=1) <= self.bound) & (thetas.sum(axis=1) <= self.cap)
        thetas = thetas[keep]
        best = np.inf
        for chunk in np.array_split(thetas, 64):
            margins = 1.0 - (chunk @ self.x.T) * self.y
            best = min(best, float(np.maximum(margins, 0.0).mean(axis=1).min()))
        return best

    def lagrangian_epsilon(self, T, delta=0.05):
        return 2 * (self.bound * self.grad_bound + self.radius * self.delta_bound) * math.sqrt(
            (1 + 16 * math.log(2 / delta)) / T)

    def proxy_lambda_epsilon(self, T, m=1, delta=0.05):
        k = m + 1
        return 2 * self.delta_bound * math.sqrt(2 * k * math.log(k) * (1 + 16 * math.log(2 / delta)) / T)
