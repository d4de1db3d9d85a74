"""Turn an iterate trace into deployable (possibly stochastic) classifiers."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from . import lp
from . import models as M
from .data import Dataset
from .optimizers import IterateTrace

KINDS = ("m_stochastic", "t_stochastic", "best_iterate", "last_iterate")


class DegenerateTraceError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class StochasticClassifier:
    """A finite distribution over parameter vectors of one model."""

    params: tuple
    weights: np.ndarray
    spec: M.ModelSpec | None
    iterations: tuple = ()
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if not len(self.params) or w.shape != (len(self.params),):
            raise ValueError("support must be nonempty and aligned with the weights")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be a probability vector")
        object.__setattr__(self, "params", tuple(np.array(p, dtype=float) for p in self.params))
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "iterations", tuple(int(i) for i in self.iterations))

    @property
    def support(self):
        return list(zip(self.params, self.weights))

    def __len__(self):
        return len(self.params)

    def to_json(self) -> dict:
        return {
            "spec": None if self.spec is None else self.spec.to_json(),
            "support": [{"iterate": int(i) if self.iterations else None, "weight": float(w),
                         "params": [float(v) for v in p]}
                        for i, p, w in zip(self.iterations or [None] * len(self), self.params, self.weights)],
            "info": self.info,
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), indent=1, sort_keys=True))
        return path

    @classmethod
    def from_json(cls, obj) -> "StochasticClassifier":
        spec = None if obj["spec"] is None else M.ModelSpec.from_json(obj["spec"])
        support = obj["support"]
        its = [s["iterate"] for s in support]
        return cls(
            params=tuple(np.array(s["params"], dtype=float) for s in support),
            weights=_normalized(np.array([s["weight"] for s in support], dtype=float)),
            spec=spec,
            iterations=tuple(its) if None not in its else (),
            info=obj.get("info", {}),
        )

    @classmethod
    def load(cls, path) -> "StochasticClassifier":
        return cls.from_json(json.loads(Path(path).read_text()))


def _normalized(w):
    w = np.where(w > 0, w, 0.0)
    w = w / w.sum()
    # push residual rounding onto the largest atom
    w[np.argmax(w)] += 1.0 - w.sum()
    return w


def _from_weights(trace: IterateTrace, weights, info=None) -> StochasticClassifier:
    keep = np.flatnonzero(weights > 0)
    return StochasticClassifier(
        params=tuple(trace.thetas[i] for i in keep),
        weights=_normalized(np.asarray(weights, dtype=float)[keep]),
        spec=trace.model,
        iterations=tuple(trace.iterations[i] for i in keep),
        info=info or {},
    )


def t_stochastic_weights(trace: IterateTrace) -> np.ndarray:
    """Uniform for the Lagrangian family; proportional to the objective weight for the proxy family."""
    if not len(trace):
        raise DegenerateTraceError("empty trace")
    if trace.family == "lagrangian":
        return np.full(len(trace), 1.0 / len(trace))
    lam1 = np.array([lam[0] for lam in trace.lambdas], dtype=float)
    total = lam1.sum()
    if not total > 0:
        raise DegenerateTraceError("objective weight is zero on every iterate")
    return lam1 / total


def t_stochastic(trace: IterateTrace) -> StochasticClassifier:
    return _from_weights(trace, t_stochastic_weights(trace), {"kind": "t_stochastic"})


def _shrink_objective(trace: IterateTrace, objective: str):
    if objective == "hinge":
        return trace.exact_objective
    if objective == "error":
        return trace.exact_error
    raise ValueError("objective must be 'hinge' or 'error'")


def shrink(trace: IterateTrace, epsilon="auto", objective="hinge") -> StochasticClassifier:
    """Best distribution over the recorded iterates, supported on at most m+1 of them.

    Solves ``min <p, g0> s.t. <p, g_i> <= epsilon`` over the simplex. With
    ``epsilon="auto"`` the bound is the largest constraint value of the
    T-stochastic mixture, which keeps that mixture feasible.
    """
    if not len(trace):
        raise DegenerateTraceError("empty trace")
    g0 = _shrink_objective(trace, objective)
    G = trace.exact_constraints.T
    if epsilon == "auto":
        eps = float(np.max(G @ t_stochastic_weights(trace))) if G.shape[0] else 0.0
    else:
        eps = float(epsilon)
        if G.shape[0]:
            floor = lp.minimal_feasible_epsilon(G)
            if eps < floor - lp.TOL:
                raise lp.InfeasibleError(f"epsilon {eps:g} is infeasible; the smallest feasible epsilon is {floor:.6g}")
            eps = max(eps, floor)
    p = lp.solve_simplex_mixture(g0, G, eps)
    active = int(np.sum(np.abs(G @ p - eps) <= 1e-7)) if G.shape[0] else 0
    return _from_weights(trace, p, {"kind": "m_stochastic", "epsilon": eps, "active_constraints": active})


def heuristic_ranks(losses, violations):
    """1-based 'min' ranks of both criteria and their maximum."""
    lr = rankdata(np.asarray(losses, dtype=float), method="min").astype(int)
    vr = rankdata(np.asarray(violations, dtype=float), method="min").astype(int)
    return lr, vr, np.maximum(lr, vr)


def heuristic_select(losses, violations) -> int:
    """Index minimizing ``max(loss rank, violation rank)``; ties by loss, then position."""
    losses = np.asarray(losses, dtype=float)
    if losses.size == 0:
        raise ValueError("nothing to select from")
    _, _, worst = heuristic_ranks(losses, violations)
    order = sorted(range(losses.size), key=lambda i: (worst[i], losses[i], i))
    return order[0]


def max_violation(constraint_matrix) -> np.ndarray:
    """Largest constraint value per row (negative when all are satisfied); 0 without constraints."""
    G = np.asarray(constraint_matrix, dtype=float)
    if G.ndim == 1:
        G = G[None, :]
    if G.shape[1] == 0:
        return np.zeros(G.shape[0])
    return G.max(axis=1)


def _atom(trace: IterateTrace, i: int, kind: str) -> StochasticClassifier:
    w = np.zeros(len(trace))
    w[i] = 1.0
    return _from_weights(trace, w, {"kind": kind})


def best_iterate(trace: IterateTrace) -> StochasticClassifier:
    if not len(trace):
        raise DegenerateTraceError("empty trace")
    return _atom(trace, heuristic_select(trace.exact_error, max_violation(trace.exact_constraints)), "best_iterate")


def last_iterate(trace: IterateTrace) -> StochasticClassifier:
    if not len(trace):
        raise DegenerateTraceError("empty trace")
    return _atom(trace, len(trace) - 1, "last_iterate")


def solution(trace: IterateTrace, kind: str, epsilon="auto") -> StochasticClassifier:
    if kind == "m_stochastic":
        return shrink(trace, epsilon)
    if kind == "t_stochastic":
        return t_stochastic(trace)
    if kind == "best_iterate":
        return best_iterate(trace)
    if kind == "last_iterate":
        return last_iterate(trace)
    raise ValueError(f"unknown solution kind {kind!r}")


def evaluate(classifier: StochasticClassifier, dataset: Dataset, constraints, objective: M.ObjectiveSpec | None = None) -> dict:
    """Expected 0-1 error, hinge objective and exact constraint values of the mixture."""
    spec = classifier.spec
    if spec is None:
        raise ValueError("classifier has no model spec")
    if spec.input_dim != dataset.feature_dim:
        raise ValueError(f"model expects {spec.input_dim} features, dataset has {dataset.feature_dim}")
    objective = objective or M.ObjectiveSpec()
    errors, objectives, values = [], [], []
    for theta in classifier.params:
        scores = M.score_batch(theta, spec, dataset)
        errors.append(M.zero_one_error(scores, dataset.labels))
        objectives.append(M.objective_value_grad(theta, spec, objective, dataset)[0])
        values.append([c.exact_value(scores) for c in constraints])
    w = classifier.weights
    G = np.array(values, dtype=float).reshape(len(w), len(constraints))
    expected = w @ G
    return {
        "error": float(w @ np.array(errors)),
        "objective": float(w @ np.array(objectives)),
        "constraints": {c.name: float(v) for c, v in zip(constraints, expected)},
        "max_violation": float(expected.max()) if expected.size else 0.0,
        "support_size": len(w),
    }
