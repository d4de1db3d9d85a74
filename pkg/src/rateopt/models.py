"""Scoring models with analytic gradients, and the hinge training objective.

Parameters are flat float arrays; :class:`ModelSpec` describes the layout.

* ``linear``: ``[w (d), b]``, score ``w @ x + b``.
* ``mlp1``: ``[W1 (h*d, row-major), b1 (h), w2 (h), b2]``, score
  ``w2 @ relu(W1 @ x + b1) + b2``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .data import Dataset


class StaleScoresError(RuntimeError):
    """Cached scores were computed with different parameters."""


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "linear"
    input_dim: int = 1
    hidden_units: int = 0
    param_bound: float = 10.0
    init_seed: int = 0

    def __post_init__(self):
        if self.kind not in ("linear", "mlp1"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if self.kind == "mlp1" and self.hidden_units < 1:
            raise ValueError("mlp1 needs hidden_units >= 1")
        if not self.param_bound > 0:
            raise ValueError("param_bound must be positive")

    @property
    def num_params(self) -> int:
        d, h = self.input_dim, self.hidden_units
        return d + 1 if self.kind == "linear" else h * d + 2 * h + 1

    def layout(self) -> dict:
        if self.kind == "linear":
            return {"w": [self.input_dim], "b": [1]}
        h, d = self.hidden_units, self.input_dim
        return {"W1": [h, d], "b1": [h], "w2": [h], "b2": [1]}

    def unpack(self, params):
        params = np.asarray(params, dtype=float)
        if params.shape != (self.num_params,):
            raise ValueError(f"expected {self.num_params} parameters, got shape {params.shape}")
        d, h = self.input_dim, self.hidden_units
        if self.kind == "linear":
            return params[:d], params[d]
        W1 = params[: h * d].reshape(h, d)
        b1 = params[h * d: h * d + h]
        w2 = params[h * d + h: h * d + 2 * h]
        return W1, b1, w2, params[-1]

    def to_json(self) -> dict:
        return {"kind": self.kind, "input_dim": self.input_dim, "hidden_units": self.hidden_units,
                "param_bound": self.param_bound, "init_seed": self.init_seed}

    @classmethod
    def from_json(cls, obj) -> "ModelSpec":
        return cls(**obj)


@dataclass(frozen=True)
class ObjectiveSpec:
    loss: str = "hinge"
    l2_coefficient: float = 0.0

    def __post_init__(self):
        if self.loss != "hinge":
            raise ValueError("only the hinge loss is supported")
        if self.l2_coefficient < 0:
            raise ValueError("l2_coefficient must be nonnegative")


def init(spec: ModelSpec) -> np.ndarray:
    """Zero scorer: all-zero linear weights; random hidden layer, zero output layer."""
    params = np.zeros(spec.num_params)
    if spec.kind == "mlp1":
        h, d = spec.hidden_units, spec.input_dim
        rng = np.random.default_rng(spec.init_seed)
        bound = 1.0 / np.sqrt(d)
        params[: h * d] = rng.uniform(-bound, bound, size=h * d)
        params[h * d: h * d + h] = rng.uniform(-bound, bound, size=h)
    return params


def fingerprint(params) -> str:
    return hashlib.sha1(np.ascontiguousarray(params, dtype=float).tobytes()).hexdigest()


def _inputs(dataset: Dataset, indices, spec: ModelSpec):
    x = dataset.features if indices is None else dataset.features[_as_indices(indices)]
    if x.shape[1] != spec.input_dim:
        raise ValueError(f"model expects {spec.input_dim} features, dataset has {x.shape[1]}")
    return x


def _as_indices(indices):
    return getattr(indices, "indices", indices)


@dataclass(frozen=True, eq=False)
class Scores:
    """Scores of a batch plus what the Jacobian needs, tagged with the params fingerprint."""

    values: np.ndarray
    fingerprint: str
    inputs: np.ndarray
    hidden_pre: np.ndarray | None = None

    def __len__(self):
        return self.values.size


def forward(params, spec: ModelSpec, dataset: Dataset, indices=None) -> Scores:
    x = _inputs(dataset, indices, spec)
    if spec.kind == "linear":
        w, b = spec.unpack(params)
        return Scores(x @ w + b, fingerprint(params), x)
    W1, b1, w2, b2 = spec.unpack(params)
    pre = x @ W1.T + b1
    return Scores(np.maximum(pre, 0.0) @ w2 + b2, fingerprint(params), x, pre)


def score_batch(params, spec: ModelSpec, dataset: Dataset, indices=None) -> np.ndarray:
    return forward(params, spec, dataset, indices).values


def jacobian_vector(params, spec: ModelSpec, cache: Scores, v) -> np.ndarray:
    """``J.T @ v`` where ``J[i]`` is the gradient of score ``i`` w.r.t. the params."""
    if cache.fingerprint != fingerprint(params):
        raise StaleScoresError("score cache does not match the parameters")
    v = np.asarray(v, dtype=float)
    x = cache.inputs
    if spec.kind == "linear":
        return np.concatenate([x.T @ v, [v.sum()]])
    _, _, w2, _ = spec.unpack(params)
    pre = cache.hidden_pre
    active = (pre > 0.0).astype(float)
    back = (v[:, None] * active) * w2  # (n, h)
    gW1 = back.T @ x
    gb1 = back.sum(axis=0)
    gw2 = np.maximum(pre, 0.0).T @ v
    return np.concatenate([gW1.ravel(), gb1, gw2, [v.sum()]])


def hinge_terms(scores, labels):
    margins = 1.0 - labels * scores
    return np.maximum(0.0, margins), np.where(margins > 0.0, -labels.astype(float), 0.0)


def objective_value_grad(params, spec: ModelSpec, objective: ObjectiveSpec, dataset: Dataset, minibatch=None):
    """Weighted mean hinge loss on the minibatch plus ``l2 * ||params||^2``.

    ``minibatch`` is a slice or index array; ``None`` means the full dataset.
    """
    idx = None if minibatch is None else np.asarray(_as_indices(minibatch))
    if idx is not None and idx.size == 0:
        raise ValueError("empty minibatch")
    cache = forward(params, spec, dataset, idx)
    labels = dataset.labels if idx is None else dataset.labels[idx]
    weights = dataset.weights if idx is None else dataset.weights[idx]
    total = weights.sum()
    if not total > 0:
        raise ValueError("minibatch has zero total weight")
    loss, dloss = hinge_terms(cache.values, labels)
    params = np.asarray(params, dtype=float)
    value = float(weights @ loss / total + objective.l2_coefficient * params @ params)
    grad = jacobian_vector(params, spec, cache, weights * dloss / total) + 2.0 * objective.l2_coefficient * params
    return value, grad


def zero_one_error(scores, labels, weights=None) -> float:
    wrong = np.where(scores >= 0.0, 1, -1) != labels
    if weights is None:
        return float(np.mean(wrong))
    return float(weights @ wrong / weights.sum())


def constraint_grad(params, spec: ModelSpec, constraint, dataset: Dataset, scores: Scores, sample=None) -> np.ndarray:
    """Gradient of the constraint's proxy w.r.t. the params, via the chain rule.

    ``scores`` must come from :func:`forward` with these params (the
    fingerprint is checked) on the full dataset, or on ``sample``.
    """
    if scores.fingerprint != fingerprint(params):
        raise StaleScoresError("score cache does not match the parameters")
    _, dscores = constraint.proxy_value_grad(scores.values, sample=sample)
    return jacobian_vector(params, spec, scores, dscores)


def params_to_json(params, spec: ModelSpec) -> dict:
    return {"layout": spec.layout(), "values": [float(v) for v in np.asarray(params)]}


def params_from_json(obj, spec: ModelSpec) -> np.ndarray:
    values = np.array(obj["values"], dtype=float)
    if values.shape != (spec.num_params,):
        raise ValueError("parameter vector does not match the model layout")
    return values
