"""Training loops for the Lagrangian and proxy-Lagrangian games.

Five algorithms share one problem interface (see :class:`RateProblem` and
:class:`FunctionProblem`) and all emit an :class:`IterateTrace` whose
recorded constraint values are exact (indicator-based), never surrogates.

=============================  ===========  ==============  ===============
algorithm                      theta-player lambda-player   lambda sees
=============================  ===========  ==============  ===============
oracle_lagrangian              oracle       projected GD    exact
oracle_proxy_lagrangian        oracle       swap regret     exact
stochastic_lagrangian          SGD          projected GD    proxies
stochastic_proxy_lagrangian    SGD          swap regret     exact
proxy_additive_external        SGD          projected GD    exact
=============================  ===========  ==============  ===============
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import game
from . import models as M
from .data import Dataset

log = logging.getLogger(__name__)

ALGORITHMS = (
    "oracle_lagrangian",
    "stochastic_lagrangian",
    "oracle_proxy_lagrangian",
    "stochastic_proxy_lagrangian",
    "proxy_additive_external",
)
PROXY_FAMILY = {"oracle_proxy_lagrangian", "stochastic_proxy_lagrangian"}


class NumericalError(RuntimeError):
    """A step produced NaN or Inf."""


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class OracleConfig:
    restarts: int = 3
    inner_steps: int = 50
    inner_eta: float = 0.1

    def __post_init__(self):
        if self.restarts < 1 or self.inner_steps < 1 or not self.inner_eta > 0:
            raise ConfigError("oracle restarts, inner_steps and inner_eta must be positive")


@dataclass(frozen=True)
class OptimizerConfig:
    algorithm: str
    T: int = 1000
    eta_theta: float | str = "auto"
    eta_lambda: float | str = "auto"
    R: float | None = None
    minibatch_size: int | str = "full"
    oracle: OracleConfig = field(default_factory=OracleConfig)
    seed: int = 0
    trace_stride: int = 1
    constraint_minibatch: int | None = None
    delta_cap: float = game.DEFAULT_DELTA_CAP
    pilot_eta: float = 0.1
    alg4_literal: bool = False

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}")
        if self.T < 1:
            raise ConfigError("T must be at least 1")
        if self.trace_stride < 1:
            raise ConfigError("trace_stride must be at least 1")
        if self.R is not None and not self.R > 0:
            raise ConfigError("R must be positive")
        for name in ("eta_theta", "eta_lambda"):
            v = getattr(self, name)
            if v != "auto" and not (isinstance(v, (int, float)) and v > 0):
                raise ConfigError(f"{name} must be positive or 'auto'")
        mb = self.minibatch_size
        if mb != "full" and not (isinstance(mb, int) and mb >= 1):
            raise ConfigError("minibatch_size must be a positive integer or 'full'")
        if self.constraint_minibatch is not None and self.constraint_minibatch < 1:
            raise ConfigError("constraint_minibatch must be positive")

    @property
    def family(self) -> str:
        return "proxy" if self.algorithm in PROXY_FAMILY else "lagrangian"

    def radius(self, m: int) -> float:
        if self.R is not None:
            return float(self.R)
        return 10.0 * m if m > 0 else 1.0

    def to_json(self) -> dict:
        return asdict(self)


# -- problems -----------------------------------------------------------------


class RateProblem:
    """Hinge objective plus rate constraints on a dataset and a scoring model."""

    def __init__(self, dataset: Dataset, model: M.ModelSpec, objective: M.ObjectiveSpec, constraints):
        if dataset.feature_dim != model.input_dim:
            raise ConfigError(f"model input_dim {model.input_dim} != dataset dim {dataset.feature_dim}")
        self.dataset = dataset
        self.model = model
        self.objective = objective
        self.constraints = list(constraints)
        self.names = [c.name for c in self.constraints]
        self._memo = (None, None, None)

    @property
    def n(self):
        return len(self.dataset.labels)

    @property
    def m(self):
        return len(self.constraints)

    @property
    def dim(self):
        return self.model.num_params

    @property
    def param_bound(self):
        return self.model.param_bound

    def init(self):
        return M.init(self.model)

    def supports_sampling(self):
        return all(hasattr(c, "exact") for c in self.constraints)

    def _forward(self, theta, sample=None):
        key = (M.fingerprint(theta), None if sample is None else sample.tobytes())
        if self._memo[0] == key:
            return self._memo[1]
        cache = M.forward(theta, self.model, self.dataset, sample)
        self._memo = (key, cache, None)
        return cache

    def objective_value_grad(self, theta, batch=None):
        return M.objective_value_grad(theta, self.model, self.objective, self.dataset, batch)

    def proxy_values_grads(self, theta, sample=None):
        cache = self._forward(theta, sample)
        values = np.empty(self.m)
        grads = np.empty((self.m, self.dim))
        for i, c in enumerate(self.constraints):
            v, ds = c.proxy_value_grad(cache.values, sample=sample)
            values[i] = v
            grads[i] = M.jacobian_vector(theta, self.model, cache, ds)
        return values, grads

    def exact_constraints(self, theta, sample=None):
        cache = self._forward(theta, sample)
        return np.array([c.exact_value(cache.values, sample=sample) for c in self.constraints])

    def exact_constraint_grads(self, theta):
        # indicators are flat almost everywhere
        return np.zeros((self.m, self.dim))

    def evaluate(self, theta):
        """``(0-1 error, objective, exact constraint vector)`` on the full dataset."""
        cache = self._forward(theta)
        error = M.zero_one_error(cache.values, self.dataset.labels)
        value, _ = self.objective_value_grad(theta)
        return error, value, self.exact_constraints(theta)


class FunctionProblem:
    """A problem given by callables, for convex toys and differentiable constraints.

    ``objective(theta, batch)`` returns ``(value, grad)`` where ``batch`` is
    an index array into ``n`` examples or ``None`` (full). ``constraints(theta)``
    returns ``(values (m,), jacobian (m, dim))``; it serves as both the exact
    and the proxy constraint. ``error`` defaults to the full objective.
    """

    def __init__(self, objective, constraints, dim, param_bound, n=1, error=None, names=None, m=None):
        self._objective = objective
        self._constraints = constraints
        self.dim = dim
        self.param_bound = param_bound
        self.n = n
        self._error = error
        self.m = m if m is not None else len(constraints(np.zeros(dim))[0])
        self.names = names or [f"g{i + 1}" for i in range(self.m)]
        self.model = None

    def init(self):
        return np.zeros(self.dim)

    def supports_sampling(self):
        return False

    def objective_value_grad(self, theta, batch=None):
        v, g = self._objective(np.asarray(theta, dtype=float), batch)
        return float(v), np.asarray(g, dtype=float)

    def proxy_values_grads(self, theta, sample=None):
        v, J = self._constraints(np.asarray(theta, dtype=float))
        return np.asarray(v, dtype=float).reshape(self.m), np.asarray(J, dtype=float).reshape(self.m, self.dim)

    def exact_constraints(self, theta, sample=None):
        return self.proxy_values_grads(theta)[0]

    def exact_constraint_grads(self, theta):
        return self.proxy_values_grads(theta)[1]

    def evaluate(self, theta):
        value, _ = self.objective_value_grad(theta)
        error = value if self._error is None else float(self._error(theta))
        return error, value, self.exact_constraints(theta)


# -- traces -------------------------------------------------------------------


@dataclass
class IterateTrace:
    algorithm: str
    family: str
    iterations: list
    thetas: list
    lambdas: list
    exact_error: np.ndarray
    exact_objective: np.ndarray
    exact_constraints: np.ndarray
    constraint_names: list
    model: M.ModelSpec | None = None
    stride: int = 1
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.thetas)

    @property
    def max_violation(self) -> np.ndarray:
        if self.exact_constraints.shape[1] == 0:
            return np.zeros(len(self))
        return self.exact_constraints.max(axis=1)

    def save(self, directory) -> Path:
        directory = Path(directory)
        (directory / "params").mkdir(parents=True, exist_ok=True)
        body = {
            "algorithm": self.algorithm,
            "family": self.family,
            "stride": self.stride,
            "constraint_names": list(self.constraint_names),
            "model": None if self.model is None else self.model.to_json(),
            "meta": self.meta,
            "iterates": [
                {
                    "t": int(t),
                    "exact_error": float(e),
                    "exact_objective": float(o),
                    "exact_constraints": [float(v) for v in c],
                    "lambda": [float(v) for v in lam],
                }
                for t, e, o, c, lam in zip(self.iterations, self.exact_error, self.exact_objective,
                                           self.exact_constraints, self.lambdas)
            ],
        }
        (directory / "trace.json").write_text(json.dumps(body, indent=1, sort_keys=True))
        for t, theta in zip(self.iterations, self.thetas):
            payload = (M.params_to_json(theta, self.model) if self.model is not None
                       else {"layout": {"theta": [len(theta)]}, "values": [float(v) for v in theta]})
            (directory / "params" / f"{int(t)}.json").write_text(json.dumps(payload))
        return directory

    @classmethod
    def load(cls, directory) -> "IterateTrace":
        directory = Path(directory)
        path = directory / "trace.json"
        if not path.exists():
            raise FileNotFoundError(f"no trace.json in {directory}")
        body = json.loads(path.read_text())
        model = None if body["model"] is None else M.ModelSpec.from_json(body["model"])
        its = body["iterates"]
        m = len(body["constraint_names"])
        thetas = []
        for it in its:
            obj = json.loads((directory / "params" / f"{it['t']}.json").read_text())
            thetas.append(np.array(obj["values"], dtype=float) if model is None else M.params_from_json(obj, model))
        return cls(
            algorithm=body["algorithm"],
            family=body["family"],
            iterations=[it["t"] for it in its],
            thetas=thetas,
            lambdas=[np.array(it["lambda"], dtype=float) for it in its],
            exact_error=np.array([it["exact_error"] for it in its]),
            exact_objective=np.array([it["exact_objective"] for it in its]),
            exact_constraints=np.array([it["exact_constraints"] for it in its], dtype=float).reshape(len(its), m),
            constraint_names=body["constraint_names"],
            model=model,
            stride=body["stride"],
            meta=body["meta"],
        )


class _Recorder:
    def __init__(self, problem, config: OptimizerConfig, T: int, enabled=True):
        self.problem = problem
        self.stride = config.trace_stride
        self.T = T
        self.enabled = enabled
        self.rows = []

    def __call__(self, t, theta, lam):
        if not self.enabled or (t % self.stride and t != self.T - 1):
            return
        error, objective, g = self.problem.evaluate(theta)
        if not (math.isfinite(error) and math.isfinite(objective) and np.all(np.isfinite(g))):
            raise NumericalError(f"non-finite evaluation at iterate {t + 1}")
        self.rows.append((t, np.array(theta, dtype=float), np.array(lam, dtype=float), error, objective, g))

    def trace(self, config: OptimizerConfig, meta) -> IterateTrace:
        rows = self.rows
        m = self.problem.m
        return IterateTrace(
            algorithm=config.algorithm,
            family=config.family,
            iterations=[r[0] for r in rows],
            thetas=[r[1] for r in rows],
            lambdas=[r[2] for r in rows],
            exact_error=np.array([r[3] for r in rows]),
            exact_objective=np.array([r[4] for r in rows]),
            exact_constraints=np.array([r[5] for r in rows], dtype=float).reshape(len(rows), m),
            constraint_names=list(self.problem.names),
            model=self.problem.model,
            stride=self.stride,
            meta=meta,
        )


@dataclass
class _Stats:
    """Largest gradient norms seen, for the step-size prescriptions."""

    theta_grad: float = 0.0
    delta_inf: float = 0.0
    delta_two: float = 0.0

    def see(self, theta_grad=None, delta=None):
        if theta_grad is not None:
            self.theta_grad = max(self.theta_grad, float(np.linalg.norm(theta_grad)))
        if delta is not None and delta.size:
            self.delta_inf = max(self.delta_inf, float(np.max(np.abs(delta))))
            self.delta_two = max(self.delta_two, float(np.linalg.norm(delta)))


def _check(t, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericalError(f"non-finite value at iterate {t + 1}")


class _Sampler:
    def __init__(self, problem, config: OptimizerConfig):
        self.rng = np.random.default_rng(config.seed)
        self.problem = problem
        self.batch = None if config.minibatch_size == "full" else int(config.minibatch_size)
        self.csample = config.constraint_minibatch
        if self.csample is not None and not problem.supports_sampling():
            raise ConfigError("constraint_minibatch needs rate constraints without AUC terms")

    def objective_batch(self):
        if self.batch is None or self.batch >= self.problem.n:
            return None
        return self.rng.integers(0, self.problem.n, size=self.batch)

    def constraint_sample(self):
        if self.csample is None or self.csample >= self.problem.n:
            return None
        return np.sort(self.rng.integers(0, self.problem.n, size=self.csample))


# -- oracle -------------------------------------------------------------------


def oracle_minimize(problem, w0, w, start, oracle: OracleConfig, rng):
    """Approximate best response to ``w0 * g0 + <w, g>``.

    Runs ``oracle.restarts`` projected gradient descents on the surrogate
    version (the first warm-started at ``start``, the second at the initial
    point, the rest at random points in the ball) and keeps the candidate
    with the lowest EXACT weighted objective.
    """
    B = problem.param_bound
    best, best_value = None, math.inf
    for r in range(oracle.restarts):
        if r == 0:
            theta = np.array(start, dtype=float)
        elif r == 1:
            theta = problem.init()
        else:
            theta = game.project_euclidean_ball(rng.normal(size=problem.dim), B)
        for _ in range(oracle.inner_steps):
            _, grad = problem.objective_value_grad(theta)
            grad = w0 * grad
            if problem.m:
                _, J = problem.proxy_values_grads(theta)
                grad = grad + w @ J
            theta = game.project_euclidean_ball(theta - oracle.inner_eta * grad, B)
        g0, _ = problem.objective_value_grad(theta)
        value = w0 * g0 + (float(w @ problem.exact_constraints(theta)) if problem.m else 0.0)
        if value < best_value:
            best, best_value = theta, value
    if best is None:
        raise NumericalError("oracle produced only non-finite candidates")
    return best


# -- loops --------------------------------------------------------------------


def _loop_oracle_lagrangian(problem, config, T, eta_lambda, record, stats):
    rng = np.random.default_rng(config.seed)
    R = config.radius(problem.m)
    lam = np.zeros(problem.m)
    theta = problem.init()
    for t in range(T):
        theta = oracle_minimize(problem, 1.0, lam, theta, config.oracle, rng)
        g = problem.exact_constraints(theta)
        _check(t, theta, g)
        stats.see(delta=g)
        record(t, theta, lam)
        lam = game.external_regret_update_lambda(lam, g, eta_lambda, R)


def _loop_oracle_proxy(problem, config, T, eta_lambda, record, stats):
    rng = np.random.default_rng(config.seed)
    player = game.SwapPlayer(problem.m + 1, eta_lambda, config.delta_cap)
    theta = problem.init()
    for t in range(T):
        lam = player.play()
        theta = oracle_minimize(problem, lam[0], lam[1:], theta, config.oracle, rng)
        g = problem.exact_constraints(theta)
        _check(t, theta, g)
        delta = game.proxy_lambda_gradient(g)
        stats.see(delta=delta)
        record(t, theta, lam)
        player.update(delta)
    return player.clamp_events


def _loop_stochastic_proxy(problem, config, T, eta_theta, eta_lambda, record, stats):
    sampler = _Sampler(problem, config)
    player = game.SwapPlayer(problem.m + 1, eta_lambda, config.delta_cap)
    theta = problem.init()
    B = problem.param_bound
    for t in range(T):
        lam = player.play()
        _, grad = problem.objective_value_grad(theta, sampler.objective_batch())
        grad = lam[0] * grad
        sample = sampler.constraint_sample()
        if problem.m:
            _, J = problem.proxy_values_grads(theta, sample)
            grad = grad + lam[1:] @ J
        g = problem.exact_constraints(theta, sample)
        delta = game.proxy_lambda_gradient(g)
        _check(t, grad, g)
        stats.see(grad, delta)
        record(t, theta, lam)
        theta = game.project_euclidean_ball(theta - eta_theta * grad, B)
        player.update(delta)
    return player.clamp_events


def _loop_stochastic_external(problem, config, T, eta_theta, eta_lambda, record, stats, lambda_exact, theta_exact):
    """Shared body of the hinge baseline and the additive proxy variant.

    ``lambda_exact``: the λ-player ascends on exact constraint values
    (otherwise on the proxies). ``theta_exact``: the θ-player uses the exact
    constraints' gradients (otherwise the proxies').
    """
    sampler = _Sampler(problem, config)
    R = config.radius(problem.m)
    lam = np.zeros(problem.m)
    theta = problem.init()
    B = problem.param_bound
    for t in range(T):
        _, grad = problem.objective_value_grad(theta, sampler.objective_batch())
        sample = sampler.constraint_sample()
        if problem.m:
            proxy, J = problem.proxy_values_grads(theta, sample)
            if theta_exact:
                J = problem.exact_constraint_grads(theta)
            grad = grad + lam @ J
            delta = problem.exact_constraints(theta, sample) if lambda_exact else proxy
        else:
            delta = np.zeros(0)
        _check(t, grad, delta)
        stats.see(grad, delta)
        record(t, theta, lam)
        theta = game.project_euclidean_ball(theta - eta_theta * grad, B)
        lam = game.external_regret_update_lambda(lam, delta, eta_lambda, R)


def _dispatch(problem, config, T, eta_theta, eta_lambda, record, stats):
    alg = config.algorithm
    if alg == "oracle_lagrangian":
        return _loop_oracle_lagrangian(problem, config, T, eta_lambda, record, stats)
    if alg == "oracle_proxy_lagrangian":
        return _loop_oracle_proxy(problem, config, T, eta_lambda, record, stats)
    if alg == "stochastic_proxy_lagrangian":
        return _loop_stochastic_proxy(problem, config, T, eta_theta, eta_lambda, record, stats)
    if alg == "stochastic_lagrangian":
        return _loop_stochastic_external(problem, config, T, eta_theta, eta_lambda, record, stats,
                                         lambda_exact=False, theta_exact=False)
    literal = config.alg4_literal
    return _loop_stochastic_external(problem, config, T, eta_theta, eta_lambda, record, stats,
                                     lambda_exact=not literal, theta_exact=literal)


def _prescribed_steps(problem, config, stats, T):
    """Step sizes from the convex-case regret bounds, given gradient-norm estimates."""
    def pick(bound):
        return bound if bound > 0 else None

    eta_theta = config.eta_theta
    if eta_theta == "auto":
        b = pick(stats.theta_grad)
        eta_theta = game.external_step_size(problem.param_bound, T, b) if b else config.pilot_eta
    eta_lambda = config.eta_lambda
    if eta_lambda == "auto":
        if config.family == "proxy":
            b = pick(stats.delta_inf)
            eta_lambda = game.swap_step_size(problem.m + 1, T, b) if b else config.pilot_eta
        else:
            b = pick(stats.delta_two)
            eta_lambda = game.external_step_size(config.radius(problem.m), T, b) if b else config.pilot_eta
    return float(eta_theta), float(eta_lambda)


def run(problem, config: OptimizerConfig) -> IterateTrace:
    """Run ``config.algorithm`` on ``problem``.

    With ``"auto"`` step sizes, a pilot of ``max(10, T // 100)`` iterations
    at ``pilot_eta`` estimates the gradient bounds; the run then restarts
    from scratch with the prescribed rates.
    """
    started = time.perf_counter()
    T = config.T
    meta = {"config": config.to_json(), "seed": config.seed}
    if "auto" in (config.eta_theta, config.eta_lambda):
        pilot_T = max(10, T // 100)
        pilot_stats = _Stats()
        pe = config.pilot_eta
        _dispatch(problem, config, pilot_T, pe if config.eta_theta == "auto" else config.eta_theta,
                  pe if config.eta_lambda == "auto" else config.eta_lambda,
                  _Recorder(problem, config, pilot_T, enabled=False), pilot_stats)
        meta["pilot"] = {"iterations": pilot_T, "theta_grad_bound": pilot_stats.theta_grad,
                         "delta_inf_bound": pilot_stats.delta_inf, "delta_two_bound": pilot_stats.delta_two}
        eta_theta, eta_lambda = _prescribed_steps(problem, config, pilot_stats, T)
    else:
        eta_theta, eta_lambda = float(config.eta_theta), float(config.eta_lambda)
    meta["eta_theta"], meta["eta_lambda"] = eta_theta, eta_lambda
    if config.family == "lagrangian":
        meta["R"] = config.radius(problem.m)
    record = _Recorder(problem, config, T)
    stats = _Stats()
    clamps = _dispatch(problem, config, T, eta_theta, eta_lambda, record, stats)
    meta["observed"] = {"theta_grad_bound": stats.theta_grad, "delta_inf_bound": stats.delta_inf,
                        "delta_two_bound": stats.delta_two}
    if clamps:
        meta["clamp_events"] = clamps
    meta["timings"] = {"seconds": time.perf_counter() - started}
    return record.trace(config, meta)


def _runner(name):
    def run_named(problem, config: OptimizerConfig) -> IterateTrace:
        if config.algorithm != name:
            raise ConfigError(f"config is for {config.algorithm!r}, not {name!r}")
        return run(problem, config)

    run_named.__name__ = f"run_{name}"
    run_named.__doc__ = f"Run ``{name}``; see :func:`run`."
    return run_named


run_oracle_lagrangian = _runner("oracle_lagrangian")
run_stochastic_lagrangian = _runner("stochastic_lagrangian")
run_oracle_proxy_lagrangian = _runner("oracle_proxy_lagrangian")
run_stochastic_proxy_lagrangian = _runner("stochastic_proxy_lagrangian")
run_proxy_additive_external = _runner("proxy_additive_external")


def with_algorithm(config: OptimizerConfig, algorithm: str) -> OptimizerConfig:
    return replace(config, algorithm=algorithm)
