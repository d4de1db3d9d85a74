"""Experiment runner: hyperparameter grids, the algorithm-by-solution table, reports.

Config files are ``key = value`` lines; ``#`` starts a comment, dotted
keys form sections and lists are comma-separated::

    seed = 0
    output_dir = runs/parity
    algorithms = stochastic_lagrangian, stochastic_proxy_lagrangian, proxy_additive_external

    dataset.source = synthetic          # or csv
    dataset.generator = two_group       # two_group | compas_like
    dataset.n = 5000
    dataset.separation = 2.0
    dataset.group_skew = 0.8
    dataset.seed = 0
    # csv: dataset.path, dataset.label, dataset.features, dataset.groups,
    #      dataset.baseline, dataset.weight, dataset.positive_value, dataset.negative_value

    split.fractions = 0.6, 0.2, 0.2     # train, valid, test
    split.seed = 0                      # defaults to seed

    model.kind = linear                 # or mlp1 (with model.hidden_units)
    model.param_bound = 10
    objective.l2_coefficient = 0

    goal.0.kind = statistical_parity
    goal.0.slack = 0.02
    goal.0.groups = A, B                # optional
    goal.0.aux.pairwise = false         # kind-specific options

    optimizer.T = 5000
    optimizer.minibatch_size = full
    grid.eta_theta = auto               # or e.g. 0.01, 0.1, 1
    grid.eta_lambda = auto
    shrink.epsilon = auto
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import data as D
from . import models as M
from . import optimizers as O
from . import rates
from . import solutions as S

log = logging.getLogger(__name__)

LABELS = {
    "stochastic_lagrangian": "Hinge",
    "stochastic_proxy_lagrangian": "0-1 swap",
    "proxy_additive_external": "0-1 ext",
    "oracle_lagrangian": "Oracle Lagrangian",
    "oracle_proxy_lagrangian": "Oracle proxy",
}
KIND_LABELS = {"m_stochastic": "m-stoch", "t_stochastic": "T-stoch", "best_iterate": "Best", "last_iterate": "Last"}
DEFAULT_ALGORITHMS = ("stochastic_lagrangian", "stochastic_proxy_lagrangian", "proxy_additive_external")
SPLITS = ("train", "valid", "test")


ConfigError = O.ConfigError


# -- config -------------------------------------------------------------------


def parse_config_text(text: str) -> dict:
    """Flat ``{dotted.key: raw string}`` mapping; later keys override earlier ones."""
    out = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {line_no}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or any(not p for p in key.split(".")):
            raise ConfigError(f"line {line_no}: malformed key {key!r}")
        out[key] = value
    return out


def _list(value: str) -> list:
    return [v.strip() for v in value.split(",") if v.strip()]


def _scalar(value: str):
    low = value.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(value)
    except ValueError:
        pass
    try:
        return float(value)
    except ValueError:
        return value


def _number(raw: dict, key: str, default, kind=float):
    if key not in raw:
        return default
    try:
        return kind(raw[key])
    except ValueError:
        raise ConfigError(f"{key}: expected {kind.__name__}, got {raw[key]!r}") from None


def _step(value: str, key: str):
    if value == "auto":
        return "auto"
    try:
        v = float(value)
    except ValueError:
        raise ConfigError(f"{key}: expected a positive number or 'auto', got {value!r}") from None
    if not v > 0:
        raise ConfigError(f"{key}: step sizes must be positive")
    return v


def goals_from_raw(raw: dict) -> list:
    ids = sorted({k.split(".")[1] for k in raw if k.startswith("goal.")}, key=lambda s: (len(s), s))
    goals = []
    for gid in ids:
        prefix = f"goal.{gid}."
        if prefix + "kind" not in raw:
            raise ConfigError(f"goal.{gid} has no kind")
        aux = {k[len(prefix) + 4:]: _scalar(v) for k, v in raw.items() if k.startswith(prefix + "aux.")}
        try:
            goals.append(rates.GoalSpec(
                kind=raw[prefix + "kind"],
                groups=tuple(_list(raw.get(prefix + "groups", ""))),
                slack=_number(raw, prefix + "slack", 0.0),
                slack_form=raw.get(prefix + "slack_form", "additive"),
                bound=_number(raw, prefix + "bound", 0.0),
                aux=aux,
            ))
        except ValueError as exc:
            raise ConfigError(f"goal.{gid}: {exc}") from None
    return goals


@dataclass(frozen=True)
class DatasetSource:
    source: str = "synthetic"
    generator: str = "two_group"
    params: dict = field(default_factory=dict)
    path: str | None = None
    schema: D.CsvSchema | None = None

    def load(self) -> D.Dataset:
        if self.source == "csv":
            return D.load_csv(self.path, self.schema)
        p = self.params
        if self.generator == "two_group":
            return D.synth_two_group(int(p.get("n", 5000)), float(p.get("separation", 2.0)),
                                     float(p.get("group_skew", 0.8)), int(p.get("seed", 0)))
        if self.generator == "compas_like":
            return D.synth_compas_like(int(p.get("n", 2000)), int(p.get("seed", 0)))
        raise ConfigError(f"unknown generator {self.generator!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSource
    goals: tuple
    split_fractions: tuple = (0.6, 0.2, 0.2)
    split_seed: int | None = None
    model_kind: str = "linear"
    hidden_units: int = 0
    param_bound: float = 10.0
    init_seed: int = 0
    objective: M.ObjectiveSpec = field(default_factory=M.ObjectiveSpec)
    algorithms: tuple = DEFAULT_ALGORITHMS
    grid_eta_theta: tuple = ("auto",)
    grid_eta_lambda: tuple = ("auto",)
    optimizer: O.OptimizerConfig = field(default_factory=lambda: O.OptimizerConfig("stochastic_lagrangian"))
    shrink_epsilon: float | str = "auto"
    seed: int = 0
    output_dir: str = "runs/experiment"

    def __post_init__(self):
        f = np.asarray(self.split_fractions, dtype=float)
        if f.size != 3 or np.any(f <= 0) or abs(f.sum() - 1.0) > 1e-9:
            raise ConfigError("split.fractions must be three positive numbers summing to 1")
        if not self.grid_eta_theta or not self.grid_eta_lambda:
            raise ConfigError("the step-size grid must be nonempty")
        for a in self.algorithms:
            if a not in O.ALGORITHMS:
                raise ConfigError(f"unknown algorithm {a!r}")

    @property
    def effective_split_seed(self) -> int:
        return self.seed if self.split_seed is None else self.split_seed

    def model_spec(self, input_dim: int) -> M.ModelSpec:
        return M.ModelSpec(self.model_kind, input_dim, self.hidden_units, self.param_bound, self.init_seed)

    def grid(self) -> list:
        return [(a, b) for a in self.grid_eta_theta for b in self.grid_eta_lambda]

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=seed, optimizer=replace(self.optimizer, seed=seed))

    def to_json(self) -> dict:
        return {
            "dataset": {"source": self.dataset.source, "generator": self.dataset.generator,
                        "params": self.dataset.params, "path": self.dataset.path},
            "goals": [{"kind": g.kind, "groups": list(g.groups), "slack": g.slack, "slack_form": g.slack_form,
                       "bound": g.bound, "aux": g.aux} for g in self.goals],
            "split_fractions": list(self.split_fractions),
            "split_seed": self.effective_split_seed,
            "model": {"kind": self.model_kind, "hidden_units": self.hidden_units,
                      "param_bound": self.param_bound, "init_seed": self.init_seed},
            "l2_coefficient": self.objective.l2_coefficient,
            "algorithms": list(self.algorithms),
            "grid": {"eta_theta": list(self.grid_eta_theta), "eta_lambda": list(self.grid_eta_lambda)},
            "optimizer": self.optimizer.to_json(),
            "shrink_epsilon": self.shrink_epsilon,
            "seed": self.seed,
        }


def config_from_raw(raw: dict) -> ExperimentConfig:
    known_sections = ("dataset.", "split.", "model.", "objective.", "goal.", "optimizer.", "grid.", "shrink.", "oracle.")
    for key in raw:
        if key not in ("seed", "output_dir", "algorithms") and not key.startswith(known_sections):
            raise ConfigError(f"unknown config key {key!r}")
    source = raw.get("dataset.source", "synthetic")
    if source == "csv":
        if "dataset.path" not in raw or "dataset.label" not in raw or "dataset.features" not in raw:
            raise ConfigError("csv datasets need dataset.path, dataset.label and dataset.features")
        schema = D.CsvSchema(
            label=raw["dataset.label"],
            features=tuple(_list(raw["dataset.features"])),
            positive_value=raw.get("dataset.positive_value", "1"),
            negative_value=raw.get("dataset.negative_value", "0"),
            groups=tuple(_list(raw.get("dataset.groups", ""))),
            baseline=raw.get("dataset.baseline"),
            weight=raw.get("dataset.weight"),
        )
        ds = DatasetSource("csv", path=raw["dataset.path"], schema=schema)
    elif source == "synthetic":
        params = {k[len("dataset."):]: _scalar(v) for k, v in raw.items()
                  if k.startswith("dataset.") and k not in ("dataset.source", "dataset.generator")}
        ds = DatasetSource("synthetic", raw.get("dataset.generator", "two_group"), params)
    else:
        raise ConfigError(f"dataset.source must be 'synthetic' or 'csv', got {source!r}")

    seed = _number(raw, "seed", 0, int)
    try:
        oracle = O.OracleConfig(
            restarts=_number(raw, "oracle.restarts", 3, int),
            inner_steps=_number(raw, "oracle.inner_steps", 50, int),
            inner_eta=_number(raw, "oracle.inner_eta", 0.1),
        )
        mb = raw.get("optimizer.minibatch_size", "full")
        cm = raw.get("optimizer.constraint_minibatch")
        optimizer = O.OptimizerConfig(
            algorithm="stochastic_lagrangian",
            T=_number(raw, "optimizer.T", 1000, int),
            R=_number(raw, "optimizer.R", None),
            minibatch_size=mb if mb == "full" else _number(raw, "optimizer.minibatch_size", 0, int),
            oracle=oracle,
            seed=seed,
            trace_stride=_number(raw, "optimizer.trace_stride", 1, int),
            constraint_minibatch=None if cm is None else _number(raw, "optimizer.constraint_minibatch", 0, int),
            delta_cap=_number(raw, "optimizer.delta_cap", 1e3),
            pilot_eta=_number(raw, "optimizer.pilot_eta", 0.1),
            alg4_literal=str(raw.get("optimizer.alg4_literal", "false")).lower() == "true",
        )
        objective = M.ObjectiveSpec(l2_coefficient=_number(raw, "objective.l2_coefficient", 0.0))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    eps = raw.get("shrink.epsilon", "auto")
    algorithms = tuple(_list(raw["algorithms"])) if "algorithms" in raw else DEFAULT_ALGORITHMS
    fractions = tuple(float(v) for v in _list(raw.get("split.fractions", "0.6, 0.2, 0.2")))
    return ExperimentConfig(
        dataset=ds,
        goals=tuple(goals_from_raw(raw)),
        split_fractions=fractions,
        split_seed=_number(raw, "split.seed", None, int),
        model_kind=raw.get("model.kind", "linear"),
        hidden_units=_number(raw, "model.hidden_units", 0, int),
        param_bound=_number(raw, "model.param_bound", 10.0),
        init_seed=_number(raw, "model.init_seed", 0, int),
        objective=objective,
        algorithms=algorithms,
        grid_eta_theta=tuple(_step(v, "grid.eta_theta") for v in _list(raw.get("grid.eta_theta", "auto"))),
        grid_eta_lambda=tuple(_step(v, "grid.eta_lambda") for v in _list(raw.get("grid.eta_lambda", "auto"))),
        optimizer=optimizer,
        shrink_epsilon=eps if eps == "auto" else _number(raw, "shrink.epsilon", 0.0),
        seed=seed,
        output_dir=raw.get("output_dir", "runs/experiment"),
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"no such config file: {path}")
    return config_from_raw(parse_config_text(path.read_text()))


# -- experiment -----------------------------------------------------------------


@dataclass(frozen=True)
class Splits:
    train: D.Dataset
    valid: D.Dataset
    test: D.Dataset

    def __iter__(self):
        return iter((self.train, self.valid, self.test))


def prepare(config: ExperimentConfig):
    """Load, split, and build per-split constraints and the training problem."""
    dataset = config.dataset.load()
    train, valid, test = D.stratified_split(dataset, config.split_fractions, config.effective_split_seed)
    splits = Splits(train, valid, test)
    constraints = {name: rates.build_goals(config.goals, part) for name, part in zip(SPLITS, splits)}
    spec = config.model_spec(dataset.feature_dim)
    return splits, constraints, spec


def _train(config: ExperimentConfig, algorithm: str, eta_theta, eta_lambda, constrained=True):
    splits, constraints, spec = prepare(config)
    problem = O.RateProblem(splits.train, spec, config.objective, constraints["train"] if constrained else [])
    opt = replace(config.optimizer, algorithm=algorithm, eta_theta=eta_theta, eta_lambda=eta_lambda)
    return O.run(problem, opt)


def _train_job(args):
    return _train(*args)


@dataclass(frozen=True)
class ReportRow:
    algorithm: str
    solution: str
    train_error: float
    valid_error: float
    test_error: float
    train_violation: float
    valid_violation: float
    test_violation: float

    def __post_init__(self):
        for name in ("train_error", "valid_error", "test_error", "train_violation", "valid_violation", "test_violation"):
            if not math.isfinite(getattr(self, name)):
                raise O.NumericalError(f"non-finite {name} in row {self.algorithm} {self.solution}")

    def values(self):
        return (self.train_error, self.valid_error, self.test_error,
                self.train_violation, self.valid_violation, self.test_violation)


HEADER = ("Algorithm", "Train Err.", "Valid Err.", "Test Err.", "Train Vio.", "Valid Vio.", "Test Vio.")


def _fmt(v: float) -> str:
    s = f"{v:.4f}"
    return "0.0000" if s == "-0.0000" else s


def format_tsv(rows) -> str:
    table = [HEADER] + [(r.algorithm if r.solution == "-" else f"{r.algorithm} {r.solution}",
                         *(_fmt(v) for v in r.values())) for r in rows]
    widths = [max(len(line[j]) for line in table) for j in range(len(HEADER))]
    out = []
    for line in table:
        cells = [line[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(line[1:], widths[1:])]
        out.append("\t".join(cells))
    return "\n".join(out) + "\n"


def _evaluate_all(classifier, splits, constraints, objective):
    return {name: S.evaluate(classifier, part, constraints[name], objective)
            for name, part in zip(SPLITS, splits)}


def _row(label, kind, ev) -> ReportRow:
    return ReportRow(label, kind,
                     ev["train"]["error"], ev["valid"]["error"], ev["test"]["error"],
                     ev["train"]["max_violation"], ev["valid"]["max_violation"], ev["test"]["max_violation"])


def select_hyperparameters(candidates):
    """Pick from ``[(point, valid_loss, valid_max_violation), ...]``.

    Minimizes ``max(loss rank, violation rank)`` with 1-based 'min' ranks;
    ties go to the lower validation loss, then the earlier candidate.
    """
    candidates = list(candidates)
    if not candidates:
        raise ValueError("no candidates to select from")
    i = S.heuristic_select([c[1] for c in candidates], [c[2] for c in candidates])
    return candidates[i][0]


@dataclass
class Report:
    rows: list
    selected: dict
    config: dict
    epsilons: dict

    def tsv(self) -> str:
        return format_tsv(self.rows)

    def to_json(self) -> dict:
        return {
            "rows": [{"algorithm": r.algorithm, "solution": r.solution,
                      **{f"{s}_{what}": round(v, 12) for (s, what), v in zip(
                          [(s, w) for w in ("error", "violation") for s in SPLITS], r.values())}}
                     for r in self.rows],
            "selected_grid_point": self.selected,
            "m_stochastic_epsilon": self.epsilons,
            "config": self.config,
        }


def run_experiment(config: ExperimentConfig, jobs: int = 1, output_dir=None) -> Report:
    """Train everything, select grid points on validation, and write reports.

    Writes ``report.tsv``, ``report.json``, one trace directory per
    (algorithm, grid point) and one classifier JSON per reported row.
    """
    out = Path(output_dir or config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    splits, constraints, spec = prepare(config)
    grid = config.grid()
    jobs_list = [(config, "stochastic_lagrangian", grid[0][0], grid[0][1], False)]
    jobs_list += [(config, alg, et, el, True) for alg in config.algorithms for et, el in grid]
    log.info("training %d runs with %d job(s)", len(jobs_list), jobs)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            traces = list(pool.map(_train_job, jobs_list))
    else:
        traces = [_train_job(j) for j in jobs_list]

    rows, selected, epsilons = [], {}, {}
    baseline = S.last_iterate(traces[0])
    baseline.save(out / "unconstrained.json")
    rows.append(_row("Unconstrained", "-", _evaluate_all(baseline, splits, constraints, config.objective)))

    for a_idx, alg in enumerate(config.algorithms):
        alg_traces = traces[1 + a_idx * len(grid): 1 + (a_idx + 1) * len(grid)]
        for g_idx, trace in enumerate(alg_traces):
            trace.save(out / "traces" / alg / f"point{g_idx}")
        selected[alg] = {}
        for kind in S.KINDS:
            evaluated = []
            for g_idx, trace in enumerate(alg_traces):
                clf = S.solution(trace, kind, config.shrink_epsilon)
                evaluated.append((g_idx, clf, _evaluate_all(clf, splits, constraints, config.objective)))
            pick = select_hyperparameters(
                [(g, ev["valid"]["error"], ev["valid"]["max_violation"]) for g, _, ev in evaluated])
            _, clf, ev = evaluated[pick]
            selected[alg][kind] = pick
            if kind == "m_stochastic":
                epsilons[alg] = clf.info["epsilon"]
            clf.save(out / f"{alg}__{kind}.json")
            rows.append(_row(LABELS[alg], KIND_LABELS[kind], ev))

    report = Report(rows, selected, config.to_json(), epsilons)
    (out / "report.tsv").write_text(report.tsv())
    (out / "report.json").write_text(json.dumps(report.to_json(), indent=1, sort_keys=True))
    return report


def export_oscillation(trace: O.IterateTrace, path) -> Path:
    """TSV of per-iterate exact error and max violation (needs a stride-1 trace)."""
    if trace.stride != 1:
        raise ValueError("oscillation export needs a trace recorded at stride 1")
    path = Path(path)
    vio = S.max_violation(trace.exact_constraints)
    lines = ["iterate\texact_error\texact_max_violation"]
    for t, e, v in zip(trace.iterations, trace.exact_error, vio):
        lines.append(f"{int(t) + 1}\t{e:.6f}\t{v:.6f}")
    path.write_text("\n".join(lines) + "\n")
    return path
