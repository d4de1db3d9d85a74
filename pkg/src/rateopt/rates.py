"""Rate expressions over dataset slices, evaluated exactly or via surrogates.

Every constraint is normalized to ``expression <= 0``. An expression is a
signed sum of positive/negative classification rates on slices plus a
constant offset. Count-form constraints (precision, win-loss ratio) fold
the slice sizes into the term coefficients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy.special import expit

from . import data as data_mod
from .data import DataError, Dataset, Slice, SlicePredicate

POSITIVE = "positive_rate"
NEGATIVE = "negative_rate"


@dataclass(frozen=True)
class RateTerm:
    """``coefficient * p(slice)`` where p is the positive or negative rate at ``threshold``."""

    coefficient: float
    polarity: str
    slice: Slice
    threshold: float = 0.0

    def __post_init__(self):
        if self.polarity not in (POSITIVE, NEGATIVE):
            raise ValueError(f"polarity must be {POSITIVE!r} or {NEGATIVE!r}")
        if len(self.slice) == 0:
            raise DataError("rate term over an empty slice")
        if not math.isfinite(self.threshold):
            raise ValueError("threshold must be finite")


@dataclass(frozen=True, eq=False)
class RateExpression:
    terms: tuple
    offset: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        if not self.terms:
            raise ValueError("a rate expression needs at least one term")
        sizes = {t.slice.size_of_dataset for t in self.terms}
        if len(sizes) != 1:
            raise ValueError("all terms must slice the same dataset")

    @property
    def dataset_size(self) -> int:
        return self.terms[0].slice.size_of_dataset

    def __add__(self, other):
        if isinstance(other, RateExpression):
            return RateExpression(self.terms + other.terms, self.offset + other.offset)
        return RateExpression(self.terms, self.offset + float(other))

    __radd__ = __add__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, c):
        c = float(c)
        terms = tuple(RateTerm(c * t.coefficient, t.polarity, t.slice, t.threshold) for t in self.terms)
        return RateExpression(terms, c * self.offset)

    __rmul__ = __mul__

    @cached_property
    def compiled(self):
        """Per-example net coefficients on ``1[score >= threshold]``, by threshold.

        ``c * p-(S)`` is rewritten as ``c - c * p+(S)`` so that each example
        carries one signed weight per threshold. Returns ``(dict, constant)``.
        """
        n = self.dataset_size
        by_threshold: dict = {}
        constant = float(self.offset)
        for t in self.terms:
            a = by_threshold.setdefault(float(t.threshold), np.zeros(n))
            w = t.coefficient / len(t.slice)
            if t.polarity == POSITIVE:
                a[t.slice.indices] += w
            else:
                a[t.slice.indices] -= w
                constant += t.coefficient
        for a in by_threshold.values():
            a.setflags(write=False)
        return by_threshold, constant


@dataclass(frozen=True)
class SurrogatePolicy:
    """Smooth replacement of the step ``1[z >= 0]``.

    ``hinge``: upper ``max(0, 1 + z/m)``, lower ``1 - max(0, 1 - z/m)``.
    ``sigmoid``: upper ``sigma((z + sqrt(T)) / T) / sigma(1/sqrt(T))``, which
    equals 1 at the threshold and tends to the step as ``T -> 0``; the lower
    surrogate is ``1 - upper(-z)``.
    """

    kind: str = "hinge"
    parameter: float = 1.0

    def __post_init__(self):
        if self.kind not in ("hinge", "sigmoid"):
            raise ValueError(f"unknown surrogate kind {self.kind!r}")
        if not self.parameter > 0:
            raise ValueError("surrogate margin/temperature must be positive")

    def upper(self, z):
        z = np.asarray(z, dtype=float)
        p = self.parameter
        if self.kind == "hinge":
            v = 1.0 + z / p
            return np.maximum(0.0, v), np.where(v > 0.0, 1.0 / p, 0.0)
        shift = math.sqrt(p)
        norm = float(expit(1.0 / shift))
        s = expit((z + shift) / p)
        return s / norm, s * (1.0 - s) / (p * norm)

    def lower(self, z):
        z = np.asarray(z, dtype=float)
        if self.kind == "hinge":
            p = self.parameter
            v = 1.0 - z / p
            return 1.0 - np.maximum(0.0, v), np.where(v > 0.0, 1.0 / p, 0.0)
        u, du = self.upper(-z)
        return 1.0 - u, du


def exact_rate(scores, term: RateTerm) -> float:
    scores = np.asarray(scores, dtype=float)
    if len(term.slice) == 0:
        raise DataError("rate term over an empty slice")
    s = scores[term.slice.indices]
    if term.polarity == POSITIVE:
        hits = np.count_nonzero(s >= term.threshold)
    else:
        hits = np.count_nonzero(s < term.threshold)
    return term.coefficient * (hits / s.size)


def exact_expression(expr: RateExpression, scores) -> float:
    scores = np.asarray(scores, dtype=float)
    if scores.shape != (expr.dataset_size,):
        raise ValueError("scores must align with the dataset")
    return float(sum(exact_rate(scores, t) for t in expr.terms) + expr.offset)


def compiled_exact(expr: RateExpression, scores, sample=None) -> float:
    """Exact value from the per-example net coefficients.

    Same number as :func:`exact_expression` up to rounding; with ``sample``
    it is the unbiased subsample estimate, as in :func:`surrogate_expression`.
    """
    scores = np.asarray(scores, dtype=float)
    by_threshold, constant = expr.compiled
    if sample is None:
        if scores.shape != (expr.dataset_size,):
            raise ValueError("scores must align with the dataset")
    else:
        sample = np.asarray(sample)
        if scores.shape != sample.shape:
            raise ValueError("scores must align with the sample")
    value = constant
    for tau, a in by_threshold.items():
        if sample is not None:
            a = a[sample] * (expr.dataset_size / sample.size)
        value += float(a @ (scores >= tau))
    return value


def surrogate_expression(expr: RateExpression, scores, policy: SurrogatePolicy, sample=None):
    """Upper bound of :func:`exact_expression` and its gradient w.r.t. the scores.

    Each example's net coefficient on a step picks the surrogate: upper
    bound where it is positive, lower bound where it is negative. With
    ``sample`` (indices into the dataset), ``scores`` holds only the sampled
    examples and the value is the unbiased subsample estimate.
    """
    scores = np.asarray(scores, dtype=float)
    by_threshold, constant = expr.compiled
    if sample is None:
        if scores.shape != (expr.dataset_size,):
            raise ValueError("scores must align with the dataset")
        scale = 1.0
    else:
        sample = np.asarray(sample)
        if scores.shape != sample.shape:
            raise ValueError("scores must align with the sample")
        scale = expr.dataset_size / sample.size
    value = constant
    grad = np.zeros_like(scores)
    for tau, a in by_threshold.items():
        if sample is not None:
            a = a[sample] * scale
        z = scores - tau
        up, dup = policy.upper(z)
        lo, dlo = policy.lower(z)
        pos = a > 0
        value += float(np.sum(np.where(pos, a * up, a * lo)))
        grad += np.where(pos, a * dup, a * dlo)
    return value, grad


# -- constraints ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RateConstraint:
    exact: RateExpression
    proxy_policy: SurrogatePolicy = field(default_factory=SurrogatePolicy)
    name: str = "constraint"

    def exact_value(self, scores, sample=None) -> float:
        return compiled_exact(self.exact, scores, sample=sample)

    def proxy_value_grad(self, scores, sample=None):
        return surrogate_expression(self.exact, scores, self.proxy_policy, sample=sample)


def _auc_thresholds(scores, J):
    lo, hi = float(np.min(scores)), float(np.max(scores))
    alphas = (2.0 * np.arange(1, J + 1) - 1.0) / (2.0 * J)
    return lo, hi, alphas, lo + alphas * (hi - lo)


def _auc_selection(pos_scores, neg_scores, taus, L):
    """For each FPR level l/L the threshold index maximizing TPR, or -1."""
    tpr = np.array([np.mean(pos_scores >= t) for t in taus])
    fpr = np.array([np.mean(neg_scores >= t) for t in taus])
    chosen = np.full(L, -1)
    for ell in range(1, L + 1):
        feasible = np.flatnonzero(fpr <= ell / L)
        if feasible.size:
            chosen[ell - 1] = feasible[np.argmax(tpr[feasible])]
    return chosen, tpr


def auc_lower_bound_value(scores, dataset: Dataset, L: int, J: int) -> float:
    """Finite-L, finite-J Riemann lower estimate of ROC AUC.

    Thresholds ``(2j-1)/(2J)`` apply to min-max normalized scores; an FPR
    level with no feasible threshold contributes 0.
    """
    if L < 1 or J < 1:
        raise ValueError("L and J must be at least 1")
    scores = np.asarray(scores, dtype=float)
    pos = dataset.labels == 1
    if pos.all() or not pos.any():
        raise DataError("AUC needs both classes")
    _, _, _, taus = _auc_thresholds(scores, J)
    chosen, tpr = _auc_selection(scores[pos], scores[~pos], taus, L)
    return float(np.sum(tpr[chosen[chosen >= 0]]) / L)


@dataclass(frozen=True, eq=False)
class AucConstraint:
    """``reference - AUC_{L,J}(slice) <= 0`` with the threshold choice frozen per evaluation.

    The proxy differentiates a lower surrogate of the TPR at each selected
    threshold, including the dependence of the thresholds on the score
    range. This is a heuristic: the selection itself is not differentiated.
    """

    positives: Slice
    negatives: Slice
    L: int
    J: int
    reference: float
    proxy_policy: SurrogatePolicy = field(default_factory=SurrogatePolicy)
    name: str = "auc_lb"

    def _frozen(self, scores):
        scores = np.asarray(scores, dtype=float)
        members = np.union1d(self.positives.indices, self.negatives.indices)
        s = scores[members]
        lo, hi, alphas, taus = _auc_thresholds(s, self.J)
        chosen, tpr = _auc_selection(scores[self.positives.indices], scores[self.negatives.indices], taus, self.L)
        return members, s, alphas, taus, chosen[chosen >= 0], tpr

    def exact_value(self, scores, sample=None) -> float:
        if sample is not None:
            raise ValueError("AUC constraints need full-batch scores")
        *_, chosen, tpr = self._frozen(scores)
        return float(self.reference - np.sum(tpr[chosen]) / self.L)

    def proxy_value_grad(self, scores, sample=None):
        if sample is not None:
            raise ValueError("AUC constraints need full-batch scores")
        scores = np.asarray(scores, dtype=float)
        members, s, alphas, taus, chosen, _ = self._frozen(scores)
        grad = np.zeros_like(scores)
        value = self.reference
        pidx = self.positives.indices
        i_lo, i_hi = members[np.argmin(s)], members[np.argmax(s)]
        spread = float(np.max(s) - np.min(s))
        for j in chosen:
            lo_val, dlo = self.proxy_policy.lower(scores[pidx] - taus[j])
            w = 1.0 / (self.L * pidx.size)
            value -= w * float(np.sum(lo_val))
            grad[pidx] -= w * dlo
            if spread > 0.0:
                # threshold = min + alpha * (max - min) moves with the extremes
                pull = w * float(np.sum(dlo))
                grad[i_lo] += pull * (1.0 - alphas[j])
                grad[i_hi] += pull * alphas[j]
        return value, grad


# -- goal catalog -------------------------------------------------------------

GROUP_GOALS = {
    "statistical_parity", "min_coverage", "no_lost_benefits", "accurate_coverage",
    "equal_opportunity", "equal_odds", "equal_accuracy", "min_accuracy", "not_worse_off",
}
METRIC_GOALS = {
    "coverage", "min_recall", "precision_lb", "accuracy_lb", "churn_ub",
    "loss_only_churn_ub", "wlr_lb", "auc_lb", "steering_min_accuracy",
}
GOAL_KINDS = GROUP_GOALS | METRIC_GOALS
NEEDS_BASELINE = {"no_lost_benefits", "not_worse_off", "churn_ub", "loss_only_churn_ub", "wlr_lb"}


@dataclass(frozen=True)
class GoalSpec:
    """A policy goal expanded by :func:`build_goal` into ``<= 0`` constraints.

    ``groups`` empty means every catalog group for the cross-group goals and
    the whole dataset for metric goals. ``slack`` is an additive loosening
    or, with ``slack_form="multiplicative"``, a factor on the reference side
    of the comparison. ``aux`` holds kind-specific options: ``L``/``J`` for
    ``auc_lb``, ``pairwise`` for ``statistical_parity``, ``two_sided`` for
    ``equal_opportunity``, and surrogate settings ``surrogate``/``margin``.
    """

    kind: str
    groups: tuple = ()
    slack: float = 0.0
    slack_form: str = "additive"
    bound: float = 0.0
    aux: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(self.groups))
        if self.kind not in GOAL_KINDS:
            raise ValueError(f"unknown goal kind {self.kind!r}")
        if self.slack_form not in ("additive", "multiplicative"):
            raise ValueError("slack_form must be 'additive' or 'multiplicative'")
        if self.slack_form == "additive" and self.slack < 0:
            raise ValueError("additive slack must be nonnegative")
        if self.slack_form == "multiplicative" and not self.slack > 0:
            raise ValueError("multiplicative slack must be positive")

    @property
    def policy(self) -> SurrogatePolicy:
        return SurrogatePolicy(self.aux.get("surrogate", "hinge"), float(self.aux.get("margin", 1.0)))


class _Builder:
    def __init__(self, spec: GoalSpec, dataset: Dataset):
        self.spec = spec
        self.ds = dataset
        self.out: list = []

    def sl(self, within=None, **filters) -> Slice:
        return data_mod.slice(self.ds, SlicePredicate(**filters), within=within)

    def nonempty(self, s: Slice, what: str) -> Slice:
        if len(s) == 0:
            raise DataError(f"{self.spec.kind}: empty slice for {what}")
        return s

    def rate(self, s: Slice, polarity=POSITIVE, coefficient=1.0) -> RateExpression:
        return RateExpression((RateTerm(coefficient, polarity, s),))

    def accuracy(self, s: Slice, what: str) -> RateExpression:
        """Rate-form accuracy on ``s`` (a count ratio over |s|)."""
        terms = []
        for label, polarity in ((1, POSITIVE), (-1, NEGATIVE)):
            part = self.sl(within=s, label_filter=label)
            if len(part):
                terms.append(RateTerm(len(part) / len(s), polarity, part))
        if not terms:
            raise DataError(f"{self.spec.kind}: empty slice for {what}")
        return RateExpression(tuple(terms))

    def emit(self, expr: RateExpression, name: str):
        self.out.append(RateConstraint(expr, self.spec.policy, name))

    def at_least(self, x, ref, name):
        """x >= ref, loosened by the slack."""
        spec = self.spec
        if spec.slack_form == "additive":
            self.emit(ref - x - spec.slack, name)
        else:
            r = min(spec.slack, 1.0 / spec.slack)
            self.emit(ref * r - x, name)

    def at_most(self, x, ref, name):
        spec = self.spec
        if spec.slack_form == "additive":
            self.emit(x - ref - spec.slack, name)
        else:
            r = max(spec.slack, 1.0 / spec.slack)
            self.emit(x - ref * r, name)

    def equal(self, x, ref, name):
        self.at_most(x, ref, name + ":upper")
        self.at_least(x, ref, name + ":lower")


def build_goal(spec: GoalSpec, dataset: Dataset) -> list:
    """Expand a goal into a list of constraints, each meaning ``value <= 0``."""
    b = _Builder(spec, dataset)
    kind = spec.kind
    if kind in NEEDS_BASELINE and not dataset.has_baseline:
        raise DataError(f"{kind} needs baseline predictions")

    if spec.groups:
        groups = list(spec.groups)
        for g in groups:
            if g not in dataset.group_catalog:
                raise DataError(f"unknown group id {g!r}")
    elif kind in GROUP_GOALS:
        groups = list(dataset.group_catalog)
        if not groups:
            raise DataError(f"{kind} needs at least one group")
    elif kind == "steering_min_accuracy":
        raise DataError("steering_min_accuracy needs the steering group id")
    else:
        groups = [None]

    everything = data_mod.full_slice(dataset)
    kappa = spec.bound

    for g in groups:
        label = "all" if g is None else g
        base = everything if g is None else b.nonempty(b.sl(group_filter=g), f"group {g!r}")
        tag = f"{kind}[{label}]"

        if kind == "coverage":
            b.at_most(b.rate(base), kappa, tag)
        elif kind == "min_coverage":
            b.at_least(b.rate(base), kappa, tag)
        elif kind == "statistical_parity":
            if spec.aux.get("pairwise"):
                for other in groups:
                    if other != g:
                        oslice = b.nonempty(b.sl(group_filter=other), f"group {other!r}")
                        b.at_most(b.rate(base), b.rate(oslice), f"{kind}[{g}-{other}]")
            else:
                b.equal(b.rate(base), b.rate(everything), tag)
        elif kind == "no_lost_benefits":
            kept = b.sl(within=base, baseline_filter=1)
            b.at_least(b.rate(base), len(kept) / len(base), tag)
        elif kind == "accurate_coverage":
            pos = b.sl(within=base, label_filter=1)
            b.equal(b.rate(base), len(pos) / len(base), tag)
        elif kind == "equal_opportunity":
            gp = b.nonempty(b.sl(within=base, label_filter=1), f"{label}[y=1]")
            allp = b.nonempty(b.sl(label_filter=1), "D[y=1]")
            if spec.aux.get("two_sided"):
                b.equal(b.rate(gp), b.rate(allp), tag)
            else:
                b.at_least(b.rate(gp), b.rate(allp), tag)
        elif kind == "equal_odds":
            for y, side in ((1, "tpr"), (-1, "fpr")):
                gs = b.nonempty(b.sl(within=base, label_filter=y), f"{label}[y={y}]")
                alls = b.nonempty(b.sl(label_filter=y), f"D[y={y}]")
                b.equal(b.rate(gs), b.rate(alls), f"{tag}:{side}")
        elif kind == "equal_accuracy":
            b.equal(b.accuracy(base, label), b.accuracy(everything, "all"), tag)
        elif kind in ("min_accuracy", "accuracy_lb", "steering_min_accuracy"):
            b.at_least(b.accuracy(base, label), kappa, tag)
        elif kind == "not_worse_off":
            agree = b.sl(within=base, baseline_agreement_filter="agree")
            b.at_least(b.accuracy(base, label), len(agree) / len(base), tag)
        elif kind == "min_recall":
            gp = b.nonempty(b.sl(within=base, label_filter=1), f"{label}[y=1]")
            b.at_least(b.rate(gp), kappa, tag)
        elif kind == "precision_lb":
            # c+(S[y=1]) >= kappa * c+(S), in counts
            gp = b.nonempty(b.sl(within=base, label_filter=1), f"{label}[y=1]")
            b.at_least(b.rate(gp, coefficient=len(gp)), b.rate(base, coefficient=kappa * len(base)), tag)
        elif kind == "churn_ub":
            terms = []
            for h, polarity in ((-1, POSITIVE), (1, NEGATIVE)):
                part = b.sl(within=base, baseline_filter=h)
                if len(part):
                    terms.append(RateTerm(len(part) / len(base), polarity, part))
            if not terms:
                raise DataError(f"{tag}: empty slice")
            b.at_most(RateExpression(tuple(terms)), kappa, tag)
        elif kind == "loss_only_churn_ub":
            terms = []
            for h, polarity in ((-1, POSITIVE), (1, NEGATIVE)):
                part = b.sl(within=base, baseline_filter=h, label_filter=h)
                if len(part):
                    terms.append(RateTerm(len(part) / len(base), polarity, part))
            if not terms:
                # nothing the baseline got right can be lost
                b.at_most(RateExpression((RateTerm(0.0, POSITIVE, base),)), kappa, tag)
            else:
                b.at_most(RateExpression(tuple(terms)), kappa, tag)
        elif kind == "wlr_lb":
            # wins - kappa * losses >= 0, in counts
            def counts(pairs):
                terms = []
                for (h, y), polarity in pairs:
                    part = b.sl(within=base, baseline_filter=h, label_filter=y)
                    if len(part):
                        terms.append(RateTerm(float(len(part)), polarity, part))
                return terms

            wins = counts((((-1, 1), POSITIVE), ((1, -1), NEGATIVE)))
            losses = counts((((-1, -1), POSITIVE), ((1, 1), NEGATIVE)))
            if not wins or not losses:
                raise DataError(f"{tag}: no examples where the baseline can win or lose")
            b.at_least(RateExpression(tuple(wins)), RateExpression(tuple(losses)) * kappa, tag)
        elif kind == "auc_lb":
            L, J = int(spec.aux.get("L", 10)), int(spec.aux.get("J", 10))
            if L < 1 or J < 1:
                raise DataError("auc_lb needs L >= 1 and J >= 1")
            pos = b.nonempty(b.sl(within=base, label_filter=1), f"{label}[y=1]")
            neg = b.nonempty(b.sl(within=base, label_filter=-1), f"{label}[y=-1]")
            if spec.slack_form == "additive":
                ref = kappa - spec.slack
            else:
                ref = kappa * min(spec.slack, 1.0 / spec.slack)
            b.out.append(AucConstraint(pos, neg, L, J, ref, spec.policy, tag))
        else:  # pragma: no cover - guarded by GoalSpec
            raise ValueError(kind)
    return b.out


def build_goals(specs: Sequence[GoalSpec], dataset: Dataset) -> list:
    out = []
    for spec in specs:
        out.extend(build_goal(spec, dataset))
    return out
