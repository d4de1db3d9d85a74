"""Labeled datasets with group memberships, baseline predictions and slices.

Labels and baseline predictions are stored as -1/+1 regardless of how the
source file encodes them. Slices are sorted index arrays into one dataset.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

GROUP_SEP = "|"


class DataError(ValueError):
    """Raised for malformed datasets, schemas and slice requests."""


@dataclass(frozen=True)
class Example:
    features: np.ndarray
    label: int
    groups: frozenset
    baseline: int | None = None
    weight: float = 1.0


@dataclass(frozen=True, eq=False)
class Dataset:
    """Column-oriented dataset; ``examples`` gives the row view.

    ``groups[i]`` is the set of group ids of example ``i``; ``baseline`` is
    ``None`` when no fixed reference classifier is attached.
    """

    features: np.ndarray
    labels: np.ndarray
    groups: tuple
    group_catalog: tuple
    baseline: np.ndarray | None = None
    weights: np.ndarray | None = None

    def __post_init__(self):
        features = np.asarray(self.features, dtype=float)
        if features.ndim != 2 or features.shape[0] == 0:
            raise DataError("empty dataset")
        n = features.shape[0]
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.shape != (n,):
            raise DataError("labels must have one entry per example")
        if not np.all(np.isin(labels, (-1, 1))):
            raise DataError("labels must be -1 or +1")
        if not np.all(np.isfinite(features)):
            raise DataError("features must be finite")
        groups = tuple(frozenset(g) for g in self.groups)
        if len(groups) != n:
            raise DataError("groups must have one entry per example")
        catalog = tuple(self.group_catalog)
        unknown = set().union(*groups) - set(catalog)
        if unknown:
            raise DataError(f"group ids missing from catalog: {sorted(unknown)}")
        baseline = self.baseline
        if baseline is not None:
            baseline = np.asarray(baseline, dtype=np.int64)
            if baseline.shape != (n,) or not np.all(np.isin(baseline, (-1, 1))):
                raise DataError("baseline predictions must be -1 or +1, one per example")
            baseline.setflags(write=False)
        weights = np.ones(n) if self.weights is None else np.asarray(self.weights, dtype=float)
        if weights.shape != (n,) or np.any(weights < 0) or not np.all(np.isfinite(weights)):
            raise DataError("weights must be finite and nonnegative, one per example")
        for arr in (features, labels, weights):
            arr.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "groups", groups)
        object.__setattr__(self, "group_catalog", catalog)
        object.__setattr__(self, "baseline", baseline)
        object.__setattr__(self, "weights", weights)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def has_baseline(self) -> bool:
        return self.baseline is not None

    @property
    def examples(self) -> Iterator[Example]:
        for i in range(len(self)):
            yield Example(
                features=self.features[i],
                label=int(self.labels[i]),
                groups=self.groups[i],
                baseline=None if self.baseline is None else int(self.baseline[i]),
                weight=float(self.weights[i]),
            )

    @cached_property
    def fingerprint(self) -> str:
        h = hashlib.sha1()
        h.update(self.features.tobytes())
        h.update(self.labels.tobytes())
        h.update(repr(self.groups).encode())
        if self.baseline is not None:
            h.update(self.baseline.tobytes())
        h.update(self.weights.tobytes())
        return h.hexdigest()[:16]

    def group_mask(self, group: str) -> np.ndarray:
        if group not in self.group_catalog:
            raise DataError(f"unknown group id {group!r}")
        return np.fromiter((group in g for g in self.groups), dtype=bool, count=len(self))

    def subset(self, indices: Sequence[int]) -> "Dataset":
        """A new dataset holding the given rows (in the given order)."""
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            features=self.features[idx],
            labels=self.labels[idx],
            groups=tuple(self.groups[i] for i in idx),
            group_catalog=self.group_catalog,
            baseline=None if self.baseline is None else self.baseline[idx],
            weights=self.weights[idx],
        )

    def to_bytes(self) -> bytes:
        """Canonical byte serialization (used for determinism checks)."""
        parts = [self.features.tobytes(), self.labels.tobytes(), self.weights.tobytes(),
                 repr([sorted(g) for g in self.groups]).encode(), repr(self.group_catalog).encode()]
        if self.baseline is not None:
            parts.append(self.baseline.tobytes())
        return b"\x00".join(parts)


@dataclass(frozen=True)
class SlicePredicate:
    """Conjunction of optional filters; an absent filter matches everything."""

    label_filter: int | None = None
    group_filter: str | None = None
    baseline_filter: int | None = None
    baseline_agreement_filter: str | None = None  # "agree" (h = y) or "disagree"

    def __and__(self, other: "SlicePredicate") -> "SlicePredicate":
        merged = {}
        for name in ("label_filter", "group_filter", "baseline_filter", "baseline_agreement_filter"):
            a, b = getattr(self, name), getattr(other, name)
            if a is not None and b is not None and a != b:
                raise DataError(f"conflicting {name}: {a!r} vs {b!r}")
            merged[name] = a if a is not None else b
        return SlicePredicate(**merged)


@dataclass(frozen=True, eq=False)
class Slice:
    dataset_id: str
    size_of_dataset: int
    indices: np.ndarray = field(repr=False)

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.ndim != 1:
            raise DataError("slice indices must be one-dimensional")
        if idx.size and (idx[0] < 0 or idx[-1] >= self.size_of_dataset or np.any(np.diff(idx) <= 0)):
            raise DataError("slice indices must be strictly increasing and in bounds")
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)

    def __len__(self) -> int:
        return int(self.indices.size)

    def __eq__(self, other):
        return (isinstance(other, Slice) and self.dataset_id == other.dataset_id
                and np.array_equal(self.indices, other.indices))

    def __hash__(self):
        return hash((self.dataset_id, self.indices.tobytes()))

    def mask(self) -> np.ndarray:
        m = np.zeros(self.size_of_dataset, dtype=bool)
        m[self.indices] = True
        return m


def full_slice(dataset: Dataset) -> Slice:
    return Slice(dataset.fingerprint, len(dataset), np.arange(len(dataset)))


def slice(dataset: Dataset, predicate: SlicePredicate, within: Slice | None = None) -> Slice:
    """Indices of the examples satisfying every filter of ``predicate``.

    ``within`` restricts the search to an existing slice of the same dataset.
    """
    keep = np.ones(len(dataset), dtype=bool)
    if predicate.label_filter is not None:
        if predicate.label_filter not in (-1, 1):
            raise DataError("label_filter must be -1 or +1")
        keep &= dataset.labels == predicate.label_filter
    if predicate.group_filter is not None:
        keep &= dataset.group_mask(predicate.group_filter)
    if predicate.baseline_filter is not None or predicate.baseline_agreement_filter is not None:
        if dataset.baseline is None:
            raise DataError("baseline filter on a dataset without baseline predictions")
        if predicate.baseline_filter is not None:
            keep &= dataset.baseline == predicate.baseline_filter
        agreement = predicate.baseline_agreement_filter
        if agreement == "agree":
            keep &= dataset.baseline == dataset.labels
        elif agreement == "disagree":
            keep &= dataset.baseline != dataset.labels
        elif agreement is not None:
            raise DataError(f"baseline_agreement_filter must be 'agree' or 'disagree', got {agreement!r}")
    if within is not None:
        if within.dataset_id != dataset.fingerprint:
            raise DataError("slice belongs to a different dataset")
        keep &= within.mask()
    return Slice(dataset.fingerprint, len(dataset), np.flatnonzero(keep))


# -- CSV ---------------------------------------------------------------------


@dataclass(frozen=True)
class CsvSchema:
    """Column roles of a CSV file.

    The label column (and the baseline column, if any) must hold either
    ``positive_value`` or ``negative_value``. Group columns hold group ids,
    several per cell separated by ``|``; an empty cell means no group.
    """

    label: str
    features: tuple
    positive_value: str = "1"
    negative_value: str = "0"
    groups: tuple = ()
    baseline: str | None = None
    weight: str | None = None


CANONICAL_LABEL = "label"
CANONICAL_GROUPS = "groups"
CANONICAL_BASELINE = "baseline"
CANONICAL_WEIGHT = "weight"


def canonical_schema(feature_dim: int, baseline: bool = True) -> CsvSchema:
    """Schema of files produced by :func:`write_csv`."""
    return CsvSchema(
        label=CANONICAL_LABEL,
        features=tuple(f"x{j}" for j in range(feature_dim)),
        positive_value="1",
        negative_value="-1",
        groups=(CANONICAL_GROUPS,),
        baseline=CANONICAL_BASELINE if baseline else None,
        weight=CANONICAL_WEIGHT,
    )


def load_csv(path, schema: CsvSchema) -> Dataset:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames
        if not header:
            raise DataError("empty dataset")
        needed = [schema.label, *schema.features, *schema.groups]
        needed += [c for c in (schema.baseline, schema.weight) if c is not None]
        missing = [c for c in needed if c not in header]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        if not schema.features:
            raise DataError("schema must name at least one feature column")
        mapping = {schema.positive_value: 1, schema.negative_value: -1}

        def encode(value, row_no, column):
            try:
                return mapping[value.strip()]
            except KeyError:
                raise DataError(
                    f"{path}: row {row_no}, column {column!r}: value {value!r} is neither "
                    f"{schema.positive_value!r} nor {schema.negative_value!r}"
                ) from None

        feats, labels, groups, baseline, weights = [], [], [], [], []
        catalog: dict = {}
        for row_no, row in enumerate(reader, start=1):
            x = []
            for col in schema.features:
                try:
                    x.append(float(row[col]))
                except (TypeError, ValueError):
                    raise DataError(f"{path}: row {row_no}, column {col!r}: non-numeric value {row[col]!r}") from None
            feats.append(x)
            labels.append(encode(row[schema.label], row_no, schema.label))
            g = set()
            for col in schema.groups:
                g.update(s.strip() for s in (row[col] or "").split(GROUP_SEP) if s.strip())
            for gid in sorted(g):
                catalog.setdefault(gid, None)
            groups.append(frozenset(g))
            if schema.baseline is not None:
                baseline.append(encode(row[schema.baseline], row_no, schema.baseline))
            if schema.weight is not None:
                try:
                    weights.append(float(row[schema.weight]))
                except (TypeError, ValueError):
                    raise DataError(f"{path}: row {row_no}, column {schema.weight!r}: non-numeric weight") from None
    if not feats:
        raise DataError("empty dataset")
    return Dataset(
        features=np.array(feats, dtype=float),
        labels=np.array(labels),
        groups=tuple(groups),
        group_catalog=tuple(catalog),
        baseline=np.array(baseline) if schema.baseline is not None else None,
        weights=np.array(weights) if schema.weight is not None else None,
    )


def write_csv(dataset: Dataset, path) -> CsvSchema:
    """Write ``dataset`` in the canonical layout and return its schema."""
    schema = canonical_schema(dataset.feature_dim, dataset.has_baseline)
    columns = [*schema.features, schema.label, CANONICAL_GROUPS]
    if dataset.has_baseline:
        columns.append(CANONICAL_BASELINE)
    columns.append(CANONICAL_WEIGHT)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for i in range(len(dataset)):
            row = [repr(float(v)) for v in dataset.features[i]]
            row.append(str(int(dataset.labels[i])))
            # catalog order keeps the group catalog stable across a round trip
            row.append(GROUP_SEP.join(g for g in dataset.group_catalog if g in dataset.groups[i]))
            if dataset.has_baseline:
                row.append(str(int(dataset.baseline[i])))
            row.append(repr(float(dataset.weights[i])))
            writer.writerow(row)
    return schema


# -- synthetic generators ----------------------------------------------------


def synth_two_group(n: int, separation: float, group_skew: float, seed: int) -> Dataset:
    """Two Gaussian class clouds in the plane plus a group-A indicator feature.

    Each example joins group "A" or "B" with probability 1/2. Group A is
    positive with probability ``group_skew``, group B with probability 1/2,
    so a classifier fit to the labels gives A a higher positive rate. The
    class means sit at distance ``separation`` along the diagonal with unit
    isotropic noise. Features are ``(x1, x2, 1[A])``; the baseline classifier
    thresholds the projection on the class-mean direction at zero.
    """
    if n < 2:
        raise DataError("n must be at least 2")
    if not separation > 0:
        raise DataError("separation must be positive")
    if not 0.0 <= group_skew <= 1.0:
        raise DataError("group_skew must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    in_a = rng.random(n) < 0.5
    p_pos = np.where(in_a, group_skew, 0.5)
    labels = np.where(rng.random(n) < p_pos, 1, -1)
    direction = np.array([1.0, 1.0]) / np.sqrt(2.0)
    clouds = labels[:, None] * (separation / 2.0) * direction + rng.standard_normal((n, 2))
    features = np.column_stack([clouds, in_a.astype(float)])
    baseline = np.where(clouds @ direction >= 0.0, 1, -1)
    groups = tuple(frozenset({"A"}) if a else frozenset({"B"}) for a in in_a)
    return Dataset(features, labels, groups, ("A", "B"), baseline=baseline)


def synth_compas_like(n: int, seed: int) -> Dataset:
    """Nonlinearly separable data with four overlapping protected groups.

    Every example belongs to one race group ("black"/"white") and one gender
    group ("female"/"male"). The label depends on a ring-shaped boundary
    whose radius shifts with the race group, so per-group true positive
    rates of a fitted model differ. Features are four Gaussian coordinates
    followed by the two group indicators.
    """
    if n < 2:
        raise DataError("n must be at least 2")
    rng = np.random.default_rng(seed)
    black = rng.random(n) < 0.45
    female = rng.random(n) < 0.3
    z = rng.standard_normal((n, 4))
    radius = np.sqrt(z[:, 0] ** 2 + z[:, 1] ** 2)
    logits = 2.0 * (radius - 1.1 - 0.35 * black) + 0.5 * z[:, 2] + 0.3 * rng.standard_normal(n)
    labels = np.where(logits >= 0, 1, -1)
    features = np.column_stack([z, black.astype(float), female.astype(float)])
    groups = tuple(
        frozenset({"black" if b else "white", "female" if f else "male"}) for b, f in zip(black, female)
    )
    return Dataset(features, labels, groups, ("black", "white", "female", "male"))


def stratified_split(dataset: Dataset, fractions: Sequence[float], seed: int) -> list:
    """Shuffle each label class with ``seed`` and cut it by ``fractions``."""
    fractions = np.asarray(fractions, dtype=float)
    if np.any(fractions <= 0) or abs(fractions.sum() - 1.0) > 1e-9:
        raise DataError("split fractions must be positive and sum to 1")
    rng = np.random.default_rng(seed)
    parts = [[] for _ in fractions]
    for label in (-1, 1):
        idx = np.flatnonzero(dataset.labels == label)
        idx = idx[rng.permutation(idx.size)]
        cuts = np.round(np.cumsum(fractions)[:-1] * idx.size).astype(int)
        for k, chunk in enumerate(np.split(idx, cuts)):
            parts[k].extend(chunk.tolist())
    out = []
    for k, part in enumerate(parts):
        if not part:
            raise DataError(f"split part {k} is empty")
        out.append(dataset.subset(np.sort(part)))
    return out
