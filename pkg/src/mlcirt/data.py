"""Domain types, CSV ingestion and frequency aggregation."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)


class DataError(ValueError):
    """Raised when input data or a schema fails validation."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Criterion:
    """A grouping criterion for DIF, e.g. gender with categories (M, F).

    The first category is the reference group.
    """

    name: str
    categories: tuple[str, ...]

    def __post_init__(self):
        if len(self.categories) < 2:
            raise DataError(f"criterion {self.name!r} needs at least 2 categories")
        if len(set(self.categories)) != len(self.categories):
            raise DataError(f"criterion {self.name!r} has duplicate categories")

    @property
    def n_categories(self) -> int:
        return len(self.categories)


@dataclass(frozen=True, eq=False)
class ResponseDataset:
    """Binary responses of ``n`` subjects to ``r`` items plus group memberships.

    Attributes:
        responses: (n, r) array of 0/1.
        item_names: r column names.
        criteria: DIF grouping criteria, possibly empty.
        memberships: (n, Q) array of category indices, one column per criterion.
    """

    responses: np.ndarray
    item_names: tuple[str, ...]
    criteria: tuple[Criterion, ...] = ()
    memberships: np.ndarray | None = None

    def __post_init__(self):
        y = np.asarray(self.responses)
        if y.ndim != 2:
            raise DataError("responses must be a 2-d matrix")
        if y.size and not np.isin(y, (0, 1)).all():
            i, j = np.argwhere(~np.isin(y, (0, 1)))[0]
            raise DataError(f"non-binary response {y[i, j]!r} at row {i + 1}, item {j + 1}")
        object.__setattr__(self, "responses", _frozen(y.astype(np.uint8)))
        if len(self.item_names) != y.shape[1]:
            raise DataError("item_names length does not match the number of columns")
        object.__setattr__(self, "item_names", tuple(self.item_names))
        object.__setattr__(self, "criteria", tuple(self.criteria))
        q = len(self.criteria)
        if self.memberships is None:
            m = np.zeros((y.shape[0], q), dtype=np.int64)
        else:
            m = np.asarray(self.memberships, dtype=np.int64).reshape(y.shape[0], q)
        for col, crit in enumerate(self.criteria):
            if m.size and (m[:, col].min() < 0 or m[:, col].max() >= crit.n_categories):
                raise DataError(f"category index out of range for criterion {crit.name!r}")
        object.__setattr__(self, "memberships", _frozen(m))

    @property
    def n_subjects(self) -> int:
        return self.responses.shape[0]

    @property
    def n_items(self) -> int:
        return self.responses.shape[1]

    @property
    def n_categories(self) -> tuple[int, ...]:
        return tuple(c.n_categories for c in self.criteria)

    def __eq__(self, other):
        if not isinstance(other, ResponseDataset):
            return NotImplemented
        return (
            self.item_names == other.item_names
            and self.criteria == other.criteria
            and np.array_equal(self.responses, other.responses)
            and np.array_equal(self.memberships, other.memberships)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class FrequencyTable:
    """Counts ``n(g, y)`` of (group profile, response pattern) pairs.

    Entries are sorted lexicographically by (profile, pattern); only observed
    pairs are stored.

    Attributes:
        profiles: (M, Q) category indices of each entry.
        patterns: (M, r) 0/1 response configurations.
        counts: (M,) positive integer frequencies.
        n_categories: h_q for each criterion.
        subject_entry: optional (n,) map from subject to its entry.
    """

    profiles: np.ndarray
    patterns: np.ndarray
    counts: np.ndarray
    n_categories: tuple[int, ...] = ()
    subject_entry: np.ndarray | None = None
    profile_keys: np.ndarray = field(init=False, repr=False)
    profile_index: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        profiles = np.asarray(self.profiles, dtype=np.int64).reshape(len(self.counts), -1)
        patterns = np.asarray(self.patterns, dtype=np.uint8)
        counts = np.asarray(self.counts, dtype=np.int64)
        if (counts <= 0).any():
            raise DataError("frequency counts must be positive")
        keys, index = np.unique(profiles, axis=0, return_inverse=True)
        object.__setattr__(self, "profiles", _frozen(profiles))
        object.__setattr__(self, "patterns", _frozen(patterns))
        object.__setattr__(self, "counts", _frozen(counts))
        object.__setattr__(self, "n_categories", tuple(int(h) for h in self.n_categories))
        object.__setattr__(self, "profile_keys", _frozen(keys.reshape(len(keys), -1)))
        object.__setattr__(self, "profile_index", _frozen(np.asarray(index).reshape(-1)))
        if self.subject_entry is not None:
            object.__setattr__(self, "subject_entry", _frozen(np.asarray(self.subject_entry)))

    @property
    def n_subjects(self) -> int:
        return int(self.counts.sum())

    @property
    def n_items(self) -> int:
        return self.patterns.shape[1]

    @property
    def n_entries(self) -> int:
        return len(self.counts)

    def expand(self) -> tuple[np.ndarray, np.ndarray]:
        """Return (profiles, patterns) with one row per subject."""
        idx = np.repeat(np.arange(self.n_entries), self.counts)
        return self.profiles[idx], self.patterns[idx]


def aggregate(data: ResponseDataset) -> FrequencyTable:
    """Collapse subjects into (group profile, pattern) frequencies."""
    q = len(data.criteria)
    rows = np.hstack([data.memberships, data.responses.astype(np.int64)])
    if rows.shape[0] == 0:
        raise DataError("dataset has no subjects")
    keys, inverse, counts = np.unique(rows, axis=0, return_inverse=True, return_counts=True)
    return FrequencyTable(
        profiles=keys[:, :q],
        patterns=keys[:, q:],
        counts=counts,
        n_categories=data.n_categories,
        subject_entry=np.asarray(inverse).reshape(-1),
    )


@dataclass(frozen=True)
class CriterionColumn:
    column: str
    reference: str | None = None
    order: tuple[str, ...] | None = None


@dataclass(frozen=True)
class Schema:
    """Column roles of an input CSV."""

    items: tuple[str, ...]
    criteria: tuple[CriterionColumn, ...] = ()

    @classmethod
    def from_dict(cls, d: dict) -> "Schema":
        if "items" not in d or not d["items"]:
            raise DataError("schema must list at least one item column")
        crits = []
        for c in d.get("criteria", []):
            if isinstance(c, str):
                c = {"column": c}
            order = c.get("categories")
            crits.append(
                CriterionColumn(c["column"], c.get("reference"), tuple(order) if order else None)
            )
        return cls(tuple(d["items"]), tuple(crits))

    @classmethod
    def load(cls, path) -> "Schema":
        path = Path(path)
        if not path.is_file():
            raise DataError(f"schema file not found: {path}")
        with open(path, encoding="utf-8") as fh:
            try:
                return cls.from_dict(json.load(fh))
            except json.JSONDecodeError as exc:
                raise DataError(f"schema is not valid JSON: {exc}") from exc

    def to_dict(self) -> dict:
        out = []
        for c in self.criteria:
            d = {"column": c.column}
            if c.reference is not None:
                d["reference"] = c.reference
            if c.order is not None:
                d["categories"] = list(c.order)
            out.append(d)
        return {"items": list(self.items), "criteria": out}


def _parse_response(raw: str, row: int, col: str, threshold: float | None):
    raw = raw.strip()
    if raw == "":
        return None
    if threshold is not None:
        try:
            return 1 if float(raw) >= threshold else 0
        except ValueError:
            raise DataError(f"non-numeric response {raw!r} at row {row}, column {col!r}") from None
    if raw in ("0", "1"):
        return int(raw)
    raise DataError(f"non-binary response {raw!r} at row {row}, column {col!r}")


def ingest_csv(
    path,
    schema: Schema,
    *,
    drop_incomplete: bool = False,
    dichotomize_threshold: float | None = None,
) -> ResponseDataset:
    """Read a response CSV into a validated :class:`ResponseDataset`.

    Criterion categories are numbered by first appearance unless the schema
    fixes an explicit order; the schema's reference label (default: first
    category) is moved to index 0.

    Args:
        path: CSV file with a header row.
        schema: column roles.
        drop_incomplete: drop rows with an empty response or criterion cell
            instead of rejecting them.
        dichotomize_threshold: if given, numeric responses ``>= t`` become 1
            and the rest 0.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"data file not found: {path}")
    text = path.read_bytes().decode("utf-8-sig")
    reader = csv.reader(io.StringIO(text, newline=""))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise DataError(f"empty file: {path}") from None
    missing = [c for c in schema.items + tuple(c.column for c in schema.criteria) if c not in header]
    if missing:
        raise DataError(f"columns missing from {path.name}: {', '.join(missing)}")
    item_pos = [header.index(c) for c in schema.items]
    crit_pos = [header.index(c.column) for c in schema.criteria]

    responses, labels = [], []
    dropped = 0
    for lineno, rec in enumerate(reader, start=2):
        if not rec or all(not cell.strip() for cell in rec):
            continue
        if len(rec) < len(header):
            raise DataError(f"row {lineno} has {len(rec)} fields, expected {len(header)}")
        ys = [_parse_response(rec[p], lineno, schema.items[i], dichotomize_threshold)
              for i, p in enumerate(item_pos)]
        gs = [rec[p].strip() for p in crit_pos]
        if any(v is None for v in ys) or any(g == "" for g in gs):
            if drop_incomplete:
                dropped += 1
                continue
            raise DataError(f"missing value in row {lineno}")
        responses.append(ys)
        labels.append(gs)
    if dropped:
        logger.warning("dropped %d incomplete rows", dropped)
    if not responses:
        raise DataError(f"no data rows in {path}")

    criteria, memberships = [], np.zeros((len(labels), len(crit_pos)), dtype=np.int64)
    for q, cc in enumerate(schema.criteria):
        column = [row[q] for row in labels]
        if cc.order is not None:
            cats = list(cc.order)
            unknown = sorted(set(column) - set(cats))
            if unknown:
                raise DataError(f"unknown category {unknown[0]!r} in column {cc.column!r}")
        else:
            cats = list(dict.fromkeys(column))
        if cc.reference is not None:
            if cc.reference not in cats:
                raise DataError(f"reference {cc.reference!r} not found in column {cc.column!r}")
            cats.remove(cc.reference)
            cats.insert(0, cc.reference)
        lookup = {c: i for i, c in enumerate(cats)}
        memberships[:, q] = [lookup[v] for v in column]
        criteria.append(Criterion(cc.column, tuple(cats)))

    return ResponseDataset(
        responses=np.array(responses, dtype=np.uint8),
        item_names=schema.items,
        criteria=tuple(criteria),
        memberships=memberships,
    )


def dataset_csv(data: ResponseDataset) -> str:
    """The ingestible CSV layout of ``data`` as text."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(data.item_names) + [c.name for c in data.criteria])
    for y, m in zip(data.responses, data.memberships):
        w.writerow([int(v) for v in y] + [c.categories[g] for c, g in zip(data.criteria, m)])
    return buf.getvalue()


def dataset_schema(data: ResponseDataset) -> Schema:
    return Schema(
        items=data.item_names,
        criteria=tuple(
            CriterionColumn(c.name, c.categories[0], c.categories) for c in data.criteria
        ),
    )


def write_csv(data: ResponseDataset, path) -> Schema:
    """Write ``data`` in the ingestible CSV layout and return its schema."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(dataset_csv(data))
    return dataset_schema(data)


def default_item_names(r: int) -> tuple[str, ...]:
    return tuple(f"i{j + 1}" for j in range(r))


def make_dataset(
    responses: Sequence[Sequence[int]],
    memberships: Sequence[Sequence[int]] | None = None,
    criteria: Sequence[Criterion] = (),
    item_names: Sequence[str] | None = None,
) -> ResponseDataset:
    """Convenience constructor used by tests and the simulator."""
    y = np.asarray(responses)
    return ResponseDataset(
        responses=y,
        item_names=tuple(item_names) if item_names else default_item_names(y.shape[1]),
        criteria=tuple(criteria),
        memberships=None if memberships is None else np.asarray(memberships),
    )
