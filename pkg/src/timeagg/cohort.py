"""Irregular visit records, backward-anchored windowing, imputation, splitting.

Window ``w`` of ``W`` windows of length ``L`` covers the half-open day interval
``(index_day - (W - w) * L, index_day - (W - w - 1) * L]`` so the last window
holds the index visit and a boundary day belongs to the later window.  Visits
older than ``index_day - W * L`` are discarded.
"""

from __future__ import annotations

import csv
import enum
import json
import math
from fractions import Fraction
from dataclasses import dataclass, field

import numpy as np

DISCARDED = -1
STD_FLOOR = 1e-12


class DataError(ValueError):
    """Malformed cohort, schema, or split input."""


class Kind(str, enum.Enum):
    CONTINUOUS = "continuous"
    BINARY = "binary"


class Outcome(str, enum.Enum):
    CONTROLLED = "controlled"
    UNCONTROLLED = "uncontrolled"

    @property
    def label(self):
        return int(self is Outcome.UNCONTROLLED)


@dataclass(frozen=True)
class VariableSpec:
    name: str
    kind: Kind
    column_index: int


@dataclass
class Visit:
    day: int
    observations: dict[str, float] = field(default_factory=dict)


@dataclass
class Patient:
    id: str
    visits: list[Visit]
    outcome: Outcome

    @property
    def index_day(self):
        return self.visits[-1].day


@dataclass
class Cohort:
    schema: list[VariableSpec]
    patients: list[Patient]

    def names(self):
        return [v.name for v in self.schema]


@dataclass
class WindowGrid:
    patient_id: str
    values: np.ndarray  # (W, F); NaN where unobserved before imputation
    mask: np.ndarray  # (W, F) bool, True where observed
    outcome: int


@dataclass
class StandardizationStats:
    mean: dict[str, float]
    std: dict[str, float]

    def to_dict(self):
        return {"mean": dict(self.mean), "std": dict(self.std)}

    @classmethod
    def from_dict(cls, d):
        return cls(dict(d["mean"]), dict(d["std"]))


def make_schema(pairs):
    """Build a schema from ``(name, kind)`` pairs, validating uniqueness."""
    schema = []
    seen = set()
    for i, (name, kind) in enumerate(pairs):
        if name in seen:
            raise DataError(f"duplicate variable {name!r} in schema")
        seen.add(name)
        try:
            kind = Kind(kind)
        except ValueError:
            raise DataError(f"variable {name!r}: unknown kind {kind!r}") from None
        schema.append(VariableSpec(name, kind, i))
    return schema


def validate_patient(patient: Patient, schema):
    kinds = {v.name: v.kind for v in schema}
    if not patient.visits:
        raise DataError(f"patient {patient.id}: no visits")
    days = [v.day for v in patient.visits]
    if days[0] < 0 or any(b <= a for a, b in zip(days, days[1:])):
        raise DataError(f"patient {patient.id}: visit days must be >= 0 and strictly increasing")
    for visit in patient.visits:
        for name, value in visit.observations.items():
            if name not in kinds:
                raise DataError(f"patient {patient.id}: unknown variable {name!r}")
            if not math.isfinite(value):
                raise DataError(f"patient {patient.id}: non-finite {name} on day {visit.day}")
            if kinds[name] is Kind.BINARY and value not in (0, 1):
                raise DataError(f"patient {patient.id}: binary {name} = {value}")


def assign_windows(patient: Patient, window_len=100, n_windows=3):
    """Window index for each visit (in visit order); ``DISCARDED`` when too old."""
    out = []
    for visit in patient.visits:
        age = patient.index_day - visit.day
        # age in [k*L, (k+1)*L) -> counted k windows back from the last one
        back = age // window_len
        out.append(n_windows - 1 - back if back < n_windows else DISCARDED)
    return out


def aggregate_window(visits, schema):
    """Latest observed value per variable; absent variables are left out."""
    out = {}
    for visit in sorted(visits, key=lambda v: v.day):
        for spec in schema:
            if spec.name in visit.observations:
                out[spec.name] = float(visit.observations[spec.name])
    return out


def build_grid(patient: Patient, schema, window_len=100, n_windows=3) -> WindowGrid:
    F = len(schema)
    values = np.full((n_windows, F), np.nan)
    buckets = [[] for _ in range(n_windows)]
    for visit, w in zip(patient.visits, assign_windows(patient, window_len, n_windows)):
        if w != DISCARDED:
            buckets[w].append(visit)
    for w, bucket in enumerate(buckets):
        for name, value in aggregate_window(bucket, schema).items():
            values[w, _column(schema, name)] = value
    return WindowGrid(patient.id, values, ~np.isnan(values), patient.outcome.label)


def _column(schema, name):
    for spec in schema:
        if spec.name == name:
            return spec.column_index
    raise DataError(f"unknown variable {name!r}")


def build_grids(cohort: Cohort, window_len=100, n_windows=3):
    return [build_grid(p, cohort.schema, window_len, n_windows) for p in cohort.patients]


def fit_stats(grids, schema) -> StandardizationStats:
    """Mean/std of observed continuous cells (all windows) in the given grids."""
    mean, std = {}, {}
    for spec in schema:
        if spec.kind is not Kind.CONTINUOUS:
            continue
        j = spec.column_index
        vals = np.concatenate([g.values[g.mask[:, j], j] for g in grids]) if grids else np.array([])
        if vals.size == 0:
            mean[spec.name], std[spec.name] = 0.0, 1.0
            continue
        s = float(vals.std())
        mean[spec.name] = float(vals.mean())
        std[spec.name] = s if s >= STD_FLOOR else 1.0
    return StandardizationStats(mean, std)


def impute(grid: WindowGrid, stats: StandardizationStats, schema) -> WindowGrid:
    """Forward-fill across windows, then training mean (continuous) or 0 (binary)."""
    values = grid.values.copy()
    for spec in schema:
        j = spec.column_index
        col = values[:, j]
        last = np.nan
        for w in range(len(col)):
            if np.isnan(col[w]):
                col[w] = last
            else:
                last = col[w]
        if spec.kind is Kind.CONTINUOUS:
            if spec.name not in stats.mean:
                raise DataError(f"no training statistics for {spec.name!r}")
            fill = stats.mean[spec.name]
        else:
            fill = 0.0
        col[np.isnan(col)] = fill
    return WindowGrid(grid.patient_id, values, grid.mask.copy(), grid.outcome)


def standardize(grids, stats: StandardizationStats, schema):
    out = []
    for g in grids:
        values = g.values.copy()
        for spec in schema:
            if spec.kind is not Kind.CONTINUOUS:
                continue
            if spec.name not in stats.mean or spec.name not in stats.std:
                raise DataError(f"no training statistics for {spec.name!r}")
            j = spec.column_index
            sd = stats.std[spec.name]
            sd = sd if sd >= STD_FLOOR else 1.0
            values[:, j] = (values[:, j] - stats.mean[spec.name]) / sd
        out.append(WindowGrid(g.patient_id, values, g.mask.copy(), g.outcome))
    return out


def prepare_grids(grids, stats, schema):
    """Impute then standardize."""
    return standardize([impute(g, stats, schema) for g in grids], stats, schema)


def grids_to_arrays(grids):
    if not grids:
        raise DataError("no patients")
    X = np.stack([g.values for g in grids]).astype(float)
    y = np.array([g.outcome for g in grids], dtype=float)
    return X, y


def _largest_remainder(total, fractions):
    quotas = [total * f for f in fractions]
    sizes = [math.floor(q) for q in quotas]
    remainders = [q - s for q, s in zip(quotas, sizes)]
    # ties go to the earlier split
    order = sorted(range(len(fractions)), key=lambda i: (-remainders[i], i))
    for i in order[: total - sum(sizes)]:
        sizes[i] += 1
    return sizes


def stratified_split(cohort: Cohort, fractions, seed=0):
    """Per-class seeded shuffle, apportioned with largest-remainder rounding.

    Overall split sizes are apportioned first; each split's class counts are
    then apportioned so that no split deviates from the global class
    proportion by more than one patient.
    """
    fractions = [float(f) for f in fractions]
    if not fractions or any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-6:
        raise DataError("split fractions must be positive and sum to 1")
    by_class = {}
    for p in cohort.patients:
        by_class.setdefault(p.outcome.label, []).append(p)
    classes = sorted(by_class)
    for c in classes:
        if len(by_class[c]) < len(fractions):
            raise DataError(f"outcome class {c} has {len(by_class[c])} patients, "
                            f"too few for {len(fractions)} splits")
    counts = _class_split_counts([len(by_class[c]) for c in classes], fractions)
    rng = np.random.default_rng(seed)
    splits = [[] for _ in fractions]
    for ci, c in enumerate(classes):
        members = by_class[c]
        order = rng.permutation(len(members))
        start = 0
        for s, size in enumerate(counts[ci]):
            splits[s].extend(members[i] for i in order[start:start + size])
            start += size
    rank = {p.id: i for i, p in enumerate(cohort.patients)}
    return [Cohort(cohort.schema, sorted(s, key=lambda p: rank[p.id])) for s in splits]


def _class_split_counts(class_sizes, fractions):
    """Integer matrix [class][split]: row sums are the class sizes, column sums
    the largest-remainder split sizes, and every cell is the floor or ceiling
    of ``split_size * class_size / total``."""
    total = sum(class_sizes)
    split_sizes = _largest_remainder(total, fractions)
    quota = [[Fraction(t * n, total) for t in split_sizes] for n in class_sizes]
    counts = [[math.floor(q) for q in row] for row in quota]
    row_need = [n - sum(r) for n, r in zip(class_sizes, counts)]
    col_need = [t - sum(r[s] for r in counts) for s, t in enumerate(split_sizes)]
    open_cells = {(c, s) for c, row in enumerate(quota) for s, q in enumerate(row)
                  if q != math.floor(q)}
    taken = set()
    for c, s in sorted(open_cells, key=lambda cs: (-(quota[cs[0]][cs[1]] % 1), cs)):
        if row_need[c] > 0 and col_need[s] > 0:
            taken.add((c, s))
            row_need[c] -= 1
            col_need[s] -= 1
    # the fractional parts form a feasible flow, so augmenting paths always exist
    for c0 in range(len(class_sizes)):
        while row_need[c0] > 0:
            path = _augmenting_path(c0, open_cells, taken, col_need, len(fractions))
            if path is None:
                raise DataError("cannot apportion classes across splits")
            for i, cell in enumerate(path):
                (taken.add if i % 2 == 0 else taken.discard)(cell)
            row_need[c0] -= 1
            col_need[path[-1][1]] -= 1
    for c, s in taken:
        counts[c][s] += 1
    return counts


def _augmenting_path(c0, open_cells, taken, col_need, n_splits):
    parent = {}
    frontier = [c0]
    seen_c, seen_s = {c0}, set()
    while frontier:
        nxt = []
        for c in frontier:
            for s in range(n_splits):
                if (c, s) not in open_cells or (c, s) in taken or s in seen_s:
                    continue
                seen_s.add(s)
                parent[s] = c
                if col_need[s] > 0:
                    path, cur = [], s
                    while True:
                        cc = parent[cur]
                        path.append((cc, cur))
                        if cc == c0:
                            return path[::-1]
                        prev_s = parent[("c", cc)]
                        path.append((cc, prev_s))
                        cur = prev_s
                for c2, s2 in taken:
                    if s2 == s and c2 not in seen_c:
                        seen_c.add(c2)
                        parent[("c", c2)] = s
                        nxt.append(c2)
        frontier = nxt
    return None


# ---------------------------------------------------------------- file formats

def read_schema(path):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read schema {path}: {exc}") from None
    if not isinstance(raw, list):
        raise DataError(f"schema {path}: expected a JSON list")
    try:
        return make_schema((d["name"], d["kind"]) for d in raw)
    except (KeyError, TypeError):
        raise DataError(f"schema {path}: entries need 'name' and 'kind'") from None


def write_schema(schema, path):
    with open(path, "w") as fh:
        json.dump([{"name": v.name, "kind": v.kind.value} for v in schema], fh, indent=1)
        fh.write("\n")


def patient_from_json(d, schema):
    try:
        visits = [Visit(int(v["day"]), {k: float(x) for k, x in v.get("obs", {}).items()})
                  for v in d["visits"]]
        patient = Patient(str(d["id"]), visits, Outcome(d["outcome"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed patient record: {exc}") from None
    validate_patient(patient, schema)
    return patient


def patient_to_json(p: Patient):
    return {
        "id": p.id,
        "outcome": p.outcome.value,
        "visits": [{"day": v.day, "obs": v.observations} for v in p.visits],
    }


def read_cohort(path, schema) -> Cohort:
    patients = []
    seen = set()
    try:
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
                try:
                    p = patient_from_json(record, schema)
                except DataError as exc:
                    raise DataError(f"{path}:{lineno}: {exc}") from None
                if p.id in seen:
                    raise DataError(f"{path}:{lineno}: duplicate patient id {p.id!r}")
                seen.add(p.id)
                patients.append(p)
    except OSError as exc:
        raise DataError(f"cannot read cohort {path}: {exc}") from None
    return Cohort(schema, patients)


def write_cohort(cohort: Cohort, path):
    with open(path, "w") as fh:
        for p in cohort.patients:
            fh.write(json.dumps(patient_to_json(p), separators=(",", ":")) + "\n")


def write_grids_csv(grids, schema, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["patient_id", "window"] + [v.name for v in schema])
        for g in grids:
            for w in range(g.values.shape[0]):
                writer.writerow([g.patient_id, w] + ["" if np.isnan(x) else repr(float(x))
                                                     for x in g.values[w]])
