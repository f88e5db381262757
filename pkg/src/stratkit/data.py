"""Covariate dataset ingestion: typed CSV loading, validation, and the
per-unit natural-language description used by the prediction stage.

CSV is the sole ingestion format (RFC 4180, comma-delimited).  The schema
is always supplied explicitly -- variable descriptions cannot be inferred
from a header row, and silent type inference is exactly the failure mode
this module exists to prevent.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .errors import DataError

VariableKind = str  # "numeric" | "categorical" | "text"

_KINDS = ("numeric", "categorical", "text")


class MissingColumn(DataError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"required column {name!r} not present in CSV header")


class TypeMismatch(DataError):
    def __init__(self, row: int, column: str, raw: str):
        self.row = row
        self.column = column
        self.raw = raw
        super().__init__(f"row {row}, column {column!r}: cannot parse {raw!r} as a number")


class DuplicateUnitId(DataError):
    def __init__(self, unit_id: str):
        self.unit_id = unit_id
        super().__init__(f"duplicate unit_id {unit_id!r}")


class EmptyDataset(DataError):
    def __init__(self, path=None):
        super().__init__(f"no data rows found{f' in {path}' if path else ''}")


@dataclass(frozen=True)
class Variable:
    """One covariate: name, kind (numeric/categorical/text), prose description."""

    name: str
    kind: VariableKind
    description: str = ""
    units: str | None = None

    def __post_init__(self):
        if not self.name:
            raise DataError("variable name must be nonempty")
        if self.kind not in _KINDS:
            raise DataError(f"variable {self.name!r}: unknown kind {self.kind!r} (expected one of {_KINDS})")


@dataclass(frozen=True)
class CovariateSchema:
    """Ordered list of covariates; ordering is significant everywhere downstream."""

    variables: tuple[Variable, ...]

    def __post_init__(self):
        names = [v.name for v in self.variables]
        dupes = {n for n in names if names.count(n) > 1}
        if dupes:
            raise DataError(f"duplicate variable names in schema: {sorted(dupes)}")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(v.name for v in self.variables)

    def variable(self, name: str) -> Variable:
        for v in self.variables:
            if v.name == name:
                return v
        raise KeyError(name)

    def numeric_names(self) -> tuple[str, ...]:
        return tuple(v.name for v in self.variables if v.kind == "numeric")

    def categorical_names(self) -> tuple[str, ...]:
        return tuple(v.name for v in self.variables if v.kind == "categorical")


@dataclass(frozen=True)
class UnitRecord:
    """One experimental unit.

    ``observed_outcome``/``observed_treatment`` are evaluation-only fields;
    they are present together or absent together.
    """

    unit_id: str
    values: dict = field(hash=False)
    observed_outcome: float | None = None
    observed_treatment: int | None = None

    def __post_init__(self):
        if (self.observed_outcome is None) != (self.observed_treatment is None):
            raise DataError(
                f"unit {self.unit_id!r}: observed outcome and treatment must be present together or absent together"
            )
        if self.observed_treatment is not None and self.observed_treatment not in (0, 1):
            raise DataError(f"unit {self.unit_id!r}: treatment must be 0 or 1, got {self.observed_treatment!r}")


@dataclass(frozen=True)
class Dataset:
    schema: CovariateSchema
    units: tuple[UnitRecord, ...]

    def __post_init__(self):
        seen = set()
        for u in self.units:
            if u.unit_id in seen:
                raise DuplicateUnitId(u.unit_id)
            seen.add(u.unit_id)
            for v in self.schema.variables:
                if v.name not in u.values:
                    raise DataError(f"unit {u.unit_id!r}: missing value for variable {v.name!r}")

    def __len__(self) -> int:
        return len(self.units)

    @property
    def unit_ids(self) -> tuple[str, ...]:
        return tuple(u.unit_id for u in self.units)

    def has_observed_outcomes(self) -> bool:
        return all(u.observed_outcome is not None for u in self.units)


def _parse_numeric(raw: str, row: int, column: str) -> float:
    text = raw.strip()
    if not text:
        # Missing numeric cells are rejected, never imputed.
        raise TypeMismatch(row, column, raw)
    try:
        return float(text)
    except ValueError:
        raise TypeMismatch(row, column, raw) from None


def load_dataset(path, schema: CovariateSchema) -> Dataset:
    """Load a CSV file against an explicit schema.

    The header must cover every schema variable; ``unit_id``, ``outcome``,
    and ``treatment`` columns are optional.  Numeric cells are parsed as
    decimal numbers, categorical/text cells kept verbatim, and row order
    is preserved.  When ``unit_id`` is absent, ids are zero-padded row
    indices.

    Raises:
        MissingColumn, TypeMismatch, DuplicateUnitId, EmptyDataset
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        rows = [r for r in reader if r and not (len(r) == 1 and not r[0].strip())]
    rows = [r for r in rows if not (r[0].startswith("#"))]
    if not rows:
        raise EmptyDataset(path)
    header, data_rows = rows[0], rows[1:]
    if not data_rows:
        raise EmptyDataset(path)

    col_index = {name: i for i, name in enumerate(header)}
    for v in schema.variables:
        if v.name not in col_index:
            raise MissingColumn(v.name)
    has_id = "unit_id" in col_index
    has_outcome = "outcome" in col_index
    has_treatment = "treatment" in col_index
    if has_outcome != has_treatment:
        raise MissingColumn("treatment" if has_outcome else "outcome")

    pad = len(str(max(len(data_rows) - 1, 1)))
    units = []
    for i, row in enumerate(data_rows):
        rownum = i + 1  # 1-based data row for error messages
        if len(row) < len(header):
            row = row + [""] * (len(header) - len(row))
        values = {}
        for v in schema.variables:
            raw = row[col_index[v.name]]
            if v.kind == "numeric":
                values[v.name] = _parse_numeric(raw, rownum, v.name)
            else:
                values[v.name] = raw
        unit_id = row[col_index["unit_id"]] if has_id else str(i).zfill(pad)
        outcome = treatment = None
        if has_outcome:
            outcome = _parse_numeric(row[col_index["outcome"]], rownum, "outcome")
            t = _parse_numeric(row[col_index["treatment"]], rownum, "treatment")
            if t not in (0.0, 1.0):
                raise TypeMismatch(rownum, "treatment", row[col_index["treatment"]])
            treatment = int(t)
        units.append(
            UnitRecord(unit_id=unit_id, values=values, observed_outcome=outcome, observed_treatment=treatment)
        )
    return Dataset(schema=schema, units=tuple(units))


def save_dataset(dataset: Dataset, path) -> None:
    """Write a dataset back to CSV; ``load_dataset`` of the result round-trips."""
    path = Path(path)
    has_outcome = dataset.units and dataset.units[0].observed_outcome is not None
    header = ["unit_id", *dataset.schema.names]
    if has_outcome:
        header += ["outcome", "treatment"]
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for u in dataset.units:
            row = [u.unit_id] + [_format_value(u.values[n]) for n in dataset.schema.names]
            if has_outcome:
                row += [repr(float(u.observed_outcome)), str(int(u.observed_treatment))]
            writer.writerow(row)


def _format_value(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _display_value(value) -> str:
    """Render one covariate value for prompts: integral floats lose the
    trailing '.0', embedded newlines collapse to single spaces."""
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        v = float(value)
        if v.is_integer():
            return str(int(v))
        return repr(v)
    text = str(value)
    return " ".join(text.splitlines())


def render_unit_description(unit: UnitRecord, schema: CovariateSchema) -> str:
    """One ``- name: value`` line per schema variable, in schema order."""
    return "\n".join(f"- {v.name}: {_display_value(unit.values[v.name])}" for v in schema.variables)


def units_from_arrays(schema: CovariateSchema, columns: dict, outcomes=None, treatments=None) -> Dataset:
    """Build an in-memory Dataset from per-variable columns (test/demo helper)."""
    names = schema.names
    n = len(next(iter(columns.values()))) if columns else 0
    pad = len(str(max(n - 1, 1)))
    units = []
    for i in range(n):
        values = {name: columns[name][i] for name in names}
        outcome = float(outcomes[i]) if outcomes is not None else None
        treatment = int(treatments[i]) if treatments is not None else None
        units.append(
            UnitRecord(
                unit_id=str(i).zfill(pad),
                values=values,
                observed_outcome=outcome,
                observed_treatment=treatment,
            )
        )
    return Dataset(schema=schema, units=tuple(units))


def schema_from_dict(spec: dict) -> CovariateSchema:
    """Parse the schema block of a run configuration."""
    try:
        variables = tuple(
            Variable(
                name=v["name"],
                kind=v["kind"],
                description=v.get("description", ""),
                units=v.get("units"),
            )
            for v in spec["variables"]
        )
    except (KeyError, TypeError) as exc:
        raise DataError(f"malformed schema block: {exc}") from exc
    return CovariateSchema(variables=variables)


def iter_rows(dataset: Dataset) -> Iterable[UnitRecord]:
    return iter(dataset.units)
