"""CSV ingestion and emission (RFC-4180 quoting, '.' decimals, UTF-8)."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..core import Categorical, Continuous, Dataset, VennCalError

__all__ = ["CsvFormatError", "ColumnRoles", "LoadReport", "load_csv", "write_csv"]


class CsvFormatError(VennCalError, ValueError):
    """Malformed CSV input; message carries the row/column location."""


@dataclass(frozen=True)
class ColumnRoles:
    """Assignment of CSV columns to dataset roles.

    Exactly one outcome column; ``features`` are continuous, ``categoricals``
    may hold string levels (coded in first-appearance order).  Unlisted
    columns are ignored.
    """

    y: str
    preds: tuple = ()
    features: tuple = ()
    categoricals: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "preds", tuple(self.preds))
        object.__setattr__(self, "features", tuple(self.features))
        object.__setattr__(self, "categoricals", tuple(self.categoricals))
        named = [self.y, *self.preds, *self.features, *self.categoricals]
        if len(set(named)) != len(named):
            raise CsvFormatError("column roles assign the same column twice")

    @classmethod
    def from_dict(cls, d: dict) -> "ColumnRoles":
        extra = set(d) - {"y", "preds", "features", "categoricals"}
        if extra:
            raise CsvFormatError(f"unknown role keys: {sorted(extra)}")
        if "y" not in d:
            raise CsvFormatError("roles must assign exactly one outcome column 'y'")
        return cls(
            y=d["y"],
            preds=tuple(d.get("preds", ())),
            features=tuple(d.get("features", ())),
            categoricals=tuple(d.get("categoricals", ())),
        )


@dataclass(frozen=True)
class LoadReport:
    n_rows: int
    n_dropped: int
    dropped_reasons: dict = field(default_factory=dict)
    level_maps: dict = field(default_factory=dict)


def _parse_float(cell: str, row: int, col: str) -> float:
    try:
        v = float(cell)
    except ValueError:
        raise CsvFormatError(
            f"non-numeric value {cell!r} at row {row}, column {col!r}"
        ) from None
    if not np.isfinite(v):
        raise CsvFormatError(f"non-finite value {cell!r} at row {row}, column {col!r}")
    return v


def load_csv(path, roles: ColumnRoles) -> tuple[Dataset, LoadReport]:
    """Read a typed Dataset from a headered CSV file.

    Fully empty lines are dropped (and counted); any other malformed cell
    raises `CsvFormatError` naming the row and column.  Row numbers in
    errors are 1-based file lines including the header.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvFormatError(f"{path}: file is empty") from None
        header = [h.strip() for h in header]
        needed = [roles.y, *roles.preds, *roles.features, *roles.categoricals]
        missing = [c for c in needed if c not in header]
        if missing:
            raise CsvFormatError(f"{path}: missing required columns {missing}")
        col_idx = {c: header.index(c) for c in needed}
        rows = []
        dropped = {"empty_line": 0}
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                dropped["empty_line"] += 1
                continue
            if len(rec) != len(header):
                raise CsvFormatError(
                    f"{path}: row {lineno} has {len(rec)} fields, expected {len(header)}"
                )
            rows.append((lineno, rec))
    if not rows:
        raise CsvFormatError(f"{path}: no data rows")

    y = np.array([_parse_float(rec[col_idx[roles.y]], ln, roles.y) for ln, rec in rows])
    preds = {
        name: np.array([_parse_float(rec[col_idx[name]], ln, name) for ln, rec in rows])
        for name in roles.preds
    }
    feat_cols = []
    kinds = []
    for name in roles.features:
        feat_cols.append(
            np.array([_parse_float(rec[col_idx[name]], ln, name) for ln, rec in rows])
        )
        kinds.append(Continuous())
    level_maps = {}
    for name in roles.categoricals:
        raw = [rec[col_idx[name]].strip() for _, rec in rows]
        levels = {}
        codes = np.empty(len(raw))
        for i, cell in enumerate(raw):
            if cell not in levels:
                levels[cell] = len(levels)
            codes[i] = levels[cell]
        level_maps[name] = levels
        feat_cols.append(codes)
        kinds.append(Categorical(len(levels)))
    features = (
        np.column_stack(feat_cols) if feat_cols else np.zeros((y.shape[0], 0))
    )
    ds = Dataset(features=features, y=y, pred_columns=preds, feature_kinds=tuple(kinds))
    report = LoadReport(
        n_rows=y.shape[0],
        n_dropped=sum(dropped.values()),
        dropped_reasons={k: v for k, v in dropped.items() if v},
        level_maps=level_maps,
    )
    return ds, report


def write_csv(path, header, rows) -> None:
    """Write rows with RFC-4180 quoting; floats use repr (round-trip exact)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
