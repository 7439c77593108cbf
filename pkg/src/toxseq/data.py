"""CSV loading for ClinTox/Tox21/FreeSolv-style files, merging, undersampling, splitting."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .codec import validate_smiles
from .model import CLASSIFICATION, REGRESSION
from .tensor import Rng


class DataError(ValueError):
    pass


class MissingColumn(DataError):
    pass


class MalformedRow(DataError):
    def __init__(self, row: int, reason: str):
        super().__init__(f"row {row}: {reason}")
        self.row = row


class KindMismatch(DataError):
    pass


class SingleClass(DataError):
    pass


class TooFewRecords(DataError):
    pass


@dataclass(frozen=True)
class TaskSchema:
    name: str
    smiles_column: str
    task_columns: tuple  # ((column, kind), ...)
    allow_missing: bool = True

    def __post_init__(self):
        if not self.task_columns:
            raise ValueError("a schema needs at least one task column")
        kinds = {k for _, k in self.task_columns}
        if not kinds <= {CLASSIFICATION, REGRESSION}:
            raise ValueError(f"unknown task kinds {kinds}")
        if REGRESSION in kinds and (len(self.task_columns) != 1 or self.allow_missing):
            raise ValueError("regression schemas have exactly one task and no missing labels")

    @property
    def task_names(self) -> tuple:
        return tuple(c for c, _ in self.task_columns)

    @property
    def kind(self) -> str:
        return self.task_columns[0][1]

    @property
    def n_tasks(self) -> int:
        return len(self.task_columns)


TOX21_TASKS = (
    "NR-AR", "NR-AR-LBD", "NR-AhR", "NR-Aromatase", "NR-ER", "NR-ER-LBD",
    "NR-PPAR-gamma", "SR-ARE", "SR-ATAD5", "SR-HSE", "SR-MMP", "SR-p53",
)

PRESETS = {
    "clintox": TaskSchema(
        "clintox", "smiles",
        (("FDA_APPROVED", CLASSIFICATION), ("CT_TOX", CLASSIFICATION)),
        allow_missing=True,
    ),
    "tox21": TaskSchema(
        "tox21", "smiles", tuple((t, CLASSIFICATION) for t in TOX21_TASKS), allow_missing=True
    ),
    "freesolv": TaskSchema("freesolv", "smiles", (("expt", REGRESSION),), allow_missing=False),
}

# task balanced by --undersample when none is named
PRIMARY_TASK = {"clintox": "CT_TOX"}


@dataclass(frozen=True)
class DatasetRecord:
    smiles: str
    labels: np.ndarray
    mask: np.ndarray
    issues: tuple = field(default=(), compare=False)

    @property
    def plausible(self) -> bool:
        return not self.issues


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError(f"train_fraction must be in (0, 1), got {self.train_fraction}")


def schema_from_json(obj: dict) -> TaskSchema:
    return TaskSchema(
        name=obj.get("name", "custom"),
        smiles_column=obj.get("smiles_column", "smiles"),
        task_columns=tuple((c, k) for c, k in obj["task_columns"]),
        allow_missing=bool(obj.get("allow_missing", True)),
    )


def schema_to_json(schema: TaskSchema) -> dict:
    return {
        "name": schema.name,
        "smiles_column": schema.smiles_column,
        "task_columns": [list(tc) for tc in schema.task_columns],
        "allow_missing": schema.allow_missing,
    }


def _parse_label(cell: str, kind: str, row: int, column: str, allow_missing: bool):
    text = cell.strip()
    if text == "" or text.lower() in ("nan", "na"):
        if allow_missing:
            return math.nan, False
        raise MalformedRow(row, f"missing value in {column!r}")
    try:
        value = float(text)
    except ValueError:
        if allow_missing:
            return math.nan, False
        raise MalformedRow(row, f"unparseable value {cell!r} in {column!r}") from None
    if not math.isfinite(value):
        raise MalformedRow(row, f"non-finite value {cell!r} in {column!r}")
    if kind == CLASSIFICATION and value not in (0.0, 1.0):
        raise MalformedRow(row, f"classification label {cell!r} in {column!r} is not 0/1")
    return value, True


def read_records(text: str, schema: TaskSchema, strict: bool = False, dedupe: bool = False):
    reader = csv.DictReader(io.StringIO(text))
    header = reader.fieldnames or []
    for col in (schema.smiles_column, *schema.task_names):
        if col not in header:
            raise MissingColumn(f"column {col!r} not in header {header}")
    records = []
    seen = set()
    # row numbers count the header as row 1, matching a spreadsheet view
    for row_no, row in enumerate(reader, start=2):
        smiles = (row.get(schema.smiles_column) or "").strip()
        if not smiles:
            raise MalformedRow(row_no, "empty SMILES")
        labels, mask = [], []
        for col, kind in schema.task_columns:
            value, present = _parse_label(row.get(col) or "", kind, row_no, col, schema.allow_missing)
            labels.append(value)
            mask.append(present)
        issues = validate_smiles(smiles).issues
        if strict and issues:
            raise MalformedRow(row_no, f"implausible SMILES {smiles!r}: {issues}")
        if dedupe:
            if smiles in seen:
                continue
            seen.add(smiles)
        records.append(
            DatasetRecord(smiles, np.array(labels, dtype=np.float64), np.array(mask, dtype=bool), issues)
        )
    return records


def load_dataset(path, schema: TaskSchema, strict: bool = False, dedupe: bool = False):
    try:
        text = Path(path).read_text(encoding="utf-8-sig")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    return read_records(text, schema, strict=strict, dedupe=dedupe)


def _fmt_label(value: float, kind: str) -> str:
    if kind == CLASSIFICATION:
        return str(int(value))
    return repr(float(value))


def dumps_dataset(records, schema: TaskSchema) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([schema.smiles_column, *schema.task_names])
    for r in records:
        cells = [
            _fmt_label(v, kind) if m else ""
            for v, m, (_, kind) in zip(r.labels, r.mask, schema.task_columns)
        ]
        w.writerow([r.smiles, *cells])
    return buf.getvalue()


def save_dataset(records, schema: TaskSchema, path) -> None:
    Path(path).write_text(dumps_dataset(records, schema), encoding="utf-8")


def merge_synthetic(a, schema_a: TaskSchema, b, schema_b: TaskSchema):
    """Stack two classification sets under the union of their tasks."""
    if schema_a.kind != CLASSIFICATION or schema_b.kind != CLASSIFICATION:
        raise KindMismatch("only classification datasets can be merged")
    na, nb = schema_a.n_tasks, schema_b.n_tasks
    schema = TaskSchema(
        name=f"{schema_a.name}+{schema_b.name}",
        smiles_column=schema_a.smiles_column,
        task_columns=schema_a.task_columns + schema_b.task_columns,
        allow_missing=True,
    )
    out = []
    for r in a:
        out.append(DatasetRecord(
            r.smiles,
            np.concatenate([r.labels, np.full(nb, np.nan)]),
            np.concatenate([r.mask, np.zeros(nb, dtype=bool)]),
            r.issues,
        ))
    for r in b:
        out.append(DatasetRecord(
            r.smiles,
            np.concatenate([np.full(na, np.nan), r.labels]),
            np.concatenate([np.zeros(na, dtype=bool), r.mask]),
            r.issues,
        ))
    return out, schema


def class_counts(records, task_index: int) -> tuple:
    neg = sum(1 for r in records if r.mask[task_index] and r.labels[task_index] == 0.0)
    pos = sum(1 for r in records if r.mask[task_index] and r.labels[task_index] == 1.0)
    return neg, pos


def undersample(records, task_index: int, seed: int):
    """Drop random majority-class records until both classes match on one task.

    Records without a label for that task cannot be assigned a class and are
    dropped as well.
    """
    pos = [k for k, r in enumerate(records) if r.mask[task_index] and r.labels[task_index] == 1.0]
    neg = [k for k, r in enumerate(records) if r.mask[task_index] and r.labels[task_index] == 0.0]
    if not pos or not neg:
        raise SingleClass(f"task {task_index} needs both classes (pos={len(pos)}, neg={len(neg)})")
    rng = Rng(seed)
    minority, majority = (pos, neg) if len(pos) <= len(neg) else (neg, pos)
    chosen = [majority[k] for k in rng.permutation(len(majority))[: len(minority)]]
    keep = sorted(minority + chosen)
    order = rng.permutation(len(keep))
    return [records[keep[k]] for k in order]


def split(records, spec: SplitSpec):
    n = len(records)
    if n < 2:
        raise TooFewRecords(f"need at least 2 records to split, got {n}")
    order = Rng(spec.seed).permutation(n)
    cut = int(round(spec.train_fraction * n))
    cut = min(max(cut, 1), n - 1)
    return [records[k] for k in order[:cut]], [records[k] for k in order[cut:]]
