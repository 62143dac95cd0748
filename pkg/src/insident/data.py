"""Schema-driven CSV ingestion, categorical encoding and min-max normalization.

A loaded dataset is an immutable numeric matrix: categorical columns are
one-hot expanded (with a trailing "other" slot for values unseen at fit
time), numeric columns are min-max scaled to [0, 1], and every row keeps
its original position in the source file so summaries can be written back
as the untouched raw rows.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

NUMERIC = "numeric"
CATEGORICAL = "categorical"
IGNORE = "ignore"
_KINDS = (NUMERIC, CATEGORICAL, IGNORE)

# positive-label matching modes
LABEL_EQUALS = "equals"          # anomaly iff label == positive_label
LABEL_NOT_EQUALS = "not_equals"  # anomaly iff label != positive_label

_CHUNK = 65536


class DataError(ValueError):
    """A file or record does not parse under its schema."""


@dataclass(frozen=True)
class Schema:
    """Column layout of one CSV file.

    ``columns`` names every CSV column in order, each with a kind from
    {numeric, categorical, ignore}. ``label_column`` is an index into
    ``columns``; that column never contributes features. With mode
    "equals" a sample is anomalous iff its label equals ``positive_label``;
    with "not_equals" iff it differs (used to collapse multi-class attack
    labels to a binary anomaly flag).
    """

    columns: tuple[tuple[str, str], ...]
    label_column: int | None = None
    positive_label: str | None = None
    positive_mode: str = LABEL_EQUALS
    has_header: bool = False

    def __post_init__(self):
        cols = tuple((str(n), str(k)) for n, k in self.columns)
        object.__setattr__(self, "columns", cols)
        for name, kind in cols:
            if kind not in _KINDS:
                raise ValueError(f"column {name!r}: unknown kind {kind!r}")
        if self.label_column is not None:
            if not 0 <= self.label_column < len(cols):
                raise ValueError(f"label_column {self.label_column} out of range")
            if self.positive_label is None:
                raise ValueError("positive_label required when label_column is set")
        elif self.positive_label is not None:
            raise ValueError("positive_label given without label_column")
        if self.positive_mode not in (LABEL_EQUALS, LABEL_NOT_EQUALS):
            raise ValueError(f"unknown positive_mode {self.positive_mode!r}")

    @property
    def n_columns(self) -> int:
        return len(self.columns)

    def to_dict(self) -> dict:
        return {
            "columns": [[n, k] for n, k in self.columns],
            "label_column": self.label_column,
            "positive_label": self.positive_label,
            "positive_mode": self.positive_mode,
            "has_header": self.has_header,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Schema":
        return cls(
            columns=tuple((c[0], c[1]) for c in d["columns"]),
            label_column=d.get("label_column"),
            positive_label=d.get("positive_label"),
            positive_mode=d.get("positive_mode", LABEL_EQUALS),
            has_header=bool(d.get("has_header", False)),
        )


def load_schema(path) -> Schema:
    """Read a schema from its JSON sidecar file."""
    with open(path, "r", encoding="utf-8") as fh:
        return Schema.from_dict(json.load(fh))


def save_schema(schema: Schema, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(schema.to_dict(), fh, indent=2)
        fh.write("\n")


# Standard 41-attribute KDD Cup 1999 layout: columns 2-4 (1-based) are
# categorical, the 42nd column holds the connection label and anything
# other than "normal." counts as an anomaly.
_KDD99_NAMES = (
    "duration", "protocol_type", "service", "flag", "src_bytes", "dst_bytes",
    "land", "wrong_fragment", "urgent", "hot", "num_failed_logins",
    "logged_in", "num_compromised", "root_shell", "su_attempted", "num_root",
    "num_file_creations", "num_shells", "num_access_files",
    "num_outbound_cmds", "is_host_login", "is_guest_login", "count",
    "srv_count", "serror_rate", "srv_serror_rate", "rerror_rate",
    "srv_rerror_rate", "same_srv_rate", "diff_srv_rate", "srv_diff_host_rate",
    "dst_host_count", "dst_host_srv_count", "dst_host_same_srv_rate",
    "dst_host_diff_srv_rate", "dst_host_same_src_port_rate",
    "dst_host_srv_diff_host_rate", "dst_host_serror_rate",
    "dst_host_srv_serror_rate", "dst_host_rerror_rate",
    "dst_host_srv_rerror_rate",
)
_KDD99_CATEGORICAL = {"protocol_type", "service", "flag"}


def kdd99_schema() -> Schema:
    """Preset schema for raw KDD Cup 1999 files (41 attributes + label)."""
    cols = tuple(
        (n, CATEGORICAL if n in _KDD99_CATEGORICAL else NUMERIC)
        for n in _KDD99_NAMES
    ) + (("label", IGNORE),)
    return Schema(
        columns=cols,
        label_column=41,
        positive_label="normal.",
        positive_mode=LABEL_NOT_EQUALS,
    )


SCHEMA_PRESETS = {"kdd99": kdd99_schema}


@dataclass(frozen=True)
class Encoder:
    """Fitted per-column encoding state.

    ``states`` holds one entry per schema column: (min, max) floats for
    numeric columns, a sorted tuple of category strings for categorical
    columns, None for ignored/label columns. One-hot blocks carry a final
    "other" slot so unseen categories encode without error.
    """

    schema: Schema
    states: tuple

    @property
    def n_features(self) -> int:
        return sum(self._width(i) for i in range(len(self.schema.columns)))

    def _width(self, col: int) -> int:
        if col == self.schema.label_column:
            return 0
        kind = self.schema.columns[col][1]
        if kind == NUMERIC:
            return 1
        if kind == CATEGORICAL:
            return len(self.states[col]) + 1
        return 0

    def feature_names(self) -> list[str]:
        names = []
        for i, (name, kind) in enumerate(self.schema.columns):
            if self._width(i) == 0:
                continue
            if kind == NUMERIC:
                names.append(name)
            else:
                names.extend(f"{name}={c}" for c in self.states[i])
                names.append(f"{name}=<other>")
        return names

    def encode(self, record) -> np.ndarray:
        """Encode one raw record (sequence of cell strings) to a feature vector."""
        cells = list(record)
        if len(cells) != self.schema.n_columns:
            raise DataError(
                f"record has {len(cells)} cells, schema expects "
                f"{self.schema.n_columns}"
            )
        out = np.zeros(self.n_features)
        pos = 0
        for i, (name, kind) in enumerate(self.schema.columns):
            width = self._width(i)
            if width == 0:
                continue
            cell = str(cells[i])
            if kind == NUMERIC:
                mn, mx = self.states[i]
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(f"column {name!r}: non-numeric cell {cell!r}")
                out[pos] = (v - mn) / (mx - mn) if mx > mn else 0.0
            else:
                cats = self.states[i]
                j = _cat_index(cats, cell)
                out[pos + j] = 1.0
            pos += width
        return out


def _cat_index(cats: tuple, value: str) -> int:
    """Slot of ``value`` in a one-hot block; the last slot catches unseen values."""
    import bisect

    j = bisect.bisect_left(cats, value)
    if j < len(cats) and cats[j] == value:
        return j
    return len(cats)


@dataclass(frozen=True)
class Dataset:
    """Encoded, normalized sample matrix with provenance and optional labels.

    ``labels`` are integer class codes (see ``label_names``); when the
    schema uses "not_equals" matching they collapse to 0 = reference value,
    1 = anomaly. ``positive_class`` is the code counted as anomalous.
    ``row_ids`` are 0-based data-row positions in the source file.
    """

    features: np.ndarray
    row_ids: np.ndarray
    labels: np.ndarray | None = None
    label_names: tuple[str, ...] | None = None
    positive_class: int | None = None
    source_path: str | None = None

    def __post_init__(self):
        self.features.setflags(write=False)
        self.row_ids.setflags(write=False)
        if self.labels is not None:
            self.labels.setflags(write=False)

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]


def anomaly_fraction(dataset: Dataset) -> float:
    """Fraction of samples whose label is the anomalous class."""
    if dataset.labels is None:
        raise ValueError("dataset has no labels")
    return float(np.mean(dataset.labels == dataset.positive_class))


def _read_lines(path) -> list[str]:
    raw = Path(path).read_bytes()
    if not raw:
        raise DataError(f"{path}: empty file")
    return raw.decode("utf-8").splitlines()


def _parse_rows(lines: list[str], schema: Schema, path):
    """Yield (line_number, cells) for every data row, validating cell counts."""
    reader = csv.reader(lines)
    for lineno, cells in enumerate(reader, start=1):
        if schema.has_header and lineno == 1:
            continue
        if not cells:
            continue
        if len(cells) != schema.n_columns:
            raise DataError(
                f"{path}: row {lineno}: expected {schema.n_columns} cells, "
                f"got {len(cells)}"
            )
        yield lineno, cells


def _parse_numeric_chunk(values: list[str], name: str, linenos: list[int], path):
    try:
        return np.asarray(values, dtype=np.float64)
    except ValueError:
        for v, ln in zip(values, linenos):
            try:
                float(v)
            except ValueError:
                raise DataError(
                    f"{path}: row {ln}: column {name!r}: "
                    f"non-numeric cell {v!r}"
                ) from None
        raise


def load_dataset(path, schema: Schema) -> tuple[Dataset, Encoder]:
    """Load a CSV file under ``schema``.

    Returns the encoded dataset together with the fitted encoder. Two
    passes: the first fits per-column state (min/max, category sets), the
    second fills the feature matrix. Missing (empty) cells in non-ignored
    columns are rejected.
    """
    lines = _read_lines(path)
    ncols = schema.n_columns
    numeric_cols = [
        i for i, (_, k) in enumerate(schema.columns)
        if k == NUMERIC and i != schema.label_column
    ]
    cat_cols = [
        i for i, (_, k) in enumerate(schema.columns)
        if k == CATEGORICAL and i != schema.label_column
    ]

    # pass 1: fit
    mins = {i: np.inf for i in numeric_cols}
    maxs = {i: -np.inf for i in numeric_cols}
    cats: dict[int, set] = {i: set() for i in cat_cols}
    label_values: list[str] = []
    n = 0
    chunk: list[list[str]] = []
    chunk_lines: list[int] = []

    def _fit_chunk():
        for i in numeric_cols:
            name = schema.columns[i][0]
            col = [row[i] for row in chunk]
            _check_missing(col, name, chunk_lines, path)
            vals = _parse_numeric_chunk(col, name, chunk_lines, path)
            mins[i] = min(mins[i], vals.min())
            maxs[i] = max(maxs[i], vals.max())
        for i in cat_cols:
            name = schema.columns[i][0]
            col = [row[i] for row in chunk]
            _check_missing(col, name, chunk_lines, path)
            cats[i].update(col)

    for lineno, cells in _parse_rows(lines, schema, path):
        chunk.append(cells)
        chunk_lines.append(lineno)
        if schema.label_column is not None:
            label_values.append(cells[schema.label_column])
        n += 1
        if len(chunk) >= _CHUNK:
            _fit_chunk()
            chunk, chunk_lines = [], []
    if chunk:
        _fit_chunk()
    if n == 0:
        raise DataError(f"{path}: no data rows")

    encoder = Encoder(
        schema=schema,
        states=tuple(
            (float(mins[i]), float(maxs[i])) if i in mins
            else tuple(sorted(cats[i])) if i in cats
            else None
            for i in range(ncols)
        ),
    )

    # pass 2: fill features
    d = encoder.n_features
    features = np.zeros((n, d))
    offsets = {}
    pos = 0
    for i in range(ncols):
        offsets[i] = pos
        pos += encoder._width(i)

    row0 = 0
    chunk, chunk_lines = [], []

    def _fill_chunk():
        nonlocal row0
        m = len(chunk)
        for i in numeric_cols:
            name = schema.columns[i][0]
            vals = _parse_numeric_chunk([r[i] for r in chunk], name, chunk_lines, path)
            mn, mx = encoder.states[i]
            if mx > mn:
                features[row0:row0 + m, offsets[i]] = (vals - mn) / (mx - mn)
        for i in cat_cols:
            col = np.asarray([r[i] for r in chunk])
            sorted_cats = np.asarray(encoder.states[i])
            codes = np.searchsorted(sorted_cats, col)
            codes = np.clip(codes, 0, len(sorted_cats) - 1)
            hit = sorted_cats[codes] == col
            slots = np.where(hit, codes, len(sorted_cats))
            features[row0 + np.arange(m), offsets[i] + slots] = 1.0
        row0 += m

    for lineno, cells in _parse_rows(lines, schema, path):
        chunk.append(cells)
        chunk_lines.append(lineno)
        if len(chunk) >= _CHUNK:
            _fill_chunk()
            chunk, chunk_lines = [], []
    if chunk:
        _fill_chunk()

    labels = label_names = positive_class = None
    if schema.label_column is not None:
        if schema.positive_mode == LABEL_NOT_EQUALS:
            labels = np.asarray(
                [0 if v == schema.positive_label else 1 for v in label_values],
                dtype=np.int64,
            )
            label_names = (schema.positive_label, f"not:{schema.positive_label}")
            positive_class = 1
        else:
            names = sorted(set(label_values) | {schema.positive_label})
            index = {v: c for c, v in enumerate(names)}
            labels = np.asarray([index[v] for v in label_values], dtype=np.int64)
            label_names = tuple(names)
            positive_class = index[schema.positive_label]

    dataset = Dataset(
        features=features,
        row_ids=np.arange(n, dtype=np.int64),
        labels=labels,
        label_names=label_names,
        positive_class=positive_class,
        source_path=str(path),
    )
    return dataset, encoder


def _check_missing(col, name, linenos, path):
    for v, ln in zip(col, linenos):
        if v == "":
            raise DataError(f"{path}: row {ln}: column {name!r}: missing value")


def encode(record, encoder: Encoder) -> np.ndarray:
    """Encode one raw record with a fitted encoder."""
    return encoder.encode(record)


def extract_rows(path, row_ids, has_header: bool = False) -> list[str]:
    """Raw source lines (no terminators) for the given 0-based data-row ids."""
    lines = _read_lines(path)
    data_lines = lines[1:] if has_header else lines
    data_lines = [ln for ln in data_lines if ln != ""]
    out = []
    for rid in row_ids:
        rid = int(rid)
        if not 0 <= rid < len(data_lines):
            raise ValueError(f"row id {rid} out of range (have {len(data_lines)} rows)")
        out.append(data_lines[rid])
    return out


def write_rows(path, rows: list[str], header: str | None = None) -> None:
    """Write raw CSV lines, preserving their bytes exactly."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if header is not None:
            fh.write(header + "\n")
        for ln in rows:
            fh.write(ln + "\n")
