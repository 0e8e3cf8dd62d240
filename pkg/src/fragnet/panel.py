"""Category-level TVL panel and return-matrix containers plus snapshot files.

Snapshot format: UTF-8 CSV with a single JSON metadata comment line on top,
then a mandatory header row (``date`` first, one column per category) and
ISO-8601 dates. Values are written with 17 significant digits so float64
round-trips are bit-exact.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import SnapshotError, ValidationError

PANEL_SCHEMA = "fragnet-panel/1"
RETURNS_SCHEMA = "fragnet-returns/1"
_FLOAT_FMT = "%.17g"


def _normalize_index(dates) -> pd.DatetimeIndex:
    idx = pd.DatetimeIndex(pd.to_datetime(dates)).normalize()
    if idx.has_duplicates:
        raise ValidationError("panel dates contain duplicates")
    if not idx.is_monotonic_increasing:
        raise ValidationError("panel dates must be strictly increasing")
    return idx


@dataclass
class CategoryPanel:
    """Dates x categories matrix of daily USD TVL.

    ``frame`` is indexed by normalized daily timestamps with one column per
    retained category; cells may be NaN where no constituent protocol
    reported that day. ``excluded`` lists category names dropped by policy.
    """

    frame: pd.DataFrame
    excluded: tuple[str, ...] = ()

    def __post_init__(self):
        self.frame = self.frame.copy()
        self.frame.index = _normalize_index(self.frame.index)
        self.frame.columns = [str(c) for c in self.frame.columns]
        self.frame = self.frame.astype(np.float64)
        self.excluded = tuple(str(c) for c in self.excluded)
        overlap = set(self.excluded) & set(self.frame.columns)
        if overlap:
            raise ValidationError(f"excluded categories present in panel: {sorted(overlap)}")

    @property
    def dates(self) -> pd.DatetimeIndex:
        return self.frame.index

    @property
    def categories(self) -> tuple[str, ...]:
        return tuple(self.frame.columns)

    @property
    def values(self) -> np.ndarray:
        return self.frame.to_numpy()

    def equals(self, other: "CategoryPanel") -> bool:
        return (
            self.frame.index.equals(other.frame.index)
            and list(self.frame.columns) == list(other.frame.columns)
            and np.array_equal(self.frame.to_numpy(), other.frame.to_numpy(), equal_nan=True)
            and self.excluded == other.excluded
        )


@dataclass
class ReturnMatrix:
    """Balanced matrix of winsorized daily log returns.

    ``winsor_bounds`` maps category -> (low, high) clip values actually
    applied; ``dropped_categories`` lists zero-variance columns removed
    during balancing.
    """

    frame: pd.DataFrame
    winsor_bounds: dict[str, tuple[float, float]] = field(default_factory=dict)
    dropped_categories: tuple[str, ...] = ()

    def __post_init__(self):
        self.frame = self.frame.copy()
        self.frame.index = _normalize_index(self.frame.index)
        self.frame = self.frame.astype(np.float64)
        if self.frame.isna().any().any():
            raise ValidationError("return matrix contains missing cells")
        self.dropped_categories = tuple(str(c) for c in self.dropped_categories)

    @property
    def dates(self) -> pd.DatetimeIndex:
        return self.frame.index

    @property
    def categories(self) -> tuple[str, ...]:
        return tuple(self.frame.columns)

    @property
    def values(self) -> np.ndarray:
        return self.frame.to_numpy()


# ---------------------------------------------------------------------------
# snapshot I/O
# ---------------------------------------------------------------------------

def _write_table(frame: pd.DataFrame, meta: dict, path) -> None:
    buf = io.StringIO()
    buf.write("# " + json.dumps(meta, sort_keys=True) + "\n")
    out = frame.copy()
    out.insert(0, "date", out.index.strftime("%Y-%m-%d"))
    out.to_csv(buf, index=False, float_format=_FLOAT_FMT, lineterminator="\n")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())


def _read_table(path, expected_schema: str) -> tuple[pd.DataFrame, dict]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            first = fh.readline()
            rest = fh.read()
    except OSError as exc:
        raise SnapshotError(f"cannot read snapshot {path}: {exc}") from exc

    if not first.startswith("# "):
        raise SnapshotError(f"{path}: missing metadata header line")
    try:
        meta = json.loads(first[2:])
    except json.JSONDecodeError as exc:
        raise SnapshotError(f"{path}: malformed metadata header: {exc}") from exc

    schema = meta.get("schema")
    if schema != expected_schema:
        raise SnapshotError(
            f"{path}: schema version mismatch: found {schema!r}, expected {expected_schema!r}"
        )

    try:
        frame = pd.read_csv(io.StringIO(rest), dtype=str)
    except Exception as exc:
        raise SnapshotError(f"{path}: unreadable table: {exc}") from exc

    if frame.columns.size == 0 or frame.columns[0] != "date":
        raise SnapshotError(f"{path}: first column must be 'date'")

    declared = meta.get("categories")
    if not isinstance(declared, list):
        raise SnapshotError(f"{path}: metadata missing 'categories' list")
    present = list(frame.columns[1:])
    extra = [c for c in present if c not in declared]
    if extra:
        raise SnapshotError(f"{path}: unknown column {extra[0]!r} not in declared categories")
    missing = [c for c in declared if c not in present]
    if missing:
        raise SnapshotError(f"{path}: declared category {missing[0]!r} missing from table")

    try:
        dates = pd.DatetimeIndex(pd.to_datetime(frame["date"], format="%Y-%m-%d"))
        data = frame[declared].apply(pd.to_numeric).astype(np.float64)
    except (ValueError, TypeError) as exc:
        raise SnapshotError(f"{path}: malformed cell values: {exc}") from exc
    data.index = dates
    return data, meta


def save_snapshot(panel: CategoryPanel, path) -> None:
    meta = {
        "schema": PANEL_SCHEMA,
        "categories": list(panel.categories),
        "excluded": list(panel.excluded),
    }
    _write_table(panel.frame, meta, path)


def load_snapshot(path) -> CategoryPanel:
    data, meta = _read_table(path, PANEL_SCHEMA)
    return CategoryPanel(frame=data, excluded=tuple(meta.get("excluded", ())))


def save_returns(returns: ReturnMatrix, path) -> None:
    meta = {
        "schema": RETURNS_SCHEMA,
        "categories": list(returns.categories),
        "dropped": list(returns.dropped_categories),
        "winsor_bounds": {k: list(v) for k, v in returns.winsor_bounds.items()},
    }
    _write_table(returns.frame, meta, path)


def load_returns(path) -> ReturnMatrix:
    data, meta = _read_table(path, RETURNS_SCHEMA)
    bounds = {k: (float(v[0]), float(v[1])) for k, v in meta.get("winsor_bounds", {}).items()}
    return ReturnMatrix(
        frame=data,
        winsor_bounds=bounds,
        dropped_categories=tuple(meta.get("dropped", ())),
    )
