"""Reading and writing telemetry on disk.

The canonical layout is a single flat CSV with one row per station-hour and
four fixed cell slots. ``join_challenge_layout`` adapts the three-file layout
(station info, cell data, energy) to the same in-memory records.
"""

from __future__ import annotations

import csv
import logging
from collections import defaultdict
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import pandas as pd

from .records import (
    MAX_CELLS,
    N_ES_MODES,
    CellFeatures,
    Dataset,
    MeasurementRecord,
    SplitManifest,
    validate_record,
)

log = logging.getLogger(__name__)

RECORD_COLUMNS = ("bs_id", "ru_type", "mode", "antennas", "day", "hour", "energy")
CELL_FIELDS = ("load", *(f"esmode{k}" for k in range(1, N_ES_MODES + 1)), "txpower", "frequency", "bandwidth")
CANONICAL_COLUMNS: tuple[str, ...] = RECORD_COLUMNS + tuple(
    f"{name}_{c}" for c in range(1, MAX_CELLS + 1) for name in CELL_FIELDS
)

MANIFEST_ROLES = ("train", "test_in", "test_cross")

# Column names of the three-file challenge layout. Override per deployment.
DEFAULT_CHALLENGE_COLUMNS: dict[str, str] = {
    "bs_id": "BS",
    "cell": "CellName",
    "time": "Time",
    "ru_type": "RUType",
    "mode": "Mode",
    "antennas": "Antennas",
    "frequency": "Frequency",
    "bandwidth": "Bandwidth",
    "tx_power": "TXpower",
    "load": "load",
    **{f"esmode{k}": f"ESMode{k}" for k in range(1, N_ES_MODES + 1)},
    "energy": "Energy",
}


class IngestError(Exception):
    """Raised for malformed input files."""


class HeaderMismatch(IngestError):
    def __init__(self, expected: Sequence[str], found: Sequence[str]):
        diffs = [
            f"column {i + 1}: expected {e!r}, found {f!r}"
            for i, (e, f) in enumerate(zip(expected, found))
            if e != f
        ]
        if len(expected) != len(found):
            diffs.append(f"expected {len(expected)} columns, found {len(found)}")
        super().__init__("header mismatch: " + "; ".join(diffs))
        self.expected = list(expected)
        self.found = list(found)


class RowError(IngestError):
    def __init__(self, row: int, message: str):
        super().__init__(f"row {row}: {message}")
        self.row = row


def _fmt(x: float) -> str:
    return format(float(x), ".10g")


def _row_for(record: MeasurementRecord) -> list[str]:
    row = [
        record.bs_id,
        record.ru_type,
        record.mode,
        str(int(record.antennas)),
        str(int(record.day)),
        str(int(record.hour)),
        _fmt(record.energy),
    ]
    for cell in record.padded_cells():
        row.append(_fmt(cell.load))
        row.extend(_fmt(v) for v in cell.es_mode)
        row.extend((_fmt(cell.tx_power), _fmt(cell.frequency), _fmt(cell.bandwidth)))
    return row


def write_canonical(ds: Dataset | Iterable[MeasurementRecord], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CANONICAL_COLUMNS)
        for record in ds:
            writer.writerow(_row_for(record))


def _parse_int(value: str) -> int:
    f = float(value)
    if not f.is_integer():
        raise ValueError(f"{value!r} is not an integer")
    return int(f)


def _record_from_row(row: Sequence[str]) -> MeasurementRecord:
    cells = []
    base = len(RECORD_COLUMNS)
    width = len(CELL_FIELDS)
    for c in range(MAX_CELLS):
        vals = row[base + c * width: base + (c + 1) * width]
        cells.append(
            CellFeatures(
                load=float(vals[0]),
                es_mode=tuple(float(v) for v in vals[1:1 + N_ES_MODES]),
                tx_power=float(vals[7]),
                frequency=float(vals[8]),
                bandwidth=float(vals[9]),
            )
        )
    # trailing all-zero slots are padding
    while len(cells) > 1 and not cells[-1].is_active:
        cells.pop()
    return MeasurementRecord(
        bs_id=row[0],
        ru_type=row[1],
        mode=row[2],
        antennas=_parse_int(row[3]),
        cells=tuple(cells),
        day=_parse_int(row[4]),
        hour=_parse_int(row[5]),
        energy=float(row[6]),
    )


def parse_canonical(path: str | Path, permissive: bool = False) -> Dataset:
    """Read a canonical CSV into a :class:`Dataset`.

    Rows violating a record invariant abort with :class:`RowError` unless
    ``permissive`` is set, in which case they are dropped and counted in the
    log. Row numbers are 1-based data rows (the header is row 0).
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    records: list[MeasurementRecord] = []
    dropped = 0
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise IngestError(f"{path}: empty file")
        header = [h.strip() for h in header]
        if tuple(header) != CANONICAL_COLUMNS:
            raise HeaderMismatch(CANONICAL_COLUMNS, header)
        for i, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(CANONICAL_COLUMNS):
                raise RowError(i, f"expected {len(CANONICAL_COLUMNS)} fields, got {len(row)}")
            try:
                record = _record_from_row(row)
            except ValueError as exc:
                col = _first_bad_column(row)
                raise RowError(i, f"unparseable value in column {col!r}: {exc}") from exc
            problems = validate_record(record)
            if problems:
                if permissive:
                    dropped += 1
                    continue
                raise RowError(i, "; ".join(problems))
            records.append(record)
    if dropped:
        log.warning("%s: dropped %d invalid rows", path, dropped)
    return Dataset(tuple(records), provenance=f"canonical:{path.name}")


def _first_bad_column(row: Sequence[str]) -> str:
    for name, value in zip(CANONICAL_COLUMNS[3:], row[3:]):
        try:
            float(value)
        except ValueError:
            return name
    return "?"


def write_manifest(manifest: SplitManifest, path: str | Path) -> None:
    """Write a split manifest as ``bs_id,role,days`` rows.

    ``days`` is only filled for ``test_in`` rows with a restricted test
    period, as ``;``-separated day numbers.
    """
    rows = []
    for role, ids in zip(
        MANIFEST_ROLES,
        (manifest.train_bs_ids, manifest.test_in_domain_ids, manifest.test_cross_domain_ids),
    ):
        for bs in sorted(ids):
            days = ""
            if role == "test_in" and bs in manifest.test_periods:
                days = ";".join(str(d) for d in sorted(manifest.test_periods[bs]))
            rows.append((bs, role, days))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("bs_id", "role", "days"))
        writer.writerows(rows)


def read_manifest(path: str | Path) -> SplitManifest:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    groups: dict[str, set[str]] = {role: set() for role in MANIFEST_ROLES}
    periods: dict[str, frozenset[int]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"bs_id", "role"} <= set(reader.fieldnames):
            raise IngestError(f"{path}: manifest needs columns bs_id, role")
        for i, row in enumerate(reader, start=1):
            role = row["role"].strip()
            if role not in groups:
                raise RowError(i, f"unknown role {role!r}, expected one of {MANIFEST_ROLES}")
            bs = row["bs_id"]
            groups[role].add(bs)
            days = (row.get("days") or "").strip()
            if days and role == "test_in":
                try:
                    periods[bs] = frozenset(int(d) for d in days.split(";") if d)
                except ValueError as exc:
                    raise RowError(i, f"bad days field {days!r}") from exc
    try:
        return SplitManifest(
            frozenset(groups["train"]),
            frozenset(groups["test_in"]),
            frozenset(groups["test_cross"]),
            periods,
        )
    except ValueError as exc:
        raise IngestError(f"{path}: {exc}") from exc


def split_by_manifest(ds: Dataset, manifest: SplitManifest) -> tuple[Dataset, Dataset]:
    """Partition ``ds`` into (train, test).

    A record is test data when its station is cross-domain, or in-domain and
    the record falls in the station's test period. Everything else from a
    training station is train data.
    """
    known = manifest.all_ids()
    missing = sorted({r.bs_id for r in ds} - known)
    if missing:
        raise IngestError(f"bs_id not in manifest: {', '.join(missing)}")
    train, test = [], []
    for r in ds:
        if manifest.is_test_record(r):
            test.append(r)
        elif r.bs_id in manifest.train_bs_ids:
            train.append(r)
        else:  # pragma: no cover - unreachable given the manifest invariants
            raise IngestError(f"bs_id {r.bs_id!r} has no role")
    return (
        Dataset(tuple(train), provenance=f"{ds.provenance}|train"),
        Dataset(tuple(test), provenance=f"{ds.provenance}|test"),
    )


def join_challenge_layout(
    bs_info: str | Path,
    cell_data: str | Path,
    energy_data: str | Path,
    key_columns: Mapping[str, str] | None = None,
    permissive: bool = False,
) -> tuple[Dataset, int]:
    """Inner-join the three-file challenge layout into records.

    ``bs_info`` holds one row per (station, cell) with hardware attributes,
    ``cell_data`` one row per (station, cell, time) with load and energy
    saving modes, ``energy_data`` one row per (station, time). Cells of a
    station-hour are ordered by cell name. Returns the dataset and the number
    of station-hours dropped because one side of the join was missing.
    """
    cols = {**DEFAULT_CHALLENGE_COLUMNS, **(key_columns or {})}
    info = pd.read_csv(bs_info)
    cells = pd.read_csv(cell_data)
    energy = pd.read_csv(energy_data)

    bs, cell, time = cols["bs_id"], cols["cell"], cols["time"]
    _require(info, bs_info, [bs, cell, cols["ru_type"], cols["mode"], cols["antennas"],
                             cols["frequency"], cols["bandwidth"], cols["tx_power"]])
    _require(cells, cell_data, [bs, cell, time, cols["load"],
                                *(cols[f"esmode{k}"] for k in range(1, N_ES_MODES + 1))])
    _require(energy, energy_data, [bs, time, cols["energy"]])

    _no_duplicates(info, [bs, cell], "station info")
    _no_duplicates(cells, [bs, cell, time], "cell data")
    _no_duplicates(energy, [bs, time], "energy data")

    for frame in (info, cells, energy):
        frame[bs] = frame[bs].astype(str)
    cells[cell] = cells[cell].astype(str)
    info[cell] = info[cell].astype(str)

    merged = cells.merge(info, on=[bs, cell], how="inner")
    cell_hours = set(zip(cells[bs], cells[time]))
    joined_hours = set(zip(merged[bs], merged[time]))
    energy_hours = set(zip(energy[bs], energy[time]))
    dropped = len((cell_hours | energy_hours) - (joined_hours & energy_hours))
    merged = merged.merge(energy[[bs, time, cols["energy"]]], on=[bs, time], how="inner")

    stamps = pd.to_datetime(merged[time])
    origin = stamps.min().normalize() if len(stamps) else None
    merged["_day"] = (stamps.dt.normalize() - origin).dt.days if origin is not None else 0
    merged["_hour"] = stamps.dt.hour
    merged = merged.sort_values([bs, "_day", "_hour", cell], kind="stable")

    records: list[MeasurementRecord] = []
    bad = 0
    for (station, _ts), group in merged.groupby([bs, time], sort=False):
        if len(group) > MAX_CELLS:
            raise IngestError(
                f"station {station!r} at {_ts!r} has {len(group)} cells (max {MAX_CELLS})"
            )
        first = group.iloc[0]
        cell_feats = tuple(
            CellFeatures(
                load=float(row[cols["load"]]),
                es_mode=tuple(float(row[cols[f"esmode{k}"]]) for k in range(1, N_ES_MODES + 1)),
                tx_power=float(row[cols["tx_power"]]),
                frequency=float(row[cols["frequency"]]),
                bandwidth=float(row[cols["bandwidth"]]),
            )
            for _, row in group.iterrows()
        )
        record = MeasurementRecord(
            bs_id=str(station),
            ru_type=str(first[cols["ru_type"]]),
            mode=str(first[cols["mode"]]),
            antennas=int(first[cols["antennas"]]),
            cells=cell_feats,
            day=int(first["_day"]),
            hour=int(first["_hour"]),
            energy=float(first[cols["energy"]]),
        )
        problems = validate_record(record)
        if problems:
            if not permissive:
                raise IngestError(f"station {station!r} at {_ts!r}: {'; '.join(problems)}")
            bad += 1
            continue
        records.append(record)
    if bad:
        log.warning("dropped %d invalid station-hours", bad)
    return Dataset(tuple(records), provenance="challenge-join"), dropped


def _require(frame: pd.DataFrame, path, columns: Iterable[str]) -> None:
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise IngestError(f"{path}: missing columns {missing}; found {list(frame.columns)}")


def _no_duplicates(frame: pd.DataFrame, keys: list[str], what: str) -> None:
    dup = frame.duplicated(subset=keys, keep=False)
    if dup.any():
        key = tuple(frame.loc[dup, keys].iloc[0])
        raise IngestError(f"ambiguous join: duplicate key {dict(zip(keys, key))} in {what}")
