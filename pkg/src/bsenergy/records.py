"""In-memory telemetry records, datasets and split manifests.

One :class:`MeasurementRecord` is one base-station hour. Records are plain
frozen dataclasses; they are not validated on construction so that invalid
rows can still be represented and reported by :func:`validate_record`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Iterator, Mapping

MAX_CELLS = 4
N_ES_MODES = 6


class MembershipError(LookupError):
    """A bs_id is not covered by the split manifest."""


class Cohort(str, Enum):
    IN_DOMAIN = "in_domain"
    CROSS_DOMAIN = "cross_domain"


@dataclass(frozen=True)
class CellFeatures:
    load: float
    es_mode: tuple[float, ...]
    tx_power: float
    frequency: float
    bandwidth: float

    @classmethod
    def inactive(cls) -> "CellFeatures":
        return cls(0.0, (0.0,) * N_ES_MODES, 0.0, 0.0, 0.0)

    @property
    def is_active(self) -> bool:
        return any(
            v != 0.0
            for v in (self.load, self.tx_power, self.frequency, self.bandwidth, *self.es_mode)
        )


@dataclass(frozen=True)
class MeasurementRecord:
    bs_id: str
    ru_type: str
    mode: str
    antennas: int
    cells: tuple[CellFeatures, ...]
    day: int
    hour: int
    energy: float

    @property
    def primary(self) -> CellFeatures:
        return self.cells[0]

    def padded_cells(self) -> tuple[CellFeatures, ...]:
        """Cells padded with inactive slots up to the fixed width of four."""
        missing = MAX_CELLS - len(self.cells)
        return self.cells + (CellFeatures.inactive(),) * max(missing, 0)


@dataclass(frozen=True)
class Dataset:
    records: tuple[MeasurementRecord, ...]
    provenance: str = ""

    def __post_init__(self) -> None:
        if not isinstance(self.records, tuple):
            object.__setattr__(self, "records", tuple(self.records))

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[MeasurementRecord]:
        return iter(self.records)

    def bs_ids(self) -> set[str]:
        return {r.bs_id for r in self.records}

    def subset(self, keep: Iterable[bool], provenance: str | None = None) -> "Dataset":
        recs = tuple(r for r, k in zip(self.records, keep) if k)
        return Dataset(recs, self.provenance if provenance is None else provenance)

    def energies(self) -> list[float]:
        return [r.energy for r in self.records]


@dataclass(frozen=True)
class SplitManifest:
    """Which base stations train, and which are tested in- or cross-domain.

    ``test_periods`` optionally restricts the in-domain test records of a
    station to the listed days; its other days are training data. An
    in-domain station without an entry contributes all its records to test.
    """

    train_bs_ids: frozenset[str]
    test_in_domain_ids: frozenset[str]
    test_cross_domain_ids: frozenset[str]
    test_periods: Mapping[str, frozenset[int]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name in ("train_bs_ids", "test_in_domain_ids", "test_cross_domain_ids"):
            object.__setattr__(self, name, frozenset(getattr(self, name)))
        object.__setattr__(
            self, "test_periods", {k: frozenset(v) for k, v in self.test_periods.items()}
        )
        overlap = self.test_cross_domain_ids & self.train_bs_ids
        if overlap:
            raise ValueError(f"cross-domain stations also in train: {sorted(overlap)}")
        stray = self.test_in_domain_ids - self.train_bs_ids
        if stray:
            raise ValueError(f"in-domain test stations missing from train: {sorted(stray)}")

    def all_ids(self) -> frozenset[str]:
        return self.train_bs_ids | self.test_in_domain_ids | self.test_cross_domain_ids

    def is_test_record(self, record: MeasurementRecord) -> bool:
        if record.bs_id in self.test_cross_domain_ids:
            return True
        if record.bs_id in self.test_in_domain_ids:
            days = self.test_periods.get(record.bs_id)
            return not days or record.day in days
        return False


def classify_sample(record: MeasurementRecord, manifest: SplitManifest) -> Cohort:
    """Cohort of a test record: cross-domain iff its station never trained."""
    in_cross = record.bs_id in manifest.test_cross_domain_ids
    in_domain = record.bs_id in manifest.test_in_domain_ids
    if in_cross == in_domain:
        raise MembershipError(
            f"bs_id {record.bs_id!r} must be in exactly one test set "
            f"(cross={in_cross}, in_domain={in_domain})"
        )
    return Cohort.CROSS_DOMAIN if in_cross else Cohort.IN_DOMAIN


def _cell_violations(i: int, cell: CellFeatures) -> list[str]:
    out = []
    if not 0.0 <= cell.load <= 1.0:
        out.append(f"cells[{i}].load out of [0,1]")
    if len(cell.es_mode) != N_ES_MODES:
        out.append(f"cells[{i}].es_mode must have {N_ES_MODES} values")
    for k, v in enumerate(cell.es_mode, start=1):
        if not v >= 0.0:
            out.append(f"cells[{i}].esmode{k} negative")
    if cell.is_active:
        if not cell.frequency > 0.0:
            out.append(f"cells[{i}].frequency must be > 0 for an active cell")
        if not cell.bandwidth > 0.0:
            out.append(f"cells[{i}].bandwidth must be > 0 for an active cell")
    return out


def validate_record(record: MeasurementRecord) -> list[str]:
    """Return every invariant violation of ``record``; an empty list means valid."""
    violations: list[str] = []
    if not 1 <= len(record.cells) <= MAX_CELLS:
        violations.append(f"cells count {len(record.cells)} out of [1,{MAX_CELLS}]")
    for i, cell in enumerate(record.cells[:MAX_CELLS]):
        violations.extend(_cell_violations(i, cell))
    if record.antennas < 1:
        violations.append("antennas must be a positive integer")
    if record.day < 0:
        violations.append("day must be >= 0")
    if not 0 <= record.hour <= 23:
        violations.append("hour out of range")
    if not record.energy > 0.0:
        violations.append("energy must be > 0")
    return violations
