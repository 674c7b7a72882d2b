from __future__ import annotations

import pytest

from bsenergy.records import CellFeatures, Dataset, MeasurementRecord


def make_record(bs_id="B1", *, ru_type="T1", mode="M1", antennas=4, cells=None, day=0, hour=0,
                energy=10.0, load=0.5, frequency=2600.0, bandwidth=20.0, tx_power=7.0, es=None):
    if cells is None:
        cells = (CellFeatures(load, tuple(es or (0.0,) * 6), tx_power, frequency, bandwidth),)
    return MeasurementRecord(bs_id, ru_type, mode, antennas, tuple(cells), day, hour, energy)


# vocabulary widths chosen so the encoded widths land on the target grid:
# one-hot deltas A:+5, B:4x(5-1)=+16, F:4x(9-1)=+32, 924 stations
GRID_WIDTHS = dict(ru_type=11, mode=3, day=8, hour=24, antennas=6, bandwidth=5, frequency=9, stations=924)


def width_grid_fixture() -> Dataset:
    w = GRID_WIDTHS
    antennas = (2, 4, 8, 16, 32, 64)
    bandwidths = (5.0, 10.0, 15.0, 20.0, 40.0)
    frequencies = (365.0, 426.98, 532.0, 611.0, 720.0, 874.0, 1800.0, 2100.0, 2600.0)
    records = []
    for i in range(w["stations"]):
        records.append(make_record(
            f"B{i:04d}",
            ru_type=f"Type{i % w['ru_type']}",
            mode=f"Mode{i % w['mode']}",
            antennas=antennas[i % len(antennas)],
            day=i % w["day"],
            hour=i % w["hour"],
            frequency=frequencies[i % len(frequencies)],
            bandwidth=bandwidths[i % len(bandwidths)],
            load=(i % 10) / 10.0,
            energy=10.0 + i % 7,
        ))
    return Dataset(tuple(records), "width-grid fixture")


@pytest.fixture(scope="session")
def width_grid_dataset() -> Dataset:
    return width_grid_fixture()


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def record_criterion(label: str, ok: bool, detail: str) -> bool:
    line = f"{'PASS' if ok else 'FAIL'} criterion {label}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
