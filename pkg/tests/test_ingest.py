import csv

import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from bsenergy import ingest
from bsenergy.ingest import (
    CANONICAL_COLUMNS,
    HeaderMismatch,
    IngestError,
    RowError,
    join_challenge_layout,
    parse_canonical,
    read_manifest,
    split_by_manifest,
    write_canonical,
    write_manifest,
)
from bsenergy.records import CellFeatures, Dataset, MeasurementRecord, SplitManifest

from conftest import make_record


def _three_records():
    return Dataset(tuple(make_record(f"B{i}", hour=i, energy=10.0 + i) for i in range(3)))


def test_canonical_header_layout():
    assert CANONICAL_COLUMNS[:7] == ("bs_id", "ru_type", "mode", "antennas", "day", "hour", "energy")
    assert CANONICAL_COLUMNS[7:17] == (
        "load_1", "esmode1_1", "esmode2_1", "esmode3_1", "esmode4_1", "esmode5_1", "esmode6_1",
        "txpower_1", "frequency_1", "bandwidth_1",
    )
    assert len(CANONICAL_COLUMNS) == 7 + 4 * 10


def test_parse_three_rows(tmp_path):
    path = tmp_path / "d.csv"
    write_canonical(_three_records(), path)
    ds = parse_canonical(path)
    assert len(ds) == 3
    assert ds.records == _three_records().records


def test_header_mismatch_names_expected_column(tmp_path):
    path = tmp_path / "d.csv"
    write_canonical(_three_records(), path)
    text = path.read_text().replace("load_1", "lod_1", 1)
    path.write_text(text)
    with pytest.raises(HeaderMismatch) as err:
        parse_canonical(path)
    assert "load_1" in str(err.value) and "lod_1" in str(err.value)


def test_negative_energy_reports_row(tmp_path):
    path = tmp_path / "d.csv"
    write_canonical(_three_records(), path)
    rows = list(csv.reader(path.open()))
    rows[2][6] = "-5"
    with path.open("w", newline="") as fh:
        csv.writer(fh).writerows(rows)
    with pytest.raises(RowError) as err:
        parse_canonical(path)
    assert err.value.row == 2
    assert "energy" in str(err.value)


def test_permissive_drops_invalid_rows(tmp_path):
    path = tmp_path / "d.csv"
    write_canonical(_three_records(), path)
    rows = list(csv.reader(path.open()))
    rows[1][5] = "24"
    with path.open("w", newline="") as fh:
        csv.writer(fh).writerows(rows)
    assert len(parse_canonical(path, permissive=True)) == 2


def test_unparseable_cell_names_column(tmp_path):
    path = tmp_path / "d.csv"
    write_canonical(_three_records(), path)
    rows = list(csv.reader(path.open()))
    rows[1][7] = "abc"
    with path.open("w", newline="") as fh:
        csv.writer(fh).writerows(rows)
    with pytest.raises(RowError, match="load_1"):
        parse_canonical(path)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        parse_canonical(tmp_path / "nope.csv")


# values with at most 10 significant digits survive the text round trip
decimal = st.decimals(min_value=0, max_value=1, places=6).map(float)
positive = st.decimals(min_value="0.001", max_value="99999", places=3).map(float)


@st.composite
def cells(draw):
    return CellFeatures(
        load=draw(decimal),
        es_mode=tuple(draw(st.lists(decimal, min_size=6, max_size=6))),
        tx_power=draw(positive),
        frequency=draw(positive),
        bandwidth=draw(positive),
    )


@st.composite
def records(draw):
    return MeasurementRecord(
        bs_id=draw(st.text(alphabet="ABCxyz019_-", min_size=1, max_size=8)),
        ru_type=draw(st.sampled_from(["Type1", "Type 2", "T,3"])),
        mode=draw(st.sampled_from(["Mode1", "Mode2"])),
        antennas=draw(st.integers(1, 64)),
        cells=tuple(draw(st.lists(cells(), min_size=1, max_size=4))),
        day=draw(st.integers(0, 400)),
        hour=draw(st.integers(0, 23)),
        energy=draw(positive),
    )


@settings(max_examples=40, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.lists(records(), min_size=1, max_size=6))
def test_round_trip_identity(tmp_path, recs):
    path = tmp_path / "rt.csv"
    write_canonical(recs, path)
    assert parse_canonical(path).records == tuple(recs)


def test_manifest_file_round_trip(tmp_path):
    manifest = SplitManifest(
        frozenset({"A", "B", "C"}), frozenset({"A", "B"}), frozenset({"Z"}), {"A": frozenset({6, 7})}
    )
    path = tmp_path / "m.csv"
    write_manifest(manifest, path)
    back = read_manifest(path)
    assert back == manifest
    assert next(csv.reader(path.open())) == ["bs_id", "role", "days"]


def test_manifest_two_column_file(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("bs_id,role\nA,train\nA,test_in\nZ,test_cross\n")
    back = read_manifest(path)
    assert back.train_bs_ids == {"A"} and back.test_cross_domain_ids == {"Z"}


def test_manifest_bad_role(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("bs_id,role\nA,validation\n")
    with pytest.raises(RowError):
        read_manifest(path)


def test_split_partition_by_station():
    recs = [make_record(f"T{i}") for i in range(6)] + [make_record(f"X{i}") for i in range(4)]
    manifest = SplitManifest(frozenset(f"T{i}" for i in range(6)), frozenset(), frozenset(f"X{i}" for i in range(4)))
    train, test = split_by_manifest(Dataset(tuple(recs)), manifest)
    assert (len(train), len(test)) == (6, 4)


def test_split_missing_station_named():
    manifest = SplitManifest(frozenset({"A"}), frozenset(), frozenset())
    with pytest.raises(IngestError, match="B"):
        split_by_manifest(Dataset((make_record("A"), make_record("B"))), manifest)


def test_split_without_cross_domain_is_in_domain_only():
    recs = [make_record("A", day=d) for d in range(4)]
    manifest = SplitManifest(frozenset({"A"}), frozenset({"A"}), frozenset(), {"A": frozenset({3})})
    train, test = split_by_manifest(Dataset(tuple(recs)), manifest)
    assert [r.day for r in train] == [0, 1, 2]
    assert [r.day for r in test] == [3]


@given(st.lists(st.tuples(st.sampled_from("ABCDE"), st.integers(0, 5)), min_size=1, max_size=30),
       st.sets(st.integers(0, 5)))
def test_split_disjoint_and_exhaustive(keys, test_days):
    recs = [make_record(b, day=d, hour=i % 24) for i, (b, d) in enumerate(keys)]
    manifest = SplitManifest(
        frozenset("ABC"), frozenset("AB"), frozenset("DE"), {"A": frozenset(test_days)} if test_days else {}
    )
    train, test = split_by_manifest(Dataset(tuple(recs)), manifest)
    assert len(train) + len(test) == len(recs)
    assert not set(map(id, train.records)) & set(map(id, test.records))
    assert all(r.bs_id in "ABC" for r in train)


# -- challenge layout --------------------------------------------------------

def _write(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


INFO_HEADER = ["BS", "CellName", "RUType", "Mode", "Frequency", "Bandwidth", "Antennas", "TXpower"]
CELL_HEADER = ["Time", "BS", "CellName", "load"] + [f"ESMode{k}" for k in range(1, 7)]
ENERGY_HEADER = ["Time", "BS", "Energy"]


def _challenge(tmp_path, cell_rows, energy_rows, info_rows=None):
    info_rows = info_rows or [["B_0", "Cell0", "Type1", "Mode2", 365.0, 20, 4, 6.875]]
    _write(tmp_path / "info.csv", INFO_HEADER, info_rows)
    _write(tmp_path / "cells.csv", CELL_HEADER, cell_rows)
    _write(tmp_path / "energy.csv", ENERGY_HEADER, energy_rows)
    return tmp_path / "info.csv", tmp_path / "cells.csv", tmp_path / "energy.csv"


def _cell_row(t, load=0.3, cell="Cell0", bs="B_0"):
    return [t, bs, cell, load, 0, 0, 0, 0, 0, 0]


def test_join_minimal(tmp_path):
    files = _challenge(
        tmp_path,
        [_cell_row("1/1/2023 1:00"), _cell_row("1/1/2023 2:00", 0.4)],
        [["1/1/2023 1:00", "B_0", 64.2], ["1/1/2023 2:00", "B_0", 65.0]],
    )
    ds, dropped = join_challenge_layout(*files)
    assert dropped == 0
    assert len(ds) == 2
    assert all(len(r.cells) == 1 for r in ds)
    assert [r.hour for r in ds] == [1, 2]
    assert ds.records[1].primary.load == 0.4
    assert ds.records[0].ru_type == "Type1" and ds.records[0].antennas == 4


def test_join_drops_unmatched_cell_rows(tmp_path):
    files = _challenge(
        tmp_path,
        [_cell_row("1/1/2023 1:00"), _cell_row("1/1/2023 2:00")],
        [["1/1/2023 1:00", "B_0", 64.2]],
    )
    ds, dropped = join_challenge_layout(*files)
    assert len(ds) == 1 and dropped == 1


def test_join_rejects_five_cells(tmp_path):
    info = [["B_0", f"Cell{c}", "Type1", "Mode2", 365.0, 20, 4, 6.875] for c in range(5)]
    cells = [_cell_row("1/1/2023 1:00", cell=f"Cell{c}") for c in range(5)]
    files = _challenge(tmp_path, cells, [["1/1/2023 1:00", "B_0", 64.2]], info)
    with pytest.raises(IngestError, match="5 cells"):
        join_challenge_layout(*files)


def test_join_duplicate_key_is_ambiguous(tmp_path):
    files = _challenge(
        tmp_path,
        [_cell_row("1/1/2023 1:00")],
        [["1/1/2023 1:00", "B_0", 64.2], ["1/1/2023 1:00", "B_0", 60.0]],
    )
    with pytest.raises(IngestError, match="duplicate key"):
        join_challenge_layout(*files)


def test_join_custom_column_names(tmp_path):
    _write(tmp_path / "i.csv", ["site", "cell", "ru", "m", "f", "bw", "ant", "tx"],
           [["S", "c1", "R", "M", 700.0, 10, 2, 7.0], ["S", "c0", "R", "M", 365.0, 20, 2, 7.0]])
    _write(tmp_path / "c.csv", ["ts", "site", "cell", "ld"] + [f"es{k}" for k in range(1, 7)],
           [["2023-01-02 05:00", "S", "c1", 0.1, 0, 0, 0, 0, 0, 0],
            ["2023-01-02 05:00", "S", "c0", 0.5, 0, 0, 0, 0, 0, 0]])
    _write(tmp_path / "e.csv", ["ts", "site", "kwh"], [["2023-01-02 05:00", "S", 12.5]])
    mapping = dict(bs_id="site", cell="cell", time="ts", ru_type="ru", mode="m", antennas="ant",
                   frequency="f", bandwidth="bw", tx_power="tx", load="ld", energy="kwh",
                   **{f"esmode{k}": f"es{k}" for k in range(1, 7)})
    ds, dropped = join_challenge_layout(tmp_path / "i.csv", tmp_path / "c.csv", tmp_path / "e.csv", mapping)
    (rec,) = ds.records
    assert [c.load for c in rec.cells] == [0.5, 0.1]  # cell-name order
    assert rec.hour == 5 and rec.day == 0 and rec.energy == 12.5


def test_default_challenge_columns_cover_all_fields():
    assert set(ingest.DEFAULT_CHALLENGE_COLUMNS) >= {"bs_id", "cell", "time", "energy", "esmode6"}
