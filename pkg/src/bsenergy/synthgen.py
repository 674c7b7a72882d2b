"""Synthetic station fleets with known per-station energy fingerprints.

Hourly energy of station ``b`` follows the closed form::

    E = base_b + slope_b * load * txscale_b - sum_k delta_bk * esmode_k + noise

with ``load`` and ``esmode_k`` taken from the primary cell, floored at
``0.05 * base_b``. ``txscale_b`` is the primary cell's transmit power over
the fleet's reference power. Stations share hardware menus and parameter
means through their RU type and differ by a per-station jitter, which is the
fingerprint an embedding can learn and hardware features cannot explain.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import nn
from .records import N_ES_MODES, CellFeatures, Dataset, MeasurementRecord, SplitManifest

ANTENNA_MENU = (2, 4, 8, 16, 32, 64)
FREQUENCY_MENU = (365.0, 426.98, 532.0, 611.0, 720.0, 874.0)
BANDWIDTH_MENU = (5.0, 10.0, 20.0, 40.0)
TXPOWER_MENU = (6.0, 6.5, 7.0, 7.5, 8.0)
MODES = ("Mode1", "Mode2", "Mode3")
TX_REFERENCE = 7.0


@dataclass(frozen=True)
class SynthConfig:
    n_bs: int = 50
    n_rutypes: int = 4
    days: int = 8
    hours_per_day: int = 24
    cross_domain_fraction: float = 0.2
    in_domain_test_days: int = 2
    base_range: tuple[float, float] = (15.0, 45.0)
    slope_range: tuple[float, float] = (8.0, 30.0)
    base_jitter: float = 0.12  # relative sd of a station's base around its RU type mean
    slope_jitter: float = 0.12
    delta_range: tuple[float, float] = (0.0, 3.0)
    noise: float = 0.01  # noise sd as a fraction of the fleet's mean noiseless energy
    load_mean_range: tuple[float, float] = (0.15, 0.45)
    load_amplitude_range: tuple[float, float] = (0.05, 0.3)
    load_jitter: float = 0.08
    second_cell_prob: float = 0.2
    hardware_options: int = 1  # antenna/frequency/bandwidth choices per RU type
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_bs < 2:
            raise ValueError("n_bs must be >= 2")
        if self.n_rutypes < 1 or self.days < 1:
            raise ValueError("n_rutypes and days must be >= 1")
        if self.hours_per_day != 24:
            raise ValueError("hours_per_day is fixed at 24")
        if not 0.0 < self.cross_domain_fraction < 1.0:
            raise ValueError("cross_domain_fraction must be in (0, 1)")
        if self.noise < 0.0:
            raise ValueError("noise must be >= 0")
        if not 1 <= self.hardware_options <= 4:
            raise ValueError("hardware_options must be in [1, 4]")
        if not 0 <= self.in_domain_test_days < self.days:
            raise ValueError("in_domain_test_days must be in [0, days)")


@dataclass(frozen=True)
class StationTruth:
    bs_id: str
    ru_type: str
    base: float
    slope: float
    txscale: float
    delta: tuple[float, ...]
    antennas: int
    frequency: float
    bandwidth: float
    tx_power: float
    mode: str


@dataclass(frozen=True)
class GroundTruth:
    stations: Mapping[str, StationTruth]
    noise_sd: float = 0.0

    def __getitem__(self, bs_id: str) -> StationTruth:
        try:
            return self.stations[bs_id]
        except KeyError:
            raise KeyError(f"bs_id {bs_id!r} not in ground truth") from None


def oracle_energy(gt: GroundTruth, record: MeasurementRecord) -> float:
    """Noiseless energy of ``record`` under the fleet's closed-form model."""
    s = gt[record.bs_id]
    cell = record.primary
    energy = s.base + s.slope * cell.load * s.txscale
    energy -= sum(d * e for d, e in zip(s.delta, cell.es_mode))
    return max(energy, 0.05 * s.base)


@dataclass
class _RuType:
    name: str
    base: float
    slope: float
    delta: np.ndarray
    antennas: tuple[int, ...]
    frequencies: tuple[float, ...]
    bandwidths: tuple[float, ...]
    tx_powers: tuple[float, ...]
    mode: str


def _ru_types(cfg: SynthConfig, rng: np.random.Generator) -> list[_RuType]:
    out = []
    for t in range(cfg.n_rutypes):
        out.append(_RuType(
            name=f"Type{t + 1}",
            base=float(rng.uniform(*cfg.base_range)),
            slope=float(rng.uniform(*cfg.slope_range)),
            delta=rng.uniform(*cfg.delta_range, size=N_ES_MODES),
            antennas=tuple(int(a) for a in rng.choice(ANTENNA_MENU, size=cfg.hardware_options, replace=False)),
            frequencies=tuple(float(f) for f in rng.choice(FREQUENCY_MENU, size=cfg.hardware_options, replace=False)),
            bandwidths=tuple(float(b) for b in rng.choice(BANDWIDTH_MENU, size=cfg.hardware_options, replace=False)),
            tx_powers=tuple(float(p) for p in rng.choice(TXPOWER_MENU, size=2, replace=False)),
            mode=MODES[t % len(MODES)],
        ))
    return out


def _es_modes(load: float, rng: np.random.Generator) -> tuple[float, ...]:
    # saving modes engage mostly at low load
    modes = np.zeros(N_ES_MODES)
    if load < 0.3:
        active = rng.random(N_ES_MODES) < np.linspace(0.5, 0.1, N_ES_MODES)
        modes[active] = rng.uniform(0.0, 1.0, size=int(active.sum()))
    return tuple(float(m) for m in modes)


def generate(cfg: SynthConfig = SynthConfig()) -> tuple[Dataset, SplitManifest, GroundTruth]:
    rng = nn.rng_stream(cfg.seed, "synthgen")
    types = _ru_types(cfg, rng)
    type_of = rng.permutation(np.arange(cfg.n_bs) % cfg.n_rutypes)

    stations: dict[str, StationTruth] = {}
    profiles = {}
    for b in range(cfg.n_bs):
        ty = types[type_of[b]]
        bs_id = f"BS{b:03d}"
        tx_power = float(rng.choice(ty.tx_powers))
        stations[bs_id] = StationTruth(
            bs_id=bs_id,
            ru_type=ty.name,
            base=ty.base * max(0.2, 1.0 + cfg.base_jitter * rng.standard_normal()),
            slope=ty.slope * max(0.2, 1.0 + cfg.slope_jitter * rng.standard_normal()),
            txscale=tx_power / TX_REFERENCE,
            delta=tuple(float(d) for d in ty.delta * rng.uniform(0.8, 1.2, size=N_ES_MODES)),
            antennas=int(rng.choice(ty.antennas)),
            frequency=float(rng.choice(ty.frequencies)),
            bandwidth=float(rng.choice(ty.bandwidths)),
            tx_power=tx_power,
            mode=ty.mode,
        )
        profiles[bs_id] = (
            rng.uniform(*cfg.load_mean_range),
            rng.uniform(*cfg.load_amplitude_range),
            rng.uniform(0.0, 24.0),
            rng.random() < cfg.second_cell_prob,
        )

    gt_noiseless = GroundTruth(stations)
    records = []
    for bs_id, s in stations.items():
        level, amp, phase, two_cells = profiles[bs_id]
        for day in range(cfg.days):
            for hour in range(cfg.hours_per_day):
                wave = np.sin(2.0 * np.pi * (hour - phase) / 24.0)
                load = float(np.clip(level + amp * wave + rng.uniform(-cfg.load_jitter, cfg.load_jitter), 0.0, 1.0))
                cells = [CellFeatures(load, _es_modes(load, rng), s.tx_power, s.frequency, s.bandwidth)]
                if two_cells:
                    load2 = float(np.clip(0.5 * load * rng.uniform(0.5, 1.0), 0.0, 1.0))
                    cells.append(CellFeatures(load2, (0.0,) * N_ES_MODES, s.tx_power,
                                              s.frequency * 2.0, s.bandwidth))
                rec = MeasurementRecord(bs_id, s.ru_type, s.mode, s.antennas, tuple(cells), day, hour, 1.0)
                records.append(rec)

    clean = np.array([oracle_energy(gt_noiseless, r) for r in records])
    noise_sd = cfg.noise * float(clean.mean())
    eps = rng.normal(0.0, noise_sd, size=clean.size) if noise_sd > 0 else np.zeros(clean.size)
    floors = np.array([0.05 * stations[r.bs_id].base for r in records])
    energy = np.maximum(clean + eps, floors)
    records = [
        MeasurementRecord(r.bs_id, r.ru_type, r.mode, r.antennas, r.cells, r.day, r.hour, float(e))
        for r, e in zip(records, energy)
    ]

    manifest = _manifest(cfg, stations, rng)
    ds = Dataset(tuple(records), provenance=f"synthgen:seed={cfg.seed}")
    return ds, manifest, GroundTruth(stations, noise_sd)


def _manifest(cfg: SynthConfig, stations: Mapping[str, StationTruth], rng: np.random.Generator) -> SplitManifest:
    # cross-domain stations drawn round-robin across RU types
    by_type: dict[str, list[str]] = {}
    for bs_id, s in stations.items():
        by_type.setdefault(s.ru_type, []).append(bs_id)
    pools = [list(rng.permutation(ids)) for _, ids in sorted(by_type.items())]
    n_cross = min(max(1, int(round(cfg.cross_domain_fraction * len(stations)))), len(stations) - 1)
    cross: list[str] = []
    while len(cross) < n_cross:
        for pool in pools:
            if pool and len(cross) < n_cross:
                cross.append(str(pool.pop()))
    train = sorted(set(stations) - set(cross))
    periods = {}
    if cfg.in_domain_test_days:
        for bs_id in train:
            days = rng.choice(cfg.days, size=cfg.in_domain_test_days, replace=False)
            periods[bs_id] = frozenset(int(d) for d in days)
    return SplitManifest(
        frozenset(train),
        frozenset(train) if cfg.in_domain_test_days else frozenset(),
        frozenset(cross),
        periods,
    )


GT_COLUMNS = (
    "bs_id", "ru_type", "base", "slope", "txscale",
    *(f"delta{k}" for k in range(1, N_ES_MODES + 1)),
    "antennas", "frequency", "bandwidth", "tx_power", "mode",
)


def write_ground_truth(gt: GroundTruth, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(GT_COLUMNS)
        for s in gt.stations.values():
            writer.writerow([
                s.bs_id, s.ru_type, repr(s.base), repr(s.slope), repr(s.txscale),
                *(repr(d) for d in s.delta),
                s.antennas, repr(s.frequency), repr(s.bandwidth), repr(s.tx_power), s.mode,
            ])


def read_ground_truth(path: str | Path) -> GroundTruth:
    stations = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            stations[row["bs_id"]] = StationTruth(
                bs_id=row["bs_id"],
                ru_type=row["ru_type"],
                base=float(row["base"]),
                slope=float(row["slope"]),
                txscale=float(row["txscale"]),
                delta=tuple(float(row[f"delta{k}"]) for k in range(1, N_ES_MODES + 1)),
                antennas=int(row["antennas"]),
                frequency=float(row["frequency"]),
                bandwidth=float(row["bandwidth"]),
                tx_power=float(row["tx_power"]),
                mode=row["mode"],
            )
    return GroundTruth(stations)
