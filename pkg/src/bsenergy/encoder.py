"""Feature encoding: records to dense vectors plus a station index.

Vector layout, in this order::

    ru_type one-hot | mode one-hot | antennas (numeric or one-hot)
    | 4 x cell block [load, esmode1..6, txpower, frequency, bandwidth]
    | day one-hot | hour one-hot | bs_id one-hot (only when bsid_mode="onehot")

Frequency and bandwidth inside a cell block are a single z-scored column or a
one-hot block depending on the plan toggles. The vocabulary of a per-cell
feature is shared by all four slots. Padded (inactive) cells encode as an
all-zero block and out-of-vocabulary categories as an all-zero one-hot.

The station index is 0 for unknown stations and 1..N for the N stations seen
while fitting, in sorted order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .records import MAX_CELLS, N_ES_MODES, Dataset, MeasurementRecord

BSID_MODES = ("embedding", "onehot", "none")
UNKNOWN_INDEX = 0
SIDECAR_VERSION = 1

CELL_NUMERIC = ("load", *(f"esmode{k}" for k in range(1, N_ES_MODES + 1)), "txpower")


@dataclass(frozen=True)
class Vocabulary:
    feature: str
    values: tuple
    reserved_unknown: bool = False

    def __post_init__(self) -> None:
        if len(set(self.values)) != len(self.values):
            raise ValueError(f"duplicate values in vocabulary {self.feature!r}")
        object.__setattr__(self, "_lookup", {v: i for i, v in enumerate(self.values)})

    def __len__(self) -> int:
        return len(self.values)

    def index(self, value) -> int | None:
        return self._lookup.get(value)

    @classmethod
    def from_values(cls, feature: str, values: Iterable, reserved_unknown: bool = False) -> "Vocabulary":
        return cls(feature, tuple(sorted(set(values))), reserved_unknown)


@dataclass(frozen=True)
class EncodingPlan:
    """How each feature becomes vector components, and the fitted state.

    Build an unfitted template with :meth:`from_toggles` or the constructor,
    then call :func:`fit`.
    """

    onehot_antennas: bool = True
    onehot_bandwidth: bool = True
    onehot_frequency: bool = True
    bsid_mode: str = "embedding"
    normalize: bool = True
    vocabularies: dict[str, Vocabulary] = field(default_factory=dict)
    bsid_vocab: Vocabulary | None = None
    stats: dict[str, tuple[float, float]] = field(default_factory=dict)
    cell_slots: int = MAX_CELLS

    def __post_init__(self) -> None:
        if self.bsid_mode not in BSID_MODES:
            raise ValueError(f"bsid_mode must be one of {BSID_MODES}, got {self.bsid_mode!r}")
        if self.cell_slots != MAX_CELLS:
            raise ValueError(f"cell_slots is fixed at {MAX_CELLS}")

    @classmethod
    def from_toggles(cls, onehot: str = "ABF", bsid_mode: str = "embedding", normalize: bool = True) -> "EncodingPlan":
        """Template from an ablation label such as ``"ABF"``, ``"BF"`` or ``"numerical"``."""
        flags = "" if onehot.lower() in ("numerical", "none", "") else onehot.upper()
        unknown = set(flags) - set("ABF")
        if unknown:
            raise ValueError(f"unknown one-hot toggles {sorted(unknown)} in {onehot!r}")
        return cls(
            onehot_antennas="A" in flags,
            onehot_bandwidth="B" in flags,
            onehot_frequency="F" in flags,
            bsid_mode=bsid_mode,
            normalize=normalize,
        )

    @property
    def toggles(self) -> str:
        s = "A" * self.onehot_antennas + "B" * self.onehot_bandwidth + "F" * self.onehot_frequency
        return s or "numerical"

    @property
    def is_fitted(self) -> bool:
        return bool(self.vocabularies)

    @property
    def n_bsids(self) -> int:
        return len(self.bsid_vocab) if self.bsid_vocab is not None else 0

    def template(self) -> "EncodingPlan":
        return EncodingPlan(
            self.onehot_antennas, self.onehot_bandwidth, self.onehot_frequency,
            self.bsid_mode, self.normalize,
        )


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    bsid_index: int | None


def _numeric_features(plan: EncodingPlan) -> list[str]:
    names = [] if plan.onehot_antennas else ["antennas"]
    names += list(CELL_NUMERIC)
    if not plan.onehot_frequency:
        names.append("frequency")
    if not plan.onehot_bandwidth:
        names.append("bandwidth")
    return names


def fit(template: EncodingPlan, train: Dataset) -> EncodingPlan:
    """Fit vocabularies, station index and normalization statistics on ``train``."""
    records = list(train)
    if not records:
        raise ValueError("cannot fit an encoding plan on an empty dataset")
    active = [c for r in records for c in r.cells if c.is_active]

    vocabs = {
        "ru_type": Vocabulary.from_values("ru_type", (r.ru_type for r in records)),
        "mode": Vocabulary.from_values("mode", (r.mode for r in records)),
        "day": Vocabulary.from_values("day", (r.day for r in records)),
        "hour": Vocabulary.from_values("hour", (r.hour for r in records)),
    }
    if template.onehot_antennas:
        vocabs["antennas"] = Vocabulary.from_values("antennas", (r.antennas for r in records))
    if template.onehot_frequency:
        vocabs["frequency"] = Vocabulary.from_values("frequency", (c.frequency for c in active))
    if template.onehot_bandwidth:
        vocabs["bandwidth"] = Vocabulary.from_values("bandwidth", (c.bandwidth for c in active))

    columns = {
        "antennas": [float(r.antennas) for r in records],
        "load": [c.load for c in active],
        "txpower": [c.tx_power for c in active],
        "frequency": [c.frequency for c in active],
        "bandwidth": [c.bandwidth for c in active],
    }
    for k in range(N_ES_MODES):
        columns[f"esmode{k + 1}"] = [c.es_mode[k] for c in active]
    stats = {}
    for name in _numeric_features(template):
        values = np.asarray(columns[name], dtype=np.float64)
        if template.normalize and values.size:
            mean = float(values.mean())
            std = float(values.std())
            stats[name] = (mean, std if std > 0.0 else 1.0)
        else:
            stats[name] = (0.0, 1.0)

    bsid_vocab = None
    if template.bsid_mode != "none":
        bsid_vocab = Vocabulary.from_values("bs_id", (r.bs_id for r in records), reserved_unknown=True)
    return replace(template, vocabularies=vocabs, bsid_vocab=bsid_vocab, stats=stats)


def layout(plan: EncodingPlan) -> list[tuple[str, int]]:
    """Ordered ``(block name, width)`` pairs making up an encoded vector."""
    _check_fitted(plan)
    v = plan.vocabularies
    blocks = [("ru_type", len(v["ru_type"])), ("mode", len(v["mode"]))]
    blocks.append(("antennas", len(v["antennas"]) if plan.onehot_antennas else 1))
    for c in range(1, plan.cell_slots + 1):
        blocks += [(f"{name}_{c}", 1) for name in CELL_NUMERIC]
        blocks.append((f"frequency_{c}", len(v["frequency"]) if plan.onehot_frequency else 1))
        blocks.append((f"bandwidth_{c}", len(v["bandwidth"]) if plan.onehot_bandwidth else 1))
    blocks += [("day", len(v["day"])), ("hour", len(v["hour"]))]
    if plan.bsid_mode == "onehot":
        blocks.append(("bs_id", plan.n_bsids))
    return blocks


def dimension(plan: EncodingPlan) -> int:
    """Length of every vector produced by :func:`encode` under ``plan``."""
    return sum(width for _, width in layout(plan))


def input_dim(plan: EncodingPlan, embed_dim: int = 64) -> int:
    """Width of the network input: encoded features plus the station embedding."""
    return dimension(plan) + (embed_dim if plan.bsid_mode == "embedding" else 0)


def bsid_columns(plan: EncodingPlan) -> slice | None:
    """Column slice of the station one-hot block, if the plan has one."""
    if plan.bsid_mode != "onehot":
        return None
    d = dimension(plan)
    return slice(d - plan.n_bsids, d)


def bsid_index(bs_id: str, plan: EncodingPlan) -> int:
    _check_fitted(plan)
    if plan.bsid_vocab is None:
        raise ValueError("plan has no station vocabulary (bsid_mode='none')")
    pos = plan.bsid_vocab.index(bs_id)
    return UNKNOWN_INDEX if pos is None else pos + 1


def _check_fitted(plan: EncodingPlan) -> None:
    if not plan.is_fitted:
        raise ValueError("encoding plan is not fitted")


class _Writer:
    """Fills one row of the feature matrix block by block."""

    __slots__ = ("row", "pos")

    def __init__(self, row: np.ndarray):
        self.row = row
        self.pos = 0

    def onehot(self, vocab: Vocabulary, value, active: bool = True) -> None:
        if active:
            i = vocab.index(value)
            if i is not None:
                self.row[self.pos + i] = 1.0
        self.pos += len(vocab)

    def scalar(self, value: float, mean_std: tuple[float, float], active: bool = True) -> None:
        if active:
            mean, std = mean_std
            self.row[self.pos] = (value - mean) / std
        self.pos += 1


def encode_many(records: Sequence[MeasurementRecord], plan: EncodingPlan) -> tuple[np.ndarray, np.ndarray | None]:
    """Encode records into a ``[n, dimension]`` matrix and station indices.

    The index array is ``None`` unless ``bsid_mode == "embedding"``.
    """
    _check_fitted(plan)
    v, st = plan.vocabularies, plan.stats
    X = np.zeros((len(records), dimension(plan)), dtype=np.float64)
    for n, r in enumerate(records):
        w = _Writer(X[n])
        w.onehot(v["ru_type"], r.ru_type)
        w.onehot(v["mode"], r.mode)
        if plan.onehot_antennas:
            w.onehot(v["antennas"], r.antennas)
        else:
            w.scalar(float(r.antennas), st["antennas"])
        for cell in r.padded_cells():
            on = cell.is_active
            w.scalar(cell.load, st["load"], on)
            for k in range(N_ES_MODES):
                w.scalar(cell.es_mode[k], st[f"esmode{k + 1}"], on)
            w.scalar(cell.tx_power, st["txpower"], on)
            if plan.onehot_frequency:
                w.onehot(v["frequency"], cell.frequency, on)
            else:
                w.scalar(cell.frequency, st["frequency"], on)
            if plan.onehot_bandwidth:
                w.onehot(v["bandwidth"], cell.bandwidth, on)
            else:
                w.scalar(cell.bandwidth, st["bandwidth"], on)
        w.onehot(v["day"], r.day)
        w.onehot(v["hour"], r.hour)
        if plan.bsid_mode == "onehot":
            w.onehot(plan.bsid_vocab, r.bs_id)
    idx = None
    if plan.bsid_mode == "embedding":
        idx = np.fromiter((bsid_index(r.bs_id, plan) for r in records), dtype=np.int64, count=len(records))
    return X, idx


def encode(record: MeasurementRecord, plan: EncodingPlan) -> FeatureVector:
    X, idx = encode_many([record], plan)
    return FeatureVector(X[0], None if idx is None else int(idx[0]))


# -- sidecar ---------------------------------------------------------------

def _json_value(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    return x


def plan_to_dict(plan: EncodingPlan) -> dict[str, Any]:
    _check_fitted(plan)
    return {
        "version": SIDECAR_VERSION,
        "onehot_antennas": plan.onehot_antennas,
        "onehot_bandwidth": plan.onehot_bandwidth,
        "onehot_frequency": plan.onehot_frequency,
        "bsid_mode": plan.bsid_mode,
        "normalize": plan.normalize,
        "cell_slots": plan.cell_slots,
        "layout": [[name, width] for name, width in layout(plan)],
        "vocabularies": {k: [_json_value(x) for x in voc.values] for k, voc in plan.vocabularies.items()},
        "bsid_vocab": None if plan.bsid_vocab is None else list(plan.bsid_vocab.values),
        "stats": {k: [m, s] for k, (m, s) in plan.stats.items()},
    }


def plan_from_dict(d: dict[str, Any]) -> EncodingPlan:
    if d.get("version") != SIDECAR_VERSION:
        raise ValueError(f"unsupported encoding sidecar version {d.get('version')!r}")
    vocabs = {k: Vocabulary(k, tuple(vals)) for k, vals in d["vocabularies"].items()}
    bsid = d.get("bsid_vocab")
    plan = EncodingPlan(
        onehot_antennas=d["onehot_antennas"],
        onehot_bandwidth=d["onehot_bandwidth"],
        onehot_frequency=d["onehot_frequency"],
        bsid_mode=d["bsid_mode"],
        normalize=d["normalize"],
        vocabularies=vocabs,
        bsid_vocab=None if bsid is None else Vocabulary("bs_id", tuple(bsid), reserved_unknown=True),
        stats={k: (float(m), float(s)) for k, (m, s) in d["stats"].items()},
        cell_slots=d.get("cell_slots", MAX_CELLS),
    )
    if [list(b) for b in layout(plan)] != d["layout"]:
        raise ValueError("sidecar layout does not match its vocabularies")
    return plan


def dumps_plan(plan: EncodingPlan) -> str:
    return json.dumps(plan_to_dict(plan), indent=1, sort_keys=True)


def save_plan(plan: EncodingPlan, path: str | Path) -> None:
    Path(path).write_text(dumps_plan(plan), encoding="utf-8")


def load_plan(path: str | Path) -> EncodingPlan:
    return plan_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
