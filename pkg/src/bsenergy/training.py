"""Masked-station training on the ratio-of-sums MAPE objective."""

from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .encoder import UNKNOWN_INDEX, EncodingPlan, bsid_columns, encode_many
from .model import EnergyModel, ModelConfig
from .records import Dataset

log = logging.getLogger(__name__)

SELECTION_MODES = ("validation_split", "test_set_paper_protocol")
MASK_MODES = ("bernoulli", "quota")


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


def mape(y, y_hat) -> float:
    """Sum of absolute errors over sum of absolute targets."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape or y.size == 0:
        raise ValueError(f"mape needs equal, non-empty shapes; got {y.shape} and {y_hat.shape}")
    denom = np.abs(y).sum()
    if denom == 0.0:
        raise ZeroDivisionError("sum of |y| is zero")
    return float(np.abs(y - y_hat).sum() / denom)


def mape_gradient(y, y_hat) -> np.ndarray:
    """d mape / d y_hat, using sign(0) = 0 at the kinks."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape or y.size == 0:
        raise ValueError(f"mape needs equal, non-empty shapes; got {y.shape} and {y_hat.shape}")
    denom = np.abs(y).sum()
    if denom == 0.0:
        raise ZeroDivisionError("sum of |y| is zero")
    return np.sign(y_hat - y) / denom


def apply_mask(bsid_indices: np.ndarray, mask_prob: float, rng: np.random.Generator,
               mode: str = "bernoulli") -> np.ndarray:
    """Replace station indices by the unknown index 0.

    ``bernoulli`` masks each entry independently with ``mask_prob``;
    ``quota`` masks exactly ``round(mask_prob * n)`` entries.
    """
    idx = np.asarray(bsid_indices)
    return np.where(draw_mask(idx.shape[0], mask_prob, rng, mode), UNKNOWN_INDEX, idx)


def draw_mask(n: int, mask_prob: float, rng: np.random.Generator, mode: str = "bernoulli") -> np.ndarray:
    if not 0.0 <= mask_prob <= 1.0:
        raise ValueError(f"mask_prob must be in [0, 1], got {mask_prob}")
    if mode == "bernoulli":
        return rng.random(n) < mask_prob
    if mode == "quota":
        mask = np.zeros(n, dtype=bool)
        mask[rng.permutation(n)[: int(round(mask_prob * n))]] = True
        return mask
    raise ValueError(f"mask mode must be one of {MASK_MODES}, got {mode!r}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1000
    batch_size: int = 512
    mask_prob: float = 0.30
    mask_mode: str = "bernoulli"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    selection: str = "validation_split"
    validation_fraction: float = 0.1
    shuffle: bool = True
    workers: int = 1
    scale_output: bool = False  # set the model's output scale to the mean training target

    def __post_init__(self) -> None:
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ValueError(f"mask_prob must be in [0, 1], got {self.mask_prob}")
        if self.batch_size < 1 or self.epochs < 1 or self.workers < 1:
            raise ValueError("epochs, batch_size and workers must be >= 1")
        if self.selection not in SELECTION_MODES:
            raise ValueError(f"selection must be one of {SELECTION_MODES}, got {self.selection!r}")
        if self.mask_mode not in MASK_MODES:
            raise ValueError(f"mask_mode must be one of {MASK_MODES}, got {self.mask_mode!r}")
        if self.selection == "validation_split" and not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must be in (0, 1)")


@dataclass
class EpochStats:
    epoch: int
    train_mape: float
    selection_mape: float
    masked_count: int
    seconds: float


@dataclass
class EncodedSet:
    """Encoded features, station indices and targets of a dataset."""

    X: np.ndarray
    idx: np.ndarray | None
    y: np.ndarray

    @classmethod
    def build(cls, ds: Dataset, plan: EncodingPlan) -> "EncodedSet":
        X, idx = encode_many(ds.records, plan)
        return cls(X, idx, np.asarray(ds.energies(), dtype=np.float64))

    def __len__(self) -> int:
        return self.y.shape[0]


@dataclass
class TrainResult:
    model: EnergyModel
    history: list[EpochStats]
    best_epoch: int

    @property
    def best_selection_mape(self) -> float:
        return self.history[self.best_epoch - 1].selection_mape


def validation_split(ds: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Hold out ``fraction`` of every station's records (at least one each).

    Stratifying by station keeps every training station in the fit set, so
    no embedding row is left untrained for a station that is later scored
    in-domain.
    """
    rng = nn.rng_stream(seed, "validation")
    rows_by_bs: dict[str, list[int]] = {}
    for i, r in enumerate(ds):
        rows_by_bs.setdefault(r.bs_id, []).append(i)
    held = np.zeros(len(ds), dtype=bool)
    for bs in sorted(rows_by_bs):
        rows = rows_by_bs[bs]
        if len(rows) < 2:
            continue
        k = min(max(1, int(round(fraction * len(rows)))), len(rows) - 1)
        held[np.asarray(rows)[rng.permutation(len(rows))[:k]]] = True
    return ds.subset(~held), ds.subset(held)


def _masked_inputs(data: EncodedSet, rows: np.ndarray, mask: np.ndarray, plan: EncodingPlan):
    X = data.X[rows]
    idx = None if data.idx is None else data.idx[rows].copy()
    m = mask[rows]
    if idx is not None:
        idx[m] = UNKNOWN_INDEX
    cols = bsid_columns(plan)
    if cols is not None and m.any():
        X[np.ix_(m, np.arange(cols.start, cols.stop))] = 0.0
    return X, idx


def _batch_step(model: EnergyModel, X: np.ndarray, idx: np.ndarray | None, y: np.ndarray,
                workers: int, pool: ThreadPoolExecutor | None) -> tuple[float, float]:
    """Forward + backward for one batch; returns (sum |err|, sum |y|)."""
    denom = np.abs(y).sum()
    if workers == 1 or pool is None or len(y) < 2 * workers:
        y_hat, cache = model.forward(X, idx)
        model.backward(np.sign(y_hat - y) / denom, cache)
        return float(np.abs(y - y_hat).sum()), float(denom)

    chunks = np.array_split(np.arange(len(y)), workers)

    def run(rows):
        y_hat, cache = model.forward(X[rows], None if idx is None else idx[rows])
        return y_hat, cache

    results = list(pool.map(run, chunks))
    err = 0.0
    # gradients reduced in chunk order for a fixed summation order
    for rows, (y_hat, cache) in zip(chunks, results):
        model.backward(np.sign(y_hat - y[rows]) / denom, cache)
        err += float(np.abs(y[rows] - y_hat).sum())
    return err, float(denom)


def train(
    train_ds: Dataset,
    plan: EncodingPlan,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    selection_ds: Dataset | None = None,
) -> TrainResult:
    """Train a model and return the epoch with the lowest selection MAPE.

    With ``selection="validation_split"`` the selection set is built by
    :func:`validation_split`. With
    ``test_set_paper_protocol`` the caller passes the test set as
    ``selection_ds`` and it is scored as-is.
    """
    cfg = train_cfg
    if cfg.selection == "validation_split":
        fit_ds, val_ds = validation_split(train_ds, cfg.validation_fraction, cfg.seed)
        sel = EncodedSet.build(val_ds, plan)
    else:
        if selection_ds is None or len(selection_ds) == 0:
            raise ValueError("test_set_paper_protocol needs a non-empty selection dataset")
        fit_ds = train_ds
        sel = EncodedSet.build(selection_ds, plan)
    if len(fit_ds) == 0:
        raise ValueError("no training records")
    if len(sel) == 0:
        raise ValueError("empty selection set")
    data = EncodedSet.build(fit_ds, plan)
    if cfg.scale_output:
        model_cfg = replace(model_cfg, output_scale=float(np.abs(data.y).mean()))

    model = EnergyModel(model_cfg, nn.rng_stream(cfg.seed, "init"))
    mask_rng = nn.rng_stream(cfg.seed, "masking")
    batch_rng = nn.rng_stream(cfg.seed, "batching")
    masks_bsid = plan.bsid_mode != "none"

    n = len(data)
    history: list[EpochStats] = []
    best_epoch, best_mape, best_params = 0, np.inf, None
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            order = batch_rng.permutation(n) if cfg.shuffle else np.arange(n)
            if masks_bsid and cfg.mask_prob > 0.0:
                mask = draw_mask(n, cfg.mask_prob, mask_rng, cfg.mask_mode)
            else:
                mask = np.zeros(n, dtype=bool)
            err_sum = y_sum = 0.0
            for b, start in enumerate(range(0, n, cfg.batch_size)):
                rows = order[start:start + cfg.batch_size]
                X, idx = _masked_inputs(data, rows, mask, plan)
                e, d = _batch_step(model, X, idx, data.y[rows], cfg.workers, pool)
                if not np.isfinite(e):
                    raise TrainingDiverged(epoch, b, e)
                nn.adam_step(model.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
                err_sum += e
                y_sum += d
            sel_mape = mape(sel.y, model.predict(sel.X, sel.idx))
            if not np.isfinite(sel_mape):
                raise TrainingDiverged(epoch, -1, sel_mape)
            stats = EpochStats(epoch, err_sum / y_sum, sel_mape, int(mask.sum()),
                               time.perf_counter() - t0)
            history.append(stats)
            if sel_mape < best_mape:
                best_epoch, best_mape, best_params = epoch, sel_mape, model.params.snapshot()
            log.debug("epoch %d train %.5f sel %.5f", epoch, stats.train_mape, sel_mape)
    finally:
        if pool is not None:
            pool.shutdown()

    best = EnergyModel(model_cfg)
    best.params.load_values(best_params)
    return TrainResult(best, history, best_epoch)


HISTORY_COLUMNS = ("epoch", "train_mape", "selection_mape", "masked_count", "seconds")


def write_history(history: Sequence[EpochStats], path: str | Path, include_time: bool = True) -> None:
    """Write per-epoch stats as CSV.

    Wall time is the only non-deterministic column; with
    ``include_time=False`` it is left empty so reruns hash identically.
    """
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HISTORY_COLUMNS)
        for s in history:
            writer.writerow([
                s.epoch, repr(s.train_mape), repr(s.selection_mape), s.masked_count,
                f"{s.seconds:.6f}" if include_time else "",
            ])
