"""Cohort-split MAPE reports and the ablation harness."""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .encoder import EncodingPlan, encode_many, fit, input_dim
from .model import EnergyModel, ModelConfig, parameter_count
from .records import Cohort, Dataset, SplitManifest, classify_sample
from .training import TrainConfig, TrainingDiverged, train

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CohortSums:
    abs_err: float
    abs_y: float
    count: int

    @property
    def mape(self) -> float:
        return self.abs_err / self.abs_y


@dataclass(frozen=True)
class EvalReport:
    cross: CohortSums | None
    in_domain: CohortSums | None

    @property
    def cross_domain_mape(self) -> float | None:
        return None if self.cross is None else self.cross.mape

    @property
    def in_domain_mape(self) -> float | None:
        return None if self.in_domain is None else self.in_domain.mape

    @property
    def average_mape(self) -> float:
        """Pooled ratio of sums over the cohorts present."""
        parts = [c for c in (self.cross, self.in_domain) if c is not None]
        return sum(c.abs_err for c in parts) / sum(c.abs_y for c in parts)

    def as_dict(self) -> dict[str, float | int | None]:
        out: dict[str, float | int | None] = {
            "cross_mape": self.cross_domain_mape,
            "in_mape": self.in_domain_mape,
            "avg_mape": self.average_mape,
        }
        for name, c in (("cross", self.cross), ("in", self.in_domain)):
            out[f"{name}_abs_err"] = None if c is None else c.abs_err
            out[f"{name}_abs_y"] = None if c is None else c.abs_y
            out[f"{name}_count"] = 0 if c is None else c.count
        return out


def report_from_predictions(y: np.ndarray, y_hat: np.ndarray, cohorts: Sequence[Cohort]) -> EvalReport:
    y = np.asarray(y, dtype=np.float64)
    err = np.abs(y - np.asarray(y_hat, dtype=np.float64))
    cohorts = np.asarray([c.value for c in cohorts])
    sums = {}
    for cohort in Cohort:
        sel = cohorts == cohort.value
        if sel.any():
            sums[cohort] = CohortSums(float(err[sel].sum()), float(np.abs(y[sel]).sum()), int(sel.sum()))
    if not sums:
        raise ValueError("no test records to evaluate")
    return EvalReport(sums.get(Cohort.CROSS_DOMAIN), sums.get(Cohort.IN_DOMAIN))


def evaluate(model: EnergyModel, plan: EncodingPlan, test: Dataset, manifest: SplitManifest) -> EvalReport:
    """Cross-domain, in-domain and pooled MAPE of ``model`` on ``test``."""
    cohorts = [classify_sample(r, manifest) for r in test]
    X, idx = encode_many(test.records, plan)
    y_hat = model.predict(X, idx)
    return report_from_predictions(np.asarray(test.energies()), y_hat, cohorts)


def evaluate_predictor(predict: Callable, test: Dataset, manifest: SplitManifest) -> EvalReport:
    """Evaluate an arbitrary per-record predictor, e.g. a ground-truth oracle."""
    cohorts = [classify_sample(r, manifest) for r in test]
    y_hat = np.array([predict(r) for r in test])
    return report_from_predictions(np.asarray(test.energies()), y_hat, cohorts)


# -- ablation ----------------------------------------------------------------

@dataclass(frozen=True)
class AblationRun:
    name: str
    onehot: str = "ABF"
    bsid_mode: str = "embedding"
    masking: bool = True
    arl: bool = True
    hidden_dims: tuple[int, ...] = (128, 64)
    family: str = ""

    def plan_template(self, normalize: bool = True) -> EncodingPlan:
        return EncodingPlan.from_toggles(self.onehot, self.bsid_mode, normalize)

    def signature(self) -> tuple:
        return (self.onehot.upper(), self.bsid_mode, self.masking, self.arl, tuple(self.hidden_dims))


@dataclass(frozen=True)
class AblationSpec:
    runs: tuple[AblationRun, ...]
    train: TrainConfig = field(default_factory=TrainConfig)
    normalize: bool = True
    embed_dim: int = 64
    arl_bottleneck: int = 12

    def __post_init__(self) -> None:
        names = [r.name for r in self.runs]
        if len(set(names)) != len(names):
            raise ValueError("ablation run names must be unique")
        if not self.runs:
            raise ValueError("ablation spec has no runs")


def paper_grid() -> tuple[AblationRun, ...]:
    """Three run families: station encoding, one-hot toggles, attention."""
    bsid = (
        AblationRun("embedding_rm", "ABF", "embedding", True, family="bsid"),
        AblationRun("embedding_no_rm", "ABF", "embedding", False, family="bsid"),
        AblationRun("onehot_rm", "ABF", "onehot", True, family="bsid"),
        AblationRun("onehot_no_rm", "ABF", "onehot", False, family="bsid"),
        AblationRun("no_bsid", "ABF", "none", False, family="bsid"),
    )
    combos = tuple(
        AblationRun(f"onehot_{label.lower()}", label, "embedding", True, family="onehot")
        for label in ("ABF", "AB", "AF", "BF", "A", "B", "F", "numerical")
    )
    attention = (
        AblationRun("arl", "ABF", "embedding", True, True, family="attention"),
        AblationRun("no_attention", "ABF", "embedding", True, False, family="attention"),
        AblationRun("deeper_mlp", "ABF", "embedding", True, False, (256, 128, 64), family="attention"),
    )
    return bsid + combos + attention


@dataclass
class AblationRow:
    run: AblationRun
    dim: int | None = None
    params: int | None = None
    report: EvalReport | None = None
    status: str = "ok"
    best_epoch: int | None = None


def _run_one(run: AblationRun, spec: AblationSpec, train_ds: Dataset, test_ds: Dataset,
             manifest: SplitManifest) -> AblationRow:
    row = AblationRow(run)
    try:
        plan = fit(run.plan_template(spec.normalize), train_ds)
        cfg = ModelConfig.for_plan(plan, hidden_dims=run.hidden_dims, embed_dim=spec.embed_dim,
                                   arl_bottleneck=spec.arl_bottleneck, arl_enabled=run.arl)
        row.dim = input_dim(plan, spec.embed_dim)
        row.params = parameter_count(cfg)
        tcfg = spec.train if run.masking else replace(spec.train, mask_prob=0.0)
        selection = test_ds if tcfg.selection == "test_set_paper_protocol" else None
        result = train(train_ds, plan, cfg, tcfg, selection_ds=selection)
        row.best_epoch = result.best_epoch
        row.report = evaluate(result.model, plan, test_ds, manifest)
    except (TrainingDiverged, FloatingPointError) as exc:
        log.warning("run %s diverged: %s", run.name, exc)
        row.status = "failed: diverged"
    except (ValueError, ZeroDivisionError) as exc:
        log.warning("run %s failed: %s", run.name, exc)
        row.status = f"failed: {exc}"
    return row


def run_ablation(spec: AblationSpec, train_ds: Dataset, test_ds: Dataset, manifest: SplitManifest,
                 jobs: int = 1) -> list[AblationRow]:
    """Train and evaluate every run of ``spec`` with the same seed.

    Runs with identical configuration are trained once; training is
    deterministic, so duplicates would reproduce the same row.
    """
    unique: dict[tuple, AblationRun] = {}
    for run in spec.runs:
        unique.setdefault(run.signature(), run)
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            futures = {sig: ex.submit(_run_one, run, spec, train_ds, test_ds, manifest)
                       for sig, run in unique.items()}
            done = {sig: f.result() for sig, f in futures.items()}
    else:
        done = {sig: _run_one(run, spec, train_ds, test_ds, manifest) for sig, run in unique.items()}
    return [replace(done[run.signature()], run=run) for run in spec.runs]


RESULT_COLUMNS = ("run_name", "dim", "params", "cross_mape", "in_mape", "avg_mape", "status")


def _num(x) -> str:
    return "" if x is None else repr(float(x))


def write_results(rows: Sequence[AblationRow], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RESULT_COLUMNS)
        for row in rows:
            rep = row.report
            writer.writerow([
                row.run.name,
                "" if row.dim is None else row.dim,
                "" if row.params is None else row.params,
                _num(rep.cross_domain_mape if rep else None),
                _num(rep.in_domain_mape if rep else None),
                _num(rep.average_mape if rep else None),
                row.status,
            ])


def write_report(report: EvalReport, path: str | Path) -> None:
    d = report.as_dict()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(d))
        writer.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in d.values()])


def read_spec_file(path: str | Path, train_cfg: TrainConfig) -> AblationSpec:
    """Read runs from a CSV with columns name, onehot, bsid, masking, arl[, hidden]."""
    runs = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            hidden = tuple(int(h) for h in (row.get("hidden") or "128-64").split("-") if h)
            runs.append(AblationRun(
                name=row["name"],
                onehot=row.get("onehot") or "ABF",
                bsid_mode=row.get("bsid") or "embedding",
                masking=_flag(row.get("masking", "1")),
                arl=_flag(row.get("arl", "1")),
                hidden_dims=hidden,
            ))
    return AblationSpec(tuple(runs), train_cfg)


def _flag(text: str | None) -> bool:
    return (text or "").strip().lower() in ("1", "true", "yes", "on")
