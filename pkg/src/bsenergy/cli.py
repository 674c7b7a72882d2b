"""Command-line entry point.

Every command that writes into ``--out`` also leaves a ``manifest.txt``
there: the fully resolved arguments plus SHA-256 digests of inputs and
outputs. ``bsenergy rerun DIR/manifest.txt`` replays it.

Any flag default can be overridden with an environment variable named
``BSENERGY_<DEST>``, e.g. ``BSENERGY_EPOCHS=150`` or ``BSENERGY_SEED=3``.

Exit codes: 0 success, 2 usage or validation error, 3 data or file error,
4 numerical failure (diverged training, failed gradient check).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Sequence

from . import __version__, evaluation, ingest, model, selfcheck, synthgen
from .encoder import EncodingPlan, dimension, fit, load_plan, save_plan
from .ingest import IngestError
from .records import MembershipError, SplitManifest
from .training import TrainConfig, TrainingDiverged, train, write_history

log = logging.getLogger("bsenergy")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
ENV_PREFIX = "BSENERGY_"

CHECKPOINT = "checkpoint.bin"
PLAN = "plan.sidecar"
HISTORY = "history.csv"
REPORT = "report.csv"
RUN_MANIFEST = "manifest.txt"
RESULTS = "results.csv"
SYNTH_FILES = {"data": "data.csv", "split": "split.csv", "truth": "ground_truth.csv"}


_PATH_ARGS = {"data", "manifest", "out", "report", "checkpoint", "plan", "oracle", "spec",
              "bs_info", "cell_data", "energy_data"}


class UsageError(Exception):
    pass


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _probability(text: str) -> float:
    p = float(text)
    if not 0.0 <= p <= 1.0:
        raise argparse.ArgumentTypeError(f"must be in [0, 1], got {text}")
    return p


def _positive_int(text: str) -> int:
    n = int(text)
    if n < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {text}")
    return n


def _hidden(text: str) -> tuple[int, ...]:
    try:
        dims = tuple(int(h) for h in text.replace("-", ",").split(",") if h.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated widths, got {text!r}") from None
    if not dims or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"expected positive widths, got {text!r}")
    return dims


def _out_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IngestError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise IngestError(f"output directory {out} is not writable")
    return out


def _write_run_manifest(out: Path, args: argparse.Namespace, inputs: Sequence[str | None],
                        outputs: Sequence[str], extra: dict | None = None) -> None:
    resolved = {}
    for k, v in vars(args).items():
        if k == "func":
            continue
        if k in _PATH_ARGS and isinstance(v, str) and (k in ("out", "report") or Path(v).exists()):
            v = str(Path(v).resolve())
        resolved[k] = list(v) if isinstance(v, tuple) else v
    inputs = [str(Path(p).resolve()) for p in inputs if p]
    doc = {
        "tool": "bsenergy",
        "version": __version__,
        "command": args.command,
        "args": resolved,
        "seed": resolved.get("seed"),
        "inputs": {p: _sha256(Path(p)) for p in inputs},
        "outputs": {name: _sha256(out / name) for name in outputs},
    }
    if extra:
        doc.update(extra)
    (out / RUN_MANIFEST).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


# -- commands -------------------------------------------------------------------

def cmd_synth(args: argparse.Namespace) -> int:
    try:
        cfg = synthgen.SynthConfig(
            n_bs=args.n_bs, n_rutypes=args.n_rutypes, days=args.days, noise=args.noise,
            cross_domain_fraction=args.cross_fraction, in_domain_test_days=args.test_days,
            hardware_options=args.hardware_options, seed=args.seed,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = _out_dir(args.out)
    ds, split, gt = synthgen.generate(cfg)
    ingest.write_canonical(ds, out / SYNTH_FILES["data"])
    ingest.write_manifest(split, out / SYNTH_FILES["split"])
    synthgen.write_ground_truth(gt, out / SYNTH_FILES["truth"])
    _write_run_manifest(out, args, [], list(SYNTH_FILES.values()), {"synth_config": asdict(cfg)})
    print(f"wrote {len(ds)} records for {len(gt.stations)} stations to {out}")
    return EXIT_OK


def _plan_template(spec: str, bsid: str, normalize: bool) -> EncodingPlan:
    """A toggle label (``abf``, ``bf``, ``numerical``...) or a sidecar file to copy settings from."""
    if Path(spec).is_file():
        return load_plan(spec).template()
    try:
        return EncodingPlan.from_toggles(spec, bsid, normalize)
    except ValueError as exc:
        raise UsageError(f"--plan: {exc}") from exc


def _train_config(args: argparse.Namespace, mask_prob: float | None = None) -> TrainConfig:
    try:
        return TrainConfig(
            epochs=args.epochs, batch_size=args.batch,
            mask_prob=args.mask_prob if mask_prob is None else mask_prob,
            mask_mode=args.mask_mode, lr=args.lr, seed=args.seed,
            selection="test_set_paper_protocol" if args.selection == "paper" else "validation_split",
            validation_fraction=args.val_fraction, workers=args.workers,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _load_split(args: argparse.Namespace):
    ds = ingest.parse_canonical(args.data, permissive=args.permissive)
    split = ingest.read_manifest(args.manifest)
    train_ds, test_ds = ingest.split_by_manifest(ds, split)
    return split, train_ds, test_ds


def cmd_train(args: argparse.Namespace) -> int:
    tcfg = _train_config(args)
    template = _plan_template(args.plan, args.bsid, not args.no_normalize)
    out = _out_dir(args.out)
    _, train_ds, test_ds = _load_split(args)
    if len(train_ds) == 0:
        raise IngestError("the split manifest leaves no training records")
    plan = fit(template, train_ds)
    try:
        mcfg = model.ModelConfig.for_plan(
            plan, hidden_dims=args.hidden, embed_dim=args.embed_dim, embed_rows=args.embed_rows,
            arl_bottleneck=args.bottleneck, arl_enabled=not args.no_arl,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    selection = test_ds if tcfg.selection == "test_set_paper_protocol" else None
    result = train(train_ds, plan, mcfg, tcfg, selection_ds=selection)

    save_plan(plan, out / PLAN)
    model.save(result.model, out / CHECKPOINT, sidecar={"plan": PLAN, "sha256": _sha256(out / PLAN)})
    write_history(result.history, out / HISTORY, include_time=args.timing)
    _write_run_manifest(out, args, [args.data, args.manifest], [CHECKPOINT, PLAN, HISTORY],
                        {"train_config": asdict(tcfg), "model_config": asdict(result.model.config),
                         "best_epoch": result.best_epoch})
    best = result.history[result.best_epoch - 1]
    print(f"best epoch {result.best_epoch}: train MAPE {best.train_mape:.5f}, "
          f"selection MAPE {best.selection_mape:.5f}")
    return EXIT_OK


def _load_model_and_plan(checkpoint: str, plan_path: str | None):
    net = model.load(checkpoint)
    header = model.read_header(checkpoint)
    side = header.get("sidecar") or {}
    path = Path(plan_path) if plan_path else Path(checkpoint).parent / side.get("plan", PLAN)
    if side.get("sha256") and _sha256(path) != side["sha256"]:
        raise model.CheckpointError(f"{path} is not the encoding plan {checkpoint} was trained with")
    plan = load_plan(path)
    if dimension(plan) != net.config.feature_dim or (plan.bsid_mode == "embedding") != net.config.use_embedding:
        raise model.CheckpointError(f"{path} does not match the input layout of {checkpoint}")
    return net, plan


def _print_report(rep: evaluation.EvalReport) -> None:
    def fmt(v):
        return "n/a" if v is None else f"{100 * v:.4f}%"
    print(f"cross-domain {fmt(rep.cross_domain_mape)}  in-domain {fmt(rep.in_domain_mape)}  "
          f"average {fmt(rep.average_mape)}")


def cmd_eval(args: argparse.Namespace) -> int:
    ds = ingest.parse_canonical(args.data, permissive=args.permissive)
    split = ingest.read_manifest(args.manifest)
    if args.all_records:
        # every training station counts as in-domain, on every day
        split = SplitManifest(split.train_bs_ids, split.train_bs_ids, split.test_cross_domain_ids)
        test = ds
    else:
        test = ds.subset([split.is_test_record(r) for r in ds])
    if args.oracle:
        gt = synthgen.read_ground_truth(args.oracle)
        rep = evaluation.evaluate_predictor(lambda r: synthgen.oracle_energy(gt, r), test, split)
        inputs = [args.data, args.manifest, args.oracle]
    else:
        if not args.checkpoint:
            raise UsageError("eval needs --checkpoint or --oracle")
        net, plan = _load_model_and_plan(args.checkpoint, args.plan)
        rep = evaluation.evaluate(net, plan, test, split)
        inputs = [args.data, args.manifest, args.checkpoint]
    report = Path(args.report)
    report.parent.mkdir(parents=True, exist_ok=True)
    evaluation.write_report(rep, report)
    if args.out:
        out = _out_dir(args.out)
        if report.resolve().parent != out.resolve():
            evaluation.write_report(rep, out / REPORT)
        _write_run_manifest(out, args, inputs, [REPORT] if (out / REPORT).exists() else [])
    _print_report(rep)
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    tcfg = _train_config(args)
    if args.spec == "paper-grid":
        spec = evaluation.AblationSpec(evaluation.paper_grid(), tcfg)
    else:
        try:
            spec = evaluation.read_spec_file(args.spec, tcfg)
        except (ValueError, KeyError) as exc:
            raise UsageError(f"--spec {args.spec}: {exc}") from exc
    out = _out_dir(args.out)
    split, train_ds, test_ds = _load_split(args)
    rows = evaluation.run_ablation(spec, train_ds, test_ds, split, jobs=args.jobs)
    evaluation.write_results(rows, out / RESULTS)
    inputs = [args.data, args.manifest] + ([] if args.spec == "paper-grid" else [args.spec])
    _write_run_manifest(out, args, inputs, [RESULTS], {"train_config": asdict(tcfg)})
    for row in rows:
        avg = f"{100 * row.report.average_mape:.4f}%" if row.report else "-"
        print(f"{row.run.name:<18s} dim {row.dim!s:>5s}  avg {avg:>9s}  {row.status}")
    return EXIT_OK if any(r.status == "ok" for r in rows) else EXIT_NUMERIC


def cmd_export(args: argparse.Namespace) -> int:
    net, plan = _load_model_and_plan(args.checkpoint, args.plan)
    try:
        rows = model.export_embeddings(net, plan)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    model.write_embeddings_csv(rows, args.out)
    print(f"wrote {len(rows)} embedding rows to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    worst = selfcheck.run_all(args.seeds, args.tolerance, fault=0.1 if args.inject_fault else 0.0)
    ok = True
    for name, err in worst.items():
        passed = err < args.tolerance
        ok &= passed
        print(f"{'ok  ' if passed else 'FAIL'} {name:<14s} max rel err {err:.3e}")
    print(f"{'PASS' if ok else 'FAIL'} at tolerance {args.tolerance:g} over {args.seeds} seeds")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_join(args: argparse.Namespace) -> int:
    ds, dropped = ingest.join_challenge_layout(args.bs_info, args.cell_data, args.energy_data,
                                               permissive=args.permissive)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    ingest.write_canonical(ds, args.out)
    print(f"wrote {len(ds)} records to {args.out}; {dropped} station-hours dropped by the join")
    return EXIT_OK


def cmd_rerun(args: argparse.Namespace) -> int:
    try:
        doc = json.loads(Path(args.manifest_file).read_text(encoding="utf-8"))
        stored = dict(doc["args"])
        command = doc["command"]
    except (OSError, ValueError, KeyError) as exc:
        raise IngestError(f"cannot read run manifest {args.manifest_file}: {exc}") from exc
    if args.out:
        stored["out"] = args.out
    for path, digest in doc.get("inputs", {}).items():
        if not Path(path).is_file() or _sha256(Path(path)) != digest:
            raise IngestError(f"input {path} changed since the recorded run")
    replay = build_parser().parse_args([command, *_args_to_argv(command, stored)])
    return replay.func(replay)


def _args_to_argv(command: str, stored: dict) -> list[str]:
    parser = _SUBPARSERS[command]
    argv: list[str] = []
    for action in parser._actions:
        if not action.option_strings or action.dest not in stored:
            continue
        value = stored[action.dest]
        flag = action.option_strings[-1]
        if isinstance(action, argparse._StoreTrueAction):
            if value:
                argv.append(flag)
        elif value is not None:
            argv += [flag, ",".join(map(str, value)) if isinstance(value, list) else str(value)]
    return argv


# -- parser ----------------------------------------------------------------------

_SUBPARSERS: dict[str, argparse.ArgumentParser] = {}


def _data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="canonical dataset CSV")
    p.add_argument("--manifest", required=True, help="split manifest CSV (bs_id, role[, days])")
    p.add_argument("--permissive", action="store_true", help="drop invalid rows instead of failing")


def _train_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=_positive_int, default=1000)
    p.add_argument("--batch", type=_positive_int, default=512)
    p.add_argument("--mask-prob", type=_probability, default=0.3)
    p.add_argument("--mask-mode", choices=("bernoulli", "quota"), default="bernoulli")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--selection", choices=("val", "paper"), default="val",
                   help="val: hold out records of the training stations; paper: select on the test set")
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--workers", type=_positive_int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bsenergy", description="Base-station energy estimation.")
    parser.add_argument("--version", action="version", version=f"bsenergy {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic fleet")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-bs", type=int, default=50)
    p.add_argument("--n-rutypes", type=int, default=4)
    p.add_argument("--days", type=int, default=8)
    p.add_argument("--noise", type=float, default=0.01, help="noise sd as a fraction of mean energy")
    p.add_argument("--cross-fraction", type=float, default=0.2)
    p.add_argument("--test-days", type=int, default=2, help="test days per in-domain station")
    p.add_argument("--hardware-options", type=int, default=1)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    _data_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--plan", default="abf", help="one-hot toggles (abf, ab, f, numerical, ...) or a sidecar file")
    p.add_argument("--bsid", choices=("embedding", "onehot", "none"), default="embedding")
    p.add_argument("--no-normalize", action="store_true")
    p.add_argument("--hidden", type=_hidden, default=(128, 64))
    p.add_argument("--embed-dim", type=_positive_int, default=64)
    p.add_argument("--embed-rows", type=int, default=None)
    p.add_argument("--bottleneck", type=_positive_int, default=12)
    p.add_argument("--no-arl", action="store_true")
    p.add_argument("--timing", action="store_true", help="record wall time in history.csv")
    _train_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint (or the ground-truth oracle) on the test split")
    _data_args(p)
    p.add_argument("--checkpoint")
    p.add_argument("--plan", help="encoding sidecar (default: the one next to the checkpoint)")
    p.add_argument("--oracle", help="ground-truth CSV; score the closed-form oracle instead of a model")
    p.add_argument("--all-records", action="store_true", help="score every record, not only the test split")
    p.add_argument("--report", default=REPORT)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation table")
    _data_args(p)
    p.add_argument("--spec", required=True, help="'paper-grid' or a CSV (name, onehot, bsid, masking, arl, hidden)")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=_positive_int, default=1)
    _train_args(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export", help="write station embeddings as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--plan")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("gradcheck", help="finite-difference self check")
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.add_argument("--seeds", type=_positive_int, default=20)
    p.add_argument("--inject-fault", action="store_true", help="corrupt one gradient by 10%%")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("join", help="convert the three-file challenge layout to the canonical CSV")
    p.add_argument("--bs-info", required=True)
    p.add_argument("--cell-data", required=True)
    p.add_argument("--energy-data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--permissive", action="store_true")
    p.set_defaults(func=cmd_join)

    p = sub.add_parser("rerun", help="replay a run from its manifest.txt")
    p.add_argument("manifest_file")
    p.add_argument("--out", help="write to this directory instead of the recorded one")
    p.set_defaults(func=cmd_rerun)

    for name, subparser in sub.choices.items():
        _SUBPARSERS[name] = subparser
        _apply_env_defaults(subparser)
    return parser


def _apply_env_defaults(parser: argparse.ArgumentParser) -> None:
    for action in parser._actions:
        if not action.option_strings or action.dest == "help":
            continue
        raw = os.environ.get(ENV_PREFIX + action.dest.upper())
        if raw is None:
            continue
        if isinstance(action, argparse._StoreTrueAction):
            action.default = raw.strip().lower() in ("1", "true", "yes", "on")
        else:
            action.default = action.type(raw) if action.type else raw
            action.required = False


def main(argv: Sequence[str] | None = None) -> int:
    try:
        parser = build_parser()
    except (ValueError, argparse.ArgumentTypeError) as exc:
        print(f"bsenergy: bad environment override: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"bsenergy {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, FloatingPointError) as exc:
        print(f"bsenergy {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"bsenergy {args.command}: file not found: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (IngestError, MembershipError, model.CheckpointError, OSError, ValueError, KeyError) as exc:
        print(f"bsenergy {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
