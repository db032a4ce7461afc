"""Command-line entry point: ``deepkin {generate,train,eval,compare,rollout}``.

Exit codes: 0 success, 1 usage error, 2 data or schema error, 3 non-finite loss.
Every command writes its resolved configuration to ``<output>.run.json``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from . import autodiff as ad
from .datagen import SchemaError, ScenarioSpec, generate_mix, load_specs, read_dataset, split, write_dataset
from .evaluation import compare, evaluate, evaluate_by_scenario, read_report, write_report
from .kinematics import ControlInput, KinematicParams, VehicleState, rollout
from .models import HEADS, ConstantControlsBaseline, ModelConfig, TrajectoryModel
from .training import NonFiniteLossError, TrainConfig, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

SPLITS = ("all", "train", "val", "test")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@dataclass
class RunConfig:
    """Everything a command resolved before running, stored next to its outputs."""

    command: str
    version: str = __version__
    paths: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    model: dict | None = None
    train: dict | None = None
    split: dict | None = None
    options: dict = field(default_factory=dict)

    def write(self, out_path) -> Path:
        path = Path(f"{out_path}.run.json")
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _read_json(path, what: str):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise DataError(f"{what} not found: {path}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc.msg}, line {exc.lineno})") from None


def _load_samples(path):
    if not Path(path).is_file():
        raise DataError(f"data file not found: {path}")
    return read_dataset(path)


def _floats(text: str, n: int, flag: str) -> list[float]:
    try:
        vals = [float(t) for t in text.split(",")]
    except ValueError:
        raise UsageError(f"{flag} expects {n} comma-separated numbers, got {text!r}") from None
    if len(vals) != n or not all(math.isfinite(v) for v in vals):
        raise UsageError(f"{flag} expects {n} finite comma-separated numbers, got {text!r}")
    return vals


def resolve_train_config(doc: dict | None) -> tuple[dict, dict, dict]:
    """Split a config document into model, train and split sections.

    Accepts ``{"model": {...}, "train": {...}, "split": {...}}`` or a flat
    object whose keys belong to the model or training configuration, plus
    optional ``split_seed`` and ``split_ratios``.
    """
    doc = dict(doc or {})
    if {"model", "train", "split"} & set(doc):
        unknown = set(doc) - {"model", "train", "split"}
        if unknown:
            raise DataError(f"config: unknown section(s) {sorted(unknown)}")
        return dict(doc.get("model") or {}), dict(doc.get("train") or {}), dict(doc.get("split") or {})
    model_keys = set(ModelConfig.__dataclass_fields__)
    train_keys = set(TrainConfig.__dataclass_fields__)
    model, tr, sp = {}, {}, {}
    for k, v in doc.items():
        if k in model_keys:
            model[k] = v
        elif k in train_keys:
            tr[k] = v
        elif k in ("split_seed", "split_ratios"):
            sp[k.removeprefix("split_")] = v
        else:
            raise DataError(f"config: unknown field {k!r}")
    return model, tr, sp


def _build_configs(model: dict, tr: dict) -> tuple[ModelConfig, TrainConfig]:
    try:
        return ModelConfig.from_json(model), TrainConfig.from_json(tr)
    except (TypeError, ValueError) as exc:
        raise DataError(f"config: {exc}") from None


def _pick_split(samples, which: str, ratios, seed: int):
    if which == "all":
        return list(samples)
    parts = dict(zip(("train", "val", "test"), split(samples, ratios, seed)))
    return parts[which]


def load_model(path) -> tuple[TrajectoryModel, dict]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}") from None
    try:
        store, _, doc = ad.load_checkpoint(text)
        cfg = ModelConfig.from_json(doc["model_config"])
    except (KeyError, ValueError, TypeError) as exc:
        raise DataError(f"{path}: not a usable checkpoint ({exc})") from None
    return TrajectoryModel(cfg, store), doc


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    if args.count < 0:
        raise UsageError("--count must be >= 0")
    specs = load_specs(_read_json(args.spec, "spec file"))
    samples = generate_mix(specs, args.count, args.seed)
    out = Path(args.out)
    write_dataset(samples, out)
    meta = {
        "seed": args.seed,
        "count": len(samples),
        "counts": dict(sorted(Counter(s.scenario for s in samples).items())),
        "specs": [sp.to_json() for sp in specs],
    }
    Path(f"{out}.meta.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    RunConfig(
        "generate",
        paths={"spec": str(args.spec), "out": str(out)},
        seeds={"data": args.seed},
        options={"count": args.count},
    ).write(out)
    print(f"wrote {len(samples)} samples to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    doc = _read_json(args.config, "config file") if args.config else None
    model_d, train_d, split_d = resolve_train_config(doc)
    if args.head:
        model_d["head"] = args.head
    if args.iters is not None:
        if args.iters < 0:
            raise UsageError("--iters must be >= 0")
        train_d["iterations"] = args.iters
    if args.seed is not None:
        train_d["seed"] = args.seed
    mcfg, tcfg = _build_configs(model_d, train_d)
    ratios = tuple(split_d.get("ratios", (3, 1, 1)))
    split_seed = int(split_d.get("seed", 0) if args.split_seed is None else args.split_seed)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or sum(ratios) <= 0:
        raise DataError("config: split ratios must be three non-negative numbers")

    samples = _load_samples(args.data)
    if args.no_split:
        tr, va = list(samples), []
    else:
        tr, va, _ = split(samples, ratios, split_seed)
    if not tr:
        raise DataError(f"{args.data}: training split is empty")
    for s in tr[:1]:
        if len(s.future) != mcfg.H:
            raise DataError(f"{args.data}: samples have horizon {len(s.future)}, model expects H={mcfg.H}")

    model = TrajectoryModel(mcfg, seed=tcfg.seed)
    out = Path(args.out)
    split_doc = {"ratios": list(ratios), "seed": split_seed, "disabled": bool(args.no_split)}
    run = RunConfig(
        "train",
        paths={"config": None if args.config is None else str(args.config), "data": str(args.data), "out": str(out)},
        seeds={"init": tcfg.seed, "split": split_seed},
        model=mcfg.to_json(),
        train=tcfg.to_json(),
        split=split_doc,
    )
    run.write(out)

    def progress(row):
        if not args.quiet:
            print(
                f"iter {row['iteration']}: loss {row['loss_total']:.4f}"
                f"  val l2@6s {row.get('val_l2_6s', float('nan')):.3f} m",
                file=sys.stderr,
            )

    try:
        result = train(model, tr, tcfg, val_samples=va or None, progress=progress)
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    doc = ad.checkpoint_dict(
        model.store,
        result.optimizer,
        model_config=mcfg.to_json(),
        train_config=tcfg.to_json(),
        split=split_doc,
        iterations_done=tcfg.iterations,
    )
    out.write_text(ad.dumps_checkpoint(doc), encoding="utf-8")
    metrics_path = Path(f"{out}.metrics.csv")
    result.write_log(metrics_path)
    if result.log and not args.no_plots:
        from .plotting import plot_training_curve

        plot_training_curve(result.log, Path(f"{out}.loss.png"))
    final = result.log[-1]["loss_total"] if result.log else None
    print(f"wrote {out} ({tcfg.iterations} iterations" + (f", final loss {final:.6f})" if final is not None else ")"))
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.baseline:
        if args.ckpt:
            raise UsageError("--ckpt and --baseline are mutually exclusive")
        model = ConstantControlsBaseline(H=args.H, dt=args.dt, K=args.K)
        ckpt_doc = {}
    elif args.ckpt:
        model, ckpt_doc = load_model(args.ckpt)
    else:
        raise UsageError("one of --ckpt or --baseline is required")
    samples = _load_samples(args.data)
    split_doc = ckpt_doc.get("split") or {}
    ratios = tuple(split_doc.get("ratios", (3, 1, 1)))
    seed = int(split_doc.get("seed", 0) if args.split_seed is None else args.split_seed)
    subset = _pick_split(samples, args.split, ratios, seed)
    if not subset:
        raise DataError(f"{args.data}: the {args.split!r} test set is empty")
    H = model.config.H if hasattr(model, "config") else model.H
    if len(subset[0].future) != H:
        raise DataError(f"{args.data}: samples have horizon {len(subset[0].future)}, model expects H={H}")
    opts = {"min_over_n": args.min_over_n, "averaged": args.averaged}
    report = evaluate(model, subset, **opts)
    reports = [report]
    if args.by_scenario:
        reports += evaluate_by_scenario(model, subset, **opts)
    out = Path(args.report)
    write_report(reports, out)
    if not args.no_plots:
        from .plotting import plot_distributions

        plot_distributions(report, out)
    RunConfig(
        "eval",
        paths={"ckpt": None if args.ckpt is None else str(args.ckpt), "data": str(args.data), "report": str(out)},
        seeds={"split": seed},
        model=model.config.to_json() if hasattr(model, "config") else None,
        split={"which": args.split, "ratios": list(ratios), "seed": seed},
        options={**opts, "baseline": args.baseline, "by_scenario": args.by_scenario},
    ).write(out)
    sys.stdout.write(compare(reports).to_text())
    return EXIT_OK


def cmd_compare(args) -> int:
    rows = []
    for path in args.reports:
        if not Path(path).is_file():
            raise DataError(f"report not found: {path}")
        try:
            rows.extend(read_report(path))
        except ValueError as exc:
            raise DataError(str(exc)) from None
    table = compare(rows)
    out = Path(args.out)
    table.to_csv(out)
    if not args.no_plots:
        from .plotting import plot_comparison

        plot_comparison(table.rows, Path(f"{out}.png"))
    RunConfig("compare", paths={"reports": [str(p) for p in args.reports], "out": str(out)}).write(out)
    sys.stdout.write(table.to_text())
    return EXIT_OK


def _read_controls(path) -> list[ControlInput]:
    """Controls from a CSV with ``accel,steer`` columns or a JSON list of pairs."""
    p = Path(path)
    if not p.is_file():
        raise DataError(f"controls file not found: {path}")
    text = p.read_text(encoding="utf-8")
    try:
        if p.suffix.lower() == ".json":
            pairs = [(float(a), float(g)) for a, g in json.loads(text)]
        else:
            reader = csv.DictReader(io.StringIO(text))
            if not reader.fieldnames or not {"accel", "steer"} <= set(reader.fieldnames):
                raise DataError(f"{path}: expected CSV columns 'accel' and 'steer'")
            pairs = [(float(r["accel"]), float(r["steer"])) for r in reader]
        return [ControlInput(a, g) for a, g in pairs]
    except (ValueError, TypeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: bad controls ({exc})") from None


def _read_params(path) -> KinematicParams:
    doc = _read_json(path, "params file")
    if not isinstance(doc, dict):
        raise DataError(f"{path}: expected a JSON object")
    doc = dict(doc)
    if "gamma_max_deg" in doc:
        doc["gamma_max"] = math.radians(float(doc.pop("gamma_max_deg")))
    unknown = set(doc) - {"l_r", "l_f", "a_max", "gamma_max", "r_min"}
    if unknown:
        raise DataError(f"params field {sorted(unknown)[0]!r}: unknown field")
    try:
        return KinematicParams.from_dict(doc)
    except (ValueError, TypeError) as exc:
        raise DataError(f"{path}: {exc}") from None


def cmd_rollout(args) -> int:
    if (args.controls is None) == (args.constant is None):
        raise UsageError("give exactly one of --controls or --constant")
    if args.H < 1:
        raise UsageError("--H must be >= 1")
    if not args.dt > 0:
        raise UsageError("--dt must be positive")
    x, y, psi, v = _floats(args.state, 4, "--state")
    state = VehicleState(x, y, psi, v)
    params = _read_params(args.params) if args.params else KinematicParams()
    if args.constant is not None:
        a, g = _floats(args.constant, 2, "--constant")
        if args.degrees:
            g = math.radians(g)
        controls = [ControlInput(a, g)] * args.H
    else:
        controls = _read_controls(args.controls)
        if args.degrees:
            controls = [ControlInput(c.accel, math.radians(c.steer)) for c in controls]
        if len(controls) < args.H:
            raise DataError(f"{args.controls}: {len(controls)} controls for H={args.H}")
        controls = controls[: args.H]
    states = rollout(state, controls, params, args.dt)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["h", "x", "y", "psi", "v"])
    for h, s in enumerate(states, start=1):
        w.writerow([h, repr(s.x), repr(s.y), repr(s.psi), repr(s.v)])
    text = buf.getvalue()
    if args.out:
        out = Path(args.out)
        out.write_text(text, encoding="utf-8")
        RunConfig(
            "rollout",
            paths={"controls": args.controls, "params": args.params, "out": str(out)},
            options={
                "state": [x, y, psi, v],
                "constant": args.constant,
                "degrees": args.degrees,
                "H": args.H,
                "dt": args.dt,
                "params": params.to_dict(),
            },
        ).write(out)
        if args.plot:
            from .plotting import plot_rollout

            plot_rollout(np.array([s.as_tuple() for s in states]), Path(f"{out}.png"), initial=(x, y))
    sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="deepkin", description="Kinematically constrained trajectory prediction.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="synthesize a scenario dataset (JSONL)")
    g.add_argument("--spec", required=True, help="scenario spec JSON")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    t.add_argument("--config", help="model/training config JSON")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--head", choices=HEADS)
    t.add_argument("--iters", type=int)
    t.add_argument("--seed", type=int, help="initialization and batching seed")
    t.add_argument("--split-seed", type=int)
    t.add_argument("--no-split", action="store_true", help="train on every sample, no validation")
    t.add_argument("--no-plots", action="store_true")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint or baseline on a dataset")
    e.add_argument("--ckpt")
    e.add_argument("--baseline", choices=["constant_controls"])
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True, help="output CSV")
    e.add_argument("--min-over-n", action="store_true", help="score the best of the M modes")
    e.add_argument("--averaged", action="store_true", help="average errors up to each horizon")
    e.add_argument("--split", choices=SPLITS, default="all")
    e.add_argument("--split-seed", type=int)
    e.add_argument("--by-scenario", action="store_true")
    e.add_argument("--H", type=int, default=60, help="baseline horizon")
    e.add_argument("--dt", type=float, default=0.1, help="baseline step")
    e.add_argument("--K", type=int, default=10, help="baseline history length")
    e.add_argument("--no-plots", action="store_true")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="stack reports into one table")
    c.add_argument("--reports", nargs="+", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--no-plots", action="store_true")
    c.set_defaults(func=cmd_compare)

    r = sub.add_parser("rollout", help="print a bicycle-model rollout as CSV")
    r.add_argument("--state", required=True, help="x,y,psi,v")
    r.add_argument("--controls", help="CSV (accel,steer) or JSON list of pairs")
    r.add_argument("--constant", help="a,gamma held for every step")
    r.add_argument("--degrees", action="store_true", help="steering angles are in degrees")
    r.add_argument("--params", help="kinematic params JSON")
    r.add_argument("--H", type=int, default=60)
    r.add_argument("--dt", type=float, default=0.1)
    r.add_argument("--out", help="also write the CSV (and its run config) here")
    r.add_argument("--plot", action="store_true", help="with --out, render <out>.png")
    r.set_defaults(func=cmd_rollout)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"deepkin {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, SchemaError) as exc:
        print(f"deepkin {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
