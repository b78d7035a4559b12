"""Command-line entry point: ``advbct {gen-data,train,eval,backfill,bench,sweep-t}``.

Every command accepts ``--config FILE`` (``key = value`` lines, ``#``
comments); explicit flags win over file values and unknown keys are errors.
Outputs land in ``--out-dir`` (default ``runs/<command>-seed<seed>-<run id>``)
next to a ``manifest.json`` describing the run.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .compat import CompatLossConfig, Geometry, flags_name, parse_flags
from .data import (
    ALLOCATION_KINDS,
    AllocationSpec,
    LabeledDataset,
    allocate,
    gen_synthetic,
    holdout_split,
    read_csv,
    split_eval,
    write_csv,
)
from .errors import (
    ConfigError,
    DataError,
    FormatError,
    NumericError,
    ShapeError,
    UndefinedMetricError,
)
from .model import Checkpoint
from .retrieval import (
    SetMaps,
    aggregate_report,
    backfill_curve,
    cross_test,
    self_test,
)
from .train import (
    ENLARGED_HIDDEN,
    OLD_HIDDEN,
    TrainConfig,
    TrainResult,
    loss_curve_csv,
    train_new_compatible,
    train_old,
)

log = logging.getLogger("advbct")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
METHOD_FLAGS = {"advbct": "cls+adv+p2s", "baseline": "cls"}


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_CONFIG):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(f"{self.prog}: {message}")


def load_run_config(path) -> dict[str, str]:
    """Parse a flat ``key = value`` file; keys are normalized to underscores."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc}", EXIT_IO) from exc
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise CliError(f"{path}:{lineno}: empty key")
        out[key.replace("-", "_")] = value
    return out


def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise CliError(f"not a boolean: {text!r}")


def _csv_floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


# --------------------------------------------------------------------- parser


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="run config file (key = value per line)")
    p.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    p.add_argument("--out-dir", help="output directory (overrides the per-run default)")
    p.add_argument("--run-id", help="suffix for the default run directory instead of a timestamp")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")


def _dataset_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--classes", type=int, default=20, help="number of synthetic classes")
    p.add_argument("--per-class", type=int, default=100, help="samples per class")
    p.add_argument("--dim", type=int, default=32, help="input feature dimension")
    p.add_argument("--spread", type=float, default=0.15, help="isotropic noise scale")
    p.add_argument("--eval-per-class", type=int, default=20, help="rows per class held out for retrieval")
    p.add_argument("--queries-per-class", type=int, default=5, help="query rows per class within the holdout")


def _train_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--allocation", default="extended-data", choices=ALLOCATION_KINDS)
    p.add_argument("--fraction", type=float, default=0.3, help="old-set fraction of images or classes")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=0.1, help="initial learning rate (cosine decay to 0)")
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=5e-4)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--d-emb", type=int, default=16, help="embedding dimension")
    p.add_argument("--lam", type=float, default=1.0, help="weight of the p2s loss")
    p.add_argument("--gamma0", type=float, default=1.0, help="initial weight of the adversarial loss")
    p.add_argument("--horizon", type=int, help="gamma decay horizon in epochs (default: --epochs)")
    p.add_argument("--t", type=float, default=0.4, help="elastic boundary threshold")
    p.add_argument("--grl-beta", type=float, default=1.0, help="gradient reversal coefficient")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="advbct", description="Backward-compatible embedding training at desk scale.")
    parser.add_argument("--version", action="version", version=f"advbct {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write synthetic train/query/gallery CSVs")
    _common(p)
    _dataset_args(p)

    p = sub.add_parser("train", help="train an old, independent or compatible new model")
    _common(p)
    _train_args(p)
    p.add_argument("--role", required=True, choices=("old", "new", "independent"))
    p.add_argument("--method", default="advbct", help="advbct or baseline (role=new only)")
    p.add_argument("--no-adv", action="store_true", help="drop the adversarial term")
    p.add_argument("--no-p2s", action="store_true", help="drop the p2s term")
    p.add_argument("--train", required=True, help="training CSV (the full new training set)")
    p.add_argument("--old-checkpoint", help="frozen old model (role=new)")
    p.add_argument("--geometry", help="old class geometry (default: geometry.abct beside the old checkpoint)")
    p.add_argument("--backbone", choices=("auto", "small", "enlarged"), default="auto",
                   help="auto: enlarged for enlarged-backbone allocations when role != old")

    p = sub.add_parser("eval", help="self/cross mAP and compatibility metrics")
    _common(p)
    p.add_argument("--old", required=True, help="old model checkpoint")
    p.add_argument("--new", required=True, help="new model checkpoint")
    p.add_argument("--star", help="independent model checkpoint (needed for P metrics)")
    p.add_argument("--query", required=True, action="append", help="query CSV (repeat per test set)")
    p.add_argument("--gallery", required=True, action="append", help="gallery CSV (repeat per test set)")
    p.add_argument("--beta", type=float, default=1.0, help="P_beta-score weight")

    p = sub.add_parser("backfill", help="mAP while the gallery is refreshed with the new model")
    _common(p)
    p.add_argument("--old", required=True)
    p.add_argument("--new", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--gallery", required=True)
    p.add_argument("--steps", type=int, default=11, help="number of refresh fractions in [0, 1]")

    p = sub.add_parser("bench", help="allocate, train old/independent/AdvBCT/ablations, evaluate")
    _common(p)
    _dataset_args(p)
    _train_args(p)
    p.add_argument("--ablations", default="",
                   help="extra loss subsets to train, e.g. 'cls+p2s,cls+adv'")
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--steps", type=int, default=11, help="backfill sweep points")
    p.add_argument("--train", help="training CSV instead of synthetic data (needs --query/--gallery)")
    p.add_argument("--query", help="query CSV")
    p.add_argument("--gallery", help="gallery CSV")

    p = sub.add_parser("sweep-t", help="AdvBCT self/cross mAP as a function of the threshold t")
    _common(p)
    _dataset_args(p)
    _train_args(p)
    p.add_argument("--ts", type=_csv_floats, default="0.1,0.2,0.3,0.4,0.5,0.6,0.8",
                   help="comma-separated thresholds")
    return parser


BOOL_KEYS = {"no_adv", "no_p2s", "verbose"}
NON_CONFIG_KEYS = {"config", "command"}


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.config:
        return args
    values = load_run_config(args.config)
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in sub._actions} - NON_CONFIG_KEYS - {"help"}
    unknown = sorted(set(values) - known)
    if unknown:
        raise CliError(f"unknown config keys for {args.command}: {', '.join(unknown)}")
    defaults = {}
    for key, value in values.items():
        defaults[key] = _bool(value) if key in BOOL_KEYS else value
    sub.set_defaults(**defaults)
    # Re-parse so explicit flags override file values and types get applied.
    args = parser.parse_args(argv)
    for action in sub._actions:
        if action.dest in values and action.dest not in BOOL_KEYS:
            val = getattr(args, action.dest)
            if isinstance(val, str) and action.type not in (None, str):
                setattr(args, action.dest, action.type(val))
            if action.choices is not None and getattr(args, action.dest) not in action.choices:
                raise CliError(f"--{action.dest.replace('_', '-')}: invalid choice {val!r}")
    return args


# -------------------------------------------------------------------- helpers


def _digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _run_dir(args) -> Path:
    if args.out_dir:
        out = Path(args.out_dir)
    else:
        suffix = args.run_id or time.strftime("%Y%m%d-%H%M%S")
        out = Path("runs") / f"{args.command}-seed{args.seed}-{suffix}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, args, inputs: list[str]) -> None:
    config = {
        k: v for k, v in sorted(vars(args).items()) if k not in ("command", "verbose")
    }
    manifest = {
        "command": args.command,
        "config": config,
        "inputs": {str(p): _digest(p) for p in inputs},
        "seed": args.seed,
        "version": __version__,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")


def _read_dataset(path) -> LabeledDataset:
    try:
        return read_csv(path)
    except OSError as exc:
        raise CliError(f"cannot read dataset {path}: {exc}", EXIT_IO) from exc


def _load_checkpoint(path) -> Checkpoint:
    try:
        return Checkpoint.load(path)
    except OSError as exc:
        raise CliError(f"cannot read checkpoint {path}: {exc}", EXIT_IO) from exc


def _configs(args, role: str, flags: str) -> tuple[TrainConfig, CompatLossConfig]:
    enlarged = AllocationSpec(args.allocation, args.fraction, args.seed).enlarged_backbone
    backbone = getattr(args, "backbone", "auto")
    if backbone == "auto":
        backbone = "enlarged" if enlarged and role != "old" else "small"
    cfg = TrainConfig(
        epochs=args.epochs,
        lr=args.lr,
        momentum=args.momentum,
        weight_decay=args.weight_decay,
        batch_size=args.batch_size,
        seed=args.seed,
        flags=flags,
        hidden=ENLARGED_HIDDEN if backbone == "enlarged" else OLD_HIDDEN,
        d_emb=args.d_emb,
    )
    ccfg = CompatLossConfig(
        lam=args.lam, gamma0=args.gamma0, horizon=args.horizon, t=args.t, grl_beta=args.grl_beta
    )
    return cfg, ccfg


def _method_flags(args) -> str:
    if args.method not in METHOD_FLAGS:
        raise CliError(f"--method: invalid choice {args.method!r} (choose from advbct, baseline)")
    flags = set(parse_flags(METHOD_FLAGS[args.method]))
    if args.no_adv:
        flags.discard("adv")
    if args.no_p2s:
        flags.discard("p2s")
    return flags_name(flags)


def _save_training(out: Path, result: TrainResult, name: str = "") -> None:
    prefix = f"{name}_" if name else ""
    result.checkpoint.save(out / f"{prefix}checkpoint.abct")
    (out / f"{prefix}loss_curve.csv").write_text(loss_curve_csv(result.curve))
    if result.geometry is not None:
        result.geometry.save(out / f"{prefix}geometry.abct")


def _synthetic_splits(args):
    ds = gen_synthetic(args.classes, args.per_class, args.dim, args.spread, args.seed)
    train, holdout = holdout_split(ds, args.eval_per_class, args.seed)
    query, gallery = split_eval(holdout, args.queries_per_class, args.seed)
    return train, query, gallery


# ------------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    train, query, gallery = _synthetic_splits(args)
    out = _run_dir(args)
    write_csv(train, out / "train.csv")
    write_csv(query, out / "query.csv")
    write_csv(gallery, out / "gallery.csv")
    _write_manifest(out, args, [])
    print(f"wrote {len(train)} train, {len(query)} query, {len(gallery)} gallery rows to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    full = _read_dataset(args.train)
    inputs = [args.train]
    out = _run_dir(args)
    if args.role == "old":
        old_train, _ = allocate(full, AllocationSpec(args.allocation, args.fraction, args.seed))
        cfg, _ = _configs(args, "old", "cls")
        result = train_old(old_train, cfg)
    elif args.role == "independent":
        cfg, ccfg = _configs(args, "independent", "cls")
        result = train_new_compatible(full, None, cfg, ccfg)
    else:
        flags = _method_flags(args)
        if not args.old_checkpoint:
            raise CliError("--old-checkpoint is required for --role new")
        old = _load_checkpoint(args.old_checkpoint)
        inputs.append(args.old_checkpoint)
        geometry = None
        if "p2s" in flags:
            geo_path = args.geometry or str(Path(args.old_checkpoint).with_name("geometry.abct"))
            try:
                geometry = Geometry.load(geo_path)
            except OSError as exc:
                raise CliError(f"cannot read geometry {geo_path}: {exc}", EXIT_IO) from exc
            inputs.append(geo_path)
        cfg, ccfg = _configs(args, "new", flags)
        result = train_new_compatible(full, old, cfg, ccfg, geometry)
    _save_training(out, result)
    _write_manifest(out, args, inputs)
    print(f"{args.role}: train accuracy {result.train_accuracy:.4f}; outputs in {out}")
    return EXIT_OK


def _check_dims(**ckpts: Checkpoint) -> None:
    dims = {name: c.embed.d_emb for name, c in ckpts.items()}
    if len(set(dims.values())) > 1:
        raise CliError(f"embedding dims differ: {dims}")


def cmd_eval(args) -> int:
    if len(args.query) != len(args.gallery):
        raise CliError("give one --gallery per --query")
    old = _load_checkpoint(args.old)
    new = _load_checkpoint(args.new)
    ckpts = {"old": old, "new": new}
    star = None
    if args.star:
        star = _load_checkpoint(args.star)
        ckpts["star"] = star
    _check_dims(**ckpts)
    sets = []
    inputs = [args.old, args.new] + ([args.star] if args.star else [])
    for i, (qp, gp) in enumerate(zip(args.query, args.gallery)):
        q, g = _read_dataset(qp), _read_dataset(gp)
        inputs += [qp, gp]
        self_old = self_test(old.embed, q, g)
        self_new = self_test(new.embed, q, g)
        sets.append(
            SetMaps(
                self_old=self_old,
                self_new=self_new,
                self_star=self_test(star.embed, q, g) if star else float("nan"),
                cross=cross_test(new.embed, old.embed, q, g),
                name=Path(qp).stem if len(args.query) == 1 else f"set{i}",
            )
        )
    if star is not None:
        report = aggregate_report(sets, args.beta)
        text = report.to_json()
    else:
        doc = {"beta": args.beta, "test_sets": [vars(s) | {"self_star": None} for s in sets],
               "per_set_metrics": [], "p_up": None, "p_comp": None, "p_beta_score": None,
               "percent": {"p_up": None, "p_comp": None, "p_beta_score": None}}
        text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    out = _run_dir(args)
    (out / "report.json").write_text(text)
    _write_manifest(out, args, inputs)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_backfill(args) -> int:
    if args.steps < 2:
        raise CliError("--steps must be >= 2")
    old = _load_checkpoint(args.old)
    new = _load_checkpoint(args.new)
    _check_dims(old=old, new=new)
    q, g = _read_dataset(args.query), _read_dataset(args.gallery)
    fractions = np.linspace(0.0, 1.0, args.steps).tolist()
    curve = backfill_curve(old.embed, new.embed, q, g, fractions, args.seed)
    out = _run_dir(args)
    (out / "backfill.csv").write_text(curve.to_csv())
    _write_manifest(out, args, [args.old, args.new, args.query, args.gallery])
    sys.stdout.write(curve.to_csv())
    return EXIT_OK


def _fmt_pct(v):
    return "" if v is None else f"{100.0 * v:.2f}"


def run_bench(args, out: Path) -> dict:
    """Shared body of ``bench``; returns the summary document."""
    ablations = [parse_flags(a) for a in args.ablations.split(",") if a.strip()]
    if args.steps < 2:
        raise CliError("--steps must be >= 2")
    if args.train:
        if not (args.query and args.gallery):
            raise CliError("--train needs --query and --gallery")
        train, query, gallery = (_read_dataset(p) for p in (args.train, args.query, args.gallery))
    else:
        train, query, gallery = _synthetic_splits(args)
    spec = AllocationSpec(args.allocation, args.fraction, args.seed)
    old_train, new_train = allocate(train, spec)

    old_cfg, _ = _configs(args, "old", "cls")
    old = train_old(old_train, old_cfg)
    _save_training(out, old, "old")
    log.info("old model: %d classes, train acc %.4f", old_train.class_count, old.train_accuracy)

    methods: dict[str, TrainResult] = {}
    star_cfg, ccfg = _configs(args, "independent", "cls")
    methods["baseline"] = train_new_compatible(new_train, None, star_cfg, ccfg)
    runs = [("advbct", parse_flags("cls+adv+p2s"))] + [(flags_name(f), f) for f in ablations]
    for name, flags in runs:
        if name in methods or flags in (result_flags(m) for m in methods):
            continue
        cfg, ccfg = _configs(args, "new", flags)
        methods[name] = train_new_compatible(new_train, old.checkpoint, cfg, ccfg, old.geometry)

    old_model = old.checkpoint.embed
    star_model = methods["baseline"].checkpoint.embed
    self_old = self_test(old_model, query, gallery)
    self_star = self_test(star_model, query, gallery)
    rows = []
    for name, result in methods.items():
        _save_training(out, result, name)
        new_model = result.checkpoint.embed
        maps = SetMaps(
            self_old=self_old,
            self_new=self_test(new_model, query, gallery),
            self_star=self_star,
            cross=cross_test(new_model, old_model, query, gallery),
        )
        report = aggregate_report([maps], args.beta)
        (out / f"report_{name}.json").write_text(report.to_json())
        curve = backfill_curve(
            old_model, new_model, query, gallery, np.linspace(0, 1, args.steps).tolist(), args.seed
        )
        (out / f"backfill_{name}.csv").write_text(curve.to_csv())
        rows.append(
            {
                "method": name,
                "flags": flags_name(result_flags(name)),
                "self": maps.self_new,
                "cross": maps.cross,
                "p_up": report.p_up,
                "p_comp": report.p_comp,
                "p_beta_score": report.p_beta_score,
                "train_accuracy": result.train_accuracy,
            }
        )
    summary = {
        "allocation": args.allocation,
        "old_classes": old_train.class_count,
        "old_head_outputs": old.checkpoint.classifier.n_classes,
        "self_old": self_old,
        "self_star": self_star,
        "rows": rows,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    lines = ["allocation,model_old,model_new,self,cross,p_up,p_comp,p_beta_score"]
    lines.append(f"{args.allocation},old,-,{100 * self_old:.2f},,,,")
    for r in rows:
        lines.append(
            f"{args.allocation},old,{r['method']},{100 * r['self']:.2f},{100 * r['cross']:.2f},"
            f"{_fmt_pct(r['p_up'])},{_fmt_pct(r['p_comp'])},{_fmt_pct(r['p_beta_score'])}"
        )
    (out / "summary.csv").write_text("\n".join(lines) + "\n")
    return summary


def result_flags(name: str) -> frozenset:
    return parse_flags(METHOD_FLAGS.get(name, name))


def cmd_bench(args) -> int:
    out = _run_dir(args)
    summary = run_bench(args, out)
    inputs = [p for p in (args.train, args.query, args.gallery) if p]
    _write_manifest(out, args, inputs)
    print((out / "summary.csv").read_text(), end="")
    log.info("bench outputs in %s (%d methods)", out, len(summary["rows"]))
    return EXIT_OK


def cmd_sweep_t(args) -> int:
    train, query, gallery = _synthetic_splits(args)
    old_train, new_train = allocate(train, AllocationSpec(args.allocation, args.fraction, args.seed))
    old_cfg, _ = _configs(args, "old", "cls")
    old = train_old(old_train, old_cfg)
    lines = ["t,self,cross"]
    for t in args.ts:
        cfg, ccfg = _configs(args, "new", "cls+adv+p2s")
        result = train_new_compatible(new_train, old.checkpoint, cfg, replace(ccfg, t=t), old.geometry)
        new_model = result.checkpoint.embed
        lines.append(
            f"{t!r},{self_test(new_model, query, gallery)!r},"
            f"{cross_test(new_model, old.checkpoint.embed, query, gallery)!r}"
        )
    out = _run_dir(args)
    text = "\n".join(lines) + "\n"
    (out / "threshold_sweep.csv").write_text(text)
    _write_manifest(out, args, [])
    sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "backfill": cmd_backfill,
    "bench": cmd_bench,
    "sweep-t": cmd_sweep_t,
}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
        logging.basicConfig(
            level=logging.DEBUG if args.verbose else logging.INFO,
            format="%(levelname)s %(name)s: %(message)s",
        )
        return COMMANDS[args.command](args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, ShapeError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericError, UndefinedMetricError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
