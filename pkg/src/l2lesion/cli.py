"""``l2lesion`` command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys

from . import __version__
from .config import RunConfig, load_config, parse_config
from .data import generate_synthetic_dataset
from .dataset import write_dataset
from .errors import BadConfig, BadSubset, L2LesionError
from .gradcheck import DEFAULT_TOLERANCE, SCOPES, run_gradcheck
from .metrics import _atomic_write, emit_report
from .models import load_checkpoint
from .schema import MODALITY_TABLE_HEADER, POOLING_TABLE_HEADER, check_path
from .train import eval_checkpoint, load_dataset, train_classifier, train_detector

log = logging.getLogger("l2lesion")

# the nine incremental rows of the modality table, as (T1, T1c, T2, F/D) flags
DEFAULT_SUBSETS = (
    "T1", "T1c", "T2", "FLAIR",
    "T1c,T2,FLAIR", "T1,T1c,FLAIR", "T1,T2,FLAIR", "T1,T1c,T2", "T1,T1c,T2,FLAIR",
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _global_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value run config file")
    p.add_argument("--seed", type=int, help="run seed (u64); overrides the config")
    p.add_argument("--out", default="out", help="output directory (default: out)")
    p.add_argument("--format", choices=("json", "csv"), default="json", help="report format")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key; repeatable")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="l2lesion", description="l2-norm pooling networks for brain lesion slices")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a seeded synthetic dataset")
    _global_flags(p)

    for name, help_ in (("train-classify", "train the slice classifier"),
                        ("train-detect", "train the lesion detector")):
        p = sub.add_parser(name, help=help_)
        _global_flags(p)
        p.add_argument("--dataset", help="dataset directory (default: generate in memory)")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    _global_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--dataset")

    p = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    _global_flags(p)
    p.add_argument("--scope", choices=SCOPES, default="all")
    p.add_argument("--tolerance", type=float, default=DEFAULT_TOLERANCE)
    p.add_argument("--trials", type=int, default=100)

    p = sub.add_parser("ablate-modality", help="detection Dice per modality subset")
    _global_flags(p)
    p.add_argument("--dataset")
    p.add_argument("--subsets", nargs="+", help="comma-separated modality lists (default: nine rows)")

    p = sub.add_parser("ablate-pooling", help="detection Dice with l2 vs max pooling")
    _global_flags(p)
    p.add_argument("--dataset")

    p = sub.add_parser("schema-check", help="validate emitted artifacts")
    _global_flags(p)
    p.add_argument("paths", nargs="*", help="files or directories (default: --out)")
    return parser


def resolve_config(args, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    if args.config:
        cfg = load_config(args.config, cfg)
    if args.set:
        cfg = parse_config("\n".join(args.set), cfg)
    if getattr(args, "dataset", None):
        cfg = cfg.replace(dataset=args.dataset)
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2**64:
            raise BadConfig("--seed must be an unsigned 64-bit integer")
        cfg = cfg.replace(seed=args.seed)
    cfg.validate()
    return cfg


def _emit(report, out_dir: str, fmt: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    emit_report(report, os.path.join(out_dir, f"report.{fmt}"), fmt)
    print(json.dumps(report.to_dict(), indent=2))


# --------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    cfg = resolve_config(args)
    if args.seed is not None:
        cfg = cfg.replace(synth_seed=args.seed)
    synth = cfg.synth_config()
    vols = generate_synthetic_dataset(synth)
    manifest = write_dataset(vols, args.out, synth, cfg.split, cfg.detect_split, cfg.detect_classes,
                             cfg.synth_seed)
    print(f"wrote {len(vols)} volumes to {args.out} ({len(manifest['checksums'])} checksummed files)")
    return 0


def _train(args, fn) -> int:
    cfg = resolve_config(args)
    if fn is train_detector:
        cfg = cfg.replace(task="detect")
    result = fn(cfg, out_dir=args.out)
    if args.format == "csv":
        emit_report(result.report, os.path.join(args.out, "report.csv"), "csv")
    print(json.dumps(result.report.to_dict(), indent=2))
    return 0


def cmd_eval(args) -> int:
    model, manifest = load_checkpoint(args.checkpoint)
    base = parse_config(manifest.get("extra", {}).get("config", ""))
    cfg = resolve_config(args, base)
    report = eval_checkpoint(model, cfg, args.split)
    _emit(report, args.out, args.format)
    return 0


def cmd_gradcheck(args) -> int:
    report = run_gradcheck(args.scope, args.seed or 0, args.tolerance, args.trials)
    print("\n".join(report.lines()))
    os.makedirs(args.out, exist_ok=True)
    _atomic_write(os.path.join(args.out, "gradcheck.json"), json.dumps(report.to_dict(), indent=2) + "\n")
    return 0 if report.ok else 3


def parse_subset(text: str) -> tuple:
    names = tuple(s.strip() for s in text.replace("+", ",").split(",") if s.strip())
    if not names:
        raise BadSubset("modality subset is empty")
    return names


def modality_flags(subset) -> list:
    """``x``/``-`` per table column; the F/D column marks FLAIR or DWI."""
    cols = [("T1",), ("T1c",), ("T2",), ("FLAIR", "DWI")]
    return ["x" if any(m in subset for m in names) else "-" for names in cols]


def _table_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def run_modality_ablation(cfg: RunConfig, subsets, out_dir: str, data=None) -> list:
    subsets = [parse_subset(s) if isinstance(s, str) else tuple(s) for s in subsets]
    if any(not s for s in subsets):
        raise BadSubset("modality subset is empty")
    data = data if data is not None else load_dataset(cfg)
    rows = []
    for subset in subsets:
        result = train_detector(cfg.replace(task="detect", modalities=subset), data)
        dice = 100.0 * result.report.dice
        log.info("modalities %s: dice %.2f", ",".join(subset), dice)
        rows.append(modality_flags(subset) + [f"{dice:.2f}"])
    os.makedirs(out_dir, exist_ok=True)
    _atomic_write(os.path.join(out_dir, "modality_ablation.csv"), _table_csv(MODALITY_TABLE_HEADER, rows))
    return rows


def run_pooling_ablation(cfg: RunConfig, out_dir: str, data=None) -> list:
    data = data if data is not None else load_dataset(cfg)
    rows = []
    for label, pooling in (("without l2-norm unit", "max"), ("with l2-norm unit", "l2")):
        result = train_detector(cfg.replace(task="detect", pooling=pooling), data)
        rows.append([label, pooling, f"{100.0 * result.report.dice:.2f}"])
    os.makedirs(out_dir, exist_ok=True)
    _atomic_write(os.path.join(out_dir, "pooling_ablation.csv"), _table_csv(POOLING_TABLE_HEADER, rows))
    return rows


def cmd_ablate_modality(args) -> int:
    cfg = resolve_config(args)
    rows = run_modality_ablation(cfg, args.subsets or DEFAULT_SUBSETS, args.out)
    print(_table_csv(MODALITY_TABLE_HEADER, rows), end="")
    return 0


def cmd_ablate_pooling(args) -> int:
    cfg = resolve_config(args)
    rows = run_pooling_ablation(cfg, args.out)
    print(_table_csv(POOLING_TABLE_HEADER, rows), end="")
    return 0


def cmd_schema_check(args) -> int:
    results = []
    for p in args.paths or [args.out]:
        if not os.path.exists(p):
            print(f"MISSING  {p}")
            return 2
        results.extend(check_path(p))
    for r in results:
        print(f"{'OK ' if r.ok else 'BAD'}  {r.kind:<15} {r.path}" + (f"  ({r.message})" if r.message else ""))
    bad = sum(not r.ok for r in results)
    print(f"{len(results)} artifacts checked, {bad} failed")
    return 0 if bad == 0 else 2


COMMANDS = {
    "synth": cmd_synth,
    "train-classify": lambda a: _train(a, train_classifier),
    "train-detect": lambda a: _train(a, train_detector),
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "ablate-modality": cmd_ablate_modality,
    "ablate-pooling": cmd_ablate_pooling,
    "schema-check": cmd_schema_check,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except L2LesionError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
