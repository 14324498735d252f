"""Command-line entry point.

Every subcommand loads defaults, applies ``--config`` and then the explicit
flags, validates, echoes the resolved configuration to ``OUT/config.ini`` and
prints a JSON summary. Rerunning a subcommand with ``--config OUT/config.ini``
reproduces its CSV outputs.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import load_config
from .data import corrupt_labels, gen_blobs, gen_moons, save_csv
from .experiment import run_experiment

METHODS = ("datasi", "gradnorm", "uniform", "margin", "confidence")


def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", metavar="PATH", help="INI configuration file")
    p.add_argument("--seed", type=int, help="training seed (split, init, shuffling)")
    p.add_argument("--out", metavar="DIR", required=out_required, help="output directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--milestones", type=_int_list, help="comma-separated decay epochs, e.g. 16,24")
    g = p.add_argument_group("data")
    g.add_argument("--dataset", choices=("blobs", "moons"), help="synthetic source")
    g.add_argument("--data", metavar="CSV", help="CSV file with a header row")
    g.add_argument("--label-column")
    g.add_argument("--idx-images", metavar="PATH")
    g.add_argument("--idx-labels", metavar="PATH")
    g.add_argument("--limit", type=int, help="keep the first LIMIT samples")
    g.add_argument("--corrupt-count", type=int)
    g.add_argument("--corrupt-fraction", type=float)


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _thresholds(p: argparse.ArgumentParser) -> None:
    p.add_argument("--t-low", type=float)
    p.add_argument("--t-up", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gradselect", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="full-set training")
    _common(p)

    p = sub.add_parser("select", help="adaptive per-epoch subset selection")
    _common(p)
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--k", type=int)
    p.add_argument("--tau", type=float)
    _thresholds(p)
    p.add_argument("--approx", action="store_true", default=None, help="output-gradient approximation")
    p.add_argument("--fixed-fraction", type=float, help="portion kept by the baselines")
    p.add_argument("--no-lr-adjust", action="store_true", help="keep the learning rate unscaled")
    p.add_argument("--two-pass", action="store_true", default=None,
                   help="also run the baselines at the adaptive A/E rounded up to a tenth")
    p.add_argument("--save-valuations", action="store_true", default=None)

    p = sub.add_parser("coreset", help="frequency-based coreset")
    csub = p.add_subparsers(dest="coreset_command", required=True)
    for name, text in (("build", "record GradNorm bands and build a coreset"),
                       ("run", "build a coreset and retrain on it")):
        c = csub.add_parser(name, help=text)
        _common(c)
        c.add_argument("--N", dest="n_min", type=int, help="minimum selection count")
        c.add_argument("--budget", type=float, help="fraction (<= 1) or absolute size")
        c.add_argument("--exclude-last", help="'best' or a number of trailing epochs")
        _thresholds(c)
    c = csub.add_parser("retrain", help="retrain on a coreset file plus uniform baselines")
    _common(c)
    c.add_argument("--coreset", metavar="FILE", help="coreset file written by 'coreset build'")

    p = sub.add_parser("value", help="full-set run dumping per-epoch valuation CSVs")
    _common(p)
    p.add_argument("--approx", action="store_true", default=None)
    p.add_argument("--k", type=int, help="clusters for the cluster_id column")

    p = sub.add_parser("calibrate-tup", help="calibrate t_up on corrupted labels")
    _common(p)
    p.add_argument("--target-share", type=float)
    p.add_argument("--post-warmup-epochs", type=int)
    p.add_argument("--t-up", type=float, help="default t_up to report the share for")

    p = sub.add_parser("gen", help="write a synthetic dataset to OUT/data.csv")
    p.add_argument("--kind", choices=("blobs", "moons"), default="blobs")
    p.add_argument("--m", type=int, default=1000)
    p.add_argument("--d", type=int, default=10)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--spread", type=float, default=1.0)
    p.add_argument("--center-box", type=float, default=2.5)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--corrupt-count", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", metavar="DIR", required=True)
    return parser


def _abs(path: str) -> str:
    return str(Path(path).expanduser().resolve()) if path else path


def _set(obj, attr: str, value) -> None:
    if value is not None:
        setattr(obj, attr, value)


def resolve_config(args: argparse.Namespace):
    cfg = load_config(args.config)
    d, t, s, c = cfg.data, cfg.train, cfg.selection, cfg.coreset
    _set(t, "seed", args.seed)
    _set(t, "epochs", args.epochs)
    _set(t, "lr", args.lr)
    _set(t, "milestones", args.milestones)
    if args.dataset:
        d.source = args.dataset
    if args.data:
        d.source, d.path = "csv", args.data
    if args.idx_images or args.idx_labels:
        d.source = "idx"
        _set(d, "images", args.idx_images)
        _set(d, "labels", args.idx_labels)
    _set(d, "label_column", args.label_column)
    _set(d, "limit", args.limit)
    _set(d, "corrupt_count", args.corrupt_count)
    _set(d, "corrupt_fraction", args.corrupt_fraction)
    # absolute paths keep the echoed config valid from any working directory
    d.path, d.images, d.labels = _abs(d.path), _abs(d.images), _abs(d.labels)

    get = lambda name: getattr(args, name, None)  # noqa: E731
    _set(s, "method", get("method"))
    _set(s, "k", get("k"))
    _set(s, "tau", get("tau"))
    _set(s, "t_low", get("t_low"))
    _set(s, "t_up", get("t_up"))
    _set(s, "approx", get("approx"))
    _set(s, "fixed_fraction", get("fixed_fraction"))
    _set(s, "two_pass", get("two_pass"))
    if get("no_lr_adjust"):
        s.adjust_lr = False
    _set(cfg, "save_valuations", get("save_valuations"))
    _set(c, "n_min", get("n_min"))
    _set(c, "budget", get("budget"))
    _set(c, "exclude_last", get("exclude_last"))
    if get("coreset"):
        c.path = args.coreset
    c.path = _abs(c.path)
    _set(cfg.calibrate, "target_share", get("target_share"))
    _set(cfg.calibrate, "post_warmup_epochs", get("post_warmup_epochs"))
    return cfg


def _gen(args: argparse.Namespace) -> dict:
    if args.kind == "blobs":
        ds = gen_blobs(args.m, args.d, args.classes, args.spread, args.seed, (-args.center_box, args.center_box))
    else:
        ds = gen_moons(args.m, args.noise, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = {"run": "gen", "kind": args.kind, "m": len(ds), "d": ds.n_features, "classes": ds.num_classes}
    if args.corrupt_count:
        ds, ids = corrupt_labels(ds, count=args.corrupt_count, seed=args.seed)
        np.savetxt(out / "corrupted_ids.txt", ids, fmt="%d")
        summary["corrupted"] = int(ids.size)
    save_csv(ds, out / "data.csv")
    return summary


MODES = {
    "train": "full", "select": "adaptive", "value": "value", "calibrate-tup": "calibrate",
    ("coreset", "build"): "coreset_build", ("coreset", "retrain"): "coreset_retrain",
    ("coreset", "run"): "coreset",
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "gen":
            summary = _gen(args)
        else:
            cfg = resolve_config(args)
            if args.command == "train":
                cfg.selection.method = "full"
            key = (args.command, args.coreset_command) if args.command == "coreset" else args.command
            summary = run_experiment(cfg, args.out, MODES[key])
    except (ValueError, OSError) as exc:
        print(f"gradselect: error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(summary, indent=2, sort_keys=True, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
