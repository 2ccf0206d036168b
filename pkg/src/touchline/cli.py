"""Command-line entry point: gen, train, eval, gradcheck, compare, report."""
from __future__ import annotations

import argparse
import json
import logging
import os
import shlex
import sys
from pathlib import Path

from .config import ConfigError, load_kv
from .scenes import (Condition, GeneratorConfig, MalformedRecord, PlacementFailure, apply_condition,
                     colinearity_stats, generate, read_scenes, write_scenes)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
LOG_ENV = "TOUCHLINE_LOG"

log = logging.getLogger("touchline")


class DataError(Exception):
    pass


class UsageError(Exception):
    pass


def _echo(cmd: str, settings: dict) -> None:
    """Print a line that reproduces this invocation with every effective setting."""
    parts = ["touchline", cmd]
    for k, v in settings.items():
        if v is None or v is False:
            continue
        flag = "--" + k.replace("_", "-")
        if v is True:
            parts.append(flag)
        elif isinstance(v, (list, tuple)):
            parts += [flag] + [str(x) for x in v]
        else:
            parts += [flag, str(v)]
    print("# " + shlex.join(parts))


def _read(path) -> list:
    p = Path(path)
    if not p.exists():
        raise DataError(f"{p}: no such file")
    try:
        return read_scenes(p)
    except MalformedRecord as e:
        raise DataError(f"{p}: {e}") from e


def _fmt_stats(stats: dict, n: int) -> str:
    return (f"scenes: {n}\n"
            f"mean VTL colinearity: {stats['vtl']:.4f} (n={stats['vtl_count']})\n"
            f"mean EWL colinearity: {stats['ewl']:.4f} (n={stats['ewl_count']})")


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen(args) -> int:
    cfg = load_kv(args.config, GeneratorConfig) if args.config else GeneratorConfig()
    cfg = GeneratorConfig(**{**cfg.__dict__, "seed": args.seed, "scenes": args.scenes})
    _echo("gen", {"out": args.out, "seed": args.seed, "scenes": args.scenes, "config": args.config})
    try:
        scenes = generate(cfg, args.scenes, args.prefix)
    except PlacementFailure as e:
        raise DataError(str(e)) from e
    try:
        write_scenes(args.out, scenes)
    except OSError as e:
        raise DataError(f"{args.out}: {e.strerror or e}") from e
    print(_fmt_stats(colinearity_stats(scenes), len(scenes)))
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import DataMissingGesture, TrainConfig, load_config, train

    base = load_config(args.config) if args.config else TrainConfig()
    over = {"gesture": args.gesture, "condition": args.condition, "seed": args.seed, "epochs": args.epochs}
    cfg = base.replace(**{k: v for k, v in over.items() if v is not None})
    _echo("train", {"data": args.data, "gesture": cfg.gesture, "condition": cfg.condition,
                    "seed": cfg.seed, "epochs": cfg.epochs, "config": args.config, "out": args.out,
                    "val_data": args.val_data})
    log.info("effective config:\n%s", "".join(f"  {k} = {v}\n" for k, v in cfg.__dict__.items()))
    scenes = _read(args.data)
    val = _read(args.val_data) if args.val_data else None
    if not scenes:
        raise DataError(f"{args.data}: no scenes")

    def progress(rec):
        m, lo = rec["metrics"], rec["losses"]
        log.info("epoch %d  loss %.4f  aligned %.4f  iou@0.25 %.3f  giou@0.75 %.3f  (%.1fs)",
                 rec["epoch"], lo["total"], lo["aligned"], m["iou@0.25"], m["giou@0.75"], rec["seconds"])

    try:
        res = train(cfg, scenes, out_dir=args.out, val_scenes=val, progress=progress)
    except DataMissingGesture as e:
        raise DataError(str(e)) from e
    print(f"best epoch: {res.best_epoch}")
    print(f"best precision@GIoU 0.75: {res.best_score:.4f}")
    print(f"checkpoint: {Path(args.out) / 'best.ckpt'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluate import evaluate
    from .model import load_checkpoint

    if not Path(args.ckpt).exists():
        raise DataError(f"{args.ckpt}: no such file")
    try:
        mcfg, params, meta = load_checkpoint(args.ckpt)
    except (ValueError, KeyError) as e:
        raise DataError(f"{args.ckpt}: {e}") from e
    condition = args.condition or meta.get("condition", "full")
    line_kind = args.line_kind or (meta.get("gesture") if meta.get("gesture") in ("vtl", "ewl") else "vtl")
    _echo("eval", {"ckpt": args.ckpt, "data": args.data, "metric": args.metric, "condition": condition,
                   "line_kind": line_kind, "label": args.label, "out": args.out})
    scenes = [apply_condition(s, condition) for s in _read(args.data)]
    if not scenes:
        raise DataError(f"{args.data}: no scenes")
    rep = evaluate(params, mcfg, scenes, metrics=(args.metric,), line_kind=line_kind,
                   label=args.label or Path(args.ckpt).parent.name)
    rep.extra["checkpoint"] = str(args.ckpt)
    rep.extra["checkpoint_meta"] = meta
    text = rep.to_json()
    if args.out:
        out = Path(args.out)
        out.write_text(text + "\n", encoding="utf-8")
        out.with_suffix(".csv").write_text(rep.to_csv(), encoding="utf-8")
    for thr, row in rep.precision[args.metric].items():
        cells = "  ".join(f"{b}={100 * v:5.1f}" for b, v in row.items())
        print(f"{args.metric}>{thr}: {cells}")
    if rep.cos_sim_gt is not None:
        print(f"cos_sim_gt {rep.cos_sim_gt:.4f}  cos_sim_pred {rep.cos_sim_pred:.4f}  ({line_kind.upper()}, n={rep.cos_count})")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .train import TINY_MODEL, TrainConfig, gradcheck_total_loss

    base = TrainConfig(**TINY_MODEL, seed=args.seed)
    cfg = load_kv(args.config, TrainConfig, base) if args.config else base
    samples = None if args.samples <= 0 else args.samples
    _echo("gradcheck", {"config": args.config, "tolerance": args.tolerance, "seed": cfg.seed,
                        "samples": args.samples})
    res, br = gradcheck_total_loss(cfg, tolerance=args.tolerance, samples_per_param=samples)
    print("loss components: " + "  ".join(f"{k}={v:.6f}" for k, v in br.as_dict().items()))
    print(f"checked {res.checked} coordinates, excluded {len(res.excluded)} at kinks")
    print(f"max relative error: {res.max_rel_error:.3e} (tolerance {args.tolerance:.1e})")
    if not res.passed(args.tolerance):
        print(f"worst coordinate: {res.worst}")
        return EXIT_NUMERIC
    return EXIT_OK


def _load_report(path):
    from .evaluate import MetricsReport

    p = Path(path)
    if not p.exists():
        raise DataError(f"{p}: no such file")
    try:
        return MetricsReport.from_dict(json.loads(p.read_text(encoding="utf-8")))
    except (json.JSONDecodeError, TypeError) as e:
        raise DataError(f"{p}: malformed report ({e})") from e


def cmd_compare(args) -> int:
    from .evaluate import MismatchedSplit, format_comparison

    if len(args.reports) < 2:
        raise UsageError("compare needs at least two reports")
    _echo("compare", {"reports": args.reports, "metric": args.metric, "bucket": args.bucket})
    reports = [_load_report(p) for p in args.reports]
    try:
        print(format_comparison(reports, args.metric, args.bucket))
    except MismatchedSplit as e:
        raise DataError(str(e)) from e
    except KeyError as e:
        raise DataError(f"metric {args.metric!r} missing from a report") from e
    return EXIT_OK


def cmd_report(args) -> int:
    from . import plots

    _echo("report", {"in": args.inputs, "plots": args.plots})
    out = Path(args.plots)
    out.mkdir(parents=True, exist_ok=True)
    reports, logs = [], []
    for p in args.inputs:
        if str(p).endswith(".jsonl"):
            logs.append((Path(p), plots.read_log(p)))
        else:
            reports.append(_load_report(p))
    written = []
    if reports:
        written += plots.precision_curves(reports, out)
    for path, recs in logs:
        written.append(plots.loss_curves(recs, out / f"{path.parent.name or path.stem}_losses.svg"))
    if len(reports) >= 2:
        from .evaluate import MismatchedSplit, format_comparison
        try:
            table = format_comparison(reports, "iou" if "iou" in reports[0].precision else "giou")
        except MismatchedSplit as e:
            raise DataError(str(e)) from e
        (out / "comparison.txt").write_text(table + "\n", encoding="utf-8")
        written.append(out / "comparison.txt")
        print(table)
    for w in written:
        print(f"wrote {w}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="touchline", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic scene file")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--scenes", type=int, default=1000)
    g.add_argument("--config")
    g.add_argument("--prefix", default="s", help="scene id prefix")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data", required=True)
    t.add_argument("--val-data", help="held-out scenes for model selection (default: tail of --data)")
    t.add_argument("--gesture", choices=("vtl", "ewl", "none"))
    t.add_argument("--condition", choices=[c.value for c in Condition])
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--metric", choices=("iou", "giou"), default="iou")
    e.add_argument("--condition", choices=[c.value for c in Condition])
    e.add_argument("--line-kind", choices=("vtl", "ewl"))
    e.add_argument("--label")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of the full loss")
    c.add_argument("--config")
    c.add_argument("--tolerance", type=float, default=1e-4)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--samples", type=int, default=8, help="coordinates per parameter (0 = all)")
    c.set_defaults(func=cmd_gradcheck)

    m = sub.add_parser("compare", help="side-by-side precision deltas")
    m.add_argument("--reports", nargs="+", required=True)
    m.add_argument("--metric", choices=("iou", "giou"), default="iou")
    m.add_argument("--bucket", choices=("All", "S", "M", "L"), default="All")
    m.set_defaults(func=cmd_compare)

    r = sub.add_parser("report", help="write SVG plots from reports and training logs")
    r.add_argument("--in", dest="inputs", nargs="+", required=True,
                   help="metrics reports (.json) and/or training logs (.jsonl)")
    r.add_argument("--plots", required=True)
    r.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    level = os.environ.get(LOG_ENV, "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format="%(message)s", stream=sys.stderr)
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"touchline {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"touchline {args.command}: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as e:
        print(f"touchline {args.command}: numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"touchline {args.command}: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
