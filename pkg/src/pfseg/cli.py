"""Command-line interface: ``pfseg <command> [flags]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data or file error,
3 numerical failure (non-finite loss, gradient check above tolerance).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from pfseg import __version__
from pfseg.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from pfseg.config import SCHEMA, ConfigError, RunConfig, load_run_config, parse_size
from pfseg.dataset import (
    DataError,
    LabeledFramePair,
    default_class_table,
    export_dataset,
    generate_synthetic,
    load_camvid,
    load_exported,
)
from pfseg.experiment import compare, runs_csv, summary_csv, synthetic_splits
from pfseg.gradcheck import CHECKS, run_op_check
from pfseg.imageio import to_uint8, write_ppm
from pfseg.models import VARIANTS, build_model, canonical_variant, count_params, param_report
from pfseg.train import NumericalError, TrainState, evaluate, finetune_from, predict, train

log = logging.getLogger("pfseg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
GRADCHECK_TOLERANCE = 1e-4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad flags; this contract reserves 2 for data errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# shared helpers


def _overrides(args) -> Dict[str, str]:
    out: Dict[str, str] = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = (s.strip() for s in item.split("=", 1))
        if k not in SCHEMA:
            raise ConfigError(f"unknown config key {k!r}")
        out[k] = v
    return out


def _run_config(args, **flag_values) -> RunConfig:
    """Config file, then ``--set`` pairs, then dedicated flags (highest precedence)."""
    cfg = load_run_config(getattr(args, "config", None), _overrides(args))
    for k, v in flag_values.items():
        if v is not None:
            cfg.set(k, v)
    return cfg


def open_data(path, split: str, offset: int) -> List[LabeledFramePair]:
    """Items of ``split`` from an exported folder (manifest.tsv) or a CamVid-layout root."""
    root = Path(path)
    table = default_class_table()
    if (root / "manifest.tsv").is_file():
        items = load_exported(root, split, table)
    elif (root / split).is_dir():
        ds = load_camvid(root, offset, table, split)
        if ds.dropped:
            log.info("%s: %d of %d frames have no prior %d frames earlier", split, len(ds.dropped), ds.candidates, offset)
        items = list(ds)
    else:
        raise DataError(f"{root}: neither a manifest.tsv nor a {split}/ folder")
    if not items:
        raise DataError(f"{root}: split {split!r} has no usable frame pairs")
    return items


def _write(path, text: str) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(text)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = _run_config(
        args,
        data_seed=args.seed,
        train_scenes=args.scenes,
        test_scenes=args.test_scenes,
        size=args.size,
        offset=args.offset,
        jitter=args.jitter,
    )
    train_items, test_items = synthetic_splits(cfg)
    items = train_items + test_items
    splits = ["train"] * len(train_items) + ["test"] * len(test_items)
    manifest = export_dataset(items, args.out, splits=splits)
    print(f"wrote {len(train_items)} train and {len(test_items)} test pairs to {manifest}")
    return EXIT_OK


def _training_items(args, cfg: RunConfig) -> List[LabeledFramePair]:
    if args.data:
        return open_data(args.data, "train", cfg.prior_offset)
    return synthetic_splits(cfg)[0]


def cmd_train(args) -> int:
    cfg = _run_config(args, seed=args.seed, lr=args.lr, steps_phase1=args.steps_phase1, steps_phase2=args.steps_phase2)
    spec = cfg.model_spec(args.variant)
    items = _training_items(args, cfg)
    state = None
    if args.init_from:
        source, _ = load_checkpoint(args.init_from)
        model, copied, fresh = finetune_from(source, spec, cfg.seed, cfg.fusion_init)
        log.info("initialised from %s: %d tensors copied, %d fresh", args.init_from, len(copied), len(fresh))
        print(f"copied: {' '.join(copied)}")
        print(f"fresh: {' '.join(fresh) or '-'}")
    else:
        model = build_model(spec, cfg.seed)
    model, tlog = train(model, items, cfg.train_config(), state)
    save_checkpoint(model, tlog.state, args.out_ckpt)
    if args.log_csv:
        _write(args.log_csv, tlog.to_csv())
    last = tlog.losses[-1] if tlog.losses else float("nan")
    print(f"trained {spec.variant} for {len(tlog.rows)} steps, final loss {last:.4f}; checkpoint {args.out_ckpt}")
    return EXIT_OK


def render_items(items: Sequence[LabeledFramePair], preds: Sequence[np.ndarray], out_dir, start: int = 0) -> List[Path]:
    table = default_class_table()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for i, (it, pred) in enumerate(zip(items, preds), start):
        for kind, rgb in (("input", to_uint8(it.current)), ("gt", table.colorize(it.labels)), ("pred", table.colorize(pred))):
            path = out / f"item-{i:04d}-{kind}.ppm"
            write_ppm(path, rgb)
            written.append(path)
    return written


def cmd_eval(args) -> int:
    if not Path(args.ckpt).is_file():
        raise DataError(f"{args.ckpt}: checkpoint not found")
    model, _ = load_checkpoint(args.ckpt)
    items = open_data(args.data, args.split, args.offset)
    report = evaluate(model, items, default_class_table())
    text = report.to_csv()
    if args.out_csv:
        _write(args.out_csv, text)
    else:
        sys.stdout.write(text)
    if args.render_dir:
        for start in range(0, len(items), 8):
            chunk = items[start : start + 8]
            render_items(chunk, predict(model, chunk), args.render_dir, start)
    s = report.summary()
    log.info("global %.4f class %.4f miou %.4f", s["global"], s["class"], s["miou"])
    return EXIT_OK


def _params_spec(args, variant):
    cfg = _run_config(args)
    if args.fusion_bias:
        cfg.set("fusion_bias", True)
    return cfg.model_spec(variant)


def cmd_params(args) -> int:
    if args.all:
        totals = {}
        for v in VARIANTS:
            totals[v] = count_params(build_model(_params_spec(args, v)))
        base = totals["baseline"]
        print(f"{'variant':<10} {'params':>12} {'delta':>12}")
        for v in VARIANTS:
            print(f"{v:<10} {totals[v]:>12,} {totals[v] - base:>+12,}")
        return EXIT_OK
    if not args.variant:
        raise UsageError("params needs --variant or --all")
    model = build_model(_params_spec(args, args.variant))
    for name, shape, n in param_report(model):
        print(f"{name:<24} {'x'.join(map(str, shape)):>18} {n:>12,}")
    print(f"{'total':<24} {'':>18} {count_params(model):>12,}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    ops = list(CHECKS) if args.op == "all" else [args.op]
    for op in ops:
        if op not in CHECKS:
            raise UsageError(f"unknown op {op!r}; choose from all, {', '.join(CHECKS)}")
    failed = []
    for op in ops:
        err = run_op_check(op, args.trials, args.seed, args.epsilon)
        ok = err < GRADCHECK_TOLERANCE
        print(f"{op:<14} max rel err {err:.3e}  {'ok' if ok else 'FAIL'}")
        if not ok:
            failed.append(op)
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _run_config(args)
    variants = [canonical_variant(v) for v in args.variants]
    if args.data:
        train_items = open_data(args.data, "train", cfg.prior_offset)
        test_items = open_data(args.data, "test", cfg.prior_offset)
    else:
        train_items, test_items = synthetic_splits(cfg)
    results = compare(variants, args.seeds, cfg, train_items, test_items)
    text = summary_csv(results)
    if args.out_csv:
        _write(args.out_csv, text)
    else:
        sys.stdout.write(text)
    if args.runs_csv:
        _write(args.runs_csv, runs_csv(results))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _variant(s: str) -> str:
    try:
        return canonical_variant(s)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _size(s: str):
    try:
        return parse_size(s)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pfseg", description="Encoder-decoder segmentation with temporal scene priors.")
    p.add_argument("--version", action="version", version=f"pfseg {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp):
        sp.add_argument("--config", help="key = value file; flags override it")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")

    g = sub.add_parser("gen-data", help="render and export a synthetic train/test set")
    with_config(g)
    g.add_argument("--seed", type=int)
    g.add_argument("--scenes", type=int, help="training scenes")
    g.add_argument("--test-scenes", type=int)
    g.add_argument("--size", type=_size, help="HxW, each divisible by 16")
    g.add_argument("--offset", type=int, help="frames between prior and current")
    g.add_argument("--jitter", type=float, help="per-frame brightness jitter")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one variant and write a checkpoint")
    with_config(t)
    t.add_argument("--variant", type=_variant, required=True)
    t.add_argument("--data", help="exported folder or CamVid root; default: synthetic set from the config")
    t.add_argument("--init-from", help="checkpoint whose matching tensors seed the new model")
    t.add_argument("--out-ckpt", required=True)
    t.add_argument("--log-csv")
    t.add_argument("--seed", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--steps-phase1", type=int)
    t.add_argument("--steps-phase2", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint and write a metrics CSV")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--offset", type=int, default=30, help="prior offset for CamVid-layout data")
    e.add_argument("--out-csv")
    e.add_argument("--render-dir")
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("params", help="parameter table for one or all variants")
    with_config(pr)
    pr.add_argument("--variant", type=_variant)
    pr.add_argument("--all", action="store_true")
    pr.add_argument("--fusion-bias", action="store_true")
    pr.set_defaults(func=cmd_params)

    gc = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    gc.add_argument("--op", default="all")
    gc.add_argument("--trials", type=int, default=20)
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--epsilon", type=float, default=1e-5)
    gc.set_defaults(func=cmd_gradcheck)

    c = sub.add_parser("compare", help="train and evaluate variants over several seeds")
    with_config(c)
    c.add_argument("--data", help="exported folder with train and test splits; default: synthetic set from the config")
    c.add_argument("--variants", nargs="+", required=True)
    c.add_argument("--seeds", nargs="+", type=int, required=True)
    c.add_argument("--out-csv")
    c.add_argument("--runs-csv", help="also write one row per (variant, seed)")
    c.set_defaults(func=cmd_compare)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"pfseg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, OSError) as exc:
        print(f"pfseg: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"pfseg: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"pfseg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
