"""Multi-seed variant comparison: train and evaluate each (variant, seed) cell.

Two protocols are supported.  By default every cell trains its variant from
scratch through both phases.  With ``init_from_baseline`` the crop phase is
run once per seed on the baseline, and every variant (the baseline included)
then starts the full-frame phase from that checkpoint with fresh optimizer
state, so all variants see the same data and the same number of steps.

Seeds share nothing, so they may run in worker processes; results are always
collected in (variant, seed) order so the report does not depend on timing.
"""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from pfseg._accel import worker_count
from pfseg.config import RunConfig
from pfseg.dataset import ClassTable, LabeledFramePair, default_class_table, generate_synthetic
from pfseg.models import build_model
from pfseg.train import evaluate, finetune_from, train

log = logging.getLogger(__name__)

METRICS = ("class", "global", "miou", "static", "dynamic")


@dataclass
class CellResult:
    variant: str
    seed: int
    summary: Dict[str, Optional[float]]
    final_loss: float


def synthetic_splits(cfg: RunConfig, table: Optional[ClassTable] = None):
    """The train and test scenes described by the data keys of ``cfg``."""
    kw = dict(
        size=cfg.size,
        prior_offset_frames=cfg.offset,
        jitter=cfg.jitter,
        table=table,
        objects_per_class=(cfg.objects_min, cfg.objects_max),
        twin_separation=cfg.twin_separation,
    )
    train_items = generate_synthetic(cfg.data_seed, cfg.train_scenes, start=0, **kw)
    test_items = generate_synthetic(cfg.data_seed, cfg.test_scenes, start=cfg.train_scenes, **kw)
    return train_items, test_items


def _finish(model, variant, seed, tcfg, train_items, test_items, table) -> CellResult:
    _, tlog = train(model, train_items, tcfg)
    report = evaluate(model, test_items, table)
    tail = tlog.losses[-20:]
    return CellResult(variant, seed, report.summary(), float(np.mean(tail)) if tail else float("nan"))


def run_seed(
    variants: Sequence[str],
    seed: int,
    cfg: RunConfig,
    train_items: Sequence[LabeledFramePair],
    test_items: Sequence[LabeledFramePair],
    table: ClassTable,
) -> List[CellResult]:
    """All variants for one seed, following the protocol selected by ``cfg``."""
    results = []
    if cfg.init_from_baseline:
        pre = build_model(cfg.model_spec("baseline"), seed)
        train(pre, train_items, cfg.train_config(seed=seed, steps_phase2=0))
        for v in variants:
            model, _, _ = finetune_from(pre, cfg.model_spec(v), seed, cfg.fusion_init)
            tcfg = cfg.train_config(seed=seed + 1_000_003, steps_phase1=0)
            results.append(_finish(model, v, seed, tcfg, train_items, test_items, table))
            _log_cell(results[-1])
    else:
        for v in variants:
            model = build_model(cfg.model_spec(v), seed)
            results.append(_finish(model, v, seed, cfg.train_config(seed=seed), train_items, test_items, table))
            _log_cell(results[-1])
    return results


def _log_cell(r: CellResult) -> None:
    log.info("%s seed %d: %s", r.variant, r.seed, " ".join(f"{k}={v:.4f}" for k, v in r.summary.items() if v is not None))


def _run_seed_star(args):
    return run_seed(*args)


def compare(
    variants: Sequence[str],
    seeds: Sequence[int],
    cfg: RunConfig,
    train_items: Sequence[LabeledFramePair],
    test_items: Sequence[LabeledFramePair],
    table: Optional[ClassTable] = None,
    workers: Optional[int] = None,
) -> List[CellResult]:
    """Results ordered by variant, then seed."""
    if not variants:
        raise ValueError("compare needs at least one variant")
    if not seeds:
        raise ValueError("compare needs at least one seed")
    table = table or default_class_table()
    workers = worker_count() if workers is None else workers
    jobs = [(list(variants), s, cfg, train_items, test_items, table) for s in seeds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            per_seed = list(pool.map(_run_seed_star, jobs))
    else:
        per_seed = [run_seed(*job) for job in jobs]
    return [cells[i] for i in range(len(variants)) for cells in per_seed]


def _mean_sd(values: List[float]) -> Tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return float("nan"), float("nan")
    sd = float(np.std(arr, ddof=1)) if arr.size > 1 else 0.0
    return float(np.mean(arr)), sd


def aggregate(results: Sequence[CellResult]) -> Dict[str, Dict[str, Tuple[float, float]]]:
    """Per variant, per metric ``(mean, sample sd)`` over seeds, in first-seen variant order."""
    out: Dict[str, Dict[str, Tuple[float, float]]] = {}
    for variant in dict.fromkeys(r.variant for r in results):
        cells = [r for r in results if r.variant == variant]
        out[variant] = {
            m: _mean_sd([c.summary[m] for c in cells if c.summary.get(m) is not None]) for m in METRICS
        }
    return out


def _f(x: float) -> str:
    return "" if np.isnan(x) else f"{x:.6f}"


SUMMARY_COLUMNS = ("variant", "seeds") + tuple(f"{m}_{s}" for m in METRICS for s in ("mean", "sd"))
RUNS_COLUMNS = ("variant", "seed") + METRICS + ("final_loss",)


def summary_csv(results: Sequence[CellResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for variant, stats in aggregate(results).items():
        n = sum(1 for r in results if r.variant == variant)
        row = [variant, n]
        for m in METRICS:
            mean, sd = stats[m]
            row += [_f(mean), _f(sd)]
        w.writerow(row)
    return buf.getvalue()


def runs_csv(results: Sequence[CellResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RUNS_COLUMNS)
    for r in results:
        w.writerow([r.variant, r.seed] + [_f(r.summary[m] if r.summary[m] is not None else float("nan")) for m in METRICS] + [_f(r.final_loss)])
    return buf.getvalue()


def read_summary_csv(text: str) -> Dict[str, Dict[str, float]]:
    out = {}
    for rec in csv.DictReader(io.StringIO(text)):
        out[rec["variant"]] = {k: (float(v) if v else float("nan")) for k, v in rec.items() if k not in ("variant",)}
    return out
