"""Acceptance checks for the package as a whole.

Each test prints a one-line ``[criterion N] PASS/FAIL`` verdict with the
measured numbers (visible with ``pytest -s`` and in the captured output of a
failure).  The benchmark comparison is marked ``slow``; it trains 12 models
on one core and takes several minutes.
"""

import time
from pathlib import Path

import numpy as np
import pytest

from oracles import brute_force_metrics
from pfseg.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from pfseg.cli import main
from pfseg.dataset import default_class_table, generate_synthetic
from pfseg.experiment import read_summary_csv
from pfseg.gradcheck import CHECKS, run_op_check
from pfseg.metrics import ConfusionMatrix, class_accuracy, global_accuracy, grouped_accuracy, mean_iou
from pfseg.models import ModelSpec, VARIANTS, build_model, closed_form_params, count_params, forward
from pfseg.tensor import Tensor
from pfseg.train import TrainConfig, evaluate, finetune_from, train

BENCHMARK_CFG = Path(__file__).parent.parent / "configs" / "synthetic_benchmark.cfg"
TABLE = default_class_table()


def verdict(n, ok, detail):
    print(f"[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}")
    return ok


# ---------------------------------------------------------------------------
# 1. parameter accounting


def test_1_parameter_accounting():
    totals = {v: count_params(build_model(ModelSpec(v))) for v in VARIANTS}
    deltas = {v: totals[v] - totals["baseline"] for v in VARIANTS}
    expected = {"baseline": 0, "stacked": 9_408, "embed": 7_077_888, "decoder": 9_400_320}
    closed = {v: closed_form_params(ModelSpec(v)) for v in VARIANTS}
    ok = deltas == expected and closed == totals
    assert verdict(1, ok, f"totals {totals}, deltas {deltas}")


# ---------------------------------------------------------------------------
# 2. gradient checks


def test_2_gradient_suite():
    errors = {op: run_op_check(op, trials=20, seed=0, epsilon=1e-5) for op in CHECKS}
    worst = max(errors.values())
    detail = ", ".join(f"{op} {e:.1e}" for op, e in errors.items())
    assert verdict(2, worst < 1e-4, f"worst relative error {worst:.2e} ({detail})")


# ---------------------------------------------------------------------------
# 3. metrics against a brute-force recount


def test_3_metric_oracle():
    rng = np.random.default_rng(3)
    groups = TABLE.groups()
    c = len(TABLE)
    mismatches = 0
    for _ in range(1000):
        h, w = rng.integers(1, 12, size=2)
        gt = rng.integers(0, c, (h, w)).astype(np.uint8)
        gt[rng.random((h, w)) < rng.random() * 0.3] = 255
        pred = rng.integers(0, c, (h, w))
        # bias toward agreement so high accuracies are exercised too
        agree = rng.random((h, w)) < rng.random()
        pred[agree & (gt != 255)] = gt[agree & (gt != 255)]
        cm = ConfusionMatrix(c).update(pred, gt)
        g, ca, miou, grouped = brute_force_metrics(pred, gt, c, groups)
        if g is None:
            mismatches += cm.total != 0
            continue
        got = grouped_accuracy(cm, groups)
        same = (
            global_accuracy(cm) == pytest.approx(float(g), abs=1e-12)
            and class_accuracy(cm) == pytest.approx(float(ca), abs=1e-12)
            and mean_iou(cm) == pytest.approx(float(miou), abs=1e-12)
            and set(got) == set(grouped)
            and all(got[k] == pytest.approx(float(v), abs=1e-12) for k, v in grouped.items())
        )
        mismatches += not same
    assert verdict(3, mismatches == 0, f"{mismatches} of 1000 random maps disagree with the recount")


# ---------------------------------------------------------------------------
# 4. overfitting a tiny set


def test_4_overfit_four_items():
    items = generate_synthetic(11, 4, size=(64, 64))
    spec = ModelSpec("decoder", encoder_widths=(16, 32, 64, 128), decoder_widths=(64, 32, 16, 16), backbone_kernel=5)
    model = build_model(spec, seed=0)
    cfg = TrainConfig(lr=0.02, momentum=0.9, batch_size=4, steps_phase2=500, phase2_lr_scale=1.0, clip_norm=5)
    _, log = train(model, items, cfg)
    final_loss = float(np.mean(log.losses[-5:]))
    acc = evaluate(model, items, TABLE).global_accuracy
    ok = acc > 0.95 and final_loss < 0.1
    assert verdict(4, ok, f"global accuracy {acc:.4f}, loss over last 5 steps {final_loss:.4f} after 500 steps")


# ---------------------------------------------------------------------------
# 6. prior invariance and zero-init identity


def test_6_prior_invariance_and_stacked_identity():
    rng = np.random.default_rng(6)
    spec = dict(encoder_widths=(16, 32, 64, 128), decoder_widths=(64, 32, 16, 16), backbone_kernel=5)
    base = build_model(ModelSpec("baseline", **spec), seed=1)
    x1 = Tensor(rng.random((2, 3, 64, 64), dtype=np.float32))
    ref = forward(base, None, x1).data
    invariant = all(
        np.array_equal(forward(base, Tensor(rng.random((2, 3, 64, 64), dtype=np.float32)), x1).data, ref) for _ in range(3)
    )
    stacked, _, _ = finetune_from(base, ModelSpec("stacked", **spec), seed=2)
    identity = all(
        np.array_equal(forward(stacked, Tensor(rng.random((2, 3, 64, 64), dtype=np.float32)), x1).data, ref) for _ in range(3)
    )
    assert verdict(6, invariant and identity, f"baseline ignores prior: {invariant}; zero-init stacked equals baseline: {identity}")


# ---------------------------------------------------------------------------
# 8. checkpoints


def test_8_checkpoint_round_trip_and_corruption(tmp_path):
    items = generate_synthetic(0, 4, size=(32, 32))
    spec = ModelSpec("decoder", encoder_widths=(8, 8, 16, 16), decoder_widths=(16, 8, 8, 8), backbone_kernel=3)
    model = build_model(spec, seed=3)
    _, log = train(model, items, TrainConfig(lr=0.01, steps_phase2=3, batch_size=2))
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, log.state, path)
    loaded, state = load_checkpoint(path)
    exact = sorted(loaded.params) == sorted(model.params) and all(
        np.array_equal(loaded.params[n].data, model.params[n].data) and loaded.params[n].dtype == model.params[n].dtype
        for n in model.params
    )
    exact = exact and state.step == log.state.step and all(
        np.array_equal(state.velocity[n], log.state.velocity[n]) for n in log.state.velocity
    )
    exact = exact and np.array_equal(
        evaluate(loaded, items, TABLE).cm.counts, evaluate(model, items, TABLE).cm.counts
    )

    raw = bytearray(path.read_bytes())
    detected = 0
    positions = np.random.default_rng(8).choice(len(raw), size=16, replace=False)
    for pos in positions:
        bad = bytearray(raw)
        bad[pos] ^= 0x40
        (tmp_path / "bad.ckpt").write_bytes(bytes(bad))
        try:
            load_checkpoint(tmp_path / "bad.ckpt")
        except CheckpointError:
            detected += 1
    ok = exact and detected == len(positions)
    assert verdict(8, ok, f"round trip exact: {exact}; corrupted bytes detected {detected} of {len(positions)}")


# ---------------------------------------------------------------------------
# 5 and 7. the synthetic benchmark


VARIANTS_5 = ["baseline", "embed", "decoder", "stacked"]


@pytest.fixture(scope="module")
def benchmark_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("bench")
    t = time.time()
    rc = main(
        ["compare", "--config", str(BENCHMARK_CFG), "--variants", *VARIANTS_5, "--seeds", "0", "1", "2",
         "--out-csv", str(out / "a.csv"), "--runs-csv", str(out / "runs.csv")]
    )
    assert rc == 0
    return out, time.time() - t


@pytest.mark.slow
def test_5_directional_benefit(benchmark_run):
    out, elapsed = benchmark_run
    print((out / "runs.csv").read_text())
    print((out / "a.csv").read_text())
    s = read_summary_csv((out / "a.csv").read_text())
    dyn = {v: 100 * s[v]["dynamic_mean"] for v in VARIANTS_5}
    sta = {v: 100 * s[v]["static_mean"] for v in VARIANTS_5}
    checks = {
        "decoder dynamic >= baseline + 2": dyn["decoder"] >= dyn["baseline"] + 2.0,
        "embed dynamic >= baseline": dyn["embed"] >= dyn["baseline"],
        "prior models static >= baseline - 0.5": all(sta[v] >= sta["baseline"] - 0.5 for v in ("embed", "decoder", "stacked")),
        "under one hour": elapsed < 3600,
    }
    detail = (
        "; ".join(f"{v} dynamic {dyn[v]:.2f} static {sta[v]:.2f}" for v in VARIANTS_5)
        + f"; {elapsed:.0f} s; "
        + ", ".join(f"{k}: {ok}" for k, ok in checks.items())
    )
    assert verdict(5, all(checks.values()), detail)


@pytest.mark.slow
def test_7_compare_is_byte_identical(benchmark_run):
    out, _ = benchmark_run
    rc = main(
        ["compare", "--config", str(BENCHMARK_CFG), "--variants", *VARIANTS_5, "--seeds", "0", "1", "2",
         "--out-csv", str(out / "b.csv"), "--runs-csv", str(out / "runs_b.csv")]
    )
    same = (out / "a.csv").read_bytes() == (out / "b.csv").read_bytes()
    same_runs = (out / "runs.csv").read_bytes() == (out / "runs_b.csv").read_bytes()
    assert verdict(7, rc == 0 and same and same_runs, f"summary identical: {same}; per-run identical: {same_runs}")
