import numpy as np
import pytest

from conftest import random_pair, tiny_spec
from pfseg.dataset import LabeledFramePair, default_class_table, generate_synthetic
from pfseg.models import IDENTITY_GAIN, FusionModuleParams, build_model, forward, fusion_forward, init_fusion_identity
from pfseg.tensor import Tensor
from pfseg.train import (
    NumericalError,
    TrainConfig,
    clip_grad_norm,
    evaluate,
    finetune_from,
    loss_and_grads,
    predict,
    train,
)

TABLE = default_class_table()


def _cfg(**kw):
    base = dict(lr=0.02, steps_phase1=2, steps_phase2=2, batch_size=2, crop_h=24, crop_w=24, pad_h=32, pad_w=32, clip_norm=5)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def data():
    return generate_synthetic(0, 4, size=(32, 32))


def _snapshot(model):
    return {n: t.data.copy() for n, t in model.params.items()}


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(pad_h=200)
    with pytest.raises(ValueError):
        TrainConfig(lr=-1)


def test_zero_steps_leave_model_unchanged(data):
    m = build_model(tiny_spec("decoder"))
    before = _snapshot(m)
    _, log = train(m, data, _cfg(steps_phase1=0, steps_phase2=0))
    assert log.rows == []
    for n, t in m.params.items():
        assert np.array_equal(t.data, before[n])


def test_training_is_deterministic(data):
    runs = []
    for _ in range(2):
        m = build_model(tiny_spec("embed"), seed=1)
        _, log = train(m, data, _cfg(seed=9))
        runs.append((log.losses, _snapshot(m)))
    assert runs[0][0] == runs[1][0]
    for n in runs[0][1]:
        assert np.array_equal(runs[0][1][n], runs[1][1][n])


def test_log_rows_and_csv(data):
    m = build_model(tiny_spec("baseline"))
    _, log = train(m, data, _cfg(phase2_lr_scale=0.5))
    assert [r[1] for r in log.rows] == ["crop", "crop", "full", "full"]
    assert [r[0] for r in log.rows] == [0, 1, 2, 3]
    assert log.rows[2][3] == pytest.approx(0.01)
    lines = log.to_csv().splitlines()
    assert lines[0] == "step,phase,loss,lr" and len(lines) == 5


def test_resume_equals_uninterrupted(data):
    a = build_model(tiny_spec("baseline"), seed=2)
    _, la = train(a, data, _cfg(steps_phase1=0, steps_phase2=4, seed=3))
    b = build_model(tiny_spec("baseline"), seed=2)
    _, lb1 = train(b, data, _cfg(steps_phase1=0, steps_phase2=2, seed=3))
    _, lb2 = train(b, data, _cfg(steps_phase1=0, steps_phase2=2, seed=3), lb1.state)
    assert la.losses == lb1.losses + lb2.losses
    assert [r[0] for r in lb2.rows] == [2, 3]


def test_nan_loss_raises(data):
    m = build_model(tiny_spec("baseline"))
    m.params["classifier.bias"].data[0] = np.nan
    with pytest.raises(NumericalError):
        train(m, data, _cfg())


def test_void_pixels_contribute_no_gradient(rng):
    m = build_model(tiny_spec("baseline"), dtype=np.float64)
    pair = random_pair(rng, 16, 16)
    void = LabeledFramePair(pair.prior, pair.current, np.full((16, 16), 255, np.uint8), {})
    _, g_one = loss_and_grads(m, [pair])
    _, g_two = loss_and_grads(m, [pair, void])
    # an all-void item adds no gradient; the loss mean runs over valid pixels only
    for n in g_one:
        np.testing.assert_allclose(g_one[n], g_two[n], rtol=1e-10, atol=1e-14)


def test_clip_grad_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_grad_norm(g, 1.0) == 5.0
    assert np.sqrt(g["a"] ** 2 + g["b"] ** 2)[0] == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# fine-tuning


def test_baseline_to_embed_name_accounting():
    src = build_model(tiny_spec("baseline"), seed=5)
    m, copied, fresh = finetune_from(src, tiny_spec("embed"), seed=6)
    assert sorted(copied) == sorted(src.params)
    assert sorted(fresh) == ["fusion0.w_image", "fusion0.w_out", "fusion0.w_prior"]
    for n in copied:
        assert np.array_equal(m.params[n].data, src.params[n].data)


def test_baseline_to_stacked_zero_init_identity(rng):
    src = build_model(tiny_spec("baseline"), seed=5)
    m, copied, fresh = finetune_from(src, tiny_spec("stacked"), seed=6)
    assert "enc1.weight" in copied and fresh == []
    x0 = Tensor(rng.random((2, 3, 32, 32), dtype=np.float32))
    x1 = Tensor(rng.random((2, 3, 32, 32), dtype=np.float32))
    assert np.array_equal(forward(m, x0, x1).data, forward(src, None, x1).data)


def test_baseline_round_trip_bitwise():
    src = build_model(tiny_spec("baseline"), seed=5)
    m, copied, fresh = finetune_from(src, tiny_spec("baseline"), seed=99)
    assert fresh == []
    for n in src.params:
        assert np.array_equal(m.params[n].data, src.params[n].data)


def test_finetune_shape_conflict():
    src = build_model(tiny_spec("baseline"), seed=5)
    with pytest.raises(ValueError, match="shape conflict"):
        finetune_from(src, tiny_spec("baseline", decoder_widths=(8, 4, 4, 8)))


# ---------------------------------------------------------------------------
# evaluation


def _constant_model(cls):
    m = build_model(tiny_spec("baseline"))
    m.params["classifier.weight"].data[...] = 0
    m.params["classifier.bias"].data[...] = 0
    m.params["classifier.bias"].data[cls] = 1
    return m


def test_constant_bias_model(data):
    sky = TABLE.index("sky")
    rep = evaluate(_constant_model(sky), data, TABLE)
    labels = np.concatenate([it.labels.reshape(-1) for it in data])
    assert rep.global_accuracy == pytest.approx(np.mean(labels == sky), abs=1e-15)
    for pred in predict(_constant_model(sky), data):
        assert np.all(pred == sky)


def test_evaluate_order_invariant(data):
    m = build_model(tiny_spec("decoder"), seed=3)
    a = evaluate(m, data, TABLE, batch_size=3)
    b = evaluate(m, data[::-1], TABLE, batch_size=2)
    assert np.array_equal(a.cm.counts, b.cm.counts)


def test_predict_handles_odd_sizes(rng):
    m = build_model(tiny_spec("baseline"))
    pair = random_pair(rng, 20, 27)
    (pred,) = predict(m, [pair])
    assert pred.shape == (20, 27)


def test_class_count_mismatch(data):
    m = build_model(tiny_spec("baseline", num_classes=5))
    with pytest.raises(ValueError, match="class"):
        evaluate(m, data, TABLE)


def test_identity_fusion_init_is_scaled_tanh(rng):
    src = build_model(tiny_spec("baseline"), seed=5, dtype=np.float64)
    m, _, fresh = finetune_from(src, tiny_spec("decoder"), seed=6, fusion_init="identity")
    assert fresh and all(not m.params[n].data.any() for n in fresh if n.endswith("w_prior"))
    g = IDENTITY_GAIN
    for site in ("fusion0", "fusion3"):
        c = m.params[f"{site}.w_image"].shape[1]
        e = Tensor(rng.standard_normal((2, c, 8, 8)) * 3)
        p = Tensor(rng.standard_normal((2, c, 8, 8)))
        out = fusion_forward(FusionModuleParams.from_model(m, site), p, e).data
        np.testing.assert_allclose(out, np.tanh(g * e.data) / g, rtol=1e-12, atol=1e-12)


def test_identity_fusion_init_small_gain_approaches_baseline(rng):
    src = build_model(tiny_spec("baseline"), seed=5, dtype=np.float64)
    x1 = Tensor(rng.random((2, 3, 32, 32)))
    ref = forward(src, None, x1).data
    for variant in ("embed", "decoder"):
        m, _, fresh = finetune_from(src, tiny_spec(variant), seed=6)
        for site in sorted({n.split(".")[0] for n in fresh}):
            init_fusion_identity(m, site, gain=1e-3)
        out = forward(m, Tensor(rng.random((2, 3, 32, 32))), x1).data
        # tanh(g e) / g = e (1 - (g e)^2 / 3 + ...)
        np.testing.assert_allclose(out, ref, rtol=0, atol=1e-5 * np.abs(ref).max())


def test_unknown_fusion_init():
    src = build_model(tiny_spec("baseline"))
    with pytest.raises(ValueError, match="fusion_init"):
        finetune_from(src, tiny_spec("embed"), fusion_init="ones")
