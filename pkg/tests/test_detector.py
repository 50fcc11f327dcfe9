import dataclasses
import math

import numpy as np
import pytest

from dualassign import autodiff as ad
from dualassign.assignment import AnchorConfig, FcosAssignerConfig
from dualassign.autodiff import Tensor
from dualassign.detector import (
    AdamW,
    ConfigError,
    ModelConfig,
    StepConfig,
    adamw_step,
    build_model,
    compute_losses,
    count_parameters_closed_form,
    load_checkpoint,
    save_checkpoint,
    strip_branch,
    training_step,
)
from dualassign.losses import LossWeights
from dualassign.scenegen import SceneConfig, build_dataset

TINY = dict(image_size=(8, 8), stem_channels=(4,), feat_channels=6, strides=(4,), num_classes=2)
TINY_FCOS = FcosAssignerConfig(((0.0, math.inf),))


def tiny_batch():
    ds = build_dataset(range(2), SceneConfig(image_size=(8, 8), num_classes=2, objects_per_scene=(1, 2), size_range=(3, 7)))
    return ds.images(), ds.annotations


# --- construction -------------------------------------------------------------


def test_same_seed_gives_identical_parameters():
    a, b = build_model(ModelConfig(), 3), build_model(ModelConfig(), 3)
    assert all(np.array_equal(a.params[n].data, b.params[n].data) for n in a.params)
    c = build_model(ModelConfig(), 4)
    assert not np.array_equal(a.params["stem.0.w"].data, c.params["stem.0.w"].data)


def test_shared_parameters_match_across_regimes():
    dual, single = build_model(ModelConfig.for_regime("dual-f"), 0), build_model(ModelConfig.for_regime("o2o"), 0)
    for name, p in single.params.items():
        assert np.array_equal(p.data, dual.params[name].data)


def test_separate_subnets_add_parameters():
    shared = build_model(ModelConfig(share_subnets=True))
    separate = build_model(ModelConfig(share_subnets=False))
    assert separate.num_parameters() > shared.num_parameters()


@pytest.mark.parametrize("regime", ["o2o", "o2m-fcos", "o2m-retina", "dual-f", "dual-r"])
def test_parameter_count_matches_closed_form(regime):
    cfg = ModelConfig.for_regime(regime)
    assert build_model(cfg).num_parameters() == count_parameters_closed_form(cfg)


def test_default_parameter_count_by_hand():
    # 3x3 convs with bias: stem 1->16->32, levels 32->48->48, 4 subnet convs 48->48,
    # o2o heads 48->3 and 48->4, o2m heads 48->3, 48->4 and 48->1
    conv = lambda i, o: o * (9 * i + 1)  # noqa: E731
    total = conv(1, 16) + conv(16, 32) + conv(32, 48) + conv(48, 48) + 4 * conv(48, 48)
    total += conv(48, 3) + conv(48, 4) + conv(48, 3) + conv(48, 4) + conv(48, 1)
    assert build_model(ModelConfig()).num_parameters() == total


def test_classification_bias_prior():
    m = build_model(ModelConfig())
    p = 1 / (1 + np.exp(-m.params["o2o.cls.b"].data))
    assert np.allclose(p, 0.01)


@pytest.mark.parametrize(
    "kw",
    [dict(num_classes=0), dict(strides=(8, 12)), dict(image_size=(60, 64)), dict(heads=("o2m",), o2m_style=None), dict(strides=(16, 32))],
)
def test_invalid_configs(kw):
    with pytest.raises(ConfigError):
        ModelConfig(**kw)


# --- forward -------------------------------------------------------------------


def test_grid_layout_and_zero_image():
    m = build_model(ModelConfig())
    preds = m(np.zeros((2, 1, 64, 64)))
    assert preds.level_shapes == [(8, 8), (4, 4)] and preds.num_locations == 80
    assert preds.o2o.logits.shape == (2, 80, 3) and preds.o2m.centerness.shape == (2, 80)
    for t in (preds.o2o.logits, preds.o2o.ltrb, preds.o2m.logits, preds.o2m.ltrb, preds.o2m.centerness):
        assert np.all(np.isfinite(t.data))
    assert np.all(preds.o2o.ltrb.data > 0)


def test_retina_outputs_per_anchor():
    m = build_model(ModelConfig.for_regime("dual-r"))
    preds = m(np.zeros((1, 1, 64, 64)))
    assert preds.o2m.logits.shape == (1, 240, 3) and preds.o2m.centerness is None


def test_shape_error_on_wrong_input():
    with pytest.raises(ad.ShapeError):
        build_model(ModelConfig())(np.zeros((1, 1, 32, 32)))


def test_o2m_parameters_do_not_touch_o2o_outputs():
    m = build_model(ModelConfig(), 1)
    x = np.random.default_rng(0).uniform(size=(2, 1, 64, 64))
    before = m(x)
    for name in ("o2m.cls.w", "o2m.reg.w", "o2m.ctr.b"):
        m.params[name].data += 0.5
    after = m(x)
    assert np.array_equal(before.o2o.logits.data, after.o2o.logits.data)
    assert np.array_equal(before.o2o.ltrb.data, after.o2o.ltrb.data)
    assert not np.array_equal(before.o2m.logits.data, after.o2m.logits.data)


# --- strip ---------------------------------------------------------------------


def test_strip_o2o_matches_direct_model_and_outputs():
    full = build_model(ModelConfig.for_regime("dual-f"), 2)
    stripped = strip_branch(full, "o2o")
    direct = build_model(ModelConfig.for_regime("o2o"), 2)
    assert stripped.num_parameters() == direct.num_parameters()
    assert stripped.num_parameters() == full.num_parameters() - full.num_parameters("o2m.")
    x = np.random.default_rng(1).uniform(size=(1, 1, 64, 64))
    assert np.array_equal(stripped(x).o2o.logits.data, full(x).o2o.logits.data)
    assert stripped(x).o2m is None


def test_strip_o2m_keeps_fcos_head_and_handles_separate_subnets():
    full = build_model(ModelConfig(share_subnets=False), 2)
    stripped = strip_branch(full, "o2m")
    assert stripped.cfg.heads == ("o2m",)
    assert stripped.num_parameters() == build_model(ModelConfig.for_regime("o2m-fcos")).num_parameters()
    x = np.random.default_rng(1).uniform(size=(1, 1, 64, 64))
    assert np.array_equal(stripped(x).o2m.logits.data, full(x).o2m.logits.data)
    with pytest.raises(ConfigError):
        strip_branch(stripped, "o2o")


def test_o2m_surplus_is_small():
    m = build_model(ModelConfig.for_regime("dual-f"))
    assert m.num_parameters("o2m.") / m.num_parameters() < 0.03


# --- optimiser -----------------------------------------------------------------


def test_adamw_zero_grad_zero_decay_is_identity():
    p = {"w": Tensor(np.array([1.0, -2.0]), requires_grad=True)}
    p["w"].grad = np.zeros(2)
    adamw_step(AdamW(weight_decay=0.0), p)
    assert np.array_equal(p["w"].data, [1.0, -2.0])


def test_adamw_pure_shrinkage():
    p = {"w": Tensor(np.array([1.0, -2.0]), requires_grad=True)}
    p["w"].grad = np.zeros(2)
    opt = AdamW(lr=0.1, weight_decay=0.5)
    opt.step(p)
    assert np.allclose(p["w"].data, np.array([1.0, -2.0]) * (1 - 0.1 * 0.5))


def test_adamw_scalar_hand_update():
    p = {"w": Tensor(np.array(2.0), requires_grad=True)}
    p["w"].grad = np.array(0.3)
    opt = AdamW(lr=0.01, weight_decay=0.1)
    opt.step(p)
    m_hat = (0.1 * 0.3) / (1 - 0.9)
    v_hat = (0.001 * 0.09) / (1 - 0.999)
    expected = 2.0 - 0.01 * (m_hat / (math.sqrt(v_hat) + 1e-8) + 0.1 * 2.0)
    assert p["w"].data == pytest.approx(expected, rel=1e-14)
    assert opt.step_count == 1


# --- training step ------------------------------------------------------------


def test_dual_loss_gradient_is_linear_in_branches():
    cfg = ModelConfig(**TINY)
    images, gts = tiny_batch()
    step = StepConfig(LossWeights(lambda_o2o=1.5, lambda_o2m=0.7), fcos=TINY_FCOS)

    def grad_of(which):
        m = build_model(cfg, 0)
        preds = m(images)
        total, comps, _ = compute_losses(m, preds, gts, step)
        {"total": total, "o2o": comps["l_o2o"], "o2m": comps["l_o2m"]}[which].backward()
        return m.params["level.0.w"].grad.copy()

    combined = 1.5 * grad_of("o2o") + 0.7 * grad_of("o2m")
    assert np.allclose(grad_of("total"), combined, rtol=0, atol=1e-8)


@pytest.mark.parametrize("regime", ["dual-f", "dual-r"])
def test_end_to_end_gradient_check_tiny_model(regime):
    cfg = ModelConfig.for_regime(regime, anchors=AnchorConfig(base_sizes=(4.0,)), **TINY)
    images, gts = tiny_batch()
    step = StepConfig(LossWeights.for_style(cfg.o2m_style), fcos=TINY_FCOS)
    model = build_model(cfg, 0)
    assignments = compute_losses(model, model(images), gts, step)[2]
    for name in ("stem.0.w", "level.0.w", "subnet.cls.0.w", "subnet.reg.1.w", "o2o.reg.w", "o2m.cls.b", "o2m.reg.w"):
        base = model.params[name]

        def f(t, name=name, base=base):
            model.params[name] = t
            try:
                return compute_losses(model, model(images), gts, step, assignments)[0]
            finally:
                model.params[name] = base

        assert ad.grad_check(f, base.data, eps=1e-5, n_samples=16) < 1e-4, name


def test_loss_decreases_when_overfitting_ten_scenes():
    ds = build_dataset(range(10), SceneConfig())
    model = build_model(ModelConfig(), 0)
    opt = AdamW(lr=2e-3)
    step = StepConfig(LossWeights())
    losses = []
    images = ds.images()
    for it in range(200):
        idx = [(2 * it) % 10, (2 * it + 1) % 10]
        losses.append(training_step(model, opt, images[idx], [ds.annotations[i] for i in idx], step).l_DA)
    assert np.median(losses[-40:]) < 0.7 * np.median(losses[:40])


def test_lambda_zero_matches_o2o_only_step():
    images, gts = build_dataset(range(4), SceneConfig()).images(), build_dataset(range(4), SceneConfig()).annotations
    dual = build_model(ModelConfig.for_regime("dual-f"), 5)
    single = build_model(ModelConfig.for_regime("o2o"), 5)
    od, os_ = AdamW(), AdamW()
    for _ in range(3):
        rd = training_step(dual, od, images, gts, StepConfig(LossWeights(lambda_o2m=0.0)))
        rs = training_step(single, os_, images, gts, StepConfig(LossWeights()))
        assert rd.l_o2o == rs.l_o2o and rd.l_DA == rs.l_DA
    for name, p in single.params.items():
        assert np.array_equal(p.data, dual.params[name].data), name


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    m = build_model(ModelConfig.for_regime("dual-r"), 9)
    save_checkpoint(m, tmp_path / "m.npz", {"note": 1})
    loaded, extra = load_checkpoint(tmp_path / "m.npz")
    assert extra == {"note": 1} and loaded.cfg == m.cfg
    assert all(np.array_equal(loaded.params[n].data, p.data) for n, p in m.params.items())


def test_checkpoint_with_wrong_parameters_is_rejected(tmp_path):
    m = build_model(ModelConfig.for_regime("o2o"), 0)
    broken = dataclasses.replace(m.cfg, heads=("o2o", "o2m"), o2m_style="fcos")
    m.cfg = broken
    save_checkpoint(m, tmp_path / "bad.npz")
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / "bad.npz")
