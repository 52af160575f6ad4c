import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dixongan import autodiff as ad
from dixongan.errors import ConfigError, ShapeError
from dixongan.model import (DiscriminatorConfig, GeneratorConfig, InputMode, LossMode,
                            adversarial_losses, build_discriminator, build_generator,
                            check_modes, combine, configs_from_dict, dixon_loss,
                            discriminator_output_dims, generator_objective, l1_loss,
                            model_config_dict, receptive_field, receptive_window)
from oracles import numeric_grad, rel_err


def T(a, grad=False):
    return ad.Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# -- generator --------------------------------------------------------------------

def test_generator_shape_32_levels5():
    g = build_generator(GeneratorConfig(InputMode.DUAL_IP_OP, 5, (4, 4, 4, 4, 4), crop_size=32))
    out = g.predict(np.random.default_rng(0).random((1, 2, 32, 32, 32)))
    assert out.shape == (1, 2, 32, 32, 32)
    assert out.min() > 0 and out.max() < 1


def test_generator_shape_128_levels6_single():
    g = build_generator(GeneratorConfig(InputMode.SINGLE_IP, 6, (2,) * 6, crop_size=128))
    out = g.predict(np.zeros((1, 1, 128, 128, 128), np.float32))
    assert out.shape == (1, 2, 128, 128, 128)


def test_generator_rejects_indivisible_crop():
    with pytest.raises(ConfigError):
        build_generator(GeneratorConfig(levels=5, filter_schedule=(4,) * 5, crop_size=48))
    with pytest.raises(ConfigError):
        GeneratorConfig(levels=3, filter_schedule=(4, 4)).validate()
    with pytest.raises(ConfigError):
        GeneratorConfig(levels=1, filter_schedule=(4,), crop_size=8, norm="group").validate()


def test_generator_rejects_wrong_channels():
    g = build_generator(GeneratorConfig(InputMode.SINGLE_IP, 2, (2, 2), crop_size=8))
    with pytest.raises(ShapeError):
        g(np.zeros((1, 2, 8, 8, 8)))


@settings(max_examples=6, deadline=None)
@given(st.sampled_from([16, 32, 64]), st.integers(1, 4), st.sampled_from(list(InputMode)))
def test_generator_shape_identity(crop, levels, mode):
    g = build_generator(GeneratorConfig(mode, levels, (2,) * levels, crop_size=crop))
    out = g.predict(np.zeros((1, mode.channels, crop, crop, crop)))
    assert out.shape == (1, 2, crop, crop, crop)


def test_generator_skip_connections_concatenate():
    g = build_generator(GeneratorConfig(levels=3, filter_schedule=(4, 8, 16), crop_size=8))
    # innermost decoder sees only the bottleneck; the others see 2x channels
    assert g.params["G.up2.w"].shape == (16, 8, 4, 4, 4)
    assert g.params["G.up1.w"].shape == (16, 4, 4, 4, 4)
    assert g.params["G.out.w"].shape == (8, 2, 4, 4, 4)
    assert "G.down0.norm.gamma" not in g.params and "G.down1.norm.gamma" in g.params


def test_generator_seeded_init():
    cfg = GeneratorConfig(levels=2, filter_schedule=(2, 4), crop_size=8)
    a, b = build_generator(cfg, 3), build_generator(cfg, 3)
    for k in a.params:
        assert a.params[k].values.tobytes() == b.params[k].values.tobytes()
    w = build_generator(GeneratorConfig(levels=2, filter_schedule=(64, 64), crop_size=8)).params
    assert abs(np.std(w["G.down1.w"].values) - 0.02) < 0.002
    assert np.all(w["G.down1.b"].values == 0)


# -- discriminator ----------------------------------------------------------------------

def test_default_receptive_field_is_16():
    cfg = DiscriminatorConfig()
    cfg.validate()
    assert receptive_field(cfg.strides) == 16
    assert cfg.in_channels == 4


@pytest.mark.parametrize("strides,rf", [((2, 1, 1), 16), ((2, 1, 1, 1), 22),
                                        ((2, 2, 1, 1), 34), ((1,), 4)])
def test_receptive_field_recurrence(strides, rf):
    r, jump = 1, 1
    for s in strides:
        r, jump = r + 3 * jump, jump * s
    assert receptive_field(strides) == r == rf


def test_rf_mismatch_is_config_error():
    with pytest.raises(ConfigError):
        DiscriminatorConfig(strides=(2, 2, 1, 1), filter_schedule=(4, 4, 4)).validate()


def test_logit_map_size_formula():
    # four stride plan [2, 1, 1, 1] on 32^3
    assert discriminator_output_dims((32,) * 3, (2, 1, 1, 1)) == (13, 13, 13)
    d = build_discriminator(DiscriminatorConfig())
    out = d(np.zeros((1, 4, 32, 32, 32), np.float32))
    assert out.shape == (1, 1) + discriminator_output_dims((32,) * 3, (2, 1, 1))


def test_receptive_window_width():
    for i in range(5):
        lo, hi = receptive_window(i, (2, 1, 1))
        assert hi - lo == 16 and lo == 2 * i - 5


def test_receptive_field_by_perturbation():
    """Only logits whose window covers a perturbed voxel change."""
    cfg = DiscriminatorConfig(filter_schedule=(3, 3), norm="none")
    d = build_discriminator(cfg, seed=1, dtype=np.float64)
    rng = np.random.default_rng(2)
    x = rng.random((1, 4, 20, 20, 20))
    base = d(x).values[0, 0]
    for v in [(10, 10, 10), (0, 5, 19), (7, 13, 2)]:
        y = x.copy()
        y[(0, 1) + v] += 1.0
        changed = d(y).values[0, 0] != base
        expect = np.zeros_like(changed)
        for idx in itertools.product(*(range(n) for n in base.shape)):
            expect[idx] = all(lo <= vi < hi for vi, (lo, hi) in
                              zip(v, (receptive_window(i, cfg.strides) for i in idx)))
        np.testing.assert_array_equal(changed, expect)


def test_unconditioned_discriminator():
    cfg = DiscriminatorConfig(conditioned=False)
    d = build_discriminator(cfg)
    assert cfg.in_channels == 2
    out = d.judge(np.zeros((1, 2, 16, 16, 16)), ad.Tensor(np.zeros((1, 2, 16, 16, 16))))
    assert out.shape[1] == 1


# -- adversarial losses ---------------------------------------------------------------------

def test_perfect_discriminator():
    adv_d, _ = adversarial_losses(T(np.full((1, 1, 3, 3, 3), 50.0)),
                                  T(np.full((1, 1, 3, 3, 3), -50.0)))
    assert adv_d.item() < 1e-20


def test_zero_logits_ln2():
    z = T(np.zeros((2, 1, 3, 3, 3)))
    adv_d, adv_g = adversarial_losses(z, z)
    assert adv_d.item() == pytest.approx(2 * math.log(2), rel=1e-15)
    assert adv_g.item() == pytest.approx(math.log(2), rel=1e-15)


def test_adv_g_monotone():
    real = T(np.zeros((1, 1, 2, 2, 2)))
    vals = [adversarial_losses(real, T(np.full((1, 1, 2, 2, 2), x)))[1].item()
            for x in np.linspace(-20, 20, 41)]
    assert all(b < a for a, b in zip(vals, vals[1:]))


def test_adversarial_shape_mismatch():
    with pytest.raises(ShapeError):
        adversarial_losses(T(np.zeros((1, 1, 2, 2, 2))), T(np.zeros((1, 1, 3, 3, 3))))


# -- reconstruction losses ----------------------------------------------------------------

def test_l1_examples():
    rng = np.random.default_rng(3)
    f, w = rng.random((2, 1, 4, 4, 4)), rng.random((2, 1, 4, 4, 4))
    assert l1_loss(T(f), T(w), f, w).item() == 0.0
    assert l1_loss(T(f + 0.5), T(w + 0.5), f, w).item() == pytest.approx(0.5, abs=1e-15)


def test_l1_against_direct_sum():
    rng = np.random.default_rng(4)
    a = [rng.random((2, 1, 3, 4, 5)) for _ in range(4)]
    total = 0.0
    for x, y in ((a[0], a[2]), (a[1], a[3])):
        for p, q in zip(x.ravel(), y.ravel()):
            total += abs(p - q)
    want = total / (2 * a[0].size)
    assert l1_loss(T(a[0]), T(a[1]), a[2], a[3]).item() == pytest.approx(want, rel=1e-12)


def test_l1_shape_mismatch():
    with pytest.raises(ShapeError):
        l1_loss(T(np.zeros((1, 1, 2, 2, 2))), T(np.zeros((1, 1, 2, 2, 2))),
                np.zeros((1, 1, 2, 2, 3)), np.zeros((1, 1, 2, 2, 2)))


def test_dixon_zero_on_consistent_data():
    rng = np.random.default_rng(5)
    f, w = rng.random((2, 1, 4, 4, 4)), rng.random((2, 1, 4, 4, 4))
    ip, op = w + f, np.abs(w - f)
    assert dixon_loss(T(f), T(w), ip, op).item() == 0.0
    assert dixon_loss(T(w), T(f), ip, op).item() == 0.0
    assert dixon_loss(T(f), T(w), ip, op, norm="ms").item() == 0.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_dixon_swap_invariance(seed):
    rng = np.random.default_rng(seed)
    f, w, ip, op = (rng.random((1, 1, 3, 3, 3)) for _ in range(4))
    a = dixon_loss(T(f), T(w), ip, op).item()
    b = dixon_loss(T(w), T(f), ip, op).item()
    assert a == b and a >= 0


def test_dixon_against_direct_sum():
    rng = np.random.default_rng(6)
    f, w, ip, op = (rng.random((2, 1, 3, 4, 5)) for _ in range(4))
    n = f.size
    s_ip = sum((i - (ww + ff)) ** 2 for i, ww, ff in zip(ip.ravel(), w.ravel(), f.ravel()))
    s_op = sum((o - abs(ww - ff)) ** 2 for o, ww, ff in zip(op.ravel(), w.ravel(), f.ravel()))
    want = math.sqrt(s_ip / n) + math.sqrt(s_op / n)
    assert dixon_loss(T(f), T(w), ip, op).item() == pytest.approx(want, rel=1e-10)
    assert dixon_loss(T(f), T(w), ip, op, "ms").item() == pytest.approx((s_ip + s_op) / n,
                                                                        rel=1e-10)
    with pytest.raises(ValueError):
        dixon_loss(T(f), T(w), ip, op, "l3")


def test_dixon_gradients():
    rng = np.random.default_rng(7)
    f, w = T(rng.random((1, 1, 3, 3, 3)), True), T(rng.random((1, 1, 3, 3, 3)), True)
    ip, op = rng.random((1, 1, 3, 3, 3)), rng.random((1, 1, 3, 3, 3))
    for norm in ("rms", "ms"):
        f.grad = w.grad = None
        dixon_loss(f, w, ip, op, norm).backward()
        for t in (f, w):
            num = numeric_grad(lambda: dixon_loss(f, w, ip, op, norm).item(), t.values)
            assert rel_err(t.grad, num) < 1e-4


def test_dixon_subgradient_zero_on_equal_channels():
    # W == F and a perfect fit: |W - F| and sqrt are both at their kinks
    f = T(np.full((1, 1, 2, 2, 2), 0.3), True)
    w = T(np.full((1, 1, 2, 2, 2), 0.3), True)
    dixon_loss(f, w, np.full((1, 1, 2, 2, 2), 0.6), np.zeros((1, 1, 2, 2, 2))).backward()
    assert np.all(f.grad == 0) and np.all(w.grad == 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_losses_non_negative(seed):
    rng = np.random.default_rng(seed)
    a = [rng.random((1, 1, 2, 2, 2)) for _ in range(4)]
    assert l1_loss(T(a[0]), T(a[1]), a[2], a[3]).item() >= 0
    assert dixon_loss(T(a[0]), T(a[1]), a[2], a[3]).item() >= 0


# -- generator objective ------------------------------------------------------------------------

def test_objective_lambda_zero():
    rng = np.random.default_rng(8)
    logits = T(rng.normal(size=(1, 1, 2, 2, 2)))
    pred = T(rng.random((1, 2, 4, 4, 4)))
    total, adv_g, _ = generator_objective(logits, pred, LossMode.L1, 0.0,
                                          labels=rng.random((1, 2, 4, 4, 4)))
    assert total.item() == adv_g.item()


def test_objective_arithmetic():
    assert combine(0.7, 0.01, 100) == pytest.approx(1.7, abs=1e-15)
    rng = np.random.default_rng(9)
    logits = T(rng.normal(size=(1, 1, 2, 2, 2)))
    pred = T(rng.random((1, 2, 4, 4, 4)))
    total, adv_g, recon = generator_objective(logits, pred, LossMode.L1,
                                              labels=rng.random((1, 2, 4, 4, 4)))
    assert total.item() == pytest.approx(adv_g.item() + 100 * recon.item(), rel=1e-14)


def test_single_ip_dixon_rejected():
    with pytest.raises(ConfigError):
        check_modes(InputMode.SINGLE_IP, LossMode.DIXON)
    z = T(np.zeros((1, 2, 4, 4, 4)))
    with pytest.raises(ConfigError):
        generator_objective(T(np.zeros((1, 1, 2, 2, 2))), z, LossMode.DIXON,
                            ip=np.zeros((1, 1, 4, 4, 4)), op=np.zeros((1, 1, 4, 4, 4)),
                            input_mode=InputMode.SINGLE_IP)


def test_dixon_objective_refuses_labels():
    z = T(np.zeros((1, 2, 4, 4, 4)))
    logits = T(np.zeros((1, 1, 2, 2, 2)))
    with pytest.raises(ConfigError):
        generator_objective(logits, z, LossMode.DIXON, labels=np.zeros((1, 2, 4, 4, 4)),
                            ip=np.zeros((1, 1, 4, 4, 4)), op=np.zeros((1, 1, 4, 4, 4)))
    with pytest.raises(ConfigError):
        generator_objective(logits, z, LossMode.L1)


@pytest.mark.parametrize("mode", list(LossMode))
def test_end_to_end_generator_gradients(mode):
    """Finite differences of total_g w.r.t. a sample of generator weights
    through generator and discriminator."""
    rng = np.random.default_rng(10)
    g = build_generator(GeneratorConfig(InputMode.DUAL_IP_OP, 2, (3, 4), crop_size=8),
                        seed=1, dtype=np.float64)
    d = build_discriminator(DiscriminatorConfig(filter_schedule=(2, 3)), seed=2,
                            dtype=np.float64)
    d.set_trainable(False)
    x = rng.random((2, 2, 8, 8, 8))
    labels = rng.random((2, 2, 8, 8, 8))

    def total():
        pred = g(x)
        logits = d.judge(ad.Tensor(x), pred)
        kw = ({"labels": labels} if mode is LossMode.L1
              else {"ip": x[:, :1], "op": x[:, 1:]})
        return generator_objective(logits, pred, mode, **kw)[0]

    g.zero_grad()
    total().backward()
    for name in ("G.down0.w", "G.up1.norm.gamma", "G.up1.w", "G.out.b"):
        p = g.params[name]
        flat = p.values.reshape(-1)
        idx = rng.choice(flat.size, size=min(6, flat.size), replace=False)
        for i in idx:
            old = flat[i]
            h = 1e-6
            flat[i] = old + h
            fp = total().item()
            flat[i] = old - h
            fm = total().item()
            flat[i] = old
            num = (fp - fm) / (2 * h)
            ana = p.grad.reshape(-1)[i]
            assert abs(ana - num) <= 1e-4 * max(abs(num), 1e-3), (name, i, ana, num)


def test_config_dict_roundtrip():
    gcfg = GeneratorConfig(InputMode.SINGLE_IP, 3, (4, 8, 8), crop_size=16)
    dcfg = DiscriminatorConfig(filter_schedule=(4, 8), conditioned=False,
                               input_mode=InputMode.SINGLE_IP)
    g2, d2 = configs_from_dict(model_config_dict(gcfg, dcfg, step=4))
    assert g2 == gcfg and d2 == dcfg


def test_load_arrays_validates():
    g = build_generator(GeneratorConfig(levels=2, filter_schedule=(2, 2), crop_size=8))
    arrays = {k: v.values.copy() for k, v in g.params.items()}
    g.load_arrays(arrays)
    with pytest.raises(ConfigError):
        g.load_arrays({k: v for k, v in arrays.items() if k != "G.out.w"})
    arrays["G.out.b"] = np.zeros(3, np.float32)
    with pytest.raises(ShapeError):
        g.load_arrays(arrays)
