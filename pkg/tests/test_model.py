import numpy as np
import pytest

from collidernet import autodiff as ad
from collidernet import model as mdl
from collidernet.model import CausalNet, NetConfig


def test_flatten_arithmetic_default():
    cfg = NetConfig()
    assert cfg.spatial_chain() == [51, 25, 12, 6, 3]
    assert cfg.flatten_dim == 144


def test_small_input_sizes():
    assert NetConfig(input_size=24).flatten_dim == 16
    with pytest.raises(ValueError):
        NetConfig(input_size=16)
    with pytest.raises(ValueError):
        NetConfig(mode="causal", head_width=1)


def _batch(m, size=51, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(m, size, size)).astype(np.float32), (rng.random(m) < 0.5).astype(float)


def test_forward_shapes():
    net = CausalNet(NetConfig(), seed=1)
    imgs, t = _batch(40)
    out = net.forward(imgs, t)
    assert out.activations.shape == (40, 6)
    assert out.y_hat.shape == (40,)
    with pytest.raises(ad.ShapeError):
        net.forward(np.zeros((2, 50, 50)), [0, 1])


def test_head_is_affine():
    net = CausalNet(NetConfig(), seed=2)
    imgs, t = _batch(10, seed=3)
    out = net.forward(imgs, t)
    b = out.head_coeffs
    expected = b[0] + b[1] * t + out.activations.data @ b[2:]
    np.testing.assert_allclose(out.y_hat.data, expected, rtol=1e-5, atol=1e-5)


def test_zero_head_predicts_intercept():
    net = CausalNet(NetConfig(), seed=2)
    net.params["head.w"].data[:] = 0
    net.params["head.b"].data[:] = 0.7
    imgs, t = _batch(5)
    np.testing.assert_allclose(net.forward(imgs, t).y_hat.data, 0.7, rtol=1e-6)


def test_treatment_coefficient_shift():
    net = CausalNet(NetConfig(), seed=2)
    imgs, t = _batch(12, seed=4)
    before = net.forward(imgs, t).y_hat.data.copy()
    bt = net.params["head.w"].data[-1, 0]
    net.params["head.w"].data[-1, 0] = 2 * bt
    after = net.forward(imgs, t).y_hat.data
    np.testing.assert_allclose(after - before, bt * t, rtol=1e-4, atol=1e-5)


def test_eval_mode_is_deterministic():
    net = CausalNet(NetConfig(), seed=5)
    imgs, _ = _batch(1, seed=6)
    pair = np.concatenate([imgs, imgs])
    acts = net.forward(pair, [1, 1]).activations.data
    np.testing.assert_array_equal(acts[0], acts[1])


def _fake_out(acts, yhat=None):
    acts = np.asarray(acts, dtype=np.float64)
    yhat = np.zeros(acts.shape[0]) if yhat is None else yhat
    return mdl.ForwardOutput(ad.Tensor(yhat), ad.Tensor(acts), np.zeros(acts.shape[1] + 2))


def test_regression_loss_cases():
    rng = np.random.default_rng(7)
    x = rng.normal(size=40)
    const = np.column_stack([x, np.ones((40, 5)) * rng.normal(size=5)])
    lb = mdl.loss_total(_fake_out(const), np.zeros(40), x, "causal")
    assert lb.l_reg == pytest.approx(0.0, abs=1e-12)
    assert lb.l_x == pytest.approx(0.0, abs=1e-12)
    leak = np.column_stack([np.zeros(40), x, rng.normal(size=(40, 4))])
    lb = mdl.loss_total(_fake_out(leak), np.zeros(40), x, "causal")
    assert lb.l_reg == pytest.approx(np.var(x), rel=1e-8)


def test_regression_loss_overfit_level_for_independent_noise():
    # Under independence R^2 ~ Beta(p/2, (m-p-1)/2) independent of the sample
    # variance, so E[l_reg] = (p/m) * Var(x) = 5/40 for unit-variance x.
    rng = np.random.default_rng(8)
    vals = []
    for _ in range(4000):
        x = rng.normal(size=40)
        acts = np.column_stack([x, rng.normal(size=(40, 5))])
        vals.append(float(mdl.regression_loss(ad.Tensor(acts), x).data))
    vals = np.array(vals)
    assert vals.min() >= 0
    assert vals.mean() == pytest.approx(5 / 40, abs=4 * vals.std() / np.sqrt(vals.size))


def test_loss_breakdown_sums_and_modes():
    net = CausalNet(NetConfig(), seed=9)
    imgs, t = _batch(16, seed=10)
    rng = np.random.default_rng(11)
    y, x = rng.normal(size=16), rng.normal(size=16)
    out = net.forward(imgs, t, training=True, rng=rng)
    lb = mdl.loss_total(out, y, x, "causal")
    assert lb.total == lb.l_y + lb.l_x + lb.l_reg
    assert min(lb.l_y, lb.l_x, lb.l_reg) >= 0
    assert float(lb.tensor.data) == pytest.approx(lb.total, rel=1e-5)
    lb_b = mdl.loss_total(out, y, x, "biased")
    assert lb_b.l_x == 0 and lb_b.l_reg == 0 and lb_b.total == lb_b.l_y == pytest.approx(lb.l_y)
    with pytest.raises(mdl.BatchSizeError):
        mdl.loss_total(net.forward(imgs[:7], t[:7]), y[:7], x[:7], "causal")
    mdl.loss_total(net.forward(imgs[:2], t[:2]), y[:2], x[:2], "biased")


def test_gradients_reach_every_parameter_in_causal_mode():
    net = CausalNet(NetConfig(), seed=12)
    imgs, t = _batch(8, seed=13)
    rng = np.random.default_rng(14)
    out = net.forward(imgs, t, training=True, rng=rng)
    mdl.loss_total(out, rng.normal(size=8), rng.normal(size=8), "causal").tensor.backward()
    for name, p in net.params.items():
        assert p.grad is not None and p.grad.shape == p.shape, name


def test_frozen_mask_replays_forward():
    net = CausalNet(NetConfig(), seed=15)
    imgs, t = _batch(4, seed=16)
    a = net.forward(imgs, t, training=True, rng=np.random.default_rng(0))
    b = net.forward(imgs, t, training=True, masks=a.masks)
    np.testing.assert_array_equal(a.y_hat.data, b.y_hat.data)
    assert len(a.masks) == 3


def test_checkpoint_roundtrip(tmp_path):
    net = CausalNet(NetConfig(mode="biased"), seed=17)
    net.save(tmp_path, "m")
    back = CausalNet.load(tmp_path, "m")
    assert back.config == net.config
    imgs, t = _batch(3)
    np.testing.assert_array_equal(back.forward(imgs, t).y_hat.data, net.forward(imgs, t).y_hat.data)


def test_same_init_seed_same_weights_across_modes():
    a = CausalNet(NetConfig(mode="causal"), seed=3)
    b = CausalNet(NetConfig(mode="biased"), seed=3)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].data, b.params[k].data)
