import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from collidernet import autodiff as ad
from collidernet.autodiff import Tensor


def param(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8))


def numeric_grad(f, arr, h=1e-5):
    g = np.zeros_like(arr)
    flat, gf = arr.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def test_conv_identity_kernel():
    x = np.random.default_rng(0).normal(size=(2, 1, 6, 7))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1.0
    out = ad.conv2d_3x3(Tensor(x), Tensor(k), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data, x)


def test_conv_ones_kernel_zero_padding():
    out = ad.conv2d_3x3(Tensor(np.ones((1, 1, 5, 5))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1))).data[0, 0]
    assert out[2, 2] == 9 and out[0, 0] == 4 and out[0, 2] == 6
    assert out.shape == (5, 5)


def test_conv_is_cross_correlation():
    x = np.zeros((1, 1, 3, 3))
    x[0, 0, 0, 0] = 1.0
    k = np.arange(9.0).reshape(1, 1, 3, 3)
    out = ad.conv2d_3x3(Tensor(x), Tensor(k), Tensor(np.zeros(1))).data[0, 0]
    # output (1,1) sees input (0,0) through kernel tap (0,0)
    assert out[1, 1] == k[0, 0, 0, 0]
    assert out[0, 0] == k[0, 0, 1, 1]


def test_conv_gradients_match_finite_differences():
    rng = np.random.default_rng(1)
    x, k, b = param(rng.normal(size=(1, 2, 5, 5))), param(rng.normal(size=(3, 2, 3, 3))), param(rng.normal(size=3))
    w = rng.normal(size=(1, 3, 5, 5))

    def f():
        return float(np.sum(ad.conv2d_3x3(x, k, b).data * w))

    out = ad.sum_(ad.mul(ad.conv2d_3x3(x, k, b), Tensor(w)))
    out.backward()
    for p in (x, k, b):
        assert rel_err(p.grad, numeric_grad(f, p.data)) < 1e-6


def test_conv_shape_errors():
    with pytest.raises(ad.ShapeError):
        ad.conv2d_3x3(Tensor(np.ones((1, 2, 5, 5))), Tensor(np.ones((1, 3, 3, 3))), Tensor(np.zeros(1)))
    with pytest.raises(ad.ShapeError):
        ad.conv2d_3x3(Tensor(np.ones((1, 1, 2, 5))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))


def test_maxpool_forward_backward():
    x = param(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    out = ad.maxpool2x2(x)
    assert out.data.item() == 4.0
    ad.sum_(out).backward()
    np.testing.assert_array_equal(x.grad, [[[[0, 0], [0, 1]]]])


def test_maxpool_ties_route_to_first_and_odd_sizes_floor():
    x = param(np.ones((1, 1, 5, 5)))
    out = ad.maxpool2x2(x)
    assert out.shape == (1, 1, 2, 2)
    ad.sum_(out).backward()
    expected = np.zeros((5, 5))
    expected[0:4:2, 0:4:2] = 1
    np.testing.assert_array_equal(x.grad[0, 0], expected)


def test_relu_and_maxpool_commute():
    x = np.random.default_rng(2).normal(size=(2, 3, 7, 6))
    a, b = param(x), param(x)
    pa = ad.maxpool2x2(ad.relu(a))
    pb = ad.relu(ad.maxpool2x2(b))
    np.testing.assert_array_equal(pa.data, pb.data)
    g = np.random.default_rng(3).normal(size=pa.shape)
    pa.backward(g)
    pb.backward(g)
    np.testing.assert_array_equal(a.grad, b.grad)


def test_dense_gradients():
    rng = np.random.default_rng(4)
    x, w1, b1 = param(rng.normal(size=(4, 3))), param(rng.normal(size=(3, 5))), param(rng.normal(size=5))
    w2, b2 = param(rng.normal(size=(5, 2))), param(rng.normal(size=2))

    def build():
        return ad.sum_(ad.square(ad.dense(ad.relu(ad.dense(x, w1, b1)), w2, b2)))

    report = ad.grad_check(build, [x, w1, b1, w2, b2], tolerance=1e-6, name="dense")
    assert report.passed, report


def test_linear_graph_is_exact():
    # f is linear in every single entry, so central differences carry no
    # truncation error; what remains is rounding, about eps * |f| / h.
    rng = np.random.default_rng(5)
    x, w, b = param(rng.normal(size=(6, 4))), param(rng.normal(size=(4, 3))), param(rng.normal(size=3))
    c = rng.normal(size=(6, 3))
    report = ad.grad_check(lambda: ad.sum_(ad.mul(ad.dense(x, w, b), Tensor(c))), [x, w, b], tolerance=1e-7)
    assert report.passed, report


def test_mse_values_and_gradient():
    assert ad.mse(Tensor(np.array([1.0, 2.0])), np.array([1.0, 2.0])).data == 0.0
    assert ad.mse(Tensor(np.zeros(2)), np.array([1.0, 3.0])).data == 5.0
    rng = np.random.default_rng(6)
    p = param(rng.normal(size=7))
    target = rng.normal(size=7)
    ad.mse(p, target).backward()
    np.testing.assert_allclose(p.grad, 2 * (p.data - target) / 7, rtol=1e-14)
    assert rel_err(p.grad, numeric_grad(lambda: float(ad.mse(Tensor(p.data), target).data), p.data)) < 1e-8
    with pytest.raises(ad.ShapeError):
        ad.mse(Tensor(np.zeros(3)), np.zeros(4))


def test_dropout_is_inverted_and_unbiased():
    rng = np.random.default_rng(7)
    x = Tensor(np.abs(rng.normal(size=1_000_000)) + 1.0)
    out = ad.dropout(x, 0.25, rng=np.random.default_rng(8))
    assert out.data.mean() == pytest.approx(x.data.mean(), rel=0.005)
    kept = out.data[out.data != 0]
    np.testing.assert_allclose(kept, x.data[out.data != 0] / 0.75)
    assert ad.dropout(x, 0.25, training=False) is x


def test_dropout_with_frozen_mask_gradcheck():
    rng = np.random.default_rng(9)
    x, w, b = param(rng.normal(size=(5, 4))), param(rng.normal(size=(4, 6))), param(rng.normal(size=6))
    mask = ad.dropout_mask((5, 6), 0.25, np.random.default_rng(10))
    report = ad.grad_check(lambda: ad.mean(ad.square(ad.dropout(ad.relu(ad.dense(x, w, b)), 0.25, mask=mask))),
                           [x, w, b], tolerance=1e-6)
    assert report.passed, report


def test_columns_concat_affine_gradients():
    rng = np.random.default_rng(11)
    a, t = param(rng.normal(size=(8, 4))), param(rng.normal(size=(8, 1)))
    coef = rng.normal(size=3)

    def build():
        cat = ad.concat([a, t], axis=1)
        rest = ad.columns(cat, 1, 5)
        return ad.add(ad.mean(ad.square(ad.affine_const(ad.columns(rest, 0, 3), coef, 0.3))),
                      ad.sum_(ad.columns(cat, 0, 1)))

    assert ad.grad_check(build, [a, t], tolerance=1e-8).passed


def test_backward_visits_shared_nodes_once():
    x = param(np.array([2.0]))
    y = ad.mul(x, x)
    z = ad.add(y, y)  # dz/dx = 4x
    ad.sum_(z).backward()
    assert x.grad[0] == pytest.approx(8.0)


def test_corrupted_backward_rule_is_detected(monkeypatch):
    rng = np.random.default_rng(12)
    x, w, b = param(rng.normal(size=(3, 4))), param(rng.normal(size=(4, 2))), param(rng.normal(size=2))
    real = ad.dense

    def broken(x_, w_, b_):
        out = real(x_, w_, b_)
        good = out._backward
        out._backward = lambda g: [(p, 0.5 * gp) if p is w_ else (p, gp) for p, gp in good(g)]
        return out

    monkeypatch.setattr(ad, "dense", broken)
    report = ad.grad_check(lambda: ad.sum_(ad.square(ad.dense(x, w, b))), [x, w, b], tolerance=1e-6)
    assert not report.passed


def test_adam_first_step_and_zero_gradient():
    p = param(np.array([1.0]))
    state = ad.AdamState(lr=0.001)
    ad.adam_step([p], state, [np.array([1.0])])
    # m_hat = 1, v_hat = 1 after bias correction: step = lr / (1 + eps)
    assert p.data[0] == pytest.approx(1.0 - 0.001 / (1 + 1e-8), abs=1e-15)
    q = param(np.array([3.0, -2.0]))
    ad.adam_step([q], ad.AdamState(), [np.zeros(2)])
    np.testing.assert_array_equal(q.data, [3.0, -2.0])
    with pytest.raises(ad.ShapeError):
        ad.adam_step([q], ad.AdamState(), [np.zeros(3)])


@settings(max_examples=20, deadline=None)
@given(st.floats(-5, 5).filter(lambda g: abs(g) > 1e-3))
def test_adam_constant_gradient_monotone(g):
    p = param(np.array([0.0]))
    state = ad.AdamState()
    prev = 0.0
    for _ in range(1000):
        ad.adam_step([p], state, [np.array([g])])
        assert np.sign(prev - p.data[0]) == np.sign(g)
        prev = p.data[0]
    assert state.step == 1000


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(13)
    named = {"conv0.w": rng.normal(size=(16, 1, 3, 3)).astype(np.float32), "head.b": np.zeros(1)}
    path = tmp_path / "m.ckpt"
    ad.save_tensors(path, named)
    raw = path.read_bytes()
    assert raw[:8] == b"CNETCKP1"
    back = ad.load_tensors(path)
    assert list(back) == list(named)
    for k in named:
        assert back[k].dtype == named[k].dtype
        np.testing.assert_array_equal(back[k], named[k])
    (tmp_path / "bad").write_bytes(b"nope")
    with pytest.raises(ValueError):
        ad.load_tensors(tmp_path / "bad")
