import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from retinex_llie import autodiff as ad
from retinex_llie import gradcheck

from conftest import const, t


def test_identity_1x1_conv():
    x = t(np.random.default_rng(0).normal(size=(2, 3, 4, 5)))
    w = torch.eye(3, dtype=torch.float64).reshape(3, 3, 1, 1)
    y = ad.conv2d(x, w, torch.zeros(3, dtype=torch.float64))
    assert torch.equal(y, x)


def test_ones_kernel_on_constant():
    c = 0.7
    y = ad.conv2d(const(c, (1, 1, 5, 5)), torch.ones(1, 1, 3, 3, dtype=torch.float64), None, padding=1)
    assert y[0, 0, 2, 2].item() == pytest.approx(9 * c)
    assert y[0, 0, 0, 0].item() == pytest.approx(4 * c)  # zero padding at the corner


def test_conv_is_cross_correlation():
    x = torch.zeros(1, 1, 3, 3, dtype=torch.float64)
    x[0, 0, 1, 1] = 1.0
    w = torch.arange(9, dtype=torch.float64).reshape(1, 1, 3, 3)
    y = ad.conv2d(x, w, None, padding=1)
    # an impulse reproduces the kernel flipped under correlation
    assert torch.equal(y[0, 0], w[0, 0].flip(0).flip(1))


@pytest.mark.parametrize("n,k,s,p", [(5, 3, 1, 1), (8, 3, 2, 1), (7, 3, 2, 0), (6, 1, 1, 0)])
def test_conv_output_size(n, k, s, p):
    y = ad.conv2d(torch.zeros(1, 2, n, n), torch.zeros(4, 2, k, k), None, stride=s, padding=p)
    assert y.shape[2] == (n + 2 * p - k) // s + 1


def test_conv_errors():
    with pytest.raises(ValueError, match="channels"):
        ad.conv2d(torch.zeros(1, 2, 4, 4), torch.zeros(1, 3, 3, 3))
    with pytest.raises(ValueError, match="square"):
        ad.conv2d(torch.zeros(1, 2, 4, 4), torch.zeros(1, 2, 3, 1))


def test_upsample():
    x = t([[[[1.0, 2.0], [3.0, 4.0]]]], grad=True)
    assert ad.upsample_nearest(x, 1) is x
    y = ad.upsample_nearest(x, 2)
    expect = [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]
    assert y[0, 0].tolist() == expect
    ad.backward(y.sum())
    assert x.grad[0, 0].tolist() == [[4.0, 4.0], [4.0, 4.0]]
    with pytest.raises(ValueError):
        ad.upsample_nearest(x, 0)


def test_elementwise_basics():
    assert ad.sigmoid(t(0.0)).item() == 0.5
    x = t(-3.0, grad=True)
    y = ad.relu(x)
    y.backward()
    assert y.item() == 0.0 and x.grad.item() == 0.0
    big = ad.sigmoid(t([-88.0, 88.0], dtype=torch.float32))
    assert torch.isfinite(big).all() and big[0] >= 0 and big[1] <= 1


def test_shape_mismatch():
    a, b = torch.zeros(1, 3, 2, 2), torch.zeros(1, 3, 2, 3)
    for op in (ad.add, ad.sub, ad.mul):
        with pytest.raises(ValueError):
            op(a, b)
    assert ad.mul(a, torch.tensor(2.0)).shape == a.shape
    with pytest.raises(ValueError):
        ad.concat_channels(a, b)
    assert ad.concat_channels(a, torch.zeros(1, 1, 2, 2)).shape == (1, 4, 2, 2)


def test_spatial_gradients():
    dh, dv = ad.spatial_gradients(const(3.0, (1, 1, 4, 4)))
    assert not dh.any() and not dv.any()
    ramp = t([[[[0.0, 1.0, 2.0]]]])
    dh, dv = ad.spatial_gradients(ramp)
    assert dh.flatten().tolist() == [1.0, 1.0, 0.0]
    assert dv.flatten().tolist() == [0.0, 0.0, 0.0]
    col = ramp.transpose(2, 3)
    dh, dv = ad.spatial_gradients(col)
    assert dv.flatten().tolist() == [1.0, 1.0, 0.0]
    assert dh.shape == dv.shape == col.shape


def test_backward_contract():
    w = t([1.0, 2.0], grad=True)
    ad.backward(ad.sum(w))
    assert w.grad.tolist() == [1.0, 1.0]
    w.grad = None
    ad.backward(ad.sum(ad.square(w)))
    assert w.grad.tolist() == [2.0, 4.0]
    with pytest.raises(ValueError, match="scalar"):
        ad.backward(w * 2)


def test_unreachable_params_get_zero_grad():
    params = {"used": t([1.0, 2.0], grad=True), "unused": t([[5.0]], grad=True)}
    ad.backward(ad.sum(params["used"]), params)
    assert params["unused"].grad.tolist() == [[0.0]]


@settings(max_examples=20, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 10_000))
def test_backward_is_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=(1, 2, 4, 4))

    def f(x):
        return ad.mean(ad.square(ad.sigmoid(x)))

    def g(x):
        dh, dv = ad.spatial_gradients(x)
        return ad.sum(ad.abs(dh)) + ad.mean(ad.exp(dv))

    grads = []
    for fn in (f, g, lambda x: a * f(x) + b * g(x)):
        x = t(x0, grad=True)
        ad.backward(fn(x))
        grads.append(x.grad.numpy())
    np.testing.assert_allclose(grads[2], a * grads[0] + b * grads[1], rtol=1e-10, atol=1e-12)


def test_repeat_runs_bit_identical():
    torch.manual_seed(0)
    x = torch.rand(1, 3, 16, 16)
    w = torch.rand(8, 3, 3, 3, requires_grad=True)
    outs = []
    for _ in range(2):
        w.grad = None
        y = ad.mean(ad.relu(ad.conv2d(x, w, None, padding=1)))
        ad.backward(y)
        outs.append((y.item(), w.grad.clone()))
    assert outs[0][0] == outs[1][0] and torch.equal(outs[0][1], outs[1][1])


@pytest.mark.parametrize("precision", [32, 64])
def test_gradcheck_suite(precision):
    results = gradcheck.run(precision, seed=3)
    assert {r.name for r in results} == set(gradcheck.REGISTRY)
    bad = [(r.name, r.error) for r in results if not r.passed]
    assert not bad


def test_gradcheck_detects_fault():
    res = gradcheck.run(64, seed=0, names={"conv2d", "loss_tv"}, corrupt="loss_tv")
    by = {r.name: r.passed for r in res}
    assert by == {"conv2d": True, "loss_tv": False}


def test_numeric_grads_oracle_on_known_function():
    # d/dx sum(x^3) = 3x^2, independent of autograd
    x = np.array([[0.5, -1.0, 2.0]])
    (g,) = gradcheck.numeric_grads(lambda z: (z ** 3).sum(), [x])
    np.testing.assert_allclose(g, 3 * x ** 2, rtol=1e-8)
