"""Reverse-mode autodiff engine: graph mechanics, hand oracles, FD spot checks."""

import numpy as np
import pytest

from sliceset.tensor import Tensor, no_grad, grad_enabled, stack


def scalar(value, requires_grad=True):
    return Tensor(np.float64(value), requires_grad=requires_grad, dtype=np.float64)


def test_add_mul_hand_oracle():
    # f(a, b) = (a + b) * b, df/da = b, df/db = a + 2b
    a = scalar(2.0)
    b = scalar(3.0)
    f = (a + b) * b
    f.backward()
    assert f.item() == 15.0
    assert a.grad == pytest.approx(3.0)
    assert b.grad == pytest.approx(8.0)


def test_reused_node_accumulates_both_paths():
    # Diamond: y = x*x + x -> dy/dx = 2x + 1
    x = scalar(4.0)
    y = x * x + x
    y.backward()
    assert x.grad == pytest.approx(9.0)


def test_deep_chain_does_not_recurse():
    # 5000 adds would overflow a recursive backward; topological order must be iterative.
    x = scalar(1.0)
    y = x
    for _ in range(5000):
        y = y + x
    y.backward()
    assert x.grad == pytest.approx(5001.0)


def test_pow_and_div():
    x = scalar(3.0)
    y = (x ** 3) / 9.0
    y.backward()
    assert y.item() == pytest.approx(3.0)
    assert x.grad == pytest.approx(3.0)  # 3x^2/9 = x^2/3


def test_abs_gradient_sign():
    x = Tensor(np.array([-2.0, 0.5, 0.0]), requires_grad=True, dtype=np.float64)
    y = x.abs().sum()
    y.backward()
    np.testing.assert_allclose(x.grad, [-1.0, 1.0, 0.0])


def test_sub_and_neg():
    a = scalar(5.0)
    b = scalar(2.0)
    y = (a - b) + (-b)
    y.backward()
    assert y.item() == pytest.approx(1.0)
    assert a.grad == pytest.approx(1.0)
    assert b.grad == pytest.approx(-2.0)


def test_rsub_constant():
    x = scalar(2.0)
    y = 10.0 - x
    y.backward()
    assert y.item() == pytest.approx(8.0)
    assert x.grad == pytest.approx(-1.0)


def test_matmul_gradients_match_transpose_rule():
    rng = np.random.default_rng(0)
    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True, dtype=np.float64)
    b = Tensor(rng.standard_normal((4, 2)), requires_grad=True, dtype=np.float64)
    y = a.matmul(b).sum()
    y.backward()
    ones = np.ones((3, 2))
    np.testing.assert_allclose(a.grad, ones @ b.data.T)
    np.testing.assert_allclose(b.grad, a.data.T @ ones)


def test_broadcast_add_unbroadcasts_gradient():
    a = Tensor(np.zeros((3, 4)), requires_grad=True, dtype=np.float64)
    b = Tensor(np.ones(4), requires_grad=True, dtype=np.float64)
    y = (a + b).sum()
    y.backward()
    assert a.grad.shape == (3, 4)
    assert b.grad.shape == (4,)
    np.testing.assert_allclose(b.grad, 3.0)


def test_mean_gradient_is_uniform():
    x = Tensor(np.arange(6, dtype=np.float64).reshape(2, 3), requires_grad=True, dtype=np.float64)
    x.mean().backward()
    np.testing.assert_allclose(x.grad, np.full((2, 3), 1.0 / 6.0))


def test_sum_axis_keepdims():
    x = Tensor(np.ones((2, 3)), requires_grad=True, dtype=np.float64)
    y = x.sum(axis=1, keepdims=True)
    assert y.shape == (2, 1)
    (y * 2.0).sum().backward()
    np.testing.assert_allclose(x.grad, 2.0)


def test_reshape_transpose_roundtrip_gradient():
    x = Tensor(np.arange(12, dtype=np.float64).reshape(3, 4), requires_grad=True, dtype=np.float64)
    y = x.reshape(4, 3).transpose(1, 0)
    w = Tensor(np.arange(12, dtype=np.float64).reshape(3, 4), dtype=np.float64)
    (y * w).sum().backward()
    np.testing.assert_allclose(x.grad, w.data.T.reshape(3, 4))


def test_stack_splits_gradient_back():
    parts = [Tensor(np.float64(v), requires_grad=True, dtype=np.float64) for v in (1.0, 2.0, 3.0)]
    s = stack(parts, axis=0)
    assert s.shape == (3,)
    weights = Tensor(np.array([1.0, 10.0, 100.0]), dtype=np.float64)
    (s * weights).sum().backward()
    assert [float(p.grad) for p in parts] == [1.0, 10.0, 100.0]


def test_no_grad_blocks_graph_construction():
    x = scalar(2.0)
    with no_grad():
        assert not grad_enabled()
        y = x * x
    assert grad_enabled()
    assert y.grad is None
    y2 = x * x
    y2.backward()
    assert x.grad == pytest.approx(4.0)


def test_zero_grad_resets_accumulation():
    x = scalar(3.0)
    (x * x).backward()
    first = float(x.grad)
    x.zero_grad()
    (x * x).backward()
    assert float(x.grad) == pytest.approx(first)


def test_backward_requires_scalar_root():
    x = Tensor(np.ones(3), requires_grad=True, dtype=np.float64)
    with pytest.raises(ValueError):
        (x * 2.0).backward()


def test_float32_default_storage():
    t = Tensor([1.0, 2.0])
    assert t.dtype == np.float32
    assert t.numpy().dtype == np.float32


def test_gradient_dtype_follows_parameter_dtype():
    x = Tensor([1.0, 2.0], requires_grad=True)
    (x * x).sum().backward()
    assert x.grad.dtype == np.float32


def test_sum_accumulates_in_float64():
    # Adding 0.01 onto 1e8 in float32 rounds every increment away (spacing at
    # 1e8 is 8); a 64-bit accumulator keeps them and only the final store rounds.
    vals = np.full(1 << 16, np.float32(0.01))
    vals[0] = np.float32(1e8)
    t = Tensor(vals)
    total = float(t.sum().item())
    expected = 1e8 + float(np.float32(0.01)) * (len(vals) - 1)
    assert total == pytest.approx(expected, rel=1e-7)


def composite_fd_case(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((4, 3)), requires_grad=True, dtype=np.float64)
    w = Tensor(rng.standard_normal((3, 3)), requires_grad=True, dtype=np.float64)

    def f():
        h = x.matmul(w)
        return ((h * h).mean() + h.abs().sum() * 0.1)

    return f, [x, w]


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_composite_matches_central_differences(seed):
    f, params = composite_fd_case(seed)
    loss = f()
    loss.backward()
    grads = [p.grad.copy() for p in params]
    h = 1e-6
    rng = np.random.default_rng(seed + 100)
    with no_grad():
        for p, g in zip(params, grads):
            for _ in range(5):
                idx = tuple(rng.integers(0, s) for s in p.shape)
                orig = p.data[idx]
                p.data[idx] = orig + h
                fp = f().item()
                p.data[idx] = orig - h
                fm = f().item()
                p.data[idx] = orig
                numeric = (fp - fm) / (2 * h)
                assert numeric == pytest.approx(float(g[idx]), rel=1e-5, abs=1e-8)
