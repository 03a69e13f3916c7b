import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from tailor import diffcore as dc
from tailor.gradcheck import numeric_grad, primitive_checks, rel_err


def t(v, grad=False):
    return dc.tensor(v, requires_grad=grad)


def test_matmul_identity_and_zero():
    a = t([[3.0, 4.0], [5.0, 6.0]])
    assert torch.equal(dc.matmul(torch.eye(2, dtype=torch.float64), a), a)
    assert dc.matmul(t([[1.0, 2.0]]), t([[0.0], [0.0]])).tolist() == [[0.0]]


def test_matmul_shape_error_reports_both_shapes():
    with pytest.raises(dc.DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        dc.matmul(torch.zeros(2, 3), torch.zeros(2, 3))


def test_matmul_gradient_matches_finite_differences(gen):
    a = torch.randn(3, 4, generator=gen, dtype=torch.float64, requires_grad=True)
    b = torch.randn(4, 2, generator=gen, dtype=torch.float64, requires_grad=True)
    f = lambda: dc.sum(dc.matmul(a, b))
    dc.backward(f())
    assert rel_err(a.grad.numpy(), numeric_grad(f, a)) < 1e-6
    assert rel_err(b.grad.numpy(), numeric_grad(f, b)) < 1e-6


def test_softmax_rows_examples():
    assert np.allclose(dc.softmax_rows(t([[0.0, 0.0, 0.0]])).numpy(), 1 / 3, atol=1e-15)
    big = dc.softmax_rows(t([[1000.0, 0.0]])).numpy()
    assert abs(big[0, 0] - 1) < 1e-12 and abs(big[0, 1]) < 1e-12
    # direct evaluation: e^i / (e + e^2 + e^3)
    z = math.e + math.e**2 + math.e**3
    expected = [math.e / z, math.e**2 / z, math.e**3 / z]
    got = dc.softmax_rows(t([[1.0, 2.0, 3.0]])).numpy()[0]
    assert np.allclose(got, expected, atol=1e-15)
    assert np.allclose(got, [0.09003057, 0.24472847, 0.66524096], atol=1e-8)


def test_softmax_rejects_non_finite():
    with pytest.raises(dc.DomainError):
        dc.softmax_rows(t([[float("nan"), 0.0]]))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1), st.floats(0.1, 50.0))
def test_softmax_rows_is_row_stochastic(m, n, seed, scale):
    x = torch.randn(m, n, generator=torch.Generator().manual_seed(seed), dtype=torch.float64) * scale
    y = dc.softmax_rows(x)
    assert torch.all(y >= 0) and torch.all(y <= 1)
    assert torch.allclose(y.sum(-1), torch.ones(m, dtype=torch.float64), atol=1e-9)


def test_layer_norm_examples(gen):
    ones, zeros = torch.ones(4, dtype=torch.float64), torch.zeros(4, dtype=torch.float64)
    assert torch.equal(dc.layer_norm(torch.full((1, 4), 3.0, dtype=torch.float64), ones, zeros),
                       torch.zeros(1, 4, dtype=torch.float64))
    y = dc.layer_norm(t([[1.0, 3.0]]), torch.ones(2, dtype=torch.float64), torch.zeros(2, dtype=torch.float64),
                      eps=1e-14)
    assert np.allclose(y.numpy(), [[-1.0, 1.0]], atol=1e-12)
    x = torch.rand(4, 8, generator=gen, dtype=torch.float64) * 2 - 1
    y = dc.layer_norm(x, torch.ones(8, dtype=torch.float64), torch.zeros(8, dtype=torch.float64))
    assert torch.all(y.mean(-1).abs() < 1e-10)


def test_layer_norm_rejects_bad_eps():
    with pytest.raises(ValueError):
        dc.layer_norm(torch.zeros(1, 2), torch.ones(2), torch.zeros(2), eps=0.0)


def test_grad_reversal_semantics():
    x = t([1.5, -2.0], grad=True)
    y = dc.grad_reversal(x)
    assert torch.equal(y, x)
    g = t([0.3, -7.0])
    (y * g).sum().backward()
    assert torch.equal(x.grad, -g)

    x2 = t([1.5, -2.0], grad=True)
    (dc.grad_reversal(dc.grad_reversal(x2)) * g).sum().backward()
    assert torch.equal(x2.grad, g)


def test_elementwise_examples():
    assert float(dc.frobenius_sq(torch.zeros(3, 3))) == 0.0
    assert float(dc.frobenius_sq(t([[1.0, 2.0], [3.0, 4.0]]))) == 30.0
    assert float(dc.sigmoid(t(0.0))) == 0.5
    with pytest.raises(dc.DomainError):
        dc.log(t([1.0, 0.0]))
    with pytest.raises(dc.DimensionError):
        dc.add(torch.zeros(2, 3), torch.zeros(3, 2))
    with pytest.raises(dc.DimensionError):
        dc.concat([torch.zeros(2, 3), torch.zeros(2, 4)], axis=0)


def test_relu_subgradient_at_zero_is_zero():
    x = t([0.0, 1.0, -1.0], grad=True)
    dc.sum(dc.relu(x)).backward()
    assert x.grad.tolist() == [0.0, 1.0, 0.0]


def test_gelu_is_tanh_approximation():
    x = t([-1.0, 0.5, 2.0])
    ref = 0.5 * x * (1 + torch.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))
    assert torch.equal(dc.gelu(x), ref)


def test_backward_examples():
    x = torch.randn(2, 2, dtype=torch.float64, requires_grad=True)
    grads = dc.backward(dc.sum(x), [("x", x)])
    assert torch.equal(grads["x"], torch.ones(2, 2, dtype=torch.float64))
    x.grad = None
    grads = dc.backward(dc.frobenius_sq(x), [("x", x)])
    assert torch.allclose(grads["x"], 2 * x.detach())


def test_backward_accumulates_multiple_uses():
    x = t([2.0], grad=True)
    dc.backward(dc.sum(x * x + 3 * x))
    assert x.grad.item() == 7.0


def test_backward_requires_scalar():
    with pytest.raises(dc.ContractError):
        dc.backward(torch.ones(2, requires_grad=True) * 2)


def test_backward_is_deterministic(gen):
    a = torch.randn(5, 5, generator=gen, dtype=torch.float64, requires_grad=True)

    def run():
        a.grad = None
        dc.backward(dc.sum(dc.softmax_rows(dc.matmul(a, a)) * a))
        return a.grad.clone()

    assert torch.equal(run(), run())


def test_dropout_disabled_outside_training():
    x = torch.ones(10)
    assert dc.dropout(x, 0.5, training=False) is x
    g = torch.Generator().manual_seed(0)
    y = dc.dropout(x, 0.5, training=True, generator=g)
    assert set(y.tolist()) <= {0.0, 2.0}


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_every_primitive_passes_finite_differences(seed):
    for result in primitive_checks(seed):
        assert result.passed, (result.name, result.max_rel_err)


def test_precision_switch():
    assert dc.dtype_for("f32") is torch.float32
    assert dc.dtype_for("f64") is torch.float64
    with pytest.raises(ValueError):
        dc.dtype_for("f16")
