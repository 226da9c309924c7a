import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bertram_lab.core_math import (Adam, AdamState, DimensionError, DomainError, Parameter, adam_step,
                                   backward, grad_check, linear_schedule, matmul, set_frozen, sigmoid,
                                   softmax)

floats = st.floats(-50, 50, allow_nan=False, width=32)


def test_matmul_identity_and_dot():
    a = torch.tensor([[1.0, 2.0], [3.0, 4.0]])
    assert torch.equal(matmul(a, torch.eye(2)), a)
    assert matmul(torch.tensor([1.0, 2.0]), torch.tensor([[3.0], [4.0]])).tolist() == [11.0]


def test_matmul_against_triple_loop():
    g = torch.Generator().manual_seed(3)
    a, b = torch.randn(4, 5, generator=g), torch.randn(5, 3, generator=g)
    want = [[sum(a[i, k].item() * b[k, j].item() for k in range(5)) for j in range(3)] for i in range(4)]
    np.testing.assert_allclose(matmul(a, b).numpy(), np.array(want), rtol=1e-5, atol=1e-6)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(torch.zeros(2, 3), torch.zeros(2, 3))


def test_softmax_known_values():
    assert softmax(torch.zeros(2)).tolist() == [0.5, 0.5]
    np.testing.assert_allclose(softmax(torch.tensor([0.0, math.log(3)])).numpy(), [0.25, 0.75], atol=1e-7)
    with pytest.raises(DomainError):
        softmax(torch.zeros(0))


@given(arrays(np.float32, st.integers(1, 12), elements=floats), floats)
def test_softmax_simplex_and_shift_invariance(x, c):
    t = torch.from_numpy(x)
    p = softmax(t)
    assert (p >= 0).all()
    assert abs(p.sum().item() - 1) < 1e-6
    np.testing.assert_allclose(softmax(t + c).numpy(), p.numpy(), atol=1e-6)


def test_softmax_large_inputs_stay_finite():
    p = softmax(torch.tensor([1000.0, 1000.0, -1000.0]))
    assert torch.isfinite(p).all()
    assert p[:2].tolist() == [0.5, 0.5]


@given(st.floats(-500, 500, allow_nan=False))
def test_sigmoid_symmetry(x):
    assert 0.0 <= sigmoid(x) <= 1.0
    assert abs(sigmoid(-x) - (1 - sigmoid(x))) < 1e-12


def test_sigmoid_fixed_points():
    assert sigmoid(0.0) == 0.5
    assert abs(sigmoid(100.0) - 1.0) < 1e-9
    assert sigmoid(torch.tensor(0.0)).item() == 0.5


def test_backward_square():
    x = torch.tensor(3.0, requires_grad=True)
    backward(x ** 2)
    assert x.grad.item() == 6.0


def test_backward_rejects_vector_loss():
    with pytest.raises(DomainError):
        backward(torch.ones(3, requires_grad=True) * 2)


def test_frozen_parameter_gets_no_gradient():
    w = Parameter("w", torch.tensor([2.0], requires_grad=True))
    u = Parameter("u", torch.tensor([5.0], requires_grad=True))
    w.frozen = True
    backward((w.tensor * u.tensor).sum())
    assert w.grad.tolist() == [0.0]
    assert u.grad.tolist() == [2.0]


def test_gradient_accumulates_over_reuse():
    x = torch.tensor(2.0, requires_grad=True)
    backward(x * x + 3 * x)
    assert x.grad.item() == 7.0


def test_two_layer_network_matches_finite_differences():
    g = torch.Generator().manual_seed(0)
    W1 = torch.randn(4, 6, generator=g, dtype=torch.float64, requires_grad=True)
    W2 = torch.randn(6, 1, generator=g, dtype=torch.float64, requires_grad=True)
    x = torch.randn(5, 4, generator=g, dtype=torch.float64)

    def f():
        return torch.tanh(matmul(torch.tanh(matmul(x, W1)), W2)).pow(2).sum()

    assert grad_check(f, [W1, W2], h=1e-3) < 1e-3


def test_grad_check_linear_is_exact():
    w = torch.randn(7, dtype=torch.float64, requires_grad=True)
    c = torch.arange(7, dtype=torch.float64)
    assert grad_check(lambda: (w * c).sum(), [w]) < 1e-6


def test_adam_zero_gradient_keeps_parameter():
    p = torch.tensor([1.5, -2.0], requires_grad=True)
    p.grad = torch.zeros(2)
    Adam([p], lr=0.1).step()
    assert p.tolist() == [1.5, -2.0]


def test_adam_first_step_is_signed_lr():
    p = torch.tensor([1.0, 1.0, 1.0], dtype=torch.float64, requires_grad=True)
    p.grad = torch.tensor([0.3, -7.0, 1e-3], dtype=torch.float64)
    Adam([p], lr=0.01).step()
    np.testing.assert_allclose(p.detach().numpy(), [0.99, 1.01, 0.99], atol=1e-7)
    assert p.grad is None


def _scalar_adam(x, steps, lr, b1=0.9, b2=0.999, eps=1e-8, warmup=0.0, total=None):
    m = v = 0.0
    for t in range(1, steps + 1):
        g = 2 * (x - 3.0)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        rate = lr * linear_schedule(t, total, warmup)
        x -= rate * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return x


@pytest.mark.parametrize("warmup,total", [(0.0, None), (0.1, 10), (0.3, 10)])
def test_adam_matches_scalar_oracle(warmup, total):
    p = torch.tensor([0.5], requires_grad=True)
    opt = Adam([p], lr=0.05, warmup_fraction=warmup, total_steps=total)
    for _ in range(10):
        backward(((p - 3.0) ** 2).sum())
        opt.step()
    assert abs(p.item() - _scalar_adam(0.5, 10, 0.05, warmup=warmup, total=total)) < 1e-6


def test_adam_leaves_frozen_bits_alone():
    a = torch.randn(3, requires_grad=True)
    b = torch.randn(3, requires_grad=True)
    before = a.detach().clone()
    set_frozen([a], True)
    state = AdamState(lr=0.1)
    for _ in range(3):
        a.requires_grad_(True)
        backward((a * b).sum())
        a.requires_grad_(False)
        adam_step(state, [a, b])
    assert torch.equal(a, before)
    assert state.step == 3


def test_linear_schedule_shape():
    vals = [linear_schedule(s, 10, 0.2) for s in range(11)]
    assert vals[:3] == [0.0, 0.5, 1.0]
    assert vals[-1] == 0.0
    assert all(x >= y for x, y in zip(vals[2:], vals[3:]))
