import math

import pytest
import torch

from usjepa import diffcore


def test_required_ops_cover_the_network_primitives():
    ops = diffcore.required_ops()
    for name in ["matmul", "add", "sub", "mul", "scale", "gelu", "softmax",
                 "layer_norm", "mean", "sum", "l1_diff", "sq_l2_diff",
                 "concat", "gather", "reshape", "transpose",
                 "conv_transpose2d", "cross_entropy"]:
        assert name in ops


def test_unsupported_op_fails_loudly():
    with pytest.raises(diffcore.UnsupportedOpError):
        diffcore.get_op("fft")


def test_sum_backward_is_all_ones():
    x = torch.randn(5, requires_grad=True)
    torch.sum(x).backward()
    assert torch.equal(x.grad, torch.ones(5))


def test_l1_of_identical_tensors_has_zero_loss_and_gradient():
    x = torch.randn(4, requires_grad=True)
    loss = diffcore.get_op("l1_diff")(x, x.detach().clone())
    assert loss.item() == 0.0
    loss.backward()
    # Subgradient convention at the kink: 0.
    assert torch.equal(x.grad, torch.zeros(4))


def test_softmax_cross_entropy_gradient_closed_form():
    logits = torch.zeros(1, 2, requires_grad=True)
    loss = diffcore.get_op("cross_entropy")(logits, torch.tensor([0]))
    loss.backward()
    expected = torch.tensor([[-0.5, 0.5]])
    assert torch.allclose(logits.grad, expected, atol=1e-7)


def test_grad_check_quadratic():
    x = torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64, requires_grad=True)
    report = diffcore.grad_check(lambda: (x**2).sum(), x, eps=1e-5, tol=1e-6)
    assert report.passed
    assert report.max_rel_err < 1e-7
    # Analytic gradient of sum(x^2) is 2x.
    g = torch.autograd.grad((x**2).sum(), x)[0]
    assert torch.allclose(g, torch.tensor([2.0, 4.0, 6.0], dtype=torch.float64))


def test_grad_check_constant_function():
    x = torch.zeros(3, dtype=torch.float64, requires_grad=True)
    report = diffcore.grad_check(lambda: (x * 0.0).sum(), x)
    assert report.passed


def test_grad_check_l1_away_from_kinks():
    c = torch.tensor([0.0, 1.0, -2.0], dtype=torch.float64)
    x = torch.tensor([0.5, 0.25, -2.5], dtype=torch.float64, requires_grad=True)
    report = diffcore.grad_check(lambda: (x - c).abs().sum(), x, eps=1e-6)
    assert report.passed
    g = torch.autograd.grad((x - c).abs().sum(), x)[0]
    assert torch.equal(g, torch.sign(x.detach() - c))


def test_grad_check_rejects_f32():
    x = torch.zeros(2, requires_grad=True)
    with pytest.raises(ValueError, match="f64"):
        diffcore.grad_check(lambda: x.sum(), x)


def test_grad_check_flags_non_finite_values():
    x = torch.tensor([0.0], dtype=torch.float64, requires_grad=True)
    with pytest.raises(FloatingPointError):
        diffcore.grad_check(lambda: (1.0 / x).sum(), x)


def test_stop_gradient_blocks_flow():
    x = torch.randn(3, requires_grad=True)
    y = (diffcore.stop_gradient(x) * 2.0).sum() + x.sum()
    y.backward()
    assert torch.equal(x.grad, torch.ones(3))


def test_forward_backward_determinism():
    def run():
        diffcore.seed_everything(123)
        diffcore.use_single_thread()
        x = torch.randn(8, 8, requires_grad=True)
        w = torch.randn(8, 8, requires_grad=True)
        loss = torch.nn.functional.gelu(x @ w).sum()
        loss.backward()
        return loss.item(), x.grad.clone(), w.grad.clone()

    l1, gx1, gw1 = run()
    l2, gx2, gw2 = run()
    assert l1 == l2
    assert torch.equal(gx1, gx2)
    assert torch.equal(gw1, gw2)


def test_grad_check_multi_parameter_dict():
    a = torch.tensor([1.5], dtype=torch.float64, requires_grad=True)
    b = torch.tensor([[-0.5, 2.0]], dtype=torch.float64, requires_grad=True)
    report = diffcore.grad_check(lambda: (a * b).sum() + (b**2).sum(),
                                 {"a": a, "b": b})
    assert report.passed
