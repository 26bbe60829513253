import torch

from isda.core import check_gradients
from isda.gradcheck import CHECKS

D = torch.float64


class Leaky(torch.autograd.Function):
    """x ** 3 with a backward that is off by a factor, to prove the checker notices."""

    @staticmethod
    def forward(ctx, x, factor):
        ctx.save_for_backward(x)
        ctx.factor = factor
        return x**3

    @staticmethod
    def backward(ctx, g):
        (x,) = ctx.saved_tensors
        return g * 3 * x**2 * ctx.factor, None


def _check(factor, n, full_limit):
    x = torch.randn(n, dtype=D, generator=torch.Generator().manual_seed(0)).requires_grad_(True)
    return check_gradients(lambda: Leaky.apply(x, factor).sum(), [("x", x)], full_limit=full_limit)[0]


def test_correct_gradient_passes_both_modes():
    assert _check(1.0, 10, full_limit=64).passed
    assert _check(1.0, 200, full_limit=64).mode == "jvp"
    assert _check(1.0, 200, full_limit=64).passed


def test_wrong_gradient_fails_both_modes():
    full = _check(1.001, 10, full_limit=64)
    jvp = _check(1.001, 200, full_limit=64)
    assert full.mode == "full" and not full.passed
    assert jvp.mode == "jvp" and not jvp.passed
    assert abs(full.error - 1e-3) < 1e-4


def test_unused_input_has_zero_gradient():
    x = torch.randn(3, dtype=D, requires_grad=True)
    y = torch.randn(3, dtype=D, requires_grad=True)
    reps = check_gradients(lambda: (x**2).sum(), [("x", x), ("y", y)])
    assert all(r.passed for r in reps)
    assert reps[1].error == 0.0


def test_suite_covers_every_stage():
    names = {c.__name__.removeprefix("check_") for c in CHECKS}
    assert names >= {
        "conv2d",
        "group_norm",
        "bilinear_sample",
        "upsample",
        "ms_deform_attn",
        "neck",
        "mfr",
        "mask_head",
        "set_loss",
        "pipeline",
    }
