"""Finite-difference gradient suite over every differentiable stage, in float64."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch

from .backbone import Backbone, Neck
from .core import check_gradients, ops
from .core.autograd import GradReport
from .mask import MaskFeatureHead, MaskHead
from .matching import hungarian, match_cost, set_loss
from .model import ISDA, ModelConfig
from .transformer import EncoderLayer, MSDeformAttn, flatten_pyramid

DTYPE = torch.float64

TINY = ModelConfig(
    num_classes=3, base_width=4, dim=8, heads=2, points=2, enc_layers=1, dec_layers=1, num_queries=4, ffn_width=16
)


@dataclass
class CheckResult:
    name: str
    reports: list[GradReport]

    @property
    def worst(self) -> float:
        return max(r.error for r in self.reports)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.reports)


def _leaf(*shape, gen, scale=1.0, low=None):
    if low is not None:
        t = torch.rand(*shape, generator=gen, dtype=DTYPE) * (scale - low) + low
    else:
        t = torch.randn(*shape, generator=gen, dtype=DTYPE) * scale
    return t.requires_grad_(True)


def _probe(out: torch.Tensor, gen) -> Callable[[torch.Tensor], torch.Tensor]:
    """A fixed random linear functional, turning any output into a scalar."""
    w = torch.randn(out.shape, generator=gen, dtype=DTYPE)
    return lambda y: (y * w).sum()


def _scalarize(fn, gen):
    with torch.no_grad():
        probe = _probe(fn(), gen)
    return lambda: probe(fn())


def _jitter(module: torch.nn.Module, gen, scale: float = 0.1) -> None:
    """Move every parameter to a generic point.

    At initialisation several parameters sit exactly on kinks (zero ReLU
    biases, integer sampling offsets that land on cell centres), where
    one-sided analytic derivatives and central differences legitimately
    disagree.
    """
    with torch.no_grad():
        for p in module.parameters():
            p.add_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * scale)


def _module_check(name, module, fn, inputs, gen) -> CheckResult:
    module = module.to(DTYPE)
    _jitter(module, gen)
    f = _scalarize(fn, gen)
    tensors = list(inputs) + [(f"{name}.{n}", p) for n, p in module.named_parameters()]
    return CheckResult(name, check_gradients(f, tensors))


def check_conv2d(gen):
    x, k, b = _leaf(2, 5, 5, gen=gen), _leaf(3, 2, 3, 3, gen=gen), _leaf(3, gen=gen)
    f = _scalarize(lambda: ops.conv2d(x, k, b), gen)
    return CheckResult("conv2d", check_gradients(f, [("input", x), ("kernel", k), ("bias", b)], full_limit=200))


def check_group_norm(gen):
    x, g, b = _leaf(4, 3, 3, gen=gen), _leaf(4, gen=gen), _leaf(4, gen=gen)
    f = _scalarize(lambda: ops.group_norm(x, 2, g, b), gen)
    return CheckResult("group_norm", check_gradients(f, [("input", x), ("gamma", g), ("beta", b)]))


def check_bilinear_sample(gen):
    v = _leaf(3, 4, 5, gen=gen)
    p = (torch.rand(6, 2, generator=gen, dtype=DTYPE) * 1.2 - 0.1).requires_grad_(True)
    f = _scalarize(lambda: ops.bilinear_sample(v, p), gen)
    return CheckResult("bilinear_sample", check_gradients(f, [("value", v), ("points", p)]))


def check_upsample(gen):
    x = _leaf(2, 3, 4, gen=gen)
    f = _scalarize(lambda: ops.bilinear_upsample2x(x), gen)
    return CheckResult("bilinear_upsample2x", check_gradients(f, [("input", x)]))


def check_layer_norm(gen):
    x, g, b = _leaf(3, 6, gen=gen), _leaf(6, gen=gen), _leaf(6, gen=gen)
    f = _scalarize(lambda: ops.layer_norm(x, g, b), gen)
    return CheckResult("layer_norm", check_gradients(f, [("input", x), ("gamma", g), ("beta", b)]))


def check_elementwise(gen):
    a, b = _leaf(3, 4, gen=gen), _leaf(4, 5, gen=gen)
    c = _leaf(3, 5, gen=gen)

    def fn():
        y = torch.softmax(a @ b, -1) + torch.sigmoid(c) * torch.relu(c + 0.3)
        return torch.cat((y, y.mean(0, keepdim=True)))

    f = _scalarize(fn, gen)
    return CheckResult("softmax/sigmoid/relu/matmul/concat/mean", check_gradients(f, [("a", a), ("b", b), ("c", c)]))


def _tiny_pyramid(gen, dim=8, shapes=((4, 4), (2, 2), (2, 1), (1, 1))):
    levels = [_leaf(1, dim, h, w, gen=gen) for h, w in shapes]
    enc = [torch.zeros(dim, h, w, dtype=DTYPE) for h, w in shapes]
    memory, table = flatten_pyramid(levels, enc)
    return levels, memory, table


def check_ms_deform_attn(gen):
    torch.manual_seed(int(torch.randint(0, 2**31, (1,), generator=gen)))
    attn = MSDeformAttn(8, heads=2, levels=4, points=2).to(DTYPE)
    q = _leaf(1, 3, 8, gen=gen)
    ref = _leaf(1, 3, 2, gen=gen, low=0.1, scale=0.9)
    _, memory, table = _tiny_pyramid(gen)
    memory = memory.detach().requires_grad_(True)
    return _module_check(
        "ms_deform_attn",
        attn,
        lambda: attn(q, ref, memory, table),
        [("queries", q), ("ref_points", ref), ("memory", memory)],
        gen,
    )


def check_encoder_layer(gen):
    torch.manual_seed(int(torch.randint(0, 2**31, (1,), generator=gen)))
    layer = EncoderLayer(8, heads=2, levels=4, points=2, ffn=16).to(DTYPE)
    _, memory, table = _tiny_pyramid(gen)
    memory = memory.detach().requires_grad_(True)
    ref = table.reference_points(DTYPE)[None]
    return _module_check("encoder_layer", layer, lambda: layer(memory, ref, table), [("memory", memory)], gen)


def check_neck(gen):
    torch.manual_seed(int(torch.randint(0, 2**31, (1,), generator=gen)))
    bb = Backbone(4).to(DTYPE)
    neck = Neck(bb.widths, 8).to(DTYPE)
    feats = [_leaf(1, c, s, s, gen=gen) for c, s in zip(bb.widths, (8, 4, 2, 2))]
    return _module_check(
        "neck", neck, lambda: torch.cat([p.flatten() for p in neck(feats)]), [(f"C{i+2}", f) for i, f in enumerate(feats)], gen
    )


def check_mfr(gen):
    torch.manual_seed(int(torch.randint(0, 2**31, (1,), generator=gen)))
    head = MaskFeatureHead(8).to(DTYPE)
    levels = [_leaf(1, 8, s, s, gen=gen) for s in (8, 4, 2, 1)]
    return _module_check("mfr_forward", head, lambda: head(levels), [(f"P{i+2}", p) for i, p in enumerate(levels)], gen)


def check_mask_head(gen):
    torch.manual_seed(int(torch.randint(0, 2**31, (1,), generator=gen)))
    head = MaskHead(8, 3).to(DTYPE)
    obj = _leaf(1, 4, 8, gen=gen)
    ref = _leaf(1, 4, 2, gen=gen, low=0.0, scale=1.0)
    mfr = _leaf(1, 10, 5, 5, gen=gen)
    return _module_check(
        "mask_head",
        head,
        lambda: torch.cat([t.flatten() for t in head(obj, ref, mfr)]),
        [("O", obj), ("R", ref), ("mfr", mfr)],
        gen,
    )


def check_set_loss(gen):
    logits = _leaf(5, 4, gen=gen)
    mask_logits = _leaf(5, 6, 6, gen=gen)
    gt_cls = torch.tensor([0, 2, 1])
    gt = torch.zeros(3, 6, 6, dtype=torch.bool)
    gt[0, :3, :3] = gt[1, 2:, 3:] = gt[2, 4:, :4] = True
    with torch.no_grad():
        a = hungarian(match_cost(logits.softmax(-1), torch.sigmoid(mask_logits), gt_cls, gt))
    f = lambda: set_loss(logits, torch.sigmoid(mask_logits), gt_cls, gt, assignment=a).total
    return CheckResult("set_loss", check_gradients(f, [("class_logits", logits), ("mask_logits", mask_logits)], full_limit=200))


def tiny_pipeline(gen, cfg: ModelConfig = TINY, size: int = 32):
    """Tiny float64 model, image and ground truth plus a loss closure at a fixed assignment."""
    torch.manual_seed(int(torch.randint(0, 2**31, (1,), generator=gen)))
    model = ISDA(cfg).to(DTYPE)
    _jitter(model, gen)
    image = torch.rand(1, 3, size, size, generator=gen, dtype=DTYPE).requires_grad_(True)
    gt_cls = torch.tensor([1, 0])
    gt = torch.zeros(2, size, size, dtype=torch.bool)
    gt[0, 2:12, 3:15] = True
    gt[1, 18:30, 16:28] = True
    with torch.no_grad():
        out = model(image)
        masks = model.full_res_masks(out["mask_logits"])[0]
        a = hungarian(match_cost(out["class_logits"][0].softmax(-1), masks, gt_cls, gt))

    def loss():
        out = model(image)
        return set_loss(out["class_logits"][0], model.full_res_masks(out["mask_logits"])[0], gt_cls, gt, assignment=a).total

    return model, image, loss


def check_pipeline(gen):
    model, image, loss = tiny_pipeline(gen)
    tensors = [("image", image)] + [(n, p) for n, p in model.named_parameters()]
    return CheckResult("image->loss pipeline", check_gradients(loss, tensors, full_limit=16))


CHECKS = [
    check_conv2d,
    check_group_norm,
    check_bilinear_sample,
    check_upsample,
    check_layer_norm,
    check_elementwise,
    check_ms_deform_attn,
    check_encoder_layer,
    check_neck,
    check_mfr,
    check_mask_head,
    check_set_loss,
    check_pipeline,
]


def run_suite(seed: int = 0) -> list[CheckResult]:
    gen = torch.Generator().manual_seed(seed)
    return [check(gen) for check in CHECKS]
