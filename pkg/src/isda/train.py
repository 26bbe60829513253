"""Training loop, batched inference and evaluation helpers."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .config import RunConfig
from .core import AdamWState, adamw_step, backward, checkpoint
from .data import SceneSet
from .matching import LossBreakdown, set_loss
from .metrics import EvalReport, Prediction, evaluate
from .model import ISDA

log = logging.getLogger(__name__)

CHECKPOINT = "model.ckpt"
TRAIN_LOG = "train.log"


def build_model(cfg: RunConfig, dtype: torch.dtype = torch.float32) -> ISDA:
    torch.manual_seed(cfg["train.seed"])
    return ISDA(cfg.model_config()).to(dtype)


def image_loss(model: ISDA, out: dict, b: int, gt_classes, gt_masks, cfg: RunConfig, masks=None) -> LossBreakdown:
    if masks is None:
        masks = model.full_res_masks(out["mask_logits"])
    return set_loss(
        out["class_logits"][b],
        masks[b],
        gt_classes,
        gt_masks,
        lambda_cls=cfg["loss.lambda_cls"],
        lambda_mask=cfg["loss.lambda_mask"],
        noobj_weight=cfg["loss.noobj_weight"],
    )


def batch_loss(model: ISDA, images, gt_classes, gt_masks, cfg: RunConfig):
    """Mean per-image loss over a batch; returns (total, cls, mask) tensors."""
    out = model(images)
    masks = model.full_res_masks(out["mask_logits"])
    parts = [image_loss(model, out, b, gt_classes[b], gt_masks[b], cfg, masks) for b in range(len(images))]
    total = torch.stack([p.total for p in parts]).mean()
    cls = torch.stack([p.cls_term for p in parts]).mean()
    mask = torch.stack([p.mask_term for p in parts]).mean()
    return total, cls, mask


def lr_at(cfg: RunConfig, epoch: int) -> float:
    """Learning rate for 1-based ``epoch``."""
    drops = sum(epoch >= e for e in cfg["train.lr_drop_epochs"])
    return cfg["train.lr"] * cfg["train.lr_drop_factor"] ** drops


@torch.no_grad()
def infer(model: ISDA, images: torch.Tensor, batch_size: int = 16) -> list[dict]:
    """Per image: class probabilities ``[N, K+1]`` and binary full-resolution masks ``[N, H, W]``."""
    model.eval()
    results = []
    for s in range(0, len(images), batch_size):
        out = model(images[s : s + batch_size])
        probs = torch.softmax(out["class_logits"], -1)
        masks = model.full_res_masks(out["mask_logits"]) > 0.5
        for b in range(len(probs)):
            results.append({"probs": probs[b], "masks": masks[b], "ref": out["ref"][b]})
    return results


def to_predictions(raw: dict, score_threshold: float = 0.0) -> list[Prediction]:
    probs = raw["probs"][:, :-1]
    conf, cls = probs.max(-1)
    return [
        (int(cls[q]), float(conf[q]), raw["masks"][q].numpy())
        for q in range(len(conf))
        if conf[q] > score_threshold
    ]


def evaluate_model(model: ISDA, scenes: SceneSet, score_threshold: float = 0.0) -> EvalReport:
    raw = infer(model, scenes.images)
    preds = {i: to_predictions(r, score_threshold) for i, r in zip(scenes.ids, raw)}
    return evaluate(preds, scenes.ground_truth())


def count_agreement(model: ISDA, scenes: SceneSet, score_threshold: float) -> float:
    """Fraction of images whose confident-prediction count is within 1 of the instance count."""
    raw = infer(model, scenes.images)
    ok = [
        abs(len(to_predictions(r, score_threshold)) - len(c)) <= 1
        for r, c in zip(raw, scenes.gt_classes)
    ]
    return float(np.mean(ok))


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    cls: float
    mask: float
    lr: float
    val_AP: float | None
    val_AP50: float | None
    seconds: float

    def line(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)


def train(
    cfg: RunConfig,
    train_set: SceneSet,
    val_set: SceneSet | None = None,
    out_dir: str | Path | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
    dtype: torch.dtype = torch.float32,
) -> tuple[ISDA, list[EpochRecord]]:
    """Train from scratch. Writes the checkpoint and log to ``out_dir`` when given."""
    torch.set_num_threads(cfg["train.threads"])
    model = build_model(cfg, dtype)
    params = [p for p in model.parameters()]
    state = AdamWState.zeros_like(params)
    bs = cfg["train.batch_size"]
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
        (out / TRAIN_LOG).write_text("", encoding="utf-8")

    history = []
    images = train_set.images.to(dtype)
    for epoch in range(1, cfg["train.epochs"] + 1):
        t0 = time.perf_counter()
        model.train()
        lr = lr_at(cfg, epoch)
        order = np.random.default_rng([cfg["train.seed"], epoch]).permutation(len(train_set))
        sums = np.zeros(3)
        for s in range(0, len(order), bs):
            idx = order[s : s + bs].tolist()
            total, cls, mask = batch_loss(
                model,
                images[idx],
                [train_set.gt_classes[i] for i in idx],
                [train_set.gt_masks[i] for i in idx],
                cfg,
            )
            for p in params:
                p.grad = None
            backward(total)
            if cfg["train.clip_norm"] > 0:
                torch.nn.utils.clip_grad_norm_(params, cfg["train.clip_norm"])
            adamw_step(params, [p.grad for p in params], state, lr, weight_decay=cfg["train.weight_decay"])
            sums += [total.item() * len(idx), cls.item() * len(idx), mask.item() * len(idx)]
        sums /= len(order)

        ap = ap50 = None
        every = cfg["train.eval_every"]
        if val_set is not None and every > 0 and (epoch % every == 0 or epoch == cfg["train.epochs"]):
            rep = evaluate_model(model, val_set)
            ap, ap50 = rep.AP, rep.AP50
        rec = EpochRecord(epoch, *sums.tolist(), lr, ap, ap50, time.perf_counter() - t0)
        history.append(rec)
        log.info("epoch %d loss %.4f cls %.4f mask %.4f AP50 %s", epoch, rec.loss, rec.cls, rec.mask, ap50)
        if out is not None:
            with open(out / TRAIN_LOG, "a", encoding="utf-8") as fh:
                fh.write(rec.line() + "\n")
        if on_epoch is not None:
            on_epoch(rec)

    if out is not None:
        checkpoint.save(out / CHECKPOINT, model.state_dict())
    return model, history


def load_model(cfg: RunConfig, path: str | Path, dtype: torch.dtype = torch.float32) -> ISDA:
    model = ISDA(cfg.model_config()).to(dtype)
    checkpoint.load_into(model, checkpoint.load(path))
    model.eval()
    return model
