"""Seeded synthetic shape scenes and their on-disk dataset format.

A dataset directory holds one annotation file per split, ``<split>.json``,
and the grayscale images as ``<split>/<id>.pgm``. See the README for the
annotation schema.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .netpbm import read_pgm, write_pgm
from .rle import rle_decode, rle_encode

CLASSES = ("circle", "rectangle", "triangle")
MIN_PIXELS = 16
FORMAT = "isda-synthetic"


@dataclass
class Instance:
    class_id: int
    mask: np.ndarray  # bool [H, W]
    z: int = 0  # draw order; later instances are drawn on top

    @property
    def area(self) -> int:
        return int(self.mask.sum())


@dataclass
class SyntheticScene:
    image: np.ndarray  # uint8 [H, W]
    instances: list[Instance]
    seed: int

    @property
    def pixels(self) -> torch.Tensor:
        """The image as a ``[3, H, W]`` float tensor in [0, 1]."""
        return gray_to_pixels(self.image)


def gray_to_pixels(gray: np.ndarray) -> torch.Tensor:
    x = torch.from_numpy(np.asarray(gray, dtype=np.float32) / 255.0)
    return x.expand(3, *x.shape).clone()


def scene_seeds(seed: int, count: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(count, dtype=np.uint64)]


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0:size, 0:size]
    return xs + 0.5, ys + 0.5


def _shape_params(rng: np.random.Generator, cls: int) -> dict:
    if cls == 0:
        return {"r": rng.uniform(3.0, 13.0)}
    if cls == 1:
        return {"w": rng.uniform(5.0, 24.0), "h": rng.uniform(5.0, 24.0)}
    return {"r": rng.uniform(5.0, 17.0), "theta": rng.uniform(0, 2 * math.pi)}


def _half_extent(cls: int, p: dict) -> tuple[float, float]:
    if cls == 1:
        return p["w"] / 2, p["h"] / 2
    return p["r"], p["r"]


def _draw(cls: int, p: dict, cx: float, cy: float, size: int) -> np.ndarray:
    xs, ys = _grid(size)
    if cls == 0:
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= p["r"] ** 2
    if cls == 1:
        return (np.abs(xs - cx) <= p["w"] / 2) & (np.abs(ys - cy) <= p["h"] / 2)
    angles = p["theta"] + np.arange(3) * 2 * math.pi / 3
    vx = cx + p["r"] * np.cos(angles)
    vy = cy + p["r"] * np.sin(angles)
    inside = np.ones((size, size), dtype=bool)
    for i in range(3):
        ax, ay, bx, by = vx[i], vy[i], vx[(i + 1) % 3], vy[(i + 1) % 3]
        # vertices run counter-clockwise in image coordinates, so the interior is on the left
        inside &= (bx - ax) * (ys - ay) - (by - ay) * (xs - ax) >= 0
    return inside


def _dilate(mask: np.ndarray) -> np.ndarray:
    out = mask.copy()
    out[1:] |= mask[:-1]
    out[:-1] |= mask[1:]
    out[:, 1:] |= mask[:, :-1]
    out[:, :-1] |= mask[:, 1:]
    return out


def _place(rng, cls, params, size, occupied, tries: int = 100) -> np.ndarray | None:
    hx, hy = _half_extent(cls, params)
    if 2 * max(hx, hy) + 1 > size:
        return None
    for _ in range(tries):
        cx = rng.uniform(hx + 0.5, size - hx - 0.5)
        cy = rng.uniform(hy + 0.5, size - hy - 0.5)
        mask = _draw(cls, params, cx, cy, size)
        if mask.sum() < MIN_PIXELS:
            continue
        if (_dilate(mask) & occupied).any():
            continue
        return mask
    return None


def _place_copy(rng, mask: np.ndarray, occupied: np.ndarray, tries: int = 100) -> np.ndarray | None:
    """An integer translation of ``mask``, so both copies rasterize identically."""
    ys, xs = np.nonzero(mask)
    h, w = mask.shape
    y0, y1, x0, x1 = ys.min(), ys.max(), xs.min(), xs.max()
    for _ in range(tries):
        dy = int(rng.integers(-y0, h - y1))
        dx = int(rng.integers(-x0, w - x1))
        copy = np.zeros_like(mask)
        copy[ys + dy, xs + dx] = True
        if not (_dilate(copy) & occupied).any():
            return copy
    return None


def render_scene(seed: int, size: int = 64, twin: bool = False) -> SyntheticScene:
    """Render one scene from its seed.

    Normal scenes hold 1-5 non-touching shapes of random class. Twin scenes
    hold one pair of identical shapes (same class, size, orientation and
    intensity) plus up to two other shapes.
    """
    rng = np.random.default_rng(seed)
    background = rng.uniform(0.05, 0.35)
    img = np.full((size, size), background)
    occupied = np.zeros((size, size), dtype=bool)
    instances: list[Instance] = []

    def add(cls: int, params: dict, value: float, like: np.ndarray | None = None) -> bool:
        mask = _place(rng, cls, params, size, occupied) if like is None else _place_copy(rng, like, occupied)
        if mask is None:
            return False
        occupied[...] |= mask
        img[mask] = value
        instances.append(Instance(cls, mask, z=len(instances)))
        return True

    if twin:
        cls = int(rng.integers(len(CLASSES)))
        params = _shape_params(rng, cls)
        value = rng.uniform(0.55, 1.0)
        while len(instances) < 2:
            instances.clear()
            occupied[...] = False
            img[...] = background
            if not (add(cls, params, value) and add(cls, params, value, like=instances[0].mask)):
                params = _shape_params(rng, cls)
        extra = int(rng.integers(0, 3))
    else:
        extra = int(rng.integers(1, 6))
    for _ in range(extra):
        c = int(rng.integers(len(CLASSES)))
        add(c, _shape_params(rng, c), rng.uniform(0.55, 1.0))
    for _ in range(100):  # small canvases can reject every shape drawn above
        if instances:
            break
        c = int(rng.integers(len(CLASSES)))
        add(c, _shape_params(rng, c), rng.uniform(0.55, 1.0))
    if not instances:
        raise RuntimeError(f"seed {seed}: could not place any shape")

    img = img + rng.normal(0.0, 0.04, img.shape)
    gray = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    return SyntheticScene(gray, instances, seed)


def validate_scene(scene: SyntheticScene, twin: bool = False) -> None:
    """Raise ``ValueError`` if ``scene`` breaks a dataset invariant."""
    h, w = scene.image.shape
    if not 1 <= len(scene.instances) <= 5:
        raise ValueError(f"{len(scene.instances)} instances")
    union = np.zeros((h, w), dtype=np.int32)
    for inst in scene.instances:
        if inst.mask.shape != (h, w):
            raise ValueError("mask exceeds image bounds")
        if not 0 <= inst.class_id < len(CLASSES):
            raise ValueError(f"class {inst.class_id}")
        if inst.area < MIN_PIXELS:
            raise ValueError(f"instance with {inst.area} pixels")
        union += inst.mask
    if not twin and union.max() > 1:
        raise ValueError("overlapping instances outside twin mode")
    if twin:
        counts = np.bincount([i.class_id for i in scene.instances], minlength=len(CLASSES))
        if counts.max() < 2:
            raise ValueError("twin scene without a same-class pair")


def generate_dataset(
    out_dir: str | Path, split: str, count: int, seed: int, size: int = 64, twin: bool = False
) -> Path:
    """Write ``count`` scenes to ``out_dir``; returns the annotation path."""
    if count < 1:
        raise ValueError("count must be >= 1")
    out = Path(out_dir)
    (out / split).mkdir(parents=True, exist_ok=True)
    records = []
    for idx, s in enumerate(scene_seeds(seed, count)):
        scene = render_scene(s, size, twin)
        validate_scene(scene, twin)
        rel = f"{split}/{idx:06d}.pgm"
        write_pgm(out / rel, scene.image)
        records.append(
            {
                "id": idx,
                "file": rel,
                "height": size,
                "width": size,
                "seed": s,
                "instances": [
                    {"class_id": i.class_id, "rle": rle_encode(i.mask), "area": i.area, "z": i.z}
                    for i in scene.instances
                ],
            }
        )
    doc = {
        "format": FORMAT,
        "version": 1,
        "split": split,
        "seed": seed,
        "twin": twin,
        "size": size,
        "classes": list(CLASSES),
        "images": records,
    }
    path = out / f"{split}.json"
    path.write_text(json.dumps(doc, sort_keys=True) + "\n", encoding="utf-8")
    return path


@dataclass
class SceneSet:
    """A loaded split: images plus per-image ground truth."""

    ids: list[int]
    images: torch.Tensor  # [M, 3, H, W] float32
    gt_classes: list[torch.Tensor]  # [G] long
    gt_masks: list[torch.Tensor]  # [G, H, W] bool

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, idx) -> "SceneSet":
        idx = list(idx)
        return SceneSet(
            [self.ids[i] for i in idx],
            self.images[idx],
            [self.gt_classes[i] for i in idx],
            [self.gt_masks[i] for i in idx],
        )

    def ground_truth(self) -> dict[int, list[tuple[int, np.ndarray]]]:
        return {
            i: [(int(c), m.numpy()) for c, m in zip(cls, masks)]
            for i, cls, masks in zip(self.ids, self.gt_classes, self.gt_masks)
        }


def load_split(data_dir: str | Path, split: str) -> SceneSet:
    root = Path(data_dir)
    path = root / f"{split}.json"
    if not path.exists():
        raise FileNotFoundError(f"no annotation file {path}")
    doc = json.loads(path.read_text(encoding="utf-8"))
    if doc.get("format") != FORMAT:
        raise ValueError(f"{path}: not an {FORMAT} annotation file")
    ids, images, classes, masks = [], [], [], []
    for rec in doc["images"]:
        h, w = rec["height"], rec["width"]
        ids.append(rec["id"])
        images.append(gray_to_pixels(read_pgm(root / rec["file"])))
        inst = rec["instances"]
        classes.append(torch.tensor([i["class_id"] for i in inst], dtype=torch.long))
        if inst:
            masks.append(torch.from_numpy(np.stack([rle_decode(i["rle"], (h, w)) for i in inst])))
        else:
            masks.append(torch.zeros(0, h, w, dtype=torch.bool))
    return SceneSet(ids, torch.stack(images), classes, masks)
