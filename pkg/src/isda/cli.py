"""``isda`` command line: generate, train, eval, infer, gradcheck, ablate.

Exit codes: 0 success, 1 gradient check failure, 2 configuration error,
3 checkpoint missing or incompatible with the configured model.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import ablate
from .config import ConfigError, RunConfig, load_config
from .core.checkpoint import CheckpointError
from .data import generate_dataset, load_split, read_pgm, write_pgm, write_ppm
from .data.synthetic import gray_to_pixels
from .gradcheck import run_suite
from .model import predict
from .train import CHECKPOINT, evaluate_model, load_model, train

log = logging.getLogger("isda")

EXIT_GRADCHECK = 1
EXIT_CONFIG = 2
EXIT_CHECKPOINT = 3

# overlay colours per class: circle, rectangle, triangle, then cycled
PALETTE = np.array([[230, 60, 60], [60, 200, 60], [70, 110, 240], [230, 200, 40], [200, 70, 220]], dtype=np.float64)


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="isda", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name: str, help: str, checkpoint: bool = False, threshold: bool = False):
        s = sub.add_parser(name, help=help)
        s.add_argument("--config", type=Path, help="flat key = value config file")
        s.add_argument("--seed", type=int, help="overrides the command's seed key")
        s.add_argument("--out", type=Path, help="output directory")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="extra config override")
        if checkpoint:
            s.add_argument("--checkpoint", type=Path, help="model checkpoint (default: <out>/model.ckpt)")
        if threshold:
            s.add_argument("--threshold", type=float, help="confidence threshold for kept predictions")
        return s

    add("generate", "write the synthetic train/val splits")
    add("train", "train from scratch on the configured dataset")
    add("eval", "mask AP of a checkpoint on the validation split", checkpoint=True, threshold=True)
    s = add("infer", "masks and an overlay for PGM images", checkpoint=True, threshold=True)
    s.add_argument("images", nargs="*", type=Path, help="input PGM files (default: first 8 validation images)")
    add("gradcheck", "finite-difference gradient suite")
    add("ablate", "MP/KP and mask-resolution ablation grids")
    return p


SEED_KEYS = {
    "generate": "data.seed",
    "train": "train.seed",
    "eval": "train.seed",
    "infer": "train.seed",
    "gradcheck": None,
    "ablate": None,
}


def _config(args) -> RunConfig:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    key = SEED_KEYS[args.command]
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2**64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        if key is not None:
            overrides[key] = args.seed
        elif args.command == "ablate":
            overrides["ablate.seeds"] = (args.seed,)
    if args.out is not None:
        overrides["paths.out"] = str(args.out)
    return load_config(args.config, overrides)


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg["paths.out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _ensure_data(cfg: RunConfig) -> Path:
    root = Path(cfg["data.dir"])
    if not (root / "train.json").exists() or not (root / "val.json").exists():
        log.info("dataset missing under %s; generating", root)
        _generate(cfg, root)
    return root


def _generate(cfg: RunConfig, root: Path) -> None:
    seed = cfg["data.seed"]
    size, twin = cfg["input.size"], cfg["data.twin"]
    generate_dataset(root, "train", cfg["data.train_count"], seed, size, twin)
    generate_dataset(root, "val", cfg["data.val_count"], seed + 1, size, twin)


def _load(args, cfg: RunConfig):
    path = args.checkpoint if args.checkpoint is not None else Path(cfg["paths.out"]) / CHECKPOINT
    if not path.is_file():
        raise CheckpointError(f"no checkpoint at {path}")
    return load_model(cfg, path)


def cmd_generate(args, cfg: RunConfig) -> int:
    root = args.out if args.out is not None else Path(cfg["data.dir"])
    _generate(cfg, root)
    log.info("wrote %d train / %d val scenes to %s", cfg["data.train_count"], cfg["data.val_count"], root)
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    root = _ensure_data(cfg)
    train_set, val_set = load_split(root, "train"), load_split(root, "val")
    out = _out(cfg)
    t0 = time.perf_counter()
    train(cfg, train_set, val_set, out_dir=out, on_epoch=lambda r: print(r.line(), flush=True))
    log.info("trained in %.1f s; checkpoint %s", time.perf_counter() - t0, out / CHECKPOINT)
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    model = _load(args, cfg)
    val_set = load_split(_ensure_data(cfg), "val")
    threshold = args.threshold if args.threshold is not None else 0.0
    report = evaluate_model(model, val_set, threshold).as_dict()
    text = json.dumps(report, sort_keys=True)
    print(text)
    (_out(cfg) / "eval.json").write_text(text + "\n", encoding="utf-8")
    return 0


def overlay(gray: np.ndarray, masks: list[np.ndarray], classes: list[int], alpha: float = 0.5) -> np.ndarray:
    """Colour each mask over the grayscale image; later masks paint on top."""
    rgb = np.repeat(gray[..., None].astype(np.float64), 3, axis=2)
    for m, c in zip(masks, classes):
        rgb[m] = (1 - alpha) * rgb[m] + alpha * PALETTE[c % len(PALETTE)]
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def cmd_infer(args, cfg: RunConfig) -> int:
    model = _load(args, cfg)
    threshold = args.threshold if args.threshold is not None else cfg["head.score_threshold"]
    if args.images:
        named = [(p.stem, read_pgm(p)) for p in args.images]
    else:
        root = _ensure_data(cfg)
        doc = json.loads((root / "val.json").read_text(encoding="utf-8"))
        named = [(Path(r["file"]).stem, read_pgm(root / r["file"])) for r in doc["images"][:8]]
    out = _out(cfg)
    with open(out / "detections.log", "w", encoding="utf-8") as fh:
        for stem, gray in named:
            dets = predict(model, gray_to_pixels(gray), threshold)
            for k, d in enumerate(dets):
                write_pgm(out / f"{stem}_mask{k:02d}.pgm", d.mask.astype(np.uint8) * 255)
                rec = {"image": stem, "index": k, "query": d.query, "class_id": d.class_id,
                       "confidence": round(d.confidence, 6), "area": int(d.mask.sum())}
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
            write_ppm(out / f"{stem}_overlay.ppm", overlay(gray, [d.mask for d in dets], [d.class_id for d in dets]))
            log.info("%s: %d instances", stem, len(dets))
    return 0


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    seed = args.seed if args.seed is not None else 0
    ok = True
    for res in run_suite(seed):
        print(f"{'PASS' if res.passed else 'FAIL'} {res.name} worst={res.worst:.3e} tensors={len(res.reports)}", flush=True)
        for r in res.reports:
            if not r.passed:
                print(f"  {r.name} error={r.error:.3e} ({r.mode})", flush=True)
        ok &= res.passed
    return 0 if ok else EXIT_GRADCHECK


def cmd_ablate(args, cfg: RunConfig) -> int:
    out = _out(cfg)
    rows = []

    def emit(row):
        rows.append(row)
        ablate.write_csv(out / "ablation.csv", rows)

    twin = ablate.ablation_data(cfg, out / "data_twin", twin=True)
    ablate.position_grid(cfg, *twin, on_row=emit)
    plain = ablate.ablation_data(cfg, out / "data", twin=False)
    ablate.scale_grid(cfg, *plain, on_row=emit)
    for line in ablate.summary_lines(rows):
        print(line)
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True
    )
    args = _parser().parse_args(argv)
    try:
        cfg = _config(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    torch.set_num_threads(cfg["train.threads"])
    try:
        return COMMANDS[args.command](args, cfg)
    except CheckpointError as exc:
        log.error("checkpoint error: %s", exc)
        return EXIT_CHECKPOINT


if __name__ == "__main__":
    sys.exit(main())
