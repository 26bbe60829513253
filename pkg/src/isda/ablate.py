"""The two positional/resolution ablation grids and their CSV table."""
from __future__ import annotations

import csv
import logging
from collections import Counter
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Callable, Iterable

from .config import RunConfig
from .data import SceneSet, generate_dataset, load_split
from .train import evaluate_model, train

log = logging.getLogger(__name__)

POSITION_CELLS = ((False, False), (True, False), (False, True), (True, True))
SCALE_CELLS = (Fraction(1, 8), Fraction(1, 4), Fraction(1, 2))
COLUMNS = ("grid", "cell", "mfr_positions", "kernel_positions", "mfr_scale", "seed", "AP", "AP50", "AP75", "AP_S", "AP_M", "AP_L")


@dataclass(frozen=True)
class Row:
    grid: str
    cell: str
    mfr_positions: bool
    kernel_positions: bool
    mfr_scale: Fraction
    seed: int
    AP: float
    AP50: float
    AP75: float
    AP_S: float
    AP_M: float
    AP_L: float

    def as_csv(self) -> list[str]:
        out = []
        for name in COLUMNS:
            v = getattr(self, name)
            if isinstance(v, bool):
                v = int(v)
            elif isinstance(v, float):
                v = f"{v:.6f}"
            out.append(str(v))
        return out


def position_cell(mp: bool, kp: bool) -> str:
    return f"MP={int(mp)},KP={int(kp)}"


def ablation_data(cfg: RunConfig, root: str | Path, twin: bool) -> tuple[SceneSet, SceneSet]:
    """Generate (or reuse) the ablation train/val splits under ``root``."""
    root = Path(root)
    seed = cfg["data.seed"]
    for split, count, offset in (("train", cfg["ablate.train_count"], 0), ("val", cfg["ablate.val_count"], 1)):
        if not (root / f"{split}.json").exists():
            generate_dataset(root, split, count, seed + offset, cfg["input.size"], twin)
    return load_split(root, "train"), load_split(root, "val")


def _cell_config(cfg: RunConfig, seed: int, **changes) -> RunConfig:
    return cfg.updated(
        {
            "train.seed": seed,
            "train.epochs": cfg["ablate.epochs"],
            "train.lr_drop_epochs": cfg["ablate.lr_drop_epochs"],
            "train.eval_every": 0,
            **changes,
        }
    )


def _run(grid, cell, cfg, train_set, val_set) -> Row:
    model, _ = train(cfg, train_set)
    rep = evaluate_model(model, val_set)
    row = Row(
        grid,
        cell,
        cfg["head.mfr_positions"],
        cfg["head.kernel_positions"],
        cfg["mfr.scale"],
        cfg["train.seed"],
        rep.AP,
        rep.AP50,
        rep.AP75,
        rep.AP_S,
        rep.AP_M,
        rep.AP_L,
    )
    log.info("%s %s seed %d AP %.4f AP50 %.4f", grid, cell, row.seed, row.AP, row.AP50)
    return row


def position_grid(cfg: RunConfig, train_set, val_set, on_row: Callable[[Row], None] | None = None) -> list[Row]:
    rows = []
    for seed in cfg["ablate.seeds"]:
        for mp, kp in POSITION_CELLS:
            c = _cell_config(cfg, seed, **{"head.mfr_positions": mp, "head.kernel_positions": kp})
            rows.append(_run("position", position_cell(mp, kp), c, train_set, val_set))
            if on_row:
                on_row(rows[-1])
    return rows


def scale_grid(cfg: RunConfig, train_set, val_set, on_row: Callable[[Row], None] | None = None) -> list[Row]:
    rows = []
    for seed in cfg["ablate.seeds"]:
        for scale in SCALE_CELLS:
            c = _cell_config(cfg, seed, **{"mfr.scale": scale})
            rows.append(_run("scale", str(scale), c, train_set, val_set))
            if on_row:
                on_row(rows[-1])
    return rows


def write_csv(path: str | Path, rows: Iterable[Row]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in rows:
            w.writerow(r.as_csv())


def read_csv(path: str | Path) -> list[Row]:
    with open(path, newline="", encoding="utf-8") as fh:
        recs = list(csv.DictReader(fh))
    return [
        Row(
            r["grid"],
            r["cell"],
            bool(int(r["mfr_positions"])),
            bool(int(r["kernel_positions"])),
            Fraction(r["mfr_scale"]),
            int(r["seed"]),
            *(float(r[k]) for k in COLUMNS[6:]),
        )
        for r in recs
    ]


def _by_seed(rows: list[Row], grid: str) -> dict[int, dict[str, Row]]:
    out: dict[int, dict[str, Row]] = {}
    for r in rows:
        if r.grid == grid:
            out.setdefault(r.seed, {})[r.cell] = r
    return out


def majority(votes: list[bool]) -> bool:
    return sum(votes) * 2 > len(votes)


def position_verdicts(rows: list[Row]) -> dict[str, bool]:
    """Per-seed ordering checks on the MP/KP grid, decided by majority vote."""
    best, mp_over_base = [], []
    full, mp_only, base = position_cell(True, True), position_cell(True, False), position_cell(False, False)
    for cells in _by_seed(rows, "position").values():
        top = max(r.AP50 for r in cells.values())
        best.append(cells[full].AP50 >= top)
        mp_over_base.append(cells[mp_only].AP50 > cells[base].AP50)
    return {"MP+KP best AP50": majority(best), "MP beats baseline": majority(mp_over_base)}


def _small_ratio(r: Row) -> float:
    return r.AP_L / max(r.AP_S, 1e-9)


def scale_verdicts(rows: list[Row]) -> dict[str, bool]:
    """Per-seed ordering checks on the resolution grid, decided by majority vote."""
    quarter_vs_eighth, eighth_ratio = [], []
    for cells in _by_seed(rows, "scale").values():
        quarter_vs_eighth.append(cells["1/4"].AP >= cells["1/8"].AP)
        ratios = {k: _small_ratio(r) for k, r in cells.items()}
        eighth_ratio.append(ratios["1/8"] >= max(ratios.values()))
    return {"1/4 AP >= 1/8 AP": majority(quarter_vs_eighth), "1/8 highest AP_L/AP_S": majority(eighth_ratio)}


def summary_lines(rows: list[Row]) -> list[str]:
    means: dict[tuple[str, str], list[Row]] = {}
    for r in rows:
        means.setdefault((r.grid, r.cell), []).append(r)
    lines = []
    for (grid, cell), rs in means.items():
        n = len(rs)
        ap = sum(r.AP for r in rs) / n
        ap50 = sum(r.AP50 for r in rs) / n
        lines.append(f"{grid:8s} {cell:12s} seeds={n} AP={ap:.4f} AP50={ap50:.4f}")
    counts = Counter(r.grid for r in rows)
    if counts["position"]:
        lines += [f"position: {k}: {v}" for k, v in position_verdicts(rows).items()]
    if counts["scale"]:
        lines += [f"scale: {k}: {v}" for k, v in scale_verdicts(rows).items()]
    return lines
