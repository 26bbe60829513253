"""Run-length encoding of binary masks.

Runs are taken in column-major order and alternate zero/one, starting with
the (possibly empty) leading run of zeros: a 2x2 all-ones mask is ``"0 4"``.
"""
from __future__ import annotations

import numpy as np


class RLEError(ValueError):
    pass


def rle_encode(mask) -> str:
    flat = np.asarray(mask, dtype=bool).flatten(order="F")
    if flat.size == 0:
        return ""
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return " ".join(map(str, runs))


def rle_decode(rle: str, shape: tuple[int, int]) -> np.ndarray:
    h, w = shape
    try:
        runs = [int(tok) for tok in rle.split()]
    except ValueError as exc:
        raise RLEError(f"non-integer run in {rle!r}") from exc
    if any(r < 0 for r in runs):
        raise RLEError("negative run length")
    if sum(runs) != h * w:
        raise RLEError(f"runs cover {sum(runs)} pixels, mask has {h * w}")
    flat = np.zeros(h * w, dtype=bool)
    pos = 0
    for i, r in enumerate(runs):
        if i % 2:
            flat[pos : pos + r] = True
        pos += r
    return flat.reshape((h, w), order="F")
