"""
Write a learned dictionary W (D x H) as one binary PGM per column plus a raw CSV.
"""
import logging
import math
from pathlib import Path

import numpy as np
import pandas as pd

from utils.file_utils import atomic_write_bytes

logger = logging.getLogger(__name__)


def square_side(n_observed: int) -> int | None:
    side = math.isqrt(n_observed)
    return side if side * side == n_observed else None


def column_to_pgm(column: np.ndarray, side: int) -> bytes:
    """P5 8-bit grey image, min-max normalized; a constant column renders mid-grey."""
    lo, hi = float(column.min()), float(column.max())
    if hi > lo:
        scaled = (column - lo) / (hi - lo) * 255.0
    else:
        scaled = np.full(column.shape, 127.0)
    pixels = np.rint(scaled).astype(np.uint8).reshape(side, side)
    return f"P5\n{side} {side}\n255\n".encode("ascii") + pixels.tobytes()


def write_dictionary_csv(W: np.ndarray, path) -> Path:
    """D rows, H columns named w0..w{H-1}, full float precision."""
    frame = pd.DataFrame(W, columns=[f"w{h}" for h in range(W.shape[1])])
    return atomic_write_bytes(path, frame.to_csv(index=False, float_format="%.17g").encode("utf-8"))


def read_dictionary_csv(path) -> np.ndarray:
    return pd.read_csv(path, float_precision="round_trip").to_numpy(dtype=np.float64)


def dump_dictionary(W, out_dir, prefix: str = "W") -> dict:
    """
    Writes ``<prefix>.csv`` and, for square D, ``<prefix>_<h>.pgm`` per column.

    Returns {"csv": path, "pgm": [paths], "notice": str | None}.
    """
    W = np.asarray(W, dtype=np.float64)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = write_dictionary_csv(W, out_dir / f"{prefix}.csv")

    side = square_side(W.shape[0])
    if side is None:
        notice = f"D={W.shape[0]} is not a square image; wrote CSV only"
        logger.warning(notice)
        return {"csv": csv_path, "pgm": [], "notice": notice}

    width = len(str(W.shape[1] - 1))
    images = [
        atomic_write_bytes(out_dir / f"{prefix}_{h:0{width}d}.pgm", column_to_pgm(W[:, h], side))
        for h in range(W.shape[1])
    ]
    return {"csv": csv_path, "pgm": images, "notice": None}
