# -*- coding: utf-8 -*-
"""
Datasets: bars-test generation, binarized-MNIST and plain matrix readers,
and the TVSD container round trip.
"""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path

import numpy as np
import pandas as pd

from services.engine import STREAM_DATA, block_rng
from services.errors import CorruptFileError, DimensionError, ParseError
from utils.binary_io import read_dataset, write_dataset

logger = logging.getLogger(__name__)

MNIST_PIXELS = 784


class DataKind(IntEnum):
    CONTINUOUS = 0
    BINARY = 1


@dataclass
class GroundTruth:
    """Generating parameters and latent states of a synthetic dataset."""

    model_kind: str
    params: dict[str, np.ndarray]
    states: np.ndarray  # (N, H) uint8

    @property
    def n_latents(self) -> int:
        return self.states.shape[1]


@dataclass
class Dataset:
    Y: np.ndarray
    kind: DataKind = DataKind.CONTINUOUS
    ground_truth: GroundTruth | None = None

    def __post_init__(self):
        self.Y = np.asarray(self.Y, dtype=np.float64)
        self.kind = DataKind(self.kind)
        if self.Y.ndim != 2:
            raise DimensionError(f"dataset must be an N x D matrix, got shape {self.Y.shape}")
        if self.kind == DataKind.BINARY and self.Y.size and not np.isin(self.Y, (0.0, 1.0)).all():
            raise DimensionError("binary dataset holds values other than 0 and 1")
        if self.ground_truth is not None and self.ground_truth.states.shape[0] != self.Y.shape[0]:
            raise DimensionError("ground-truth states and data disagree on N")

    @property
    def n_points(self) -> int:
        return self.Y.shape[0]

    @property
    def n_dims(self) -> int:
        return self.Y.shape[1]

    def head(self, n: int) -> "Dataset":
        """First n datapoints (all of them when n <= 0)."""
        if n <= 0 or n >= self.n_points:
            return self
        truth = self.ground_truth
        if truth is not None:
            truth = GroundTruth(truth.model_kind, truth.params, truth.states[:n])
        return Dataset(self.Y[:n], self.kind, truth)


# -------------------------------------------------
# Bars test
# -------------------------------------------------
@dataclass(frozen=True)
class BarsSpec:
    grid: int = 5
    bar_value: float = 10.0
    pi: float = 0.2
    sigma: float = 2.0
    bias: float = -5.0  # binary variant only
    n: int = 10000
    seed: int = 0

    @property
    def n_latents(self) -> int:
        return 2 * self.grid

    @property
    def n_observed(self) -> int:
        return self.grid * self.grid


def make_bars_dictionary(spec: BarsSpec) -> np.ndarray:
    """
    D x H matrix whose columns are bars on an R x R grid (pixels row-major).

    Columns 0..R-1 are horizontal bars, R..2R-1 vertical; on-bar pixels hold
    bar_value, everything else is 0.
    """
    R = spec.grid
    if R < 1:
        raise DimensionError(f"bars grid must be >= 1, got {R}")
    W = np.zeros((R, R, 2 * R))
    for i in range(R):
        W[i, :, i] = spec.bar_value
        W[:, i, R + i] = spec.bar_value
    return W.reshape(R * R, 2 * R)


def make_bsc_bars(spec: BarsSpec) -> Dataset:
    """Continuous bars: y = W s + Gaussian noise of std sigma."""
    from models.bsc import BscParams, bsc_generate

    params = BscParams(pi=spec.pi, W=make_bars_dictionary(spec), sigma2=spec.sigma ** 2)
    Y, S = bsc_generate(params, spec.n, block_rng(spec.seed, STREAM_DATA))
    truth = GroundTruth("bsc", {
        "pi": np.array([params.pi]), "W": params.W, "sigma2": np.array([params.sigma2]),
    }, S)
    return Dataset(Y, DataKind.CONTINUOUS, truth)


def make_sbn_bars(spec: BarsSpec) -> Dataset:
    """Binary bars: pixels on with probability logistic(W s + b), b = bias everywhere."""
    from models.sbn import SbnParams, sbn_generate

    params = SbnParams(
        pi=np.full(spec.n_latents, spec.pi),
        W=make_bars_dictionary(spec),
        b=np.full(spec.n_observed, spec.bias),
    )
    Y, S = sbn_generate(params, spec.n, block_rng(spec.seed, STREAM_DATA))
    truth = GroundTruth("sbn", {"pi": params.pi, "W": params.W, "b": params.b}, S)
    return Dataset(Y, DataKind.BINARY, truth)


# -------------------------------------------------
# Text readers
# -------------------------------------------------
def _read_text_matrix(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    try:
        frame = pd.read_csv(path, header=None, sep=r"\s+", dtype=str, skip_blank_lines=False)
    except pd.errors.EmptyDataError:
        return np.zeros((0, 0))
    except pd.errors.ParserError as e:
        raise ParseError(f"{path}: {e}", _line_from_message(str(e))) from e

    # trailing blank lines are ignored; interior ones keep their line numbers
    filled = np.flatnonzero(frame.notna().any(axis=1).to_numpy())
    if filled.size == 0:
        return np.zeros((0, 0))
    frame = frame.iloc[: int(filled[-1]) + 1]
    values = frame.apply(pd.to_numeric, errors="coerce").to_numpy(dtype=np.float64)
    bad = np.flatnonzero(~np.isfinite(values).all(axis=1))
    if bad.size:
        line = int(bad[0]) + 1
        raise ParseError(f"{path}: line {line} is not a complete numeric row", line)
    return values


def _line_from_message(message: str) -> int | None:
    found = re.search(r"line (\d+)", message)
    return int(found.group(1)) if found else None


def load_binarized_mnist(path, n_pixels: int = MNIST_PIXELS) -> Dataset:
    """
    One image per line, n_pixels space-separated values in {0, 1}.

    Raises ParseError with the 1-based line number of the first bad row.
    """
    Y = _read_text_matrix(path)
    if Y.size == 0:
        return Dataset(np.zeros((0, n_pixels)), DataKind.BINARY)
    if Y.shape[1] != n_pixels:
        raise ParseError(f"{path}: expected {n_pixels} values per line, found {Y.shape[1]}", 1)
    bad = np.flatnonzero(~np.isin(Y, (0.0, 1.0)).all(axis=1))
    if bad.size:
        line = int(bad[0]) + 1
        raise ParseError(f"{path}: line {line} holds a value other than 0 or 1", line)
    logger.info("loaded %d binarized images from %s", Y.shape[0], path)
    return Dataset(Y, DataKind.BINARY)


def load_matrix(path) -> Dataset:
    """Real-valued N x D matrix, whitespace separated, one row per line; no preprocessing."""
    Y = _read_text_matrix(path)
    logger.info("loaded %s matrix from %s", Y.shape, path)
    return Dataset(Y, DataKind.CONTINUOUS)


# -------------------------------------------------
# TVSD container
# -------------------------------------------------
def save_dataset(ds: Dataset, path) -> Path:
    truth = None
    if ds.ground_truth is not None:
        gt = ds.ground_truth
        truth = (gt.model_kind, gt.states, gt.params)
    return write_dataset(path, ds.Y, int(ds.kind), truth)


def load_dataset(path) -> Dataset:
    Y, kind_code, truth = read_dataset(path)
    try:
        kind = DataKind(kind_code)
    except ValueError as e:
        raise CorruptFileError(f"{path}: unknown dataset kind {kind_code}") from e
    ground_truth = None
    if truth is not None:
        model_kind, states, params = truth
        ground_truth = GroundTruth(model_kind, params, states)
    return Dataset(Y, kind, ground_truth)


def load_any(path, fmt: str = "auto") -> Dataset:
    """Dispatch on format; ``auto`` sniffs the TVSD magic and otherwise reads a text matrix."""
    path = Path(path)
    if fmt == "auto":
        with open(path, "rb") as handle:
            fmt = "tvsd" if handle.read(4) == b"TVSD" else "matrix"
    if fmt == "tvsd":
        return load_dataset(path)
    if fmt == "mnist":
        return load_binarized_mnist(path)
    if fmt == "matrix":
        return load_matrix(path)
    raise ValueError(f"unknown dataset format {fmt!r}")
