# checkpoint.py
"""
Checkpoint directories:

    model.params    TVSP container (model kind + named parameter arrays)
    ksets.tvsk      TVSK container (state sets)
    amortizer.net   TVSA container, only for amortized runs
    progress.json   kind, iteration, seed, model options, experiment config

The iteration counter doubles as the RNG stream position.
"""
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from models.bsc import BinarySparseCoding
from models.sbn import SigmoidBeliefNet
from services.engine import VariationalState, refresh_log_joints
from services.errors import CorruptFileError
from utils.binary_io import read_ksets, read_net, read_params, write_ksets, write_net, write_params
from utils.file_utils import atomic_write_bytes

logger = logging.getLogger(__name__)

MODEL_TYPES = {
    BinarySparseCoding.kind: BinarySparseCoding,
    SigmoidBeliefNet.kind: SigmoidBeliefNet,
}

PARAMS_FILE = "model.params"
KSETS_FILE = "ksets.tvsk"
NET_FILE = "amortizer.net"
PROGRESS_FILE = "progress.json"


@dataclass
class Checkpoint:
    model: object
    states: object  # (N, S, H) uint8, or None for a params-only checkpoint
    amortizer: object
    iteration: int
    seed: int
    config: dict


def save_checkpoint(path, model, vstate=None, amortizer=None, iteration=0, seed=0, config=None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    write_params(path / PARAMS_FILE, model.kind, model.to_arrays())
    if vstate is not None:
        write_ksets(path / KSETS_FILE, vstate.states)
    if amortizer is not None:
        write_net(path / NET_FILE, amortizer)
    progress = {
        "kind": model.kind,
        "iteration": int(iteration),
        "seed": int(seed),
        "options": model.options(),
        "config": config or {},
    }
    # progress last: a checkpoint without it is incomplete
    atomic_write_bytes(path / PROGRESS_FILE, json.dumps(progress, indent=2).encode("utf-8"))
    logger.debug("checkpoint written to %s at iteration %d", path, iteration)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    progress_path = path / PROGRESS_FILE
    if not progress_path.exists():
        raise CorruptFileError(f"{path} is not a checkpoint (missing {PROGRESS_FILE})")
    try:
        progress = json.loads(progress_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise CorruptFileError(f"{progress_path}: {e}") from e

    kind, arrays = read_params(path / PARAMS_FILE)
    if kind != progress.get("kind"):
        raise CorruptFileError(f"{path}: params say {kind!r}, progress says {progress.get('kind')!r}")
    if kind not in MODEL_TYPES:
        raise CorruptFileError(f"{path}: unknown model kind {kind!r}")
    try:
        model = MODEL_TYPES[kind].from_arrays(arrays, **progress.get("options", {}))
    except (KeyError, TypeError) as e:
        raise CorruptFileError(f"{path}: parameter arrays do not fit a {kind} model ({e})") from e

    states = read_ksets(path / KSETS_FILE) if (path / KSETS_FILE).exists() else None
    amortizer = read_net(path / NET_FILE) if (path / NET_FILE).exists() else None
    return Checkpoint(
        model=model,
        states=states,
        amortizer=amortizer,
        iteration=int(progress.get("iteration", 0)),
        seed=int(progress.get("seed", 0)),
        config=progress.get("config", {}),
    )


def restore_vstate(ckpt: Checkpoint, data) -> VariationalState:
    """Rebuild the variational state of a checkpoint against its data (joints recomputed)."""
    if ckpt.states is None:
        raise CorruptFileError("checkpoint holds no state sets")
    empty = VariationalState(ckpt.states, np.zeros(ckpt.states.shape[:2]), iteration=ckpt.iteration)
    vstate = refresh_log_joints(empty, ckpt.model, data)
    vstate.iteration = ckpt.iteration
    return vstate
