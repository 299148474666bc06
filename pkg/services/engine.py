# engine.py
"""
Truncated variational EM machinery.

Each datapoint n owns a set K^(n) of S unique binary latent states; the
variational distribution is the model posterior restricted to and
renormalized on that set. The partial E-step proposes new states, merges
them with the incumbents and keeps the S states with the largest joint
p(s, y | theta), which can never lower the truncated free energy

    F(K, theta) = sum_n logsumexp_{s in K^(n)} log p(s, y^(n) | theta).
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable, Iterable, Sequence

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.special import logsumexp

from services.config import BLOCK_SIZE, DEDUP_RETRY_CAP, AMORTIZER_REFRESH
from services.errors import (
    ConfigError,
    ContractError,
    DegenerateJointError,
    DimensionError,
    FitError,
    TvsError,
)

if TYPE_CHECKING:
    from models.contract import ModelContract
    from services.amortizer import AmortizerNet
    from services.samplers import SamplerBundle

logger = logging.getLogger(__name__)

# RNG stream tags; a stream is SeedSequence(seed, spawn_key=(tag, a, b))
STREAM_DATA = 1
STREAM_MODEL_INIT = 2
STREAM_INIT = 3
STREAM_FIT = 4
STREAM_AMORTIZER = 5
STREAM_EVAL_INIT = 6
STREAM_EVAL = 7
STREAM_AMORTIZER_INIT = 8
STREAM_KEY_LENGTH = 3


# -------------------------------------------------
# Latent states
# -------------------------------------------------
def n_words(n_bits: int) -> int:
    """Number of 64-bit words needed to hold n_bits."""
    return max(1, -(-n_bits // 64))


def pack_states(bits) -> np.ndarray:
    """Pack a (..., H) binary array into (..., n_words(H)) little-endian uint64 words."""
    bits = np.asarray(bits, dtype=np.uint8)
    packed = np.packbits(bits, axis=-1, bitorder="little")
    n_bytes = n_words(bits.shape[-1]) * 8
    pad = n_bytes - packed.shape[-1]
    if pad:
        packed = np.concatenate(
            [packed, np.zeros(packed.shape[:-1] + (pad,), dtype=np.uint8)], axis=-1
        )
    return np.ascontiguousarray(packed).view("<u8").astype(np.uint64)


def unpack_states(words, n_bits: int) -> np.ndarray:
    """Inverse of pack_states."""
    words = np.ascontiguousarray(np.asarray(words).astype("<u8"))
    raw = words.view(np.uint8)
    return np.unpackbits(raw, axis=-1, count=n_bits, bitorder="little")


def all_states(n_bits: int) -> np.ndarray:
    """All 2^H states as a (2^H, H) uint8 array; row i is the binary expansion of i."""
    index = np.arange(2 ** n_bits, dtype=np.uint64)
    shifts = np.arange(n_bits, dtype=np.uint64)
    return ((index[:, None] >> shifts[None, :]) & np.uint64(1)).astype(np.uint8)


@dataclass(frozen=True)
class LatentState:
    """One binary latent vector, stored packed so equality and hashing are word-wise."""

    words: bytes
    n_bits: int

    @classmethod
    def from_bits(cls, bits) -> "LatentState":
        arr = np.asarray(bits)
        if arr.ndim != 1:
            raise ContractError(f"a latent state is a 1-D vector, got shape {arr.shape}")
        if arr.size and not np.isin(arr, (0, 1)).all():
            raise ContractError("latent state entries must be 0 or 1")
        return cls(pack_states(arr.astype(np.uint8)).tobytes(), int(arr.shape[0]))

    def to_array(self) -> np.ndarray:
        return unpack_states(np.frombuffer(self.words, dtype="<u8"), self.n_bits)

    def __len__(self) -> int:
        return self.n_bits


def as_state_array(states, n_bits: int | None = None) -> np.ndarray:
    """Coerce an (M, H) array or a sequence of LatentState into an (M, H) uint8 array."""
    if isinstance(states, np.ndarray):
        arr = states.astype(np.uint8, copy=False)
        if arr.ndim == 1:
            arr = arr[None, :]
    else:
        states = list(states)
        if not states:
            return np.zeros((0, n_bits or 0), dtype=np.uint8)
        arr = np.stack([s.to_array() if isinstance(s, LatentState) else np.asarray(s, np.uint8)
                        for s in states])
    if n_bits is not None and arr.shape[-1] != n_bits:
        raise DimensionError(f"states have {arr.shape[-1]} bits, expected {n_bits}")
    return arr


# -------------------------------------------------
# State sets
# -------------------------------------------------
@dataclass
class StateSet:
    """K^(n): S unique states (rows) with their cached log-joints in nats."""

    states: np.ndarray
    log_joints: np.ndarray
    capacity: int

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def n_latents(self) -> int:
        return self.states.shape[1]


@dataclass
class VariationalState:
    """K = (K^(1), ..., K^(N)) stored as dense (N, S, H) states and (N, S) log-joints."""

    states: np.ndarray
    log_joints: np.ndarray
    free_energy: float = -math.inf
    iteration: int = 0

    def __post_init__(self):
        if self.states.ndim != 3 or self.log_joints.shape != self.states.shape[:2]:
            raise DimensionError(
                f"states {self.states.shape} and log_joints {self.log_joints.shape} disagree"
            )

    def __len__(self) -> int:
        return self.states.shape[0]

    def __getitem__(self, n: int) -> StateSet:
        return StateSet(self.states[n], self.log_joints[n], self.capacity)

    @property
    def capacity(self) -> int:
        return self.states.shape[1]

    @property
    def n_latents(self) -> int:
        return self.states.shape[2]


# -------------------------------------------------
# Config
# -------------------------------------------------
@dataclass(frozen=True)
class ScheduleEntry:
    """M_p / M_q over iterations [start, stop); optional end values ramp linearly."""

    start: int
    stop: int
    m_p: int
    m_q: int
    m_p_end: int | None = None
    m_q_end: int | None = None

    def counts(self, iteration: int) -> tuple[int, int]:
        if self.m_p_end is None and self.m_q_end is None:
            return self.m_p, self.m_q
        p_end = self.m_p if self.m_p_end is None else self.m_p_end
        q_end = self.m_q if self.m_q_end is None else self.m_q_end
        span = max(self.stop - self.start, 1)
        frac = (iteration - self.start) / span
        m_p = int(round(self.m_p + frac * (p_end - self.m_p)))
        total = int(round((self.m_p + self.m_q) + frac * ((p_end + q_end) - (self.m_p + self.m_q))))
        return m_p, max(total - m_p, 0)


def parse_schedule(text: str) -> list[ScheduleEntry]:
    """
    Parse ``start:stop:m_p:m_q[:m_p_end:m_q_end]`` entries separated by ';'.

    Example: ``0:100:200:0;100:200:200:0:0:200`` is 100 prior-only iterations
    followed by a linear hand-over to marginal samples.
    """
    entries = []
    for chunk in filter(None, (c.strip() for c in str(text).split(";"))):
        parts = chunk.split(":")
        if len(parts) not in (4, 6):
            raise ConfigError(f"schedule entry {chunk!r} needs 4 or 6 ':'-separated integers")
        try:
            values = [int(p) for p in parts]
        except ValueError as e:
            raise ConfigError(f"schedule entry {chunk!r} is not numeric") from e
        entries.append(ScheduleEntry(*values))
    return entries


@dataclass
class TvsConfig:
    """Sampler sizes, schedule and seeds of one TVS run."""

    n_states: int
    schedule: list[ScheduleEntry]
    total_iterations: int
    rng_seed: int = 0
    dedup_retry_cap: int = DEDUP_RETRY_CAP
    amortizer_enabled: bool = False
    amortizer_refresh_period: int = AMORTIZER_REFRESH

    def __post_init__(self):
        self.validate()

    @classmethod
    def uniform(cls, n_states: int, m_p: int, m_q: int, total_iterations: int, **kwargs) -> "TvsConfig":
        stop = max(total_iterations, 1)
        return cls(n_states, [ScheduleEntry(0, stop, m_p, m_q)], total_iterations, **kwargs)

    def validate(self):
        if self.n_states < 1:
            raise ConfigError("S must be >= 1")
        if self.total_iterations < 0:
            raise ConfigError("total_iterations must be >= 0")
        if self.dedup_retry_cap < 0:
            raise ConfigError("dedup_retry_cap must be >= 0")
        if self.amortizer_refresh_period < 1:
            raise ConfigError("amortizer_refresh_period must be >= 1")
        cursor = 0
        for entry in sorted(self.schedule, key=lambda e: e.start):
            if entry.start != cursor:
                raise ConfigError(
                    f"schedule gap or overlap at iteration {cursor} (next entry starts at {entry.start})"
                )
            if entry.stop <= entry.start:
                raise ConfigError(f"empty schedule range [{entry.start}, {entry.stop})")
            ends = [(entry.m_p, entry.m_q)]
            if entry.m_p_end is not None or entry.m_q_end is not None:
                ends.append((
                    entry.m_p if entry.m_p_end is None else entry.m_p_end,
                    entry.m_q if entry.m_q_end is None else entry.m_q_end,
                ))
            for m_p, m_q in ends:
                if m_p < 0 or m_q < 0 or m_p + m_q < 1:
                    raise ConfigError(f"schedule entry {entry} needs M_p, M_q >= 0 and M_p + M_q >= 1")
            cursor = entry.stop
        if cursor < self.total_iterations:
            raise ConfigError(f"schedule ends at {cursor} but total_iterations={self.total_iterations}")

    def sample_counts(self, iteration: int) -> tuple[int, int]:
        """(M_p, M_q) for a 0-based iteration (the sampler adjustment)."""
        for entry in self.schedule:
            if entry.start <= iteration < entry.stop:
                return entry.counts(iteration)
        raise ConfigError(f"no schedule entry covers iteration {iteration}")


# -------------------------------------------------
# Truncated expectations and free energy
# -------------------------------------------------
def _check_degenerate(log_joints: np.ndarray, offset: int = 0):
    dead = np.isneginf(log_joints).all(axis=-1) | (log_joints.shape[-1] == 0)
    if np.any(dead):
        index = int(np.flatnonzero(np.atleast_1d(dead))[0]) + offset
        raise DegenerateJointError(
            f"datapoint {index}: every state in its set has zero joint probability", index
        )


def truncated_weights(log_joints: np.ndarray, offset: int = 0) -> np.ndarray:
    """Posterior weights restricted to each set, normalized in the log domain."""
    log_joints = np.asarray(log_joints, dtype=np.float64)
    _check_degenerate(log_joints, offset)
    norm = logsumexp(log_joints, axis=-1, keepdims=True)
    return np.exp(log_joints - norm)


def truncated_expectation(g: Callable[[np.ndarray], np.ndarray], kset: StateSet) -> np.ndarray:
    """
    Sum over s in K of w(s) g(s), w the truncated posterior.

    ``g`` receives the whole (S, H) state array and returns one row per state.
    """
    if len(kset) == 0:
        raise ContractError("truncated expectation over an empty state set")
    weights = truncated_weights(kset.log_joints)
    values = np.asarray(g(kset.states), dtype=np.float64)
    if values.shape[0] != len(kset):
        raise DimensionError(f"g returned {values.shape[0]} rows for {len(kset)} states")
    return np.tensordot(weights, values, axes=1)


def free_energy(vstate: VariationalState, model: "ModelContract | None" = None, data=None) -> float:
    """
    Truncated free energy in nats.

    Uses the cached log-joints unless a model and data are given, in which
    case joints are recomputed under the model's current parameters.
    """
    if vstate.capacity == 0:
        raise ContractError("free energy over empty state sets")
    if model is not None:
        if data is None:
            raise ContractError("free_energy needs data when a model is given")
        log_joints = _compute_log_joints(model, vstate.states, _as_matrix(data))
    else:
        log_joints = vstate.log_joints
    _check_degenerate(log_joints)
    per_point = logsumexp(log_joints, axis=1)
    return math.fsum(per_point.tolist())


# -------------------------------------------------
# Partial E-step
# -------------------------------------------------
def _tie_order(keys: np.ndarray, is_proposal: np.ndarray) -> np.ndarray:
    """Order tied candidates: incumbents first, then lexicographically by packed words."""
    sort_keys = [keys[:, w] for w in range(keys.shape[1] - 1, -1, -1)]
    sort_keys.append(is_proposal)
    return np.lexsort(sort_keys)


def _select_row(log_joints, valid, keys, is_proposal, capacity) -> np.ndarray:
    """Indices of the top-`capacity` valid candidates of one datapoint."""
    masked = np.where(valid, log_joints, -np.inf)
    n_valid = int(valid.sum())
    if n_valid <= capacity:
        return np.flatnonzero(valid)
    total = masked.shape[0]
    threshold = np.partition(masked, total - capacity)[total - capacity]
    above = masked > threshold
    tied = np.flatnonzero(valid & (masked == threshold))
    need = capacity - int(above.sum())
    order = _tie_order(keys[tied], is_proposal[tied])
    chosen = above.copy()
    chosen[tied[order[:need]]] = True
    return np.flatnonzero(chosen)


def select_block(states, log_joints, proposals, proposal_log_joints):
    """
    Merge proposals into a block of state sets and keep the top S by log-joint.

    states: (B, S, H); log_joints: (B, S); proposals: (B, M, H);
    proposal_log_joints: (B, M). Duplicates (of incumbents or earlier
    proposals) are dropped before selection. The threshold is found with a
    linear-time partition; only rows with ties at the threshold pay for a sort.
    """
    n_block, capacity, _ = states.shape
    if proposals.shape[1] == 0:
        return states, log_joints

    inc_words = pack_states(states)
    prop_words = pack_states(proposals)
    dup_incumbent = (prop_words[:, :, None, :] == inc_words[:, None, :, :]).all(-1).any(-1)
    same = (prop_words[:, :, None, :] == prop_words[:, None, :, :]).all(-1)
    n_prop = proposals.shape[1]
    earlier = np.tril(np.ones((n_prop, n_prop), dtype=bool), k=-1)
    dup_within = (same & earlier[None]).any(-1)

    cand_states = np.concatenate([states, proposals.astype(np.uint8, copy=False)], axis=1)
    cand_lj = np.concatenate([log_joints, proposal_log_joints], axis=1)
    valid = np.concatenate(
        [np.ones((n_block, capacity), dtype=bool), ~(dup_incumbent | dup_within)], axis=1
    )
    masked = np.where(valid, cand_lj, -np.inf)

    total = masked.shape[1]
    threshold = np.partition(masked, total - capacity, axis=1)[:, total - capacity]
    above = masked > threshold[:, None]
    tied = valid & (masked == threshold[:, None])
    need = capacity - above.sum(axis=1)
    chosen = above | tied
    ambiguous = np.flatnonzero(tied.sum(axis=1) != need)
    if ambiguous.size:
        words = np.concatenate([inc_words, prop_words], axis=1)
        is_proposal = np.arange(total) >= capacity
        for row in ambiguous:
            picked = _select_row(cand_lj[row], valid[row], words[row], is_proposal, capacity)
            chosen[row] = False
            chosen[row, picked] = True

    cols = np.nonzero(chosen)[1].reshape(n_block, capacity)
    new_states = np.take_along_axis(cand_states, cols[:, :, None], axis=1)
    new_lj = np.take_along_axis(cand_lj, cols, axis=1)
    return new_states, new_lj


def tv_e_step(kset: StateSet, proposals, model: "ModelContract", y) -> StateSet:
    """
    Sampling-based partial E-step for one datapoint.

    Scores the proposals, merges them with the incumbents and keeps the S
    states with the largest joint. The result has exactly S unique states
    and its logsumexp never decreases.
    """
    if len(kset) != kset.capacity:
        raise ContractError(f"state set holds {len(kset)} states, capacity is {kset.capacity}")
    props = as_state_array(proposals, kset.n_latents)
    y = np.asarray(y, dtype=np.float64)
    if props.shape[0] == 0:
        return StateSet(kset.states.copy(), kset.log_joints.copy(), kset.capacity)
    prop_lj = model.log_joint(props, y[None, :])[0]
    new_states, new_lj = select_block(
        kset.states[None], kset.log_joints[None], props[None], prop_lj[None]
    )
    return StateSet(new_states[0], new_lj[0], kset.capacity)


# -------------------------------------------------
# Blocks and RNG streams
# -------------------------------------------------
def iter_blocks(n_rows: int, size: int = BLOCK_SIZE) -> list[tuple[int, int]]:
    return [(start, min(start + size, n_rows)) for start in range(0, n_rows, size)]


def block_rng(seed: int, tag: int, *key: int) -> np.random.Generator:
    """
    Independent stream keyed by (seed, tag, *key); order of use does not matter.

    The spawn key is zero-padded to a fixed length, so (tag, 5) and (tag, 5, 0)
    name the same stream and nothing else does.
    """
    if len(key) >= STREAM_KEY_LENGTH:
        raise ValueError(f"stream key {key} longer than {STREAM_KEY_LENGTH - 1}")
    spawn_key = (int(tag), *(int(k) for k in key))
    spawn_key += (0,) * (STREAM_KEY_LENGTH - len(spawn_key))
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=spawn_key))


def _run_blocks(parallel: Parallel | None, func, blocks):
    if parallel is None:
        return [func(*b) for b in blocks]
    return parallel(delayed(func)(*b) for b in blocks)


def _as_matrix(data) -> np.ndarray:
    Y = getattr(data, "Y", data)
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim != 2:
        raise DimensionError(f"data must be an N x D matrix, got shape {Y.shape}")
    return Y


def _compute_log_joints(model, states, Y, parallel=None) -> np.ndarray:
    blocks = iter_blocks(Y.shape[0])
    parts = _run_blocks(parallel, lambda a, b: model.log_joint(states[a:b], Y[a:b]), blocks)
    if not parts:
        return np.zeros(states.shape[:2])
    return np.concatenate(parts, axis=0)


# -------------------------------------------------
# Initialization and refresh
# -------------------------------------------------
def _fallback_states(n_bits: int) -> Iterable[np.ndarray]:
    """Zero state, one-hot states, then two-hot, ... each in index order."""
    for weight in range(n_bits + 1):
        for on in itertools.combinations(range(n_bits), weight):
            state = np.zeros(n_bits, dtype=np.uint8)
            state[list(on)] = 1
            yield state


def _unique_prior_states(model, capacity: int, retry_cap: int, rng) -> np.ndarray:
    seen: dict[bytes, np.ndarray] = {}
    failures = 0
    while len(seen) < capacity and failures < retry_cap:
        for row in model.sample_prior(capacity - len(seen), rng):
            key = row.tobytes()
            if key in seen:
                failures += 1
            else:
                seen[key] = row
    if len(seen) < capacity:
        for row in _fallback_states(model.n_latents):
            key = row.tobytes()
            if key not in seen:
                seen[key] = row
                if len(seen) == capacity:
                    break
    return np.stack(list(seen.values())).astype(np.uint8)


def init_ksets(model: "ModelContract", cfg: TvsConfig, data, rng: np.random.Generator | None = None,
               parallel: Parallel | None = None, stream: int = STREAM_INIT) -> VariationalState:
    """
    Fill each K^(n) with S unique prior samples.

    Duplicates are redrawn; after ``dedup_retry_cap`` duplicate draws the
    remaining slots take the zero state, one-hot states, two-hot states, ...
    in index order. Without an explicit ``rng`` every block of datapoints
    gets its own stream keyed by its start index.
    """
    Y = _as_matrix(data)
    H, S = model.n_latents, cfg.n_states
    if H < 63 and S > 2 ** H:
        raise ConfigError(f"S={S} exceeds the 2^H={2 ** H} available states")
    model.check_data(Y)

    def fill(start, stop):
        local = rng if rng is not None else block_rng(cfg.rng_seed, stream, start)
        return np.stack([
            _unique_prior_states(model, S, cfg.dedup_retry_cap, local) for _ in range(start, stop)
        ]) if stop > start else np.zeros((0, S, H), dtype=np.uint8)

    blocks = iter_blocks(Y.shape[0])
    if rng is not None:
        parts = [fill(a, b) for a, b in blocks]
    else:
        parts = _run_blocks(parallel, fill, blocks)
    states = np.concatenate(parts, axis=0) if parts else np.zeros((0, S, H), dtype=np.uint8)
    log_joints = _compute_log_joints(model, states, Y, parallel)
    vstate = VariationalState(states, log_joints)
    logger.debug("initialized %d state sets of size %d", len(vstate), S)
    return vstate


def refresh_log_joints(vstate: VariationalState, model: "ModelContract", data,
                       parallel: Parallel | None = None) -> VariationalState:
    """Recompute every cached log-joint under the model's current parameters."""
    Y = _as_matrix(data)
    log_joints = _compute_log_joints(model, vstate.states, Y, parallel)
    return VariationalState(vstate.states, log_joints, vstate.free_energy, vstate.iteration)


def e_step_sweep(vstate: VariationalState, model: "ModelContract", Y: np.ndarray,
                 sampler: "SamplerBundle", m_p: int, m_q: int, seed: int, key: Sequence[int],
                 marginal_probs: np.ndarray | None = None,
                 parallel: Parallel | None = None) -> VariationalState:
    """One TV-E-step over all datapoints at fixed parameters."""

    def step(start, stop):
        rng = block_rng(seed, *key, start)
        states = vstate.states[start:stop]
        log_joints = vstate.log_joints[start:stop]
        probs = None if marginal_probs is None else marginal_probs[start:stop]
        proposals = sampler.propose_block(model, states, log_joints, m_p, m_q, rng, probs, offset=start)
        if proposals.shape[1] == 0:
            return states, log_joints
        prop_lj = model.log_joint(proposals, Y[start:stop])
        return select_block(states, log_joints, proposals, prop_lj)

    parts = _run_blocks(parallel, step, iter_blocks(Y.shape[0]))
    states = np.concatenate([p[0] for p in parts], axis=0)
    log_joints = np.concatenate([p[1] for p in parts], axis=0)
    return VariationalState(states, log_joints, vstate.free_energy, vstate.iteration)


def block_marginals(vstate: VariationalState) -> np.ndarray:
    """Truncated marginals <s>_q for every datapoint, shape (N, H)."""
    parts = []
    for start, stop in iter_blocks(len(vstate)):
        weights = truncated_weights(vstate.log_joints[start:stop], offset=start)
        parts.append(np.einsum("bs,bsh->bh", weights, vstate.states[start:stop].astype(np.float64)))
    if not parts:
        return np.zeros((0, vstate.n_latents))
    return np.clip(np.concatenate(parts, axis=0), 0.0, 1.0)


# -------------------------------------------------
# TVS fit loop
# -------------------------------------------------
@dataclass
class FitResult:
    model: "ModelContract"
    trajectory: pd.DataFrame
    vstate: VariationalState
    amortizer: "AmortizerNet | None" = None
    final_free_energy: float = -math.inf


def _trajectory_row(iteration, free_energy_value, model, m_p, m_q) -> dict:
    row = {"iteration": iteration, "free_energy": free_energy_value}
    row.update(model.scalars())
    row["m_p"] = m_p
    row["m_q"] = m_q
    return row


def tvs_fit(data, model: "ModelContract", cfg: TvsConfig, sampler_bundle: "SamplerBundle | None" = None,
            *, threads: int = 1, vstate: VariationalState | None = None,
            amortizer: "AmortizerNet | None" = None,
            on_row: Callable[[dict], None] | None = None,
            on_iteration_end: Callable[[int, "ModelContract", VariationalState, "AmortizerNet | None"], None] | None = None,
            ) -> FitResult:
    """
    Truncated Variational Sampling.

    Every iteration: adjust (M_p, M_q) per the schedule, draw proposals for
    each datapoint from the prior and from the marginal source, run the
    partial E-step, log the free energy, run the M-step and refresh cached
    joints. Passing ``vstate`` (with its ``iteration`` counter) resumes a run;
    RNG streams are keyed by iteration so a resumed run continues bitwise.
    """
    from services.samplers import MarginalSource, SamplerBundle
    from services.amortizer import AmortizerNet, amortizer_forward, amortizer_train

    Y = _as_matrix(data)
    if Y.shape[0] == 0:
        raise ContractError("tvs_fit needs at least one datapoint")
    model.check_data(Y)
    sampler = sampler_bundle or SamplerBundle()
    amortized = cfg.amortizer_enabled or sampler.marginal_source == MarginalSource.AMORTIZED
    rows: list[dict] = []

    def emit(row):
        rows.append(row)
        if on_row is not None:
            on_row(row)

    with Parallel(n_jobs=threads, prefer="threads") as pool:
        parallel = pool if threads > 1 else None
        if vstate is None:
            vstate = init_ksets(model, cfg, Y, parallel=parallel)
            vstate.free_energy = free_energy(vstate)
            emit(_trajectory_row(0, vstate.free_energy, model, 0, 0))
            logger.info("initial free energy %.6f", vstate.free_energy)
        else:
            vstate = refresh_log_joints(vstate, model, Y, parallel)
            if vstate.capacity != cfg.n_states:
                raise ConfigError(f"resumed state sets have S={vstate.capacity}, config says {cfg.n_states}")

        if amortized and amortizer is None:
            amortizer = sampler.amortizer or AmortizerNet.init(
                Y.shape[1], model.n_latents, sampler.amortizer_hidden,
                block_rng(cfg.rng_seed, STREAM_AMORTIZER_INIT),
            )

        for it in range(vstate.iteration, cfg.total_iterations):
            m_p, m_q = cfg.sample_counts(it)
            probs = None
            if amortized:
                if it % cfg.amortizer_refresh_period == 0:
                    amortizer = amortizer_train(
                        amortizer, Y, block_marginals(vstate), sampler.train_options,
                        block_rng(cfg.rng_seed, STREAM_AMORTIZER, it),
                    )
                probs = amortizer_forward(amortizer, Y)

            vstate = e_step_sweep(vstate, model, Y, sampler, m_p, m_q, cfg.rng_seed,
                                  (STREAM_FIT, it), probs, parallel)
            vstate.free_energy = free_energy(vstate)
            row = _trajectory_row(it + 1, vstate.free_energy, model, m_p, m_q)
            emit(row)
            logger.info(
                "iteration %d  F=%.6f  M_p=%d M_q=%d  %s", it + 1, vstate.free_energy, m_p, m_q,
                "  ".join(f"{k}={v:.5g}" for k, v in model.scalars().items()),
            )

            try:
                model = model.m_step(Y, vstate, iteration=it)
            except TvsError as e:
                raise FitError(str(e), it + 1) from e
            vstate = refresh_log_joints(vstate, model, Y, parallel)
            vstate.iteration = it + 1
            if on_iteration_end is not None:
                on_iteration_end(it + 1, model, vstate, amortizer)

    final = free_energy(vstate)
    vstate.free_energy = final
    return FitResult(model, pd.DataFrame(rows), vstate, amortizer, final)


def tvs_evaluate(data, model: "ModelContract", cfg: TvsConfig, e_steps: int,
                 sampler_bundle: "SamplerBundle | None" = None, *, threads: int = 1,
                 amortizer: "AmortizerNet | None" = None) -> tuple[pd.DataFrame, VariationalState]:
    """
    Free energy of held-out data at fixed parameters.

    Fresh state sets are initialized from the prior and improved by
    ``e_steps`` TV-E-steps with the sample counts of the schedule's last
    iteration. Returns the curve (step, free_energy, per_datapoint) with
    step 0 the initial sets, and the final variational state.
    """
    from services.samplers import SamplerBundle
    from services.amortizer import amortizer_forward

    Y = _as_matrix(data)
    if Y.shape[0] == 0:
        raise ContractError("evaluation needs at least one datapoint")
    model.check_data(Y)
    sampler = sampler_bundle or SamplerBundle()
    m_p, m_q = cfg.sample_counts(max(cfg.total_iterations - 1, 0))
    probs = amortizer_forward(amortizer, Y) if amortizer is not None else None
    rows = []

    with Parallel(n_jobs=threads, prefer="threads") as pool:
        parallel = pool if threads > 1 else None
        vstate = init_ksets(model, cfg, Y, parallel=parallel, stream=STREAM_EVAL_INIT)
        for step in range(e_steps + 1):
            if step:
                vstate = e_step_sweep(vstate, model, Y, sampler, m_p, m_q, cfg.rng_seed,
                                      (STREAM_EVAL, step), probs, parallel)
            vstate.free_energy = free_energy(vstate)
            rows.append({
                "step": step,
                "free_energy": vstate.free_energy,
                "per_datapoint": vstate.free_energy / Y.shape[0],
            })
            logger.debug("evaluation step %d  F=%.6f", step, vstate.free_energy)
    return pd.DataFrame(rows), vstate
