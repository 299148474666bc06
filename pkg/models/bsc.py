"""
Binary Sparse Coding: Bernoulli prior, linear Gaussian likelihood.

    p(s | pi)        = prod_h pi^{s_h} (1 - pi)^{1 - s_h}
    p(y | s, W, s2)  = N(y; W s, s2 I)

M-steps are closed form in the truncated expectations <s>, <s s^T>.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from models.contract import ModelContract
from services.config import GRAM_JITTER, PI_MIN, SIGMA2_MIN
from services.engine import VariationalState, iter_blocks, truncated_weights
from services.errors import DimensionError, SingularStatisticsError

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class BscParams:
    pi: float
    W: np.ndarray  # (D, H)
    sigma2: float

    @property
    def n_latents(self) -> int:
        return self.W.shape[1]

    @property
    def n_observed(self) -> int:
        return self.W.shape[0]


@dataclass(frozen=True)
class BscClamps:
    pi_min: float = PI_MIN
    sigma2_min: float = SIGMA2_MIN
    gram_jitter: float = GRAM_JITTER


@dataclass
class BscSuffStats:
    """Sums over datapoints of the truncated expectations the M-step needs."""

    sum_s: np.ndarray   # (H,)    sum_n <s>
    sum_ys: np.ndarray  # (D, H)  sum_n y <s>^T
    sum_ss: np.ndarray  # (H, H)  sum_n <s s^T>
    sum_yy: float       # sum_n |y|^2
    count: int

    def __add__(self, other: "BscSuffStats") -> "BscSuffStats":
        return BscSuffStats(
            self.sum_s + other.sum_s,
            self.sum_ys + other.sum_ys,
            self.sum_ss + other.sum_ss,
            self.sum_yy + other.sum_yy,
            self.count + other.count,
        )

    def sum_recon(self, W: np.ndarray) -> float:
        """sum_n <|y - W s|^2> = |y|^2 - 2 y^T W <s> + tr(W^T W <s s^T>)."""
        return float(self.sum_yy - 2.0 * np.sum(W * self.sum_ys) + np.sum((W.T @ W) * self.sum_ss))


def _clipped_pi(pi, pi_min):
    return float(np.clip(pi, pi_min, 1.0 - pi_min))


def bsc_log_joint(states, Y, p: BscParams, pi_min: float = PI_MIN) -> np.ndarray:
    """
    log p(s, y | theta) in nats.

    states (K, H) or (N, K, H) with Y (N, D) gives (N, K); a single state
    (H,) with a single datapoint (D,) gives a scalar.
    """
    states = np.asarray(states)
    Y = np.asarray(Y, dtype=np.float64)
    if states.ndim == 1 and Y.ndim == 1:
        return float(bsc_log_joint(states[None, :], Y[None, :], p, pi_min)[0, 0])
    if Y.ndim == 1:
        Y = Y[None, :]
    if states.shape[-1] != p.n_latents or Y.shape[-1] != p.n_observed:
        raise DimensionError(
            f"BSC with H={p.n_latents}, D={p.n_observed} got states {states.shape}, data {Y.shape}"
        )
    S = states.astype(np.float64)
    pi = _clipped_pi(p.pi, pi_min)
    n_on = S.sum(axis=-1)
    log_prior = n_on * math.log(pi) + (p.n_latents - n_on) * math.log1p(-pi)
    recon = S @ p.W.T
    resid = Y[:, None, :] - recon
    sq = np.einsum("nkd,nkd->nk", resid, resid)
    log_lik = -0.5 * p.n_observed * (LOG_2PI + math.log(p.sigma2)) - sq / (2.0 * p.sigma2)
    return log_prior + log_lik


def bsc_suff_stats(Y: np.ndarray, states: np.ndarray, log_joints: np.ndarray, offset: int = 0) -> BscSuffStats:
    """Sufficient statistics of one block of datapoints under its truncated posteriors."""
    weights = truncated_weights(log_joints, offset)
    S = states.astype(np.float64)
    H = S.shape[-1]
    mean_s = np.einsum("bk,bkh->bh", weights, S)
    weighted = (S * weights[:, :, None]).reshape(-1, H)
    return BscSuffStats(
        sum_s=mean_s.sum(axis=0),
        sum_ys=Y.T @ mean_s,
        sum_ss=weighted.T @ S.reshape(-1, H),
        sum_yy=float(np.sum(Y * Y)),
        count=Y.shape[0],
    )


def bsc_collect_stats(Y: np.ndarray, vstate: VariationalState) -> BscSuffStats:
    """Block-wise reduction, summed in block order."""
    H = vstate.n_latents
    total = BscSuffStats(np.zeros(H), np.zeros((Y.shape[1], H)), np.zeros((H, H)), 0.0, 0)
    for start, stop in iter_blocks(Y.shape[0]):
        total = total + bsc_suff_stats(
            Y[start:stop], vstate.states[start:stop], vstate.log_joints[start:stop], start
        )
    return total


def bsc_m_step(stats: BscSuffStats, clamps: BscClamps = BscClamps()) -> BscParams:
    """
    Closed-form updates.

    pi = sum <s_h> / (N H); W solves W (sum <s s^T> + eps I) = sum y <s>^T
    with eps = jitter * tr(sum <s s^T>) / H; sigma2 uses the new W.
    """
    H = stats.sum_s.shape[0]
    D = stats.sum_ys.shape[0]
    if stats.count == 0:
        raise SingularStatisticsError("M-step over zero datapoints")
    pi = _clipped_pi(stats.sum_s.sum() / (stats.count * H), clamps.pi_min)

    gram = 0.5 * (stats.sum_ss + stats.sum_ss.T)
    eps = clamps.gram_jitter * np.trace(gram) / H
    gram = gram + eps * np.eye(H)
    try:
        W = linalg.solve(gram, stats.sum_ys.T, assume_a="pos").T
    except (linalg.LinAlgError, ValueError) as e:
        raise SingularStatisticsError(f"Gram matrix not solvable: {e}") from e
    if not np.all(np.isfinite(W)):
        raise SingularStatisticsError("W update is not finite")

    sigma2 = max(stats.sum_recon(W) / (stats.count * D), clamps.sigma2_min)
    return BscParams(pi=pi, W=W, sigma2=sigma2)


def bsc_generate(p: BscParams, N: int, rng: np.random.Generator):
    """Draw (Y, S): s ~ Bernoulli(pi)^H, y = W s + N(0, sigma2 I)."""
    S = (rng.random((N, p.n_latents)) < p.pi).astype(np.uint8)
    noise = rng.normal(0.0, math.sqrt(p.sigma2), (N, p.n_observed))
    return S @ p.W.T + noise, S


def bsc_init(Y, H: int, rng: np.random.Generator, clamps: BscClamps = BscClamps()) -> BscParams:
    """
    sigma2 = mean per-dimension data variance; pi = 1/H; every W column is the
    mean datapoint plus zero-mean Gaussian noise of std sigma/4.
    """
    Y = np.asarray(Y, dtype=np.float64)
    sigma2 = max(float(Y.var(axis=0).mean()), clamps.sigma2_min)
    mean = Y.mean(axis=0)
    W = mean[:, None] + rng.normal(0.0, math.sqrt(sigma2) / 4.0, (Y.shape[1], H))
    return BscParams(pi=1.0 / H, W=W, sigma2=sigma2)


class BinarySparseCoding(ModelContract):
    kind = "bsc"

    def __init__(self, params: BscParams, clamps: BscClamps = BscClamps()):
        self.params = params
        self.clamps = clamps

    @property
    def n_latents(self) -> int:
        return self.params.n_latents

    @property
    def n_observed(self) -> int:
        return self.params.n_observed

    @property
    def dictionary(self) -> np.ndarray:
        return self.params.W

    def log_joint(self, states, Y):
        return bsc_log_joint(states, Y, self.params, self.clamps.pi_min)

    def sample_prior(self, n, rng):
        return (rng.random((n, self.n_latents)) < self.params.pi).astype(np.uint8)

    def m_step(self, Y, vstate, iteration=0):
        return BinarySparseCoding(bsc_m_step(bsc_collect_stats(Y, vstate), self.clamps), self.clamps)

    def scalars(self):
        return {"sigma2": self.params.sigma2, "pi_H": self.params.pi * self.n_latents}

    def to_arrays(self):
        return {
            "pi": np.array([self.params.pi]),
            "W": self.params.W,
            "sigma2": np.array([self.params.sigma2]),
        }

    def options(self):
        return {
            "pi_min": self.clamps.pi_min,
            "sigma2_min": self.clamps.sigma2_min,
            "gram_jitter": self.clamps.gram_jitter,
        }

    @classmethod
    def from_arrays(cls, arrays, **options):
        params = BscParams(
            pi=float(arrays["pi"].ravel()[0]),
            W=np.asarray(arrays["W"], dtype=np.float64),
            sigma2=float(arrays["sigma2"].ravel()[0]),
        )
        return cls(params, BscClamps(**options))


def bsc_exact_loglik(p: BscParams, Y, pi_min: float = PI_MIN) -> float:
    """Exact log-likelihood by enumerating all 2^H states (H <= 20)."""
    return BinarySparseCoding(p, BscClamps(pi_min=pi_min)).exact_log_likelihood(Y)
