# samplers.py
"""
Proposal distributions for the partial E-step: the model prior
(data-independent exploration) and per-latent Bernoulli marginals
(data-driven exploitation), the latter either from the truncated posterior
of each datapoint or from a trained amortizer.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, Callable

import numpy as np

from services.config import AMORTIZER_HIDDEN, MARGINAL_CLAMP
from services.engine import StateSet, truncated_expectation, truncated_weights
from services.errors import ContractError

if TYPE_CHECKING:
    from models.contract import ModelContract
    from services.amortizer import AmortizerNet, TrainOptions


class MarginalSource(str, Enum):
    TRUNCATED = "truncated"
    AMORTIZED = "amortized"


def prior_draw(model: "ModelContract", M: int, rng: np.random.Generator) -> np.ndarray:
    """M independent samples from p(s | theta) as an (M, H) array."""
    if M < 0:
        raise ContractError(f"sample count must be >= 0, got {M}")
    if M == 0:
        return np.zeros((0, model.n_latents), dtype=np.uint8)
    return model.sample_prior(M, rng)


def truncated_marginals(kset: StateSet) -> np.ndarray:
    """<s>_q under the truncated posterior of one state set, each entry in [0, 1]."""
    marginals = truncated_expectation(lambda s: s, kset)
    return np.clip(marginals, 0.0, 1.0)


def marginal_draw(probs, M: int, rng: np.random.Generator,
                  clamp: tuple[float, float] = MARGINAL_CLAMP) -> np.ndarray:
    """
    Bernoulli samples with independent bits.

    probs has shape (H,) or (B, H); the result is (M, H) or (B, M, H).
    Probabilities are clamped to [lo, hi] first; (0, 1) disables clamping.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if M < 0:
        raise ContractError(f"sample count must be >= 0, got {M}")
    if np.any((probs < 0) | (probs > 1)) or np.any(~np.isfinite(probs)):
        raise ContractError("marginal probabilities must lie in [0, 1]")
    lo, hi = clamp
    probs = np.clip(probs, lo, hi)
    shape = probs.shape[:-1] + (M, probs.shape[-1])
    if M == 0:
        return np.zeros(shape, dtype=np.uint8)
    draws = rng.random(shape)
    return (draws < np.expand_dims(probs, -2)).astype(np.uint8)


@dataclass
class SamplerBundle:
    """Which proposal distributions the E-step draws from, and how."""

    prior_sampler: Callable = prior_draw
    marginal_sampler: Callable = marginal_draw
    marginal_source: MarginalSource = MarginalSource.TRUNCATED
    clamp: tuple[float, float] = MARGINAL_CLAMP
    amortizer: "AmortizerNet | None" = None
    amortizer_hidden: int = AMORTIZER_HIDDEN
    train_options: "TrainOptions | None" = None

    def __post_init__(self):
        self.marginal_source = MarginalSource(self.marginal_source)
        if self.train_options is None:
            from services.amortizer import TrainOptions
            self.train_options = TrainOptions()

    def propose_block(self, model: "ModelContract", states: np.ndarray, log_joints: np.ndarray,
                      m_p: int, m_q: int, rng: np.random.Generator,
                      marginal_probs: np.ndarray | None = None, offset: int = 0) -> np.ndarray:
        """
        (B, m_p + m_q, H) proposals for a block of datapoints starting at row ``offset``.

        Prior and marginal batches are drawn independently from the
        iteration-start sets and concatenated, prior first. Without
        ``marginal_probs`` the marginals come from the block's own sets.
        """
        n_block, _, n_latents = states.shape
        prior = self.prior_sampler(model, n_block * m_p, rng).reshape(n_block, m_p, n_latents)
        if m_q == 0:
            return prior
        if marginal_probs is None:
            weights = truncated_weights(log_joints, offset)
            marginal_probs = np.clip(
                np.einsum("bs,bsh->bh", weights, states.astype(np.float64)), 0.0, 1.0
            )
        marginal = self.marginal_sampler(marginal_probs, m_q, rng, self.clamp)
        return np.concatenate([prior, marginal.astype(np.uint8)], axis=1)
