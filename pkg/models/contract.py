"""
The interface a generative model must offer to be optimized by TVS.
"""
from __future__ import annotations

import math
from abc import ABC, abstractmethod
from typing import ClassVar

import numpy as np
from scipy.special import logsumexp

from services.config import ELEMENT_BUDGET, EXACT_LL_MAX_H
from services.engine import VariationalState, all_states
from services.errors import CapacityError, DimensionError


class ModelContract(ABC):
    """
    A binary-latent generative model p(s, y | theta).

    ``log_joint`` takes states of shape (K, H), shared by every datapoint,
    or (N, K, H), one set per datapoint, together with data (N, D), and
    returns (N, K) log-joints in nats.
    """

    kind: ClassVar[str] = ""

    @property
    @abstractmethod
    def n_latents(self) -> int: ...

    @property
    @abstractmethod
    def n_observed(self) -> int: ...

    @property
    @abstractmethod
    def dictionary(self) -> np.ndarray:
        """The D x H weight matrix W."""

    @abstractmethod
    def log_joint(self, states: np.ndarray, Y: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def sample_prior(self, n: int, rng: np.random.Generator) -> np.ndarray: ...

    @abstractmethod
    def m_step(self, Y: np.ndarray, vstate: VariationalState, iteration: int = 0) -> "ModelContract":
        """New model fitted to the truncated expectations of ``vstate``."""

    @abstractmethod
    def scalars(self) -> dict[str, float]:
        """Model-specific scalars logged per iteration."""

    @abstractmethod
    def to_arrays(self) -> dict[str, np.ndarray]: ...

    @abstractmethod
    def options(self) -> dict:
        """Hyperparameters needed to rebuild the model from its arrays."""

    @classmethod
    @abstractmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], **options) -> "ModelContract": ...

    def check_data(self, Y: np.ndarray):
        if Y.ndim != 2 or Y.shape[1] != self.n_observed:
            raise DimensionError(f"model expects D={self.n_observed}, data has shape {Y.shape}")

    def exact_log_likelihood(self, Y) -> float:
        """sum_n log sum_{s in {0,1}^H} p(s, y^(n)) by enumeration in the log domain."""
        Y = np.asarray(Y, dtype=np.float64)
        self.check_data(Y)
        H = self.n_latents
        if H > EXACT_LL_MAX_H:
            raise CapacityError(f"exact enumeration refused for H={H} > {EXACT_LL_MAX_H}")
        states = all_states(H)
        state_chunk = min(states.shape[0], max(1, ELEMENT_BUDGET // max(self.n_observed, 1)))
        row_chunk = max(1, ELEMENT_BUDGET // (state_chunk * max(self.n_observed, 1)))
        per_point = []
        for r0 in range(0, Y.shape[0], row_chunk):
            rows = Y[r0:r0 + row_chunk]
            acc = np.full(rows.shape[0], -np.inf)
            for s0 in range(0, states.shape[0], state_chunk):
                part = logsumexp(self.log_joint(states[s0:s0 + state_chunk], rows), axis=1)
                acc = np.logaddexp(acc, part)
            per_point.append(acc)
        if not per_point:
            return 0.0
        return math.fsum(np.concatenate(per_point).tolist())
