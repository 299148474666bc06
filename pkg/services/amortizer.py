# amortizer.py
"""
One-hidden-layer MLP mapping a datapoint to approximate marginal activation
probabilities of the H latents, trained by binary cross-entropy against the
current truncated marginals.

    f(y) = logistic(W2 tanh(W1 y + b1) + b2)
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from services.config import AMORTIZER_BATCH, AMORTIZER_EPOCHS, AMORTIZER_LR
from services.errors import ContractError, DimensionError, DivergenceError

logger = logging.getLogger(__name__)

PARAM_BLOCKS = ("W1", "b1", "W2", "b2")


@dataclass
class AmortizerNet:
    W1: np.ndarray  # (hidden, D)
    b1: np.ndarray  # (hidden,)
    W2: np.ndarray  # (H, hidden)
    b2: np.ndarray  # (H,)

    @classmethod
    def init(cls, n_inputs: int, n_latents: int, n_hidden: int, rng: np.random.Generator) -> "AmortizerNet":
        """Uniform init in +-1/sqrt(fan_in)."""
        bound1 = 1.0 / np.sqrt(n_inputs)
        bound2 = 1.0 / np.sqrt(n_hidden)
        return cls(
            W1=rng.uniform(-bound1, bound1, (n_hidden, n_inputs)),
            b1=rng.uniform(-bound1, bound1, n_hidden),
            W2=rng.uniform(-bound2, bound2, (n_latents, n_hidden)),
            b2=rng.uniform(-bound2, bound2, n_latents),
        )

    @classmethod
    def zeros(cls, n_inputs: int, n_latents: int, n_hidden: int) -> "AmortizerNet":
        return cls(
            np.zeros((n_hidden, n_inputs)), np.zeros(n_hidden),
            np.zeros((n_latents, n_hidden)), np.zeros(n_latents),
        )

    @property
    def n_inputs(self) -> int:
        return self.W1.shape[1]

    @property
    def n_hidden(self) -> int:
        return self.W1.shape[0]

    @property
    def n_latents(self) -> int:
        return self.W2.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_BLOCKS}

    def copy(self) -> "AmortizerNet":
        return AmortizerNet(**{k: v.copy() for k, v in self.params().items()})


@dataclass(frozen=True)
class TrainOptions:
    epochs: int = AMORTIZER_EPOCHS
    lr: float = AMORTIZER_LR
    batch_size: int = AMORTIZER_BATCH


def _check_inputs(net: AmortizerNet, Y: np.ndarray) -> np.ndarray:
    Y = np.asarray(Y, dtype=np.float64)
    if Y.shape[-1] != net.n_inputs:
        raise DimensionError(f"amortizer expects D={net.n_inputs}, got {Y.shape[-1]}")
    return Y


def _logits(net: AmortizerNet, Y: np.ndarray):
    hidden = np.tanh(Y @ net.W1.T + net.b1)
    return hidden, hidden @ net.W2.T + net.b2


def amortizer_forward(net: AmortizerNet, y) -> np.ndarray:
    """Marginal activation probabilities for one datapoint (D,) or a batch (N, D)."""
    y = _check_inputs(net, y)
    return expit(_logits(net, y)[1])


def amortizer_loss(net: AmortizerNet, Y, targets) -> float:
    """Mean over datapoints of the summed binary cross-entropy, from logits."""
    Y = _check_inputs(net, np.atleast_2d(Y))
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    _, logits = _logits(net, Y)
    # -t log f - (1-t) log(1-f) == softplus(z) - t z
    per_point = (np.logaddexp(0.0, logits) - targets * logits).sum(axis=1)
    return float(per_point.mean())


def amortizer_gradients(net: AmortizerNet, Y, targets) -> dict[str, np.ndarray]:
    """Backprop gradients of amortizer_loss w.r.t. every parameter block."""
    Y = _check_inputs(net, np.atleast_2d(Y))
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    hidden, logits = _logits(net, Y)
    d_logits = (expit(logits) - targets) / Y.shape[0]
    d_hidden = (d_logits @ net.W2) * (1.0 - hidden ** 2)
    return {
        "W1": d_hidden.T @ Y,
        "b1": d_hidden.sum(axis=0),
        "W2": d_logits.T @ hidden,
        "b2": d_logits.sum(axis=0),
    }


def amortizer_train(net: AmortizerNet, Y, targets, opts: TrainOptions | None = None,
                    rng: np.random.Generator | None = None) -> AmortizerNet:
    """
    Minibatch gradient descent on the cross-entropy to the given targets.

    Returns a new net; the input net is left untouched.
    """
    opts = opts or TrainOptions()
    Y = _check_inputs(net, np.atleast_2d(Y))
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if targets.shape != (Y.shape[0], net.n_latents):
        raise DimensionError(f"targets shape {targets.shape}, expected {(Y.shape[0], net.n_latents)}")
    if np.any((targets < 0) | (targets > 1)):
        raise ContractError("amortizer targets must lie in [0, 1]")
    rng = rng or np.random.default_rng(0)

    net = net.copy()
    n_rows = Y.shape[0]
    for epoch in range(opts.epochs):
        order = rng.permutation(n_rows)
        for start in range(0, n_rows, opts.batch_size):
            batch = order[start:start + opts.batch_size]
            grads = amortizer_gradients(net, Y[batch], targets[batch])
            for name in PARAM_BLOCKS:
                setattr(net, name, getattr(net, name) - opts.lr * grads[name])
        loss = amortizer_loss(net, Y, targets)
        if not np.isfinite(loss):
            raise DivergenceError(f"amortizer loss became {loss} in epoch {epoch}", epoch)
        logger.debug("amortizer epoch %d loss %.6f", epoch, loss)
    return net
