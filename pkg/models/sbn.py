"""
Shallow Sigmoid Belief Network: one binary hidden layer, one binary observed layer.

    p(s | pi)      = prod_h pi_h^{s_h} (1 - pi_h)^{1 - s_h}
    p(y | s, W, b) = prod_d g_d^{y_d} (1 - g_d)^{1 - y_d},  g = logistic(W s + b)

pi has a closed-form update; W and b take `grad_steps` gradient-ascent steps
per EM iteration against the fixed truncated posteriors (partial M-step).
During the first `pi_warmup` iterations pi keeps its current value.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit, logit

from models.contract import ModelContract
from services.config import (
    PI_MIN,
    SBN_BIAS_CLIP,
    SBN_GRAD_STEPS,
    SBN_INIT_W_STD,
    SBN_LR,
    SBN_LR_DECAY,
    SBN_PI_WARMUP,
)
from services.engine import VariationalState, iter_blocks, truncated_weights
from services.errors import ContractError, DimensionError, DivergenceError


@dataclass
class SbnParams:
    pi: np.ndarray  # (H,)
    W: np.ndarray   # (D, H)
    b: np.ndarray   # (D,)

    @property
    def n_latents(self) -> int:
        return self.W.shape[1]

    @property
    def n_observed(self) -> int:
        return self.W.shape[0]


@dataclass
class SbnGrad:
    """Free-energy gradient w.r.t. W and b, plus the closed-form prior update."""

    dW: np.ndarray
    db: np.ndarray
    new_pi: np.ndarray
    count: int


def sbn_log_joint(states, Y, p: SbnParams, pi_min: float = PI_MIN) -> np.ndarray:
    """
    log p(s, y | theta), stabilized through log(1 - g) = log_expit(-a).

    Shapes as for the BSC joint: (K, H) or (N, K, H) states with (N, D) data.
    """
    states = np.asarray(states)
    Y = np.asarray(Y, dtype=np.float64)
    if states.ndim == 1 and Y.ndim == 1:
        return float(sbn_log_joint(states[None, :], Y[None, :], p, pi_min)[0, 0])
    if Y.ndim == 1:
        Y = Y[None, :]
    if states.shape[-1] != p.n_latents or Y.shape[-1] != p.n_observed:
        raise DimensionError(
            f"SBN with H={p.n_latents}, D={p.n_observed} got states {states.shape}, data {Y.shape}"
        )
    S = states.astype(np.float64)
    pi = np.clip(p.pi, pi_min, 1.0 - pi_min)
    log_on, log_off = np.log(pi), np.log1p(-pi)
    log_prior = S @ (log_on - log_off) + log_off.sum()
    act = S @ p.W.T + p.b
    # y log g + (1 - y) log(1 - g) == log_expit(-a) + y a
    base = log_expit(-act).sum(axis=-1)
    if act.ndim == 2:
        linear = Y @ act.T
    else:
        linear = np.einsum("nd,nkd->nk", Y, act)
    return log_prior + base + linear


def _block_grad(Y, states, log_joints, p: SbnParams, offset: int):
    weights = truncated_weights(log_joints, offset)
    S = states.astype(np.float64)
    H, D = p.n_latents, p.n_observed
    # expectation over the states of each set; g is nonlinear in s
    resid = Y[:, None, :] - expit(S @ p.W.T + p.b)
    weighted = resid * weights[:, :, None]
    dW = weighted.reshape(-1, D).T @ S.reshape(-1, H)
    db = weighted.sum(axis=(0, 1))
    sum_s = np.einsum("bk,bkh->h", weights, S)
    return dW, db, sum_s


def sbn_grad(Y, vstate: VariationalState, p: SbnParams, pi_min: float = PI_MIN) -> SbnGrad:
    """
    dW_dh = sum_n <(y_d - g_d(s)) s_h>,  db_d = sum_n <y_d - g_d(s)>,
    new_pi_h = (1/N) sum_n <s_h> (clamped); expectations under the truncated posteriors.
    """
    Y = np.asarray(Y, dtype=np.float64)
    H, D = p.n_latents, p.n_observed
    dW, db, sum_s = np.zeros((D, H)), np.zeros(D), np.zeros(H)
    for start, stop in iter_blocks(Y.shape[0]):
        bw, bb, bs = _block_grad(
            Y[start:stop], vstate.states[start:stop], vstate.log_joints[start:stop], p, start
        )
        dW += bw
        db += bb
        sum_s += bs
    count = Y.shape[0]
    new_pi = np.clip(sum_s / max(count, 1), pi_min, 1.0 - pi_min)
    return SbnGrad(dW=dW, db=db, new_pi=new_pi, count=count)


def sbn_m_step(p: SbnParams, grad: SbnGrad, lr: float) -> SbnParams:
    """One gradient-ascent step on W, b (scaled by lr / N); pi replaced by new_pi."""
    if lr < 0:
        raise ContractError(f"learning rate must be >= 0, got {lr}")
    scale = lr / max(grad.count, 1)
    W = p.W + scale * grad.dW
    b = p.b + scale * grad.db
    if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
        raise DivergenceError("SBN parameter update is not finite")
    return SbnParams(pi=grad.new_pi.copy(), W=W, b=b)


def sbn_generate(p: SbnParams, N: int, rng: np.random.Generator):
    """Draw (Y, S): s_h ~ Bernoulli(pi_h), y_d ~ Bernoulli(logistic(W s + b))."""
    S = (rng.random((N, p.n_latents)) < p.pi[None, :]).astype(np.uint8)
    probs = expit(S @ p.W.T + p.b)
    Y = (rng.random((N, p.n_observed)) < probs).astype(np.float64)
    return Y, S


def sbn_init(Y, H: int, rng: np.random.Generator, w_std: float = SBN_INIT_W_STD) -> SbnParams:
    """Biases at the logit of per-pixel means, small Gaussian W, pi = 1/H."""
    Y = np.asarray(Y, dtype=np.float64)
    means = np.clip(Y.mean(axis=0), SBN_BIAS_CLIP, 1.0 - SBN_BIAS_CLIP)
    return SbnParams(
        pi=np.full(H, 1.0 / H),
        W=rng.normal(0.0, w_std, (Y.shape[1], H)),
        b=logit(means),
    )


class SigmoidBeliefNet(ModelContract):
    kind = "sbn"

    def __init__(self, params: SbnParams, pi_min: float = PI_MIN, lr: float = SBN_LR,
                 lr_decay: float = SBN_LR_DECAY, grad_steps: int = SBN_GRAD_STEPS,
                 pi_warmup: int = SBN_PI_WARMUP):
        if grad_steps < 1:
            raise ContractError(f"grad_steps must be >= 1, got {grad_steps}")
        self.params = params
        self.pi_min = pi_min
        self.lr = lr
        self.lr_decay = lr_decay
        self.grad_steps = grad_steps
        self.pi_warmup = pi_warmup

    @property
    def n_latents(self) -> int:
        return self.params.n_latents

    @property
    def n_observed(self) -> int:
        return self.params.n_observed

    @property
    def dictionary(self) -> np.ndarray:
        return self.params.W

    def check_data(self, Y):
        super().check_data(Y)
        if Y.size and not np.isin(Y, (0.0, 1.0)).all():
            raise DimensionError("SBN data must be binary")

    def log_joint(self, states, Y):
        return sbn_log_joint(states, Y, self.params, self.pi_min)

    def sample_prior(self, n, rng):
        return (rng.random((n, self.n_latents)) < self.params.pi[None, :]).astype(np.uint8)

    def learning_rate(self, iteration: int) -> float:
        return self.lr * self.lr_decay ** iteration

    def m_step(self, Y, vstate, iteration=0):
        lr = self.learning_rate(iteration)
        params = self.params
        for _ in range(self.grad_steps):
            params = sbn_m_step(params, sbn_grad(Y, vstate, params, self.pi_min), lr)
        if iteration < self.pi_warmup:
            params.pi = self.params.pi.copy()
        return SigmoidBeliefNet(params, **self.options())

    def scalars(self):
        return {"pi_H": float(self.params.pi.sum())}

    def to_arrays(self):
        return {"pi": self.params.pi, "W": self.params.W, "b": self.params.b}

    def options(self):
        return {
            "pi_min": self.pi_min,
            "lr": self.lr,
            "lr_decay": self.lr_decay,
            "grad_steps": self.grad_steps,
            "pi_warmup": self.pi_warmup,
        }

    @classmethod
    def from_arrays(cls, arrays, **options):
        params = SbnParams(
            pi=np.asarray(arrays["pi"], dtype=np.float64).ravel(),
            W=np.asarray(arrays["W"], dtype=np.float64),
            b=np.asarray(arrays["b"], dtype=np.float64).ravel(),
        )
        return cls(params, **options)


def sbn_exact_loglik(p: SbnParams, Y, pi_min: float = PI_MIN) -> float:
    """Exact log-likelihood by enumerating all 2^H states (H <= 20)."""
    return SigmoidBeliefNet(p, pi_min).exact_log_likelihood(Y)
