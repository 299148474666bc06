"""
Dictionary-recovery score: mean cosine similarity of the best one-to-one
matching between learned and ground-truth dictionary columns.
"""
import numpy as np
from scipy.optimize import linear_sum_assignment

from services.errors import DimensionError


def _unit_columns(W: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(W, axis=0)
    return W / np.where(norms > 0, norms, 1.0)


def sign_normalize(W: np.ndarray) -> np.ndarray:
    """Flip each column so its largest-magnitude entry is positive."""
    W = np.asarray(W, dtype=np.float64)
    if W.size == 0:
        return W.copy()
    peak = W[np.abs(W).argmax(axis=0), np.arange(W.shape[1])]
    return W * np.where(peak < 0, -1.0, 1.0)


def cosine_similarities(W_learned, W_true) -> np.ndarray:
    """(H_learned, H_true) matrix of column cosines; zero columns score 0."""
    A = np.asarray(W_learned, dtype=np.float64)
    B = np.asarray(W_true, dtype=np.float64)
    if A.shape[0] != B.shape[0]:
        raise DimensionError(f"dictionaries disagree on D: {A.shape[0]} vs {B.shape[0]}")
    return _unit_columns(A).T @ _unit_columns(B)


def recovery_score(W_learned, W_true, signed: bool = False) -> tuple[float, np.ndarray]:
    """
    Returns (score, matched) where matched[j] is the learned column assigned
    to true column j (-1 if there are fewer learned than true columns).
    The score averages over true columns, unmatched ones counting as 0.
    """
    A = np.asarray(W_learned, dtype=np.float64)
    B = np.asarray(W_true, dtype=np.float64)
    if signed:
        A, B = sign_normalize(A), sign_normalize(B)
    sims = cosine_similarities(A, B)
    rows, cols = linear_sum_assignment(sims, maximize=True)
    matched = np.full(B.shape[1], -1, dtype=np.int64)
    matched[cols] = rows
    if B.shape[1] == 0:
        return 0.0, matched
    return float(sims[rows, cols].sum() / B.shape[1]), matched
