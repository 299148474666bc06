import numpy as np
import pytest

from services.errors import DimensionError
from utils.dataset_handler import BarsSpec, make_bars_dictionary
from utils.recovery import recovery_score, sign_normalize


def test_permuted_and_scaled_dictionary_scores_one(rng):
    W = make_bars_dictionary(BarsSpec())
    order = rng.permutation(W.shape[1])
    score, matched = recovery_score(3.0 * W[:, order], W)
    assert score == pytest.approx(1.0)
    np.testing.assert_array_equal(order[matched], np.arange(W.shape[1]))


def test_missing_columns_count_as_zero():
    W = make_bars_dictionary(BarsSpec())
    score, matched = recovery_score(W[:, :5], W)
    assert score == pytest.approx(0.5)
    assert (matched == -1).sum() == 5


def test_signed_matching_uses_normalized_columns():
    W = make_bars_dictionary(BarsSpec())
    flipped = -W
    assert recovery_score(flipped, W)[0] < 0.5
    assert recovery_score(flipped, W, signed=True)[0] == pytest.approx(1.0)
    np.testing.assert_array_equal(sign_normalize(flipped), W)


def test_dimension_mismatch():
    with pytest.raises(DimensionError):
        recovery_score(np.ones((4, 2)), np.ones((5, 2)))
