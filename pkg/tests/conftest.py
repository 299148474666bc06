import numpy as np
import pytest

from models.bsc import BinarySparseCoding, BscParams
from models.sbn import SbnParams, SigmoidBeliefNet
from services.engine import VariationalState, all_states, refresh_log_joints


def _random_bsc(rng, H=4, D=6, pi=0.3, sigma2=0.5):
    return BinarySparseCoding(BscParams(pi=pi, W=rng.normal(0.0, 1.0, (D, H)), sigma2=sigma2))


def _random_sbn(rng, H=4, D=6):
    params = SbnParams(
        pi=rng.uniform(0.1, 0.6, H),
        W=rng.normal(0.0, 2.0, (D, H)),
        b=rng.normal(-1.0, 1.0, D),
    )
    return SigmoidBeliefNet(params)


def _exhaustive_vstate(model, Y):
    """Every datapoint holds all 2^H states."""
    N, H = Y.shape[0], model.n_latents
    states = np.broadcast_to(all_states(H), (N, 2 ** H, H)).copy()
    return refresh_log_joints(VariationalState(states, np.zeros((N, 2 ** H))), model, Y)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def random_bsc():
    return _random_bsc


@pytest.fixture
def random_sbn():
    return _random_sbn


@pytest.fixture
def exhaustive_vstate():
    return _exhaustive_vstate
