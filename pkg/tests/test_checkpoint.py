import numpy as np
import pandas as pd
import pytest

from models.sbn import sbn_generate
from services.amortizer import AmortizerNet
from services.checkpoint import load_checkpoint, restore_vstate, save_checkpoint
from services.engine import TvsConfig, init_ksets
from services.errors import CorruptFileError
from utils.trajectory import TrajectoryWriter, read_trajectory, truncate_trajectory


def test_checkpoint_restores_model_sets_and_net(tmp_path, rng, random_sbn):
    model = random_sbn(rng, H=3, D=5)
    Y, _ = sbn_generate(model.params, 12, rng)
    vstate = init_ksets(model, TvsConfig.uniform(4, 2, 2, 5), Y)
    net = AmortizerNet.init(5, 3, 4, rng)
    save_checkpoint(tmp_path / "ckpt", model, vstate, net, iteration=7, seed=11, config={"n_states": 4})

    ckpt = load_checkpoint(tmp_path / "ckpt")
    assert (ckpt.iteration, ckpt.seed, ckpt.config) == (7, 11, {"n_states": 4})
    assert ckpt.model.options() == model.options()
    np.testing.assert_array_equal(ckpt.model.params.W, model.params.W)
    np.testing.assert_array_equal(ckpt.amortizer.W1, net.W1)

    restored = restore_vstate(ckpt, Y)
    assert restored.iteration == 7
    np.testing.assert_array_equal(restored.states, vstate.states)
    np.testing.assert_allclose(restored.log_joints, vstate.log_joints, rtol=1e-14)


def test_params_only_checkpoint_has_no_sets(tmp_path, rng, random_bsc):
    save_checkpoint(tmp_path / "ckpt", random_bsc(rng))
    ckpt = load_checkpoint(tmp_path / "ckpt")
    assert ckpt.states is None and ckpt.amortizer is None
    with pytest.raises(CorruptFileError):
        restore_vstate(ckpt, np.zeros((1, 6)))


def test_directory_without_progress_is_corrupt(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(CorruptFileError):
        load_checkpoint(tmp_path / "empty")


def test_trajectory_truncation_and_append(tmp_path):
    path = tmp_path / "trajectory.csv"
    writer = TrajectoryWriter(path)
    for i in range(5):
        writer({"iteration": i, "free_energy": -100.0 / (i + 3), "m_p": 2, "m_q": 2})
    truncate_trajectory(path, 2)
    TrajectoryWriter(path, append=True)({"iteration": 3, "free_energy": -1.0, "m_p": 2, "m_q": 2})

    frame = read_trajectory(path)
    assert frame["iteration"].tolist() == [0, 1, 2, 3]
    assert frame["free_energy"].iloc[1] == -100.0 / 4


def test_fresh_writer_backs_up_old_file(tmp_path):
    path = tmp_path / "trajectory.csv"
    pd.DataFrame({"iteration": [0]}).to_csv(path, index=False)
    TrajectoryWriter(path)({"iteration": 0, "free_energy": -1.0})
    assert read_trajectory(path).columns.tolist() == ["iteration", "free_energy"]
    assert len(list((tmp_path / "backups").glob("trajectory_backup_*.csv"))) == 1
