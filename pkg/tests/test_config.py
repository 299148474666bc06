import pytest

from services.config import (
    PROTOCOL_PRESETS,
    THREADS_ENV_KEY,
    ExperimentConfig,
    get_thread_count,
    load_experiment_config,
)
from services.errors import ConfigError
from utils.config_normalizer import normalize_bool, normalize_config, normalize_key


def test_key_aliases():
    assert normalize_key("M_p") == "m_p"
    assert normalize_key(" Iters ") == "iterations"
    assert normalize_key("exact-ll") == "exact_ll"
    assert normalize_key("colour") is None
    normalized, unknown = normalize_config({"H": "10", "S": " 64 ", "nope": "1"})
    assert normalized == {"n_latents": "10", "n_states": "64"}
    assert unknown == ["nope"]


@pytest.mark.parametrize("raw,expected", [("yes", True), ("0", False), ("TRUE", True), (False, False)])
def test_normalize_bool(raw, expected):
    assert normalize_bool(raw) is expected


def test_every_preset_validates():
    for name in PROTOCOL_PRESETS:
        overrides = {"dataset": "data.txt"} if PROTOCOL_PRESETS[name].get("dataset_format") else {}
        cfg = load_experiment_config(preset=name, overrides=overrides).validate()
        assert cfg.preset == name


def test_bars_preset_values():
    cfg = load_experiment_config(preset="bsc-bars")
    assert (cfg.n_latents, cfg.n_states, cfg.m_p, cfg.m_q, cfg.iterations) == (10, 64, 32, 32, 200)
    assert cfg.tvs_config().sample_counts(199) == (32, 32)


def test_file_values_override_preset_and_flags_override_file(tmp_path):
    path = tmp_path / "exp.cfg"
    path.write_text("# bars run\npreset=sbn-bars\nS=20\niters=7\namortizer=yes\n")
    cfg = load_experiment_config(path, overrides={"iters": "3"})
    assert cfg.model == "sbn" and cfg.n_states == 20 and cfg.iterations == 3
    assert cfg.amortizer is True and cfg.effective_marginal_source == "amortized"


def test_unknown_keys_are_rejected(tmp_path):
    path = tmp_path / "exp.cfg"
    path.write_text("colour=blue\n")
    with pytest.raises(ConfigError):
        load_experiment_config(path)
    with pytest.raises(ConfigError):
        load_experiment_config(overrides={"flavour": "x"})
    with pytest.raises(ConfigError):
        load_experiment_config(tmp_path / "missing.cfg")
    with pytest.raises(ConfigError):
        load_experiment_config(preset="no-such-preset")


def test_bad_values_are_config_errors():
    with pytest.raises(ConfigError):
        ExperimentConfig().with_values({"n_states": "many"})
    with pytest.raises(ConfigError):
        ExperimentConfig().with_values({"exact_ll": "maybe"})


def test_integer_values_are_parsed_exactly():
    cfg = ExperimentConfig().with_values({"seed": "12345678901234567", "n_states": 64.0})
    assert cfg.seed == 12345678901234567 and cfg.n_states == 64
    for raw in ("2.7", 2.7, "1e3"):
        with pytest.raises(ConfigError):
            ExperimentConfig().with_values({"n_states": raw})


def test_sbn_bars_preset_sets_its_optimizer():
    cfg = load_experiment_config(preset="sbn-bars")
    assert (cfg.lr, cfg.sbn_grad_steps, cfg.sbn_pi_warmup, cfg.sbn_init_std) == (1.0, 5, 100, 0.1)
    defaults = ExperimentConfig()
    assert (defaults.sbn_grad_steps, defaults.sbn_pi_warmup) == (1, 0)


@pytest.mark.parametrize("values", [
    {"model": "rbm"},
    {"n_states": 2000},
    {"n_latents": 30, "bars_grid": 15, "exact_ll": True},
    {"clamp_lo": 0.6, "clamp_hi": 0.4},
    {"marginal_source": "oracle"},
    {"schedule": "0:10:1:1;20:200:1:1"},
    {"n_latents": 8},
    {"lr": -0.1},
    {"seed": -1},
    {"sbn_grad_steps": 0},
    {"sbn_pi_warmup": -1},
])
def test_validation_catches_inconsistencies(values):
    with pytest.raises(ConfigError):
        ExperimentConfig().with_values(values).validate()


def test_thread_count_precedence(monkeypatch):
    monkeypatch.setenv(THREADS_ENV_KEY, "3")
    assert get_thread_count(5) == 5
    assert get_thread_count() == 3
    monkeypatch.setenv(THREADS_ENV_KEY, "lots")
    with pytest.raises(ConfigError):
        get_thread_count()
    monkeypatch.setenv(THREADS_ENV_KEY, "")
    assert get_thread_count() == 1
