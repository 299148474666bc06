# config.py
import os
from dataclasses import dataclass, fields, asdict, replace
from pathlib import Path

from dotenv import dotenv_values, load_dotenv

from services.errors import ConfigError
from utils.config_normalizer import normalize_config, normalize_bool

# -------------------------------------------------
# App Settings
# -------------------------------------------------
APP_TITLE = "Truncated Variational Sampling"

# -------------------------------------------------
# Base Directory
# -------------------------------------------------
BASE_DIR = Path(__file__).resolve().parent.parent
ENV_PATH = BASE_DIR / ".env"
DEFAULT_OUTPUT_DIR = "runs"

THREADS_ENV_KEY = "TVS_THREADS"

# -------------------------------------------------
# Numerics
# -------------------------------------------------
# datapoints per work unit; RNG streams are keyed by block start,
# so changing this changes sampled trajectories
BLOCK_SIZE = 128

# upper bound on float64 elements materialized per chunk
ELEMENT_BUDGET = 1 << 22

PI_MIN = 1e-4
SIGMA2_MIN = 1e-8
GRAM_JITTER = 1e-6

MARGINAL_CLAMP = (0.01, 0.99)
DEDUP_RETRY_CAP = 100

EXACT_LL_MAX_H = 20

# -------------------------------------------------
# Amortizer (MLP marginal source)
# -------------------------------------------------
AMORTIZER_HIDDEN = 50
AMORTIZER_LR = 0.1
AMORTIZER_BATCH = 100
AMORTIZER_EPOCHS = 3
AMORTIZER_REFRESH = 5

# -------------------------------------------------
# Sigmoid belief net
# -------------------------------------------------
SBN_LR = 0.5
SBN_LR_DECAY = 0.999
SBN_INIT_W_STD = 0.01
SBN_GRAD_STEPS = 1
SBN_PI_WARMUP = 0
SBN_BIAS_CLIP = 1e-3

TEST_E_STEPS = 50

# per-datapoint test free energies reported for binarized MNIST, by H
REFERENCE_TEST_LL = {
    100: -121.91,
    200: -111.23,
}

# -------------------------------------------------
# Protocol presets
# -------------------------------------------------
PROTOCOL_PRESETS = {
    "bsc-bars": {
        "model": "bsc",
        "bars_grid": 5,
        "bars_value": 10.0,
        "bars_pi": 0.2,
        "bars_sigma": 2.0,
        "bars_n": 10000,
        "n_latents": 10,
        "n_states": 64,
        "m_p": 32,
        "m_q": 32,
        "iterations": 200,
        "exact_ll": True,
    },
    "sbn-bars": {
        "model": "sbn",
        "bars_grid": 5,
        "bars_value": 10.0,
        "bars_bias": -5.0,
        "bars_pi": 0.2,
        "bars_n": 2000,
        "n_latents": 10,
        "n_states": 50,
        "m_p": 5,
        "m_q": 5,
        "iterations": 1000,
        "lr": 1.0,
        "lr_decay": SBN_LR_DECAY,
        "sbn_grad_steps": 5,
        # pi stays at its initial 1/H for the first sbn_pi_warmup iterations
        "sbn_pi_warmup": 100,
        "sbn_init_std": 0.1,
        "exact_ll": True,
    },
    # 100 iterations prior-only, then a linear hand-over to marginal samples
    "bsc-patches": {
        "model": "bsc",
        "dataset_format": "matrix",
        "n_latents": 100,
        "n_states": 64,
        "iterations": 2000,
        "schedule": "0:100:200:0;100:200:200:0:0:200;200:2000:0:200",
    },
    "sbn-mnist": {
        "model": "sbn",
        "dataset_format": "mnist",
        "n_latents": 100,
        "n_states": 50,
        "m_p": 10,
        "m_q": 20,
        "iterations": 1000,
        "amortizer": True,
        "amortizer_hidden": 500,
        "test_e_steps": TEST_E_STEPS,
    },
    "sbn-mnist-small": {
        "model": "sbn",
        "dataset_format": "mnist",
        "max_datapoints": 5000,
        "n_latents": 50,
        "n_states": 50,
        "m_p": 10,
        "m_q": 20,
        "iterations": 100,
        "amortizer": True,
        "amortizer_hidden": 500,
        "test_e_steps": TEST_E_STEPS,
    },
}


# -------------------------------------------------
# Experiment config
# -------------------------------------------------
@dataclass
class ExperimentConfig:
    model: str = "bsc"
    dataset: str = ""
    dataset_format: str = "auto"
    test_dataset: str = ""
    max_datapoints: int = 0

    # inline bars spec, used when no dataset path is given
    bars_grid: int = 5
    bars_value: float = 10.0
    bars_pi: float = 0.2
    bars_sigma: float = 2.0
    bars_bias: float = -5.0
    bars_n: int = 10000

    n_latents: int = 10
    n_states: int = 64
    iterations: int = 200
    m_p: int = 32
    m_q: int = 32
    schedule: str = ""
    seed: int = 0
    dedup_retry_cap: int = DEDUP_RETRY_CAP
    clamp_lo: float = MARGINAL_CLAMP[0]
    clamp_hi: float = MARGINAL_CLAMP[1]

    amortizer: bool = False
    marginal_source: str = ""
    amortizer_hidden: int = AMORTIZER_HIDDEN
    amortizer_lr: float = AMORTIZER_LR
    amortizer_batch: int = AMORTIZER_BATCH
    amortizer_epochs: int = AMORTIZER_EPOCHS
    amortizer_refresh: int = AMORTIZER_REFRESH

    pi_min: float = PI_MIN
    sigma2_min: float = SIGMA2_MIN
    gram_jitter: float = GRAM_JITTER
    lr: float = SBN_LR
    lr_decay: float = SBN_LR_DECAY
    sbn_grad_steps: int = SBN_GRAD_STEPS
    sbn_pi_warmup: int = SBN_PI_WARMUP
    sbn_init_std: float = SBN_INIT_W_STD

    output_dir: str = DEFAULT_OUTPUT_DIR
    checkpoint_every: int = 50
    exact_ll: bool = False
    test_e_steps: int = TEST_E_STEPS
    threads: int = 0
    preset: str = ""

    @property
    def effective_marginal_source(self) -> str:
        if self.marginal_source:
            return self.marginal_source
        return "amortized" if self.amortizer else "truncated"

    def with_values(self, values: dict) -> "ExperimentConfig":
        """Return a copy with typed values applied (strings are coerced)."""
        types = {f.name: type(f.default) for f in fields(self)}
        typed = {}
        for name, value in values.items():
            if name not in types:
                raise ConfigError(f"unknown config key: {name}")
            typed[name] = _coerce(name, value, types[name])
        return replace(self, **typed)

    def validate(self) -> "ExperimentConfig":
        """Raise ConfigError on any inconsistency; returns self for chaining."""
        if self.model not in ("bsc", "sbn"):
            raise ConfigError(f"model must be 'bsc' or 'sbn', got {self.model!r}")
        if self.dataset_format not in ("auto", "tvsd", "mnist", "matrix"):
            raise ConfigError(f"unknown dataset_format {self.dataset_format!r}")
        if self.n_latents < 1:
            raise ConfigError("H must be >= 1")
        if self.n_states < 1:
            raise ConfigError("S must be >= 1")
        if self.n_latents < 63 and self.n_states > 2 ** self.n_latents:
            raise ConfigError(f"S={self.n_states} exceeds 2^H={2 ** self.n_latents}")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.exact_ll and self.n_latents > EXACT_LL_MAX_H:
            raise ConfigError(f"exact_ll requires H <= {EXACT_LL_MAX_H}")
        if not 0.0 <= self.clamp_lo < self.clamp_hi <= 1.0:
            raise ConfigError("marginal clamp needs 0 <= lo < hi <= 1")
        if self.effective_marginal_source not in ("truncated", "amortized"):
            raise ConfigError(f"unknown marginal_source {self.marginal_source!r}")
        if not 0.0 < self.pi_min < 0.5:
            raise ConfigError("pi_min must lie in (0, 0.5)")
        if self.sigma2_min <= 0:
            raise ConfigError("sigma2_min must be positive")
        if self.lr < 0 or not 0 < self.lr_decay <= 1:
            raise ConfigError("lr must be >= 0 and lr_decay in (0, 1]")
        if self.sbn_grad_steps < 1 or self.sbn_pi_warmup < 0 or self.sbn_init_std < 0:
            raise ConfigError("sbn_grad_steps must be >= 1, sbn_pi_warmup and sbn_init_std >= 0")
        if self.amortizer_hidden < 1 or self.amortizer_batch < 1 or self.amortizer_refresh < 1:
            raise ConfigError("amortizer sizes must be positive")
        if self.test_e_steps < 0 or self.checkpoint_every < 0 or self.max_datapoints < 0:
            raise ConfigError("counts must be non-negative")
        if not self.dataset:
            if self.bars_grid < 1 or self.bars_n < 0:
                raise ConfigError("bars spec needs grid >= 1 and n >= 0")
            if 2 * self.bars_grid != self.n_latents:
                raise ConfigError(
                    f"bars grid {self.bars_grid} implies H={2 * self.bars_grid}, config has H={self.n_latents}"
                )
        # schedule errors surface here, before any compute
        self.tvs_config()
        return self

    def tvs_config(self):
        from services.engine import TvsConfig, parse_schedule

        if self.schedule:
            schedule = parse_schedule(self.schedule)
        else:
            schedule = parse_schedule(f"0:{max(self.iterations, 1)}:{self.m_p}:{self.m_q}")
        return TvsConfig(
            n_states=self.n_states,
            schedule=schedule,
            total_iterations=self.iterations,
            rng_seed=self.seed,
            dedup_retry_cap=self.dedup_retry_cap,
            amortizer_enabled=self.effective_marginal_source == "amortized",
            amortizer_refresh_period=self.amortizer_refresh,
        )

    def to_dict(self) -> dict:
        return asdict(self)


def _coerce(name, value, target):
    if isinstance(value, target) and not (target is int and isinstance(value, bool)):
        return value
    try:
        if target is bool:
            return normalize_bool(value)
        if target is int:
            return _parse_int(value)
        if target is float:
            return float(value)
        return str(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad value for {name}: {value!r} ({e})") from e


def _parse_int(value) -> int:
    if isinstance(value, float):
        if not value.is_integer():
            raise ValueError("not an integer")
        return int(value)
    text = str(value).strip()
    return int(text) if text else 0


def load_experiment_config(path=None, preset=None, overrides=None) -> ExperimentConfig:
    """
    Build an ExperimentConfig from defaults, a preset, a key=value file and overrides.

    Later sources win: defaults < preset < file < overrides. A ``preset`` key
    inside the file is honoured when no preset argument is given.
    """
    file_values = {}
    if path:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        file_values, unknown = normalize_config(dotenv_values(path))
        if unknown:
            raise ConfigError(f"unknown config keys in {path}: {', '.join(unknown)}")

    override_values = {}
    if overrides:
        override_values, unknown = normalize_config(overrides)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")

    preset = preset or override_values.get("preset") or file_values.get("preset")
    cfg = ExperimentConfig()
    if preset:
        if preset not in PROTOCOL_PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {', '.join(PROTOCOL_PRESETS)}")
        cfg = cfg.with_values({**PROTOCOL_PRESETS[preset], "preset": preset})

    cfg = cfg.with_values(file_values).with_values(override_values)
    return cfg


def get_thread_count(cli_value=None) -> int:
    """Thread count from the CLI flag, else TVS_THREADS (env or .env), else 1."""
    if cli_value:
        count = int(cli_value)
    else:
        load_dotenv(dotenv_path=ENV_PATH)
        raw = os.getenv(THREADS_ENV_KEY, "").strip()
        try:
            count = int(raw) if raw else 1
        except ValueError as e:
            raise ConfigError(f"{THREADS_ENV_KEY} must be an integer, got {raw!r}") from e
    if count < 1:
        raise ConfigError("thread count must be >= 1")
    return count
