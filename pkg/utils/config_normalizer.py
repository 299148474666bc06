"""
Config Normalizer - Standardizes experiment config keys and values
"""

KEY_ALIASES = {
    "model": "model",
    "dataset": "dataset",
    "data": "dataset",
    "dataset_format": "dataset_format",
    "format": "dataset_format",
    "test_dataset": "test_dataset",
    "test_data": "test_dataset",
    "max_datapoints": "max_datapoints",
    "subset": "max_datapoints",
    "preset": "preset",
    "h": "n_latents",
    "n_latents": "n_latents",
    "latents": "n_latents",
    "s": "n_states",
    "n_states": "n_states",
    "states": "n_states",
    "k": "n_states",
    "iterations": "iterations",
    "iters": "iterations",
    "total_iterations": "iterations",
    "m_p": "m_p",
    "mp": "m_p",
    "prior_samples": "m_p",
    "m_q": "m_q",
    "mq": "m_q",
    "marginal_samples": "m_q",
    "schedule": "schedule",
    "seed": "seed",
    "rng_seed": "seed",
    "dedup_retry_cap": "dedup_retry_cap",
    "retry_cap": "dedup_retry_cap",
    "clamp_lo": "clamp_lo",
    "clamp_hi": "clamp_hi",
    "amortizer": "amortizer",
    "amortizer_enabled": "amortizer",
    "marginal_source": "marginal_source",
    "amortizer_hidden": "amortizer_hidden",
    "hidden": "amortizer_hidden",
    "amortizer_lr": "amortizer_lr",
    "amortizer_batch": "amortizer_batch",
    "amortizer_epochs": "amortizer_epochs",
    "amortizer_refresh": "amortizer_refresh",
    "amortizer_refresh_period": "amortizer_refresh",
    "pi_min": "pi_min",
    "sigma2_min": "sigma2_min",
    "gram_jitter": "gram_jitter",
    "lr": "lr",
    "learning_rate": "lr",
    "lr_decay": "lr_decay",
    "sbn_grad_steps": "sbn_grad_steps",
    "grad_steps": "sbn_grad_steps",
    "sbn_pi_warmup": "sbn_pi_warmup",
    "pi_warmup": "sbn_pi_warmup",
    "sbn_init_std": "sbn_init_std",
    "init_std": "sbn_init_std",
    "output_dir": "output_dir",
    "out": "output_dir",
    "checkpoint_every": "checkpoint_every",
    "exact_ll": "exact_ll",
    "exact_loglik": "exact_ll",
    "test_e_steps": "test_e_steps",
    "threads": "threads",
    "n": "bars_n",
    "bars_n": "bars_n",
    "bars_grid": "bars_grid",
    "grid": "bars_grid",
    "bars_value": "bars_value",
    "bars_pi": "bars_pi",
    "bars_sigma": "bars_sigma",
    "bars_bias": "bars_bias",
}

TRUE_VALUES = {"1", "true", "yes", "on", "y"}
FALSE_VALUES = {"0", "false", "no", "off", "n", ""}


def normalize_key(key):
    """Map a raw config key (any case, dashes or underscores) onto its field name."""
    cleaned = str(key).strip().lower().replace("-", "_")
    return KEY_ALIASES.get(cleaned)


def normalize_bool(value):
    """Normalize boolean-ish text"""
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in TRUE_VALUES:
        return True
    if text in FALSE_VALUES:
        return False
    raise ValueError(f"not a boolean: {value!r}")


def normalize_config(raw):
    """
    Normalize a dict of raw key/value pairs.

    Returns:
        (normalized, unknown): the renamed mapping and the list of keys
        that have no alias.
    """
    normalized = {}
    unknown = []
    for key, value in raw.items():
        name = normalize_key(key)
        if name is None:
            unknown.append(key)
            continue
        normalized[name] = value.strip() if isinstance(value, str) else value
    return normalized, unknown
