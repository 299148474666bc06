#!/usr/bin/env python3
"""
Truncated Variational Sampling - experiment harness

Usage:
    python run_tvs.py generate --preset bsc-bars --out runs/bars
    python run_tvs.py fit      --preset bsc-bars --out runs/bars
    python run_tvs.py fit      --resume runs/bars/checkpoint --out runs/bars
    python run_tvs.py eval     --checkpoint runs/bars/checkpoint --data runs/bars/dataset.tvsd
    python run_tvs.py dump     --checkpoint runs/bars/checkpoint --out runs/bars/dump

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""
import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from models.bsc import BinarySparseCoding, BscClamps, bsc_init
from models.sbn import SigmoidBeliefNet, sbn_init
from services.amortizer import TrainOptions
from services.checkpoint import load_checkpoint, restore_vstate, save_checkpoint
from services.config import (
    APP_TITLE,
    EXACT_LL_MAX_H,
    PROTOCOL_PRESETS,
    REFERENCE_TEST_LL,
    ExperimentConfig,
    get_thread_count,
    load_experiment_config,
)
from services.engine import STREAM_MODEL_INIT, block_rng, tvs_evaluate, tvs_fit
from services.errors import ConfigError, DimensionError, ParseError, TvsError
from services.samplers import SamplerBundle
from utils.binary_io import write_params
from utils.dataset_handler import (
    BarsSpec,
    Dataset,
    load_any,
    make_bsc_bars,
    make_sbn_bars,
    save_dataset,
)
from utils.dictionary_dump import dump_dictionary
from utils.file_utils import atomic_write_bytes
from utils.recovery import recovery_score
from utils.trajectory import TrajectoryWriter, truncate_trajectory

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"


# -------------------------------------------------
# Setup
# -------------------------------------------------
def setup_logging(out_dir) -> logging.Handler:
    """Stream handler plus ``tvs.log`` in the output directory."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    file_handler = logging.FileHandler(out_dir / "tvs.log")
    logging.basicConfig(
        level=logging.INFO,
        format=LOG_FORMAT,
        handlers=[file_handler, logging.StreamHandler()],
        force=True,
    )
    return file_handler


def _parse_set(values) -> dict:
    overrides = {}
    for item in values or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def resolve_config(args) -> ExperimentConfig:
    """Config file, preset, --set pairs and explicit flags, validated before any compute."""
    overrides = _parse_set(getattr(args, "set", None))
    for flag, key in (("seed", "seed"), ("out", "output_dir"), ("iters", "iterations"),
                      ("data", "dataset")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    cfg = load_experiment_config(args.config, args.preset, overrides)
    return cfg.validate()


def bars_spec(cfg: ExperimentConfig) -> BarsSpec:
    return BarsSpec(
        grid=cfg.bars_grid,
        bar_value=cfg.bars_value,
        pi=cfg.bars_pi,
        sigma=cfg.bars_sigma,
        bias=cfg.bars_bias,
        n=cfg.bars_n,
        seed=cfg.seed,
    )


def generate_bars(cfg: ExperimentConfig) -> Dataset:
    spec = bars_spec(cfg)
    return make_bsc_bars(spec) if cfg.model == "bsc" else make_sbn_bars(spec)


def load_training_data(cfg: ExperimentConfig) -> Dataset:
    """The configured dataset (first max_datapoints rows), or inline bars."""
    if not cfg.dataset:
        return generate_bars(cfg)
    path = Path(cfg.dataset)
    if not path.exists():
        raise ConfigError(f"dataset not found: {path}")
    return load_any(path, cfg.dataset_format).head(cfg.max_datapoints)


def build_model(cfg: ExperimentConfig, Y: np.ndarray):
    rng = block_rng(cfg.seed, STREAM_MODEL_INIT)
    if cfg.model == "bsc":
        clamps = BscClamps(cfg.pi_min, cfg.sigma2_min, cfg.gram_jitter)
        return BinarySparseCoding(bsc_init(Y, cfg.n_latents, rng, clamps), clamps)
    return SigmoidBeliefNet(
        sbn_init(Y, cfg.n_latents, rng, cfg.sbn_init_std), cfg.pi_min, cfg.lr, cfg.lr_decay,
        grad_steps=cfg.sbn_grad_steps, pi_warmup=cfg.sbn_pi_warmup,
    )


def build_sampler(cfg: ExperimentConfig) -> SamplerBundle:
    return SamplerBundle(
        marginal_source=cfg.effective_marginal_source,
        clamp=(cfg.clamp_lo, cfg.clamp_hi),
        amortizer_hidden=cfg.amortizer_hidden,
        train_options=TrainOptions(
            epochs=cfg.amortizer_epochs, lr=cfg.amortizer_lr, batch_size=cfg.amortizer_batch,
        ),
    )


# -------------------------------------------------
# Subcommands
# -------------------------------------------------
def cmd_generate(cfg: ExperimentConfig, output=None) -> Path:
    """Write a bars dataset (TVSD) and its ground-truth parameters as a sidecar."""
    if cfg.dataset:
        raise ConfigError("generate builds bars data; drop the dataset setting")
    ds = generate_bars(cfg)
    path = Path(output) if output else Path(cfg.output_dir) / "dataset.tvsd"
    save_dataset(ds, path)
    sidecar = path.with_suffix(".truth.params")
    write_params(sidecar, ds.ground_truth.model_kind, ds.ground_truth.params)

    print("=" * 60)
    print(f"Generated {cfg.model.upper()} bars dataset")
    print(f"   N={ds.n_points}  D={ds.n_dims}  H={ds.ground_truth.n_latents}  seed={cfg.seed}")
    print(f"   data:  {path}")
    print(f"   truth: {sidecar}")
    print("=" * 60)
    return path


def cmd_fit(cfg: ExperimentConfig, threads: int = 1, resume=None) -> dict:
    """Run TVS, writing trajectory.csv, rolling checkpoints and the final dictionary."""
    out_dir = Path(cfg.output_dir)
    trajectory_path = out_dir / "trajectory.csv"
    checkpoint_dir = out_dir / "checkpoint"

    ckpt = load_checkpoint(resume) if resume else None
    if ckpt is not None and ckpt.seed != cfg.seed:
        logger.warning("checkpoint seed %d overrides configured seed %d", ckpt.seed, cfg.seed)
        cfg = cfg.with_values({"seed": ckpt.seed})
    ds = load_training_data(cfg)
    Y = ds.Y
    tvs_cfg = cfg.tvs_config()

    vstate = amortizer = None
    if ckpt is not None:
        model = ckpt.model
        model.check_data(Y)
        vstate = restore_vstate(ckpt, Y)
        amortizer = ckpt.amortizer
        truncate_trajectory(trajectory_path, ckpt.iteration)
        writer = TrajectoryWriter(trajectory_path, append=True)
        logger.info("resuming from %s at iteration %d", resume, ckpt.iteration)
    else:
        model = build_model(cfg, Y)
        writer = TrajectoryWriter(trajectory_path)

    logger.info("%s: %s model, N=%d D=%d H=%d S=%d, %d iterations, %d thread(s)",
                APP_TITLE, cfg.model, Y.shape[0], Y.shape[1], cfg.n_latents, cfg.n_states,
                cfg.iterations, threads)

    def on_iteration_end(iteration, model, vstate, amortizer):
        every = cfg.checkpoint_every
        if (every and iteration % every == 0) or iteration == cfg.iterations:
            save_checkpoint(checkpoint_dir, model, vstate, amortizer, iteration, cfg.seed, cfg.to_dict())

    result = tvs_fit(
        Y, model, tvs_cfg, build_sampler(cfg),
        threads=threads, vstate=vstate, amortizer=amortizer,
        on_row=writer, on_iteration_end=on_iteration_end,
    )
    if result.vstate.iteration == 0 or not (checkpoint_dir / "progress.json").exists():
        save_checkpoint(checkpoint_dir, result.model, result.vstate, result.amortizer,
                        result.vstate.iteration, cfg.seed, cfg.to_dict())
    dumped = dump_dictionary(result.model.dictionary, out_dir / "dictionary")

    summary = {
        "free_energy": result.final_free_energy,
        "per_datapoint": result.final_free_energy / Y.shape[0],
        **result.model.scalars(),
    }
    if cfg.exact_ll:
        summary["exact_ll"] = result.model.exact_log_likelihood(Y)
    if ds.ground_truth is not None and ds.ground_truth.params["W"].shape[0] == Y.shape[1]:
        summary["recovery"], _ = recovery_score(
            result.model.dictionary, ds.ground_truth.params["W"], signed=cfg.model == "sbn",
        )

    print("=" * 60)
    print(f"Fit finished after {result.vstate.iteration} iterations")
    for key, value in summary.items():
        print(f"   {key:<14} {value:.6f}")
    print(f"   trajectory     {trajectory_path}")
    print(f"   checkpoint     {checkpoint_dir}")
    if dumped["notice"]:
        print(f"   note: {dumped['notice']}")
    print("=" * 60)
    return summary


def cmd_eval(cfg: ExperimentConfig, checkpoint, data=None, threads: int = 1) -> dict:
    """Test free energy from fresh state sets after cfg.test_e_steps E-steps at fixed parameters."""
    ckpt = load_checkpoint(checkpoint)
    model = ckpt.model
    source = data or cfg.test_dataset
    if source:
        if not Path(source).exists():
            raise ConfigError(f"dataset not found: {source}")
        ds = load_any(source, cfg.dataset_format).head(cfg.max_datapoints)
    else:
        ds = load_training_data(cfg)
    if ds.n_dims != model.n_observed:
        raise DimensionError(f"checkpoint expects D={model.n_observed}, dataset has D={ds.n_dims}")

    curve, _ = tvs_evaluate(
        ds.Y, model, cfg.tvs_config(), cfg.test_e_steps, build_sampler(cfg),
        threads=threads, amortizer=ckpt.amortizer,
    )
    out_dir = Path(cfg.output_dir)
    eval_path = out_dir / "eval.csv"
    atomic_write_bytes(eval_path, curve.to_csv(index=False, float_format="%.17g").encode("utf-8"))

    final = curve.iloc[-1]
    report = {
        "free_energy": float(final["free_energy"]),
        "per_datapoint": float(final["per_datapoint"]),
    }
    if cfg.exact_ll and model.n_latents <= EXACT_LL_MAX_H:
        report["exact_ll"] = model.exact_log_likelihood(ds.Y)
    truth = ds.ground_truth
    if truth is not None and truth.params["W"].shape[0] == model.n_observed:
        report["recovery"], _ = recovery_score(
            model.dictionary, truth.params["W"], signed=model.kind == "sbn",
        )

    print("=" * 60)
    print(f"Evaluation on {ds.n_points} datapoints, {cfg.test_e_steps} E-steps")
    for key, value in report.items():
        print(f"   {key:<14} {value:.6f}")
    reference = REFERENCE_TEST_LL.get(model.n_latents)
    if reference is not None and cfg.dataset_format == "mnist":
        print(f"   reference      {reference:.2f} per datapoint (binarized MNIST, H={model.n_latents})")
    print(f"   curve          {eval_path}")
    print("=" * 60)
    return report


def cmd_dump(checkpoint, out_dir) -> dict:
    """W columns as PGMs (square D only) plus a CSV; prints the scalar parameters."""
    ckpt = load_checkpoint(checkpoint)
    result = dump_dictionary(ckpt.model.dictionary, out_dir)
    print("=" * 60)
    print(f"{ckpt.model.kind.upper()} checkpoint at iteration {ckpt.iteration}")
    for key, value in ckpt.model.scalars().items():
        print(f"   {key:<10} {value:.6f}")
    print(f"   csv        {result['csv']}")
    print(f"   images     {len(result['pgm'])}")
    if result["notice"]:
        print(f"   note: {result['notice']}")
    print("=" * 60)
    return result


# -------------------------------------------------
# Entry point
# -------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value experiment file")
    common.add_argument("--preset", choices=sorted(PROTOCOL_PRESETS))
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--iters", type=int, help="number of TV-EM iterations")
    common.add_argument("--threads", type=int, help="worker threads (fallback: TVS_THREADS)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    parser = argparse.ArgumentParser(description=APP_TITLE)
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", parents=[common], help="write a bars dataset")
    gen.add_argument("--output", help="dataset path (default <out>/dataset.tvsd)")

    fit = sub.add_parser("fit", parents=[common], help="run TVS")
    fit.add_argument("--data", help="dataset path (TVSD, MNIST text or matrix text)")
    fit.add_argument("--resume", help="checkpoint directory to continue from")

    ev = sub.add_parser("eval", parents=[common], help="test free energy at fixed parameters")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", help="test dataset path")
    ev.add_argument("--e-steps", type=int, dest="e_steps")

    dump = sub.add_parser("dump", parents=[common], help="write dictionary images and CSV")
    dump.add_argument("--checkpoint", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        if getattr(args, "e_steps", None) is not None:
            cfg = cfg.with_values({"test_e_steps": args.e_steps}).validate()
        threads = get_thread_count(args.threads or cfg.threads or None)
    except (ConfigError, ParseError, DimensionError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    handler = setup_logging(cfg.output_dir)
    try:
        if args.command == "generate":
            cmd_generate(cfg, args.output)
        elif args.command == "fit":
            cmd_fit(cfg, threads, args.resume)
        elif args.command == "eval":
            cmd_eval(cfg, args.checkpoint, args.data, threads)
        elif args.command == "dump":
            cmd_dump(args.checkpoint, cfg.output_dir)
        return EXIT_OK
    except (ConfigError, ParseError, DimensionError, FileNotFoundError) as e:
        logger.error("config error: %s", e)
        return EXIT_CONFIG
    except TvsError as e:
        logger.error("run failed: %s", e)
        return EXIT_RUNTIME
    finally:
        logging.getLogger().removeHandler(handler)
        handler.close()


if __name__ == "__main__":
    sys.exit(main())
