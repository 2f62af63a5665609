"""Command-line entry point: generate-data, pretrain, probe, evaluate, ablate.

Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import json
import os
import sys
from pathlib import Path

import click
import numpy as np
import torch

from . import dataio, eval as eval_mod, train
from .config import ConfigError, load_config
from .dataio import PhantomParams, TensorIOError
from .train import NumericError

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class DataError(Exception):
    pass


def _setup(cfg: dict, seed: int | None) -> int:
    if seed is not None:
        cfg["runtime"]["seed"] = seed
    torch.set_num_threads(cfg["runtime"]["threads"])
    return cfg["runtime"]["seed"]


def _log_level() -> str:
    return os.environ.get("USJEPA_LOG", "info")


@click.group()
def cli():
    """Self-supervised video pretraining with a localisation auxiliary task."""


@cli.command("generate-data")
@click.option("--out", required=True, type=click.Path())
@click.option("--videos", "n_videos", default=12, show_default=True)
@click.option("--frames", default=24, show_default=True)
@click.option("--size", default="32x32", show_default=True, help="HxW")
@click.option("--seed", default=0, show_default=True)
@click.option("--speckle", default=0.25, show_default=True)
@click.option("--force", is_flag=True)
def cmd_generate_data(out, n_videos, frames, size, seed, speckle, force):
    """Emit a synthetic dataset directory plus manifest."""
    out = Path(out)
    if out.exists() and any(out.iterdir()) and not force:
        raise DataError(f"output directory {out} is not empty (use --force)")
    try:
        h, w = (int(x) for x in size.lower().split("x"))
    except ValueError:
        raise click.UsageError(f"--size must look like 32x32, got {size!r}")
    params = PhantomParams(frames=frames, height=h, width=w, speckle=speckle)
    dataio.generate_dataset(out, n_videos, params, seed)
    click.echo(f"wrote {n_videos} videos under {out}")


def _config_options(f):
    f = click.option("--config", "config_path", type=click.Path(exists=True),
                     default=None)(f)
    f = click.option("--profile", type=click.Choice(["desk", "paper"]),
                     default="desk", show_default=True)(f)
    f = click.option("--seed", type=int, default=None)(f)
    return f


@cli.command("pretrain")
@click.option("--data", "data_root", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--lambda", "lam", type=float, default=None,
              help="loss mixing weight (default from config: 0.25)")
@click.option("--frozen-blocks", type=int, default=None)
@click.option("--mask", type=click.Choice(["multiblock", "random"]), default=None)
@click.option("--steps", type=int, default=None)
@_config_options
def cmd_pretrain(data_root, out, lam, frozen_blocks, mask, steps,
                 config_path, profile, seed):
    """Run self-supervised pretraining; --lambda 1.0 disables the auxiliary task."""
    overrides: dict = {}
    if lam is not None:
        if not 0.0 <= lam <= 1.0:
            raise click.UsageError(f"--lambda must be in [0, 1], got {lam}")
        overrides.setdefault("loss", {})["lambda"] = lam
    if frozen_blocks is not None:
        overrides.setdefault("model", {})["frozen_blocks"] = frozen_blocks
    if mask is not None:
        overrides.setdefault("tokenizer", {})["mask_strategy"] = mask
    if steps is not None:
        overrides.setdefault("schedule", {})["pretrain_steps"] = steps
    cfg = load_config(config_path, profile, overrides)
    run_seed = _setup(cfg, seed)
    videos = _load_pretrain_videos(data_root)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    state = train.build_pretrain_state(cfg, run_seed)
    log_path = out / "pretrain_log.jsonl"
    log_path.unlink(missing_ok=True)
    train.run_pretrain(state, videos, cfg["schedule"]["pretrain_steps"], log_path)
    ckpt = out / "pretrain.ckpt"
    train.save_checkpoint(ckpt, "pretrain", cfg, state.step, state.modules,
                          state.opt, state.gen)
    click.echo(f"pretraining done; checkpoint at {ckpt}")


def _load_pretrain_videos(data_root):
    try:
        return train.pretrain_videos(data_root, "train")
    except (FileNotFoundError, TensorIOError) as exc:
        raise DataError(str(exc))


@cli.command("probe")
@click.option("--data", "data_root", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--encoder-ckpt", type=click.Path(), default=None)
@click.option("--random-init", is_flag=True,
              help="random frozen encoder (supervised-baseline analogue)")
@click.option("--fraction", type=click.Choice(["100", "50", "20", "10"]),
              default="100", show_default=True)
@_config_options
def cmd_probe(data_root, out, encoder_ckpt, random_init, fraction,
              config_path, profile, seed):
    """Train the frozen-encoder attentive probe and segmentation decoder."""
    if bool(encoder_ckpt) == random_init:
        raise click.UsageError("give exactly one of --encoder-ckpt or --random-init")
    cfg = load_config(config_path, profile)
    run_seed = _setup(cfg, seed)
    encoder = None
    if encoder_ckpt:
        if not Path(encoder_ckpt).is_file():
            raise DataError(f"checkpoint not found: {encoder_ckpt}")
        encoder = train.load_encoder_from_checkpoint(encoder_ckpt, cfg)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    all_ids = dataio.list_videos(data_root, "train")
    if not all_ids:
        raise DataError(f"no training videos under {data_root}")
    ids = dataio.subsample_train(all_ids, int(fraction), seed=cfg["runtime"]["seed"])
    try:
        _, frames, labels = train.labelled_videos(data_root, "train", ids)
    except FileNotFoundError as exc:
        raise DataError(str(exc))
    state = train.build_probe_state(cfg, run_seed, encoder)
    log_path = out / "probe_log.jsonl"
    log_path.unlink(missing_ok=True)
    train.run_probe_training(state, frames, labels,
                             cfg["schedule"]["probe_steps"], log_path)
    # Per-run validation score, logged for schedule/λ comparisons.
    try:
        val_records = eval_mod.evaluate_probe(state, data_root, "val")
        val_dsc = float(np.mean([r.macro("dsc") for r in val_records]))
        (out / "val_dsc.json").write_text(json.dumps({"val_dsc": val_dsc}))
    except FileNotFoundError:
        pass
    ckpt = out / "probe.ckpt"
    train.save_checkpoint(ckpt, "probe", cfg, state.step, state.modules,
                          state.opt, state.gen)
    click.echo(f"probe training done; checkpoint at {ckpt}")


@cli.command("evaluate")
@click.option("--probe-ckpt", required=True, type=click.Path())
@click.option("--data", "data_root", required=True, type=click.Path(exists=True))
@click.option("--split", default="test", show_default=True)
@click.option("--report", "report_path", required=True, type=click.Path(),
              help="output report; .csv and .json are both written")
def cmd_evaluate(probe_ckpt, data_root, split, report_path):
    """Per-video segmentation metrics plus an aggregate row."""
    if not Path(probe_ckpt).is_file():
        raise DataError(f"checkpoint not found: {probe_ckpt}")
    state = train.load_probe_state(probe_ckpt)
    torch.set_num_threads(state.cfg["runtime"]["threads"])
    try:
        records = eval_mod.evaluate_probe(state, data_root, split)
    except FileNotFoundError as exc:
        raise DataError(str(exc))
    base = Path(report_path)
    csv_path = base if base.suffix == ".csv" else base.with_suffix(".csv")
    eval_mod.records_csv(records, csv_path)
    eval_mod.records_json(records, csv_path.with_suffix(".json"))
    click.echo(f"wrote {csv_path} and {csv_path.with_suffix('.json')}")


@cli.command("ablate")
@click.option("--data", "data_root", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--lambdas", default="0.9,0.75,0.5,0.25", show_default=True)
@_config_options
def cmd_ablate(data_root, out, lambdas, config_path, profile, seed):
    """Mixing-weight ablation: one pretrain + probe per lambda."""
    try:
        lam_list = [float(x) for x in lambdas.split(",") if x.strip()]
    except ValueError:
        raise click.UsageError(f"bad --lambdas list: {lambdas!r}")
    if not lam_list:
        raise click.UsageError("empty --lambdas list")
    cfg = load_config(config_path, profile)
    _setup(cfg, seed)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        results = eval_mod.lambda_ablation(lam_list, data_root, cfg,
                                           seed=cfg["runtime"]["seed"])
    except FileNotFoundError as exc:
        raise DataError(str(exc))
    eval_mod.ablation_csv(results, out / "ablation.csv")
    click.echo(f"wrote {out / 'ablation.csv'}")


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except (click.UsageError, ConfigError) as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_USAGE
    except (DataError, TensorIOError, train.CheckpointError, FileNotFoundError) as exc:
        click.echo(f"data error: {exc}", err=True)
        return EXIT_DATA
    except NumericError as exc:
        click.echo(f"numeric failure: {exc}", err=True)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
