"""Run configuration: declared keys, desk/paper profiles, flag overrides."""

from __future__ import annotations

import copy
import json


class ConfigError(ValueError):
    pass


# Desk profile: everything about these runs fits in minutes on a laptop.
DESK_DEFAULTS = {
    "data": {
        "video_frames": 24,
        "clip_frames": 8,
        "frame_step": 2,
        "height": 32,
        "width": 32,
        "num_classes": 3,
        "batch_size": 4,
        "speckle": 0.25,
        "motion_amplitude": 0.12,
    },
    "tokenizer": {
        "tubelet": [2, 4, 4],
        "mask_strategy": "multiblock",
        "mask_ratio": 0.75,
    },
    "model": {
        "embed_dim": 64,
        "depth": 4,
        "heads": 4,
        "mlp_ratio": 4.0,
        "frozen_blocks": 0,
        "probe_dim": 64,
        "probe_heads": 4,
    },
    "loss": {
        "lambda": 0.25,
        "n_pairs": 100,
        "allow_self_pairs": False,
    },
    "schedule": {
        "pretrain_base_lr": 2e-4,
        "pretrain_final_lr": 1e-6,
        "pretrain_warmup_steps": 20,
        "pretrain_steps": 200,
        "probe_base_lr": 1e-3,
        "probe_final_lr": 0.0,
        "probe_warmup_steps": 0,
        "probe_steps": 300,
        "ema_momentum_start": 0.996,
        "ema_momentum_end": 1.0,
        "weight_decay": 0.04,
        "grad_clip": 1.0,
    },
    "runtime": {
        "seed": 0,
        "threads": 1,
    },
}

# Paper-scale setup: batch 4, 16-frame clips at frame step 4, 224x224 input,
# 2x16x16 tubelets, 300 epochs with 20-epoch warmup, cosine 2e-4 -> 1e-6,
# downstream cosine 1e-3 -> 0.  Steps-per-epoch depends on the corpus, so
# step counts here assume 100 steps per epoch and are plain configuration.
PAPER_OVERRIDES = {
    "data": {
        "video_frames": 64,
        "clip_frames": 16,
        "frame_step": 4,
        "height": 224,
        "width": 224,
    },
    "tokenizer": {"tubelet": [2, 16, 16]},
    "model": {"embed_dim": 1024, "depth": 24, "heads": 16},
    "schedule": {
        "pretrain_warmup_steps": 2000,
        "pretrain_steps": 30000,
        "probe_steps": 30000,
    },
}

PROFILES = {"desk": {}, "paper": PAPER_OVERRIDES}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {here}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {here} must be a section")
            out[key] = _merge(base[key], value, here)
        else:
            out[key] = value
    return out


def load_config(path=None, profile: str = "desk", overrides: dict | None = None) -> dict:
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    cfg = _merge(DESK_DEFAULTS, PROFILES[profile])
    if path is not None:
        with open(path) as fh:
            cfg = _merge(cfg, json.load(fh))
    if overrides:
        cfg = _merge(cfg, overrides)
    lam = cfg["loss"]["lambda"]
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"loss.lambda must be in [0, 1], got {lam}")
    return cfg
