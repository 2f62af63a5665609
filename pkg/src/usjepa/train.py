"""Optimization plumbing and the pretraining / probe training loops."""

from __future__ import annotations

import json
import math
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import dataio
from .dataio import read_tensor, tensor_from_bytes, tensor_to_bytes
from .losses import (
    LossBreakdown,
    combined_loss,
    jepa_loss,
    localisation_loss,
    offsets_tensor,
    sample_pairs,
)
from .nets import (
    AttentiveProbe,
    Encoder,
    LocalisationMLP,
    Predictor,
    SegDecoder,
    ViTConfig,
    ema_update,
    encode_context,
    encode_full,
    encode_target,
    make_target_encoder,
    predict_masked,
)
from .tokenizer import TokenGrid, make_mask, tokenize


class NumericError(RuntimeError):
    """Non-finite value encountered during optimization."""


class CheckpointError(ValueError):
    pass


@dataclass
class Schedule:
    base_lr: float
    final_lr: float
    warmup_epochs: int
    total_epochs: int
    steps_per_epoch: int = 1

    @property
    def warmup_steps(self) -> int:
        return self.warmup_epochs * self.steps_per_epoch

    @property
    def total_steps(self) -> int:
        return self.total_epochs * self.steps_per_epoch


def lr_at(step: int, schedule: Schedule) -> float:
    """Linear warmup 0 -> base_lr, then cosine decay to final_lr at the last step."""
    if step < 0:
        raise ValueError("step must be >= 0")
    warm, total = schedule.warmup_steps, schedule.total_steps
    if step < warm:
        return schedule.base_lr * step / warm
    if step >= total:
        return schedule.final_lr
    progress = (step - warm) / (total - warm)
    return schedule.final_lr + 0.5 * (schedule.base_lr - schedule.final_lr) * (
        1.0 + math.cos(math.pi * progress)
    )


def ema_momentum_at(step: int, total_steps: int, start: float, end: float) -> float:
    """Linear ramp of the target-encoder momentum, monotone toward 1."""
    if total_steps <= 0:
        return end
    frac = min(max(step / total_steps, 0.0), 1.0)
    return start + (end - start) * frac


class AdamW:
    """Decoupled-weight-decay adaptive optimizer over a named parameter dict.

    Moments are explicit tensors so checkpoints can round-trip bit-exactly.
    Decay is skipped for 1-D parameters (biases, normalization gains, tokens).
    """

    def __init__(self, params: dict[str, torch.Tensor], betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = dict(params)
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: torch.zeros_like(p) for k, p in self.params.items()}
        self.v = {k: torch.zeros_like(p) for k, p in self.params.items()}

    @torch.no_grad()
    def step(self, lr: float) -> None:
        b1, b2 = self.betas
        self.t += 1
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = torch.zeros_like(p)
            if not torch.isfinite(g).all():
                raise NumericError(f"non-finite gradient for parameter {name!r}")
            m, v = self.m[name], self.v[name]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            m_hat = m / bc1
            v_hat = v / bc2
            p.add_(m_hat / (v_hat.sqrt() + self.eps), alpha=-lr)
            if self.weight_decay and p.ndim > 1:
                p.add_(p, alpha=-lr * self.weight_decay)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def trainable_params(modules: dict[str, torch.nn.Module]) -> dict[str, torch.Tensor]:
    out = {}
    for prefix, module in modules.items():
        for name, p in module.named_parameters():
            if p.requires_grad:
                out[f"{prefix}.{name}"] = p
    return out


def _grid_from_config(cfg: dict) -> TokenGrid:
    d = cfg["data"]
    return TokenGrid.for_clip(
        d["clip_frames"], d["height"], d["width"],
        tuple(cfg["tokenizer"]["tubelet"]), cfg["model"]["embed_dim"],
    )


def _vit_config(cfg: dict) -> ViTConfig:
    m = cfg["model"]
    return ViTConfig(
        depth=m["depth"], embed_dim=m["embed_dim"], heads=m["heads"],
        mlp_ratio=m["mlp_ratio"], frozen_blocks=m["frozen_blocks"],
    )


@dataclass
class PretrainState:
    cfg: dict
    grid: TokenGrid
    encoder: Encoder
    target_encoder: Encoder
    predictor: Predictor
    loc_mlp: LocalisationMLP
    opt: AdamW
    gen: torch.Generator
    step: int = 0

    @property
    def modules(self) -> dict:
        return {
            "encoder": self.encoder,
            "target_encoder": self.target_encoder,
            "predictor": self.predictor,
            "loc_mlp": self.loc_mlp,
        }


def build_pretrain_state(cfg: dict, seed: int) -> PretrainState:
    torch.manual_seed(seed)
    grid = _grid_from_config(cfg)
    encoder = Encoder(grid, _vit_config(cfg))
    encoder.apply_freeze()
    target_encoder = make_target_encoder(encoder)
    predictor = Predictor(grid, _vit_config(cfg))
    loc_mlp = LocalisationMLP(cfg["model"]["embed_dim"])
    modules = {"encoder": encoder, "predictor": predictor, "loc_mlp": loc_mlp}
    opt = AdamW(trainable_params(modules),
                weight_decay=cfg["schedule"]["weight_decay"])
    gen = torch.Generator().manual_seed(seed)
    return PretrainState(cfg, grid, encoder, target_encoder, predictor, loc_mlp, opt, gen)


def _sample_batch(videos: list[np.ndarray], cfg: dict, gen: torch.Generator,
                  labels: list[np.ndarray] | None = None):
    d = cfg["data"]
    B, T, step = d["batch_size"], d["clip_frames"], d["frame_step"]
    needed = (T - 1) * step + 1
    clips, labs = [], []
    for _ in range(B):
        vi = int(torch.randint(0, len(videos), (), generator=gen))
        video = videos[vi]
        if video.shape[0] < needed:
            raise ValueError(
                f"video has {video.shape[0]} frames, need at least {needed}"
            )
        start = int(torch.randint(0, video.shape[0] - needed + 1, (), generator=gen))
        clips.append(torch.from_numpy(video[start : start + needed : step].copy()))
        if labels is not None:
            labs.append(torch.from_numpy(
                labels[vi][start : start + needed : step].copy()).long())
    return torch.stack(clips), (torch.stack(labs) if labels is not None else None)


def pretrain_step(state: PretrainState, clips: torch.Tensor,
                  schedule: Schedule) -> LossBreakdown:
    cfg = state.cfg
    lam = cfg["loss"]["lambda"]
    grid = state.grid
    jepa_terms = []
    batch_pairs = []
    for b in range(clips.shape[0]):
        clip = clips[b]
        tokens = tokenize(clip, grid, state.encoder.patch_proj)
        mask = make_mask(grid, cfg["tokenizer"]["mask_strategy"],
                         cfg["tokenizer"]["mask_ratio"], state.gen)
        ctx = encode_context(tokens, mask, state.encoder)
        pred = predict_masked(ctx, mask.masked, state.predictor)
        with torch.no_grad():
            t_tokens = tokenize(clip, grid, state.target_encoder.patch_proj)
            target = encode_target(t_tokens, mask, state.target_encoder)
        jepa_terms.append(jepa_loss(pred, target))
        pairs = sample_pairs(mask, cfg["loss"]["n_pairs"], state.gen,
                             cfg["loss"]["allow_self_pairs"])
        row = {pos: r for r, pos in enumerate(pred.positions)}
        i1 = torch.tensor([row[a] for a, _ in pairs], dtype=torch.long)
        i2 = torch.tensor([row[b2] for _, b2 in pairs], dtype=torch.long)
        delta = offsets_tensor(pairs, (grid.t, grid.i, grid.j))
        batch_pairs.append((pred.embeddings[i1], pred.embeddings[i2], delta))

    jepa = torch.stack(jepa_terms).mean()
    local = localisation_loss(state.loc_mlp, batch_pairs)
    comb = combined_loss(jepa, local, lam)
    if not torch.isfinite(comb):
        raise NumericError(
            f"non-finite loss at step {state.step}: "
            f"jepa={jepa.item()}, local={local.item()}"
        )
    state.opt.zero_grad()
    comb.backward()
    clip_val = cfg["schedule"]["grad_clip"]
    if clip_val:
        torch.nn.utils.clip_grad_norm_(list(state.opt.params.values()), clip_val)
    lr = lr_at(state.step, schedule)
    state.opt.step(lr)
    m = ema_momentum_at(state.step, schedule.total_steps,
                        cfg["schedule"]["ema_momentum_start"],
                        cfg["schedule"]["ema_momentum_end"])
    ema_update(state.target_encoder, state.encoder, m)
    state.step += 1
    return LossBreakdown(jepa.item(), local.item(), comb.item(), lam)


def pretrain_schedule(cfg: dict) -> Schedule:
    s = cfg["schedule"]
    return Schedule(s["pretrain_base_lr"], s["pretrain_final_lr"],
                    s["pretrain_warmup_steps"], s["pretrain_steps"])


def probe_schedule(cfg: dict) -> Schedule:
    s = cfg["schedule"]
    return Schedule(s["probe_base_lr"], s["probe_final_lr"],
                    s["probe_warmup_steps"], s["probe_steps"])


def run_pretrain(state: PretrainState, videos: list[np.ndarray], n_steps: int,
                 log_path=None) -> list[dict]:
    schedule = pretrain_schedule(state.cfg)
    records = []
    log_fh = open(log_path, "a") if log_path else None
    try:
        for _ in range(n_steps):
            clips, _ = _sample_batch(videos, state.cfg, state.gen)
            lr = lr_at(state.step, schedule)
            ema_m = ema_momentum_at(state.step, schedule.total_steps,
                                    state.cfg["schedule"]["ema_momentum_start"],
                                    state.cfg["schedule"]["ema_momentum_end"])
            bd = pretrain_step(state, clips, schedule)
            rec = {"step": state.step - 1, "jepa": bd.jepa, "local": bd.local,
                   "combined": bd.combined, "lambda": bd.lam, "lr": lr,
                   "ema_m": ema_m}
            records.append(rec)
            if log_fh:
                log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
    finally:
        if log_fh:
            log_fh.close()
    return records


@dataclass
class ProbeState:
    cfg: dict
    grid: TokenGrid
    encoder: Encoder  # fully frozen
    probe: AttentiveProbe
    decoder: SegDecoder
    opt: AdamW
    gen: torch.Generator
    step: int = 0

    @property
    def modules(self) -> dict:
        return {"encoder": self.encoder, "probe": self.probe, "decoder": self.decoder}


def build_probe_state(cfg: dict, seed: int, encoder: Encoder | None = None) -> ProbeState:
    torch.manual_seed(seed)
    grid = _grid_from_config(cfg)
    if encoder is None:
        encoder = Encoder(grid, _vit_config(cfg))
    for p in encoder.parameters():
        p.requires_grad_(False)
    m = cfg["model"]
    num_classes = cfg["data"]["num_classes"] + 1  # + background
    probe = AttentiveProbe(grid, m["embed_dim"], m["probe_dim"], m["probe_heads"])
    decoder = SegDecoder(grid, m["probe_dim"], num_classes)
    opt = AdamW(trainable_params({"probe": probe, "decoder": decoder}),
                weight_decay=cfg["schedule"]["weight_decay"])
    gen = torch.Generator().manual_seed(seed)
    return ProbeState(cfg, grid, encoder, probe, decoder, opt, gen)


def probe_step(state: ProbeState, clips: torch.Tensor, labels: torch.Tensor,
               schedule: Schedule) -> float:
    if clips.shape != labels.shape:
        raise ValueError(f"clip shape {tuple(clips.shape)} != label shape "
                         f"{tuple(labels.shape)}")
    losses = []
    for b in range(clips.shape[0]):
        with torch.no_grad():
            frozen = encode_full(clips[b], state.encoder)
        frozen.embeddings = frozen.embeddings.detach()
        feats = state.probe(frozen)
        logits = state.decoder(feats)  # [T, H, W, C]
        losses.append(F.cross_entropy(
            logits.reshape(-1, logits.shape[-1]), labels[b].reshape(-1)))
    loss = torch.stack(losses).mean()
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite probe loss at step {state.step}")
    state.opt.zero_grad()
    loss.backward()
    clip_val = state.cfg["schedule"]["grad_clip"]
    if clip_val:
        torch.nn.utils.clip_grad_norm_(list(state.opt.params.values()), clip_val)
    state.opt.step(lr_at(state.step, schedule))
    state.step += 1
    return loss.item()


def run_probe_training(state: ProbeState, videos: list[np.ndarray],
                       labels: list[np.ndarray], n_steps: int,
                       log_path=None) -> list[dict]:
    schedule = probe_schedule(state.cfg)
    records = []
    log_fh = open(log_path, "a") if log_path else None
    try:
        for _ in range(n_steps):
            clips, labs = _sample_batch(videos, state.cfg, state.gen, labels)
            lr = lr_at(state.step, schedule)
            loss = probe_step(state, clips, labs, schedule)
            rec = {"step": state.step - 1, "loss": loss, "lr": lr}
            records.append(rec)
            if log_fh:
                log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
    finally:
        if log_fh:
            log_fh.close()
    return records


def predict_segmentation(state: ProbeState, clip: torch.Tensor) -> np.ndarray:
    """Argmax class labels for one clip, [T, H, W] int32."""
    with torch.no_grad():
        frozen = encode_full(clip, state.encoder)
        feats = state.probe(frozen)
        logits = state.decoder(feats)
        return logits.argmax(dim=-1).numpy().astype(np.int32)


# -- Checkpoints: zip container of VTNS tensors plus a JSON manifest.

def save_checkpoint(path, kind: str, cfg: dict, step: int,
                    modules: dict[str, torch.nn.Module], opt: AdamW,
                    gen: torch.Generator) -> None:
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        manifest = {"kind": kind, "config": cfg, "step": step, "adam_t": opt.t}
        zf.writestr("manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
        for prefix, module in modules.items():
            for name, p in module.state_dict().items():
                zf.writestr(f"params/{prefix}.{name}.vtns",
                            tensor_to_bytes(p.detach().numpy()))
        for name, t in opt.m.items():
            zf.writestr(f"opt/m/{name}.vtns", tensor_to_bytes(t.numpy()))
        for name, t in opt.v.items():
            zf.writestr(f"opt/v/{name}.vtns", tensor_to_bytes(t.numpy()))
        zf.writestr("rng/gen.bin", gen.get_state().numpy().tobytes())


def _load_entries(zf: zipfile.ZipFile, prefix: str) -> dict[str, np.ndarray]:
    out = {}
    for info in zf.infolist():
        if info.filename.startswith(prefix) and info.filename.endswith(".vtns"):
            key = info.filename[len(prefix):-len(".vtns")]
            out[key] = tensor_from_bytes(zf.read(info))
    return out


def _restore_modules(modules: dict[str, torch.nn.Module],
                     params: dict[str, np.ndarray]) -> None:
    mismatches = []
    for prefix, module in modules.items():
        sd = module.state_dict()
        new_sd = {}
        for name, tensor in sd.items():
            key = f"{prefix}.{name}"
            if key not in params:
                mismatches.append(f"missing parameter {key}")
                continue
            loaded = torch.from_numpy(params[key])
            if tuple(loaded.shape) != tuple(tensor.shape):
                mismatches.append(
                    f"shape mismatch for {key}: checkpoint {tuple(loaded.shape)} "
                    f"vs config {tuple(tensor.shape)}"
                )
                continue
            new_sd[name] = loaded.to(tensor.dtype)
        if not mismatches:
            module.load_state_dict(new_sd)
    if mismatches:
        raise CheckpointError("; ".join(mismatches))


def _restore_opt(opt: AdamW, zf: zipfile.ZipFile, adam_t: int) -> None:
    m_entries = _load_entries(zf, "opt/m/")
    v_entries = _load_entries(zf, "opt/v/")
    for name in opt.params:
        if name in m_entries:
            opt.m[name] = torch.from_numpy(m_entries[name])
            opt.v[name] = torch.from_numpy(v_entries[name])
    opt.t = adam_t


def _restore_gen(gen: torch.Generator, zf: zipfile.ZipFile) -> None:
    raw = np.frombuffer(zf.read("rng/gen.bin"), dtype=np.uint8).copy()
    gen.set_state(torch.from_numpy(raw))


def load_checkpoint_manifest(path) -> dict:
    with zipfile.ZipFile(path) as zf:
        return json.loads(zf.read("manifest.json"))


def load_pretrain_state(path) -> PretrainState:
    manifest = load_checkpoint_manifest(path)
    if manifest["kind"] != "pretrain":
        raise CheckpointError(f"expected a pretrain checkpoint, got {manifest['kind']!r}")
    cfg = manifest["config"]
    state = build_pretrain_state(cfg, seed=0)
    with zipfile.ZipFile(path) as zf:
        params = _load_entries(zf, "params/")
        _restore_modules(state.modules, params)
        _restore_opt(state.opt, zf, manifest["adam_t"])
        _restore_gen(state.gen, zf)
    state.step = manifest["step"]
    return state


def load_probe_state(path) -> ProbeState:
    manifest = load_checkpoint_manifest(path)
    if manifest["kind"] != "probe":
        raise CheckpointError(f"expected a probe checkpoint, got {manifest['kind']!r}")
    cfg = manifest["config"]
    state = build_probe_state(cfg, seed=0)
    with zipfile.ZipFile(path) as zf:
        params = _load_entries(zf, "params/")
        _restore_modules(state.modules, params)
        _restore_opt(state.opt, zf, manifest["adam_t"])
        _restore_gen(state.gen, zf)
    state.step = manifest["step"]
    return state


def load_encoder_from_checkpoint(path, cfg: dict) -> Encoder:
    """Context encoder weights from a pretraining checkpoint, shape-validated."""
    manifest = load_checkpoint_manifest(path)
    torch.manual_seed(0)
    encoder = Encoder(_grid_from_config(cfg), _vit_config(cfg))
    with zipfile.ZipFile(path) as zf:
        params = _load_entries(zf, "params/")
    _restore_modules({"encoder": encoder}, params)
    return encoder


def pretrain_videos(dataset_root, split: str = "train") -> list[np.ndarray]:
    vids = dataio.list_videos(dataset_root, split)
    if not vids:
        raise FileNotFoundError(f"no videos under {dataset_root}/{split}")
    return [dataio.load_video(dataset_root, split, v)[0] for v in vids]


def labelled_videos(dataset_root, split: str, ids=None):
    vids = ids if ids is not None else dataio.list_videos(dataset_root, split)
    frames, labels = [], []
    for v in vids:
        f, l = dataio.load_video(dataset_root, split, v)
        if l is None:
            raise FileNotFoundError(f"video {v} in split {split!r} has no labels")
        frames.append(f)
        labels.append(l)
    return vids, frames, labels
