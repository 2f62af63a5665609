"""Networks: context/EMA encoders, predictor, localisation MLP, probe, decoder."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .tokenizer import (
    EmbeddingSeq,
    MaskPartition,
    PatchProjector,
    TokenGrid,
    positional_embedding,
    tokenize,
)


@dataclass
class ViTConfig:
    depth: int = 4
    embed_dim: int = 64
    heads: int = 4
    mlp_ratio: float = 4.0
    frozen_blocks: int = 0

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")
        if not 0 <= self.frozen_blocks <= self.depth:
            raise ValueError("frozen_blocks must be in [0, depth]")


def _init_trunc_normal(module: nn.Module, std: float = 0.02) -> None:
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int, dtype=torch.float32):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3, dtype=dtype)
        self.proj = nn.Linear(dim, dim, dtype=dtype)

    def forward(self, x):
        n, d = x.shape
        qkv = self.qkv(x).reshape(n, 3, self.heads, d // self.heads)
        q, k, v = qkv.permute(1, 2, 0, 3)  # [heads, n, dh] each
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(0, 1).reshape(n, d)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int, dtype=torch.float32):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden, dtype=dtype)
        self.fc2 = nn.Linear(hidden, dim, dtype=dtype)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float, dtype=torch.float32):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, dtype=dtype)
        self.attn = Attention(dim, heads, dtype=dtype)
        self.norm2 = nn.LayerNorm(dim, dtype=dtype)
        self.mlp = Mlp(dim, int(dim * mlp_ratio), dtype=dtype)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class Encoder(nn.Module):
    """ViT trunk over token embeddings; owns the patch projection."""

    def __init__(self, grid: TokenGrid, cfg: ViTConfig, dtype=torch.float32):
        super().__init__()
        self.grid = grid
        self.cfg = cfg
        self.patch_proj = PatchProjector(grid, dtype=dtype)
        self.blocks = nn.ModuleList(
            Block(cfg.embed_dim, cfg.heads, cfg.mlp_ratio, dtype=dtype)
            for _ in range(cfg.depth)
        )
        self.norm = nn.LayerNorm(cfg.embed_dim, dtype=dtype)
        for blk in self.blocks:
            _init_trunc_normal(blk)
        self.register_buffer(
            "pos_embed", positional_embedding(grid, cfg.embed_dim, dtype=dtype),
            persistent=False,
        )

    def trunk(self, x):
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)

    def apply_freeze(self) -> None:
        """Freeze the patch projection plus the first frozen_blocks blocks.

        The projection sits before block 0, so any frozen prefix includes it;
        frozen_blocks == depth freezes the whole encoder (final norm too).
        """
        k = self.cfg.frozen_blocks
        if k > 0:
            for p in self.patch_proj.parameters():
                p.requires_grad_(False)
        for blk in list(self.blocks)[:k]:
            for p in blk.parameters():
                p.requires_grad_(False)
        if k == self.cfg.depth:
            for p in self.norm.parameters():
                p.requires_grad_(False)


def _rows_for(positions, grid: TokenGrid) -> torch.Tensor:
    return torch.tensor([grid.flat_index(p) for p in positions], dtype=torch.long)


def encode_context(tokens: EmbeddingSeq, mask: MaskPartition, encoder: Encoder) -> EmbeddingSeq:
    """Positions added, masked tokens dropped, ViT run over visible only."""
    if len(tokens.positions) != encoder.grid.n_tokens:
        raise ValueError("context encoding expects tokens covering the full grid")
    if not mask.visible:
        raise ValueError("empty visible set")
    x = tokens.embeddings + encoder.pos_embed
    rows = _rows_for(mask.visible, encoder.grid)
    return EmbeddingSeq(encoder.trunk(x[rows]), list(mask.visible))


def encode_target(tokens: EmbeddingSeq, mask: MaskPartition, ema_encoder: Encoder) -> EmbeddingSeq:
    """EMA encoder over the full clip; keep masked rows, layer-norm, detach."""
    x = tokens.embeddings + ema_encoder.pos_embed
    out = ema_encoder.trunk(x)
    rows = _rows_for(mask.masked, ema_encoder.grid)
    kept = F.layer_norm(out[rows], out.shape[-1:])
    return EmbeddingSeq(kept.detach(), list(mask.masked))


class Predictor(nn.Module):
    """Narrow ViT predicting masked-token representations from context.

    Width D/2 and depth max(2, encoder_depth // 6); masked positions are
    queried with a learnable mask token plus projected positional encoding.
    """

    def __init__(self, grid: TokenGrid, encoder_cfg: ViTConfig, dtype=torch.float32):
        super().__init__()
        self.grid = grid
        D = encoder_cfg.embed_dim
        self.dim = max(encoder_cfg.heads, D // 2)
        self.depth = max(2, encoder_cfg.depth // 6)
        self.embed = nn.Linear(D, self.dim, dtype=dtype)
        self.pos_proj = nn.Linear(D, self.dim, bias=False, dtype=dtype)
        self.mask_token = nn.Parameter(torch.zeros(self.dim, dtype=dtype))
        nn.init.trunc_normal_(self.mask_token, std=0.02)
        self.blocks = nn.ModuleList(
            Block(self.dim, encoder_cfg.heads, encoder_cfg.mlp_ratio, dtype=dtype)
            for _ in range(self.depth)
        )
        self.norm = nn.LayerNorm(self.dim, dtype=dtype)
        self.out_proj = nn.Linear(self.dim, D, dtype=dtype)
        for blk in self.blocks:
            _init_trunc_normal(blk)
        self.register_buffer(
            "pos_embed", positional_embedding(grid, D, dtype=dtype), persistent=False
        )

    def forward(self, context: EmbeddingSeq, masked_positions) -> EmbeddingSeq:
        if not masked_positions:
            raise ValueError("empty masked_positions")
        if set(masked_positions) & set(context.positions):
            raise ValueError("masked_positions overlap context positions")
        ctx_rows = _rows_for(context.positions, self.grid)
        qry_rows = _rows_for(masked_positions, self.grid)
        x_ctx = self.embed(context.embeddings) + self.pos_proj(self.pos_embed[ctx_rows])
        x_qry = self.mask_token + self.pos_proj(self.pos_embed[qry_rows])
        x = torch.cat([x_ctx, x_qry], dim=0)
        for blk in self.blocks:
            x = blk(x)
        x = self.norm(x)
        preds = self.out_proj(x[len(context.positions):])
        return EmbeddingSeq(preds, list(masked_positions))


def predict_masked(context: EmbeddingSeq, masked_positions, predictor: Predictor) -> EmbeddingSeq:
    return predictor(context, list(masked_positions))


class LocalisationMLP(nn.Module):
    """Three fully connected layers regressing a 3D relative offset."""

    def __init__(self, embed_dim: int, dtype=torch.float32):
        super().__init__()
        D = embed_dim
        self.fc1 = nn.Linear(2 * D, D, dtype=dtype)
        self.fc2 = nn.Linear(D, max(1, D // 2), dtype=dtype)
        self.fc3 = nn.Linear(max(1, D // 2), 3, dtype=dtype)
        _init_trunc_normal(self)

    def forward(self, pair: torch.Tensor) -> torch.Tensor:
        if pair.shape[-1] != self.fc1.in_features:
            raise ValueError(
                f"pair width {pair.shape[-1]} != expected {self.fc1.in_features}"
            )
        x = F.gelu(self.fc1(pair))
        x = F.gelu(self.fc2(x))
        return self.fc3(x)


class AttentiveProbe(nn.Module):
    """Per-position learnable queries cross-attending over frozen tokens.

    One query per token position (position-embedding-initialized) keeps the
    spatial layout for dense segmentation; a single multi-head attention
    block plus MLP forms the readout.
    """

    def __init__(self, grid: TokenGrid, in_dim: int, probe_dim: int, heads: int,
                 dtype=torch.float32):
        super().__init__()
        self.grid = grid
        self.heads = heads
        self.probe_dim = probe_dim
        self.scale = (probe_dim // heads) ** -0.5
        self.queries = nn.Parameter(
            positional_embedding(grid, probe_dim, dtype=dtype).clone()
        )
        self.q_proj = nn.Linear(probe_dim, probe_dim, dtype=dtype)
        self.k_proj = nn.Linear(in_dim, probe_dim, dtype=dtype)
        self.v_proj = nn.Linear(in_dim, probe_dim, dtype=dtype)
        self.out_proj = nn.Linear(probe_dim, probe_dim, dtype=dtype)
        self.norm = nn.LayerNorm(probe_dim, dtype=dtype)
        self.mlp = Mlp(probe_dim, probe_dim * 2, dtype=dtype)
        _init_trunc_normal(self.mlp)

    def forward(self, frozen_tokens: EmbeddingSeq) -> torch.Tensor:
        n = frozen_tokens.embeddings.shape[0]
        if n != self.grid.n_tokens:
            raise ValueError(f"expected {self.grid.n_tokens} tokens, got {n}")
        # Reorder inputs to canonical token order so any input ordering works.
        rows = _rows_for(frozen_tokens.positions, self.grid)
        order = torch.argsort(rows)
        tokens = frozen_tokens.embeddings[order]

        nh, dh = self.heads, self.probe_dim // self.heads
        q = self.q_proj(self.queries).reshape(n, nh, dh).transpose(0, 1)
        k = self.k_proj(tokens).reshape(n, nh, dh).transpose(0, 1)
        v = self.v_proj(tokens).reshape(n, nh, dh).transpose(0, 1)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        out = (attn.softmax(dim=-1) @ v).transpose(0, 1).reshape(n, self.probe_dim)
        out = self.queries + self.out_proj(out)
        out = out + self.mlp(self.norm(out))
        return out.reshape(self.grid.t, self.grid.i, self.grid.j, self.probe_dim)


class SegDecoder(nn.Module):
    """Two transposed convolutions upsampling grid features to per-frame logits."""

    def __init__(self, grid: TokenGrid, probe_dim: int, num_classes: int,
                 dtype=torch.float32):
        super().__init__()
        ft, ph, pw = grid.tubelet
        if ph != pw:
            raise ValueError("decoder requires square patches")
        s = math.isqrt(ph)
        if s * s != ph:
            raise ValueError(f"patch size {ph} is not a perfect square (need s*s)")
        self.grid = grid
        self.stride = s
        self.frames_per_tubelet = ft
        self.up1 = nn.ConvTranspose2d(probe_dim, probe_dim // 2, s, stride=s, dtype=dtype)
        self.up2 = nn.ConvTranspose2d(probe_dim // 2, num_classes, s, stride=s, dtype=dtype)

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        t, i, j, dp = feats.shape
        x = feats.permute(0, 3, 1, 2)  # [t, D_p, i, j]
        x = F.gelu(self.up1(x))
        x = self.up2(x)  # [t, C, H, W]
        x = x.permute(0, 2, 3, 1)  # [t, H, W, C]
        # Each tubelet's logits are duplicated across its frames.
        x = x.repeat_interleave(self.frames_per_tubelet, dim=0)
        return x


@torch.no_grad()
def ema_update(target: nn.Module, online: nn.Module, momentum: float) -> None:
    """target <- m * target + (1 - m) * online, outside any tape."""
    if not 0.0 <= momentum <= 1.0:
        raise ValueError(f"momentum must be in [0, 1], got {momentum}")
    t_params = dict(target.named_parameters())
    o_params = dict(online.named_parameters())
    if t_params.keys() != o_params.keys():
        raise ValueError("parameter name mismatch between target and online nets")
    for name, tp in t_params.items():
        op = o_params[name]
        if tp.shape != op.shape:
            raise ValueError(f"shape mismatch for {name}: {tp.shape} vs {op.shape}")
        tp.mul_(momentum).add_(op, alpha=1.0 - momentum)


def make_target_encoder(encoder: Encoder) -> Encoder:
    """EMA copy of the context encoder; never receives gradients."""
    target = copy.deepcopy(encoder)
    for p in target.parameters():
        p.requires_grad_(False)
    return target


def encode_full(clip: torch.Tensor, encoder: Encoder) -> EmbeddingSeq:
    """Full unmasked clip through the encoder (probe input path)."""
    tokens = tokenize(clip, encoder.grid, encoder.patch_proj)
    x = tokens.embeddings + encoder.pos_embed
    return EmbeddingSeq(encoder.trunk(x), tokens.positions)
