"""Tubelet tokenization, 3D sinusoidal positions, and context/target masking."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn


class MaskError(ValueError):
    pass


@dataclass(frozen=True)
class TokenGrid:
    t: int
    i: int
    j: int
    tubelet: tuple[int, int, int]  # (frames_per_tubelet, patch_h, patch_w)
    embed_dim: int

    @classmethod
    def for_clip(cls, T: int, H: int, W: int, tubelet: tuple[int, int, int],
                 embed_dim: int) -> "TokenGrid":
        ft, ph, pw = tubelet
        for axis, size, patch in (("temporal", T, ft), ("vertical", H, ph),
                                  ("horizontal", W, pw)):
            if size % patch:
                raise ValueError(
                    f"{axis} size {size} not divisible by tubelet size {patch}"
                )
        return cls(T // ft, H // ph, W // pw, (ft, ph, pw), embed_dim)

    @property
    def n_tokens(self) -> int:
        return self.t * self.i * self.j

    def positions(self) -> list[tuple[int, int, int]]:
        """All (t, i, j) indices in row-major token order."""
        return [(a, b, c) for a in range(self.t)
                for b in range(self.i) for c in range(self.j)]

    def flat_index(self, pos: tuple[int, int, int]) -> int:
        a, b, c = pos
        return (a * self.i + b) * self.j + c


@dataclass
class EmbeddingSeq:
    embeddings: torch.Tensor  # [n_tokens, D]
    positions: list[tuple[int, int, int]]

    def __post_init__(self):
        if self.embeddings.shape[0] != len(self.positions):
            raise ValueError("positions length must equal token count")


@dataclass
class MaskPartition:
    masked: list[tuple[int, int, int]]
    visible: list[tuple[int, int, int]]

    def __post_init__(self):
        self.masked = sorted(self.masked)
        self.visible = sorted(self.visible)
        if set(self.masked) & set(self.visible):
            raise MaskError("masked and visible sets overlap")
        if len(self.masked) < 2:
            raise MaskError("need at least 2 masked tokens for pair sampling")
        if not self.visible:
            raise MaskError("visible set must be non-empty")


class PatchProjector(nn.Module):
    """Linear projection of flattened tubelets to the embedding dimension."""

    def __init__(self, grid: TokenGrid, dtype=torch.float32):
        super().__init__()
        ft, ph, pw = grid.tubelet
        fan_in = ft * ph * pw
        self.proj = nn.Linear(fan_in, grid.embed_dim, dtype=dtype)
        bound = 1.0 / math.sqrt(fan_in)
        nn.init.uniform_(self.proj.weight, -bound, bound)
        nn.init.zeros_(self.proj.bias)

    def forward(self, blocks: torch.Tensor) -> torch.Tensor:
        return self.proj(blocks)


def clip_to_blocks(clip: torch.Tensor, grid: TokenGrid) -> torch.Tensor:
    """[T, H, W] -> [n_tokens, ft*ph*pw], row-major in (t, i, j)."""
    ft, ph, pw = grid.tubelet
    T, H, W = clip.shape
    if T != grid.t * ft or H != grid.i * ph or W != grid.j * pw:
        for axis, size, patch in (("temporal", T, ft), ("vertical", H, ph),
                                  ("horizontal", W, pw)):
            if size % patch:
                raise ValueError(
                    f"{axis} size {size} not divisible by tubelet size {patch}"
                )
        raise ValueError("clip shape does not match grid")
    x = clip.reshape(grid.t, ft, grid.i, ph, grid.j, pw)
    x = x.permute(0, 2, 4, 1, 3, 5)
    return x.reshape(grid.n_tokens, ft * ph * pw)


def tokenize(clip: torch.Tensor, grid: TokenGrid, patch_proj: PatchProjector) -> EmbeddingSeq:
    """Flatten non-overlapping tubelets and project; positions not yet added."""
    blocks = clip_to_blocks(clip, grid)
    return EmbeddingSeq(patch_proj(blocks), grid.positions())


def _sincos_band(coords: torch.Tensor, width: int, dtype) -> torch.Tensor:
    """Fixed sin-cos encoding of integer coordinates into `width` dims."""
    half = width // 2
    freqs = torch.arange(half, dtype=dtype)
    inv = 1.0 / (10000.0 ** (freqs / half))
    ang = coords.to(dtype)[:, None] * inv[None, :]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)


def positional_embedding(grid: TokenGrid, embed_dim: int | None = None,
                         dtype=torch.float32) -> torch.Tensor:
    """Deterministic 3D sin-cos embedding, [n_tokens, D] in token order.

    Band split: D/2 temporal, D/4 vertical, D/4 horizontal; each band needs
    an even width, so D must be divisible by 8.
    """
    D = embed_dim if embed_dim is not None else grid.embed_dim
    if D % 8:
        raise ValueError(
            f"embedding dim {D} must be divisible by 8 "
            "(temporal band D/2, spatial bands D/4 each, sin-cos pairs)"
        )
    pos = torch.tensor(grid.positions(), dtype=torch.int64)
    bands = [
        _sincos_band(pos[:, 0], D // 2, dtype),
        _sincos_band(pos[:, 1], D // 4, dtype),
        _sincos_band(pos[:, 2], D // 4, dtype),
    ]
    return torch.cat(bands, dim=1)


def make_mask(grid: TokenGrid, strategy: str, ratio: float,
              generator: torch.Generator) -> MaskPartition:
    """Context/target partition of the token grid.

    multiblock: rectangular spatial blocks extended across all tubelets,
    unioned until the masked fraction reaches `ratio`.  random: uniform
    token masking at exactly the given ratio.
    """
    if not 0.0 < ratio < 1.0:
        raise MaskError(f"mask ratio must be in (0, 1), got {ratio}")
    all_pos = grid.positions()
    n = grid.n_tokens
    if strategy == "random":
        k = round(ratio * n)
        if k < 2 or k > n - 1:
            raise MaskError(f"ratio {ratio} leaves an invalid partition on {n} tokens")
        perm = torch.randperm(n, generator=generator).tolist()
        masked_ids = set(perm[:k])
        masked = [all_pos[x] for x in sorted(masked_ids)]
        visible = [all_pos[x] for x in range(n) if x not in masked_ids]
        return MaskPartition(masked, visible)
    if strategy != "multiblock":
        raise MaskError(f"unknown mask strategy {strategy!r}")

    n_cells = grid.i * grid.j
    target_cells = ratio * n_cells
    if round(ratio * n) < 2:
        raise MaskError(f"ratio {ratio} leaves fewer than 2 masked tokens")
    target_cells = min(target_cells, n_cells - 1)  # keep one visible cell
    masked_cells: set[tuple[int, int]] = set()
    # Each block aims for roughly half the remaining target so a few blocks
    # overlap into an organic union, as in time-extended multi-block masking.
    while len(masked_cells) < target_cells:
        remaining = max(target_cells - len(masked_cells), 1.0)
        area = max(remaining * 0.6, 2.0)
        aspect = 0.75 + 0.75 * torch.rand((), generator=generator).item()
        h = max(1, min(grid.i, round(math.sqrt(area * aspect))))
        w = max(1, min(grid.j, round(math.sqrt(area / aspect))))
        top = int(torch.randint(0, grid.i - h + 1, (), generator=generator))
        left = int(torch.randint(0, grid.j - w + 1, (), generator=generator))
        for bi in range(top, top + h):
            for bj in range(left, left + w):
                if len(masked_cells) >= target_cells:
                    break
                if len(masked_cells) >= n_cells - 1:
                    break  # keep at least one visible spatial cell
                masked_cells.add((bi, bj))
    masked = [(a, b, c) for a in range(grid.t) for (b, c) in sorted(masked_cells)]
    visible = [p for p in all_pos if (p[1], p[2]) not in masked_cells]
    return MaskPartition(masked, visible)
