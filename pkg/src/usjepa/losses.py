"""Training objectives: latent feature prediction, relative localisation, mix."""

from __future__ import annotations

import json
from dataclasses import dataclass

import torch

from .tokenizer import EmbeddingSeq, MaskPartition


@dataclass
class LossBreakdown:
    jepa: float
    local: float
    combined: float
    lam: float

    def to_json(self, **extra) -> str:
        rec = {"jepa": self.jepa, "local": self.local,
               "combined": self.combined, "lambda": self.lam}
        rec.update(extra)
        return json.dumps(rec, sort_keys=True)


def jepa_loss(pred: EmbeddingSeq, target: EmbeddingSeq) -> torch.Tensor:
    """Mean absolute difference between predicted and target representations.

    Mean over tokens and dimensions keeps the loss scale independent of the
    mask size, so the combination weight means the same thing everywhere.
    Target rows must already be layer-normalized and detached.
    """
    if pred.positions != target.positions:
        raise ValueError("prediction and target position lists differ")
    return (pred.embeddings - target.embeddings).abs().mean()


def sample_pairs(mask: MaskPartition, n_pairs: int = 100,
                 generator: torch.Generator | None = None,
                 allow_self_pairs: bool = False) -> list[tuple[tuple, tuple]]:
    """Ordered index pairs drawn uniformly (with replacement) from the masked set."""
    m = len(mask.masked)
    if m < 2:
        raise ValueError(f"need at least 2 masked tokens, have {m}")
    a = torch.randint(0, m, (n_pairs,), generator=generator)
    b = torch.randint(0, m, (n_pairs,), generator=generator)
    if not allow_self_pairs:
        clash = a == b
        while clash.any():
            b = torch.where(clash, torch.randint(0, m, (n_pairs,), generator=generator), b)
            clash = a == b
    return [(mask.masked[x], mask.masked[y]) for x, y in zip(a.tolist(), b.tolist())]


def relative_offset(m1, m2, grid_dims) -> tuple[float, float, float]:
    """Normalised (temporal, vertical, horizontal) displacement of m1 from m2."""
    gt, gi, gj = grid_dims
    for name, idx, bound in (("m1", m1, (gt, gi, gj)), ("m2", m2, (gt, gi, gj))):
        for axis, (v, b) in enumerate(zip(idx, bound)):
            if not 0 <= v < b:
                raise ValueError(f"{name} component {axis} = {v} out of bounds [0, {b})")
    return ((m1[0] - m2[0]) / gt, (m1[1] - m2[1]) / gi, (m1[2] - m2[2]) / gj)


def offsets_tensor(pairs, grid_dims, dtype=torch.float32) -> torch.Tensor:
    return torch.tensor([relative_offset(a, b, grid_dims) for a, b in pairs], dtype=dtype)


def localisation_loss(loc_mlp, batch_pairs) -> torch.Tensor:
    """Mean over all pairs in the batch of the squared error on the offset.

    `batch_pairs` is a list (one entry per batch item) of tuples
    (e1 [n, D], e2 [n, D], delta [n, 3]); normalisation is by the total
    pair count n_pairs * B.
    """
    if not batch_pairs:
        raise ValueError("empty pair set")
    total = 0
    acc = None
    for e1, e2, delta in batch_pairs:
        if e1.shape[0] == 0:
            raise ValueError("empty pair set for a batch item")
        pred = loc_mlp(torch.cat([e1, e2], dim=1))
        sq = ((pred - delta) ** 2).sum()
        acc = sq if acc is None else acc + sq
        total += e1.shape[0]
    return acc / total


def combined_loss(jepa: torch.Tensor, local: torch.Tensor, lam: float) -> torch.Tensor:
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    return lam * jepa + (1.0 - lam) * local
