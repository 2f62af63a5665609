import math

import pytest
import torch

from usjepa import tokenizer
from usjepa.tokenizer import (
    EmbeddingSeq,
    MaskError,
    MaskPartition,
    PatchProjector,
    TokenGrid,
    clip_to_blocks,
    make_mask,
    positional_embedding,
    tokenize,
)


def desk_grid(embed_dim=64):
    return TokenGrid.for_clip(8, 32, 32, (2, 4, 4), embed_dim)


class TestTokenGrid:
    def test_paper_scale_grid(self):
        grid = TokenGrid.for_clip(16, 224, 224, (2, 16, 16), 1024)
        assert (grid.t, grid.i, grid.j) == (8, 14, 14)
        assert grid.n_tokens == 1568

    def test_desk_scale_grid(self):
        grid = desk_grid()
        assert (grid.t, grid.i, grid.j) == (4, 8, 8)
        assert grid.n_tokens == 256

    @pytest.mark.parametrize("shape,axis", [
        ((15, 32, 32), "temporal"),
        ((8, 30, 32), "vertical"),
        ((8, 32, 30), "horizontal"),
    ])
    def test_indivisible_axis_named(self, shape, axis):
        with pytest.raises(ValueError, match=axis):
            TokenGrid.for_clip(*shape, (2, 4, 4), 64)

    def test_positions_row_major(self):
        grid = TokenGrid.for_clip(4, 8, 8, (2, 4, 4), 64)
        pos = grid.positions()
        assert pos[0] == (0, 0, 0)
        assert pos[1] == (0, 0, 1)
        assert pos[grid.j] == (0, 1, 0)
        assert pos[-1] == (1, 1, 1)
        for p in pos:
            assert pos[grid.flat_index(p)] == p


class TestTokenize:
    def test_zero_clip_zero_bias_gives_zero_embeddings(self):
        grid = desk_grid()
        proj = PatchProjector(grid)
        clip = torch.zeros(8, 32, 32)
        seq = tokenize(clip, grid, proj)
        assert torch.equal(seq.embeddings, torch.zeros(256, 64))

    def test_every_pixel_in_exactly_one_token(self):
        grid = desk_grid()
        clip = torch.arange(8 * 32 * 32, dtype=torch.float32).reshape(8, 32, 32)
        blocks = clip_to_blocks(clip, grid)
        seen = sorted(blocks.flatten().tolist())
        assert seen == sorted(clip.flatten().tolist())

    def test_block_content_matches_tubelet(self):
        grid = desk_grid()
        clip = torch.randn(8, 32, 32)
        blocks = clip_to_blocks(clip, grid)
        # token (t, i, j) = (1, 2, 3) covers frames 2:4, rows 8:12, cols 12:16
        idx = grid.flat_index((1, 2, 3))
        expected = clip[2:4, 8:12, 12:16].reshape(-1)
        assert torch.equal(blocks[idx], expected)

    def test_shape_mismatch_errors(self):
        grid = desk_grid()
        proj = PatchProjector(grid)
        with pytest.raises(ValueError):
            tokenize(torch.zeros(8, 32, 30), grid, proj)


class TestPositionalEmbedding:
    def test_pure_function(self):
        grid = desk_grid()
        a = positional_embedding(grid)
        b = positional_embedding(grid)
        assert torch.equal(a, b)

    def test_temporal_band_separation(self):
        grid = desk_grid()
        pe = positional_embedding(grid)
        D = grid.embed_dim
        p1 = pe[grid.flat_index((0, 3, 5))]
        p2 = pe[grid.flat_index((2, 3, 5))]
        assert not torch.equal(p1[: D // 2], p2[: D // 2])
        assert torch.equal(p1[D // 2:], p2[D // 2:])

    def test_l2_norm_from_sincos_identity(self):
        grid = desk_grid()
        pe = positional_embedding(grid)
        # each sin/cos pair contributes 1, and there are D/2 pairs
        expected = math.sqrt(grid.embed_dim / 2)
        assert torch.allclose(pe.norm(dim=1),
                              torch.full((grid.n_tokens,), expected), atol=1e-5)

    def test_indivisible_dim_rejected(self):
        grid = TokenGrid.for_clip(8, 32, 32, (2, 4, 4), 64)
        with pytest.raises(ValueError, match="divisible"):
            positional_embedding(grid, embed_dim=12)

    def test_unique_positions_unique_vectors(self):
        grid = TokenGrid.for_clip(4, 16, 16, (2, 4, 4), 32)
        pe = positional_embedding(grid)
        assert len({tuple(row.tolist()) for row in pe}) == grid.n_tokens


class TestMakeMask:
    def test_random_exact_count(self):
        grid = desk_grid()
        gen = torch.Generator().manual_seed(0)
        mask = make_mask(grid, "random", 0.5, gen)
        assert len(mask.masked) == 128
        assert len(mask.visible) == 128

    def test_partition_property(self):
        grid = desk_grid()
        gen = torch.Generator().manual_seed(1)
        for strategy in ("random", "multiblock"):
            mask = make_mask(grid, strategy, 0.75, gen)
            full = set(grid.positions())
            assert set(mask.masked) | set(mask.visible) == full
            assert not set(mask.masked) & set(mask.visible)

    def test_multiblock_time_extension(self):
        grid = desk_grid()
        gen = torch.Generator().manual_seed(2)
        mask = make_mask(grid, "multiblock", 0.6, gen)
        cells = {(i, j) for _, i, j in mask.masked}
        assert set(mask.masked) == {(t, i, j) for t in range(grid.t)
                                    for (i, j) in cells}

    def test_multiblock_high_ratio_bounds(self):
        grid = TokenGrid.for_clip(16, 224, 224, (2, 16, 16), 64)
        gen = torch.Generator().manual_seed(3)
        for _ in range(5):
            mask = make_mask(grid, "multiblock", 0.9, gen)
            frac = len(mask.masked) / grid.n_tokens
            assert 0.9 <= frac < 1.0
            assert mask.visible

    def test_seeded_determinism(self):
        grid = desk_grid()
        m1 = make_mask(grid, "multiblock", 0.75, torch.Generator().manual_seed(9))
        m2 = make_mask(grid, "multiblock", 0.75, torch.Generator().manual_seed(9))
        assert m1.masked == m2.masked

    def test_invalid_ratio_rejected(self):
        grid = desk_grid()
        gen = torch.Generator().manual_seed(0)
        for ratio in (0.0, 1.0, -0.2, 1.5):
            with pytest.raises(MaskError):
                make_mask(grid, "random", ratio, gen)

    def test_degenerate_partition_rejected(self):
        tiny = TokenGrid.for_clip(2, 4, 4, (2, 4, 4), 64)  # 1 token
        gen = torch.Generator().manual_seed(0)
        with pytest.raises(MaskError):
            make_mask(tiny, "random", 0.5, gen)

    def test_unknown_strategy(self):
        with pytest.raises(MaskError, match="strategy"):
            make_mask(desk_grid(), "checkerboard", 0.5, torch.Generator())


def test_mask_partition_validates():
    with pytest.raises(MaskError):
        MaskPartition(masked=[(0, 0, 0)], visible=[(0, 0, 1)])  # |masked| < 2
    with pytest.raises(MaskError):
        MaskPartition(masked=[(0, 0, 0), (0, 0, 1)], visible=[(0, 0, 1)])


def test_embedding_seq_length_check():
    with pytest.raises(ValueError):
        EmbeddingSeq(torch.zeros(3, 4), [(0, 0, 0)])
