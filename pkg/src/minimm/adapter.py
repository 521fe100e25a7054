"""Adapter from encoder patch features to language-model embeddings.

Pixel-shuffle compression trades spatial resolution for channel depth, a
linear head + softmax turns each compressed token into a probability
distribution over a learnable visual vocabulary, and the final embedding is
the distribution-weighted average of the vocabulary's embedding table.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .encoder import PatchGrid
from .errors import ConfigError, ShapeError, StructureError
from .nn import Linear, Module, Parameter
from .tensor import Tensor, concat, zeros


@dataclass
class AdapterConfig:
    compression: int = 2
    visual_vocab: int = 1024
    llm_dim: int = 128
    temperature: float = 1.0

    def __post_init__(self):
        if self.compression < 1:
            raise ConfigError("compression factor must be >= 1")
        if self.temperature <= 0:
            raise ConfigError("softmax temperature must be positive")


@dataclass
class VisualTokenDistribution:
    probs: Tensor  # [tokens, visual_vocab], rows sum to 1


def pixel_shuffle_compress(grid: PatchGrid, r: int) -> PatchGrid:
    """Fold r x r token neighbourhoods into channels; pure index rearrangement."""
    if r == 1:
        return grid
    if grid.rows % r or grid.cols % r:
        raise StructureError(
            f"grid {grid.rows}x{grid.cols} not divisible by compression {r}; pad first"
        )
    rows_out, cols_out = grid.rows // r, grid.cols // r
    d = grid.dim
    x = grid.tokens.reshape(rows_out, r, cols_out, r, d)
    x = x.transpose(0, 2, 1, 3, 4).reshape(rows_out * cols_out, r * r * d)
    return PatchGrid(rows_out, cols_out, x)


def inverse_pixel_shuffle(grid: PatchGrid, r: int, dim: int) -> PatchGrid:
    """Undo :func:`pixel_shuffle_compress` (channels back to an r x r block)."""
    if r == 1:
        return grid
    if grid.dim != r * r * dim:
        raise ShapeError(f"grid dim {grid.dim} is not {r}x{r} blocks of {dim}")
    x = grid.tokens.reshape(grid.rows, grid.cols, r, r, dim)
    x = x.transpose(0, 2, 1, 3, 4).reshape(grid.rows * r * grid.cols * r, dim)
    return PatchGrid(grid.rows * r, grid.cols * r, x)


def pad_grid(grid: PatchGrid, r: int) -> PatchGrid:
    """Zero-pad the bottom/right of a grid so both sides divide by r."""
    rows = -(-grid.rows // r) * r
    cols = -(-grid.cols // r) * r
    if (rows, cols) == (grid.rows, grid.cols):
        return grid
    d = grid.dim
    x = grid.tokens.reshape(grid.rows, grid.cols, d)
    if cols != grid.cols:
        pad = zeros((grid.rows, cols - grid.cols, d), dtype=grid.tokens.dtype)
        x = concat([x, pad], axis=1)
    if rows != grid.rows:
        pad = zeros((rows - grid.rows, cols, d), dtype=grid.tokens.dtype)
        x = concat([x, pad], axis=0)
    return PatchGrid(rows, cols, x.reshape(rows * cols, d))


class VisualAdapter(Module):
    def __init__(self, cfg: AdapterConfig, encoder_dim: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        in_dim = encoder_dim * cfg.compression**2
        self.head = Linear(in_dim, cfg.visual_vocab, rng, dtype=dtype)
        self.table = Parameter(
            (rng.standard_normal((cfg.visual_vocab, cfg.llm_dim)) * 0.02).astype(dtype)
        )

    def tokenize(self, grid: PatchGrid) -> VisualTokenDistribution:
        logits = self.head(grid.tokens)
        if self.cfg.temperature != 1.0:
            logits = logits * (1.0 / self.cfg.temperature)
        return VisualTokenDistribution(F.softmax(logits, axis=-1))

    def embed(self, dist: VisualTokenDistribution) -> Tensor:
        if dist.probs.shape[-1] != self.table.shape[0]:
            raise ShapeError(
                f"distribution over {dist.probs.shape[-1]} entries vs table of {self.table.shape[0]}"
            )
        return dist.probs @ self.table

    def forward(self, grid: PatchGrid) -> Tensor:
        """Full path: pad -> pixel shuffle -> tokenize -> embed; [m, llm_dim]."""
        compressed = pixel_shuffle_compress(pad_grid(grid, self.cfg.compression), self.cfg.compression)
        return self.embed(self.tokenize(compressed))
