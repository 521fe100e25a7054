"""Patch-based vision encoder with native variable-resolution support.

Images of any size (multiples of the patch size) become token grids; a batch
of mixed resolutions is processed as one packed sequence with per-item
attention, so each image's features are independent of its batch neighbours.
Position information enters twice: interpolated absolute embeddings at the
input and 2-d rotary embeddings inside every attention layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .errors import ConfigError, ContractError, StructureError
from .imaging import resize_to_multiple
from .nn import Attention, Linear, Mlp, Module, ModuleList, Parameter, RMSNorm
from .tensor import PackedSequence, Tensor, concat


@dataclass
class EncoderConfig:
    patch_size: int = 14
    base_grid: int = 32  # side of the positional-embedding grid the model was built with
    layers: int = 4
    heads: int = 4
    hidden_dim: int = 128
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.hidden_dim % (4 * self.heads) != 0:
            raise ConfigError(
                f"hidden_dim {self.hidden_dim} must be divisible by 4*heads={4 * self.heads} "
                "for 2-d rotary embeddings"
            )


@dataclass
class PatchGrid:
    rows: int
    cols: int
    tokens: Tensor  # [rows*cols, dim]

    def __post_init__(self):
        if self.rows * self.cols != self.tokens.shape[0]:
            raise StructureError(
                f"grid {self.rows}x{self.cols} disagrees with {self.tokens.shape[0]} tokens"
            )

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]


def _bilinear_matrix(target: int, base: int, dtype=np.float32) -> np.ndarray:
    w = np.zeros((target, base), dtype=np.float64)
    if target == 1:
        pos = np.array([(base - 1) / 2.0])
    else:
        pos = np.arange(target) * (base - 1) / (target - 1)
    lo = np.floor(pos).astype(int).clip(0, base - 1)
    hi = np.minimum(lo + 1, base - 1)
    frac = pos - lo
    for i in range(target):
        w[i, lo[i]] += 1.0 - frac[i]
        w[i, hi[i]] += frac[i]
    return w.astype(dtype)


def interpolate_pos_embed(base: Tensor, target_rows: int, target_cols: int) -> Tensor:
    """Bilinearly resample a square grid of embeddings to a new grid size.

    Differentiable w.r.t. the base table; exact identity (same object) when
    the target matches the base grid.
    """
    if target_rows < 1 or target_cols < 1:
        raise ContractError("target grid must be at least 1x1")
    n, dim = base.shape
    g = int(round(np.sqrt(n)))
    if g * g != n:
        raise StructureError(f"base positional table holds {n} rows, not a square grid")
    if (target_rows, target_cols) == (g, g):
        return base
    wr = Tensor(_bilinear_matrix(target_rows, g, base.dtype))
    wc = Tensor(_bilinear_matrix(target_cols, g, base.dtype))
    rows = wr @ base.reshape(g, g * dim)  # [tr, g*dim]
    cols = rows.reshape(target_rows, g, dim).transpose(1, 0, 2).reshape(g, target_rows * dim)
    out = wc @ cols  # [tc, tr*dim]
    return out.reshape(target_cols, target_rows, dim).transpose(1, 0, 2).reshape(
        target_rows * target_cols, dim
    )


class EncoderBlock(Module):
    def __init__(self, cfg: EncoderConfig, rng, dtype=np.float32):
        super().__init__()
        self.norm1 = RMSNorm(cfg.hidden_dim, dtype=dtype)
        self.attn = Attention(cfg.hidden_dim, cfg.heads, rng, dtype=dtype)
        self.norm2 = RMSNorm(cfg.hidden_dim, dtype=dtype)
        self.mlp = Mlp(cfg.hidden_dim, rng, hidden=cfg.mlp_ratio * cfg.hidden_dim, dtype=dtype)

    def forward(self, seq: PackedSequence, ropes) -> PackedSequence:
        normed = PackedSequence(self.norm1(seq.data), seq.lengths)
        attn_out = F.packed_attention(normed, self.attn, ropes=ropes)
        x = seq.data + attn_out.data
        x = x + self.mlp(self.norm2(x))
        return PackedSequence(x, seq.lengths)


class VisionEncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        p = cfg.patch_size
        self.patch_proj = Linear(p * p * 3, cfg.hidden_dim, rng, dtype=dtype)
        self.pos_embed = Parameter(
            (rng.standard_normal((cfg.base_grid**2, cfg.hidden_dim)) * 0.02).astype(dtype)
        )
        self.blocks = ModuleList(
            EncoderBlock(cfg, rng, dtype=dtype) for _ in range(cfg.layers)
        )
        self.final_norm = RMSNorm(cfg.hidden_dim, dtype=dtype)

    # -- geometry -------------------------------------------------------------

    def prepare(self, image: np.ndarray) -> np.ndarray:
        """Apply the shared resize policy (nearest patch multiple, bilinear)."""
        return resize_to_multiple(image, self.cfg.patch_size)

    def grid_shape(self, image: np.ndarray):
        p = self.cfg.patch_size
        h, w = image.shape[:2]
        if h % p or w % p:
            raise ContractError(
                f"image {h}x{w} is not a multiple of patch size {p}; resize first"
            )
        return h // p, w // p

    def patchify(self, image: np.ndarray) -> PatchGrid:
        """Cut an image into patch tokens and project them."""
        rows, cols = self.grid_shape(image)
        p = self.cfg.patch_size
        img = np.asarray(image, dtype=self.pos_embed.dtype)
        patches = (
            img.reshape(rows, p, cols, p, 3)
            .transpose(0, 2, 1, 3, 4)
            .reshape(rows * cols, p * p * 3)
        )
        tokens = self.patch_proj(Tensor(np.ascontiguousarray(patches)))
        return PatchGrid(rows, cols, tokens)

    def _rope(self, rows: int, cols: int):
        row_pos = np.repeat(np.arange(rows), cols)
        col_pos = np.tile(np.arange(cols), rows)
        return lambda x: F.rope_2d(x, row_pos, col_pos)

    # -- forward ----------------------------------------------------------------

    def encode(self, images) -> PackedSequence:
        """Encode a batch of images (possibly mixed sizes) as one packed sequence."""
        if not images:
            raise ContractError("encode() needs at least one image")
        tokens, lengths, ropes = [], [], []
        for image in images:
            grid = self.patchify(image)
            pos = interpolate_pos_embed(self.pos_embed, grid.rows, grid.cols)
            tokens.append(grid.tokens + pos)
            lengths.append(grid.rows * grid.cols)
            ropes.append(self._rope(grid.rows, grid.cols))
        seq = PackedSequence(concat(tokens, axis=0), lengths)
        for block in self.blocks:
            seq = block(seq, ropes)
        return PackedSequence(self.final_norm(seq.data), seq.lengths)

    def encode_one(self, image: np.ndarray) -> PatchGrid:
        """Encode a single image, returning its feature grid."""
        rows, cols = self.grid_shape(image)
        seq = self.encode([image])
        return PatchGrid(rows, cols, seq.data)
