"""Dual-stream diffusion transformer over VAE latents, trained by flow matching.

Visual tokens (patchified noisy latents, plus context-image latents when
editing) and condition tokens keep separate projections and MLPs but attend
jointly in every block. Rotary positions live on three axes: a context flag
axis that separates noisy from context tokens, and the latent row/column
grid; condition tokens sit at the origin of all three axes. A sinusoidal
timestep embedding summed with the condition's global vector drives
per-block scale/shift/gate modulation (zero-initialized).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .errors import ConfigError, ContractError, ShapeError
from .nn import Linear, Mlp, Module, ModuleList, Parameter, RMSNorm
from .refiner import BatchedCondition, ConditionBundle
from .tensor import MASK_VALUE, Tensor, concat

LATENT_CHANNELS = 4


@dataclass
class DecoderConfig:
    layers: int = 4
    heads: int = 4
    hidden: int = 128
    latent_patch: int = 2
    cond_dim: int = 128
    mlp_ratio: int = 4
    context_axis_offset: int = 1

    def __post_init__(self):
        if self.hidden % (4 * self.heads) != 0:
            raise ConfigError(
                f"hidden {self.hidden} must be divisible by 4*heads={4 * self.heads}"
            )

    @classmethod
    def toy(cls) -> "DecoderConfig":
        return cls(layers=4, heads=4, hidden=128)

    @classmethod
    def paper_scale(cls) -> "DecoderConfig":
        # Recorded for dry-run parameter accounting only; never trained here.
        return cls(layers=27, heads=16, hidden=2048, cond_dim=2048)


@dataclass
class FlowBatch:
    """One flow-matching training draw; x_t = (1-t) x0 + t eps, target eps - x0."""

    x0: np.ndarray
    eps: np.ndarray
    t: np.ndarray
    x_t: np.ndarray
    target_v: np.ndarray


def interpolant(x0: np.ndarray, eps: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Straight-line path x_t = (1 - t) x0 + t eps."""
    tb = np.asarray(t).reshape(-1, 1, 1, 1)
    return (1.0 - tb) * x0 + tb * eps


def make_flow_batch(x0: np.ndarray, rng: np.random.Generator) -> FlowBatch:
    x0 = np.asarray(x0)
    b = x0.shape[0]
    eps = rng.standard_normal(x0.shape).astype(x0.dtype)
    t = rng.uniform(0.0, 1.0, size=b).astype(x0.dtype)
    x_t = interpolant(x0, eps, t).astype(x0.dtype)
    return FlowBatch(x0=x0, eps=eps, t=t, x_t=x_t, target_v=eps - x0)


@dataclass
class DecoderInput:
    """Token-level view of one decoder call."""

    noisy_tokens: Tensor
    cond: BatchedCondition
    t: np.ndarray
    context_tokens: Tensor | None = None


class MMDiTBlock(Module):
    """Joint attention over [condition, visual] with per-stream parameters."""

    def __init__(self, cfg: DecoderConfig, rng, dtype=np.float32):
        super().__init__()
        h = cfg.hidden
        self.heads = cfg.heads
        self.head_dim = h // cfg.heads
        self.vis_norm1 = RMSNorm(h, dtype=dtype)
        self.vis_qkv = Linear(h, 3 * h, rng, dtype=dtype)
        self.vis_out = Linear(h, h, rng, dtype=dtype)
        self.vis_norm2 = RMSNorm(h, dtype=dtype)
        self.vis_mlp = Mlp(h, rng, hidden=cfg.mlp_ratio * h, dtype=dtype)
        self.vis_mod = Linear(h, 6 * h, rng, zero_init=True, dtype=dtype)
        self.cond_norm1 = RMSNorm(h, dtype=dtype)
        self.cond_qkv = Linear(h, 3 * h, rng, dtype=dtype)
        self.cond_out = Linear(h, h, rng, dtype=dtype)
        self.cond_norm2 = RMSNorm(h, dtype=dtype)
        self.cond_mlp = Mlp(h, rng, hidden=cfg.mlp_ratio * h, dtype=dtype)
        self.cond_mod = Linear(h, 6 * h, rng, zero_init=True, dtype=dtype)

    def _heads(self, qkv: Tensor, b: int, n: int):
        x = qkv.reshape(b, n, 3, self.heads, self.head_dim).transpose(2, 0, 3, 1, 4)
        return x[0], x[1], x[2]  # each [B, heads, n, head_dim]

    @staticmethod
    def _chunks(mod: Tensor, h: int):
        return [mod[:, None, i * h : (i + 1) * h] for i in range(6)]

    def forward(self, xv: Tensor, xc: Tensor, signal: Tensor, vis_rope, mask):
        b, nv, h = xv.shape
        nc = xc.shape[1]
        sv = self._chunks(self.vis_mod(F.silu(signal)), h)
        sc = self._chunks(self.cond_mod(F.silu(signal)), h)

        hv = self.vis_norm1(xv) * (sv[0] + 1.0) + sv[1]
        hc = self.cond_norm1(xc) * (sc[0] + 1.0) + sc[1]
        qv, kv, vv = self._heads(self.vis_qkv(hv), b, nv)
        qc, kc, vc = self._heads(self.cond_qkv(hc), b, nc)
        if vis_rope is not None:
            qv, kv = vis_rope(qv), vis_rope(kv)
        q = concat([qc, qv], axis=2)
        k = concat([kc, kv], axis=2)
        v = concat([vc, vv], axis=2)
        attn = F.attention(q, k, v, mask=mask)
        attn_c = attn[:, :, :nc]
        attn_v = attn[:, :, nc:]
        merge = lambda t, n: t.transpose(0, 2, 1, 3).reshape(b, n, h)
        xv = xv + sv[2] * self.vis_out(merge(attn_v, nv))
        xc = xc + sc[2] * self.cond_out(merge(attn_c, nc))
        xv = xv + sv[5] * self.vis_mlp(self.vis_norm2(xv) * (sv[3] + 1.0) + sv[4])
        xc = xc + sc[5] * self.cond_mlp(self.cond_norm2(xc) * (sc[3] + 1.0) + sc[4])
        return xv, xc


class FlowDecoder(Module):
    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        p = cfg.latent_patch
        h = cfg.hidden
        self.in_proj = Linear(LATENT_CHANNELS * p * p, h, rng, dtype=dtype)
        self.cond_in = Linear(cfg.cond_dim, h, rng, dtype=dtype)
        self.global_in = Linear(cfg.cond_dim, h, rng, dtype=dtype)
        self.t_fc1 = Linear(h, h, rng, dtype=dtype)
        self.t_fc2 = Linear(h, h, rng, dtype=dtype)
        self.blocks = ModuleList(MMDiTBlock(cfg, rng, dtype=dtype) for _ in range(cfg.layers))
        self.final_norm = RMSNorm(h, dtype=dtype)
        self.final_mod = Linear(h, 2 * h, rng, zero_init=True, dtype=dtype)
        self.out_proj = Linear(h, LATENT_CHANNELS * p * p, rng, zero_init=True, dtype=dtype)
        self._dtype = dtype

    # -- latent <-> token geometry ------------------------------------------------

    def patchify_latent(self, latent: Tensor) -> Tensor:
        """[B, 4, H, W] -> [B, (H/p)(W/p), 4 p^2] token features."""
        b, c, hh, ww = latent.shape
        p = self.cfg.latent_patch
        if c != LATENT_CHANNELS:
            raise ShapeError(f"latents must have {LATENT_CHANNELS} channels, got {c}")
        if hh % p or ww % p:
            raise ShapeError(f"latent {hh}x{ww} not divisible by patch {p}")
        gr, gc = hh // p, ww // p
        x = latent.reshape(b, c, gr, p, gc, p)
        x = x.transpose(0, 2, 4, 1, 3, 5).reshape(b, gr * gc, c * p * p)
        return x

    def unpatchify_latent(self, tokens: Tensor, hh: int, ww: int) -> Tensor:
        b = tokens.shape[0]
        p = self.cfg.latent_patch
        gr, gc = hh // p, ww // p
        x = tokens.reshape(b, gr, gc, LATENT_CHANNELS, p, p)
        x = x.transpose(0, 3, 1, 4, 2, 5).reshape(b, LATENT_CHANNELS, hh, ww)
        return x

    def _grid_positions(self, gr: int, gc: int, context: bool):
        axis0 = np.full(gr * gc, self.cfg.context_axis_offset if context else 0)
        rows = np.repeat(np.arange(gr), gc)
        cols = np.tile(np.arange(gc), gr)
        return axis0, rows, cols

    def _rope_pairs(self):
        """Feature-pair split across (context flag, row, col) axes."""
        pairs = (self.cfg.hidden // self.cfg.heads) // 2
        grid = max(1, pairs * 3 // 8)
        return [pairs - 2 * grid, grid, grid]

    # -- main forward --------------------------------------------------------------

    def predict_velocity(self, x_t: Tensor, t: np.ndarray, cond: BatchedCondition,
                         context_latent: Tensor | None = None,
                         context_valid: np.ndarray | None = None) -> Tensor:
        """Velocity prediction, same shape as ``x_t``; context tokens excluded.

        ``context_valid`` (per-sample 0/1) masks a sample's context tokens out
        of attention — numerically identical to omitting them, which lets a
        batch mix context-conditioned and context-dropped samples.
        """
        b, c, hh, ww = x_t.shape
        p = self.cfg.latent_patch
        gr, gc = hh // p, ww // p
        n_noisy = gr * gc

        xv = self.in_proj(self.patchify_latent(x_t))
        pos = [np.asarray(a) for a in self._grid_positions(gr, gc, context=False)]
        n_ctx = 0
        if context_latent is not None:
            ctx_tokens = self.in_proj(self.patchify_latent(context_latent))
            n_ctx = ctx_tokens.shape[1]
            xv = concat([xv, ctx_tokens], axis=1)
            cpos = self._grid_positions(gr, gc, context=True)
            pos = [np.concatenate([a, b2]) for a, b2 in zip(pos, cpos)]
        pairs = self._rope_pairs()
        vis_rope = lambda x: F.rope_axes(x, pos, pairs_per_axis=pairs)

        xc = self.cond_in(cond.tokens)
        nc = xc.shape[1]
        nv = xv.shape[1]
        total = nc + nv
        vis_valid = np.ones((b, nv), dtype=cond.valid.dtype)
        if n_ctx and context_valid is not None:
            vis_valid[:, n_noisy:] = np.asarray(context_valid).reshape(b, 1)
        key_valid = np.concatenate([cond.valid, vis_valid], axis=1)
        mask = np.where(key_valid[:, None, None, :] > 0, 0.0, MASK_VALUE).astype(self._dtype)
        mask = np.broadcast_to(mask, (b, 1, total, total))

        t_emb = Tensor(F.timestep_embedding(t, self.cfg.hidden, dtype=self._dtype))
        signal = self.t_fc2(F.silu(self.t_fc1(t_emb))) + self.global_in(cond.global_vec)

        for block in self.blocks:
            xv, xc = block(xv, xc, signal, vis_rope, mask)

        out = xv[:, :n_noisy]
        fm = self.final_mod(F.silu(signal))
        h = self.cfg.hidden
        scale, shift = fm[:, None, :h], fm[:, None, h:]
        out = self.final_norm(out) * (scale + 1.0) + shift
        return self.unpatchify_latent(self.out_proj(out), hh, ww)

    def flow_matching_loss(self, x0: np.ndarray, cond: BatchedCondition,
                           rng: np.random.Generator,
                           context_latent: np.ndarray | None = None,
                           context_valid: np.ndarray | None = None) -> Tensor:
        """MSE between predicted velocity and (eps - x0) on a random interpolant."""
        fb = make_flow_batch(np.asarray(x0, dtype=self._dtype), rng)
        ctx = Tensor(np.asarray(context_latent, dtype=self._dtype)) if context_latent is not None else None
        v = self.predict_velocity(Tensor(fb.x_t), fb.t, cond, context_latent=ctx,
                                  context_valid=context_valid)
        diff = v - Tensor(fb.target_v)
        return (diff * diff).mean()


def single_condition(bundle: ConditionBundle) -> BatchedCondition:
    """Wrap one condition bundle as a batch of one for the decoder."""
    tokens = bundle.full_condition()
    m = tokens.shape[0]
    return BatchedCondition(
        tokens=tokens.reshape(1, m, -1),
        valid=np.ones((1, m), dtype=np.float64),
        global_vec=bundle.global_vec.reshape(1, -1),
    )
