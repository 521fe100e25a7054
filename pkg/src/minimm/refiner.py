"""Bidirectional condition refiner between the language model and the decoder.

Fuses the language model's last two layers, runs a short stack of modulated
transformer blocks (no mask, no positional encoding), and extracts a global
vector either from a learnable lead token or by averaging. Also owns the
learned null-text embedding used for classifier-free guidance training and
the projection that lifts context-image semantic tokens into condition space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .errors import ConfigError, ContractError, ShapeError
from .nn import Attention, Linear, Mlp, Module, ModuleList, Parameter, RMSNorm
from .tensor import MASK_VALUE, Tensor, concat

INPUT_MODES = ("last_only", "concat_two")
GLOBAL_MODES = ("cls_token", "averaged")


@dataclass
class RefinerConfig:
    blocks: int = 2
    cond_dim: int = 128
    heads: int = 4
    input_mode: str = "concat_two"
    global_mode: str = "cls_token"
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.blocks < 1:
            raise ConfigError("refiner needs at least one block")
        if self.input_mode not in INPUT_MODES:
            raise ConfigError(f"input_mode must be one of {INPUT_MODES}, got {self.input_mode!r}")
        if self.global_mode not in GLOBAL_MODES:
            raise ConfigError(f"global_mode must be one of {GLOBAL_MODES}, got {self.global_mode!r}")


@dataclass
class ConditionBundle:
    """Everything the decoder needs from the conditioning side.

    ``cond_tokens`` are the refined prompt tokens (lead token excluded),
    ``context_semantic_tokens`` the refined context-image tokens when an
    image condition is present. ``fused_tokens`` keeps the pre-refinement
    features so a context image can be refined jointly with the prompt later.
    """

    cond_tokens: Tensor
    global_vec: Tensor
    source_len: int
    context_semantic_tokens: Tensor | None = None
    fused_tokens: Tensor | None = None

    def full_condition(self) -> Tensor:
        if self.context_semantic_tokens is None:
            return self.cond_tokens
        return concat([self.cond_tokens, self.context_semantic_tokens], axis=0)


@dataclass
class BatchedCondition:
    """Padded per-sample condition streams for batched decoder passes."""

    tokens: Tensor  # [B, M, cond_dim]
    valid: np.ndarray  # [B, M] float 0/1
    global_vec: Tensor  # [B, cond_dim]


class RefinerBlock(Module):
    """Pre-norm transformer block whose scale/shift comes from mean pooling.

    The modulation linear is zero-initialized, so a fresh block starts as a
    plain pre-norm block (scale 0 means multiplier 1, shift 0).
    """

    def __init__(self, cfg: RefinerConfig, rng, dtype=np.float32):
        super().__init__()
        d = cfg.cond_dim
        self.norm1 = RMSNorm(d, dtype=dtype)
        self.attn = Attention(d, cfg.heads, rng, dtype=dtype)
        self.norm2 = RMSNorm(d, dtype=dtype)
        self.mlp = Mlp(d, rng, hidden=cfg.mlp_ratio * d, dtype=dtype)
        self.mod = Linear(d, 4 * d, rng, zero_init=True, dtype=dtype)

    def forward(self, x: Tensor, valid: np.ndarray | None = None, mask=None) -> Tensor:
        d = x.shape[-1]
        if valid is None:
            pooled = x.mean(axis=-2, keepdims=True)
        else:
            vm = Tensor(valid[..., None].astype(x.dtype))
            pooled = (x * vm).sum(axis=-2, keepdims=True) * (
                1.0 / valid.sum(axis=-1, keepdims=True)[..., None]
            )
        mod = self.mod(pooled)  # [..., 1, 4d]
        g1, b1 = mod[..., :, 0:d], mod[..., :, d : 2 * d]
        g2, b2 = mod[..., :, 2 * d : 3 * d], mod[..., :, 3 * d : 4 * d]
        h = x + self.attn(self.norm1(x) * (g1 + 1.0) + b1, mask=mask)
        return h + self.mlp(self.norm2(h) * (g2 + 1.0) + b2)


class TokenRefiner(Module):
    def __init__(self, cfg: RefinerConfig, llm_dim: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        in_dim = 2 * llm_dim if cfg.input_mode == "concat_two" else llm_dim
        self.fuse = Linear(in_dim, cfg.cond_dim, rng, dtype=dtype)
        self.context_proj = Linear(llm_dim, cfg.cond_dim, rng, dtype=dtype)
        self.lead_token = Parameter((rng.standard_normal((1, cfg.cond_dim)) * 0.02).astype(dtype))
        self.null_text = Parameter((rng.standard_normal((1, cfg.cond_dim)) * 0.02).astype(dtype))
        self.blocks = ModuleList(RefinerBlock(cfg, rng, dtype=dtype) for _ in range(cfg.blocks))

    # -- layer fusion ----------------------------------------------------------

    def fuse_layers(self, h_last: Tensor, h_prev: Tensor) -> Tensor:
        """Project the last two LLM layers into condition space.

        ``concat_two`` concatenates along channels before projecting;
        ``last_only`` ignores h_prev entirely.
        """
        if h_last.shape != h_prev.shape:
            raise ShapeError(f"layer shapes disagree: {h_last.shape} vs {h_prev.shape}")
        if self.cfg.input_mode == "concat_two":
            return self.fuse(concat([h_last, h_prev], axis=-1))
        return self.fuse(h_last)

    # -- refinement ----------------------------------------------------------------

    def refine(self, fused: Tensor) -> ConditionBundle:
        """Refine a single [n, cond_dim] sequence into a condition bundle."""
        if fused.ndim != 2 or fused.shape[0] == 0:
            raise ContractError("refine() needs a non-empty [n, cond_dim] sequence")
        n = fused.shape[0]
        tokens, global_vec = self.refine_batch(
            fused.reshape(1, n, -1), np.ones((1, n), dtype=np.float64)
        )
        return ConditionBundle(
            cond_tokens=tokens[0],
            global_vec=global_vec[0],
            source_len=n,
            fused_tokens=fused,
        )

    def refine_batch(self, fused: Tensor, valid: np.ndarray):
        """Refine padded [B, M, cond_dim] sequences; returns (tokens, global).

        Padded positions are masked out of attention and pooling; their output
        rows are meaningless and must stay masked downstream.
        """
        b, m, d = fused.shape
        use_lead = self.cfg.global_mode == "cls_token"
        if use_lead:
            lead = self.lead_token.reshape(1, 1, d).broadcast_to((b, 1, d))
            x = concat([lead, fused], axis=1)
            valid = np.concatenate([np.ones((b, 1)), valid], axis=1)
            m += 1
        else:
            x = fused
        key_mask = np.where(valid[:, None, None, :] > 0, 0.0, MASK_VALUE).astype(fused.dtype)
        key_mask = np.broadcast_to(key_mask, (b, 1, m, m))
        for block in self.blocks:
            x = block(x, valid=valid, mask=key_mask)
        if use_lead:
            return x[:, 1:], x[:, 0]
        vm = Tensor(valid[..., None].astype(x.dtype))
        global_vec = (x * vm).sum(axis=1) * (1.0 / valid.sum(axis=1)[:, None])
        return x, global_vec

    # -- context handling ----------------------------------------------------------

    def attach_context(self, bundle: ConditionBundle, semantic_llm_tokens: Tensor) -> ConditionBundle:
        """Joint refinement of a prompt bundle with context-image semantics.

        The context tokens (adapter output, LLM embedding space) are projected
        into condition space and refined alongside the prompt's pre-refinement
        features; the result keeps prompt and context slices separate, ordered
        [prompt tokens, context tokens].
        """
        if bundle.fused_tokens is None:
            raise ContractError("bundle lacks pre-refinement features; rebuild it from text")
        sem = self.context_proj(semantic_llm_tokens)
        joint = concat([bundle.fused_tokens, sem], axis=0)
        n = bundle.fused_tokens.shape[0]
        total = joint.shape[0]
        tokens, global_vec = self.refine_batch(
            joint.reshape(1, total, -1), np.ones((1, total), dtype=np.float64)
        )
        return ConditionBundle(
            cond_tokens=tokens[0][:n],
            global_vec=global_vec[0],
            source_len=n,
            context_semantic_tokens=tokens[0][n:],
            fused_tokens=bundle.fused_tokens,
        )

    def null_bundle(self) -> ConditionBundle:
        """Condition used when the text prompt is dropped (CFG training)."""
        return self.refine(self.null_text)
