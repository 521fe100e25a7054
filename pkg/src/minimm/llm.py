"""Decoder-only causal language model over interleaved text and visual tokens.

Text is character-level: the synthetic caption/question grammar only needs
lowercase letters, space, and a question mark, plus a few special tokens.
The model exposes its last two layers' hidden states so the condition
refiner can fuse them, and next-token logits for the understanding loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .errors import ConfigError, ContractError, SequenceOverflowError
from .nn import Attention, Embedding, Linear, Mlp, Module, ModuleList, RMSNorm
from .tensor import MASK_VALUE, Tensor, concat

PAD, BOS, EOS, SEP = 0, 1, 2, 3
_CHARS = " abcdefghijklmnopqrstuvwxyz?"
CHAR_TO_ID = {ch: i + 4 for i, ch in enumerate(_CHARS)}
ID_TO_CHAR = {i: ch for ch, i in CHAR_TO_ID.items()}
N_RESERVED = 4 + len(_CHARS)


def encode_text(text: str) -> list:
    try:
        return [CHAR_TO_ID[ch] for ch in text.lower()]
    except KeyError as e:
        raise ContractError(f"character {e.args[0]!r} outside the text vocabulary") from None


def decode_text(ids) -> str:
    return "".join(ID_TO_CHAR.get(int(i), "") for i in ids)


@dataclass
class LlmConfig:
    layers: int = 4
    heads: int = 4
    llm_dim: int = 128
    text_vocab: int = 512
    max_seq: int = 256
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.llm_dim % (2 * self.heads) != 0:
            raise ConfigError(
                f"llm_dim {self.llm_dim} must be divisible by 2*heads={2 * self.heads}"
            )
        if self.text_vocab < N_RESERVED:
            raise ConfigError(f"text vocab must hold at least {N_RESERVED} entries")


TEXT_TAG, VISUAL_TAG = 0, 1


@dataclass
class MultimodalSequence:
    embeddings: Tensor  # [n, llm_dim]
    segment_tags: np.ndarray  # [n] of TEXT_TAG / VISUAL_TAG
    target_ids: np.ndarray | None = None  # [n], -1 where no target
    token_ids: list = field(default_factory=list)  # text ids, -1 at visual slots

    def __len__(self):
        return self.embeddings.shape[0]


class LlmBlock(Module):
    def __init__(self, cfg: LlmConfig, rng, dtype=np.float32):
        super().__init__()
        self.norm1 = RMSNorm(cfg.llm_dim, dtype=dtype)
        self.attn = Attention(cfg.llm_dim, cfg.heads, rng, dtype=dtype)
        self.norm2 = RMSNorm(cfg.llm_dim, dtype=dtype)
        self.mlp = Mlp(cfg.llm_dim, rng, hidden=cfg.mlp_ratio * cfg.llm_dim, dtype=dtype)

    def forward(self, x: Tensor, positions: np.ndarray, mask) -> Tensor:
        rope = lambda t: F.rope_1d(t, positions)
        x = x + self.attn(self.norm1(x), mask=mask, rope=rope)
        return x + self.mlp(self.norm2(x))


class LanguageModel(Module):
    def __init__(self, cfg: LlmConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.tok_embed = Embedding(cfg.text_vocab, cfg.llm_dim, rng, dtype=dtype)
        self.blocks = ModuleList(LlmBlock(cfg, rng, dtype=dtype) for _ in range(cfg.layers))
        self.final_norm = RMSNorm(cfg.llm_dim, dtype=dtype)
        self.head = Linear(cfg.llm_dim, cfg.text_vocab, rng, dtype=dtype)

    # -- sequence assembly ------------------------------------------------------

    def assemble_sequence(self, text_before, visual_embeds: Tensor | None = None,
                          text_after=()) -> MultimodalSequence:
        """Interleave [text, visual, text]; visual embeddings enter verbatim."""
        parts, tags, ids = [], [], []
        text_before = list(text_before)
        text_after = list(text_after)
        if text_before:
            parts.append(self.tok_embed(np.asarray(text_before)))
            tags.extend([TEXT_TAG] * len(text_before))
            ids.extend(text_before)
        if visual_embeds is not None and visual_embeds.shape[0] > 0:
            parts.append(visual_embeds)
            tags.extend([VISUAL_TAG] * visual_embeds.shape[0])
            ids.extend([-1] * visual_embeds.shape[0])
        if text_after:
            parts.append(self.tok_embed(np.asarray(text_after)))
            tags.extend([TEXT_TAG] * len(text_after))
            ids.extend(text_after)
        if not parts:
            raise ContractError("cannot assemble an empty sequence")
        total = sum(p.shape[0] for p in parts)
        if total > self.cfg.max_seq:
            raise SequenceOverflowError(f"sequence of {total} exceeds max_seq {self.cfg.max_seq}")
        emb = parts[0] if len(parts) == 1 else concat(parts, axis=0)
        return MultimodalSequence(emb, np.asarray(tags, dtype=np.int64), None, ids)

    def set_targets(self, seq: MultimodalSequence, targets: np.ndarray):
        targets = np.asarray(targets, dtype=np.int64)
        if targets.shape != (len(seq),):
            raise ContractError("targets must align with the sequence positions")
        if np.any((targets >= 0) & (seq.segment_tags == VISUAL_TAG)):
            raise ContractError("targets are only allowed at text positions")
        seq.target_ids = targets
        return seq

    # -- forward ---------------------------------------------------------------------

    def _run_blocks(self, x: Tensor, positions: np.ndarray, mask):
        states = [x]
        for block in self.blocks:
            states.append(block(states[-1], positions, mask))
        h_last = self.final_norm(states[-1])
        h_prev = self.final_norm(states[-2])
        return h_last, h_prev

    def forward_hidden(self, seq: MultimodalSequence):
        """(h_last, h_prev, logits) for one sequence.

        h_prev is the normed output of the second-to-last block; with a single
        block that degenerates to the normed embedding-layer output.
        """
        n = len(seq)
        positions = np.arange(n)
        mask = F.causal_mask(n, dtype=seq.embeddings.dtype)
        h_last, h_prev = self._run_blocks(seq.embeddings, positions, mask)
        return h_last, h_prev, self.head(h_last)

    def forward_hidden_batch(self, seqs):
        """Padded batch forward; returns (h_last, h_prev, logits) of [B, N, ...].

        Positions at or beyond each row's true length are padding: they are
        masked out of attention as keys and must be ignored by the caller.
        """
        lengths = [len(s) for s in seqs]
        n = max(lengths)
        dtype = seqs[0].embeddings.dtype
        rows = []
        for s in seqs:
            pad = n - len(s)
            if pad:
                pad_emb = self.tok_embed(np.full(pad, PAD, dtype=np.int64))
                rows.append(concat([s.embeddings, pad_emb], axis=0))
            else:
                rows.append(s.embeddings)
        x = concat([r.reshape(1, n, -1) for r in rows], axis=0)
        mask = np.broadcast_to(F.causal_mask(n, dtype=dtype), (len(seqs), 1, n, n)).copy()
        for b, ln in enumerate(lengths):
            mask[b, :, :, ln:] = MASK_VALUE
        positions = np.arange(n)
        h_last, h_prev = self._run_blocks(x, positions, mask)
        return h_last, h_prev, self.head(h_last)

    # -- losses / generation -----------------------------------------------------------

    def lm_loss(self, seqs) -> Tensor:
        """Mean next-token cross-entropy over text target positions only."""
        if isinstance(seqs, MultimodalSequence):
            seqs = [seqs]
        for s in seqs:
            if s.target_ids is None:
                raise ContractError("lm_loss needs sequences with targets set")
        _, _, logits = self.forward_hidden_batch(seqs)
        n = logits.shape[1]
        flat_targets = np.full((len(seqs), n), -1, dtype=np.int64)
        for b, s in enumerate(seqs):
            flat_targets[b, : len(s)] = s.target_ids
        keep = flat_targets.reshape(-1) >= 0
        if not keep.any():
            raise ContractError("no target positions present")
        flat_logits = logits.reshape(len(seqs) * n, self.cfg.text_vocab)
        idx = np.nonzero(keep)[0]
        return F.cross_entropy(flat_logits[idx], flat_targets.reshape(-1)[idx])

    def generate_text(self, prompt_seq: MultimodalSequence, max_new: int = 16,
                      greedy: bool = True) -> list:
        """Greedy decode; stops at EOS. Returns generated text ids."""
        if len(prompt_seq) == 0:
            raise ContractError("generation needs a non-empty prompt")
        if not greedy:
            raise ConfigError("only greedy decoding is supported")
        emb = prompt_seq.embeddings
        out = []
        for _ in range(max_new):
            n = emb.shape[0]
            if n >= self.cfg.max_seq:
                break
            positions = np.arange(n)
            mask = F.causal_mask(n, dtype=emb.dtype)
            h_last, _ = self._run_blocks(emb, positions, mask)
            logits = self.head(h_last[n - 1 : n])
            nxt = int(np.argmax(logits.data[0]))
            if nxt == EOS:
                break
            out.append(nxt)
            emb = concat([emb, self.tok_embed(np.array([nxt]))], axis=0)
        return out
