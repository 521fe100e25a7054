"""The unified model: one weight set serving understanding, generation, editing.

Wiring (all toy-scale):
- understanding: image -> encoder -> adapter -> visual tokens -> language model
  next-token loss on answer text;
- text-to-image: prompt -> language model (text only) -> last-two-layer fusion
  -> refiner -> condition bundle -> diffusion decoder flow loss on VAE latents;
- editing: like text-to-image, plus the context image enters twice: its
  adapter semantics are refined alongside the prompt (condition stream) and
  its VAE latents join the decoder's visual stream.

Child attribute names double as freeze-group prefixes for staged training:
encoder, adapter, llm, refiner, decoder, vae.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adapter import AdapterConfig, VisualAdapter
from .decoder import DecoderConfig, FlowDecoder, single_condition
from .encoder import EncoderConfig, VisionEncoder
from .errors import ConfigError, ContractError
from .llm import EOS, SEP, LanguageModel, LlmConfig, decode_text, encode_text
from .nn import Module
from .refiner import BatchedCondition, ConditionBundle, RefinerConfig, TokenRefiner
from .tensor import Tensor, concat, zeros
from .vae import ConvVae, VaeConfig


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    llm: LlmConfig = field(default_factory=LlmConfig)
    refiner: RefinerConfig = field(default_factory=RefinerConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    vae: VaeConfig = field(default_factory=VaeConfig)

    def __post_init__(self):
        if self.adapter.llm_dim != self.llm.llm_dim:
            raise ConfigError("adapter llm_dim must match the language model width")
        if self.decoder.cond_dim != self.refiner.cond_dim:
            raise ConfigError("decoder cond_dim must match the refiner width")

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        return cls(**overrides)


class UnifiedModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0FFEE]))
        self.encoder = VisionEncoder(cfg.encoder, rng, dtype=dtype)
        self.adapter = VisualAdapter(cfg.adapter, cfg.encoder.hidden_dim, rng, dtype=dtype)
        self.llm = LanguageModel(cfg.llm, rng, dtype=dtype)
        self.refiner = TokenRefiner(cfg.refiner, cfg.llm.llm_dim, rng, dtype=dtype)
        self.decoder = FlowDecoder(cfg.decoder, rng, dtype=dtype)
        self.vae = ConvVae(cfg.vae, rng, dtype=dtype)
        self._dtype = dtype

    # -- shared vision path ------------------------------------------------------

    def visual_tokens(self, image: np.ndarray) -> Tensor:
        """Image -> adapter embeddings in language-model space, [m, llm_dim]."""
        grid = self.encoder.encode_one(self.encoder.prepare(image))
        return self.adapter(grid)

    def visual_tokens_batch(self, images) -> list:
        """Batched variant; same per-image results via the packed encoder."""
        from .encoder import PatchGrid

        prepared = [self.encoder.prepare(im) for im in images]
        shapes = [self.encoder.grid_shape(im) for im in prepared]
        packed = self.encoder.encode(prepared)
        outs = []
        for i, (rows, cols) in enumerate(shapes):
            grid = PatchGrid(rows, cols, packed.item(i))
            outs.append(self.adapter(grid))
        return outs

    # -- conditioning -----------------------------------------------------------------

    def encode_prompt(self, text: str) -> ConditionBundle:
        """Refined condition bundle for a text prompt (single sequence)."""
        ids = encode_text(text)
        if not ids:
            raise ContractError("prompt must be non-empty")
        seq = self.llm.assemble_sequence(ids)
        h_last, h_prev, _ = self.llm.forward_hidden(seq)
        return self.refiner.refine(self.refiner.fuse_layers(h_last, h_prev))

    def null_prompt(self) -> ConditionBundle:
        return self.refiner.null_bundle()

    def build_condition(self, prompt_bundle: ConditionBundle,
                        context_image: np.ndarray | None = None) -> ConditionBundle:
        """Attach a context image's semantic tokens to a prompt bundle.

        Without a context image the bundle passes through unchanged. With one,
        prompt features and context semantics are refined jointly; the
        decoder sees [prompt tokens, context semantic tokens].
        """
        if context_image is None:
            return prompt_bundle
        sem = self.visual_tokens(context_image)
        return self.refiner.attach_context(prompt_bundle, sem)

    def conditions_batch(self, texts, context_images=None,
                         drop_text=None, drop_ctx=None) -> BatchedCondition:
        """Padded batch of refined conditions for training losses."""
        b = len(texts)
        drop_text = drop_text if drop_text is not None else [False] * b
        drop_ctx = drop_ctx if drop_ctx is not None else [False] * b
        seqs = [self.llm.assemble_sequence(encode_text(t)) for t in texts]
        h_last, h_prev, _ = self.llm.forward_hidden_batch(seqs)
        fused = self.refiner.fuse_layers(h_last, h_prev)  # [B, N, cond]
        sems = None
        if context_images is not None:
            sems = self.visual_tokens_batch(context_images)
        rows = []
        for i in range(b):
            if drop_text[i]:
                part = self.refiner.null_text
            else:
                part = fused[i, : len(seqs[i])]
            if sems is not None and not drop_ctx[i]:
                part = concat([part, self.refiner.context_proj(sems[i])], axis=0)
            rows.append(part)
        m = max(r.shape[0] for r in rows)
        valid = np.zeros((b, m), dtype=np.float64)
        padded = []
        d = self.cfg.refiner.cond_dim
        for i, r in enumerate(rows):
            n = r.shape[0]
            valid[i, :n] = 1.0
            if n < m:
                r = concat([r, zeros((m - n, d), dtype=r.dtype)], axis=0)
            padded.append(r.reshape(1, m, d))
        stacked = padded[0] if b == 1 else concat(padded, axis=0)
        tokens, global_vec = self.refiner.refine_batch(stacked, valid)
        return BatchedCondition(tokens=tokens, valid=valid, global_vec=global_vec)

    # -- understanding --------------------------------------------------------------

    def understanding_sequence(self, image, question: str, answer: str | None = None):
        """[visual tokens, question, SEP(, answer, EOS)] with answer targets."""
        visual = self.visual_tokens(image)
        q_ids = encode_text(question)
        if answer is None:
            text = q_ids + [SEP]
            return self.llm.assemble_sequence([], visual, text)
        a_ids = encode_text(answer)
        text = q_ids + [SEP] + a_ids + [EOS]
        seq = self.llm.assemble_sequence([], visual, text)
        m = visual.shape[0]
        ids = seq.token_ids
        targets = np.full(len(seq), -1, dtype=np.int64)
        sep_pos = m + len(q_ids)
        for p in range(sep_pos, sep_pos + len(a_ids) + 1):
            targets[p] = ids[p + 1]
        return self.llm.set_targets(seq, targets)

    def understanding_loss(self, examples) -> Tensor:
        seqs = [self.understanding_sequence(e.image, e.question, e.answer) for e in examples]
        return self.llm.lm_loss(seqs)

    def answer(self, image, question: str, max_new: int = 12) -> str:
        seq = self.understanding_sequence(image, question)
        return decode_text(self.llm.generate_text(seq, max_new=max_new))

    # -- generation losses ---------------------------------------------------------------

    def t2i_loss(self, examples, rng: np.random.Generator, cond_dropout: float = 0.1) -> Tensor:
        x0 = self.vae.encode_batch([e.image for e in examples])
        drop_text = [bool(rng.uniform() < cond_dropout) for _ in examples]
        cond = self.conditions_batch([e.caption for e in examples], drop_text=drop_text)
        return self.decoder.flow_matching_loss(x0, cond, rng)

    def edit_loss(self, examples, rng: np.random.Generator, cond_dropout: bool = True) -> Tensor:
        x0 = self.vae.encode_batch([e.target_image for e in examples])
        ctx = self.vae.encode_batch([e.source_image for e in examples])
        drop_text, drop_ctx = [], []
        for _ in examples:
            u = rng.uniform() if cond_dropout else 1.0
            # 10% text-only dropped, 10% context-only, 5% both
            drop_text.append(u < 0.10 or 0.20 <= u < 0.25)
            drop_ctx.append(0.10 <= u < 0.25)
        cond = self.conditions_batch(
            [e.instruction for e in examples],
            context_images=[e.source_image for e in examples],
            drop_text=drop_text,
            drop_ctx=drop_ctx,
        )
        ctx_valid = np.array([0.0 if d else 1.0 for d in drop_ctx])
        ctx = ctx * ctx_valid.reshape(-1, 1, 1, 1)  # zero out dropped context latents
        return self.decoder.flow_matching_loss(
            x0, cond, rng, context_latent=ctx, context_valid=ctx_valid
        )

    # -- parameter accounting -------------------------------------------------------------

    MODULE_ORDER = ("llm", "decoder", "encoder", "adapter", "vae", "refiner")

    def param_counts(self) -> dict:
        """Per-module parameter counts, largest architectural roles first."""
        counts = {name: 0 for name in self.MODULE_ORDER}
        for path, p in self.named_parameters():
            counts[path.split(".", 1)[0]] += p.size
        return counts


def _block_params(d: int, mlp_ratio: int) -> int:
    hidden = mlp_ratio * d
    return 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + (d * hidden + hidden) + (hidden * d + d)


def analytic_param_counts(cfg: ModelConfig) -> dict:
    """Parameter counts computed from configuration alone (no allocation).

    Lets ``inspect`` report a paper-scale preset without building gigabyte
    buffers; pinned against real counts on the toy preset in the tests.
    """
    e, a, l, r, d, v = cfg.encoder, cfg.adapter, cfg.llm, cfg.refiner, cfg.decoder, cfg.vae
    p = e.patch_size
    enc = (p * p * 3 * e.hidden_dim + e.hidden_dim) + e.base_grid**2 * e.hidden_dim
    enc += e.layers * _block_params(e.hidden_dim, e.mlp_ratio) + e.hidden_dim
    adp = (e.hidden_dim * a.compression**2) * a.visual_vocab + a.visual_vocab
    adp += a.visual_vocab * a.llm_dim
    llm = l.text_vocab * l.llm_dim + l.layers * _block_params(l.llm_dim, l.mlp_ratio)
    llm += l.llm_dim + (l.llm_dim * l.text_vocab + l.text_vocab)
    fuse_in = 2 * l.llm_dim if r.input_mode == "concat_two" else l.llm_dim
    ref = (fuse_in * r.cond_dim + r.cond_dim) + (l.llm_dim * r.cond_dim + r.cond_dim)
    ref += 2 * r.cond_dim  # lead + null tokens
    ref += r.blocks * (_block_params(r.cond_dim, r.mlp_ratio) + r.cond_dim * 4 * r.cond_dim + 4 * r.cond_dim)
    h = d.hidden
    pp = d.latent_patch
    dec = (4 * pp * pp * h + h) + 2 * (d.cond_dim * h + h) + 2 * (h * h + h)
    per_stream = 2 * h + (h * 3 * h + 3 * h) + (h * h + h) + (h * d.mlp_ratio * h + d.mlp_ratio * h) + (d.mlp_ratio * h * h + h) + (h * 6 * h + 6 * h)
    dec += d.layers * 2 * per_stream
    dec += h + (h * 2 * h + 2 * h) + (h * 4 * pp * pp + 4 * pp * pp)
    c = v.base_channels
    conv = lambda ci, co: ci * co * 9 + co
    vae = (
        conv(3, c) + conv(c, 2 * c) + conv(2 * c, 4 * c) + conv(4 * c, 4 * c) + conv(4 * c, 8)
        + conv(4, 4 * c) + conv(4 * c, 4 * c) + conv(4 * c, 2 * c) + conv(2 * c, 2 * c)
        + conv(2 * c, c) + conv(c, c) + conv(c, c) + conv(c, 3) + 1
    )
    return {"llm": llm, "decoder": dec, "encoder": enc, "adapter": adp, "vae": vae, "refiner": ref}


def paper_scale_config() -> ModelConfig:
    """Full-scale shape of the architecture; for dry-run accounting only."""
    return ModelConfig(
        encoder=EncoderConfig(patch_size=14, base_grid=32, layers=24, heads=8, hidden_dim=1024),
        adapter=AdapterConfig(compression=2, visual_vocab=65536, llm_dim=2048),
        llm=LlmConfig(layers=28, heads=16, llm_dim=2048, text_vocab=151_936, max_seq=4096),
        refiner=RefinerConfig(blocks=2, cond_dim=2048, heads=16),
        decoder=DecoderConfig.paper_scale(),
        vae=VaeConfig(base_channels=128),
    )
