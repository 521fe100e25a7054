"""Deterministic Euler sampler with classifier-free guidance.

Generation integrates dx/dt = v from pure noise at t=1 down to t=0 on a
uniform step grid. Text-to-image uses single-scale guidance against the
learned null-text condition; editing uses the two-scale image/text scheme
(three velocity evaluations per step):

    v = v(0,0) + cfg_img * (v(img,0) - v(0,0)) + cfg_txt * (v(img,txt) - v(img,0))

Scales of exactly 1 collapse algebraically to the fully conditional
velocity; the sampler takes that branch literally so the equality is
bitwise, and skips the unconditional evaluations entirely.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .decoder import single_condition
from .errors import ConfigError, ContractError
from .tensor import Tensor
from .vae import LatentImage


@dataclass
class SamplerConfig:
    steps: int = 20
    cfg_txt: float = 1.0
    cfg_img: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("sampler needs at least one step")
        if self.cfg_txt < 0 or self.cfg_img < 0:
            raise ConfigError("guidance scales must be non-negative")


def _euler_grid(steps: int):
    ts = np.linspace(1.0, 0.0, steps + 1)
    return list(zip(ts[:-1], ts[1:]))


class Sampler:
    """Drives a unified model's decoder; pure given weights and seed."""

    def __init__(self, model):
        self.model = model

    def _velocity(self, x: np.ndarray, t: float, bundle, context_latent=None) -> np.ndarray:
        cond = single_condition(bundle)
        ctx = Tensor(context_latent[None].astype(x.dtype)) if context_latent is not None else None
        v = self.model.decoder.predict_velocity(
            Tensor(x[None]), np.array([t], dtype=x.dtype), cond, context_latent=ctx
        )
        return v.data[0]

    # -- text to image -----------------------------------------------------------

    def sample_t2i(self, bundle, cfg: SamplerConfig, shape=(4, 8, 8)) -> LatentImage:
        """Euler-integrate from seeded noise under text guidance."""
        rng = np.random.default_rng(cfg.seed)
        x = rng.standard_normal(shape).astype(np.float32)
        with T.no_grad():
            null = self.model.null_prompt() if cfg.cfg_txt != 1.0 else None
            for t_cur, t_next in _euler_grid(cfg.steps):
                dt = np.float32(t_next - t_cur)
                if cfg.cfg_txt == 1.0:
                    v = self._velocity(x, t_cur, bundle)
                else:
                    v_c = self._velocity(x, t_cur, bundle)
                    v_u = self._velocity(x, t_cur, null)
                    v = v_u + np.float32(cfg.cfg_txt) * (v_c - v_u)
                x = x + dt * v
        side = shape[-1] * 8
        return LatentImage(x, (side, side))

    # -- instruction editing ----------------------------------------------------------

    def sample_edit(self, context_image: np.ndarray, bundle_with_ctx, cfg: SamplerConfig) -> LatentImage:
        """Dual-guidance editing; the context image conditions both streams."""
        if context_image is None:
            raise ContractError("editing requires a context image")
        ctx_latent = self.model.vae.vae_encode(context_image).data.astype(np.float32)
        rng = np.random.default_rng(cfg.seed)
        x = rng.standard_normal(ctx_latent.shape).astype(np.float32)
        with T.no_grad():
            both_one = cfg.cfg_img == 1.0 and cfg.cfg_txt == 1.0
            null = self.model.null_prompt() if not both_one else None
            if null is not None:
                # image-only condition: null text refined jointly with context
                img_only = self.model.refiner.attach_context(null, self._ctx_sem(context_image))
            for t_cur, t_next in _euler_grid(cfg.steps):
                dt = np.float32(t_next - t_cur)
                if both_one:
                    v = self._velocity(x, t_cur, bundle_with_ctx, ctx_latent)
                else:
                    v_full = self._velocity(x, t_cur, bundle_with_ctx, ctx_latent)
                    v_img = self._velocity(x, t_cur, img_only, ctx_latent)
                    v_none = self._velocity(x, t_cur, null)
                    v = (
                        v_none
                        + np.float32(cfg.cfg_img) * (v_img - v_none)
                        + np.float32(cfg.cfg_txt) * (v_full - v_img)
                    )
                x = x + dt * v
        return LatentImage(x, context_image.shape[:2])

    def _ctx_sem(self, context_image):
        return self.model.visual_tokens(context_image)

    # -- convenience end-to-end paths ---------------------------------------------------

    def generate_image(self, prompt: str, cfg: SamplerConfig) -> np.ndarray:
        with T.no_grad():
            bundle = self.model.encode_prompt(prompt)
        latent = self.sample_t2i(bundle, cfg)
        return self.model.vae.vae_decode(latent)

    def edit_image(self, image: np.ndarray, instruction: str, cfg: SamplerConfig) -> np.ndarray:
        with T.no_grad():
            bundle = self.model.build_condition(self.model.encode_prompt(instruction), image)
        latent = self.sample_edit(image, bundle, cfg)
        return self.model.vae.vae_decode(latent)
