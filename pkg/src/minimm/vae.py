"""Tiny convolutional VAE: 4-channel latents at 8x spatial downsampling.

Pretrained once on rendered scenes with reconstruction + a small KL term,
then frozen for the rest of the pipeline. Encoding is deterministic at
inference (posterior mean); sampling only happens inside pretraining.
A scalar latent normalizer measured after pretraining keeps the latents
near unit variance for the diffusion decoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError
from .nn import Module, Parameter
from .tensor import Tensor

LATENT_CHANNELS = 4
DOWN_FACTOR = 8


@dataclass
class VaeConfig:
    base_channels: int = 32
    kl_weight: float = 1e-6


@dataclass
class LatentImage:
    data: np.ndarray  # [4, H/8, W/8]
    source_hw: tuple

    def __post_init__(self):
        if self.data.shape[0] != LATENT_CHANNELS:
            raise ShapeError(f"latents carry {LATENT_CHANNELS} channels, got {self.data.shape}")


class _Conv(Module):
    def __init__(self, cin, cout, rng, stride=1, zero_init=False, dtype=np.float32):
        super().__init__()
        # ~1.7 gain keeps variance steady through the SiLU stacks
        scale = 1.7 / np.sqrt(cin * 9)
        w = np.zeros((cout, cin, 3, 3)) if zero_init else rng.standard_normal((cout, cin, 3, 3)) * scale
        self.w = Parameter(w.astype(dtype))
        self.b = Parameter(np.zeros(cout, dtype=dtype))
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.w, self.b, stride=self.stride, padding=1)


class ConvVae(Module):
    """Three 2x-strided conv stages down, mirrored nearest-up stages back.

    Channel widths shrink as spatial resolution grows on the decode side;
    the world is flat-colored shapes, so the cheap full-resolution tail is
    enough to sharpen edges.
    """

    def __init__(self, cfg: VaeConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        c = cfg.base_channels
        self.cfg = cfg
        self.e1 = _Conv(3, c, rng, stride=2, dtype=dtype)
        self.e2 = _Conv(c, 2 * c, rng, stride=2, dtype=dtype)
        self.e3 = _Conv(2 * c, 4 * c, rng, stride=2, dtype=dtype)
        self.e4 = _Conv(4 * c, 4 * c, rng, dtype=dtype)
        self.to_moments = _Conv(4 * c, 2 * LATENT_CHANNELS, rng, dtype=dtype)
        self.d1 = _Conv(LATENT_CHANNELS, 4 * c, rng, dtype=dtype)
        self.d1b = _Conv(4 * c, 4 * c, rng, dtype=dtype)
        self.d2 = _Conv(4 * c, 2 * c, rng, dtype=dtype)
        self.d2b = _Conv(2 * c, 2 * c, rng, dtype=dtype)
        self.d3 = _Conv(2 * c, c, rng, dtype=dtype)
        self.d3b = _Conv(c, c, rng, dtype=dtype)
        self.d4 = _Conv(c, c, rng, dtype=dtype)
        self.to_rgb = _Conv(c, 3, rng, dtype=dtype)
        # start near-deterministic: logvar bias at -6 keeps posterior noise
        # from drowning the reconstruction signal early in pretraining
        self.to_moments.b.data[LATENT_CHANNELS:] = -6.0
        # measured after pretraining; multiplies encoded latents toward unit scale
        self.latent_scale = Parameter(np.ones(1, dtype=dtype), trainable=False)
        self._dtype = dtype

    # -- graph-level pieces (used by pretraining) ---------------------------------

    def encode_moments(self, images: Tensor):
        """[B, 3, H, W] -> (mu, logvar), each [B, 4, H/8, W/8]."""
        h = F.silu(self.e1(images))
        h = F.silu(self.e2(h))
        h = F.silu(self.e3(h))
        h = F.silu(self.e4(h))
        m = self.to_moments(h)
        return m[:, :LATENT_CHANNELS], m[:, LATENT_CHANNELS:]

    def decode_latent(self, z: Tensor) -> Tensor:
        """[B, 4, h, w] -> [B, 3, 8h, 8w] in [0, 1]."""
        h = F.silu(self.d1b(F.silu(self.d1(z))))
        h = F.silu(self.d2b(F.silu(self.d2(F.upsample2x(h)))))
        h = F.silu(self.d3b(F.silu(self.d3(F.upsample2x(h)))))
        h = F.silu(self.d4(F.upsample2x(h)))
        return F.sigmoid(self.to_rgb(h))

    # -- public deterministic interface ----------------------------------------------

    @staticmethod
    def _check_dims(h: int, w: int):
        if h % DOWN_FACTOR or w % DOWN_FACTOR:
            raise ContractError(
                f"image {h}x{w} is not a multiple of {DOWN_FACTOR}; apply the resize policy first"
            )

    def vae_encode(self, image: np.ndarray) -> LatentImage:
        """Deterministic posterior mean of one [H, W, 3] image, scaled."""
        h, w = image.shape[:2]
        self._check_dims(h, w)
        x = Tensor(np.ascontiguousarray(np.asarray(image, dtype=self._dtype).transpose(2, 0, 1))[None])
        with T.no_grad():
            mu, _ = self.encode_moments(x)
            z = mu * self.latent_scale
        return LatentImage(z.data[0], (h, w))

    def encode_batch(self, images) -> np.ndarray:
        """[B] images -> [B, 4, h, w] scaled latents (no grad)."""
        arr = np.stack([np.asarray(im, dtype=self._dtype).transpose(2, 0, 1) for im in images])
        self._check_dims(arr.shape[2], arr.shape[3])
        with T.no_grad():
            mu, _ = self.encode_moments(Tensor(arr))
            z = mu * self.latent_scale
        return z.data

    def vae_decode(self, latent) -> np.ndarray:
        """Latent -> [H, W, 3] image in [0, 1] (no grad)."""
        z = latent.data if isinstance(latent, LatentImage) else np.asarray(latent)
        if z.ndim == 3:
            z = z[None]
        with T.no_grad():
            x = self.decode_latent(Tensor(z.astype(self._dtype)) * (1.0 / self.latent_scale))
        return np.ascontiguousarray(x.data[0].transpose(1, 2, 0))

    def decode_batch(self, latents: np.ndarray) -> np.ndarray:
        with T.no_grad():
            x = self.decode_latent(Tensor(np.asarray(latents, dtype=self._dtype)) * (1.0 / self.latent_scale))
        return np.ascontiguousarray(x.data.transpose(0, 2, 3, 1))


OBJECT_WEIGHT = 8.0


def vae_loss(vae: ConvVae, images: np.ndarray, rng: np.random.Generator):
    """Weighted reconstruction + small KL on a [B, H, W, 3] batch.

    Pixels that differ from the dominant background color are upweighted;
    the scenes are mostly background and plain MSE would underfit objects.
    Returns (training loss, plain unweighted MSE).
    """
    arr = np.asarray(images, dtype=vae._dtype).transpose(0, 3, 1, 2)
    x = Tensor(np.ascontiguousarray(arr))
    bg = np.median(arr, axis=(0, 2, 3)).reshape(1, 3, 1, 1)
    is_object = (np.abs(arr - bg).sum(axis=1, keepdims=True) > 0.1).astype(vae._dtype)
    weights = 1.0 + OBJECT_WEIGHT * is_object
    weights = weights / weights.mean()
    mu, logvar = vae.encode_moments(x)
    eps = Tensor(rng.standard_normal(mu.shape).astype(vae._dtype))
    z = mu + (logvar * 0.5).exp() * eps
    recon = vae.decode_latent(z)
    se = (recon - x) * (recon - x)
    weighted = (se * Tensor(weights)).mean()
    mse = se.mean()
    kl = (-0.5 * (1.0 + logvar - mu * mu - logvar.exp())).mean()
    return weighted + vae.cfg.kl_weight * kl, mse


def vae_pretrain(vae: ConvVae, steps: int, batch_size: int, lr: float,
                 seed: int, log=None):
    """Train on random scenes; freezes weights and sets the latent scale.

    Returns (first_loss, last_loss) reconstruction MSE means over the first
    and last tenth of training.
    """
    from .optim import AdamW
    from .shapes import render, sample_scene

    if steps < 1:
        raise ConfigError("vae_pretrain needs at least one step")
    rng = np.random.default_rng(seed)
    for p in vae.parameters():
        p.trainable = True
    vae.latent_scale.trainable = False
    opt = AdamW([p for p in vae.parameters() if p.trainable], lr=lr)
    losses = []
    with T.checked_mode(False):
        for step in range(steps):
            # cosine decay to a tenth of the base rate sharpens late training
            opt.lr = lr * (0.1 + 0.9 * 0.5 * (1.0 + np.cos(np.pi * step / steps)))
            images = np.stack([render(sample_scene(rng)) for _ in range(batch_size)])
            vae.zero_grad()
            loss, mse = vae_loss(vae, images, rng)
            loss.backward()
            opt.step()
            losses.append(mse.item())
            if log is not None:
                log(step, "vae", losses[-1])
        # freeze and normalize latent scale on a fresh sample
        for p in vae.parameters():
            p.trainable = False
        sample = np.stack([render(sample_scene(rng)) for _ in range(64)])
        x = Tensor(np.ascontiguousarray(sample.transpose(0, 3, 1, 2).astype(vae._dtype)))
        with T.no_grad():
            mu, _ = vae.encode_moments(x)
        std = float(mu.data.std())
        vae.latent_scale.data[:] = 1.0 / max(std, 1e-6)
    k = max(1, steps // 10)
    return float(np.mean(losses[:k])), float(np.mean(losses[-k:]))
