"""Refiner design sweep: the 2x2 grid of layer-fusion and global-vector modes.

Each variant trains a fresh refiner+decoder (generation stage, shared data
stream and VAE) for a fixed toy budget, then reports its late-training flow
loss and constraint-satisfaction rates on the two single-object caption
categories. Values are measured on this desk-scale setup and meaningful only
relative to each other.
"""

from __future__ import annotations

import numpy as np

from .checkpoint import read_checkpoint
from .evaluate import evaluate_geneval_toy
from .model import ModelConfig, UnifiedModel
from .refiner import RefinerConfig
from .sampler import Sampler, SamplerConfig
from .training import derive_run_plan, new_meta, run_stage, stage_specs
from .vae import vae_pretrain

VARIANTS = [
    ("last_only", "averaged"),
    ("last_only", "cls_token"),
    ("concat_two", "averaged"),
    ("concat_two", "cls_token"),
]


def _vae_state_from_checkpoint(path):
    state, _ = read_checkpoint(path)
    return {k: v for k, v in state.items() if k.startswith("vae.")}


def _install_vae(model: UnifiedModel, vae_state: dict):
    own = dict(model.named_parameters())
    for name, arr in vae_state.items():
        own[name].data = arr.astype(own[name].data.dtype)
    for p in model.vae.parameters():
        p.trainable = False


def run_refiner_ablation(cfg, steps: int = 150, eval_n: int = 6,
                         vae_checkpoint=None, eval_sampler_steps: int = 10):
    """Train all four variants; returns one comparison row per variant."""
    vae_state = None
    if vae_checkpoint:
        vae_state = _vae_state_from_checkpoint(vae_checkpoint)
    rows = []
    spec = stage_specs()[0]
    for input_mode, global_mode in VARIANTS:
        model_cfg = ModelConfig(
            refiner=RefinerConfig(input_mode=input_mode, global_mode=global_mode)
        )
        model = UnifiedModel(model_cfg, seed=cfg.seed)
        if vae_state is None:
            vae_pretrain(model.vae, cfg.vae_steps, cfg.vae_batch, cfg.vae_lr, cfg.seed)
            vae_state = {
                name: p.data.copy()
                for name, p in model.named_parameters()
                if name.startswith("vae.")
            }
        else:
            _install_vae(model, vae_state)
        meta = new_meta(cfg.seed, cfg.to_dict())
        meta["vae_pretrained"] = True
        losses = []
        plan = derive_run_plan(spec, steps=steps, batch=8, lr_scale=cfg.lr_scale)
        run_stage(model, spec, meta, plan=plan, log=lambda s, t, l: losses.append(l))
        tail = max(1, len(losses) // 5)
        sampler = Sampler(model)
        system = lambda prompt, seed: sampler.generate_image(
            prompt, SamplerConfig(steps=eval_sampler_steps, cfg_txt=cfg.cfg_txt, seed=seed)
        )
        scores = evaluate_geneval_toy(system, eval_n, cfg.seed)
        rows.append(
            {
                "variant": f"{input_mode}+{global_mode}",
                "input_mode": input_mode,
                "global_mode": global_mode,
                "final_loss": float(np.mean(losses[-tail:])),
                "single_object": scores["single_object"],
                "colors": scores["colors"],
                "overall": scores["overall"],
            }
        )
    return rows
