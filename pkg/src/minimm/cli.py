"""Command-line entry point.

One run directory per workflow: checkpoints live under ``<dir>/checkpoints``,
logs under ``<dir>/logs``, images and reports at the top level. Every command
appends a record to ``<dir>/manifest.jsonl`` with its config and seed, and
training commands hold an exclusive lock file on the checkpoint directory.
Errors exit non-zero with a single ``ErrorClass: message`` line on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from .checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from .config import RunConfig, parse_override
from .errors import ConfigError, LineageError, MiniMMError
from .evaluate import evaluate_edit_toy, evaluate_geneval_toy
from .imaging import read_ppm, write_ppm
from .model import UnifiedModel, analytic_param_counts, paper_scale_config
from .sampler import Sampler, SamplerConfig
from .training import LossLog, derive_run_plan, new_meta, run_stage, stage_specs
from .vae import vae_pretrain

CFG_GRID = [(1.5, 7.5), (2.0, 7.5), (4.0, 7.5), (6.0, 7.5), (4.0, 5.0), (4.0, 10.0)]


def _paths(out_dir):
    ckpt = os.path.join(out_dir, "checkpoints")
    logs = os.path.join(out_dir, "logs")
    os.makedirs(ckpt, exist_ok=True)
    os.makedirs(logs, exist_ok=True)
    return ckpt, logs


def _manifest(out_dir, command, cfg: RunConfig, artifacts):
    entry = {
        "command": command,
        "time": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "artifacts": artifacts,
    }
    with open(os.path.join(out_dir, "manifest.jsonl"), "a") as fh:
        fh.write(json.dumps(entry) + "\n")


class _Lock:
    """Exclusive lock file; training commands own the checkpoint directory."""

    def __init__(self, ckpt_dir):
        self.path = os.path.join(ckpt_dir, ".lock")

    def __enter__(self):
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise LineageError(
                f"checkpoint directory is locked by another run ({self.path})"
            ) from None
        return self

    def __exit__(self, *exc):
        os.close(self.fd)
        os.unlink(self.path)


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    overrides = dict(parse_override(s) for s in (args.set or []))
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return cfg.with_overrides(overrides).apply_env()


def _stage_path(ckpt_dir, stage) -> str:
    name = "stage_vae.ckpt" if stage is None else f"stage_{stage}.ckpt"
    return os.path.join(ckpt_dir, name)


def _build_model(cfg: RunConfig) -> UnifiedModel:
    return UnifiedModel(cfg.model_config(), seed=cfg.seed)


def _restore(cfg: RunConfig, path) -> tuple:
    model = _build_model(cfg)
    meta = load_checkpoint(path, model)
    return model, meta


# -- commands ---------------------------------------------------------------------


def cmd_pretrain_vae(args):
    cfg = _load_config(args)
    ckpt_dir, logs = _paths(args.out)
    model = _build_model(cfg)
    with _Lock(ckpt_dir):
        with LossLog(os.path.join(logs, "vae.csv")) as log:
            first, last = vae_pretrain(
                model.vae, cfg.vae_steps, cfg.vae_batch, cfg.vae_lr, cfg.seed, log=log
            )
        meta = new_meta(cfg.seed, cfg.to_dict())
        meta["vae_pretrained"] = True
        meta["vae_recon_first"] = first
        meta["vae_recon_last"] = last
        path = _stage_path(ckpt_dir, None)
        save_checkpoint(model, meta, path)
    print(f"vae pretraining: recon MSE {first:.5f} -> {last:.5f} ({first / last:.1f}x)")
    print(f"saved {path}")
    _manifest(args.out, "pretrain-vae", cfg, [path])
    return 0


def cmd_train(args):
    cfg = _load_config(args)
    ckpt_dir, logs = _paths(args.out)
    stage = args.stage
    specs = stage_specs()
    if not 0 <= stage < len(specs):
        raise ConfigError(f"stage must be 0..{len(specs) - 1}, got {stage}")
    upstream = _stage_path(ckpt_dir, None if stage == 0 else stage - 1)
    if not os.path.exists(upstream):
        raise LineageError(f"stage {stage} needs upstream checkpoint {upstream}")
    model, meta = _restore(cfg, upstream)
    spec = specs[stage]
    plan = derive_run_plan(
        spec, scale=cfg.scale, lr_scale=cfg.lr_scale,
        steps=args.steps, batch=args.batch, step_floor=cfg.step_floor,
    )
    with _Lock(ckpt_dir):
        with LossLog(os.path.join(logs, f"stage_{stage}.csv")) as log:
            meta = run_stage(model, spec, meta, plan=plan, log=log)
        meta["config"] = cfg.to_dict()
        path = _stage_path(ckpt_dir, stage)
        save_checkpoint(model, meta, path)
    print(f"stage {stage}: {plan.steps} steps, batch {plan.batch}, lr {plan.lr:g}")
    print(f"saved {path}")
    _manifest(args.out, f"train --stage {stage}", cfg, [path])
    return 0


def cmd_generate(args):
    cfg = _load_config(args)
    model, _ = _restore(cfg, args.checkpoint)
    sampler_cfg = SamplerConfig(
        steps=args.steps or cfg.sampler_steps,
        cfg_txt=args.cfg_txt if args.cfg_txt is not None else cfg.cfg_txt,
        seed=cfg.seed,
    )
    image = Sampler(model).generate_image(args.prompt, sampler_cfg)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, args.name or "generated.ppm")
    write_ppm(path, image)
    print(f"wrote {path}")
    _manifest(args.out, "generate", cfg, [path])
    return 0


def cmd_edit(args):
    cfg = _load_config(args)
    model, _ = _restore(cfg, args.checkpoint)
    source = read_ppm(args.image)
    sampler = Sampler(model)
    os.makedirs(args.out, exist_ok=True)
    artifacts = []
    grid = CFG_GRID if args.cfg_grid else [
        (
            args.cfg_img if args.cfg_img is not None else cfg.cfg_img,
            args.cfg_txt if args.cfg_txt is not None else cfg.cfg_txt,
        )
    ]
    rows = []
    for cfg_img, cfg_txt in grid:
        sampler_cfg = SamplerConfig(
            steps=args.steps or cfg.sampler_steps, cfg_txt=cfg_txt, cfg_img=cfg_img, seed=cfg.seed
        )
        out = sampler.edit_image(source, args.instruction, sampler_cfg)
        name = f"edit_img{cfg_img:g}_txt{cfg_txt:g}.ppm"
        path = os.path.join(args.out, name)
        write_ppm(path, out)
        similarity = float(-np.mean((out - source) ** 2))
        rows.append((cfg_img, cfg_txt, name, similarity))
        artifacts.append(path)
    report = os.path.join(args.out, "edit_report.csv")
    with open(report, "w") as fh:
        fh.write("cfg_img,cfg_txt,image,source_similarity\n")
        for r in rows:
            fh.write(f"{r[0]},{r[1]},{r[2]},{r[3]:.6f}\n")
    artifacts.append(report)
    print(f"wrote {len(rows)} edit(s); report at {report}")
    _manifest(args.out, "edit", cfg, artifacts)
    return 0


def cmd_eval(args):
    cfg = _load_config(args)
    model, _ = _restore(cfg, args.checkpoint)
    sampler = Sampler(model)
    os.makedirs(args.out, exist_ok=True)
    if args.suite == "geneval-toy":
        system = lambda prompt, seed: sampler.generate_image(
            prompt, SamplerConfig(steps=cfg.sampler_steps, cfg_txt=cfg.cfg_txt, seed=seed)
        )
        scores = evaluate_geneval_toy(system, args.n, cfg.seed)
        path = os.path.join(args.out, "geneval_toy.csv")
        with open(path, "w") as fh:
            fh.write("category,score\n")
            for k, v in scores.items():
                fh.write(f"{k},{v:.4f}\n")
        width = max(len(k) for k in scores)
        for k, v in scores.items():
            print(f"{k:<{width}}  {v:.3f}")
    else:
        system = lambda img, instruction, seed: sampler.edit_image(
            img,
            instruction,
            SamplerConfig(steps=cfg.sampler_steps, cfg_txt=cfg.cfg_txt, cfg_img=cfg.cfg_img, seed=seed),
        )
        out = evaluate_edit_toy(system, args.n, cfg.seed)
        path = os.path.join(args.out, "edit_toy.csv")
        with open(path, "w") as fh:
            fh.write("kind,success,preservation\n")
            for k in out["success"]:
                fh.write(f"{k},{out['success'][k]:.4f},{out['preservation'][k]:.4f}\n")
        for k in out["success"]:
            print(f"{k:<10} success {out['success'][k]:.3f}  preservation {out['preservation'][k]:.3f}")
    print(f"wrote {path}")
    _manifest(args.out, f"eval --suite {args.suite}", cfg, [path])
    return 0


def cmd_ablate_refiner(args):
    from .ablation import run_refiner_ablation

    cfg = _load_config(args)
    os.makedirs(args.out, exist_ok=True)
    rows = run_refiner_ablation(
        cfg, steps=args.steps, eval_n=args.eval_n, vae_checkpoint=args.vae_checkpoint
    )
    path = os.path.join(args.out, "refiner_ablation.csv")
    with open(path, "w") as fh:
        fh.write("variant,input_mode,global_mode,final_loss,single_object,colors,overall\n")
        for r in rows:
            fh.write(
                f"{r['variant']},{r['input_mode']},{r['global_mode']},"
                f"{r['final_loss']:.4f},{r['single_object']:.3f},{r['colors']:.3f},{r['overall']:.3f}\n"
            )
    for r in rows:
        print(
            f"{r['variant']:<24} loss {r['final_loss']:.4f}  single {r['single_object']:.2f}  "
            f"colors {r['colors']:.2f}  overall {r['overall']:.2f}"
        )
    print(f"wrote {path}")
    _manifest(args.out, "ablate-refiner", cfg, [path])
    return 0


def cmd_inspect(args):
    if args.preset:
        counts = analytic_param_counts(paper_scale_config())
        print("paper-scale preset (dry run, analytic counts)")
        meta = None
    else:
        state, meta = read_checkpoint(args.checkpoint)
        counts = {"llm": 0, "decoder": 0, "encoder": 0, "adapter": 0, "vae": 0, "refiner": 0}
        for name, arr in state.items():
            counts[name.split(".", 1)[0]] += arr.size
    print(f"{'module':<10} {'params':>12}")
    for module in ("llm", "decoder", "encoder", "adapter", "vae", "refiner"):
        print(f"{module:<10} {counts[module]:>12,}")
    print(f"{'total':<10} {sum(counts.values()):>12,}")
    if meta is not None:
        lineage = meta.get("lineage", [])
        print(f"stage lineage: {lineage if lineage else '(vae only)'}; seed {meta.get('seed')}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="minimm",
        description="Desk-scale unified multimodal model on a synthetic shapes world",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")
        p.add_argument("--seed", type=int, help="seed override")
        if out:
            p.add_argument("--out", required=True, help="run directory")

    p = sub.add_parser("pretrain-vae", help="pretrain and freeze the image autoencoder")
    common(p)
    p.set_defaults(fn=cmd_pretrain_vae)

    p = sub.add_parser("train", help="run one training stage (expects the previous one)")
    common(p)
    p.add_argument("--stage", type=int, required=True)
    p.add_argument("--steps", type=int, help="override scaled step count")
    p.add_argument("--batch", type=int, help="override scaled batch size")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("generate", help="text-to-image sampling")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--cfg-txt", type=float, dest="cfg_txt")
    p.add_argument("--steps", type=int)
    p.add_argument("--name", help="output file name")
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("edit", help="instruction-based image editing")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="source PPM image")
    p.add_argument("--instruction", required=True)
    p.add_argument("--cfg-img", type=float, dest="cfg_img")
    p.add_argument("--cfg-txt", type=float, dest="cfg_txt")
    p.add_argument("--cfg-grid", action="store_true", help="sweep the benchmark guidance grid")
    p.add_argument("--steps", type=int)
    p.set_defaults(fn=cmd_edit)

    p = sub.add_parser("eval", help="run a toy benchmark suite")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--suite", choices=("geneval-toy", "edit-toy"), required=True)
    p.add_argument("--n", type=int, default=20, help="samples per category")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate-refiner", help="train and compare the four refiner variants")
    common(p)
    p.add_argument("--steps", type=int, default=150, help="training budget per variant")
    p.add_argument("--eval-n", type=int, default=6, dest="eval_n")
    p.add_argument("--vae-checkpoint", help="reuse a pretrained VAE checkpoint")
    p.set_defaults(fn=cmd_ablate_refiner)

    p = sub.add_parser("inspect", help="per-module parameter counts")
    p.add_argument("--checkpoint")
    p.add_argument("--preset", choices=("paper_scale_dry_run",))
    p.set_defaults(fn=cmd_inspect)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "inspect" and not (args.checkpoint or args.preset):
        print("ConfigError: inspect needs --checkpoint or --preset", file=sys.stderr)
        return 1
    try:
        return args.fn(args)
    except MiniMMError as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
