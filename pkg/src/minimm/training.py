"""Six-stage training orchestration: freeze schedules, task mixes, scaling.

The shipped stage table (steps and batch sizes at full scale, constant
learning rate per stage):

    stage 0  refiner+decoder        t2i                500K steps  batch 1024  lr 1e-4
    stage 1  adapter                und+t2i+edit       1.51K       8192        5e-4
    stage 2  encoder+adapter        und+t2i+edit       2.63K       8192        1e-4
    stage 3  encoder+adapter+llm    und                23K         2240        5e-5
    stage 4  refiner+decoder        t2i                275K        256         5e-5
    stage 5  refiner+decoder        t2i+edit           325K        256         5e-5

Desk-scale runs map steps by a scale factor (default 1/500, floor 200) and
batches by dividing by 128 into [4, 16]. The VAE is pretrained out of band
and frozen in every stage; stages must run in order 0 -> 5.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .errors import ConfigError, LineageError, NumericsError
from .grammar import sample_task
from .optim import AdamW

FREEZE_GROUPS = ("encoder", "adapter", "llm", "refiner", "decoder")
TASKS = ("understanding", "t2i", "editing")

DEFAULT_SCALE = 1.0 / 500.0
STEP_FLOOR = 200
BATCH_DIVISOR = 128
BATCH_MIN, BATCH_MAX = 4, 16


@dataclass(frozen=True)
class StageSpec:
    id: int
    trained: frozenset
    tasks: tuple
    steps: int
    batch_size: int
    lr: float

    def __post_init__(self):
        if not self.trained:
            raise ConfigError("a stage must train at least one parameter group")
        if not self.tasks:
            raise ConfigError("a stage must include at least one task")
        for t in self.tasks:
            if t not in TASKS:
                raise ConfigError(f"unknown task {t!r}")


def stage_specs() -> list:
    """The six shipped stages, full-scale values row for row."""
    rd = frozenset({"refiner", "decoder"})
    return [
        StageSpec(0, rd, ("t2i",), 500_000, 1024, 1e-4),
        StageSpec(1, frozenset({"adapter"}), ("understanding", "t2i", "editing"), 1_510, 8192, 5e-4),
        StageSpec(2, frozenset({"encoder", "adapter"}), ("understanding", "t2i", "editing"), 2_630, 8192, 1e-4),
        StageSpec(3, frozenset({"encoder", "adapter", "llm"}), ("understanding",), 23_000, 2240, 5e-5),
        StageSpec(4, rd, ("t2i",), 275_000, 256, 5e-5),
        StageSpec(5, rd, ("t2i", "editing"), 325_000, 256, 5e-5),
    ]


def freeze_mask(spec: StageSpec, model) -> dict:
    """Mark exactly the stage's groups trainable; the VAE is always frozen.

    Returns {name_path: trainable} for inspection.
    """
    unknown = spec.trained - set(FREEZE_GROUPS)
    if unknown:
        raise ConfigError(f"unknown trainable group(s) {sorted(unknown)}; valid: {FREEZE_GROUPS}")
    assignment = {}
    for name, p in model.named_parameters():
        group = name.split(".", 1)[0]
        trainable = group in spec.trained and group != "vae"
        p.trainable = trainable
        assignment[name] = trainable
    return assignment


@dataclass
class RunPlan:
    steps: int
    batch: int
    lr: float


def derive_run_plan(spec: StageSpec, scale: float = DEFAULT_SCALE,
                    steps: int | None = None, batch: int | None = None,
                    lr_scale: float = 1.0, step_floor: int = STEP_FLOOR) -> RunPlan:
    """Map a full-scale stage row onto a desk-scale run.

    Explicit ``steps``/``batch`` bypass the mapping (and its floor), which is
    how short freeze probes and no-op runs are expressed.
    """
    if steps is None:
        steps = max(step_floor, int(round(spec.steps * scale)))
    if batch is None:
        batch = min(BATCH_MAX, max(BATCH_MIN, spec.batch_size // BATCH_DIVISOR))
    return RunPlan(steps=int(steps), batch=int(batch), lr=spec.lr * lr_scale)


def new_meta(seed: int, config: dict | None = None) -> dict:
    return {
        "vae_pretrained": False,
        "lineage": [],
        "stage": None,
        "step": 0,
        "seed": seed,
        "config": config or {},
        "rng_state": None,
    }


def check_lineage(spec: StageSpec, meta: dict):
    if not meta.get("vae_pretrained"):
        raise LineageError(f"stage {spec.id} requires a pretrained VAE checkpoint")
    lineage = list(meta.get("lineage", []))
    if lineage != list(range(len(lineage))):
        raise LineageError(f"corrupt stage lineage {lineage}")
    if spec.id > len(lineage):
        raise LineageError(
            f"stage {spec.id} needs stage {spec.id - 1} first; lineage so far: {lineage}"
        )


def run_stage(model, spec: StageSpec, meta: dict, plan: RunPlan | None = None,
              scale: float = DEFAULT_SCALE, lr_scale: float = 1.0,
              log=None, t2i_category_rng: bool = True) -> dict:
    """Run one training stage; returns updated lineage metadata.

    Each step draws one task uniformly from the stage's task set, builds a
    fresh batch from the synthetic world, and applies one optimizer step to
    the stage's trainable groups. Deterministic given (meta seed, stage id).
    """
    check_lineage(spec, meta)
    if plan is None:
        plan = derive_run_plan(spec, scale=scale, lr_scale=lr_scale)
    freeze_mask(spec, model)
    rng = np.random.default_rng(np.random.SeedSequence([int(meta["seed"]), 1000 + spec.id]))
    trainable = [p for p in model.parameters() if p.trainable]
    opt = AdamW(trainable, lr=plan.lr)
    with T.checked_mode(False):
        for step in range(plan.steps):
            task = spec.tasks[int(rng.integers(len(spec.tasks)))]
            examples = [sample_task(task, rng) for _ in range(plan.batch)]
            model.zero_grad()
            if task == "understanding":
                loss = model.understanding_loss(examples)
            elif task == "t2i":
                loss = model.t2i_loss(examples, rng)
            else:
                loss = model.edit_loss(examples, rng)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericsError(f"stage {spec.id} diverged: non-finite loss at step {step}")
            loss.backward()
            opt.step()
            if log is not None:
                log(step, task, value)
    out = dict(meta)
    out["lineage"] = list(meta["lineage"]) + ([spec.id] if spec.id not in meta["lineage"] else [])
    out["stage"] = spec.id
    out["step"] = plan.steps
    out["rng_state"] = rng.bit_generator.state["state"]
    return out


class LossLog:
    """CSV loss log: header ``step,task,loss``."""

    def __init__(self, path):
        self.path = path
        self._fh = open(path, "w")
        self._fh.write("step,task,loss\n")

    def __call__(self, step, task, loss):
        self._fh.write(f"{step},{task},{loss:.6f}\n")

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
