"""Programmatic generation/editing benchmarks over the shapes world.

Scoring is fully deterministic and model-free: generated images are parsed
back into scene specs and checked against the prompt's constraint (or the
edit's target scene). Calibration systems (oracle, identity, noise) pin the
score ceiling and floor; the evaluator never touches the weights of the
system under test.
"""

from __future__ import annotations

import numpy as np

from .grammar import EDIT_KINDS, EVAL_CATEGORIES, parse_caption, sample_edit, sample_prompt
from .shapes import CANVAS, parse, render


def _sample_seed(seed: int, block: int, i: int) -> int:
    return int(np.random.SeedSequence([seed, block, i]).generate_state(1)[0])


def evaluate_geneval_toy(system, n_per_category: int, seed: int) -> dict:
    """Constraint-satisfaction rate per caption category, plus the mean.

    ``system(prompt, seed) -> [64, 64, 3] image``; prompts are used verbatim.
    """
    results = {}
    for ci, category in enumerate(EVAL_CATEGORIES):
        rng = np.random.default_rng(np.random.SeedSequence([seed, ci]))
        hits = 0
        for i in range(n_per_category):
            caption, _, constraint = sample_prompt(category, rng)
            image = system(caption, _sample_seed(seed, ci, i))
            hits += bool(constraint.satisfied_by(parse(image)))
        results[category] = hits / n_per_category
    results["overall"] = float(np.mean([results[c] for c in EVAL_CATEGORIES]))
    return results


def evaluate_edit_toy(system, n_per_kind: int, seed: int) -> dict:
    """Edit success and source-preservation rates per edit kind.

    ``system(source_image, instruction, seed) -> image``. Success means the
    parsed output matches the target scene exactly; preservation means every
    object shared by source and target survives in the output.
    """
    results = {}
    preservation = {}
    for ki, kind in enumerate(EDIT_KINDS):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 100 + ki]))
        ok = kept = 0
        for i in range(n_per_kind):
            source, instruction, target, _ = sample_edit(rng, kind)
            out = system(render(source), instruction, _sample_seed(seed, 100 + ki, i))
            parsed = parse(out).to_scene()
            ok += _edit_succeeded(parsed, source, target, kind)
            kept += _preserves_untouched(parsed, source, target)
        results[kind] = ok / n_per_kind
        preservation[kind] = kept / n_per_kind
    results["overall"] = float(np.mean([results[k] for k in EDIT_KINDS]))
    preservation["overall"] = float(np.mean([preservation[k] for k in EDIT_KINDS]))
    return {"success": results, "preservation": preservation}


def _scene_equal(a, b) -> bool:
    key = lambda o: (o.cell, o.shape, o.color, o.size)
    return sorted(map(key, a.objects)) == sorted(map(key, b.objects))


def _edit_succeeded(parsed, source, target, kind: str) -> bool:
    """Kind-aware target check.

    ``add`` instructions leave cell and size free, so any placement of the
    requested (color, shape) on top of the intact source counts; the other
    kinds determine the target scene exactly.
    """
    if kind != "add":
        return _scene_equal(parsed, target)
    src_keys = sorted((o.cell, o.shape, o.color, o.size) for o in source.objects)
    got = [(o.cell, o.shape, o.color, o.size) for o in parsed.objects]
    added = set(o for o in target.objects) - set(source.objects)
    (new_obj,) = added
    candidates = [g for g in got if (g[1], g[2]) == (new_obj.shape, new_obj.color)]
    for cand in candidates:
        rest = list(got)
        rest.remove(cand)
        if sorted(rest) == src_keys:
            return True
    return False


def _preserves_untouched(parsed, source, target) -> bool:
    src = {(o.cell, o.shape, o.color, o.size) for o in source.objects}
    tgt = {(o.cell, o.shape, o.color, o.size) for o in target.objects}
    got = {(o.cell, o.shape, o.color, o.size) for o in parsed.objects}
    return (src & tgt) <= got


# -- calibration systems --------------------------------------------------------------


def oracle_generator(prompt: str, seed: int) -> np.ndarray:
    """Score ceiling: build a scene satisfying the prompt and render it."""
    constraint = parse_caption(prompt)
    rng = np.random.default_rng(seed)
    from .grammar import _rand_object, _sample_related_pair
    from .shapes import SceneSpec

    if constraint.category == "counting":
        _, shape = constraint.shapes[0]
        objs = []
        for _ in range(constraint.count):
            objs.append(_rand_object(rng, shape=shape, exclude_cells={o.cell for o in objs}))
        return render(SceneSpec(tuple(objs)))
    if constraint.category == "position":
        (c1, s1), (c2, s2) = constraint.shapes
        a, b = _sample_related_pair(rng, constraint.relation)
        from .shapes import ObjectSpec

        a = ObjectSpec(s1, c1, a.cell, a.size)
        b = ObjectSpec(s2, c2, b.cell, b.size)
        return render(SceneSpec((a, b)))
    objs = []
    for color, shape in constraint.shapes:
        objs.append(
            _rand_object(rng, shape=shape, color=color, exclude_cells={o.cell for o in objs})
        )
    return render(SceneSpec(tuple(objs)))


def noise_generator(prompt: str, seed: int) -> np.ndarray:
    """Score floor: uniform pixel noise, ignoring the prompt."""
    rng = np.random.default_rng(seed)
    return rng.uniform(0, 1, size=(CANVAS, CANVAS, 3)).astype(np.float32)


def oracle_editor(source_image, instruction: str, seed: int) -> np.ndarray:
    """Edit ceiling: re-derive the target scene from source + instruction."""
    target = apply_instruction(parse(source_image).to_scene(), instruction, seed)
    return render(target)


def identity_editor(source_image, instruction: str, seed: int) -> np.ndarray:
    return np.array(source_image, copy=True)


def apply_instruction(scene, instruction: str, seed: int = 0):
    """Symbolically execute an edit instruction against a scene spec."""
    import re

    from .grammar import DIRECTIONS
    from .shapes import COLORS, GRID, SHAPES, ObjectSpec, SceneSpec

    sh = "|".join(SHAPES)
    co = "|".join(COLORS)
    m = re.fullmatch(rf"add a ({co}) ({sh})", instruction)
    if m:
        rng = np.random.default_rng(seed)
        free = [
            (r, c)
            for r in range(GRID)
            for c in range(GRID)
            if (r, c) not in {o.cell for o in scene.objects}
        ]
        cell = free[int(rng.integers(len(free)))]
        size = ("small", "large")[int(rng.integers(2))]
        return SceneSpec(scene.objects + (ObjectSpec(m.group(2), m.group(1), cell, size),))
    m = re.fullmatch(rf"remove the ({co}) ({sh})", instruction)
    if m:
        rest = tuple(
            o for o in scene.objects if not (o.color == m.group(1) and o.shape == m.group(2))
        )
        return SceneSpec(rest)
    m = re.fullmatch(rf"make the ({co}) ({sh}) ({co})", instruction)
    if m:
        objs = tuple(
            ObjectSpec(o.shape, m.group(3), o.cell, o.size)
            if o.color == m.group(1) and o.shape == m.group(2)
            else o
            for o in scene.objects
        )
        return SceneSpec(objs)
    m = re.fullmatch(rf"move the ({co}) ({sh}) (left|right|up|down)", instruction)
    if m:
        dr, dc = DIRECTIONS[m.group(3)]
        objs = tuple(
            ObjectSpec(o.shape, o.color, (o.cell[0] + dr, o.cell[1] + dc), o.size)
            if o.color == m.group(1) and o.shape == m.group(2)
            else o
            for o in scene.objects
        )
        return SceneSpec(objs)
    raise ValueError(f"instruction {instruction!r} is outside the edit grammar")
