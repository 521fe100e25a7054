"""Caption, question, and edit-instruction grammars over the shapes world.

Captions are the bridge between text and scenes in both directions: the
generator emits (caption, scene) pairs for training, and the evaluator
re-parses a caption into the constraint it must check on a generated image.
Six caption categories mirror a standard compositional text-to-image
benchmark: single object, two object, counting, colors, position, and
attribute binding.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .shapes import (
    COLORS,
    GRID,
    SHAPES,
    SIZES,
    ObjectSpec,
    SceneSpec,
    render,
    sample_scene,
)

EVAL_CATEGORIES = (
    "single_object",
    "two_object",
    "counting",
    "colors",
    "position",
    "attribute_binding",
)

EDIT_KINDS = ("add", "remove", "recolor", "move")

NUMBER_WORDS = ("zero", "one", "two", "three", "four")
RELATIONS = ("left of", "right of", "above", "below")
DIRECTIONS = {"left": (0, -1), "right": (0, 1), "up": (-1, 0), "down": (1, 0)}


# -- constraints ---------------------------------------------------------------


@dataclass(frozen=True)
class Constraint:
    """What a generated image must satisfy for its prompt to count as met."""

    category: str
    shapes: tuple = ()  # [(color | None, shape)]
    count: int | None = None
    relation: str | None = None

    def satisfied_by(self, scene) -> bool:
        if self.category == "counting":
            color, shape = self.shapes[0]
            return len(scene.find(shape=shape, color=color)) == self.count
        if self.category == "position":
            (c1, s1), (c2, s2) = self.shapes
            first = scene.find(shape=s1, color=c1)
            second = scene.find(shape=s2, color=c2)
            if len(first) != 1 or len(second) != 1:
                return False
            return _relation_holds(first[0].cell, second[0].cell, self.relation)
        for color, shape in self.shapes:
            if not scene.find(shape=shape, color=color):
                return False
        return True


def _relation_holds(cell_a, cell_b, relation: str) -> bool:
    if relation == "left of":
        return cell_a[1] < cell_b[1]
    if relation == "right of":
        return cell_a[1] > cell_b[1]
    if relation == "above":
        return cell_a[0] < cell_b[0]
    if relation == "below":
        return cell_a[0] > cell_b[0]
    raise ContractError(f"unknown relation {relation!r}")


# -- caption construction ----------------------------------------------------------


def _pick(rng, seq):
    return seq[int(rng.integers(len(seq)))]


def _rand_object(rng, shape=None, color=None, cell=None, exclude_cells=()):
    shape = shape or _pick(rng, SHAPES)
    color = color or _pick(rng, COLORS)
    if cell is None:
        free = [
            (r, c)
            for r in range(GRID)
            for c in range(GRID)
            if (r, c) not in exclude_cells
        ]
        cell = _pick(rng, free)
    return ObjectSpec(shape, color, cell, _pick(rng, SIZES))


def sample_prompt(category: str, rng: np.random.Generator):
    """Draw (caption, scene, constraint); the scene realizes the caption."""
    if category == "single_object":
        obj = _rand_object(rng)
        caption = f"a {obj.shape}"
        constraint = Constraint(category, ((None, obj.shape),))
        return caption, SceneSpec((obj,)), constraint

    if category == "colors":
        obj = _rand_object(rng)
        caption = f"a {obj.color} {obj.shape}"
        constraint = Constraint(category, ((obj.color, obj.shape),))
        return caption, SceneSpec((obj,)), constraint

    if category == "two_object":
        s1, s2 = rng.permutation(len(SHAPES))[:2]
        a = _rand_object(rng, shape=SHAPES[s1])
        b = _rand_object(rng, shape=SHAPES[s2], exclude_cells={a.cell})
        caption = f"a {a.shape} and a {b.shape}"
        constraint = Constraint(category, ((None, a.shape), (None, b.shape)))
        return caption, SceneSpec((a, b)), constraint

    if category == "counting":
        n = int(rng.integers(1, 5))
        shape = _pick(rng, SHAPES)
        objs = []
        for _ in range(n):
            objs.append(_rand_object(rng, shape=shape, exclude_cells={o.cell for o in objs}))
        plural = "s" if n != 1 else ""
        caption = f"{NUMBER_WORDS[n]} {shape}{plural}"
        constraint = Constraint(category, ((None, shape),), count=n)
        return caption, SceneSpec(tuple(objs)), constraint

    if category == "position":
        relation = _pick(rng, RELATIONS)
        a, b = _sample_related_pair(rng, relation)
        caption = f"a {a.color} {a.shape} {relation} a {b.color} {b.shape}"
        constraint = Constraint(
            category, ((a.color, a.shape), (b.color, b.shape)), relation=relation
        )
        return caption, SceneSpec((a, b)), constraint

    if category == "attribute_binding":
        s1, s2 = rng.permutation(len(SHAPES))[:2]
        c1, c2 = rng.permutation(len(COLORS))[:2]
        a = _rand_object(rng, shape=SHAPES[s1], color=COLORS[c1])
        b = _rand_object(rng, shape=SHAPES[s2], color=COLORS[c2], exclude_cells={a.cell})
        caption = f"a {a.color} {a.shape} and a {b.color} {b.shape}"
        constraint = Constraint(category, ((a.color, a.shape), (b.color, b.shape)))
        return caption, SceneSpec((a, b)), constraint

    raise ContractError(f"unknown category {category!r}")


def _sample_related_pair(rng, relation):
    while True:
        a = _rand_object(rng)
        b = _rand_object(rng, exclude_cells={a.cell})
        if (a.color, a.shape) == (b.color, b.shape):
            continue
        if _relation_holds(a.cell, b.cell, relation):
            return a, b


def parse_caption(caption: str) -> Constraint:
    """Grammar inverse: rebuild the constraint a caption expresses."""
    sh = "|".join(SHAPES)
    co = "|".join(COLORS)
    m = re.fullmatch(rf"a ({co}) ({sh}) (left of|right of|above|below) a ({co}) ({sh})", caption)
    if m:
        return Constraint(
            "position",
            ((m.group(1), m.group(2)), (m.group(4), m.group(5))),
            relation=m.group(3),
        )
    m = re.fullmatch(rf"a ({co}) ({sh}) and a ({co}) ({sh})", caption)
    if m:
        return Constraint(
            "attribute_binding", ((m.group(1), m.group(2)), (m.group(3), m.group(4)))
        )
    m = re.fullmatch(rf"a ({sh}) and a ({sh})", caption)
    if m:
        return Constraint("two_object", ((None, m.group(1)), (None, m.group(2))))
    m = re.fullmatch(rf"({'|'.join(NUMBER_WORDS[1:])}) ({sh})s?", caption)
    if m:
        return Constraint(
            "counting", ((None, m.group(2)),), count=NUMBER_WORDS.index(m.group(1))
        )
    m = re.fullmatch(rf"a ({co}) ({sh})", caption)
    if m:
        return Constraint("colors", ((m.group(1), m.group(2)),))
    m = re.fullmatch(rf"a ({sh})", caption)
    if m:
        return Constraint("single_object", ((None, m.group(1)),))
    raise ContractError(f"caption {caption!r} is outside the grammar")


# -- questions -----------------------------------------------------------------


def sample_question(rng: np.random.Generator):
    """Draw (scene, question, answer) for the understanding task."""
    kind = _pick(rng, ("color_of", "count", "shape_of", "exists"))
    if kind == "color_of":
        scene = sample_scene(rng, n_objects=int(rng.integers(1, 4)), unique_pairs=True)
        shapes_present = [o.shape for o in scene.objects]
        unique = [s for s in SHAPES if shapes_present.count(s) == 1]
        if not unique:
            return sample_question(rng)
        shape = _pick(rng, unique)
        obj = scene.find(shape=shape)[0]
        return scene, f"what color is the {shape}?", obj.color
    if kind == "count":
        scene = sample_scene(rng)
        shape = _pick(rng, SHAPES)
        n = len(scene.find(shape=shape))
        return scene, f"how many {shape}s are there?", NUMBER_WORDS[n]
    if kind == "shape_of":
        scene = sample_scene(rng, n_objects=int(rng.integers(1, 4)), unique_pairs=True)
        colors_present = [o.color for o in scene.objects]
        unique = [c for c in COLORS if colors_present.count(c) == 1]
        if not unique:
            return sample_question(rng)
        color = _pick(rng, unique)
        obj = scene.find(color=color)[0]
        return scene, f"what shape is the {color} object?", obj.shape
    scene = sample_scene(rng)
    shape = _pick(rng, SHAPES)
    color = _pick(rng, COLORS)
    answer = "yes" if scene.find(shape=shape, color=color) else "no"
    return scene, f"is there a {color} {shape}?", answer


# -- edits --------------------------------------------------------------------


def sample_edit(rng: np.random.Generator, kind: str | None = None):
    """Draw (source scene, instruction, target scene, kind).

    Source objects carry unique (color, shape) pairs so instructions refer
    unambiguously.
    """
    kind = kind or _pick(rng, EDIT_KINDS)
    if kind == "add":
        scene = sample_scene(rng, n_objects=int(rng.integers(1, 3)), unique_pairs=True)
        used = {(o.color, o.shape) for o in scene.objects}
        while True:
            new = _rand_object(rng, exclude_cells={o.cell for o in scene.objects})
            if (new.color, new.shape) not in used:
                break
        instruction = f"add a {new.color} {new.shape}"
        return scene, instruction, SceneSpec(scene.objects + (new,)), kind

    scene = sample_scene(rng, n_objects=int(rng.integers(1, 4)), unique_pairs=True)
    obj = scene.objects[int(rng.integers(len(scene.objects)))]
    rest = tuple(o for o in scene.objects if o is not obj)

    if kind == "remove":
        instruction = f"remove the {obj.color} {obj.shape}"
        return scene, instruction, SceneSpec(rest), kind

    if kind == "recolor":
        new_color = _pick(rng, [c for c in COLORS if c != obj.color])
        instruction = f"make the {obj.color} {obj.shape} {new_color}"
        target = SceneSpec(rest + (ObjectSpec(obj.shape, new_color, obj.cell, obj.size),))
        return scene, instruction, target, kind

    if kind == "move":
        occupied = {o.cell for o in scene.objects}
        options = []
        for word, (dr, dc) in DIRECTIONS.items():
            dest = (obj.cell[0] + dr, obj.cell[1] + dc)
            if 0 <= dest[0] < GRID and 0 <= dest[1] < GRID and dest not in occupied:
                options.append((word, dest))
        if not options:
            return sample_edit(rng, kind)
        word, dest = options[int(rng.integers(len(options)))]
        instruction = f"move the {obj.color} {obj.shape} {word}"
        target = SceneSpec(rest + (ObjectSpec(obj.shape, obj.color, dest, obj.size),))
        return scene, instruction, target, kind

    raise ContractError(f"unknown edit kind {kind!r}")


# -- training examples ------------------------------------------------------------


@dataclass
class UnderstandingExample:
    image: np.ndarray
    question: str
    answer: str


@dataclass
class T2IExample:
    caption: str
    image: np.ndarray
    constraint: Constraint


@dataclass
class EditExample:
    source_image: np.ndarray
    instruction: str
    target_image: np.ndarray
    kind: str


# Training mixture over caption categories; weighted toward the lower-arity
# prompts the toy decoder can actually master.
CATEGORY_WEIGHTS = {
    "single_object": 0.25,
    "colors": 0.35,
    "two_object": 0.12,
    "counting": 0.12,
    "position": 0.08,
    "attribute_binding": 0.08,
}


def sample_task(kind: str, rng: np.random.Generator):
    """Draw one training example of the given task (or caption category)."""
    if kind == "understanding":
        scene, question, answer = sample_question(rng)
        return UnderstandingExample(render(scene), question, answer)
    if kind == "t2i":
        cats = list(CATEGORY_WEIGHTS)
        probs = np.array([CATEGORY_WEIGHTS[c] for c in cats])
        category = cats[int(rng.choice(len(cats), p=probs / probs.sum()))]
        return sample_task(category, rng)
    if kind in EVAL_CATEGORIES:
        caption, scene, constraint = sample_prompt(kind, rng)
        return T2IExample(caption, render(scene), constraint)
    if kind == "editing":
        source, instruction, target, edit_kind = sample_edit(rng)
        return EditExample(render(source), instruction, render(target), edit_kind)
    raise ContractError(f"unknown task kind {kind!r}")
