"""Synthetic shapes world: scene specs, deterministic rendering, and parsing.

The world is a 64x64 RGB canvas divided into a 4x4 grid of 16px cells. A scene
holds up to four objects, each a (shape, color, cell, size) tuple. Rendering
is exact rasterization with no anti-aliasing, so a rendered scene uses only
palette colors. Parsing inverts rendering by nearest-palette segmentation,
connected components, and bounding-box fill-ratio shape classification; it is
calibrated to round-trip every generator-valid scene and to reject noise.

Palette (exact 8-bit RGB):
    red    (220,  40,  40)    green  ( 45, 170,  70)
    blue   ( 50,  80, 220)    yellow (235, 215,  50)
    purple (145,  55, 200)    orange (240, 140,  40)
    cyan   ( 60, 200, 215)    pink   (235, 105, 175)
Background: (242, 242, 242).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ContractError

CANVAS = 64
GRID = 4
CELL = CANVAS // GRID

SHAPES = ("circle", "square", "triangle")
SIZES = ("small", "large")

PALETTE = {
    "red": (220, 40, 40),
    "green": (45, 170, 70),
    "blue": (50, 80, 220),
    "yellow": (235, 215, 50),
    "purple": (145, 55, 200),
    "orange": (240, 140, 40),
    "cyan": (60, 200, 215),
    "pink": (235, 105, 175),
}
COLORS = tuple(PALETTE)
BACKGROUND = (242, 242, 242)

_RADIUS = {"small": 5, "large": 7}

# Parser calibration; see docs in parse().
_MIN_AREA = 24
_SQUARE_FILL = 0.90
_CIRCLE_FILL = 0.635
_SIZE_SPLIT = 13  # max bbox side <= split -> small


@dataclass(frozen=True)
class ObjectSpec:
    shape: str
    color: str
    cell: tuple  # (row, col), 0-based
    size: str

    def validate(self):
        if self.shape not in SHAPES:
            raise ContractError(f"unknown shape {self.shape!r}")
        if self.color not in PALETTE:
            raise ContractError(f"unknown color {self.color!r}")
        if self.size not in SIZES:
            raise ContractError(f"unknown size {self.size!r}")
        r, c = self.cell
        if not (0 <= r < GRID and 0 <= c < GRID):
            raise ContractError(f"cell {self.cell} outside the {GRID}x{GRID} grid")


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple = ()

    def __post_init__(self):
        if len(self.objects) > 4:
            raise ContractError("a scene holds at most 4 objects")
        cells = [o.cell for o in self.objects]
        if len(set(cells)) != len(cells):
            raise ContractError("two objects share a grid cell")
        for o in self.objects:
            o.validate()

    def find(self, shape=None, color=None):
        return [
            o
            for o in self.objects
            if (shape is None or o.shape == shape) and (color is None or o.color == color)
        ]


@dataclass(frozen=True)
class ParsedObject:
    shape: str
    color: str
    cell: tuple
    size: str
    confidence: float


@dataclass
class ParsedScene:
    objects: list = field(default_factory=list)

    def confident(self, threshold: float = 0.5):
        return [o for o in self.objects if o.confidence >= threshold]

    def to_scene(self, threshold: float = 0.5) -> SceneSpec:
        objs = tuple(
            ObjectSpec(o.shape, o.color, o.cell, o.size) for o in self.confident(threshold)
        )
        return SceneSpec(objs)

    def find(self, shape=None, color=None, threshold: float = 0.5):
        return [
            o
            for o in self.confident(threshold)
            if (shape is None or o.shape == shape) and (color is None or o.color == color)
        ]


def _object_mask(shape: str, size: str) -> np.ndarray:
    r = _RADIUS[size]
    side = 2 * r + 1
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    if shape == "circle":
        return (yy * yy + xx * xx) <= r * r
    if shape == "square":
        return np.ones((side, side), dtype=bool)
    # upward triangle: apex on top, base at the bottom
    halfwidth = (yy + r) / 2.0
    return np.abs(xx) <= halfwidth


def render(spec: SceneSpec) -> np.ndarray:
    """Rasterize a scene to a float32 [64, 64, 3] image in [0, 1]."""
    img = np.empty((CANVAS, CANVAS, 3), dtype=np.float32)
    img[:] = np.asarray(BACKGROUND, dtype=np.float32) / 255.0
    for obj in spec.objects:
        r = _RADIUS[obj.size]
        cy = obj.cell[0] * CELL + CELL // 2
        cx = obj.cell[1] * CELL + CELL // 2
        mask = _object_mask(obj.shape, obj.size)
        ys, xs = np.nonzero(mask)
        img[ys + cy - r, xs + cx - r] = np.asarray(PALETTE[obj.color], dtype=np.float32) / 255.0
    return img


def _palette_arrays():
    names = list(PALETTE) + ["__background__"]
    rgbs = np.array([PALETTE[c] for c in PALETTE] + [BACKGROUND], dtype=np.float32) / 255.0
    return names, rgbs


def parse(image: np.ndarray) -> ParsedScene:
    """Recover a scene from an image; tolerant of decoder blur, never raises.

    Pixels are assigned to the nearest palette entry (background included);
    per-color connected components above a minimum area become candidate
    objects. Shape comes from the bounding-box fill ratio (square ~1.0,
    circle ~0.7, triangle ~0.5), size from the bbox side, cell from the
    centroid. Confidence combines color purity with how close the fill
    ratio sits to the matched shape's ideal.
    """
    img = np.asarray(image, dtype=np.float32)
    if img.shape != (CANVAS, CANVAS, 3):
        raise ContractError(f"parse expects a {CANVAS}x{CANVAS} RGB image, got {img.shape}")
    names, rgbs = _palette_arrays()
    dists = np.linalg.norm(img[:, :, None, :] - rgbs[None, None, :, :], axis=-1)
    nearest = dists.argmin(axis=-1)
    purity_map = 1.0 - np.take_along_axis(dists, nearest[:, :, None], axis=-1)[:, :, 0] / np.sqrt(3)

    scene = ParsedScene()
    for ci, cname in enumerate(names[:-1]):
        mask = nearest == ci
        if not mask.any():
            continue
        labels, n = ndimage.label(mask)
        for comp in range(1, n + 1):
            comp_mask = labels == comp
            area = int(comp_mask.sum())
            if area < _MIN_AREA:
                continue
            ys, xs = np.nonzero(comp_mask)
            h = ys.max() - ys.min() + 1
            w = xs.max() - xs.min() + 1
            if max(h, w) > 2 * CELL:  # larger than any renderable object
                continue
            fill = area / float(h * w)
            if fill >= _SQUARE_FILL:
                shape, ideal = "square", 1.0
            elif fill >= _CIRCLE_FILL:
                shape, ideal = "circle", 0.665
            else:
                shape, ideal = "triangle", 0.50
            size = "small" if max(h, w) <= _SIZE_SPLIT else "large"
            cy, cx = ys.mean(), xs.mean()
            cell = (int(cy // CELL), int(cx // CELL))
            purity = float(purity_map[comp_mask].mean())
            shape_score = max(0.0, 1.0 - abs(fill - ideal) * 2.0)
            aspect = min(h, w) / max(h, w)
            confidence = purity * shape_score * aspect
            scene.objects.append(ParsedObject(shape, cname, cell, size, confidence))
    # the world allows one object per cell: keep the strongest detection there
    best = {}
    for obj in scene.objects:
        if obj.cell not in best or obj.confidence > best[obj.cell].confidence:
            best[obj.cell] = obj
    scene.objects = sorted(best.values(), key=lambda o: (o.cell, o.color))
    return scene


def scenes_match(a: SceneSpec, b: SceneSpec) -> bool:
    key = lambda o: (o.cell, o.shape, o.color, o.size)
    return sorted(map(key, a.objects)) == sorted(map(key, b.objects))


def sample_scene(rng: np.random.Generator, n_objects=None, unique_pairs: bool = False) -> SceneSpec:
    """Draw a random valid scene; ``unique_pairs`` forces distinct (color, shape)."""
    if n_objects is None:
        n_objects = int(rng.integers(1, 5))
    cell_list = [(int(i) // GRID, int(i) % GRID) for i in rng.permutation(GRID * GRID)[:n_objects]]
    objs = []
    used_pairs = set()
    for cell in cell_list:
        for _ in range(100):
            shape = SHAPES[int(rng.integers(len(SHAPES)))]
            color = COLORS[int(rng.integers(len(COLORS)))]
            if not unique_pairs or (color, shape) not in used_pairs:
                break
        used_pairs.add((color, shape))
        size = SIZES[int(rng.integers(2))]
        objs.append(ObjectSpec(shape, color, cell, size))
    return SceneSpec(tuple(objs))
