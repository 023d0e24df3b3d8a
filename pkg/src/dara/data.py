"""Synthetic grid scenes with referring expressions.

A scene places coloured shapes in distinct cells of a ``G x G`` grid. The
``single`` difficulty has one object described by ``<color> <shape>``. The
``relational`` difficulty has two to four objects, at least two of which
share a colour or a shape, and describes the target as
``<color> <shape> <relation> <color> <shape>``; scenes where that phrase
does not pick out exactly one object are resampled.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError, GenerationError

SINGLE = "single"
RELATIONAL = "relational"
DIFFICULTIES = (SINGLE, RELATIONAL)

COLORS = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "magenta": (1.0, 0.0, 1.0),
    "cyan": (0.0, 1.0, 1.0),
}
SHAPES = ("square", "circle", "triangle")
RELATIONS = ("left-of", "right-of", "above", "below")
BACKGROUND = (0.5, 0.5, 0.5)
MAX_ATTEMPTS = 1000
DATASET_SCHEMA = "dara-dataset/1"


class Vocab:
    """Fixed bijective token table."""

    PAD, CLS, SEP = "[PAD]", "[CLS]", "[SEP]"

    def __init__(self) -> None:
        self.tokens = [self.PAD, self.CLS, self.SEP, *COLORS, *SHAPES, *RELATIONS]
        self.index = {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, words: Iterable[str]) -> list[int]:
        try:
            return [self.index[w] for w in words]
        except KeyError as exc:
            raise DataError(f"unknown token {exc.args[0]!r}") from None

    def decode(self, ids: Iterable[int]) -> list[str]:
        out = []
        for i in ids:
            if not 0 <= int(i) < len(self.tokens):
                raise DataError(f"token id {i} out of range")
            out.append(self.tokens[int(i)])
        return out

    @property
    def pad_id(self) -> int:
        return self.index[self.PAD]

    @property
    def cls_id(self) -> int:
        return self.index[self.CLS]

    @property
    def sep_id(self) -> int:
        return self.index[self.SEP]


VOCAB = Vocab()


@dataclass(frozen=True)
class SceneObject:
    color: str
    shape: str
    cell: tuple[int, int]


@dataclass(frozen=True)
class Scene:
    grid: int
    objects: tuple[SceneObject, ...]

    def __post_init__(self) -> None:
        cells = [o.cell for o in self.objects]
        if len(set(cells)) != len(cells):
            raise DataError("scene objects must occupy distinct cells")
        if len(self.objects) > self.grid * self.grid:
            raise DataError("more objects than grid cells")
        for r, c in cells:
            if not (0 <= r < self.grid and 0 <= c < self.grid):
                raise DataError(f"cell {(r, c)} outside a {self.grid}x{self.grid} grid")


@dataclass
class SceneSample:
    seed: int
    difficulty: str
    scene: Scene
    image: np.ndarray
    tokens: list[int]
    gt_box: np.ndarray
    target_index: int = 0
    words: list[str] = field(default_factory=list)


def cell_box(cell: tuple[int, int], grid: int) -> np.ndarray:
    """Normalized ``(cx, cy, w, h)`` of a grid cell."""
    r, c = cell
    return np.array([(c + 0.5) / grid, (r + 0.5) / grid, 1.0 / grid, 1.0 / grid])


def holds(relation: str, a: SceneObject, b: SceneObject) -> bool:
    """Whether ``a <relation> b`` holds on grid coordinates."""
    (ra, ca), (rb, cb) = a.cell, b.cell
    if relation == "left-of":
        return ca < cb
    if relation == "right-of":
        return ca > cb
    if relation == "above":
        return ra < rb
    if relation == "below":
        return ra > rb
    raise DataError(f"unknown relation {relation!r}")


def resolve(scene: Scene, words: Sequence[str]) -> list[int]:
    """Brute-force referent resolution of an expression; returns object indices."""
    objs = scene.objects
    if len(words) == 2:
        return [i for i, o in enumerate(objs) if (o.color, o.shape) == tuple(words)]
    if len(words) == 5:
        color, shape, rel, acolor, ashape = words
        out = []
        for i, o in enumerate(objs):
            if (o.color, o.shape) != (color, shape):
                continue
            if any(j != i and (a.color, a.shape) == (acolor, ashape) and holds(rel, o, a)
                   for j, a in enumerate(objs)):
                out.append(i)
        return out
    raise DataError(f"expression of length {len(words)} is not in the grammar")


def _shape_mask(shape: str, size: int) -> np.ndarray:
    m = max(1, size // 8)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    inner = size - 2 * m
    if shape == "square":
        return (yy > m) & (yy < size - m) & (xx > m) & (xx < size - m)
    if shape == "circle":
        return (yy - size / 2) ** 2 + (xx - size / 2) ** 2 <= (inner / 2) ** 2
    if shape == "triangle":
        frac = (yy - m) / inner
        return (yy > m) & (yy < size - m) & (np.abs(xx - size / 2) <= frac * inner / 2)
    raise DataError(f"unknown shape {shape!r}")


def render_scene(scene: Scene, height: int, width: int) -> np.ndarray:
    """Rasterize a scene to an ``[H, W, 3]`` float image in ``[0, 1]``."""
    g = scene.grid
    if height % g or width % g:
        raise ConfigError(f"image {height}x{width} is not divisible by grid {g}")
    ch, cw = height // g, width // g
    img = np.empty((height, width, 3))
    img[:] = BACKGROUND
    for obj in scene.objects:
        r, c = obj.cell
        mask = _shape_mask(obj.shape, min(ch, cw))
        patch = img[r * ch:(r + 1) * ch, c * cw:(c + 1) * cw]
        patch[: mask.shape[0], : mask.shape[1]][mask] = COLORS[obj.color]
    return img


def _random_object(rng, cell) -> SceneObject:
    colors = list(COLORS)
    return SceneObject(colors[rng.integers(len(colors))], SHAPES[rng.integers(len(SHAPES))], cell)


def _relational_scene(rng, grid: int, p_duplicate: float):
    n = int(rng.integers(2, 5))
    cells = rng.choice(grid * grid, size=n, replace=False)
    cells = [(int(k) // grid, int(k) % grid) for k in cells]
    target = _random_object(rng, cells[0])
    colors = list(COLORS)
    if rng.random() < p_duplicate:
        distractor = SceneObject(target.color, target.shape, cells[1])
    elif rng.random() < 0.5:
        distractor = SceneObject(target.color, SHAPES[rng.integers(len(SHAPES))], cells[1])
    else:
        distractor = SceneObject(colors[rng.integers(len(colors))], target.shape, cells[1])
    objs = [target, distractor] + [_random_object(rng, c) for c in cells[2:]]
    order = rng.permutation(n)
    objs = [objs[i] for i in order]
    t = int(np.flatnonzero(order == 0)[0])
    anchors = [j for j in range(n) if j != t]
    a = anchors[int(rng.integers(len(anchors)))]
    rels = [r for r in RELATIONS if holds(r, objs[t], objs[a])]
    rel = rels[int(rng.integers(len(rels)))]
    words = [objs[t].color, objs[t].shape, rel, objs[a].color, objs[a].shape]
    return Scene(grid, tuple(objs)), words, t


def generate_sample(seed: int, difficulty: str = SINGLE, grid: int = 4,
                    image_size: int = 32, p_duplicate: float = 0.5) -> SceneSample:
    """Deterministically generate one sample from ``seed``."""
    if difficulty not in DIFFICULTIES:
        raise ConfigError(f"unknown difficulty {difficulty!r}")
    rng = np.random.default_rng(seed)
    if difficulty == SINGLE:
        k = int(rng.integers(grid * grid))
        obj = _random_object(rng, (k // grid, k % grid))
        scene, words, t = Scene(grid, (obj,)), [obj.color, obj.shape], 0
    else:
        for _ in range(MAX_ATTEMPTS):
            scene, words, t = _relational_scene(rng, grid, p_duplicate)
            if resolve(scene, words) == [t]:
                break
        else:
            raise GenerationError(f"no unambiguous scene after {MAX_ATTEMPTS} attempts")
    image = render_scene(scene, image_size, image_size)
    return SceneSample(
        seed=int(seed), difficulty=difficulty, scene=scene, image=image,
        tokens=VOCAB.encode(words), gt_box=cell_box(scene.objects[t].cell, grid),
        target_index=t, words=list(words),
    )


def sample_seeds(run_seed: int, n: int, stream: int = 0) -> list[int]:
    """Per-sample seeds from a splittable counter over ``(run_seed, stream, i)``."""
    return [int(np.random.SeedSequence([run_seed, stream, i]).generate_state(1, np.uint64)[0])
            for i in range(n)]


def make_dataset(run_seed: int, n: int, difficulty: str, stream: int = 0,
                 grid: int = 4, image_size: int = 32,
                 p_duplicate: float = 0.5) -> list[SceneSample]:
    return [generate_sample(s, difficulty, grid, image_size, p_duplicate)
            for s in sample_seeds(run_seed, n, stream)]


def dump_dataset(samples: Sequence[SceneSample], path, grid: int, image_size: int,
                 p_duplicate: float = 0.5) -> None:
    """Write one tab-separated record per sample.

    Field order: seed, difficulty, space-separated token words, and the
    comma-separated ``cx,cy,w,h`` ground-truth box.
    """
    buf = io.StringIO()
    buf.write(f"# {DATASET_SCHEMA} grid={grid} image_size={image_size} p_duplicate={p_duplicate!r}\n")
    buf.write("# seed\tdifficulty\ttokens\tgt_box\n")
    for s in samples:
        box = ",".join(repr(float(v)) for v in s.gt_box)
        buf.write(f"{s.seed}\t{s.difficulty}\t{' '.join(VOCAB.decode(s.tokens))}\t{box}\n")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(buf.getvalue())


def load_dataset(path) -> list[SceneSample]:
    """Regenerate a dumped dataset from its seeds, checking every stored field."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith(f"# {DATASET_SCHEMA}"):
        raise DataError(f"{path}: missing {DATASET_SCHEMA} header")
    opts = dict(kv.split("=", 1) for kv in lines[0].split()[2:])
    grid, size = int(opts["grid"]), int(opts["image_size"])
    p_dup = float(opts.get("p_duplicate", 0.5))
    out = []
    for line in lines[1:]:
        if not line or line.startswith("#"):
            continue
        seed, difficulty, words, box = line.split("\t")
        sample = generate_sample(int(seed), difficulty, grid, size, p_dup)
        if sample.words != words.split() or not np.array_equal(
                sample.gt_box, np.array([float(v) for v in box.split(",")])):
            raise DataError(f"{path}: record for seed {seed} does not regenerate")
        out.append(sample)
    return out
