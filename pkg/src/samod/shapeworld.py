"""Synthetic grid-of-shapes question answering data.

Scenes put 2-6 colored shapes on a 4x4 grid of 8x8-pixel cells and render
to a 3x32x32 float image in [0, 1]. Questions come from fixed templates in
four families (existence, attribute, spatial-relation, comparison); every
stored answer is produced by the exact symbolic evaluator, never sampled.
Question text is rigid enough to parse back into its structured form, so
the evaluator can re-check a dataset from the file alone.

Dataset files are one record per line:
``sample_id<TAB>question<TAB>answer<TAB>scene-spec``; images are
re-rendered from the scene spec on load.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

COLORS = ("red", "green", "blue")
SHAPES = ("circle", "square", "triangle")
RELATIONS = ("left of", "right of", "above", "below")
FAMILIES = ("existence", "attribute", "spatial-relation", "comparison")

ANSWERS = ("yes", "no") + COLORS + SHAPES + tuple(str(n) for n in range(7))
ANSWER_IDS = {a: i for i, a in enumerate(ANSWERS)}

CELL_PX = 8
_RGB = {"red": (1.0, 0.0, 0.0), "green": (0.0, 1.0, 0.0), "blue": (0.0, 0.0, 1.0)}

MAX_MAJORITY = 0.6


class GenerationError(RuntimeError):
    """The requested dataset cannot be generated (e.g. unbalanceable)."""


# ----------------------------------------------------------------------
# scenes


@dataclass(frozen=True)
class SceneObject:
    row: int
    col: int
    color: str
    shape: str


@dataclass(frozen=True)
class Scene:
    grid: int
    objects: tuple[SceneObject, ...]


def _shape_masks() -> dict[str, np.ndarray]:
    yy, xx = np.mgrid[0:CELL_PX, 0:CELL_PX]
    circle = (yy - 3.5) ** 2 + (xx - 3.5) ** 2 <= 3.2**2
    square = (yy >= 1) & (yy <= 6) & (xx >= 1) & (xx <= 6)
    triangle = (yy >= 1) & (yy <= 6) & (np.abs(xx - 3.5) <= yy * 0.58)
    return {"circle": circle, "square": square, "triangle": triangle}


_MASKS = _shape_masks()


def render(scene: Scene) -> np.ndarray:
    """Rasterize to (3, grid*8, grid*8) float64 in [0, 1]; pure in the scene."""
    side = scene.grid * CELL_PX
    img = np.zeros((3, side, side))
    for obj in scene.objects:
        mask = _MASKS[obj.shape]
        r0, c0 = obj.row * CELL_PX, obj.col * CELL_PX
        rgb = _RGB[obj.color]
        for ch in range(3):
            img[ch, r0 : r0 + CELL_PX, c0 : c0 + CELL_PX][mask] = rgb[ch]
    return img


def sample_scene(rng: np.random.Generator, grid: int = 4) -> Scene:
    count = int(rng.integers(2, 7))
    cells = rng.choice(grid * grid, size=count, replace=False)
    objects = []
    for cell in sorted(int(c) for c in cells):
        objects.append(
            SceneObject(
                row=cell // grid,
                col=cell % grid,
                color=COLORS[int(rng.integers(len(COLORS)))],
                shape=SHAPES[int(rng.integers(len(SHAPES)))],
            )
        )
    return Scene(grid=grid, objects=tuple(objects))


def scene_to_spec(scene: Scene) -> str:
    parts = [f"{o.row},{o.col},{o.color},{o.shape}" for o in scene.objects]
    return f"g{scene.grid}|" + ";".join(parts)


def scene_from_spec(spec: str) -> Scene:
    head, _, body = spec.partition("|")
    if not head.startswith("g"):
        raise ValueError(f"bad scene spec {spec!r}")
    grid = int(head[1:])
    objects = []
    for part in body.split(";") if body else []:
        row, col, color, shape = part.split(",")
        if color not in COLORS or shape not in SHAPES:
            raise ValueError(f"bad scene spec object {part!r}")
        objects.append(SceneObject(int(row), int(col), color, shape))
    return Scene(grid=grid, objects=tuple(objects))


# ----------------------------------------------------------------------
# structured questions


@dataclass(frozen=True)
class ObjectSpec:
    """Color and/or shape filter; None matches anything."""

    color: str | None = None
    shape: str | None = None

    def matches(self, obj: SceneObject) -> bool:
        return (self.color is None or obj.color == self.color) and (
            self.shape is None or obj.shape == self.shape
        )

    def phrase(self) -> str:
        words = []
        if self.color:
            words.append(self.color)
        words.append(self.shape if self.shape else "object")
        return " ".join(words)


@dataclass(frozen=True)
class Exists:
    spec: ObjectSpec

    family = "existence"

    def text(self):
        return f"is there a {self.spec.phrase()}"


@dataclass(frozen=True)
class QueryColor:
    shape: str

    family = "attribute"

    def text(self):
        return f"what color is the {self.shape}"


@dataclass(frozen=True)
class QueryShape:
    color: str

    family = "attribute"

    def text(self):
        return f"what shape is the {self.color} object"


@dataclass(frozen=True)
class CountBy:
    spec: ObjectSpec

    family = "attribute"

    def text(self):
        return f"how many {self.spec.phrase()}s are there"


@dataclass(frozen=True)
class SpatialExists:
    spec_a: ObjectSpec
    relation: str
    spec_b: ObjectSpec

    family = "spatial-relation"

    def text(self):
        return f"is there a {self.spec_a.phrase()} {self.relation} a {self.spec_b.phrase()}"


@dataclass(frozen=True)
class ExtremeSame:
    axis: str  # "h" compares leftmost/rightmost, "v" topmost/bottommost
    attr: str  # "shape" or "color"

    family = "comparison"

    def text(self):
        first, second = ("leftmost", "rightmost") if self.axis == "h" else ("topmost", "bottommost")
        return f"is the {first} object the same {self.attr} as the {second} object"


@dataclass(frozen=True)
class MoreThan:
    color_a: str
    color_b: str

    family = "comparison"

    def text(self):
        return f"are there more {self.color_a} objects than {self.color_b} objects"


@dataclass(frozen=True)
class SamePair:
    shape_a: str
    shape_b: str

    family = "comparison"

    def text(self):
        return f"is the {self.shape_a} the same color as the {self.shape_b}"


@dataclass(frozen=True)
class AllSame:
    attr: str  # "color" or "shape"

    family = "comparison"

    def text(self):
        return f"are all objects the same {self.attr}"


# ----------------------------------------------------------------------
# the exact evaluator


def _relation_holds(a: SceneObject, b: SceneObject, relation: str) -> bool:
    if relation == "left of":
        return a.col < b.col
    if relation == "right of":
        return a.col > b.col
    if relation == "above":
        return a.row < b.row
    if relation == "below":
        return a.row > b.row
    raise ValueError(f"unknown relation {relation!r}")


def spatial_witnesses(scene: Scene, q: SpatialExists) -> list[tuple[SceneObject, SceneObject]]:
    """All object pairs satisfying the spatial predicate (always distinct
    cells: the relations are strict inequalities and cells hold one object)."""
    pairs = []
    for a in scene.objects:
        if not q.spec_a.matches(a):
            continue
        for b in scene.objects:
            if b is a or not q.spec_b.matches(b):
                continue
            if _relation_holds(a, b, q.relation):
                pairs.append((a, b))
    return pairs


def _extreme(scene: Scene, axis: str, lowest: bool) -> SceneObject:
    # Ties broken toward the top-left scan order, deterministically.
    key = (lambda o: (o.col, o.row)) if axis == "h" else (lambda o: (o.row, o.col))
    ordered = sorted(scene.objects, key=key)
    return ordered[0] if lowest else ordered[-1]


def evaluate_question(scene: Scene, q) -> str:
    """Exact symbolic answer for a structured question."""
    if isinstance(q, Exists):
        return "yes" if any(q.spec.matches(o) for o in scene.objects) else "no"
    if isinstance(q, QueryColor):
        hits = [o for o in scene.objects if o.shape == q.shape]
        if len(hits) != 1:
            raise ValueError(f"query needs exactly one {q.shape}, scene has {len(hits)}")
        return hits[0].color
    if isinstance(q, QueryShape):
        hits = [o for o in scene.objects if o.color == q.color]
        if len(hits) != 1:
            raise ValueError(f"query needs exactly one {q.color} object, scene has {len(hits)}")
        return hits[0].shape
    if isinstance(q, CountBy):
        return str(sum(1 for o in scene.objects if q.spec.matches(o)))
    if isinstance(q, SpatialExists):
        return "yes" if spatial_witnesses(scene, q) else "no"
    if isinstance(q, ExtremeSame):
        first = _extreme(scene, q.axis, lowest=True)
        second = _extreme(scene, q.axis, lowest=False)
        return "yes" if getattr(first, q.attr) == getattr(second, q.attr) else "no"
    if isinstance(q, MoreThan):
        na = sum(1 for o in scene.objects if o.color == q.color_a)
        nb = sum(1 for o in scene.objects if o.color == q.color_b)
        return "yes" if na > nb else "no"
    if isinstance(q, SamePair):
        hits_a = [o for o in scene.objects if o.shape == q.shape_a]
        hits_b = [o for o in scene.objects if o.shape == q.shape_b]
        if len(hits_a) != 1 or len(hits_b) != 1:
            raise ValueError("pair comparison needs exactly one of each shape")
        return "yes" if hits_a[0].color == hits_b[0].color else "no"
    if isinstance(q, AllSame):
        values = {getattr(o, q.attr) for o in scene.objects}
        return "yes" if len(values) <= 1 else "no"
    raise ValueError(f"malformed question object {q!r}")


# ----------------------------------------------------------------------
# text <-> structure


def _parse_spec(words: list[str]) -> ObjectSpec:
    color = None
    shape = None
    for w in words:
        if w in COLORS:
            color = w
        elif w in SHAPES:
            shape = w
        elif w != "object":
            raise ValueError(f"bad object phrase {' '.join(words)!r}")
    return ObjectSpec(color=color, shape=shape)


def parse_question(text: str):
    """Recover the structured form of a template-generated question."""
    words = text.lower().replace("?", "").split()
    joined = " ".join(words)
    if joined.startswith("is there a "):
        rest = words[3:]
        for rel in RELATIONS:
            rel_words = rel.split()
            for i in range(len(rest)):
                if rest[i : i + len(rel_words)] == rel_words:
                    left = rest[:i]
                    right = rest[i + len(rel_words) :]
                    if not right or right[0] != "a":
                        raise ValueError(f"cannot parse {text!r}")
                    return SpatialExists(_parse_spec(left), rel, _parse_spec(right[1:]))
        return Exists(_parse_spec(rest))
    if joined.startswith("what color is the "):
        return QueryColor(shape=words[4])
    if joined.startswith("what shape is the "):
        return QueryShape(color=words[4])
    if joined.startswith("how many "):
        # "how many red squares are there" -> spec words minus plural s
        spec_words = words[2:-2]
        spec_words[-1] = spec_words[-1][:-1]  # strip plural
        return CountBy(_parse_spec(spec_words))
    if joined.startswith("is the leftmost") or joined.startswith("is the topmost"):
        axis = "h" if words[2] == "leftmost" else "v"
        return ExtremeSame(axis=axis, attr=words[6])
    if joined.startswith("are there more "):
        return MoreThan(color_a=words[3], color_b=words[6])
    if joined.startswith("is the ") and "same color as" in joined:
        return SamePair(shape_a=words[2], shape_b=words[-1])
    if joined.startswith("are all objects the same"):
        return AllSame(attr=words[-1])
    raise ValueError(f"cannot parse question {text!r}")


# ----------------------------------------------------------------------
# generation


@dataclass(frozen=True)
class Sample:
    sample_id: str
    question: str
    answer: str
    scene: Scene
    family: str


_SPLIT_IDS = {"train": 0, "eval": 1}


def scene_seed_key(seed: int, split: str, attempt: int) -> tuple[int, int, int]:
    """Entropy key for one generation attempt; train/eval ranges are
    disjoint by the split component."""
    return (int(seed), _SPLIT_IDS[split], int(attempt))


def _maybe_color(rng) -> str | None:
    return COLORS[int(rng.integers(3))] if rng.random() < 0.5 else None


def _propose_question(family: str, scene: Scene, rng: np.random.Generator):
    """Draw a template instance valid for the scene, or None if impossible."""
    if family == "existence":
        kind = int(rng.integers(3))
        if kind == 0:
            spec = ObjectSpec(color=COLORS[int(rng.integers(3))], shape=SHAPES[int(rng.integers(3))])
        elif kind == 1:
            spec = ObjectSpec(shape=SHAPES[int(rng.integers(3))])
        else:
            spec = ObjectSpec(color=COLORS[int(rng.integers(3))])
        return Exists(spec)
    if family == "attribute":
        kind = int(rng.integers(3))
        if kind == 0:
            shapes = [s for s in SHAPES if sum(o.shape == s for o in scene.objects) == 1]
            if not shapes:
                return None
            return QueryColor(shape=shapes[int(rng.integers(len(shapes)))])
        if kind == 1:
            colors = [c for c in COLORS if sum(o.color == c for o in scene.objects) == 1]
            if not colors:
                return None
            return QueryShape(color=colors[int(rng.integers(len(colors)))])
        if rng.random() < 0.5:
            return CountBy(ObjectSpec(color=COLORS[int(rng.integers(3))]))
        return CountBy(ObjectSpec(shape=SHAPES[int(rng.integers(3))]))
    if family == "spatial-relation":
        spec_a = ObjectSpec(color=_maybe_color(rng), shape=SHAPES[int(rng.integers(3))])
        spec_b = ObjectSpec(color=_maybe_color(rng), shape=SHAPES[int(rng.integers(3))])
        relation = RELATIONS[int(rng.integers(len(RELATIONS)))]
        return SpatialExists(spec_a, relation, spec_b)
    if family == "comparison":
        kind = int(rng.integers(4))
        if kind == 0:
            axis = "h" if rng.random() < 0.5 else "v"
            attr = "shape" if rng.random() < 0.5 else "color"
            return ExtremeSame(axis=axis, attr=attr)
        if kind == 1:
            a, b = rng.choice(3, size=2, replace=False)
            return MoreThan(color_a=COLORS[int(a)], color_b=COLORS[int(b)])
        if kind == 2:
            unique = [s for s in SHAPES if sum(o.shape == s for o in scene.objects) == 1]
            if len(unique) < 2:
                return None
            a, b = rng.choice(len(unique), size=2, replace=False)
            return SamePair(shape_a=unique[int(a)], shape_b=unique[int(b)])
        return AllSame(attr="color" if rng.random() < 0.5 else "shape")
    raise ValueError(f"unknown family {family!r}")


def _family_targets(count: int, family_mix) -> dict[str, int]:
    if family_mix is None:
        weights = {f: 1.0 for f in FAMILIES}
    else:
        weights = dict(family_mix)
        unknown = set(weights) - set(FAMILIES)
        if unknown:
            raise GenerationError(f"unknown families in mix: {sorted(unknown)}")
        if any(w < 0 for w in weights.values()) or sum(weights.values()) <= 0:
            raise GenerationError("family mix weights must be nonnegative and not all zero")
    total_w = sum(weights.get(f, 0.0) for f in FAMILIES)
    targets = {}
    allocated = 0
    fams = [f for f in FAMILIES if weights.get(f, 0.0) > 0]
    for f in fams:
        targets[f] = int(count * weights[f] / total_w)
        allocated += targets[f]
    # Largest-remainder style top-up, deterministic order.
    i = 0
    while allocated < count:
        targets[fams[i % len(fams)]] += 1
        allocated += 1
        i += 1
    return targets


def generate(seed: int, count: int, family_mix=None, split: str = "train", grid: int = 4) -> list[Sample]:
    """Deterministic balanced dataset: majority answer per family <= 60%."""
    if count <= 0:
        raise GenerationError(f"count must be positive, got {count}")
    if split not in _SPLIT_IDS:
        raise GenerationError(f"split must be one of {sorted(_SPLIT_IDS)}, got {split!r}")
    targets = _family_targets(count, family_mix)
    for family, target in targets.items():
        cap = int(MAX_MAJORITY * target)
        n_answers = 2 if family != "attribute" else len(ANSWERS) - 2
        if cap * n_answers < target:
            raise GenerationError(
                f"cannot balance {family!r}: {target} samples cannot keep every answer "
                f"at or below {MAX_MAJORITY:.0%}"
            )
    samples: list[Sample] = []
    attempt = 0
    for family in FAMILIES:
        target = targets.get(family, 0)
        if target == 0:
            continue
        cap = int(MAX_MAJORITY * target)
        counts: dict[str, int] = {}
        accepted = 0
        deadline = attempt + 500 * target + 2000
        while accepted < target:
            attempt += 1
            if attempt > deadline:
                raise GenerationError(
                    f"generation budget exhausted while balancing {family!r} "
                    f"({accepted}/{target} accepted)"
                )
            rng = np.random.default_rng(scene_seed_key(seed, split, attempt))
            scene = sample_scene(rng, grid=grid)
            q = _propose_question(family, scene, rng)
            if q is None:
                continue
            answer = evaluate_question(scene, q)
            if counts.get(answer, 0) >= cap:
                continue
            counts[answer] = counts.get(answer, 0) + 1
            samples.append(
                Sample(
                    sample_id=f"{split}-{len(samples):06d}",
                    question=q.text(),
                    answer=answer,
                    scene=scene,
                    family=family,
                )
            )
            accepted += 1
    return samples


def majority_rate(samples) -> float:
    counts: dict[str, int] = {}
    for s in samples:
        counts[s.answer] = counts.get(s.answer, 0) + 1
    return max(counts.values()) / len(samples)


# ----------------------------------------------------------------------
# file io


def write_dataset(path: str, samples):
    with open(path, "w") as fh:
        for s in samples:
            fh.write(f"{s.sample_id}\t{s.question}\t{s.answer}\t{scene_to_spec(s.scene)}\n")


def read_dataset(path: str) -> list[Sample]:
    samples = []
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            sample_id, question, answer, spec = line.split("\t")
            structured = parse_question(question)
            samples.append(
                Sample(
                    sample_id=sample_id,
                    question=question,
                    answer=answer,
                    scene=scene_from_spec(spec),
                    family=structured.family,
                )
            )
    return samples
