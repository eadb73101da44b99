"""Procedural scenes with rule-defined relations.

A scene is a small canvas of flat-colored shapes.  Ground-truth relations
are a pure function of the boxes (see :func:`relations_from_boxes`), so a
dataset file only stores records; images are rasterized on demand.
"""
from __future__ import annotations

import colorsys
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SHAPES = ("rectangle", "ellipse", "triangle")

# Rules are tried in this order for every ordered pair; the first hit wins.
PREDICATE_RULES = ("inside", "overlapping", "larger_than", "near", "left_of", "above")
DEFAULT_PREDICATES = ("left_of", "above", "near", "overlapping", "larger_than", "inside")


class SceneFormatError(ValueError):
    """A dataset or config file does not follow the documented schema."""


@dataclass(frozen=True)
class GeneratorConfig:
    width: int = 64
    height: int = 64
    min_objects: int = 2
    max_objects: int = 6
    n_categories: int = 8
    predicates: tuple = DEFAULT_PREDICATES
    min_side: int = 5
    max_side: int = 26
    p_inside: float = 0.12
    margin: float = 6.0
    near_gap: float = 3.0
    overlap_iou: float = 0.15
    larger_ratio: float = 2.5

    def __post_init__(self):
        object.__setattr__(self, "predicates", tuple(self.predicates))
        if self.n_categories < 2:
            raise ValueError("need at least 2 categories")
        if len(self.predicates) < 2:
            raise ValueError("need at least 2 predicates")
        unknown = set(self.predicates) - set(PREDICATE_RULES)
        if unknown:
            raise ValueError(f"unknown predicates {sorted(unknown)}")
        if len(set(self.predicates)) != len(self.predicates):
            raise ValueError("duplicate predicate names")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("bad object-count range")
        if not 2 <= self.min_side <= self.max_side <= min(self.width, self.height):
            raise ValueError("bad side-length range")

    @classmethod
    def from_json(cls, path) -> "GeneratorConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise SceneFormatError(f"{path}: {exc}") from exc
        if not isinstance(data, dict):
            raise SceneFormatError(f"{path}: expected a JSON object")
        known = set(cls.__dataclass_fields__)
        extra = set(data) - known
        if extra:
            raise SceneFormatError(f"{path}: unknown config keys {sorted(extra)}")
        return cls(**data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["predicates"] = list(self.predicates)
        return d


@dataclass(frozen=True)
class ObjectSpec:
    category: int
    shape: str
    color: tuple
    bbox: tuple  # (x1, y1, x2, y2) in pixels

    @property
    def width(self):
        return self.bbox[2] - self.bbox[0]

    @property
    def height(self):
        return self.bbox[3] - self.bbox[1]


@dataclass(frozen=True)
class SceneRecord:
    id: int
    width: int
    height: int
    objects: tuple = ()
    relations: tuple = ()  # (subject, object, predicate id)

    def boxes(self) -> np.ndarray:
        return np.array([o.bbox for o in self.objects], dtype=np.float64).reshape(-1, 4)

    def normalized_boxes(self) -> np.ndarray:
        scale = np.array([self.width, self.height, self.width, self.height], dtype=np.float64)
        return self.boxes() / scale

    def categories(self) -> np.ndarray:
        return np.array([o.category for o in self.objects], dtype=np.int64)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "width": self.width,
            "height": self.height,
            "objects": [
                {"category": o.category, "shape": o.shape, "color": list(o.color), "bbox": list(o.bbox)}
                for o in self.objects
            ],
            "relations": [list(r) for r in self.relations],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneRecord":
        try:
            objects = tuple(
                ObjectSpec(int(o["category"]), str(o["shape"]), tuple(o["color"]), tuple(o["bbox"]))
                for o in d["objects"]
            )
            rec = cls(
                id=int(d["id"]),
                width=int(d["width"]),
                height=int(d["height"]),
                objects=objects,
                relations=tuple(tuple(int(v) for v in r) for r in d["relations"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SceneFormatError(f"malformed scene record: {exc!r}") from exc
        validate_scene(rec)
        return rec


def validate_scene(scene: SceneRecord) -> None:
    for o in scene.objects:
        x1, y1, x2, y2 = o.bbox
        if not (0 <= x1 < x2 <= scene.width and 0 <= y1 < y2 <= scene.height):
            raise SceneFormatError(f"scene {scene.id}: bbox {o.bbox} outside canvas or degenerate")
        if o.shape not in SHAPES:
            raise SceneFormatError(f"scene {scene.id}: unknown shape {o.shape!r}")
        if len(o.color) != 3:
            raise SceneFormatError(f"scene {scene.id}: color must be RGB")
    n = len(scene.objects)
    for r in scene.relations:
        if len(r) != 3:
            raise SceneFormatError(f"scene {scene.id}: relation {r} is not a triplet")
        s, o, _ = r
        if not (0 <= s < n and 0 <= o < n) or s == o:
            raise SceneFormatError(f"scene {scene.id}: bad relation endpoints {r}")


def category_style(category: int, n_categories: int) -> tuple[str, tuple]:
    """Shape and base color of a category; fixed so categories are visually learnable."""
    shape = SHAPES[category % len(SHAPES)]
    hue = (category / n_categories) % 1.0
    rgb = colorsys.hsv_to_rgb(hue, 0.85, 0.9)
    return shape, tuple(float(c) for c in rgb)


def _iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def _gap(a, b) -> float:
    dx = max(0.0, max(a[0], b[0]) - min(a[2], b[2]))
    dy = max(0.0, max(a[1], b[1]) - min(a[3], b[3]))
    return float(np.hypot(dx, dy))


def _contains(outer, inner) -> bool:
    return outer[0] <= inner[0] and outer[1] <= inner[1] and inner[2] <= outer[2] and inner[3] <= outer[3]


def pair_predicate(a, b, config: GeneratorConfig = GeneratorConfig()) -> str | None:
    """Name of the first rule that holds for the ordered pair (a, b), or None."""
    if _contains(b, a):
        return "inside"
    if _contains(a, b):
        return None
    if _iou(a, b) > config.overlap_iou:
        return "overlapping"
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    gap = _gap(a, b)
    if gap <= config.near_gap and area_a >= config.larger_ratio * area_b:
        return "larger_than"
    if gap <= config.near_gap:
        return "near"
    dx = (b[0] + b[2]) / 2 - (a[0] + a[2]) / 2
    dy = (b[1] + b[3]) / 2 - (a[1] + a[3]) / 2
    if dx > config.margin and abs(dx) >= abs(dy):
        return "left_of"
    if dy > config.margin and abs(dy) > abs(dx):
        return "above"
    return None


def relations_from_boxes(boxes: Sequence, config: GeneratorConfig = GeneratorConfig()) -> tuple:
    """All (subject, object, predicate id) triplets implied by the geometry rules.

    Predicates outside ``config.predicates`` are dropped, not re-routed.
    """
    index = {name: i for i, name in enumerate(config.predicates)}
    rels = []
    for i, a in enumerate(boxes):
        for j, b in enumerate(boxes):
            if i == j:
                continue
            name = pair_predicate(tuple(a), tuple(b), config)
            if name is not None and name in index:
                rels.append((i, j, index[name]))
    return tuple(rels)


def _sample_box(rng: np.random.Generator, config: GeneratorConfig, inside_of=None) -> tuple:
    if inside_of is not None:
        x1, y1, x2, y2 = inside_of
        w = int(rng.integers(config.min_side, max(config.min_side, (x2 - x1) // 2) + 1))
        h = int(rng.integers(config.min_side, max(config.min_side, (y2 - y1) // 2) + 1))
        bx = int(rng.integers(x1, x2 - w + 1))
        by = int(rng.integers(y1, y2 - h + 1))
        return (bx, by, bx + w, by + h)
    w = int(rng.integers(config.min_side, config.max_side + 1))
    h = int(rng.integers(config.min_side, config.max_side + 1))
    x = int(rng.integers(0, config.width - w + 1))
    y = int(rng.integers(0, config.height - h + 1))
    return (x, y, x + w, y + h)


def generate_scene(rng: np.random.Generator, scene_id: int, config: GeneratorConfig) -> SceneRecord:
    n = int(rng.integers(config.min_objects, config.max_objects + 1))
    objects = []
    for _ in range(n):
        cat = int(rng.integers(0, config.n_categories))
        shape, base = category_style(cat, config.n_categories)
        jitter = rng.uniform(-0.05, 0.05, size=3)
        color = tuple(round(float(c), 4) for c in np.clip(np.array(base) + jitter, 0.0, 1.0))
        hosts = [o.bbox for o in objects if o.width >= 2 * config.min_side + 2 and o.height >= 2 * config.min_side + 2]
        if hosts and rng.random() < config.p_inside:
            bbox = _sample_box(rng, config, inside_of=hosts[int(rng.integers(len(hosts)))])
        else:
            bbox = _sample_box(rng, config)
        objects.append(ObjectSpec(cat, shape, color, bbox))
    relations = relations_from_boxes([o.bbox for o in objects], config)
    return SceneRecord(scene_id, config.width, config.height, tuple(objects), relations)


def generate_dataset(seed: int, n_scenes: int, config: GeneratorConfig = GeneratorConfig()) -> list[SceneRecord]:
    """``n_scenes`` scenes, fully determined by ``(seed, config)``."""
    if n_scenes < 1:
        raise ValueError("n_scenes must be >= 1")
    rng = np.random.default_rng(seed)
    return [generate_scene(rng, i, config) for i in range(n_scenes)]


def _triangle_mask(xs, ys, bbox):
    x1, y1, x2, y2 = bbox
    apex_x = (x1 + x2) / 2
    # apex at top-center, base along the bottom edge
    t = (ys - y1) / (y2 - y1)
    half = t * (x2 - x1) / 2
    return (ys >= y1) & (ys <= y2) & (np.abs(xs - apex_x) <= half)


def rasterize(scene: SceneRecord) -> np.ndarray:
    """Render a scene to a (3, H, W) float64 image on a 0.5 gray background."""
    img = np.full((3, scene.height, scene.width), 0.5)
    ys, xs = np.mgrid[0 : scene.height, 0 : scene.width] + 0.5
    for o in scene.objects:
        x1, y1, x2, y2 = o.bbox
        if o.shape == "rectangle":
            m = (xs >= x1) & (xs <= x2) & (ys >= y1) & (ys <= y2)
        elif o.shape == "ellipse":
            cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
            rx, ry = (x2 - x1) / 2, (y2 - y1) / 2
            m = ((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2 <= 1.0
        else:
            m = _triangle_mask(xs, ys, o.bbox)
        img[:, m] = np.asarray(o.color, dtype=np.float64)[:, None]
    return img


def perturb_boxes(scene: SceneRecord, magnitude: float, seed: int) -> SceneRecord:
    """Jitter every box corner by up to ``magnitude`` times the box side.

    Relations are kept: the perturbation models an inaccurate detector, the
    ground truth does not move.
    """
    if not 0.0 <= magnitude <= 1.0:
        raise ValueError("magnitude must be in [0, 1]")
    if magnitude == 0.0:
        return scene
    rng = np.random.default_rng([seed, scene.id])
    objects = []
    for o in scene.objects:
        x1, y1, x2, y2 = (float(v) for v in o.bbox)
        w, h = x2 - x1, y2 - y1
        d = rng.uniform(-magnitude, magnitude, size=4) * np.array([w, h, w, h])
        nx1, ny1, nx2, ny2 = x1 + d[0], y1 + d[1], x2 + d[2], y2 + d[3]
        nx1, nx2 = _fix_interval(nx1, nx2, scene.width)
        ny1, ny2 = _fix_interval(ny1, ny2, scene.height)
        objects.append(replace(o, bbox=(nx1, ny1, nx2, ny2)))
    return replace(scene, objects=tuple(objects))


def _fix_interval(lo: float, hi: float, size: float, min_side: float = 2.0) -> tuple[float, float]:
    lo, hi = min(max(lo, 0.0), size), min(max(hi, 0.0), size)
    if hi - lo < min_side:
        c = (lo + hi) / 2
        lo, hi = c - min_side / 2, c + min_side / 2
        if lo < 0:
            lo, hi = 0.0, min_side
        elif hi > size:
            lo, hi = size - min_side, size
    return float(lo), float(hi)


def save_jsonl(scenes: Iterable[SceneRecord], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in scenes:
            fh.write(json.dumps(s.to_dict(), separators=(",", ":")) + "\n")


def load_jsonl(path) -> list[SceneRecord]:
    scenes = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SceneFormatError(f"{path}:{lineno}: {exc}") from exc
            scenes.append(SceneRecord.from_dict(d))
    if not scenes:
        raise SceneFormatError(f"{path}: no scenes")
    return scenes


def predicate_histogram(scenes: Iterable[SceneRecord], n_predicates: int) -> np.ndarray:
    counts = np.zeros(n_predicates, dtype=np.int64)
    for s in scenes:
        for _, _, p in s.relations:
            counts[p] += 1
    return counts
