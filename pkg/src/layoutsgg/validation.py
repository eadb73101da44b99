"""Input checks shared by the estimator and the CLI."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .scenes import SceneRecord, validate_scene


def check_scenes(X, n_categories: int | None = None, n_predicates: int | None = None, image_size=None) -> list[SceneRecord]:
    """Return ``X`` as a non-empty list of valid scenes whose ids fit the vocabularies."""
    if isinstance(X, SceneRecord):
        X = [X]
    scenes = list(X)
    if not scenes:
        raise ValueError("expected at least one scene")
    for s in scenes:
        if not isinstance(s, SceneRecord):
            raise TypeError(f"expected SceneRecord, got {type(s).__name__}")
        validate_scene(s)
        if not s.objects:
            raise ValueError(f"scene {s.id} has no objects")
        if n_categories is not None and any(not 0 <= o.category < n_categories for o in s.objects):
            raise ValueError(f"scene {s.id}: category id outside [0, {n_categories})")
        if n_predicates is not None and any(not 0 <= p < n_predicates for _, _, p in s.relations):
            raise ValueError(f"scene {s.id}: predicate id outside [0, {n_predicates})")
        if image_size is not None and (s.height, s.width) != tuple(image_size):
            raise ValueError(f"scene {s.id} is {s.height}x{s.width}, model expects {tuple(image_size)}")
    return scenes


def check_image(image, shape=None) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got shape {img.shape}")
    if shape is not None and img.shape[1:] != tuple(shape):
        raise ValueError(f"expected image size {tuple(shape)}, got {img.shape[1:]}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image has non-finite pixels")
    return img


def check_boxes(boxes, n: int | None = None) -> np.ndarray:
    """Normalized (N, 4) boxes with x1 < x2, y1 < y2 inside [0, 1]."""
    b = np.asarray(boxes, dtype=np.float64)
    if b.ndim != 2 or b.shape[1] != 4:
        raise ValueError(f"expected (N, 4) boxes, got shape {b.shape}")
    if n is not None and len(b) != n:
        raise ValueError(f"expected {n} boxes, got {len(b)}")
    if b.size and (b.min() < 0 or b.max() > 1 or np.any(b[:, 2] <= b[:, 0]) or np.any(b[:, 3] <= b[:, 1])):
        raise ValueError("boxes must be normalized to [0, 1] with x1 < x2 and y1 < y2")
    return b


def check_ks(ks: Sequence[int]) -> tuple[int, ...]:
    ks = tuple(int(k) for k in ks)
    if not ks or min(ks) < 1:
        raise ValueError("K values must be >= 1")
    return ks
