"""Layout-oriented normalization and restitution of a feature map.

The feature map is instance-normalized per channel; the part removed by the
normalization (the residual) is added back only where the layout says
objects are, weighted by a soft nearest-object attention mask.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Tape, Var, _out, _softmax, _wants_grad

EPS = 1e-5
MODES = ("centroid", "bbox")


@dataclass(frozen=True)
class Layout:
    """Normalized boxes (N, 4) and their centroids (N, 2)."""

    boxes: np.ndarray
    centroids: np.ndarray

    @classmethod
    def from_boxes(cls, boxes) -> "Layout":
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        if boxes.size and (boxes.min() < 0.0 or boxes.max() > 1.0):
            raise ValueError("layout boxes must be normalized to [0, 1]")
        cents = np.stack([(boxes[:, 0] + boxes[:, 2]) / 2, (boxes[:, 1] + boxes[:, 3]) / 2], axis=1)
        return cls(boxes, cents)

    def __len__(self):
        return len(self.boxes)


@dataclass(frozen=True)
class AttentionMap:
    weights: np.ndarray  # (H*W, N), rows on the simplex
    mask: np.ndarray  # (H, W), row-wise max of weights


def instance_normalize(f: np.ndarray, eps: float = EPS) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(normalized, residual)`` for a (C, H, W) map; ``residual = f - normalized``."""
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 3 or f.shape[1] * f.shape[2] < 1:
        raise ValueError("expected a non-empty (C, H, W) feature map")
    mu = f.mean(axis=(1, 2), keepdims=True)
    var = ((f - mu) ** 2).mean(axis=(1, 2), keepdims=True)
    normalized = (f - mu) * (1.0 / np.sqrt(var + eps))
    return normalized, f - normalized


def grid_points(h: int, w: int) -> np.ndarray:
    """(H*W, 2) cell-center coordinates (x, y) in [0, 1], row-major over (m, l)."""
    ys = (np.arange(h) + 0.5) / h
    xs = (np.arange(w) + 0.5) / w
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([xx.ravel(), yy.ravel()], axis=1)


def layout_attention(layout: Layout, grid: tuple[int, int], mode: str = "centroid") -> AttentionMap:
    """Softmax over objects of the negative squared distance from every grid cell.

    ``centroid`` measures to the object centroid; ``bbox`` measures to the
    nearest point of the box, which is zero inside it.
    """
    if len(layout) == 0:
        raise ValueError("layout attention needs at least one object")
    if mode not in MODES:
        raise ValueError(f"unknown attention mode {mode!r}")
    h, w = grid
    pts = grid_points(h, w)
    if mode == "centroid":
        d = pts[:, None, :] - layout.centroids[None, :, :]
    else:
        lo, hi = layout.boxes[None, :, :2], layout.boxes[None, :, 2:]
        p = pts[:, None, :]
        d = np.maximum(lo - p, 0.0) + np.maximum(p - hi, 0.0)
    weights = _softmax(-(d**2).sum(axis=-1))
    return AttentionMap(weights, weights.max(axis=1).reshape(h, w))


def restitute(normalized: np.ndarray, residual: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """``normalized + residual * mask`` with the mask broadcast over channels."""
    normalized = np.asarray(normalized, dtype=np.float64)
    residual = np.asarray(residual, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if normalized.shape != residual.shape or normalized.shape[1:] != mask.shape:
        raise ValueError(f"shape mismatch: {normalized.shape}, {residual.shape}, mask {mask.shape}")
    return normalized + residual * mask[None]


def nrm_forward(f: np.ndarray, layout: Layout, eps: float = EPS, mode: str = "centroid") -> np.ndarray:
    """Normalize, attend to the layout, and restitute the masked residual."""
    f = np.asarray(f, dtype=np.float64)
    att = layout_attention(layout, f.shape[1:], mode)
    return _restituted(f, instance_normalize(f, eps)[0], att.mask)


def _restituted(f, normalized, mask):
    # f*M + n*(1-M) equals n + (f-n)*M, but is exact at M == 1 and M == 0
    m = mask[None]
    return f * m + normalized * (1.0 - m)


def instance_norm_op(tape: Tape | None, f: Var, eps: float = EPS) -> Var:
    fv = f.value
    mu = fv.mean(axis=(1, 2), keepdims=True)
    var = ((fv - mu) ** 2).mean(axis=(1, 2), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    b = (fv - mu) * inv
    out = _out(b, f)
    if _wants_grad(tape, out):

        def back():
            g = out.grad
            if g is None:
                return
            gm = g.mean(axis=(1, 2), keepdims=True)
            gbm = (g * b).mean(axis=(1, 2), keepdims=True)
            f.accumulate(inv * (g - gm - b * gbm))

        tape.record(back)
    return out


def restitute_op(tape: Tape | None, f: Var, normalized: Var, mask: np.ndarray) -> Var:
    m = np.asarray(mask, dtype=np.float64)[None]
    out = _out(_restituted(f.value, normalized.value, mask), f, normalized)
    if _wants_grad(tape, out):

        def back():
            g = out.grad
            if g is None:
                return
            f.accumulate(g * m)
            normalized.accumulate(g * (1.0 - m))

        tape.record(back)
    return out


def nrm_op(tape: Tape | None, f: Var, layout: Layout, eps: float = EPS, mode: str = "centroid") -> tuple[Var, AttentionMap]:
    """Taped :func:`nrm_forward`; the layout is a constant input."""
    att = layout_attention(layout, f.value.shape[1:], mode)
    normalized = instance_norm_op(tape, f, eps)
    return restitute_op(tape, f, normalized, att.mask), att
