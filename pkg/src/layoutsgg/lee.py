"""Object/predicate encoders with layout embeddings fused through a gate.

All functions work on batches: objects are rows of an (N, ...) matrix and
ordered pairs are rows of a (P, ...) matrix.  ``params`` is any mapping
from parameter name to :class:`~layoutsgg.autograd.Param`.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, NamedTuple

import numpy as np

from . import autograd as ag
from .autograd import Tape, Var, _out, _wants_grad

FUSION_MODES = ("gate", "concat", "add")
PAIR_GEOMETRY_DIM = 11


def canonical_fusion(mode: str) -> str:
    if mode == "concat_proj":
        return "concat"
    if mode not in FUSION_MODES:
        raise ValueError(f"unknown fusion mode {mode!r}")
    return mode


@dataclass
class EncodedObject:
    f: Var
    f_C: Var | None
    z: Var | None
    f_prime: Var


@dataclass
class EncodedPair:
    pairs: np.ndarray  # (P, 2) subject/object indices
    f: Var
    f_C: Var | None
    z: Var | None
    f_prime: Var


class Decoded(NamedTuple):
    labels: np.ndarray
    probs: np.ndarray
    logits: Var


def mlp2(tape: Tape | None, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Var:
    return ag.linear(tape, ag.relu(tape, ag.linear(tape, x, w1, b1)), w2, b2)


def embed_object_bbox(tape: Tape | None, boxes, params: Mapping) -> Var:
    """Two-layer embedding of normalized (N, 4) boxes."""
    x = ag.const(np.asarray(boxes, dtype=np.float64).reshape(-1, 4))
    p = params
    return mlp2(tape, x, p["lee_obj.w1"], p["lee_obj.b1"], p["lee_obj.w2"], p["lee_obj.b2"])


def pair_geometry(b_i, b_j) -> np.ndarray:
    """Rows ``[b_i, b_j, e_i - e_j, ||b_i - b_j||]`` (11 columns) for (P, 4) box batches."""
    b_i = np.asarray(b_i, dtype=np.float64).reshape(-1, 4)
    b_j = np.asarray(b_j, dtype=np.float64).reshape(-1, 4)
    e_i = (b_i[:, :2] + b_i[:, 2:]) / 2
    e_j = (b_j[:, :2] + b_j[:, 2:]) / 2
    dist = np.linalg.norm(b_i - b_j, axis=1, keepdims=True)
    return np.concatenate([b_i, b_j, e_i - e_j, dist], axis=1)


def embed_pair_bbox(tape: Tape | None, b_i, b_j, params: Mapping) -> Var:
    x = ag.const(pair_geometry(b_i, b_j))
    p = params
    return mlp2(tape, x, p["lee_pred.w1"], p["lee_pred.b1"], p["lee_pred.w2"], p["lee_pred.b2"])


def _lerp_op(tape, z: Var, f_c: Var, f: Var) -> Var:
    zv = z.value
    lo, hi = np.minimum(f_c.value, f.value), np.maximum(f_c.value, f.value)
    # rounding can land an ulp outside [lo, hi]; the clamp keeps the mix convex
    out = _out(np.clip((1.0 - zv) * f_c.value + zv * f.value, lo, hi), z, f_c, f)
    if _wants_grad(tape, out):
        diff = f.value - f_c.value

        def back():
            g = out.grad
            if g is None:
                return
            z.accumulate(g * diff)
            f_c.accumulate(g * (1.0 - zv))
            f.accumulate(g * zv)

        tape.record(back)
    return out


def gate_fuse(tape: Tape | None, f: Var, f_c: Var, weight: Var | None, mode: str = "gate") -> tuple[Var, Var | None]:
    """Fuse a feature with its coordinate embedding; returns ``(fused, gate)``.

    gate:   z = sigmoid(f W^T), fused = (1 - z) * f_c + z * f
    add:    fused = f + f_c
    concat: fused = [f, f_c] P^T with P of shape (d, 2d)
    """
    mode = canonical_fusion(mode)
    if f.shape != f_c.shape:
        raise ValueError(f"fusion inputs differ in shape: {f.shape} vs {f_c.shape}")
    if mode == "add":
        return ag.add(tape, f, f_c), None
    if mode == "concat":
        return ag.matmul(tape, ag.concat(tape, [f, f_c]), ag.transpose(tape, weight)), None
    if weight.shape != (f.shape[-1], f.shape[-1]):
        raise ValueError(f"gate matrix must be {f.shape[-1]}x{f.shape[-1]}, got {weight.shape}")
    z = ag.sigmoid(tape, ag.matmul(tape, f, ag.transpose(tape, weight)))
    return _lerp_op(tape, z, f_c, f), z


def _fusion_weight(params: Mapping, kind: str, mode: str):
    mode = canonical_fusion(mode)
    if mode == "gate":
        return params[f"gate_{kind}.W"]
    if mode == "concat":
        return params[f"proj_{kind}.P"]
    return None


def encode_object(
    tape: Tape | None,
    v: Var,
    categories,
    boxes,
    params: Mapping,
    lee_enabled: bool = False,
    mode: str = "gate",
) -> EncodedObject:
    """Encode N objects from ROI features, category embeddings and boxes.

    ``categories=None`` (scene-graph classification, labels unknown) feeds a
    zero category embedding.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    n = boxes.shape[0]
    table = params["cat_emb"]
    if categories is None:
        cat = ag.const(np.zeros((n, table.shape[1])))
    else:
        categories = np.asarray(categories, dtype=np.int64)
        if categories.shape != (n,):
            raise ValueError("one category per box expected")
        if categories.min(initial=0) < 0 or categories.max(initial=0) >= table.shape[0]:
            raise ValueError(f"category id out of range [0, {table.shape[0]})")
        cat = ag.gather_rows(tape, table, categories)
    box = ag.relu(tape, ag.linear(tape, ag.const(boxes), params["obj_box.w"], params["obj_box.b"]))
    f = ag.relu(tape, ag.linear(tape, ag.concat(tape, [v, cat, box]), params["enc_obj.w"], params["enc_obj.b"]))
    if not lee_enabled:
        return EncodedObject(f, None, None, f)
    f_c = embed_object_bbox(tape, boxes, params)
    fused, z = gate_fuse(tape, f, f_c, _fusion_weight(params, "obj", mode), mode)
    return EncodedObject(f, f_c, z, fused)


def encode_predicate(
    tape: Tape | None,
    f_objects: Var,
    pairs,
    v_union: Var,
    boxes,
    params: Mapping,
    lee_enabled: bool = False,
    mode: str = "gate",
) -> EncodedPair:
    """Encode ordered pairs from ``[f_subject, v_union, f_object]``.

    Each row depends only on its own pair, so pairs can be encoded in any
    order or subset.
    """
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if np.any(pairs[:, 0] == pairs[:, 1]):
        raise ValueError("a pair needs distinct subject and object")
    if v_union.shape[0] != pairs.shape[0]:
        raise ValueError("one union feature per pair expected")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    fs = ag.gather_rows(tape, f_objects, pairs[:, 0])
    fo = ag.gather_rows(tape, f_objects, pairs[:, 1])
    x = ag.concat(tape, [fs, v_union, fo])
    f = ag.relu(tape, ag.linear(tape, x, params["enc_pred.w"], params["enc_pred.b"]))
    if not lee_enabled:
        return EncodedPair(pairs, f, None, None, f)
    f_c = embed_pair_bbox(tape, boxes[pairs[:, 0]], boxes[pairs[:, 1]], params)
    fused, z = gate_fuse(tape, f, f_c, _fusion_weight(params, "pred", mode), mode)
    return EncodedPair(pairs, f, f_c, z, fused)


def decode(tape: Tape | None, f: Var, params: Mapping, which: str) -> Decoded:
    """Linear decoder + softmax; argmax ties go to the lowest class index."""
    if which not in ("object", "predicate"):
        raise ValueError(f"unknown decoder {which!r}")
    key = "dec_obj" if which == "object" else "dec_pred"
    logits = ag.linear(tape, f, params[f"{key}.w"], params[f"{key}.b"])
    probs = ag._softmax(logits.value)
    # np.argmax returns the first maximum
    return Decoded(np.argmax(probs, axis=-1), probs, logits)
