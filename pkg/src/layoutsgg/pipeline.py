"""The toy two-stage scene graph model.

image -> conv backbone -> (optional layout restitution) -> ROI features ->
object / predicate encoders (optional gated layout embeddings) -> decoders.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Param, Tape, Var
from .lee import PAIR_GEOMETRY_DIM, canonical_fusion, decode, encode_object, encode_predicate
from .nrm import MODES as ATTENTION_MODES
from .nrm import Layout, nrm_op
from .scenes import SceneRecord, rasterize

TASKS = ("predcls", "sgcls")
MAGIC = b"RSGG"
FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    """A model file is truncated, has the wrong magic, or an unsupported version."""


class TrainingDiverged(RuntimeError):
    pass


def canonical_task(task: str) -> str:
    t = task.lower()
    if t not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected PredCls or SGCls")
    return t


@dataclass(frozen=True)
class ModelConfig:
    image_size: tuple = (64, 64)
    channels: tuple = (16, 32, 32)
    feature_dim: int = 128
    category_dim: int = 32
    box_dim: int = 32
    n_categories: int = 8
    n_predicates: int = 6
    enable_nrm: bool = False
    enable_lee: bool = False
    fusion: str = "gate"
    attention: str = "centroid"
    eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        object.__setattr__(self, "channels", tuple(int(v) for v in self.channels))
        object.__setattr__(self, "fusion", canonical_fusion(self.fusion))
        if self.attention not in ATTENTION_MODES:
            raise ValueError(f"unknown attention mode {self.attention!r}")
        h, w = self.image_size
        if h % 8 or w % 8:
            raise ValueError("image sides must be divisible by 8")
        if len(self.channels) != 3:
            raise ValueError("the backbone has exactly three conv layers")

    @property
    def method(self) -> str:
        """Short label of the enabled mechanisms, used in reports."""
        parts = []
        if self.enable_nrm:
            parts.append(f"nrm_{self.attention}")
        if self.enable_lee:
            parts.append(f"lee_{self.fusion}")
        return "+".join(parts) if parts else "baseline"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        d["channels"] = list(self.channels)
        return d


def _param_shapes(config: ModelConfig) -> list[tuple[str, tuple, int]]:
    """(name, shape, fan_in) for every trainable array, baseline arrays first."""
    c1, c2, c3 = config.channels
    d, k, p = config.feature_dim, config.n_categories, config.n_predicates
    shapes = [
        ("conv1.w", (c1, 3, 3, 3), 27),
        ("conv1.b", (c1,), 27),
        ("conv2.w", (c2, c1, 3, 3), 9 * c1),
        ("conv2.b", (c2,), 9 * c1),
        ("conv3.w", (c3, c2, 3, 3), 9 * c2),
        ("conv3.b", (c3,), 9 * c2),
        ("cat_emb", (k, config.category_dim), k),
        ("obj_box.w", (config.box_dim, 4), 4),
        ("obj_box.b", (config.box_dim,), 4),
        ("enc_obj.w", (d, c3 + config.category_dim + config.box_dim), c3 + config.category_dim + config.box_dim),
        ("enc_obj.b", (d,), c3 + config.category_dim + config.box_dim),
        ("enc_pred.w", (d, 2 * d + c3), 2 * d + c3),
        ("enc_pred.b", (d,), 2 * d + c3),
        ("dec_obj.w", (k, d), d),
        ("dec_obj.b", (k,), d),
        ("dec_pred.w", (p + 1, d), d),
        ("dec_pred.b", (p + 1,), d),
    ]
    if config.enable_lee:
        shapes += [
            ("lee_obj.w1", (d, 4), 4),
            ("lee_obj.b1", (d,), 4),
            ("lee_obj.w2", (d, d), d),
            ("lee_obj.b2", (d,), d),
            ("lee_pred.w1", (d, PAIR_GEOMETRY_DIM), PAIR_GEOMETRY_DIM),
            ("lee_pred.b1", (d,), PAIR_GEOMETRY_DIM),
            ("lee_pred.w2", (d, d), d),
            ("lee_pred.b2", (d,), d),
        ]
        if config.fusion == "gate":
            shapes += [("gate_obj.W", (d, d), d), ("gate_pred.W", (d, d), d)]
        elif config.fusion == "concat":
            shapes += [("proj_obj.P", (d, 2 * d), 2 * d), ("proj_pred.P", (d, 2 * d), 2 * d)]
    return shapes


@dataclass
class ModelParams:
    config: ModelConfig
    params: dict = field(default_factory=dict)

    def __getitem__(self, name) -> Param:
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self) -> Iterator[Param]:
        return iter(self.params.values())

    def keys(self):
        return self.params.keys()

    @property
    def n_parameters(self) -> int:
        return int(sum(p.value.size for p in self))

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: Param(k, p.value.copy()) for k, p in self.params.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([p.value.ravel() for p in self])

    def zero_grad(self):
        for p in self:
            p.zero_grad()


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Uniform(-s, s) init with s = 1/sqrt(fan_in), one RNG stream per array name.

    Per-name streams make the baseline arrays identical whether or not the
    layout encoder is enabled.
    """
    params = {}
    for name, shape, fan_in in _param_shapes(config):
        rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
        s = 1.0 / np.sqrt(fan_in)
        params[name] = Param(name, rng.uniform(-s, s, size=shape))
    return ModelParams(config, params)


def backbone_forward(tape: Tape | None, image: Var, params) -> Var:
    """Three stride-2 3x3 convolutions: (3, H, W) -> (C, H/8, W/8)."""
    _, h, w = image.shape
    if h % 8 or w % 8:
        raise ValueError(f"image sides must be divisible by 8, got {image.shape}")
    x = ag.relu(tape, ag.conv2d(tape, image, params["conv1.w"], params["conv1.b"]))
    x = ag.relu(tape, ag.conv2d(tape, x, params["conv2.w"], params["conv2.b"]))
    return ag.conv2d(tape, x, params["conv3.w"], params["conv3.b"])


def union_box(b_i, b_j) -> np.ndarray:
    b_i, b_j = np.asarray(b_i, dtype=np.float64), np.asarray(b_j, dtype=np.float64)
    return np.concatenate([np.minimum(b_i[..., :2], b_j[..., :2]), np.maximum(b_i[..., 2:], b_j[..., 2:])], axis=-1)


def pool_weights(boxes, h: int, w: int) -> np.ndarray:
    """(M, H*W) averaging weights over the cells whose centers fall inside each box.

    A box covering no cell center gets the single nearest cell.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    cx = (np.arange(w) + 0.5) / w
    cy = (np.arange(h) + 0.5) / h
    px = np.tile(cx, h)
    py = np.repeat(cy, w)
    x1, y1, x2, y2 = (boxes[:, i : i + 1] for i in range(4))
    inside = (px >= x1) & (px <= x2) & (py >= y1) & (py <= y2)
    weights = inside.astype(np.float64)
    empty = ~inside.any(axis=1)
    if empty.any():
        dx = np.maximum(x1 - px, 0.0) + np.maximum(px - x2, 0.0)
        dy = np.maximum(y1 - py, 0.0) + np.maximum(py - y2, 0.0)
        nearest = np.argmin(dx**2 + dy**2, axis=1)
        weights[empty] = 0.0
        weights[np.flatnonzero(empty), nearest[empty]] = 1.0
    return weights / weights.sum(axis=1, keepdims=True)


def roi_pool(f: np.ndarray, box) -> np.ndarray:
    """Mean feature vector (C,) of a (C, H, W) map over a normalized box."""
    f = np.asarray(f, dtype=np.float64)
    c, h, w = f.shape
    return (pool_weights(box, h, w) @ f.reshape(c, h * w).T)[0]


def ordered_pairs(n: int) -> np.ndarray:
    return np.array([(i, j) for i in range(n) for j in range(n) if i != j], dtype=np.int64).reshape(-1, 2)


@dataclass
class Prediction:
    task: str
    obj_probs: np.ndarray  # (N, K)
    obj_labels: np.ndarray  # (N,)
    pairs: np.ndarray  # (P, 2)
    pred_probs: np.ndarray  # (P, n_predicates + 1); last column = no relation
    triplets: np.ndarray  # (T, 5) subject, predicate, object, subject label, object label; ranked
    scores: np.ndarray  # (T,)
    obj_logits: Var | None = None
    pred_logits: Var | None = None
    obj_gates: np.ndarray | None = None
    pred_gates: np.ndarray | None = None
    feature_map: np.ndarray | None = None

    @property
    def background(self) -> int:
        return self.pred_probs.shape[1] - 1


def rank_triplets(obj_probs, obj_labels, pairs, pred_probs):
    """All (pair, predicate) candidates sorted by score desc, pair asc, predicate asc."""
    n_pred = pred_probs.shape[1] - 1
    n_pairs = len(pairs)
    if n_pairs == 0 or n_pred == 0:
        return np.zeros((0, 5), dtype=np.int64), np.zeros(0)
    obj_score = obj_probs[np.arange(len(obj_labels)), obj_labels]
    pair_score = obj_score[pairs[:, 0]] * obj_score[pairs[:, 1]]
    scores = (pair_score[:, None] * pred_probs[:, :n_pred]).ravel()
    pair_idx = np.repeat(np.arange(n_pairs), n_pred)
    pred_idx = np.tile(np.arange(n_pred), n_pairs)
    order = np.lexsort((pred_idx, pair_idx, -scores))
    pi, ki = pair_idx[order], pred_idx[order]
    trip = np.stack(
        [pairs[pi, 0], ki, pairs[pi, 1], obj_labels[pairs[pi, 0]], obj_labels[pairs[pi, 1]]], axis=1
    ).astype(np.int64)
    return trip, scores[order]


def forward(
    image,
    boxes,
    labels,
    params: ModelParams,
    task: str = "predcls",
    tape: Tape | None = None,
    attention: str | None = None,
) -> Prediction:
    """Run the model on one image given normalized (N, 4) boxes.

    PredCls needs ``labels`` (fed to the category embedding and used to clamp
    the object distribution to one-hot); SGCls predicts labels itself.
    ``image`` may be an array or a :class:`Var` (for input gradients).
    """
    task = canonical_task(task)
    cfg = params.config
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    n = boxes.shape[0]
    if n < 1:
        raise ValueError("forward needs at least one box")
    if task == "predcls":
        if labels is None:
            raise ValueError("PredCls requires ground-truth labels")
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (n,):
            raise ValueError("PredCls: one label per box required")
    img = image if isinstance(image, Var) else ag.const(ag.as_tensor(image, "image"))

    fmap = backbone_forward(tape, img, params)
    if cfg.enable_nrm:
        fmap, _ = nrm_op(tape, fmap, Layout.from_boxes(boxes), cfg.eps, attention or cfg.attention)
    c, h, w = fmap.shape
    pairs = ordered_pairs(n)
    rois = np.concatenate([boxes, union_box(boxes[pairs[:, 0]], boxes[pairs[:, 1]])]) if len(pairs) else boxes
    flat = ag.transpose(tape, ag.reshape(tape, fmap, (c, h * w)))
    feats = ag.matmul(tape, ag.const(pool_weights(rois, h, w)), flat)
    v_obj = ag.gather_rows(tape, feats, np.arange(n))

    obj = encode_object(tape, v_obj, labels if task == "predcls" else None, boxes, params, cfg.enable_lee, cfg.fusion)
    obj_dec = decode(tape, obj.f_prime, params, "object")
    if task == "predcls":
        obj_probs = np.eye(cfg.n_categories)[labels]
        obj_labels = labels
    else:
        obj_probs, obj_labels = obj_dec.probs, obj_dec.labels

    pred_logits = None
    pred_gates = None
    if len(pairs):
        v_union = ag.gather_rows(tape, feats, np.arange(n, n + len(pairs)))
        pair = encode_predicate(tape, obj.f_prime, pairs, v_union, boxes, params, cfg.enable_lee, cfg.fusion)
        pred_dec = decode(tape, pair.f_prime, params, "predicate")
        pred_probs, pred_logits = pred_dec.probs, pred_dec.logits
        pred_gates = None if pair.z is None else pair.z.value
    else:
        pred_probs = np.zeros((0, cfg.n_predicates + 1))
    triplets, scores = rank_triplets(obj_probs, obj_labels, pairs, pred_probs)
    return Prediction(
        task=task,
        obj_probs=obj_probs,
        obj_labels=np.asarray(obj_labels, dtype=np.int64),
        pairs=pairs,
        pred_probs=pred_probs,
        triplets=triplets,
        scores=scores,
        obj_logits=obj_dec.logits,
        pred_logits=pred_logits,
        obj_gates=None if obj.z is None else obj.z.value,
        pred_gates=pred_gates,
        feature_map=fmap.value,
    )


def predicate_targets(pairs: np.ndarray, relations, background: int) -> np.ndarray:
    lookup = {}
    for s, o, p in relations:
        lookup.setdefault((int(s), int(o)), int(p))
    return np.array([lookup.get((int(s), int(o)), background) for s, o in pairs], dtype=np.int64)


def compute_loss(tape: Tape | None, pred: Prediction, gt: SceneRecord) -> Var:
    """Cross-entropy over all ordered pairs (+ object labels for SGCls)."""
    n = len(gt.objects)
    if pred.obj_labels.shape[0] != n:
        raise ValueError(f"prediction has {pred.obj_labels.shape[0]} objects, scene has {n}")
    terms = []
    if pred.task == "sgcls":
        terms.append(ag.cross_entropy(tape, pred.obj_logits, gt.categories()))
    if pred.pred_logits is not None:
        targets = predicate_targets(pred.pairs, gt.relations, pred.background)
        terms.append(ag.cross_entropy(tape, pred.pred_logits, targets))
    if not terms:
        return ag.const(np.asarray(0.0))
    loss = terms[0]
    for t in terms[1:]:
        loss = ag.add(tape, loss, t)
    return loss


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.02
    epochs: int = 10
    seed: int = 0
    task: str = "predcls"
    batch: int = 1

    def __post_init__(self):
        object.__setattr__(self, "task", canonical_task(self.task))
        if self.batch != 1:
            raise ValueError("only batch size 1 is supported")
        if self.epochs < 0 or self.lr < 0:
            raise ValueError("epochs and lr must be non-negative")


def scene_step(image, scene: SceneRecord, params: ModelParams, task: str, boxes=None) -> float:
    """Forward + backward on one scene; gradients accumulate in ``params``."""
    tape = Tape()
    b = scene.normalized_boxes() if boxes is None else boxes
    pred = forward(image, b, scene.categories(), params, task, tape=tape)
    loss = compute_loss(tape, pred, scene)
    tape.backward(loss)
    return float(loss.value)


def train(scenes: Sequence[SceneRecord], params: ModelParams, config: TrainConfig = TrainConfig(), images=None, log=None):
    """Plain per-scene SGD on clean images; returns ``(params, epoch_mean_losses)``.

    ``params`` is updated in place.  The visiting order of each epoch is a
    permutation drawn from ``config.seed``.
    """
    if images is None:
        images = [rasterize(s) for s in scenes]
    rng = np.random.default_rng(config.seed)
    curve = []
    for epoch in range(config.epochs):
        total = 0.0
        for i in rng.permutation(len(scenes)):
            loss = scene_step(images[i], scenes[i], params, config.task)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, scene {scenes[i].id}")
            total += loss
            ag.sgd_step(params, config.lr)
        curve.append(total / len(scenes))
        if log is not None:
            log(epoch, curve[-1])
    return params, curve


def save_model(params: ModelParams, path, meta: dict | None = None) -> None:
    """Write ``RSGG`` | u32 version | u64 header length | JSON header | float64 LE payload."""
    arrays = [{"name": p.name, "shape": list(p.value.shape)} for p in params]
    header = json.dumps(
        {"config": params.config.to_dict(), "arrays": arrays, "meta": meta or {}},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(p.value, dtype="<f8").tobytes() for p in params)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
        fh.write(header)
        fh.write(payload)


def load_model(path, with_meta: bool = False):
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ModelFormatError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < 16:
        raise ModelFormatError(f"{path}: truncated header")
    version, hlen = struct.unpack("<IQ", data[4:16])
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"{path}: unsupported version {version}")
    if len(data) < 16 + hlen:
        raise ModelFormatError(f"{path}: truncated header")
    try:
        header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
        config = ModelConfig(**header["config"])
        arrays = header["arrays"]
    except (ValueError, KeyError, TypeError) as exc:
        raise ModelFormatError(f"{path}: bad header: {exc}") from exc
    payload = data[16 + hlen :]
    expected = sum(int(np.prod(a["shape"], dtype=np.int64)) for a in arrays) * 8
    if len(payload) != expected:
        raise ModelFormatError(f"{path}: payload has {len(payload)} bytes, header declares {expected}")
    names = [name for name, _, _ in _param_shapes(config)]
    if [a["name"] for a in arrays] != names:
        raise ModelFormatError(f"{path}: array list does not match the model config")
    params = {}
    off = 0
    for a in arrays:
        size = int(np.prod(a["shape"], dtype=np.int64))
        value = np.frombuffer(payload, dtype="<f8", count=size, offset=off).astype(np.float64).reshape(a["shape"])
        off += size * 8
        params[a["name"]] = Param(a["name"], value)
    model = ModelParams(config, params)
    return (model, header.get("meta", {})) if with_meta else model
