"""Central finite-difference checks for every differentiable path."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tape, Var, finite_diff_check
from .lee import gate_fuse
from .nrm import Layout, instance_norm_op, nrm_op
from .pipeline import ModelConfig, compute_loss, forward, init_params
from .scenes import ObjectSpec, SceneRecord, rasterize, relations_from_boxes

OP_TOL = 1e-5
PIPELINE_TOL = 1e-4
STEP = 1e-5


@dataclass(frozen=True)
class CheckResult:
    name: str
    seed: int
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.error < self.tol


def check_op(build: Callable, inputs: Sequence[np.ndarray], seed: int, step: float = STEP) -> float:
    """Worst relative error over all inputs of ``sum(w * build(tape, *vars))`` for a fixed random ``w``."""
    inputs = [np.asarray(x, dtype=np.float64) for x in inputs]
    probe = build(None, *[ag.const(x) for x in inputs])
    w = np.random.default_rng([seed, 99]).standard_normal(probe.shape)
    worst = 0.0
    for i in range(len(inputs)):

        def f(x, i=i):
            vars_ = [Var(v, requires_grad=(j == i)) for j, v in enumerate(inputs)]
            vars_[i] = Var(x)
            tape = Tape()
            out = build(tape, *vars_)
            tape.backward(out, w)
            g = vars_[i].grad if vars_[i].grad is not None else np.zeros_like(x)
            return float((w * out.value).sum()), g

        worst = max(worst, finite_diff_check(f, inputs[i], step))
    return worst


def _op_cases(rng: np.random.Generator):
    """(name, build, inputs); inputs avoid the ReLU kink by construction."""
    n = rng.standard_normal
    away = lambda shape: np.sign(n(shape)) * rng.uniform(0.1, 1.0, size=shape)
    labels = rng.integers(0, 4, size=3)
    cases = [
        ("add_broadcast", lambda t, a, b: ag.add(t, a, b), [n((3, 4)), n((1, 4))]),
        ("sub_broadcast", lambda t, a, b: ag.sub(t, a, b), [n((3, 4)), n((3, 1))]),
        ("mul_broadcast", lambda t, a, b: ag.mul(t, a, b), [n((2, 3, 4)), n((1, 3, 1))]),
        ("matmul", lambda t, a, b: ag.matmul(t, a, b), [n((4, 5)), n((5, 3))]),
        ("linear", lambda t, x, w, b: ag.linear(t, x, w, b), [n((4, 5)), n((3, 5)), n(3)]),
        ("relu", lambda t, x: ag.relu(t, x), [away((3, 4))]),
        ("sigmoid", lambda t, x: ag.sigmoid(t, x), [3 * n((3, 4))]),
        ("softmax_lastdim", lambda t, x: ag.softmax_lastdim(t, x), [2 * n((3, 5))]),
        ("cross_entropy_matmul", lambda t, x, w: ag.cross_entropy(t, ag.matmul(t, x, w), labels), [n((3, 4)), n((4, 4))]),
        ("reshape_transpose", lambda t, x: ag.transpose(t, ag.reshape(t, x, (4, 6))), [n((2, 3, 4))]),
        ("concat", lambda t, a, b: ag.concat(t, [a, b]), [n((3, 2)), n((3, 4))]),
        ("gather_rows", lambda t, x: ag.gather_rows(t, x, [2, 0, 2, 1]), [n((3, 4))]),
        ("conv2d", lambda t, x, w, b: ag.conv2d(t, x, w, b), [n((3, 8, 8)), n((4, 3, 3, 3)), n(4)]),
        ("instance_norm", lambda t, f: instance_norm_op(t, f), [n((3, 4, 5))]),
    ]
    boxes = np.array([[0.1, 0.1, 0.4, 0.5], [0.5, 0.3, 0.9, 0.8], [0.2, 0.6, 0.5, 0.95]])
    for mode in ("centroid", "bbox"):
        cases.append((f"nrm_{mode}", lambda t, f, mode=mode: nrm_op(t, f, Layout.from_boxes(boxes), mode=mode)[0], [n((3, 6, 6))]))
    for mode in ("gate", "concat", "add"):
        if mode == "gate":
            build = lambda t, f, fc, w: gate_fuse(t, f, fc, w, "gate")[0]
            inputs = [n((3, 5)), n((3, 5)), n((5, 5))]
        elif mode == "concat":
            build = lambda t, f, fc, w: gate_fuse(t, f, fc, w, "concat")[0]
            inputs = [n((3, 5)), n((3, 5)), n((5, 10))]
        else:
            build = lambda t, f, fc: gate_fuse(t, f, fc, None, "add")[0]
            inputs = [n((3, 5)), n((3, 5))]
        cases.append((f"gate_fuse_{mode}", build, inputs))
    return cases


def _tiny_config(**flags) -> ModelConfig:
    return ModelConfig(image_size=(16, 16), channels=(3, 4, 4), feature_dim=6, category_dim=4, box_dim=4, **flags)


def two_object_scene() -> SceneRecord:
    objs = (
        ObjectSpec(1, "ellipse", (0.9, 0.2, 0.1), (1, 2, 9, 8)),
        ObjectSpec(3, "rectangle", (0.1, 0.3, 0.8), (7, 6, 15, 15)),
    )
    return SceneRecord(0, 16, 16, objs, relations_from_boxes([o.bbox for o in objs]))


def pipeline_gradient_error(params, scene: SceneRecord, task: str = "sgcls", image=None, step: float = STEP) -> float:
    """Finite-difference check of forward-to-loss w.r.t. every parameter and the image."""
    image = rasterize(scene) if image is None else image
    plist = list(params)
    sizes = [p.value.size for p in plist] + [image.size]
    x0 = np.concatenate([p.value.ravel() for p in plist] + [image.ravel()])
    bounds = np.cumsum([0] + sizes)
    boxes = scene.normalized_boxes()
    labels = scene.categories()

    def f(x):
        for p, lo, hi in zip(plist, bounds[:-1], bounds[1:]):
            p.value = x[lo:hi].reshape(p.value.shape).copy()
            p.zero_grad()
        img = Var(x[bounds[-2] :].reshape(image.shape))
        tape = Tape()
        loss = compute_loss(tape, forward(img, boxes, labels, params, task, tape=tape), scene)
        tape.backward(loss)
        g = np.concatenate([p.grad.ravel() for p in plist] + [img.grad.ravel()])
        return float(loss.value), g

    try:
        return finite_diff_check(f, x0, step)
    finally:
        f(x0)
        params.zero_grad()


def run_gradcheck(seeds: Sequence[int] = range(5), log: Callable[[CheckResult], None] | None = None) -> list[CheckResult]:
    """Every op at ``OP_TOL`` and the full NRM+LEE forward-to-loss at ``PIPELINE_TOL``."""
    results = []

    def emit(r):
        results.append(r)
        if log is not None:
            log(r)

    for seed in seeds:
        rng = np.random.default_rng(seed)
        for name, build, inputs in _op_cases(rng):
            emit(CheckResult(name, seed, check_op(build, inputs, seed), OP_TOL))
        # SGCls exercises every trainable path, object decoder included
        params = init_params(_tiny_config(enable_nrm=True, enable_lee=True), seed)
        emit(CheckResult("pipeline_nrm_lee", seed, pipeline_gradient_error(params, two_object_scene(), "sgcls"), PIPELINE_TOL))
    return results
