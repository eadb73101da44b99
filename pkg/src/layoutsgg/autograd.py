"""Dense float64 tensors with hand-written reverse-mode gradients.

Every operation computes its forward value with numpy and, when a
:class:`Tape` is given, records a closure that pushes the output gradient
back to its inputs.  The graph of the pipeline is fixed, so there is no
general graph engine here: a tape is just an ordered list of closures
replayed in reverse.

Tensors are plain ``numpy.ndarray`` objects of dtype float64.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "NonFiniteError",
    "as_tensor",
    "Var",
    "Param",
    "Tape",
    "const",
    "elementwise",
    "add",
    "sub",
    "mul",
    "matmul",
    "linear",
    "relu",
    "sigmoid",
    "softmax_lastdim",
    "cross_entropy",
    "reshape",
    "transpose",
    "concat",
    "gather_rows",
    "conv2d",
    "finite_diff_check",
    "sgd_step",
]


class NonFiniteError(ValueError):
    """Raised when a tensor or gradient holds NaN or infinity."""


def as_tensor(x, name: str = "tensor") -> np.ndarray:
    """Return ``x`` as a float64 array, rejecting NaN and infinity."""
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains non-finite values")
    return arr


class Var:
    """A value on the tape together with its accumulated gradient."""

    __slots__ = ("value", "grad", "requires_grad")

    def __init__(self, value, requires_grad: bool = True):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def __repr__(self):
        return f"Var(shape={self.value.shape})"


class Param(Var):
    """A named trainable array with a persistent gradient buffer."""

    __slots__ = ("name",)

    def __init__(self, name: str, value):
        super().__init__(as_tensor(value, name), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.value)

    def accumulate(self, g: np.ndarray) -> None:
        self.grad += g

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.value.shape})"


def const(x) -> Var:
    return Var(x, requires_grad=False)


class Tape:
    """Ordered record of backward closures for one forward pass."""

    def __init__(self):
        self._ops: list[Callable[[], None]] = []

    def __len__(self):
        return len(self._ops)

    def record(self, fn: Callable[[], None]) -> None:
        self._ops.append(fn)

    def backward(self, out: Var, grad=None) -> None:
        """Replay the tape from ``out``; ``grad`` seeds non-scalar outputs."""
        if grad is None:
            if out.value.size != 1:
                raise ValueError("backward() needs a scalar output or an explicit seed gradient")
            grad = np.ones_like(out.value)
        out.grad = np.asarray(grad, dtype=np.float64).reshape(out.value.shape)
        for fn in reversed(self._ops):
            fn()
        self._ops.clear()


def _out(value: np.ndarray, *inputs: Var) -> Var:
    return Var(value, requires_grad=any(v.requires_grad for v in inputs))


def _wants_grad(tape, out: Var) -> bool:
    return tape is not None and out.requires_grad


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` over the axes that were expanded from size 1 to reach ``g.shape``."""
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    axes = tuple(i for i, (n, m) in enumerate(zip(shape, g.shape)) if n == 1 and m != 1)
    return g.sum(axis=axes, keepdims=True)


def _check_broadcast(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape == b.shape or b.ndim == 0 or a.ndim == 0:
        return
    if a.ndim != b.ndim:
        raise ValueError(f"rank mismatch: {a.shape} vs {b.shape} (no implicit rank promotion)")
    for n, m in zip(a.shape, b.shape):
        if n != m and n != 1 and m != 1:
            raise ValueError(f"incompatible shapes {a.shape} and {b.shape}")


def elementwise(tape: Tape | None, op: str, a: Var, b: Var) -> Var:
    """Entrywise ``add``/``sub``/``mul`` with size-1-axis broadcasting."""
    _check_broadcast(a.value, b.value)
    if op == "add":
        out = _out(a.value + b.value, a, b)
    elif op == "sub":
        out = _out(a.value - b.value, a, b)
    elif op == "mul":
        out = _out(a.value * b.value, a, b)
    else:
        raise ValueError(f"unknown elementwise op {op!r}")

    if _wants_grad(tape, out):
        av, bv = a.value, b.value

        def back():
            g = out.grad
            if g is None:
                return
            if op == "add":
                ga, gb = g, g
            elif op == "sub":
                ga, gb = g, -g
            else:
                ga, gb = g * bv, g * av
            if a.requires_grad:
                a.accumulate(_unbroadcast(ga, av.shape))
            if b.requires_grad:
                b.accumulate(_unbroadcast(gb, bv.shape))

        tape.record(back)
    return out


def add(tape, a, b):
    return elementwise(tape, "add", a, b)


def sub(tape, a, b):
    return elementwise(tape, "sub", a, b)


def mul(tape, a, b):
    return elementwise(tape, "mul", a, b)


def matmul(tape: Tape | None, a: Var, b: Var) -> Var:
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {av.shape} @ {bv.shape}")
    out = _out(av @ bv, a, b)
    if _wants_grad(tape, out):

        def back():
            g = out.grad
            if g is None:
                return
            if a.requires_grad:
                a.accumulate(g @ bv.T)
            if b.requires_grad:
                b.accumulate(av.T @ g)

        tape.record(back)
    return out


def linear(tape: Tape | None, x: Var, weight: Var, bias: Var | None = None) -> Var:
    """``x @ weight.T + bias`` for row-vector inputs ``x`` of shape (n, in)."""
    xv, wv = x.value, weight.value
    if xv.ndim != 2 or wv.ndim != 2 or xv.shape[1] != wv.shape[1]:
        raise ValueError(f"linear dimension mismatch: {xv.shape} vs weight {wv.shape}")
    value = xv @ wv.T
    inputs = (x, weight)
    if bias is not None:
        value = value + bias.value
        inputs = (x, weight, bias)
    out = _out(value, *inputs)
    if _wants_grad(tape, out):

        def back():
            g = out.grad
            if g is None:
                return
            if x.requires_grad:
                x.accumulate(g @ wv)
            if weight.requires_grad:
                weight.accumulate(g.T @ xv)
            if bias is not None and bias.requires_grad:
                bias.accumulate(g.sum(axis=0))

        tape.record(back)
    return out


def relu(tape: Tape | None, x: Var) -> Var:
    mask = x.value > 0
    out = _out(np.where(mask, x.value, 0.0), x)
    if _wants_grad(tape, out):

        def back():
            if out.grad is not None:
                x.accumulate(out.grad * mask)

        tape.record(back)
    return out


_OPEN_LO = np.nextafter(0.0, 1.0)
_OPEN_HI = np.nextafter(1.0, 0.0)


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    # float64 rounds sigmoid(x) to exactly 0 or 1 for large |x|; stay in the open interval
    return np.clip(out, _OPEN_LO, _OPEN_HI)


def sigmoid(tape: Tape | None, x: Var) -> Var:
    s = _sigmoid(x.value)
    out = _out(s, x)
    if _wants_grad(tape, out):

        def back():
            if out.grad is not None:
                x.accumulate(out.grad * s * (1.0 - s))

        tape.record(back)
    return out


def _softmax(v: np.ndarray) -> np.ndarray:
    z = v - v.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_lastdim(tape: Tape | None, x: Var) -> Var:
    if x.value.ndim == 0 or x.value.shape[-1] < 1:
        raise ValueError("softmax needs a non-empty last dimension")
    p = _softmax(as_tensor(x.value, "softmax input"))
    out = _out(p, x)
    if _wants_grad(tape, out):

        def back():
            g = out.grad
            if g is not None:
                x.accumulate(p * (g - (g * p).sum(axis=-1, keepdims=True)))

        tape.record(back)
    return out


def cross_entropy(tape: Tape | None, logits: Var, labels: Sequence[int]) -> Var:
    """Mean over rows of ``-log softmax(logits)[label]``."""
    lv = logits.value
    labels = np.asarray(labels, dtype=np.int64)
    if lv.ndim != 2 or labels.shape != (lv.shape[0],):
        raise ValueError(f"cross_entropy expects (n, K) logits and n labels, got {lv.shape}, {labels.shape}")
    n, k = lv.shape
    if n == 0:
        raise ValueError("cross_entropy over zero rows")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range [0, {k})")
    z = lv - lv.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(logsum - z[rows, labels]))
    out = _out(np.asarray(loss), logits)
    if _wants_grad(tape, out):

        def back():
            if out.grad is None:
                return
            p = np.exp(z - logsum[:, None])
            p[rows, labels] -= 1.0
            logits.accumulate(p * (float(out.grad) / n))

        tape.record(back)
    return out


def reshape(tape: Tape | None, x: Var, shape) -> Var:
    out = _out(x.value.reshape(shape), x)
    if _wants_grad(tape, out):
        src = x.value.shape

        def back():
            if out.grad is not None:
                x.accumulate(out.grad.reshape(src))

        tape.record(back)
    return out


def transpose(tape: Tape | None, x: Var) -> Var:
    if x.value.ndim != 2:
        raise ValueError("transpose expects a matrix")
    out = _out(x.value.T, x)
    if _wants_grad(tape, out):

        def back():
            if out.grad is not None:
                x.accumulate(out.grad.T)

        tape.record(back)
    return out


def concat(tape: Tape | None, xs: Sequence[Var]) -> Var:
    """Concatenate matrices along the last axis."""
    widths = [x.value.shape[-1] for x in xs]
    out = _out(np.concatenate([x.value for x in xs], axis=-1), *xs)
    if _wants_grad(tape, out):
        bounds = np.cumsum([0] + widths)

        def back():
            g = out.grad
            if g is None:
                return
            for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
                if x.requires_grad:
                    x.accumulate(g[..., lo:hi])

        tape.record(back)
    return out


def gather_rows(tape: Tape | None, x: Var, index) -> Var:
    index = np.asarray(index, dtype=np.int64)
    out = _out(x.value[index], x)
    if _wants_grad(tape, out):

        def back():
            if out.grad is None:
                return
            g = np.zeros_like(x.value)
            np.add.at(g, index, out.grad)
            x.accumulate(g)

        tape.record(back)
    return out


def conv2d(tape: Tape | None, x: Var, weight: Var, bias: Var, stride: int = 2, padding: int = 1) -> Var:
    """Cross-correlation of a (Cin, H, W) map with (Cout, Cin, kh, kw) filters."""
    xv, wv = x.value, weight.value
    if xv.ndim != 3 or wv.ndim != 4 or wv.shape[1] != xv.shape[0]:
        raise ValueError(f"conv2d shape mismatch: input {xv.shape}, weight {wv.shape}")
    cin, h, w = xv.shape
    cout, _, kh, kw = wv.shape
    xp = np.pad(xv, ((0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, : ho * stride : stride, : wo * stride : stride]  # (cin, ho, wo, kh, kw)
    cols = win.transpose(1, 2, 0, 3, 4).reshape(ho * wo, cin * kh * kw)
    wmat = wv.reshape(cout, -1)
    y = cols @ wmat.T + bias.value
    out = _out(y.T.reshape(cout, ho, wo), x, weight, bias)
    if _wants_grad(tape, out):

        def back():
            g = out.grad
            if g is None:
                return
            gm = g.reshape(cout, ho * wo)
            if weight.requires_grad:
                weight.accumulate((gm @ cols).reshape(wv.shape))
            if bias.requires_grad:
                bias.accumulate(gm.sum(axis=1))
            if x.requires_grad:
                dcols = (gm.T @ wmat).reshape(ho, wo, cin, kh, kw)
                dxp = np.zeros_like(xp)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, i : i + ho * stride : stride, j : j + wo * stride : stride] += dcols[:, :, :, i, j].transpose(2, 0, 1)
                x.accumulate(dxp[:, padding : padding + h, padding : padding + w])

        tape.record(back)
    return out


def finite_diff_check(f: Callable[[np.ndarray], tuple[float, np.ndarray]], x: np.ndarray, step: float = 1e-5) -> float:
    """Max relative error between ``f``'s analytic gradient and central differences.

    ``f(x)`` must return ``(value, gradient)``.  The error of each entry is
    ``|g - g_fd| / max(1, |g_fd|)``.
    """
    x = np.array(x, dtype=np.float64, copy=True)
    _, g = f(x)
    g = np.asarray(g, dtype=np.float64).reshape(x.shape)
    worst = 0.0
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp, _ = f(x)
        flat[i] = orig - step
        fm, _ = f(x)
        flat[i] = orig
        fd = (float(fp) - float(fm)) / (2.0 * step)
        worst = max(worst, abs(gflat[i] - fd) / max(1.0, abs(fd)))
    return worst


def sgd_step(params: Iterable[Param], lr: float) -> None:
    """In-place ``value -= lr * grad`` followed by zeroing every gradient."""
    params = list(params)
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"non-finite gradient in {p.name}")
    for p in params:
        if lr != 0.0:
            p.value -= lr * p.grad
        p.zero_grad()
