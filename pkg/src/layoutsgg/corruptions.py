"""Image corruptions at severities 0-5.

Eight kinds cover the noise, blur and digital families of the common
corruption benchmarks.  Severity 0 is the identity; the per-severity
constants live in :data:`SEVERITY_TABLE` and are documented in
``docs/corruptions.md``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import fft, ndimage
from sklearn.base import BaseEstimator, TransformerMixin

KINDS = (
    "gaussian_noise",
    "impulse_noise",
    "defocus_blur",
    "motion_blur",
    "brightness",
    "contrast",
    "pixelate",
    "jpeg_like_block",
)

# index = severity - 1
SEVERITY_TABLE = {
    "gaussian_noise": (0.04, 0.08, 0.12, 0.18, 0.26),  # noise std
    "impulse_noise": (0.03, 0.06, 0.09, 0.17, 0.27),  # fraction of salt/pepper entries
    "defocus_blur": (1.0, 1.5, 2.0, 2.5, 3.0),  # disk radius, px
    "motion_blur": (3, 5, 7, 9, 11),  # kernel length, px
    "brightness": (0.1, 0.2, 0.3, 0.4, 0.5),  # additive offset
    "contrast": (0.4, 0.3, 0.2, 0.1, 0.05),  # contrast retention factor
    "pixelate": (2, 3, 4, 6, 8),  # block side, px
    "jpeg_like_block": (0.02, 0.04, 0.08, 0.14, 0.22),  # DCT quantization step
}


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown corruption kind {self.kind!r}")
        if not 0 <= int(self.severity) <= 5:
            raise ValueError("severity must be in 0..5")

    @property
    def level(self):
        return SEVERITY_TABLE[self.kind][self.severity - 1]


def _disk_kernel(radius: float) -> np.ndarray:
    r = int(np.ceil(radius))
    ys, xs = np.mgrid[-r : r + 1, -r : r + 1]
    k = ((xs**2 + ys**2) <= radius**2).astype(np.float64)
    return k / k.sum()


def _line_kernel(length: int, angle: float) -> np.ndarray:
    r = length // 2
    k = np.zeros((2 * r + 1, 2 * r + 1))
    for t in np.linspace(-r, r, 4 * length + 1):
        x = int(round(r + t * np.cos(angle)))
        y = int(round(r + t * np.sin(angle)))
        k[y, x] = 1.0
    return k / k.sum()


def _blur(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    return np.stack([ndimage.convolve(ch, kernel, mode="reflect") for ch in img])


def _pixelate(img: np.ndarray, block: int) -> np.ndarray:
    _, h, w = img.shape
    starts_y = np.arange(0, h, block)
    starts_x = np.arange(0, w, block)
    sums = np.add.reduceat(np.add.reduceat(img, starts_y, axis=1), starts_x, axis=2)
    ny = np.diff(np.append(starts_y, h))
    nx = np.diff(np.append(starts_x, w))
    means = sums / (ny[:, None] * nx[None, :])
    return np.repeat(np.repeat(means, ny, axis=1), nx, axis=2)


def _jpeg_like(img: np.ndarray, step: float, block: int = 8) -> np.ndarray:
    c, h, w = img.shape
    ph, pw = (-h) % block, (-w) % block
    x = np.pad(img, ((0, 0), (0, ph), (0, pw)), mode="edge")
    hb, wb = x.shape[1] // block, x.shape[2] // block
    blocks = x.reshape(c, hb, block, wb, block).transpose(0, 1, 3, 2, 4)
    coef = fft.dctn(blocks, axes=(-2, -1), norm="ortho")
    u, v = np.mgrid[0:block, 0:block]
    q = step * (1.0 + u + v)  # coarser steps for higher frequencies
    coef = np.round(coef / q) * q
    out = fft.idctn(coef, axes=(-2, -1), norm="ortho")
    out = out.transpose(0, 1, 3, 2, 4).reshape(c, hb * block, wb * block)
    return out[:, :h, :w]


def corrupt(image: np.ndarray, spec: CorruptionSpec, seed: int) -> np.ndarray:
    """Apply ``spec`` to a (3, H, W) image in [0, 1]; the output is clamped to [0, 1].

    Random draws depend only on ``seed`` (not on severity), so the same seed
    gives the same noise field at every severity.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ValueError("expected a (C, H, W) image")
    if spec.severity == 0:
        return image.copy()
    rng = np.random.default_rng(seed)
    level = spec.level
    kind = spec.kind
    if kind == "gaussian_noise":
        out = image + level * rng.standard_normal(image.shape)
    elif kind == "impulse_noise":
        u = rng.random(image.shape)
        out = image.copy()
        out[u < level / 2] = 0.0
        out[(u >= level / 2) & (u < level)] = 1.0
    elif kind == "defocus_blur":
        out = _blur(image, _disk_kernel(level))
    elif kind == "motion_blur":
        out = _blur(image, _line_kernel(int(level), rng.uniform(-np.pi / 4, np.pi / 4)))
    elif kind == "brightness":
        out = image + level
    elif kind == "contrast":
        mean = image.mean(axis=(1, 2), keepdims=True)
        out = (image - mean) * level + mean
    elif kind == "pixelate":
        out = _pixelate(image, int(level))
    else:
        out = _jpeg_like(image, level)
    return np.clip(out, 0.0, 1.0)


def psnr(clean: np.ndarray, noisy: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(clean) - np.asarray(noisy)) ** 2))
    return float("inf") if mse == 0 else 10.0 * np.log10(1.0 / mse)


class Corruptor(TransformerMixin, BaseEstimator):
    """Stateless transformer applying one corruption to a stack of images.

    Image ``i`` draws its noise from the ``i``-th child of ``SeedSequence(seed)``.
    """

    def __init__(self, kind="gaussian_noise", severity=1, seed=0):
        self.kind = kind
        self.severity = severity
        self.seed = seed

    def fit(self, X, y=None):
        CorruptionSpec(self.kind, self.severity)
        return self

    def transform(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 4:
            raise ValueError("expected an (n, C, H, W) stack of images")
        spec = CorruptionSpec(self.kind, self.severity)
        seq = np.random.SeedSequence(self.seed)
        seeds = [int(s.generate_state(1)[0]) for s in seq.spawn(len(X))]
        return np.stack([corrupt(img, spec, s) for img, s in zip(X, seeds)])
