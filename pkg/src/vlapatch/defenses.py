"""Input-transformation defenses applied to camera frames before the policy."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

DEFENSE_KINDS = ("jpeg", "gaussian", "median", "bitdepth")

# Evaluation ranges, mildest setting first.
SWEEP_GRID = {
    "jpeg": (50, 40, 30, 20, 10),
    "gaussian": (0.01, 0.025, 0.05, 0.075, 0.1),
    "median": (3, 5, 7, 9),
    "bitdepth": (6, 5, 4, 3),
}

# Standard JPEG (Annex K) quantization tables.
LUMA_Q = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)

CHROMA_Q = np.array([
    [17, 18, 24, 47, 99, 99, 99, 99],
    [18, 21, 26, 66, 99, 99, 99, 99],
    [24, 26, 56, 99, 99, 99, 99, 99],
    [47, 66, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
], dtype=np.float64)


def _dct_matrix(n=8):
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    m = np.sqrt(2.0 / n) * np.cos(np.pi * (2 * i + 1) * k / (2 * n))
    m[0] /= np.sqrt(2.0)
    return m


DCT8 = _dct_matrix()


def scaled_table(table, quality):
    """IJG quality scaling of a base quantization table."""
    quality = int(np.clip(quality, 1, 100))
    scale = 5000 / quality if quality < 50 else 200 - 2 * quality
    return np.clip(np.floor((table * scale + 50) / 100), 1, 255)


def rgb_to_ycbcr(rgb):
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = -0.168736 * r - 0.331264 * g + 0.5 * b + 128
    cr = 0.5 * r - 0.418688 * g - 0.081312 * b + 128
    return np.stack([y, cb, cr], axis=-1)


def ycbcr_to_rgb(ycc):
    y, cb, cr = ycc[..., 0], ycc[..., 1] - 128, ycc[..., 2] - 128
    r = y + 1.402 * cr
    g = y - 0.344136 * cb - 0.714136 * cr
    b = y + 1.772 * cb
    return np.stack([r, g, b], axis=-1)


def _blocks(channel):
    h, w = channel.shape
    return channel.reshape(h // 8, 8, w // 8, 8).transpose(0, 2, 1, 3)


def _unblocks(blocks):
    bh, bw = blocks.shape[:2]
    return blocks.transpose(0, 2, 1, 3).reshape(bh * 8, bw * 8)


def jpeg(image, quality):
    """Lossy DCT round trip: YCbCr 4:4:4, 8x8 blocks, standard tables."""
    if not 1 <= quality <= 100:
        raise ValueError("JPEG quality must lie in [1, 100]")
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    ph, pw = -h % 8, -w % 8
    padded = np.pad(image, ((0, ph), (0, pw), (0, 0)), mode="edge")
    ycc = rgb_to_ycbcr(padded * 255.0) - 128.0
    out = np.empty_like(ycc)
    for ch, base in enumerate((LUMA_Q, CHROMA_Q, CHROMA_Q)):
        q = scaled_table(base, quality)
        blocks = _blocks(ycc[..., ch])
        coef = DCT8 @ blocks @ DCT8.T
        coef = np.round(coef / q) * q
        out[..., ch] = _unblocks(DCT8.T @ coef @ DCT8)
    rgb = ycbcr_to_rgb(out + 128.0) / 255.0
    return np.clip(rgb[:h, :w], 0.0, 1.0)


def gaussian_noise(image, sigma, seed=0, rng=None):
    if sigma < 0:
        raise ValueError("noise sigma must be non-negative")
    image = np.asarray(image, dtype=np.float64)
    if sigma == 0:
        return image.copy()
    rng = rng if rng is not None else np.random.default_rng(seed)
    return np.clip(image + rng.normal(0.0, sigma, image.shape), 0.0, 1.0)


def median_blur(image, k):
    if k % 2 == 0 or not 3 <= k <= 9:
        raise ValueError(f"median kernel must be odd and within [3, 9], got {k}")
    image = np.asarray(image, dtype=np.float64)
    return ndimage.median_filter(image, size=(k, k, 1), mode="nearest")


def bit_depth(image, bits):
    if not 1 <= bits <= 8:
        raise ValueError("bit depth must lie in [1, 8]")
    levels = 2 ** bits - 1
    v = np.asarray(image, dtype=np.float64) * levels
    # ties away from zero
    return np.sign(v) * np.floor(np.abs(v) + 0.5) / levels


_RANGES = {"jpeg": (10, 50), "gaussian": (0.0, 0.1), "median": (3, 9), "bitdepth": (3, 6)}


@dataclass(frozen=True)
class DefenseSpec:
    kind: str
    param: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in DEFENSE_KINDS:
            raise ValueError(f"unknown defense {self.kind!r}; expected one of {DEFENSE_KINDS}")
        lo, hi = _RANGES[self.kind]
        if not lo <= self.param <= hi:
            raise ValueError(f"{self.kind} parameter {self.param} outside [{lo}, {hi}]")
        if self.kind == "median" and int(self.param) % 2 == 0:
            raise ValueError("median kernel must be odd")

    def apply(self, image, rng=None):
        if self.kind == "jpeg":
            return jpeg(image, int(self.param))
        if self.kind == "gaussian":
            return gaussian_noise(image, float(self.param), self.seed, rng)
        if self.kind == "median":
            return median_blur(image, int(self.param))
        return bit_depth(image, int(self.param))

    def preprocessor(self, episode_seed=0):
        """Per-episode frame transform; noise streams are seeded per episode."""
        rng = np.random.default_rng([self.seed, int(episode_seed)])
        return lambda frame: self.apply(frame, rng)
