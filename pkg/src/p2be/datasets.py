"""Synthetic colored-pattern classification data for desk-scale runs."""

from __future__ import annotations

import numpy as np

_PATTERNS = ("hstripes", "vstripes", "checker", "square", "diagonal",
             "cross", "border", "dot", "top-half", "left-half")

# foreground / background colors per class
_FG = np.array([[220, 40, 40], [40, 200, 60], [50, 70, 230], [230, 210, 40], [200, 60, 210],
                [40, 210, 210], [250, 140, 30], [140, 90, 40], [235, 235, 235], [120, 120, 120]])
_BG = np.array([[20, 30, 90], [90, 20, 40], [40, 80, 20], [30, 30, 30], [20, 90, 90],
                [90, 40, 90], [10, 60, 60], [60, 110, 160], [70, 20, 20], [10, 10, 10]])


def _mask(pattern: str, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[:size, :size]
    off = int(rng.integers(0, 4))
    if pattern == "hstripes":
        return ((yy + off) // 2) % 2 == 0
    if pattern == "vstripes":
        return ((xx + off) // 2) % 2 == 0
    if pattern == "checker":
        return ((yy + xx + off) // 2) % 2 == 0
    if pattern == "diagonal":
        return ((xx - yy + off) // 2) % 2 == 0
    r0, c0 = rng.integers(0, max(1, size // 4), size=2)
    half = size // 2
    if pattern == "square":
        return (yy >= r0) & (yy < r0 + half) & (xx >= c0) & (xx < c0 + half)
    if pattern == "cross":
        return (abs(yy - r0 - half // 2) < 1 + size // 8) | (abs(xx - c0 - half // 2) < 1 + size // 8)
    if pattern == "border":
        return (yy < 1 + off % 2) | (xx < 1 + off % 2) | (yy >= size - 1) | (xx >= size - 1)
    if pattern == "dot":
        return (yy - r0 - half // 2) ** 2 + (xx - c0 - half // 2) ** 2 <= (size // 4) ** 2
    if pattern == "top-half":
        return yy < half + off - 2
    return xx < half + off - 2


def make_patterns(n_samples: int = 512, n_classes: int = 4, size: int = 8, jitter: int = 8,
                  seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Balanced dataset of ``[n, 3, size, size]`` uint8 images and labels.

    Class ``k`` pairs pattern ``k`` with its own foreground/background colors;
    per-sample variation comes from pattern phase/position and uniform color
    jitter of ``+-jitter`` levels per pixel.
    """
    if not 2 <= n_classes <= len(_PATTERNS):
        raise ValueError(f"n_classes must be in [2, {len(_PATTERNS)}]")
    if size < 4:
        raise ValueError("size must be >= 4")
    rng = np.random.default_rng(seed)
    labels = np.arange(n_samples) % n_classes
    rng.shuffle(labels)
    images = np.empty((n_samples, 3, size, size), dtype=np.uint8)
    for i, k in enumerate(labels):
        m = _mask(_PATTERNS[k], size, rng)
        img = np.where(m[None], _FG[k][:, None, None], _BG[k][:, None, None]).astype(np.int64)
        img += rng.integers(-jitter, jitter + 1, size=img.shape)
        images[i] = np.clip(img, 0, 255)
    return images, labels.astype(np.int64)
