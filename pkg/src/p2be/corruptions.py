"""Procedural image corruptions and corruption-robustness metrics.

Seven corruption kinds are available at five severities each.  Every kind is
driven by a single distortion parameter that grows with severity and reduces
to the identity at 0.  Images are uint8 ``[3, H, W]`` or ``[N, 3, H, W]``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# distortion parameter per severity 1..5
DEFAULT_PARAMS: dict[str, tuple[float, ...]] = {
    "gaussian-noise": (0.04, 0.06, 0.08, 0.09, 0.10),   # sigma as a fraction of 255
    "shot-noise": (1 / 500, 1 / 250, 1 / 100, 1 / 75, 1 / 50),  # inverse photon count
    "impulse-noise": (0.01, 0.02, 0.03, 0.05, 0.07),    # fraction of salt/pepper pixels
    "defocus-blur": (0.75, 1.0, 1.25, 1.5, 2.0),        # disk radius in pixels
    "contrast": (0.25, 0.5, 0.6, 0.7, 0.85),            # 1 - contrast factor
    "brightness": (0.05, 0.1, 0.15, 0.2, 0.3),          # additive offset as a fraction of 255
    "pixelate": (0.1, 0.2, 0.35, 0.5, 0.6),             # fraction of resolution removed
}
KINDS = tuple(DEFAULT_PARAMS)
STOCHASTIC = frozenset({"gaussian-noise", "shot-noise", "impulse-noise"})


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int
    parameters: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kind not in DEFAULT_PARAMS:
            raise ValueError(f"unknown corruption kind {self.kind!r}; valid kinds: {', '.join(KINDS)}")
        if not isinstance(self.severity, (int, np.integer)) or not 1 <= self.severity <= 5:
            raise ValueError(f"severity must be an integer in 1..5, got {self.severity!r}")
        if self.parameters is not None:
            check_parameters(self.kind, self.parameters)

    @property
    def parameter(self) -> float:
        params = self.parameters if self.parameters is not None else DEFAULT_PARAMS[self.kind]
        return float(params[self.severity - 1])


def check_parameters(kind: str, params) -> tuple[float, ...]:
    params = tuple(float(p) for p in params)
    if len(params) != 5:
        raise ValueError(f"{kind}: expected 5 severity parameters, got {len(params)}")
    if any(p < 0 or not math.isfinite(p) for p in params):
        raise ValueError(f"{kind}: parameters must be finite and >= 0")
    if any(b < a for a, b in zip(params, params[1:])):
        raise ValueError(f"{kind}: parameters must be non-decreasing in severity")
    return params


def _to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


def _disk_kernel(radius: float) -> np.ndarray:
    half = int(math.ceil(radius))
    yy, xx = np.mgrid[-half:half + 1, -half:half + 1]
    # anti-aliased disk: partial weight for cells on the rim
    k = np.clip(radius + 0.5 - np.hypot(xx, yy), 0.0, 1.0)
    return k / k.sum()


def _defocus(x: np.ndarray, radius: float) -> np.ndarray:
    k = _disk_kernel(radius)
    half = k.shape[0] // 2
    if half == 0:
        return x.astype(np.float64)
    h, w = x.shape[-2:]
    pad = [(0, 0)] * (x.ndim - 2) + [(half, half), (half, half)]
    xp = np.pad(x.astype(np.float64), pad, mode="reflect" if min(h, w) > half else "symmetric")
    out = np.zeros(x.shape, dtype=np.float64)
    for i in range(k.shape[0]):
        for j in range(k.shape[1]):
            if k[i, j]:
                out += k[i, j] * xp[..., i:i + h, j:j + w]
    return out


def _pixelate(x: np.ndarray, fraction: float) -> np.ndarray:
    h, w = x.shape[-2:]
    nh = max(1, int(math.floor(h * (1 - fraction) + 1e-9)))
    nw = max(1, int(math.floor(w * (1 - fraction) + 1e-9)))
    rb = np.arange(h) * nh // h
    cb = np.arange(w) * nw // w
    xf = x.astype(np.float64)
    rows = np.add.reduceat(xf, np.searchsorted(rb, np.arange(nh)), axis=-2) / np.bincount(rb)[:, None]
    small = np.add.reduceat(rows, np.searchsorted(cb, np.arange(nw)), axis=-1) / np.bincount(cb)
    return small[..., rb, :][..., :, cb]


def corrupt(image: np.ndarray, kind: str, parameter: float, rng: np.random.Generator | None = None):
    """Apply ``kind`` with an explicit distortion parameter."""
    x = np.asarray(image)
    if kind not in DEFAULT_PARAMS:
        raise ValueError(f"unknown corruption kind {kind!r}; valid kinds: {', '.join(KINDS)}")
    p = float(parameter)
    if kind in STOCHASTIC and rng is None:
        rng = np.random.default_rng(0)
    if kind == "gaussian-noise":
        out = x + rng.normal(0.0, p * 255.0, x.shape) if p > 0 else x
    elif kind == "shot-noise":
        out = rng.poisson(x / 255.0 / p) * p * 255.0 if p > 0 else x
    elif kind == "impulse-noise":
        out = x.copy()
        hit = rng.random(x.shape) < p
        salt = rng.random(x.shape) < 0.5
        out[hit] = np.where(salt[hit], 255, 0)
    elif kind == "defocus-blur":
        out = _defocus(x, p)
    elif kind == "contrast":
        mean = x.mean(axis=(-2, -1), keepdims=True)
        out = mean + (1.0 - p) * (x - mean)
    elif kind == "brightness":
        out = x + p * 255.0
    else:
        out = _pixelate(x, p)
    return _to_uint8(out)


def apply_corruption(image: np.ndarray, spec: CorruptionSpec, seed: int | None = 0) -> np.ndarray:
    """Corrupt an image (or batch) per ``spec``; noise kinds are seed-deterministic."""
    rng = np.random.default_rng(seed) if spec.kind in STOCHASTIC else None
    return corrupt(image, spec.kind, spec.parameter, rng)


def severity_ladder(kinds=KINDS, overrides: dict | None = None) -> list[CorruptionSpec]:
    overrides = overrides or {}
    return [CorruptionSpec(k, s, tuple(overrides[k]) if k in overrides else None)
            for k in kinds for s in range(1, 6)]


# -- metrics ----------------------------------------------------------------

@dataclass
class ErrorTable:
    """Test errors keyed by ``(kind, severity)`` plus optional baseline errors."""

    model_errors: dict[tuple[str, int], float]
    baseline_errors: dict[tuple[str, int], float] | None = None
    kinds: list[str] = field(init=False)

    def __post_init__(self):
        for table in (self.model_errors, self.baseline_errors or {}):
            for key, v in table.items():
                if not 0.0 <= v <= 1.0:
                    raise ValueError(f"error for {key} out of [0, 1]: {v}")
        if self.baseline_errors is not None and set(self.baseline_errors) != set(self.model_errors):
            raise ValueError("model and baseline tables cover different (kind, severity) keys")
        self.kinds = list(dict.fromkeys(k for k, _ in self.model_errors))


def corruption_error(table: ErrorTable, kind: str) -> float:
    """Severity-summed model error divided by severity-summed baseline error."""
    if table.baseline_errors is None:
        raise ValueError("corruption error needs baseline errors")
    keys = [(kind, s) for s in range(1, 6)]
    missing = [k for k in keys if k not in table.model_errors]
    if missing:
        raise ValueError(f"{kind}: missing severities {[s for _, s in missing]}")
    base = sum(table.baseline_errors[k] for k in keys)
    if base <= 0:
        raise ValueError(f"{kind}: baseline error sum is zero")
    return sum(table.model_errors[k] for k in keys) / base


def mean_corruption_error(table: ErrorTable) -> float:
    if not table.kinds:
        raise ValueError("empty error table")
    return sum(corruption_error(table, k) for k in table.kinds) / len(table.kinds)


def mean_error_cifar_style(table: ErrorTable) -> float:
    """Unweighted mean error over every (kind, severity) cell."""
    if not table.model_errors:
        raise ValueError("empty error table")
    return sum(table.model_errors.values()) / len(table.model_errors)


def read_baseline_csv(path) -> dict[tuple[str, int], float]:
    """Read ``kind,severity,error`` rows (errors as fractions)."""
    out: dict[tuple[str, int], float] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["kind", "severity", "error"]:
            raise ValueError(f"{path}: header must be kind,severity,error")
        for row in reader:
            key = (row["kind"], int(row["severity"]))
            err = float(row["error"])
            if not 0.0 <= err <= 1.0:
                raise ValueError(f"{path}: error {err} for {key} outside [0, 1]")
            out[key] = err
    return out


def write_error_csv(path, errors: dict[tuple[str, int], float]) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "severity", "error"])
        for (kind, sev), err in errors.items():
            w.writerow([kind, sev, repr(float(err))])
