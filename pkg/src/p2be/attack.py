"""Logit-space projected gradient ascent on discretized inputs.

Each pixel carries a vector of logits over its discrete levels.  The attack
softens the encoder with a temperature-controlled softmax over feasible levels,
ascends the cross entropy with signed gradient steps on those logits, anneals
the temperature towards a hard choice and finally takes the argmax level.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import cross_entropy_grad, per_sample_cross_entropy


@dataclass(frozen=True)
class AttackConfig:
    steps: int = 7
    anneal_rate: float = 1.2
    step_size: float = 1.0
    epsilon: float = 8 / 255
    initial_temperature: float = 1.0
    restarts: int = 1
    batch_size: int = 128

    def __post_init__(self):
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError("steps must be an integer >= 1")
        if not self.anneal_rate > 1:
            raise ValueError("anneal_rate must be > 1")
        if not self.step_size > 0:
            raise ValueError("step_size must be > 0")
        if not 0 <= self.epsilon <= 1:
            raise ValueError("epsilon must lie in [0, 1]")
        if not self.initial_temperature > 0:
            raise ValueError("initial_temperature must be > 0")
        if self.restarts < 1 or self.batch_size < 1:
            raise ValueError("restarts and batch_size must be >= 1")

    @property
    def radius(self) -> int:
        """Budget in integer pixel levels."""
        return int(round(self.epsilon * 255))


@dataclass
class LevelCodebook:
    """Discrete levels of an encoder: ``level_of_value[256]`` and ``codes[L, D]``."""

    level_of_value: np.ndarray
    codes: np.ndarray

    @property
    def n_levels(self) -> int:
        return self.codes.shape[0]

    def feasibility(self, radius: int) -> tuple[np.ndarray, np.ndarray]:
        """Per original value: feasible-level mask ``[256, L]`` and the
        closest in-budget pixel value realizing each level (``-1`` if none)."""
        mask = np.zeros((256, self.n_levels), dtype=bool)
        rep = np.full((256, self.n_levels), -1, dtype=np.int64)
        dist = np.full((256, self.n_levels), 1 << 30, dtype=np.int64)
        for delta in range(-radius, radius + 1):
            x = np.arange(256)
            v = x + delta
            ok = (v >= 0) & (v <= 255)
            x, v = x[ok], v[ok]
            lvl = self.level_of_value[v]
            better = abs(delta) < dist[x, lvl]
            x, v, lvl = x[better], v[better], lvl[better]
            dist[x, lvl] = abs(delta)
            rep[x, lvl] = v
            mask[x, lvl] = True
        return mask, rep


@dataclass
class LogitRelaxation:
    """Per-pixel level logits ``u[N, 3, H, W, L]`` and the feasibility mask."""

    u: np.ndarray
    mask: np.ndarray

    def weights(self, temperature: float) -> np.ndarray:
        z = np.where(self.mask, self.u / temperature, -np.inf)
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)


def _planes(soft: np.ndarray) -> np.ndarray:
    # [N, 3, H, W, D] -> [N, 3D, H, W]
    n, c, h, w, d = soft.shape
    return np.ascontiguousarray(soft.transpose(0, 1, 4, 2, 3)).reshape(n, c * d, h, w)


def soft_encode(relaxation: LogitRelaxation, temperature: float, codes: np.ndarray,
                dtype=np.float32) -> np.ndarray:
    """Expected code under the softmax over feasible levels, as bit planes."""
    if not temperature > 0:
        raise ValueError("temperature must be > 0")
    s = relaxation.weights(temperature)
    return _planes(s @ codes).astype(dtype)


def init_relaxation(images: np.ndarray, levels: LevelCodebook, radius: int,
                    rng: np.random.Generator) -> LogitRelaxation:
    feas, _ = levels.feasibility(radius)
    mask = feas[images.astype(np.intp)]
    u = rng.uniform(0.0, 0.1, mask.shape)
    own = levels.level_of_value[images.astype(np.intp)]
    np.put_along_axis(u, own[..., None], 1.0, axis=-1)
    return LogitRelaxation(np.where(mask, u, -np.inf), mask)


def _attack_once(model, levels, images, labels, config, rng):
    relax = init_relaxation(images, levels, config.radius, rng)
    codes = levels.codes
    temp = config.initial_temperature
    trace = np.zeros((len(images), config.steps))
    for t in range(config.steps):
        s = relax.weights(temp)
        logits = model.forward(_planes(s @ codes).astype(model.dtype))
        trace[:, t] = per_sample_cross_entropy(logits, labels)
        _, dlogits = cross_entropy_grad(logits, labels)
        dbits = model.backward(dlogits * len(labels))["input"].astype(np.float64)
        n, _, h, w = dbits.shape
        dsoft = dbits.reshape(n, 3, -1, h, w).transpose(0, 1, 3, 4, 2)
        ds = dsoft @ codes.T
        du = s * (ds - (s * ds).sum(axis=-1, keepdims=True)) / temp
        relax.u = np.where(relax.mask, relax.u + config.step_size * np.sign(du), -np.inf)
        temp /= config.anneal_rate
    return relax, trace


def lspga_attack(model, levels: LevelCodebook, images: np.ndarray, labels: np.ndarray,
                 config: AttackConfig = AttackConfig(), seed: int = 0):
    """Attack a batch of uint8 images.

    Returns ``(adversarial_images, trace)`` where ``trace[i, t]`` is the
    relaxed cross entropy of sample ``i`` at step ``t``.  Every output pixel
    lies within ``config.radius`` levels of the original.
    """
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels)
    _, rep = levels.feasibility(config.radius)
    rng = np.random.default_rng(seed)
    adv = images.copy()
    trace = np.zeros((len(images), config.steps))
    for start in range(0, len(images), config.batch_size):
        sl = slice(start, start + config.batch_size)
        x, y = images[sl], labels[sl]
        best_loss = None
        for _ in range(config.restarts):
            relax, tr = _attack_once(model, levels, x, y, config, rng)
            choice = relax.u.argmax(axis=-1)
            cand = np.take_along_axis(rep[x.astype(np.intp)], choice[..., None], axis=-1)[..., 0]
            cand = cand.astype(np.uint8)
            if config.restarts == 1:
                adv[sl], trace[sl] = cand, tr
                break
            loss = per_sample_cross_entropy(model.forward(hard_planes(levels, cand, model.dtype)), y)
            take = np.ones(len(y), bool) if best_loss is None else loss > best_loss
            best_loss = loss if best_loss is None else np.where(take, loss, best_loss)
            adv[sl][take], trace[sl][take] = cand[take], tr[take]
    return adv, trace


def hard_planes(levels: LevelCodebook, images: np.ndarray, dtype=np.float32) -> np.ndarray:
    """Exact encoding of images through the level codebook."""
    codes = levels.codes[levels.level_of_value[np.asarray(images, dtype=np.intp)]]
    return _planes(codes).astype(dtype)
