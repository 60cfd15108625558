"""Classification, consistency and embedding-smoothness losses.

Loss values are reduced in float64.  Functions named ``*_grad`` return the
value together with the gradient w.r.t. their logits (or table) input, ready
to feed :meth:`p2be.numgraph.Graph.backward`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PROB_FLOOR = 1e-12
NORM_EPS = 1e-12


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 12.0
    smooth_lambda: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "smooth_lambda"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _check_labels(labels, k):
    labels = np.asarray(labels)
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    return labels.astype(np.intp)


def cross_entropy(logits: np.ndarray, labels) -> float:
    """Batch-mean cross entropy of integer labels under softmax(logits)."""
    logits = np.atleast_2d(logits)
    labels = _check_labels(np.atleast_1d(labels), logits.shape[1])
    lsm = log_softmax(logits)
    return float(-lsm[np.arange(len(labels)), labels].mean())


def per_sample_cross_entropy(logits: np.ndarray, labels) -> np.ndarray:
    logits = np.atleast_2d(logits)
    labels = _check_labels(np.atleast_1d(labels), logits.shape[1])
    return -log_softmax(logits)[np.arange(len(labels)), labels]


def cross_entropy_grad(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    logits = np.atleast_2d(logits)
    labels = _check_labels(np.atleast_1d(labels), logits.shape[1])
    n = len(labels)
    value = cross_entropy(logits, labels)
    g = softmax(logits)
    g[np.arange(n), labels] -= 1.0
    return value, g / n


def _check_dist(p, name):
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0):
        raise ValueError(f"{name} has negative entries")
    if not np.allclose(p.sum(axis=-1), 1.0, atol=1e-5):
        raise ValueError(f"{name} does not sum to 1")
    return p


def _kl_rows(p, q):
    q = np.maximum(q, PROB_FLOOR)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(np.maximum(p, PROB_FLOOR)) - np.log(q)), 0.0)
    return terms.sum(axis=-1)


def kl_divergence(p, q) -> float:
    """KL(p || q) with ``0 log 0 = 0``; batched inputs are averaged."""
    p = _check_dist(p, "p")
    q = _check_dist(q, "q")
    return float(np.mean(_kl_rows(p, q)))


def _jsd(dists) -> float:
    mix = sum(dists) / len(dists)
    per = sum(_kl_rows(p, mix) for p in dists) / len(dists)
    return float(np.mean(per))


def augmix_jsd(p, p1, p2) -> float:
    """Three-way Jensen-Shannon consistency between clean and two augmented views."""
    return _jsd([_check_dist(p, "p"), _check_dist(p1, "p1"), _check_dist(p2, "p2")])


def contrain_jsd(p, p_adv) -> float:
    """Two-way Jensen-Shannon consistency between clean and adversarial predictions."""
    return _jsd([_check_dist(p, "p"), _check_dist(p_adv, "p_adv")])


def jsd_grad(logit_list: list[np.ndarray]) -> tuple[float, list[np.ndarray]]:
    """Value and per-branch logit gradients of the n-way JSD (batch mean).

    With mixture ``V``, ``d/dp_i = (log p_i - log V) / n``, chained through
    each branch's softmax.
    """
    probs = [softmax(z) for z in logit_list]
    n = len(probs)
    batch = probs[0].shape[0]
    mix = sum(probs) / n
    value = float(np.mean(sum(_kl_rows(p, mix) for p in probs) / n))
    log_mix = np.log(np.maximum(mix, PROB_FLOOR))
    grads = []
    for p in probs:
        gp = (np.log(np.maximum(p, PROB_FLOOR)) - log_mix) / (n * batch)
        grads.append(p * (gp - (gp * p).sum(axis=1, keepdims=True)))
    return value, grads


def neighbor_cosines(table: np.ndarray) -> np.ndarray:
    """Cosine similarity of each adjacent pair of table rows (255 values)."""
    w = np.asarray(table, dtype=np.float64)
    a, b = w[:-1], w[1:]
    na, nb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
    return (a * b).sum(axis=1) / (na * nb + NORM_EPS)


def smoothness_loss(table: np.ndarray) -> tuple[float, np.ndarray]:
    """Sum over adjacent rows of ``1 - cos(w_k, w_{k+1})`` and its exact gradient."""
    w = np.asarray(table, dtype=np.float64)
    a, b = w[:-1], w[1:]
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    dot = (a * b).sum(axis=1)
    den = na * nb + NORM_EPS
    value = float(np.sum(1.0 - dot / den))
    # d(dot/den)/da = b/den - dot * nb * a / (na * den^2), guarded for zero rows
    safe_na = np.where(na > 0, na, 1.0)
    safe_nb = np.where(nb > 0, nb, 1.0)
    coef = dot / den ** 2
    da = b / den[:, None] - (coef * nb / safe_na)[:, None] * a
    db = a / den[:, None] - (coef * na / safe_nb)[:, None] * b
    grad = np.zeros_like(w)
    grad[:-1] -= da
    grad[1:] -= db
    return value, grad


def total_loss(mode: str, ce: float, consistency: float, smooth: float,
               weights: LossWeights) -> dict[str, float]:
    """Weighted objective ``ce + alpha*consistency + lambda*smooth``.

    ``mode`` is ``"clean-consistency"`` (three-way augmentation JSD) or
    ``"adversarial-consistency"`` (two-way clean/adversarial JSD); both share
    the same composition and the components are echoed for logging.
    """
    if mode not in ("clean-consistency", "adversarial-consistency", "advtrain"):
        raise ValueError(f"unknown loss mode {mode!r}")
    total = ce + weights.alpha * consistency + weights.smooth_lambda * smooth
    return {"L_ce": ce, "L_consistency": consistency, "L_smooth": smooth, "L_total": total}
