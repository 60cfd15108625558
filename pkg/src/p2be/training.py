"""Desk-scale training and evaluation.

The network is trained with momentum SGD under a cosine learning-rate
schedule; the learnable embedding table (``encoder="p2be"``) has its own
AdamW optimizer with a constant learning rate.  Three objectives are
supported:

* ``clean-consistency``: cross entropy on clean images plus a three-way JSD
  between clean and two augmented views;
* ``adversarial-consistency``: cross entropy plus a two-way JSD between clean
  and LS-PGA adversarial views;
* ``advtrain``: cross entropy on adversarial images only.

All three add ``smooth_lambda * L_smooth`` when the table is trainable.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
import warnings
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import losses
from .attack import AttackConfig, LevelCodebook, lspga_attack
from .corruptions import CorruptionSpec, apply_corruption, corrupt
from .encoders import (binarize_table, embed_images, init_table, level_codebook,
                       one_hot_codebook, p2be_backward, thermometer_codebook)
from .numgraph import Graph, toy_cnn

logger = logging.getLogger(__name__)

ENCODERS = ("rgb", "one-hot", "thermometer", "p2be")
MODES = ("clean-consistency", "adversarial-consistency", "advtrain")


def rng_stream(seed: int, label: str) -> np.random.Generator:
    """Independent generator derived from the run seed and a fixed label."""
    return np.random.default_rng([int(seed), zlib.crc32(label.encode())])


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    lr_start: float = 0.05
    lr_end: float = 1e-5
    net_momentum: float = 0.9
    net_weight_decay: float = 5e-4
    emb_lr: float = 1e-4
    emb_beta1: float = 0.999
    emb_beta2: float = 0.999
    emb_weight_decay: float = 1e-4
    dim: int = 64
    alpha: float = 12.0
    smooth_lambda: float = 1.0
    mode: str = "clean-consistency"
    encoder: str = "p2be"
    freeze_embedding: bool = False
    widths: tuple[int, int] = (16, 32)
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        errors = []
        if self.epochs < 0:
            errors.append("epochs: must be >= 0")
        if self.batch_size < 1:
            errors.append("batch_size: must be >= 1")
        for name in ("lr_start", "lr_end", "emb_lr"):
            if not getattr(self, name) > 0:
                errors.append(f"{name}: must be > 0")
        for name in ("net_momentum", "emb_beta1", "emb_beta2"):
            if not 0 <= getattr(self, name) < 1:
                errors.append(f"{name}: must lie in [0, 1)")
        for name in ("net_weight_decay", "emb_weight_decay", "alpha", "smooth_lambda"):
            if not getattr(self, name) >= 0:
                errors.append(f"{name}: must be >= 0")
        if not 1 <= self.dim <= 256:
            errors.append("dim: must lie in [1, 256]")
        if self.mode not in MODES:
            errors.append(f"mode: must be one of {', '.join(MODES)}")
        if self.encoder not in ENCODERS:
            errors.append(f"encoder: must be one of {', '.join(ENCODERS)}")
        if len(self.widths) != 2 or min(self.widths) < 1:
            errors.append("widths: must be two positive integers")
        if errors:
            raise ValueError("; ".join(errors))

    @property
    def in_channels(self) -> int:
        return 3 if self.encoder == "rgb" else 3 * self.dim

    @property
    def trains_table(self) -> bool:
        return self.encoder == "p2be" and not self.freeze_embedding


# -- optimizers -------------------------------------------------------------

def cosine_lr(step: int, total_steps: int, lr_start: float, lr_end: float) -> float:
    if total_steps <= 0:
        return lr_start
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr_end + 0.5 * (lr_start - lr_end) * (1 + math.cos(math.pi * step / total_steps))


def sgd_momentum_step(params: dict, grads: dict, state: dict, lr: float, momentum: float,
                      weight_decay: float) -> None:
    """In place: ``v = mu v + g + wd p``; ``p -= lr v``."""
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {list(g.shape)} != {list(p.shape)}")
        v = state.get(name)
        if v is None:
            v = state[name] = np.zeros_like(p)
        v *= momentum
        v += g + weight_decay * p
        p -= p.dtype.type(lr) * v


@dataclass
class AdamWState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros_like(cls, table):
        return cls(np.zeros_like(table), np.zeros_like(table), 0)


def adamw_step(table: np.ndarray, grad: np.ndarray, state: AdamWState, lr: float,
               beta1: float, beta2: float, weight_decay: float, eps: float = 1e-8) -> None:
    """In-place AdamW with bias correction and decoupled weight decay."""
    if grad.shape != table.shape:
        raise ValueError(f"gradient shape {list(grad.shape)} != {list(table.shape)}")
    state.step += 1
    g = grad.astype(np.float64)
    m = beta1 * state.m.astype(np.float64) + (1 - beta1) * g
    v = beta2 * state.v.astype(np.float64) + (1 - beta2) * g * g
    m_hat = m / (1 - beta1 ** state.step)
    v_hat = v / (1 - beta2 ** state.step)
    w = table.astype(np.float64)
    w = w - lr * weight_decay * w
    w = w - lr * m_hat / (np.sqrt(v_hat) + eps)
    table[...] = w
    state.m[...] = m
    state.v[...] = v


# -- augmentation -----------------------------------------------------------

def _roll_each(x, dy, dx):
    n, c, h, w = x.shape
    rows = (np.arange(h)[None, :] - dy[:, None]) % h
    cols = (np.arange(w)[None, :] - dx[:, None]) % w
    return x[np.arange(n)[:, None, None, None], np.arange(c)[None, :, None, None],
             rows[:, None, :, None], cols[:, None, None, :]]


def _apply_ops(x, ops, active, rng):
    n, _, h, w = x.shape
    # parameters are drawn for every image so the stream does not depend on op choice
    offset = rng.integers(-40, 41, size=n)
    factor = rng.uniform(0.5, 1.0, size=n)
    frac = rng.uniform(0.0, 0.25, size=n)
    shift = rng.integers(-2, 3, size=(2, n))
    out = x.copy()
    sel = active & (ops == 0)
    out[sel] = np.clip(x[sel].astype(np.int64) + offset[sel, None, None, None], 0, 255)
    sel = active & (ops == 1)
    if sel.any():
        xs = x[sel].astype(np.float64)
        mean = xs.mean(axis=(2, 3), keepdims=True)
        f = factor[sel, None, None, None]
        out[sel] = np.clip(np.rint(mean + f * (xs - mean)), 0, 255)
    sel = active & (ops == 2)
    if sel.any():
        nh = np.floor(h * (1 - frac) + 1e-9).astype(int)
        nw = np.floor(w * (1 - frac) + 1e-9).astype(int)
        for size in sorted(set(zip(nh[sel], nw[sel]))):
            grp = sel & (nh == size[0]) & (nw == size[1])
            out[grp] = corrupt(x[grp], "pixelate", float(frac[grp][0]))
    sel = active & (ops == 3)
    if sel.any():
        out[sel] = _roll_each(x[sel], shift[0][sel], shift[1][sel])
    return out


def augment(images: np.ndarray, rng: np.random.Generator, width: int = 3, max_depth: int = 3):
    """Per-image mixture of random operation chains blended with the original.

    Operations: brightness shift, contrast reduction, mild pixelation and
    cyclic translation by up to two pixels.
    """
    images = np.asarray(images, dtype=np.uint8)
    n = len(images)
    weights = rng.dirichlet(np.ones(width), size=n)
    mix = np.zeros(images.shape, dtype=np.float64)
    for c in range(width):
        depth = rng.integers(1, max_depth + 1, size=n)
        cur = images
        for d in range(max_depth):
            cur = _apply_ops(cur, rng.integers(4, size=n), depth > d, rng)
        mix += weights[:, c, None, None, None] * cur
    m = rng.beta(1.0, 1.0, size=n)[:, None, None, None]
    return np.clip(np.rint(m * images + (1 - m) * mix), 0, 255).astype(np.uint8)


# -- model ------------------------------------------------------------------

@dataclass
class EncodedModel:
    """Encoder + CNN pair operating on uint8 images."""

    encoder: str
    dim: int
    graph: Graph
    table: np.ndarray | None = None
    _codebook: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.refresh_codebook()

    def refresh_codebook(self) -> None:
        if self.encoder == "p2be":
            self._codebook = binarize_table(self.table)
        elif self.encoder == "one-hot":
            self._codebook = one_hot_codebook(self.dim)
        elif self.encoder == "thermometer":
            self._codebook = thermometer_codebook(self.dim)
        else:
            self._codebook = None

    @property
    def codebook(self) -> np.ndarray | None:
        return self._codebook

    def encode(self, images: np.ndarray) -> np.ndarray:
        if self.encoder == "rgb":
            return (np.asarray(images, dtype=np.float32) / np.float32(255.0))
        return embed_images(images, self._codebook, dtype=self.graph.dtype)

    def levels(self) -> LevelCodebook:
        return LevelCodebook(*level_codebook(self.encoder, self.dim, self._codebook))

    def logits(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        return np.concatenate([self.graph.forward(self.encode(images[i:i + batch_size]))
                               for i in range(0, len(images), batch_size)])

    def predict(self, images: np.ndarray) -> np.ndarray:
        return self.logits(images).argmax(axis=1)

    def error(self, images: np.ndarray, labels: np.ndarray) -> float:
        return float(np.mean(self.predict(images) != labels))


def build_model(config: TrainConfig, n_classes: int, size: tuple[int, int],
                table: np.ndarray | None = None) -> EncodedModel:
    graph = toy_cnn(config.in_channels, n_classes, size[0], size[1],
                    seed=int(rng_stream(config.seed, "net-init").integers(2**31)),
                    widths=config.widths)
    if config.encoder == "p2be":
        if table is None:
            table = init_table(config.dim, rng_stream(config.seed, "embedding-init"))
        table = np.array(table, dtype=np.float32)
        if table.shape != (256, config.dim):
            raise ValueError(f"embedding table shape {list(table.shape)} != [256, {config.dim}]")
    else:
        table = None
    return EncodedModel(config.encoder, config.dim, graph, table)


# -- checkpoints ------------------------------------------------------------

MAGIC = b"P2BE"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict
    meta: dict
    params: dict[str, np.ndarray]
    table: np.ndarray | None = None
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)

    def model(self) -> EncodedModel:
        cfg = TrainConfig(**_config_from_json(self.config))
        m = build_model(cfg, self.meta["n_classes"], tuple(self.meta["size"]), self.table)
        m.graph.set_params(self.params)
        return m


def _config_from_json(d: dict) -> dict:
    d = dict(d)
    if "widths" in d:
        d["widths"] = tuple(d["widths"])
    return d


def _tensor_bytes(a: np.ndarray) -> bytes:
    a = np.ascontiguousarray(a, dtype="<f4")
    return struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape) + a.tobytes()


def _tensor_from(buf: bytes) -> np.ndarray:
    ndim = buf[0]
    shape = struct.unpack_from(f"<{ndim}I", buf, 1)
    start = 1 + 4 * ndim
    data = np.frombuffer(buf, dtype="<f4", offset=start)
    if data.size != math.prod(shape):
        raise CheckpointError("tensor section size does not match its shape")
    return data.reshape(shape).astype(np.float32)


def _json_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    """Serialize: magic, u16 version, sections, trailing CRC32 of the sections."""
    sections: list[tuple[str, int, bytes]] = [
        ("config", 0, _json_bytes(ckpt.config)),
        ("meta", 0, _json_bytes(ckpt.meta)),
    ]
    sections += [(f"param/{k}", 1, _tensor_bytes(v)) for k, v in sorted(ckpt.params.items())]
    if ckpt.table is not None:
        sections.append(("embedding", 1, _tensor_bytes(ckpt.table)))
    sections += [(f"opt/{k}", 1, _tensor_bytes(v)) for k, v in sorted(ckpt.optimizer.items())]
    payload = bytearray(struct.pack("<I", len(sections)))
    for name, kind, body in sections:
        raw = name.encode()
        payload += struct.pack("<H", len(raw)) + raw + struct.pack("<BQ", kind, len(body)) + body
    return MAGIC + struct.pack("<H", FORMAT_VERSION) + bytes(payload) + struct.pack(
        "<I", zlib.crc32(payload))


def parse_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < 6 + 4 + 4 or data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic or truncated header)")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    payload, (crc,) = data[6:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(payload) != crc:
        raise CheckpointError("checksum mismatch: checkpoint is corrupt or truncated")
    (count,) = struct.unpack_from("<I", payload, 0)
    pos = 4
    parts: dict[str, object] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", payload, pos)
            name = payload[pos + 2:pos + 2 + nlen].decode()
            pos += 2 + nlen
            kind, blen = struct.unpack_from("<BQ", payload, pos)
            pos += 9
            body = payload[pos:pos + blen]
            if len(body) != blen:
                raise CheckpointError(f"section {name!r} truncated")
            pos += blen
            parts[name] = json.loads(body) if kind == 0 else _tensor_from(body)
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    if pos != len(payload) or "config" not in parts or "meta" not in parts:
        raise CheckpointError("malformed checkpoint layout")
    return Checkpoint(
        config=parts["config"], meta=parts["meta"],
        params={k[6:]: v for k, v in parts.items() if k.startswith("param/")},
        table=parts.get("embedding"),
        optimizer={k[4:]: v for k, v in parts.items() if k.startswith("opt/")},
    )


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())


# -- training ---------------------------------------------------------------

METRIC_COLUMNS = ("epoch", "lr", "L_ce", "L_consistency", "L_smooth", "train_acc", "clean_test_err")
STEP_COLUMNS = ("step", "L_ce", "L_consistency", "L_smooth", "L_total")


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    model: EncodedModel
    metrics: list[dict] = field(default_factory=list)
    steps: list[dict] = field(default_factory=list)


def _snapshot(config, model, n_classes, size, step, velocity, adam):
    opt = {f"net.velocity/{k}": v.copy() for k, v in velocity.items()}
    meta = {"encoder": config.encoder, "dim": config.dim, "n_classes": n_classes,
            "size": list(size), "step": step}
    if adam is not None:
        opt["emb.m"] = adam.m.copy()
        opt["emb.v"] = adam.v.copy()
        meta["emb_step"] = adam.step
    cfg = asdict(config)
    cfg["widths"] = list(config.widths)
    return Checkpoint(cfg, meta, model.graph.get_params(),
                      None if model.table is None else model.table.copy(), opt)


def train(config: TrainConfig, images: np.ndarray, labels: np.ndarray,
          test_images: np.ndarray | None = None, test_labels: np.ndarray | None = None,
          attack: AttackConfig | None = None, table: np.ndarray | None = None,
          n_classes: int | None = None) -> TrainResult:
    """Train the encoder + CNN pair; deterministic given ``config.seed``.

    ``table`` imports a pre-trained embedding table (set
    ``config.freeze_embedding`` to keep it fixed).
    """
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise ValueError("empty training set")
    n_classes = int(n_classes or labels.max() + 1)
    size = images.shape[2:]
    if config.mode != "clean-consistency" and attack is None:
        attack = AttackConfig()
    if config.encoder == "p2be" and config.mode == "advtrain":
        warnings.warn("the learnable embedding is known to fail to learn under adversarial-only "
                      "training", RuntimeWarning, stacklevel=2)
    if config.freeze_embedding and config.encoder != "p2be":
        warnings.warn("freeze_embedding has no effect without the p2be encoder",
                      RuntimeWarning, stacklevel=2)

    model = build_model(config, n_classes, size, table)
    graph = model.graph
    velocity: dict[str, np.ndarray] = {}
    adam = AdamWState.zeros_like(model.table) if config.trains_table else None
    weights = losses.LossWeights(config.alpha, config.smooth_lambda)
    use_smooth = config.trains_table and config.smooth_lambda > 0

    order_rng = rng_stream(config.seed, "batch-order")
    aug_rng = rng_stream(config.seed, "augment")
    atk_rng = rng_stream(config.seed, "attack")
    steps_per_epoch = math.ceil(len(images) / config.batch_size)
    total = steps_per_epoch * config.epochs
    result = TrainResult(None, model)
    step = 0
    for epoch in range(1, config.epochs + 1):
        perm = order_rng.permutation(len(images))
        sums = {"L_ce": 0.0, "L_consistency": 0.0, "L_smooth": 0.0}
        correct = 0
        lr = config.lr_start
        for start in range(0, len(images), config.batch_size):
            idx = perm[start:start + config.batch_size]
            x, y = images[idx], labels[idx]
            b = len(idx)
            if config.mode == "clean-consistency":
                views = [x, augment(x, aug_rng), augment(x, aug_rng)]
            else:
                x_adv, _ = lspga_attack(graph, model.levels(), x, y, attack,
                                        seed=int(atk_rng.integers(2**31)))
                views = [x, x_adv] if config.mode == "adversarial-consistency" else [x_adv]
            batch = np.concatenate(views)
            logits = graph.forward(model.encode(batch))
            chunks = [logits[i * b:(i + 1) * b] for i in range(len(views))]
            ce, dce = losses.cross_entropy_grad(chunks[0], y)
            dlogits = [dce] + [np.zeros_like(c, dtype=np.float64) for c in chunks[1:]]
            cons = 0.0
            if len(views) > 1 and config.alpha > 0:
                cons, gj = losses.jsd_grad(chunks)
                dlogits = [d + config.alpha * g for d, g in zip(dlogits, gj)]
            grads = graph.backward(np.concatenate(dlogits))
            smooth = 0.0
            if config.encoder == "p2be":
                smooth, gsmooth = losses.smoothness_loss(model.table)
            parts = losses.total_loss(config.mode, ce, cons, smooth if use_smooth else 0.0, weights)
            lr = cosine_lr(step, total, config.lr_start, config.lr_end)
            params = graph.params
            sgd_momentum_step(params, {k: grads[k] for k in params}, velocity, lr,
                              config.net_momentum, config.net_weight_decay)
            if config.trains_table:
                gtab = p2be_backward(batch, grads["input"], model.table)
                if use_smooth:
                    gtab = gtab + config.smooth_lambda * gsmooth
                adamw_step(model.table, gtab, adam, config.emb_lr, config.emb_beta1,
                           config.emb_beta2, config.emb_weight_decay)
                model.refresh_codebook()
            correct += int((chunks[0].argmax(axis=1) == y).sum())
            sums["L_ce"] += ce * b
            sums["L_consistency"] += cons * b
            sums["L_smooth"] += smooth * b
            step += 1
            result.steps.append({"step": step, "L_ce": ce, "L_consistency": cons,
                                 "L_smooth": smooth, "L_total": parts["L_total"]})
        row = {"epoch": epoch, "lr": lr, **{k: v / len(images) for k, v in sums.items()},
               "train_acc": correct / len(images), "clean_test_err": ""}
        if test_images is not None:
            row["clean_test_err"] = model.error(test_images, test_labels)
        result.metrics.append(row)
        logger.info("epoch %d lr %.5f ce %.4f cons %.4f smooth %.3f acc %.3f", epoch, lr,
                    row["L_ce"], row["L_consistency"], row["L_smooth"], row["train_acc"])
    result.checkpoint = _snapshot(config, model, n_classes, size, step, velocity, adam)
    return result


def write_csv(path, rows: list[dict], columns) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in columns])


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


# -- evaluation -------------------------------------------------------------

@dataclass
class EvalResult:
    clean_error: float
    corrupted: dict[tuple[str, int], float] = field(default_factory=dict)
    attacked_error: float | None = None
    clean_correct: np.ndarray | None = None
    adv_correct: np.ndarray | None = None
    attack_trace: np.ndarray | None = None


def evaluate(model: EncodedModel, images: np.ndarray, labels: np.ndarray,
             corruptions: list[CorruptionSpec] | None = None,
             attack: AttackConfig | None = None, seed: int = 0,
             encoder: str | None = None) -> EvalResult:
    """Clean, per-corruption and (optionally) LS-PGA attacked test error."""
    if encoder is not None and encoder != model.encoder:
        raise ValueError(f"checkpoint encoder {model.encoder!r} does not match requested {encoder!r}")
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels)
    pred = model.predict(images)
    res = EvalResult(float(np.mean(pred != labels)), clean_correct=pred == labels)
    for spec in corruptions or []:
        cseed = int(rng_stream(seed, f"corrupt/{spec.kind}/{spec.severity}").integers(2**31))
        res.corrupted[(spec.kind, spec.severity)] = model.error(
            apply_corruption(images, spec, cseed), labels)
    if attack is not None:
        adv, trace = lspga_attack(model.graph, model.levels(), images, labels, attack,
                                  seed=int(rng_stream(seed, "eval-attack").integers(2**31)))
        adv_pred = model.predict(adv)
        res.adv_correct = adv_pred == labels
        res.attacked_error = float(np.mean(~res.adv_correct))
        res.attack_trace = trace
    return res


def config_fields() -> list[str]:
    return [f.name for f in fields(TrainConfig)]


__all__ = [
    "TrainConfig", "cosine_lr", "sgd_momentum_step", "adamw_step", "AdamWState", "augment",
    "EncodedModel", "build_model", "Checkpoint", "CheckpointError", "checkpoint_bytes",
    "parse_checkpoint", "save_checkpoint", "load_checkpoint", "train", "TrainResult",
    "evaluate", "EvalResult", "rng_stream", "write_csv",
]
