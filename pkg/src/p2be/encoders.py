"""Pixel-to-binary encoders: one-hot, thermometer and learnable embeddings.

Every encoder boils down to a codebook, a ``[256, M]`` array whose row ``k``
is the code of pixel magnitude ``k``.  Encoding an image ``[3, H, W]`` gives a
bit-plane tensor ``[3M, H, W]`` in which channel ``M*c + m`` holds bit ``m``
of input channel ``c``.
"""

from __future__ import annotations

import warnings

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .validation import check_images

N_LEVELS = 256


def _bucket(x, dim: int):
    # integer form of (i-1)/M <= x/255 < i/M, with 255 folded into the top bucket
    return np.minimum(np.asarray(x, dtype=np.int64) * dim // 255, dim - 1)


def encode_one_hot(x: int, dim: int) -> np.ndarray:
    """One-hot bucket code of a pixel value in ``[0, 255]``."""
    if dim < 1:
        raise ValueError("dim must be >= 1")
    code = np.zeros(dim, dtype=np.uint8)
    code[_bucket(x, dim)] = 1
    return code


def encode_thermometer(x: int, dim: int) -> np.ndarray:
    """Thermometer code: bit ``i`` (1-based) is set iff ``x/255 < i/M``.

    ``x = 255`` sets only the last bit, like every value in the top bucket.
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    return (np.arange(dim) >= _bucket(x, dim)).astype(np.uint8)


def one_hot_codebook(dim: int) -> np.ndarray:
    if dim < 1:
        raise ValueError("dim must be >= 1")
    book = np.zeros((N_LEVELS, dim), dtype=np.uint8)
    book[np.arange(N_LEVELS), _bucket(np.arange(N_LEVELS), dim)] = 1
    return book


def thermometer_codebook(dim: int) -> np.ndarray:
    if dim < 1:
        raise ValueError("dim must be >= 1")
    return (np.arange(dim)[None, :] >= _bucket(np.arange(N_LEVELS), dim)[:, None]).astype(np.uint8)


def binarize_table(table: np.ndarray) -> np.ndarray:
    """``e = (sign(w) + 1) / 2`` with ``sign(0) = +1``; returns uint8 codes."""
    table = np.asarray(table)
    if table.ndim != 2 or table.shape[0] != N_LEVELS:
        raise ValueError(f"embedding table must be [256, M], got {list(table.shape)}")
    if not np.all(np.isfinite(table)):
        raise ValueError("embedding table contains non-finite entries")
    return (table >= 0).astype(np.uint8)


def approx_sign(x):
    """Piecewise-quadratic approximation of sign, continuous on R."""
    x = np.asarray(x, dtype=np.float64)
    return np.where(x < -1, -1.0,
                    np.where(x < 0, 2 * x + x * x,
                             np.where(x < 1, 2 * x - x * x, 1.0)))


def approx_sign_derivative(x):
    """Surrogate derivative of sign: 2+2x on [-1,0), 2-2x on [0,1), else 0."""
    x = np.asarray(x, dtype=np.float64)
    return np.where((x >= -1) & (x < 0), 2 + 2 * x,
                    np.where((x >= 0) & (x < 1), 2 - 2 * x, 0.0))


def embed_images(images: np.ndarray, codebook: np.ndarray, dtype=np.float32) -> np.ndarray:
    """Map ``[N, 3, H, W]`` (or a single ``[3, H, W]``) pixel images to bit planes.

    Works with any ``[256, M]`` codebook, including soft (real-valued) ones.
    """
    images = np.asarray(images)
    single = images.ndim == 3
    if single:
        images = images[None]
    codebook = np.asarray(codebook)
    n, c, h, w = images.shape
    dim = codebook.shape[1]
    # codes[n, c, h, w, m] -> [n, c, m, h, w] -> [n, c*M, h, w]
    out = codebook.astype(dtype, copy=False)[images.astype(np.intp)]
    out = np.ascontiguousarray(out.transpose(0, 1, 4, 2, 3)).reshape(n, c * dim, h, w)
    return out[0] if single else out


def p2be_backward(images: np.ndarray, upstream: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Gradient of the loss w.r.t. the real embedding table.

    For each pixel occurrence ``x = image[c, h, w]`` and bit ``m``::

        dW[x, m] += 0.5 * upstream[M*c + m, h, w] * approx_sign'(W[x, m])

    Accumulation is sequential in pixel order (``np.add.at``), so results are
    reproducible for a fixed batch.
    """
    images = np.asarray(images)
    upstream = np.asarray(upstream)
    if images.ndim == 3:
        images, upstream = images[None], upstream[None]
    table = np.asarray(table)
    n, c, h, w = images.shape
    dim = table.shape[1]
    if upstream.shape != (n, c * dim, h, w):
        raise ValueError(f"upstream shape {list(upstream.shape)} != {[n, c * dim, h, w]}")
    # [n, c*M, h, w] -> rows aligned with pixels: [n*c*h*w, M]
    g = upstream.reshape(n, c, dim, h, w).transpose(0, 1, 3, 4, 2).reshape(-1, dim)
    summed = np.zeros((N_LEVELS, dim), dtype=np.float64)
    np.add.at(summed, images.reshape(-1).astype(np.intp), g.astype(np.float64))
    return 0.5 * summed * approx_sign_derivative(table)


def cosine_similarity_matrix(codebook: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarity of codebook rows; zero-norm rows give 0."""
    e = np.asarray(codebook, dtype=np.float64)
    norms = np.linalg.norm(e, axis=1)
    zero = norms == 0
    if zero.any():
        warnings.warn(f"{int(zero.sum())} zero-norm codebook rows; similarity set to 0",
                      RuntimeWarning, stacklevel=2)
    safe = np.where(zero, 1.0, norms)
    unit = e / safe[:, None]
    sim = unit @ unit.T
    sim[zero, :] = 0.0
    sim[:, zero] = 0.0
    sim = 0.5 * (sim + sim.T)
    np.fill_diagonal(sim, np.where(zero, 0.0, 1.0))
    return np.clip(sim, -1.0, 1.0)


def init_table(dim: int, rng: np.random.Generator) -> np.ndarray:
    """Standard-normal initialization of the learnable ``[256, M]`` table."""
    return rng.standard_normal((N_LEVELS, dim)).astype(np.float32)


# -- estimator wrappers ---------------------------------------------------

class _CodebookEncoder(TransformerMixin, BaseEstimator):
    """Shared ``transform`` for encoders backed by a fixed codebook."""

    def fit(self, X=None, y=None):
        if X is not None:
            check_images(X)
        self.codebook_ = self._make_codebook()
        self.n_channels_out_ = 3 * self.dim
        return self

    def transform(self, X):
        check_is_fitted(self, "codebook_")
        return embed_images(check_images(X), self.codebook_)


class OneHotEncoder(_CodebookEncoder):
    """Bucket each pixel magnitude into one of ``dim`` one-hot slots."""

    def __init__(self, dim: int = 64):
        self.dim = dim

    def _make_codebook(self):
        return one_hot_codebook(self.dim)


class ThermometerEncoder(_CodebookEncoder):
    """Thermometer encoding with ``dim`` levels."""

    def __init__(self, dim: int = 64):
        self.dim = dim

    def _make_codebook(self):
        return thermometer_codebook(self.dim)


class PixelBinaryEmbedding(_CodebookEncoder):
    """Learnable binary embedding of pixel magnitudes.

    ``fit`` draws the real table from N(0, 1) unless ``table`` is given.  The
    codebook is the sign of the table and is refreshed by :meth:`set_table`.

    Parameters
    ----------
    dim : int
        Bits per pixel magnitude.
    random_state : int or None
        Seed for the table initialization.
    table : array of shape (256, dim), optional
        Pre-trained table, e.g. imported from another run.
    """

    def __init__(self, dim: int = 64, random_state=None, table=None):
        self.dim = dim
        self.random_state = random_state
        self.table = table

    def fit(self, X=None, y=None):
        if X is not None:
            check_images(X)
        if self.table is not None:
            table = np.asarray(self.table, dtype=np.float32)
            if table.shape != (N_LEVELS, self.dim):
                raise ValueError(f"table shape {list(table.shape)} != [256, {self.dim}]")
        else:
            table = init_table(self.dim, np.random.default_rng(self.random_state))
        self.set_table(table)
        self.n_channels_out_ = 3 * self.dim
        return self

    def set_table(self, table: np.ndarray) -> None:
        self.table_ = np.array(table, dtype=np.float32)
        self.codebook_ = binarize_table(self.table_)

    def backward(self, X, upstream):
        """Table gradient for a batch given dL/d(bit planes)."""
        check_is_fitted(self, "table_")
        return p2be_backward(check_images(X), upstream, self.table_)


def make_encoder(name: str, dim: int, random_state=None, table=None):
    """Encoder factory; ``"rgb"`` returns None (inputs are scaled to [0,1])."""
    if name == "rgb":
        return None
    if name == "one-hot":
        return OneHotEncoder(dim)
    if name == "thermometer":
        return ThermometerEncoder(dim)
    if name == "p2be":
        return PixelBinaryEmbedding(dim, random_state=random_state, table=table)
    raise ValueError(f"unknown encoder {name!r}; expected rgb, one-hot, thermometer or p2be")


def level_codebook(encoder: str, dim: int, codebook: np.ndarray | None = None):
    """Discrete levels used by the attack: ``(level_of_value[256], codes[L, D])``.

    Hand-coded encoders collapse magnitudes into ``dim`` buckets; the learnable
    embedding and raw RGB keep all 256 magnitudes as levels.
    """
    values = np.arange(N_LEVELS)
    if encoder == "rgb":
        return values, (values / 255.0)[:, None]
    if encoder in ("one-hot", "thermometer"):
        levels = _bucket(values, dim)
        book = one_hot_codebook(dim) if encoder == "one-hot" else thermometer_codebook(dim)
        first = np.searchsorted(levels, np.arange(dim))
        return levels, book[first].astype(np.float64)
    if encoder == "p2be":
        if codebook is None:
            raise ValueError("p2be levels need the binary codebook")
        return values, np.asarray(codebook, dtype=np.float64)
    raise ValueError(f"unknown encoder {encoder!r}")
