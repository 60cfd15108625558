"""Binary PPM (P6) / PGM (P5) reading and writing, plus a PPM-directory loader."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np


def _tokens(data: bytes, count: int) -> tuple[list[int], int]:
    vals, pos = [], 2
    while len(vals) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated image header")
        vals.append(int(data[start:pos]))
    return vals, pos + 1  # single whitespace byte before raster


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM into a uint8 ``[3, H, W]`` array."""
    data = Path(path).read_bytes()
    if data[:2] != b"P6":
        raise ValueError(f"{path}: not a binary PPM (P6) file")
    (w, h, maxval), pos = _tokens(data, 3)
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported")
    raster = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos)
    return raster.reshape(h, w, 3).transpose(2, 0, 1).copy()


def write_ppm(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.uint8)
    _, h, w = image.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + image.transpose(1, 2, 0).tobytes())


def write_pgm(path, gray: np.ndarray) -> None:
    gray = np.asarray(gray, dtype=np.uint8)
    h, w = gray.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + gray.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:2] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    (w, h, _), pos = _tokens(data, 3)
    return np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w).copy()


def load_ppm_dir(directory, labels_csv: str = "labels.csv") -> tuple[np.ndarray, np.ndarray]:
    """Load ``<dir>/labels.csv`` (columns ``filename,label``) and its PPM images."""
    directory = Path(directory)
    images, labels = [], []
    with open(directory / labels_csv, newline="") as fh:
        for row in csv.DictReader(fh):
            images.append(read_ppm(directory / row["filename"]))
            labels.append(int(row["label"]))
    if not images:
        raise ValueError(f"{directory}: no images listed in {labels_csv}")
    if len({im.shape for im in images}) != 1:
        raise ValueError(f"{directory}: images have differing sizes")
    return np.stack(images), np.asarray(labels, dtype=np.int64)
