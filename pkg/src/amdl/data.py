"""Labeled image containers, synthetic domains and preprocessing.

Synthetic domains are drawn from numpy's Philox4x64 counter-based
generator. The stream for a split is seeded with
``SeedSequence([seed, kind_index, split_index])`` where kinds are indexed
easy=0, medium=1, hard=2 and splits train=0, val=1, test=2.

AMDS file layout (little endian)::

    b"AMDS"  u16 version
    u32 count  u16 H  u16 W  u16 C  u16 num_classes  u8 split (0 train, 1 val, 2 test)
    u16 provenance_len  provenance (UTF-8)
    count x u16 labels
    count*H*W*C x u8 pixels (NHWC)
    u32 CRC32 of every preceding byte
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ChecksumError, FormatError
from .tensor import Tensor

SPLITS = ("train", "val", "test")
KINDS = ("easy", "medium", "hard")
NUM_CLASSES = {"easy": 2, "medium": 10, "hard": 20}
AMDS_MAGIC = b"AMDS"
AMDS_VERSION = 1


@dataclass(frozen=True)
class DatasetContainer:
    images: np.ndarray  # uint8, (count, H, W, C)
    labels: np.ndarray  # uint16, (count,)
    num_classes: int
    split: str
    provenance: str = ""

    def __post_init__(self):
        if self.images.dtype != np.uint8 or self.images.ndim != 4:
            raise ValueError("images must be a uint8 array of shape (count, H, W, C)")
        if self.labels.dtype != np.uint16 or self.labels.shape != (self.images.shape[0],):
            raise ValueError("labels must be uint16 with one entry per image")
        if self.images.shape[0] == 0:
            raise ValueError("a dataset needs at least one image")
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}")
        if not 0 < self.num_classes < 2**16:
            raise ValueError("num_classes must fit in u16")
        if int(self.labels.max()) >= self.num_classes:
            raise ValueError("label >= num_classes")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])


@dataclass(frozen=True)
class DomainSpec:
    name: str
    num_classes: int
    train: int
    val: int
    test: int
    difficulty: str | None = None

    def __post_init__(self):
        if min(self.train, self.val, self.test) <= 0:
            raise ValueError("split sizes must be positive")


# ---------------------------------------------------------------------------
# Visual Decathlon metadata


_DECATHLON = [
    ("Airc", 100, 3334, 3333, 3333),
    ("C100", 100, 40000, 10000, 10000),
    ("DPed", 2, 23520, 5880, 19600),
    ("DTD", 47, 1880, 1880, 1880),
    ("GTSRB", 43, 31367, 7842, 12630),
    ("ImNet", 1000, 1232167, 49000, 48238),
    ("OGlt", 1623, 19476, 6492, 6492),
    ("SVHN", 10, 47217, 26040, 26032),
    ("UCF", 101, 7629, 1908, 3783),
    ("Flwr", 102, 1020, 1020, 6149),
]


def decathlon_fixture() -> list[DomainSpec]:
    """Class counts and split sizes of the ten Visual Decathlon datasets."""
    return [DomainSpec(*row) for row in _DECATHLON]


# ---------------------------------------------------------------------------
# synthetic generators


def _split_rng(seed: int, kind: str, split: str) -> np.random.Generator:
    ss = np.random.SeedSequence([seed, KINDS.index(kind), SPLITS.index(split)])
    return np.random.Generator(np.random.Philox(ss))


def _balanced_labels(rng, n: int, num_classes: int) -> np.ndarray:
    labels = np.arange(n, dtype=np.int64) % num_classes
    return labels[rng.permutation(n)]


def _grid(size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return yy + 0.5, xx + 0.5


def _render_easy(rng, label: int, size: int) -> np.ndarray:
    # Dominant colour channel (red or green) over a smooth random texture.
    yy, xx = _grid(size)
    img = rng.uniform(0, 70, size=(1, 1, 3)) + rng.normal(0, 12, size=(size, size, 3))
    fx, fy, ph = rng.uniform(0.1, 0.5), rng.uniform(0.1, 0.5), rng.uniform(0, 2 * np.pi)
    wave = 0.5 + 0.5 * np.sin(fx * xx + fy * yy + ph)
    img[:, :, label] += 90 + 60 * wave
    img[:, :, 2] += rng.uniform(0, 60)
    return img


def _render_medium(rng, label: int, size: int) -> np.ndarray:
    # One oriented bar; orientation = label * 18 degrees.
    yy, xx = _grid(size)
    theta = np.deg2rad(label * 18.0 + rng.uniform(-3, 3))
    cy, cx = rng.uniform(0.4, 0.6, size=2) * size
    length = rng.uniform(0.55, 0.8) * size
    width = rng.uniform(2.0, 3.5)
    along = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
    across = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
    mask = (np.abs(along) <= length / 2) & (np.abs(across) <= width / 2)
    bg = rng.uniform(20, 200, size=3)
    fg = rng.uniform(20, 235, size=3)
    while np.abs(fg - bg).max() < 60:
        fg = rng.uniform(20, 235, size=3)
    img = np.where(mask[:, :, None], fg, bg) + rng.normal(0, 18, size=(size, size, 3))
    return img


_ARRANGEMENTS = (0.0, 90.0, 45.0, 135.0)


def _render_hard(rng, label: int, size: int) -> np.ndarray:
    # label = count_index * 4 + arrangement; 2..6 dots placed along a line
    # (horizontal, vertical, two diagonals) with random spacing. Dots are
    # bright on a dark background or dark on a bright one, so the contrast
    # has one sign in every channel.
    yy, xx = _grid(size)
    count = 2 + label // 4
    theta = np.deg2rad(_ARRANGEMENTS[label % 4])
    spacing = min(rng.uniform(5.0, 7.0), 0.8 * size / (count - 1) / max(abs(np.cos(theta)), abs(np.sin(theta))))
    offsets = (np.arange(count) - (count - 1) / 2) * spacing
    half_extent = abs(offsets[0]) * max(abs(np.cos(theta)), abs(np.sin(theta)))
    margin = half_extent + 3
    lo, hi = margin, size - margin
    cx = rng.uniform(lo, hi) if hi > lo else size / 2
    cy = rng.uniform(lo, hi) if hi > lo else size / 2
    dark = rng.uniform() < 0.5
    bg = rng.uniform(20, 90, size=3) if dark else rng.uniform(165, 235, size=3)
    img = np.broadcast_to(bg, (size, size, 3)).copy()
    radius = rng.uniform(1.6, 2.2)
    for off in offsets:
        px = cx + off * np.cos(theta) + rng.normal(0, 0.4)
        py = cy + off * np.sin(theta) + rng.normal(0, 0.4)
        fg = rng.uniform(170, 255, size=3) if dark else rng.uniform(0, 85, size=3)
        disk = (xx - px) ** 2 + (yy - py) ** 2 <= radius**2
        img[disk] = fg
    img += rng.normal(0, 14, size=(size, size, 3))
    return img


_RENDER = {"easy": _render_easy, "medium": _render_medium, "hard": _render_hard}


def _split_sizes(n_per_split) -> tuple[int, int, int]:
    if np.isscalar(n_per_split):
        return (int(n_per_split),) * 3
    sizes = tuple(int(v) for v in n_per_split)
    if len(sizes) != 3:
        raise ValueError("n_per_split needs one size or three (train, val, test)")
    return sizes


def generate_synthetic(kind: str, n_per_split, seed: int, size: int = 32) -> tuple[DatasetContainer, ...]:
    """Deterministic (train, val, test) containers of a synthetic domain.

    ``easy``: 2 classes told apart by the dominant colour channel.
    ``medium``: 10 bar orientations.
    ``hard``: 20 classes, dot count (2..6) x line arrangement (4).
    """
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}")
    num_classes = NUM_CLASSES[kind]
    sizes = _split_sizes(n_per_split)
    if min(sizes) < num_classes:
        raise ValueError(f"{kind} has {num_classes} classes; every split needs at least that many images")
    render = _RENDER[kind]
    out = []
    for split, n in zip(SPLITS, sizes):
        rng = _split_rng(seed, kind, split)
        labels = _balanced_labels(rng, n, num_classes)
        images = np.empty((n, size, size, 3), dtype=np.uint8)
        for i, lab in enumerate(labels):
            images[i] = np.clip(np.rint(render(rng, int(lab), size)), 0, 255).astype(np.uint8)
        out.append(
            DatasetContainer(
                images,
                labels.astype(np.uint16),
                num_classes,
                split,
                provenance=f"synthetic:{kind}:seed={seed}:size={size}",
            )
        )
    return tuple(out)


def channel_mean_probe(train: DatasetContainer, val: DatasetContainer) -> float:
    """Val accuracy of a least-squares linear classifier on per-channel means."""

    def feats(c):
        m = c.images.reshape(len(c), -1, c.images.shape[3]).mean(axis=1) / 255.0
        return np.hstack([m, np.ones((len(c), 1))])

    targets = np.eye(train.num_classes)[train.labels]
    w, *_ = np.linalg.lstsq(feats(train), targets, rcond=None)
    pred = feats(val) @ w
    return float((pred.argmax(axis=1) == val.labels).mean())


# ---------------------------------------------------------------------------
# AMDS files


def dataset_bytes(c: DatasetContainer) -> bytes:
    n, h, w, ch = c.images.shape
    prov = c.provenance.encode()
    body = b"".join(
        [
            AMDS_MAGIC,
            struct.pack("<H", AMDS_VERSION),
            struct.pack("<IHHHHB", n, h, w, ch, c.num_classes, SPLITS.index(c.split)),
            struct.pack("<H", len(prov)),
            prov,
            c.labels.astype("<u2").tobytes(),
            np.ascontiguousarray(c.images).tobytes(),
        ]
    )
    return body + struct.pack("<I", zlib.crc32(body))


def save_dataset(c: DatasetContainer, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dataset_bytes(c))
    os.replace(tmp, path)


def parse_dataset(buf: bytes) -> DatasetContainer:
    def need(pos, n, what):
        if pos + n > len(buf):
            raise FormatError(f"truncated file while reading {what}", pos)

    need(0, 4, "magic")
    if buf[:4] != AMDS_MAGIC:
        raise FormatError("bad magic, not an AMDS dataset", 0)
    need(4, 2, "version")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != AMDS_VERSION:
        raise FormatError(f"unsupported dataset version {version}", 4)
    need(6, 13, "header")
    n, h, w, ch, num_classes, split = struct.unpack_from("<IHHHHB", buf, 6)
    if split >= len(SPLITS):
        raise FormatError(f"bad split tag {split}", 18)
    need(19, 2, "provenance length")
    (plen,) = struct.unpack_from("<H", buf, 19)
    pos = 21
    need(pos, plen, "provenance")
    provenance = buf[pos : pos + plen].decode()
    pos += plen
    need(pos, 2 * n, "labels")
    labels = np.frombuffer(buf, dtype="<u2", count=n, offset=pos).astype(np.uint16)
    pos += 2 * n
    npix = n * h * w * ch
    need(pos, npix, "pixels")
    images = np.frombuffer(buf, dtype=np.uint8, count=npix, offset=pos).reshape(n, h, w, ch).copy()
    pos += npix
    need(pos, 4, "CRC32")
    (stored,) = struct.unpack_from("<I", buf, pos)
    if len(buf) != pos + 4:
        raise FormatError("trailing bytes after CRC32", pos + 4)
    if zlib.crc32(buf[:pos]) != stored:
        raise ChecksumError("CRC32 mismatch", pos)
    try:
        return DatasetContainer(images, labels, num_classes, SPLITS[split], provenance)
    except ValueError as exc:
        raise FormatError(f"invalid dataset contents: {exc}", 6) from None


def load_dataset(path) -> DatasetContainer:
    return parse_dataset(Path(path).read_bytes())


def split_paths(prefix) -> dict[str, Path]:
    """``<prefix>_train.amds`` etc. for a dataset prefix such as ``data/easy``."""
    prefix = Path(prefix)
    return {s: prefix.with_name(f"{prefix.name}_{s}.amds") for s in SPLITS}


def load_splits(prefix) -> dict[str, DatasetContainer]:
    return {s: load_dataset(p) for s, p in split_paths(prefix).items()}


# ---------------------------------------------------------------------------
# preprocessing


def resize_bilinear(images: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of (N, H, W, C) images with half-pixel centres and edge clamping."""
    n, h, w, c = images.shape
    th, tw = target
    img = images.astype(np.float64)
    if (th, tw) == (h, w):
        return img

    def axis_weights(src, dst):
        pos = (np.arange(dst) + 0.5) * src / dst - 0.5
        pos = np.clip(pos, 0, src - 1)
        i0 = np.floor(pos).astype(int)
        i1 = np.minimum(i0 + 1, src - 1)
        return i0, i1, pos - i0

    y0, y1, wy = axis_weights(h, th)
    x0, x1, wx = axis_weights(w, tw)
    rows = img[:, y0] * (1 - wy)[None, :, None, None] + img[:, y1] * wy[None, :, None, None]
    return rows[:, :, x0] * (1 - wx)[None, None, :, None] + rows[:, :, x1] * wx[None, None, :, None]


@dataclass(frozen=True)
class Normalization:
    mean: np.ndarray  # per channel, on the [0, 1] scale
    std: np.ndarray

    @classmethod
    def fit(cls, x01: np.ndarray, eps: float = 1e-6) -> "Normalization":
        mean = x01.mean(axis=(0, 1, 2))
        std = np.maximum(x01.std(axis=(0, 1, 2)), eps)
        return cls(mean, std)


class BatchStream:
    """Preprocessed NCHW float array plus labels, iterable in mini-batches."""

    def __init__(self, x: np.ndarray, labels: np.ndarray, num_classes: int, normalization: Normalization):
        self.x = x
        self.labels = labels
        self.num_classes = num_classes
        self.normalization = normalization

    def __len__(self) -> int:
        return self.x.shape[0]

    def batches(self, batch_size: int, seed: int | None = None) -> Iterator[tuple[Tensor, np.ndarray]]:
        """Mini-batches in a seeded shuffled order (or in order when ``seed`` is None).

        The last partial batch is kept.
        """
        n = len(self)
        order = np.arange(n) if seed is None else np.random.Generator(np.random.Philox(seed)).permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            yield Tensor(self.x[idx]), self.labels[idx]


def preprocess(
    container: DatasetContainer,
    target: tuple[int, int] | None = None,
    normalization: Normalization | None = None,
    dtype=np.float32,
) -> BatchStream:
    """Resize, scale to [0, 1] and standardize per channel.

    Pass the train split's ``normalization`` when preprocessing val/test; if
    omitted it is fitted on ``container`` itself.
    """
    h, w = container.image_shape[:2]
    target = (h, w) if target is None else tuple(target)
    if len(target) != 2 or min(target) < 1:
        raise ValueError("target size must be two positive extents")
    x01 = resize_bilinear(container.images, target) / 255.0
    if normalization is None:
        normalization = Normalization.fit(x01)
    x = (x01 - normalization.mean) / normalization.std
    x = np.ascontiguousarray(x.transpose(0, 3, 1, 2)).astype(dtype)
    return BatchStream(x, container.labels.astype(np.int64), container.num_classes, normalization)


@dataclass
class DomainData:
    """Train/val/test streams that share the train split's normalization."""

    train: BatchStream
    val: BatchStream
    test: BatchStream

    @property
    def num_classes(self) -> int:
        return self.train.num_classes

    def split(self, name: str) -> BatchStream:
        return getattr(self, name)


def prepare_domain(splits: Sequence[DatasetContainer] | dict, target=None, dtype=np.float32) -> DomainData:
    if isinstance(splits, dict):
        splits = [splits[s] for s in SPLITS]
    train, val, test = splits
    shapes = {c.image_shape for c in splits}
    if len(shapes) != 1 or len({c.num_classes for c in splits}) != 1:
        raise ValueError("all splits of a domain must share image shape and class count")
    tr = preprocess(train, target, dtype=dtype)
    return DomainData(
        tr,
        preprocess(val, target, tr.normalization, dtype),
        preprocess(test, target, tr.normalization, dtype),
    )
