"""Datasets: MNIST-style IDX files, a synthetic bimodal set, pairing masks."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_UBYTE_1D = 0x00000801
IDX_UBYTE_3D = 0x00000803
_MAGIC_NDIM = {IDX_UBYTE_1D: 1, IDX_UBYTE_3D: 3}
MAX_IDX_ELEMENTS = 1 << 34

SHUFFLE_KEY = 1
PAIRED_CYCLE_KEY = 2


class IdxError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(message)
        self.offset = offset


class BadMagic(IdxError):
    pass


class TruncatedIdx(IdxError):
    pass


class DimensionOverflow(IdxError):
    pass


class DataError(OSError):
    """A dataset file or directory is missing or unusable."""


@dataclass
class BimodalBatch:
    images: np.ndarray      # (B, D) in [0, 1]
    labels: np.ndarray      # (B, n) one-hot or multi-hot
    paired: np.ndarray      # (B,) bool; label is only visible where True

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        self.paired = np.asarray(self.paired, dtype=bool)
        if not (len(self.images) == len(self.labels) == len(self.paired)):
            raise ValueError("BimodalBatch: images, labels and mask lengths differ")


@dataclass
class DatasetSplit:
    train_images: np.ndarray
    train_labels: np.ndarray
    paired: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray
    multilabel: bool = False
    extras: dict = field(default_factory=dict)

    @property
    def dataset_size(self) -> int:
        return len(self.train_images)

    @property
    def n_classes(self) -> int:
        return self.train_labels.shape[1]

    def batch(self, rows) -> BimodalBatch:
        return BimodalBatch(self.train_images[rows], self.train_labels[rows], self.paired[rows])


# --- IDX --------------------------------------------------------------------

def parse_idx(buf: bytes) -> np.ndarray:
    if len(buf) < 4:
        raise TruncatedIdx("truncated header at offset 0", 0)
    (magic,) = struct.unpack(">I", buf[:4])
    if magic not in _MAGIC_NDIM:
        raise BadMagic(f"bad magic at offset 0 (0x{magic:08X})", 0)
    ndim = _MAGIC_NDIM[magic]
    dims = []
    for k in range(ndim):
        off = 4 + 4 * k
        if len(buf) < off + 4:
            raise TruncatedIdx(f"truncated dimension {k} at offset {off}", off)
        (d,) = struct.unpack(">I", buf[off:off + 4])
        dims.append(d)
        total = int(np.prod(dims, dtype=object))
        if total > MAX_IDX_ELEMENTS:
            raise DimensionOverflow(f"dimension overflow at offset {off} ({dims})", off)
    start = 4 + 4 * ndim
    count = int(np.prod(dims, dtype=object))
    if len(buf) < start + count:
        raise TruncatedIdx(
            f"truncated data at offset {len(buf)} (need {start + count} bytes)", len(buf))
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=start).reshape(dims).copy()


def load_idx(path) -> np.ndarray:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return parse_idx(f.read())


def encode_idx(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    if array.dtype != np.uint8 or array.ndim not in (1, 3):
        raise ValueError("encode_idx: need a 1-D or 3-D uint8 array")
    magic = IDX_UBYTE_1D if array.ndim == 1 else IDX_UBYTE_3D
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in array.shape)
    return header + np.ascontiguousarray(array).tobytes()


def write_idx(path, array: np.ndarray) -> None:
    path = Path(path)
    data = encode_idx(array)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "wb") as f:
        f.write(data)


def _find(data_dir: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
        p = data_dir / name
        if p.exists():
            return p
    raise DataError(f"missing dataset file {data_dir / stem}")


def one_hot(labels: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((len(labels), n))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def load_mnist(data_dir, train_count: int | None = None, test_count: int | None = None,
               classes: int = 10):
    """Read the four standard MNIST/FMNIST IDX files from ``data_dir``.

    Returns ``(train_images, train_labels, test_images, test_labels)`` with
    images flattened and scaled to [0, 1] and labels one-hot.
    """
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise DataError(f"data directory not found: {data_dir}")
    out = []
    for split, count in (("train", train_count), ("t10k", test_count)):
        imgs = load_idx(_find(data_dir, f"{split}-images-idx3-ubyte"))
        lbls = load_idx(_find(data_dir, f"{split}-labels-idx1-ubyte"))
        if len(imgs) != len(lbls):
            raise DataError(f"{split}: {len(imgs)} images but {len(lbls)} labels")
        if count is not None:
            imgs, lbls = imgs[:count], lbls[:count]
        out.append(imgs.reshape(len(imgs), -1).astype(np.float64) / 255.0)
        out.append(one_hot(lbls.astype(np.int64), classes))
    return tuple(out)


# --- pairing & shuffling ------------------------------------------------------

def make_pairing_mask(count: int, fraction: float, seed: int) -> np.ndarray:
    """Exactly round(fraction * count) paired samples, uniform without replacement."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"paired fraction must lie in [0, 1], got {fraction}")
    k = int(round(fraction * count))
    mask = np.zeros(count, dtype=bool)
    rng = np.random.default_rng(seed)
    mask[rng.choice(count, size=k, replace=False)] = True
    return mask


def epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, SHUFFLE_KEY]).permutation(n)


def paired_cycle(seed: int, epoch: int, paired_idx: np.ndarray, length: int) -> np.ndarray:
    """``length`` paired indices for one epoch, cycling through fresh permutations."""
    if len(paired_idx) == 0:
        return np.zeros(0, dtype=np.int64)
    rng = np.random.default_rng([seed, epoch, PAIRED_CYCLE_KEY])
    reps = -(-length // len(paired_idx))
    return np.concatenate([rng.permutation(paired_idx) for _ in range(reps)])[:length]


def epoch_batches(split: DatasetSplit, batch_size: int, seed: int, epoch: int):
    """Yield the row indices of each minibatch in an epoch.

    Every batch is a slice of the shuffled training set followed by up to
    ``batch_size`` rows from the paired subset, so the few labelled
    samples are seen at every step.
    """
    n = split.dataset_size
    perm = epoch_permutation(seed, epoch, n)
    paired_idx = np.flatnonzero(split.paired)
    n_steps = -(-n // batch_size)
    per_step = min(batch_size, len(paired_idx))
    extra = paired_cycle(seed, epoch, paired_idx, per_step * n_steps)
    for k in range(n_steps):
        rows = perm[k * batch_size:(k + 1) * batch_size]
        if per_step:
            rows = np.concatenate([rows, extra[k * per_step:(k + 1) * per_step]])
        yield rows


# --- synthetic ----------------------------------------------------------------

SYNTH_PIXELS = 16
TEMPLATE_PIXELS = 4


def synth_templates(classes: int) -> np.ndarray:
    """Distinct 4-pixel class templates (a fixed function of ``classes``)."""
    rng = np.random.default_rng([classes, 7])
    while True:
        t = rng.uniform(0.05, 0.95, size=(classes, TEMPLATE_PIXELS))
        gaps = np.abs(t[:, None, :] - t[None, :, :]).max(axis=-1) + np.eye(classes)
        if gaps.min() > 0.3:
            return t


def _synth_draw(rng, count: int, classes: int, templates, texture):
    labels = np.arange(count) % classes
    rng.shuffle(labels)
    style = rng.standard_normal((count, 2))
    brightness, contrast = style[:, :1], style[:, 1:]
    rest = 1.0 / (1.0 + np.exp(-(brightness + contrast * texture[None, :])))
    images = np.concatenate([templates[labels], rest], axis=1)
    return images, labels, style


def synth_bimodal(count: int, classes: int, seed: int, test_count: int = 0,
                  paired_fraction: float = 0.0) -> DatasetSplit:
    """16-pixel images: 4 template pixels fix the class, 12 carry a 2-D style.

    Style (brightness, contrast) is drawn independently of the class, so the
    ground-truth factors in ``extras`` separate shared from private content.
    """
    if count < classes:
        raise ValueError(f"synth_bimodal: count {count} < classes {classes}")
    templates = synth_templates(classes)
    texture = np.linspace(-2.0, 2.0, SYNTH_PIXELS - TEMPLATE_PIXELS)
    rng = np.random.default_rng([seed, 11])
    tr_x, tr_y, tr_s = _synth_draw(rng, count, classes, templates, texture)
    te_x, te_y, te_s = _synth_draw(rng, test_count, classes, templates, texture)
    return DatasetSplit(
        train_images=tr_x, train_labels=one_hot(tr_y, classes),
        paired=make_pairing_mask(count, paired_fraction, seed),
        test_images=te_x, test_labels=one_hot(te_y, classes),
        extras={"train_style": tr_s, "test_style": te_s, "templates": templates,
                "train_class": tr_y, "test_class": te_y},
    )


def mnist_split(data_dir, paired_fraction: float, seed: int, train_count: int | None = None,
                test_count: int | None = None) -> DatasetSplit:
    tr_x, tr_y, te_x, te_y = load_mnist(data_dir, train_count, test_count)
    return DatasetSplit(tr_x, tr_y, make_pairing_mask(len(tr_x), paired_fraction, seed),
                        te_x, te_y)


def default_data_dir(flag_value: str | None) -> str | None:
    return flag_value or os.environ.get("DMVAE_DATA_DIR")
