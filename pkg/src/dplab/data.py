"""Dataset ingestion and preparation: IDX files, downsampling, batching.

Images travel as float64 arrays of shape (n, 1, side, side) scaled to a
configured range (default [-1, 1], matching the generator's tanh output),
labels as int64 vectors.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

SUPPORTED_SIDES = (8, 16, 28)


class IdxFormatError(ValueError):
    """Structured failure while parsing an IDX file."""


@dataclass
class LabeledImages:
    """Images scaled to ``value_range`` plus aligned integer labels."""

    images: np.ndarray  # (n, 1, side, side) float64
    labels: np.ndarray  # (n,) int64
    value_range: tuple[float, float] = (-1.0, 1.0)

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1] != 1:
            raise ValueError(f"images must be (n, 1, side, side), got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError(
                f"label count {self.labels.shape} does not match images {self.images.shape[0]}"
            )

    @property
    def n(self) -> int:
        return self.images.shape[0]

    @property
    def side(self) -> int:
        return self.images.shape[2]

    def subset(self, size: int, rng: np.random.Generator) -> "LabeledImages":
        if size > self.n:
            raise ValueError(f"subset size {size} exceeds available {self.n}")
        idx = rng.permutation(self.n)[:size]
        return LabeledImages(self.images[idx], self.labels[idx], self.value_range)

    def filter_classes(self, keep: list[int]) -> "LabeledImages":
        mask = np.isin(self.labels, keep)
        if not mask.any():
            raise ValueError(f"no examples left after filtering to classes {keep}")
        return LabeledImages(self.images[mask], self.labels[mask], self.value_range)


@dataclass(frozen=True)
class DatasetSpec:
    """Where the data comes from and how it is prepared."""

    data_dir: str
    image_side: int = 28
    subset: int = 0  # 0 means all
    class_filter: tuple[int, ...] = ()
    value_range: tuple[float, float] = (-1.0, 1.0)

    def __post_init__(self):
        if self.image_side not in SUPPORTED_SIDES:
            raise ValueError(
                f"image side {self.image_side} unsupported; supported: {SUPPORTED_SIDES}"
            )
        if self.subset < 0:
            raise ValueError(f"subset must be >= 0, got {self.subset}")


# ---------------------------------------------------------------------------
# IDX binary format


def _read_exact(f, n: int, path: str, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise IdxFormatError(
            f"{path}: truncated while reading {what}: expected {n} bytes, got {len(buf)}"
        )
    return buf


def _load_idx_array(path: str | Path, expect_magic: int) -> np.ndarray:
    path = str(path)
    with open(path, "rb") as f:
        magic = struct.unpack(">I", _read_exact(f, 4, path, "magic"))[0]
        if magic != expect_magic:
            raise IdxFormatError(
                f"{path}: wrong magic 0x{magic:08x}, expected 0x{expect_magic:08x}"
            )
        ndim = magic & 0xFF
        dims = struct.unpack(
            f">{ndim}I", _read_exact(f, 4 * ndim, path, "dimension sizes")
        )
        count = int(np.prod(dims, dtype=np.int64))
        payload = f.read(count + 1)  # one extra byte to detect trailing junk
        if len(payload) < count:
            expected = 4 + 4 * ndim + count
            actual = 4 + 4 * ndim + len(payload)
            raise IdxFormatError(
                f"{path}: truncated payload: expected {expected} bytes total, got {actual}"
            )
        if len(payload) > count:
            raise IdxFormatError(f"{path}: trailing bytes after {count}-byte payload")
    return np.frombuffer(payload[:count], dtype=np.uint8).reshape(dims)


def load_idx(
    images_path: str | Path,
    labels_path: str | Path,
    value_range: tuple[float, float] = (-1.0, 1.0),
) -> LabeledImages:
    """Parse an IDX image/label file pair.

    Big-endian magic 0x00000803 (images, 3 dims) and 0x00000801 (labels,
    1 dim); unsigned byte pixels are scaled linearly from [0, 255] to
    ``value_range``. Image and label counts must match.
    """
    raw_images = _load_idx_array(images_path, IMAGES_MAGIC)
    raw_labels = _load_idx_array(labels_path, LABELS_MAGIC)
    if raw_images.shape[0] != raw_labels.shape[0]:
        raise IdxFormatError(
            f"count mismatch: {raw_images.shape[0]} images vs {raw_labels.shape[0]} labels"
        )
    lo, hi = value_range
    images = raw_images.astype(np.float64) / 255.0 * (hi - lo) + lo
    n, r, c = raw_images.shape
    return LabeledImages(
        images=images.reshape(n, 1, r, c),
        labels=raw_labels.astype(np.int64),
        value_range=value_range,
    )


def write_idx_images(path: str | Path, images_u8: np.ndarray) -> None:
    """Write (n, rows, cols) uint8 pixels in the IDX image format."""
    if images_u8.ndim != 3 or images_u8.dtype != np.uint8:
        raise ValueError(f"need (n, rows, cols) uint8, got {images_u8.shape} {images_u8.dtype}")
    n, r, c = images_u8.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IMAGES_MAGIC, n, r, c))
        f.write(images_u8.tobytes())


def write_idx_labels(path: str | Path, labels_u8: np.ndarray) -> None:
    """Write (n,) uint8 labels in the IDX label format."""
    if labels_u8.ndim != 1 or labels_u8.dtype != np.uint8:
        raise ValueError(f"need (n,) uint8, got {labels_u8.shape} {labels_u8.dtype}")
    with open(path, "wb") as f:
        f.write(struct.pack(">II", LABELS_MAGIC, labels_u8.shape[0]))
        f.write(labels_u8.tobytes())


# ---------------------------------------------------------------------------
# downsampling

_DOWNSAMPLE_SIDES = (8, 14, 16, 28)


def area_average_weights(src: int, dst: int) -> np.ndarray:
    """(dst, src) row-stochastic matrix of interval-overlap weights.

    Output cell i covers the source span [i*s, (i+1)*s) with s = src/dst;
    each source pixel contributes its fractional overlap. Rows sum to 1,
    so constant images stay constant and values stay in range.
    """
    s = src / dst
    w = np.zeros((dst, src))
    for i in range(dst):
        lo, hi = i * s, (i + 1) * s
        for j in range(int(np.floor(lo)), min(src, int(np.ceil(hi)))):
            w[i, j] = min(hi, j + 1) - max(lo, j)
    return w / s


def downsample(dataset: LabeledImages, side: int) -> LabeledImages:
    """Area-average images to ``side``; identity when sides already match."""
    if side not in _DOWNSAMPLE_SIDES:
        raise ValueError(f"downsample side {side} unsupported; supported: {_DOWNSAMPLE_SIDES}")
    if side == dataset.side:
        return dataset
    if side > dataset.side:
        raise ValueError(f"cannot downsample {dataset.side} up to {side}")
    w = area_average_weights(dataset.side, side)
    # apply along rows then columns: out = W x W^T per image
    out = np.einsum("ij,nkjl,ml->nkim", w, dataset.images, w, optimize=True)
    return LabeledImages(out, dataset.labels.copy(), dataset.value_range)


# ---------------------------------------------------------------------------
# deterministic synthetic digit corpus (stand-in when no IDX files exist)

_GLYPHS = {
    0: ("01110", "10001", "10011", "10101", "11001", "10001", "01110"),
    1: ("00100", "01100", "00100", "00100", "00100", "00100", "01110"),
    2: ("01110", "10001", "00001", "00010", "00100", "01000", "11111"),
    3: ("11111", "00010", "00100", "00010", "00001", "10001", "01110"),
    4: ("00010", "00110", "01010", "10010", "11111", "00010", "00010"),
    5: ("11111", "10000", "11110", "00001", "00001", "10001", "01110"),
    6: ("00110", "01000", "10000", "11110", "10001", "10001", "01110"),
    7: ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    8: ("01110", "10001", "10001", "01110", "10001", "10001", "01110"),
    9: ("01110", "10001", "10001", "01111", "00001", "00010", "01100"),
}


def _glyph_array(digit: int) -> np.ndarray:
    rows = _GLYPHS[digit]
    return np.array([[int(ch) for ch in row] for row in rows], dtype=np.float64)


def synthetic_digits(
    n: int,
    seed: int,
    side: int = 28,
    labels: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic digit-glyph corpus as (n, side, side) uint8 + labels.

    Each example renders a 5x7 digit glyph scaled 3x onto a 28x28 canvas
    with a random integer offset, intensity jitter, and light pixel noise.
    When ``labels`` is omitted the classes cycle 0..9. With side != 28 the
    canvas is area-averaged down after rendering.
    """
    rng = np.random.default_rng(seed)
    if labels is None:
        labels = np.arange(n, dtype=np.int64) % 10
    else:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (n,):
            raise ValueError(f"labels must be ({n},), got {labels.shape}")
    canvas = np.zeros((n, 28, 28))
    glyphs = {d: np.kron(_glyph_array(d), np.ones((3, 3))) for d in range(10)}
    gh, gw = 21, 15
    offs_i = rng.integers(0, 28 - gh + 1, size=n)
    offs_j = rng.integers(0, 28 - gw + 1, size=n)
    intensity = rng.uniform(0.6, 1.0, size=n)
    for i in range(n):
        g = glyphs[int(labels[i])]
        canvas[i, offs_i[i] : offs_i[i] + gh, offs_j[i] : offs_j[i] + gw] = g * intensity[i]
    canvas += rng.normal(0.0, 0.03, size=canvas.shape)
    canvas = np.clip(canvas, 0.0, 1.0)
    if side != 28:
        w = area_average_weights(28, side)
        canvas = np.einsum("ij,njl,ml->nim", w, canvas, w, optimize=True)
    return np.round(canvas * 255.0).astype(np.uint8), labels


def synthetic_dataset(
    n: int,
    seed: int,
    side: int = 28,
    value_range: tuple[float, float] = (-1.0, 1.0),
) -> LabeledImages:
    """Synthetic corpus already scaled and shaped for training."""
    pixels, labels = synthetic_digits(n, seed, side=side)
    lo, hi = value_range
    images = pixels.astype(np.float64) / 255.0 * (hi - lo) + lo
    return LabeledImages(images.reshape(n, 1, side, side), labels, value_range)


def load_or_synthesize(spec: DatasetSpec, seed: int) -> tuple[LabeledImages, str]:
    """Load train IDX files from ``spec.data_dir`` or synthesize a corpus.

    Looks for the canonical train file names (plain or .idx-suffixed).
    Returns the prepared dataset and a short provenance string for the run
    metadata. Preparation order: downsample, class filter, subset.
    """
    root = Path(spec.data_dir) if spec.data_dir else None
    pair = None
    if root is not None and root.exists():
        for imgs, labs in (
            ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
            ("train-images.idx3-ubyte", "train-labels.idx1-ubyte"),
        ):
            if (root / imgs).exists() and (root / labs).exists():
                pair = (root / imgs, root / labs)
                break
    if pair is not None:
        ds = load_idx(pair[0], pair[1], spec.value_range)
        source = f"idx:{pair[0]}"
    else:
        n = spec.subset if spec.subset else 10000
        ds = synthetic_dataset(n, seed=seed, side=28, value_range=spec.value_range)
        source = f"synthetic:seed={seed}"
    ds = downsample(ds, spec.image_side)
    if spec.class_filter:
        ds = ds.filter_classes(list(spec.class_filter))
    if spec.subset and spec.subset < ds.n:
        ds = ds.subset(spec.subset, np.random.default_rng(seed))
    return ds, source


# ---------------------------------------------------------------------------
# batch sampling


def poisson_batch(
    dataset: LabeledImages, rate: float, rng: np.random.Generator
) -> np.ndarray:
    """Indices of an independent rate-``rate`` sample; may be empty."""
    if not (0.0 < rate <= 1.0):
        raise ValueError(f"rate must lie in (0, 1], got {rate}")
    mask = rng.uniform(size=dataset.n) < rate
    return np.flatnonzero(mask)


def fixed_batch(
    dataset: LabeledImages, batch_size: int, rng: np.random.Generator
) -> np.ndarray:
    """Indices of a uniform without-replacement sample of fixed size."""
    if batch_size > dataset.n:
        raise ValueError(f"batch_size {batch_size} exceeds dataset size {dataset.n}")
    return rng.choice(dataset.n, size=batch_size, replace=False)


def shuffled_epochs(n: int, batch_size: int, rng: np.random.Generator):
    """Generator of index batches cycling over reshuffled epochs."""
    while True:
        order = rng.permutation(n)
        for i in range(0, n - batch_size + 1, batch_size):
            yield order[i : i + batch_size]
