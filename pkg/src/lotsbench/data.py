"""Datasets and probe canvases.

Two on-disk layouts are understood:

``idx``
    An MNIST-style quartet in one directory: ``train-images-idx3-ubyte``,
    ``train-labels-idx1-ubyte``, ``t10k-images-idx3-ubyte`` and
    ``t10k-labels-idx1-ubyte`` (optionally ``.gz``).  Image files may be
    3-D ``(N, H, W)`` or 4-D ``(N, H, W, C)`` unsigned-byte arrays.

``png-tree``
    ``root/train/<class>/*.png`` and ``root/test/<class>/*.png``.  Class folders
    are sorted by name; their position is the label.
"""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

IDX_FILES = {
    ("train", "images"): "train-images-idx3-ubyte",
    ("train", "labels"): "train-labels-idx1-ubyte",
    ("test", "images"): "t10k-images-idx3-ubyte",
    ("test", "labels"): "t10k-labels-idx1-ubyte",
}
FORMATS = ("idx", "png-tree")


class DatasetError(ValueError):
    """Malformed or inconsistent dataset files."""


@dataclass
class LabeledImages:
    images: np.ndarray  # (N, H, W, C) uint8
    labels: np.ndarray  # (N,) int64
    class_names: list = field(default_factory=list)

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim == 3:
            self.images = self.images[..., None]
        if self.images.ndim != 4:
            raise DatasetError(f"images must be (N, H, W, C), got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DatasetError(f"{len(self.images)} images but {len(self.labels)} labels")
        if not self.class_names:
            k = int(self.labels.max()) + 1 if len(self.labels) else 0
            self.class_names = [str(i) for i in range(k)]

    def __len__(self):
        return len(self.labels)

    @property
    def num_classes(self):
        return len(self.class_names)

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])


@dataclass
class Dataset:
    train: LabeledImages
    test: LabeledImages

    @property
    def num_classes(self):
        return self.train.num_classes


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------


def _open(path: Path):
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Read an unsigned-byte IDX file into an array."""
    path = Path(path)
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise DatasetError(f"{path}: file too short for an IDX header")
    zero, dtype_code, ndim = struct.unpack_from(">HBB", raw, 0)
    if zero != 0 or dtype_code != 0x08:
        raise DatasetError(f"{path}: not an unsigned-byte IDX file")
    if len(raw) < 4 + 4 * ndim:
        raise DatasetError(f"{path}: truncated IDX header")
    dims = struct.unpack_from(">" + "I" * ndim, raw, 4)
    expected = int(np.prod(dims))
    body = raw[4 + 4 * ndim:]
    if len(body) != expected:
        declared = dims[0] if dims else 0
        present = len(body) // max(1, expected // max(1, declared)) if declared else 0
        raise DatasetError(f"{path}: declares {declared} items of {dims[1:]} but holds {len(body)} bytes "
                           f"(~{present} items)")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def write_idx(path, array) -> None:
    array = np.asarray(array)
    if array.dtype != np.uint8:
        if array.min() < 0 or array.max() > 255 or not np.all(array == np.round(array)):
            raise DatasetError("IDX export needs integer values in [0, 255]")
        array = array.astype(np.uint8)
    header = struct.pack(">HBB", 0, 0x08, array.ndim) + struct.pack(">" + "I" * array.ndim, *array.shape)
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "wb") as fh:
        fh.write(header + array.tobytes())


def _find_idx(root: Path, stem: str) -> Path:
    for cand in (root / stem, root / (stem + ".gz")):
        if cand.exists():
            return cand
    raise DatasetError(f"{root}: missing {stem}")


def load_idx(root) -> Dataset:
    root = Path(root)
    splits = {}
    for split in ("train", "test"):
        images = read_idx(_find_idx(root, IDX_FILES[(split, "images")]))
        labels = read_idx(_find_idx(root, IDX_FILES[(split, "labels")]))
        if labels.ndim != 1:
            raise DatasetError(f"{split} labels must be 1-D, got shape {labels.shape}")
        if len(images) != len(labels):
            raise DatasetError(f"{split}: {len(images)} images but {len(labels)} labels")
        splits[split] = (images, labels.astype(np.int64))
    k = int(max(splits["train"][1].max(initial=-1), splits["test"][1].max(initial=-1))) + 1
    names = [str(i) for i in range(k)]
    return Dataset(LabeledImages(*splits["train"], names), LabeledImages(*splits["test"], names))


def save_idx(dataset: Dataset, root) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for split, part in (("train", dataset.train), ("test", dataset.test)):
        images = part.images[..., 0] if part.images.shape[-1] == 1 else part.images
        write_idx(root / IDX_FILES[(split, "images")], images)
        write_idx(root / IDX_FILES[(split, "labels")], part.labels.astype(np.uint8))


# ---------------------------------------------------------------------------
# PNG tree
# ---------------------------------------------------------------------------


def read_png(path) -> np.ndarray:
    """Read a PNG as an ``(H, W, C)`` uint8 array (C is 1 or 3)."""
    with PILImage.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB" if "A" in im.mode or im.mode == "P" else "L")
        arr = np.asarray(im, dtype=np.uint8)
    return arr[..., None] if arr.ndim == 2 else arr


def write_png(path, image) -> None:
    image = np.asarray(image)
    if image.dtype != np.uint8:
        if image.min() < 0 or image.max() > 255 or not np.all(image == np.floor(image)):
            raise ValueError("PNG export needs integer pixels in [0, 255]")
        image = image.astype(np.uint8)
    if image.ndim == 3 and image.shape[-1] == 1:
        image = image[..., 0]
    PILImage.fromarray(image).save(path)


def _load_class_tree(root: Path, class_names=None) -> LabeledImages:
    folders = sorted(p for p in root.iterdir() if p.is_dir())
    if not folders:
        raise DatasetError(f"{root}: no class folders")
    names = [p.name for p in folders]
    if class_names is not None and names != class_names:
        raise DatasetError(f"{root}: class folders {names} differ from {class_names}")
    images, labels = [], []
    for label, folder in enumerate(folders):
        for f in sorted(folder.glob("*.png")):
            images.append(read_png(f))
            labels.append(label)
    if not images:
        raise DatasetError(f"{root}: no PNG files")
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise DatasetError(f"{root}: images have differing shapes {sorted(shapes)}")
    return LabeledImages(np.stack(images), np.array(labels), names)


def load_png_tree(root) -> Dataset:
    root = Path(root)
    if not (root / "train").is_dir() or not (root / "test").is_dir():
        raise DatasetError(f"{root}: expected train/ and test/ subdirectories")
    train = _load_class_tree(root / "train")
    test = _load_class_tree(root / "test", train.class_names)
    return Dataset(train, test)


def save_png_tree(dataset: Dataset, root) -> None:
    root = Path(root)
    for split, part in (("train", dataset.train), ("test", dataset.test)):
        for label, name in enumerate(part.class_names):
            (root / split / name).mkdir(parents=True, exist_ok=True)
        for i, (im, label) in enumerate(zip(part.images, part.labels)):
            write_png(root / split / part.class_names[label] / f"{i:06d}.png", im)


def load_dataset(path, format="idx") -> Dataset:
    if format == "idx":
        data = load_idx(path)
    elif format == "png-tree":
        data = load_png_tree(path)
    else:
        raise ValueError(f"unknown dataset format {format!r}; choose from {FORMATS}")
    if data.train.image_shape != data.test.image_shape:
        raise DatasetError(f"train images {data.train.image_shape} and test images "
                           f"{data.test.image_shape} differ in shape")
    return data


# ---------------------------------------------------------------------------
# synthetic texture classes
# ---------------------------------------------------------------------------


def texture_prototypes(num_classes=10, size=28, shift=3, sigma=3.0, seed=0) -> np.ndarray:
    """Smooth random fields, one per class, z-scored, ``size + shift`` pixels square."""
    rng = np.random.default_rng(seed)
    side = size + shift
    protos = []
    for _ in range(num_classes):
        f = ndimage.gaussian_filter(rng.normal(size=(side, side)), sigma, mode="wrap")
        protos.append((f - f.mean()) / f.std())
    return np.stack(protos)


def make_synthetic(n_train=600, n_test=100, size=28, seed=0, num_classes=10, noise=20.0,
                   amplitude=45.0, shift=3) -> Dataset:
    """Separable ten-class grayscale texture set; ``n_*`` counts are per class.

    Each class owns a smooth random field.  A sample is a random ``size``-square
    crop of its class field (offset up to ``shift`` pixels) with random
    brightness and contrast plus Gaussian pixel noise, rounded to uint8.
    """
    rng = np.random.default_rng(seed)
    protos = texture_prototypes(num_classes, size, shift, seed=seed)
    names = [str(i) for i in range(num_classes)]

    def one(c):
        dy, dx = rng.integers(0, shift + 1, size=2)
        field_ = protos[c, dy:dy + size, dx:dx + size]
        img = rng.uniform(110, 145) + rng.uniform(0.8, 1.2) * amplitude * field_
        img = img + rng.normal(0, noise, (size, size))
        return np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)

    def split(per_class):
        labels = np.repeat(np.arange(num_classes), per_class)
        rng.shuffle(labels)
        images = np.stack([one(int(c)) for c in labels])[..., None]
        return LabeledImages(images, labels, names)

    return Dataset(split(n_train), split(n_test))


# ---------------------------------------------------------------------------
# canvases
# ---------------------------------------------------------------------------

PATTERNS = ("stripes", "checker", "radial")


def generate_irregular(seed, height, width, channels=1) -> np.ndarray:
    """Uniform integer noise in [0, 255]."""
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, size=(height, width, channels), dtype=np.uint8)


def generate_regular(seed, pattern, height, width, channels=1, period=None) -> np.ndarray:
    """Deterministic patterned canvas; the seed picks phase, period and contrast."""
    if pattern not in PATTERNS:
        raise ValueError(f"unknown pattern {pattern!r}; choose from {PATTERNS}")
    rng = np.random.default_rng(seed)
    period = int(period if period is not None else rng.integers(4, 9))
    lo, hi = sorted(rng.integers(0, 256, size=2))
    if hi - lo < 64:
        lo, hi = 32, 224
    yy, xx = np.mgrid[:height, :width]
    if pattern == "stripes":
        on = ((xx + int(rng.integers(period))) % period) < period / 2
        img = np.where(on, hi, lo).astype(float)
    elif pattern == "checker":
        on = ((yy // period) + (xx // period)) % 2 == 0
        img = np.where(on, hi, lo).astype(float)
    else:
        cy, cx = (height - 1) / 2, (width - 1) / 2
        r = np.hypot(yy - cy, xx - cx)
        img = lo + (hi - lo) * 0.5 * (1 + np.cos(2 * np.pi * r / period))
    img = np.floor(img + 0.5).astype(np.uint8)
    return np.repeat(img[..., None], channels, axis=2)
