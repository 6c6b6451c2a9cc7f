"""Labeled image datasets: MNIST from IDX files and a synthetic rotated-shape set.

The synthetic set renders one of several asymmetric polygons ("styles") at a
global rotation angle that is the class label ("domain"). Every style occurs
at every angle the same number of times, so style carries no class
information by construction.
"""
from __future__ import annotations

import gzip
import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch

from .errors import ConfigError, ConsistencyError, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class ImageBatch(NamedTuple):
    pixels: torch.Tensor  # (batch, channels, height, width), float32 in [0, 1]
    labels: torch.Tensor  # (batch,), int64


@dataclass(frozen=True, eq=False)
class LabeledImages:
    pixels: np.ndarray  # float32 (N, C, H, W)
    labels: np.ndarray  # int64 (N,)
    num_classes: int

    def __post_init__(self):
        if self.pixels.ndim != 4 or self.labels.shape != (self.pixels.shape[0],):
            raise ConsistencyError(
                f"pixels {self.pixels.shape} and labels {self.labels.shape} are not row-aligned"
            )

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self):
        return tuple(self.pixels.shape[1:])

    def subset(self, index):
        return LabeledImages(self.pixels[index], self.labels[index], self.num_classes)

    def as_batch(self, index=slice(None)):
        return ImageBatch(torch.from_numpy(self.pixels[index]), torch.from_numpy(self.labels[index]))


@dataclass(frozen=True, eq=False)
class SplitDataset:
    name: str
    train: LabeledImages
    test: LabeledImages

    @property
    def num_classes(self):
        return self.train.num_classes

    @property
    def image_shape(self):
        return self.train.image_shape


# -- IDX -------------------------------------------------------------------

def _read_bytes(path):
    path = Path(path)
    data = path.read_bytes()
    if path.suffix == ".gz":
        data = gzip.decompress(data)
    return data


def _parse_idx(data, magic, ndim, what):
    header = 4 + 4 * ndim
    if len(data) < 4:
        raise FormatError(f"{what}: file truncated inside the magic number", offset=len(data))
    (found,) = struct.unpack_from(">I", data, 0)
    if found != magic:
        raise FormatError(f"{what}: bad magic number 0x{found:08x}, expected 0x{magic:08x}", offset=0)
    if len(data) < header:
        raise FormatError(f"{what}: file truncated inside the header", offset=len(data))
    dims = struct.unpack_from(f">{ndim}I", data, 4)
    size = int(np.prod(dims, dtype=np.int64))
    if len(data) < header + size:
        raise FormatError(
            f"{what}: header promises {size} payload bytes but only {len(data) - header} present",
            offset=len(data),
        )
    if len(data) > header + size:
        raise FormatError(f"{what}: {len(data) - header - size} trailing bytes", offset=header + size)
    return np.frombuffer(data, dtype=np.uint8, count=size, offset=header).reshape(dims)


def pad_images(images, size):
    """Zero-pad (N, H, W) images symmetrically to ``size`` x ``size``."""
    n, h, w = images.shape
    if h > size or w > size:
        raise ConfigError(f"cannot pad {h}x{w} images to {size}x{size}")
    top, left = (size - h) // 2, (size - w) // 2
    out = np.zeros((n, size, size), dtype=images.dtype)
    out[:, top:top + h, left:left + w] = images
    return out


def load_idx(images_path, labels_path, pad_to=32, num_classes=10):
    """Read an IDX image/label pair (optionally gzipped) into a ``LabeledImages``.

    Pixels are scaled to [0, 1] and zero-padded to ``pad_to`` so four
    stride-2 layers divide the image evenly.
    """
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, 3, str(images_path))
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, 1, str(labels_path))
    if images.shape[0] != labels.shape[0]:
        raise ConsistencyError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if labels.size and labels.max() >= num_classes:
        raise ConsistencyError(f"label {labels.max()} outside [0, {num_classes})")
    if pad_to:
        images = pad_images(images, pad_to)
    pixels = (images.astype(np.float32) / 255.0)[:, None, :, :]
    return LabeledImages(pixels, labels.astype(np.int64), num_classes)


def _find(data_dir, name):
    for candidate in (Path(data_dir) / name, Path(data_dir) / (name + ".gz")):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"{name}[.gz] not found in {data_dir}")


def load_mnist(data_dir, train_size=None, test_size=None):
    """MNIST train/test split, optionally truncated to the first N items of each."""
    splits = {}
    for split, (img, lab) in MNIST_FILES.items():
        data = load_idx(_find(data_dir, img), _find(data_dir, lab))
        size = train_size if split == "train" else test_size
        if size:
            if size > len(data):
                raise ConfigError(f"requested {size} {split} items but only {len(data)} exist")
            data = data.subset(slice(0, size))
        splits[split] = data
    return SplitDataset("mnist", splits["train"], splits["test"])


# -- synthetic -------------------------------------------------------------

# Asymmetric outlines within the unit disc. None has a rotational symmetry,
# so the rendering angle is recoverable from the shape alone.
SHAPES = {
    "ell": [(-0.5, 0.8), (-0.5, -0.8), (0.6, -0.8), (0.6, -0.4), (-0.1, -0.4), (-0.1, 0.8)],
    "eff": [(-0.5, -0.8), (-0.5, 0.8), (0.6, 0.8), (0.6, 0.45), (-0.1, 0.45), (-0.1, 0.15),
            (0.4, 0.15), (0.4, -0.2), (-0.1, -0.2), (-0.1, -0.8)],
    "flag": [(-0.6, -0.8), (-0.6, 0.8), (0.7, 0.4), (-0.25, 0.0), (-0.25, -0.8)],
    "kite": [(0.0, 0.9), (0.35, -0.1), (0.1, -0.8), (-0.6, -0.3)],
    "hook": [(-0.6, 0.8), (0.6, 0.8), (0.6, -0.8), (-0.2, -0.8), (-0.2, -0.4), (0.2, -0.4),
             (0.2, 0.4), (-0.6, 0.4)],
    "wedge": [(-0.7, -0.7), (0.7, -0.7), (-0.7, 0.5)],
}
MIN_SYNTHETIC_SIZE = 16
SUPERSAMPLE = 4


@dataclass(frozen=True)
class SyntheticSpec:
    num_domains: int = 8
    num_styles: int = 5
    image_size: int = 32
    samples_per_cell: int = 25
    num_sizes: int = 2
    num_positions: int = 4  # offsets on a sqrt(n) x sqrt(n) grid
    test_fraction: float = 0.2
    seed: int = 0

    def validate(self):
        if self.num_domains < 2:
            raise ConfigError("need at least two domains")
        if not 1 <= self.num_styles <= len(SHAPES):
            raise ConfigError(f"num_styles must be in [1, {len(SHAPES)}]")
        if self.image_size < MIN_SYNTHETIC_SIZE:
            raise ConfigError(f"image_size {self.image_size} too small to render (minimum {MIN_SYNTHETIC_SIZE})")
        side = int(round(self.num_positions ** 0.5))
        if side * side != self.num_positions or side < 1:
            raise ConfigError("num_positions must be a perfect square")
        if self.num_sizes < 1 or self.samples_per_cell < 1:
            raise ConfigError("num_sizes and samples_per_cell must be positive")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("test_fraction must be in (0, 1)")
        # stratified split needs at least one item of every (domain, style) cell on each side
        per_cell = self.num_sizes * self.num_positions * self.samples_per_cell
        n_test = int(round(per_cell * self.test_fraction))
        if n_test < 1 or n_test >= per_cell:
            raise ConfigError("too few samples per (domain, style) cell to split")


def _inside(px, py, poly):
    """Even-odd rule point-in-polygon for arrays of points."""
    inside = np.zeros(px.shape, dtype=bool)
    x0, y0 = poly[-1]
    for x1, y1 in poly:
        crosses = (y1 > py) != (y0 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
        inside ^= crosses & (px < xint)
        x0, y0 = x1, y1
    return inside


def render_polygon(poly, size, angle, scale, center, supersample=SUPERSAMPLE):
    """Anti-aliased coverage image of ``poly`` rotated by ``angle`` (radians).

    ``scale`` and ``center`` are in pixels; the result is float64 in [0, 1].
    """
    pts = np.asarray(poly, dtype=np.float64)
    cos, sin = np.cos(angle), np.sin(angle)
    rot = pts @ np.array([[cos, sin], [-sin, cos]])
    verts = rot * scale + np.asarray(center)
    n = size * supersample
    coords = (np.arange(n) + 0.5) / supersample
    px, py = np.meshgrid(coords, coords)  # x = column, y = row
    cover = _inside(px, py, verts).astype(np.float64)
    return cover.reshape(size, supersample, size, supersample).mean(axis=(1, 3))


def generate_synthetic(spec):
    """Render the full grid of cells and return ``(images, styles)``.

    ``images.labels`` holds the domain (angle) index; ``styles`` the shape index.
    """
    spec.validate()
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(spec.seed)))
    shapes = list(SHAPES.values())[: spec.num_styles]
    size = spec.image_size
    side = int(round(spec.num_positions ** 0.5))
    scales = np.linspace(0.26, 0.34, spec.num_sizes) if spec.num_sizes > 1 else np.array([0.3])
    offsets = np.linspace(-0.08, 0.08, side) if side > 1 else np.array([0.0])

    pixels, labels, styles = [], [], []
    for d in range(spec.num_domains):
        angle = 2.0 * np.pi * d / spec.num_domains
        for s, poly in enumerate(shapes):
            for scale in scales:
                for oy in offsets:
                    for ox in offsets:
                        for _ in range(spec.samples_per_cell):
                            jitter = rng.uniform(-0.5, 0.5, size=2)
                            brightness = rng.uniform(0.6, 1.0)
                            center = size / 2 + np.array([ox, oy]) * size + jitter
                            img = render_polygon(poly, size, angle, scale * size, center)
                            pixels.append(brightness * img)
                            labels.append(d)
                            styles.append(s)
    pixels = np.clip(np.asarray(pixels, dtype=np.float32), 0.0, 1.0)[:, None]
    data = LabeledImages(pixels, np.asarray(labels, dtype=np.int64), spec.num_domains)
    return data, np.asarray(styles, dtype=np.int64)


def stratified_split(labels, styles, test_fraction, seed):
    """Index arrays ``(train, test)``; every (label, style) cell lands in both."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(7,))))
    train, test = [], []
    cells = labels * (styles.max() + 1) + styles
    for cell in np.unique(cells):
        idx = np.flatnonzero(cells == cell)
        idx = idx[rng.permutation(len(idx))]
        n_test = int(round(len(idx) * test_fraction))
        test.append(idx[:n_test])
        train.append(idx[n_test:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def synthetic_dataset(spec):
    """Generated data split into train/test, with the style index kept per split."""
    data, styles = generate_synthetic(spec)
    tr, te = stratified_split(data.labels, styles, spec.test_fraction, spec.seed)
    split = SplitDataset("synthetic", data.subset(tr), data.subset(te))
    return split, styles[tr], styles[te]


# -- synthetic cache file -------------------------------------------------
# layout: magic[8] | u32 version | u32 header_len | header JSON (utf-8) | payload
# header holds the spec, array shapes and the sha256 of the payload
SYNTH_MAGIC = b"RVSYNTH\0"
SYNTH_FORMAT_VERSION = 1


def save_synthetic_cache(spec, data, styles, path):
    payload = (
        np.ascontiguousarray(data.pixels, dtype="<f4").tobytes()
        + np.ascontiguousarray(data.labels, dtype="<i8").tobytes()
        + np.ascontiguousarray(styles, dtype="<i8").tobytes()
    )
    header = json.dumps(
        {
            "spec": asdict(spec),
            "pixels_shape": list(data.pixels.shape),
            "num_classes": data.num_classes,
            "sha256": hashlib.sha256(payload).hexdigest(),
        },
        sort_keys=True,
    ).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(SYNTH_MAGIC + struct.pack("<II", SYNTH_FORMAT_VERSION, len(header)))
        fh.write(header)
        fh.write(payload)
    tmp.replace(path)
    return path


def load_synthetic_cache(path):
    """Returns ``(spec, data, styles)``; raises ``FormatError`` on any corruption."""
    raw = Path(path).read_bytes()
    if raw[:8] != SYNTH_MAGIC:
        raise FormatError("not a synthetic dataset cache (bad magic)", offset=0)
    if len(raw) < 16:
        raise FormatError("cache truncated in header", offset=len(raw))
    version, hlen = struct.unpack_from("<II", raw, 8)
    if version != SYNTH_FORMAT_VERSION:
        raise FormatError(f"unsupported cache version {version}", offset=8)
    try:
        header = json.loads(raw[16:16 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable cache header: {exc}", offset=16) from None
    payload = raw[16 + hlen:]
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise FormatError("cache payload hash mismatch", offset=16 + hlen)
    shape = tuple(header["pixels_shape"])
    n_pix = int(np.prod(shape))
    n = shape[0]
    if len(payload) != 4 * n_pix + 16 * n:
        raise FormatError("cache payload has the wrong length", offset=16 + hlen)
    pixels = np.frombuffer(payload, dtype="<f4", count=n_pix).reshape(shape).astype(np.float32)
    labels = np.frombuffer(payload, dtype="<i8", count=n, offset=4 * n_pix).astype(np.int64)
    styles = np.frombuffer(payload, dtype="<i8", count=n, offset=4 * n_pix + 8 * n).astype(np.int64)
    spec = SyntheticSpec(**header["spec"])
    return spec, LabeledImages(pixels, labels, header["num_classes"]), styles


# -- batching ---------------------------------------------------------------

def epoch_permutation(n, shuffle_seed, epoch):
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(shuffle_seed, spawn_key=(epoch,))))
    return rng.permutation(n)


def batches(dataset, batch_size, shuffle_seed=None, epoch=0, check=False):
    """Yield ``ImageBatch`` objects covering ``dataset`` once.

    The order is a fixed function of ``(shuffle_seed, epoch)``; ``None`` keeps
    the stored order. The final partial batch is kept.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be positive, got {batch_size}")
    n = len(dataset)
    order = np.arange(n) if shuffle_seed is None else epoch_permutation(n, shuffle_seed, epoch)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        batch = dataset.as_batch(idx)
        if check:
            _check_batch(batch, dataset.num_classes)
        yield batch


def num_batches(n, batch_size):
    return -(-n // batch_size)


def _check_batch(batch, num_classes):
    px, lab = batch.pixels, batch.labels
    if px.min() < 0 or px.max() > 1:
        raise ConsistencyError("pixels outside [0, 1]")
    if lab.min() < 0 or lab.max() >= num_classes:
        raise ConsistencyError("label out of range")
