"""Dataset ingestion (IDX and CSV), synthetic blob generation, and resizing.

All loaders produce images as (n, C, H, W) float64 arrays with pixel values
in [0, 1], plus optional integer truth labels.
"""

from __future__ import annotations

import csv as csv_module
import math
import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray          # (n, C, H, W), values in [0, 1]
    labels: np.ndarray | None   # (n,) ints, or None
    name: str = ""
    note: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape[0] != self.images.shape[0]:
                raise ValueError(
                    f"Dataset: {self.labels.shape[0]} labels for "
                    f"{self.images.shape[0]} images")

    def __len__(self):
        return self.images.shape[0]

    @property
    def shape(self):
        return self.images.shape[1:]


def _read_be32(f, path, what):
    raw = f.read(4)
    if len(raw) != 4:
        raise ValueError(f"{path}: truncated while reading {what}")
    return struct.unpack(">I", raw)[0]


def load_idx(images_path, labels_path=None) -> Dataset:
    """Parse big-endian IDX image (and optional label) files.

    Image magic 0x00000803 with dims (n, H, W); label magic 0x00000801 with
    dim (n). Pixels are scaled to [0, 1] by dividing by 255; C = 1.
    """
    with open(images_path, "rb") as f:
        magic = _read_be32(f, images_path, "magic")
        if magic != IDX_IMAGE_MAGIC:
            raise ValueError(
                f"{images_path}: bad image magic 0x{magic:08x}, "
                f"expected 0x{IDX_IMAGE_MAGIC:08x}")
        n = _read_be32(f, images_path, "count")
        h = _read_be32(f, images_path, "height")
        w = _read_be32(f, images_path, "width")
        raw = f.read(n * h * w)
        if len(raw) != n * h * w:
            raise ValueError(
                f"{images_path}: truncated pixel data, expected {n * h * w} "
                f"bytes, got {len(raw)}")
    images = np.frombuffer(raw, dtype=np.uint8).reshape(n, 1, h, w) / 255.0

    labels = None
    if labels_path is not None:
        with open(labels_path, "rb") as f:
            magic = _read_be32(f, labels_path, "magic")
            if magic != IDX_LABEL_MAGIC:
                raise ValueError(
                    f"{labels_path}: bad label magic 0x{magic:08x}, "
                    f"expected 0x{IDX_LABEL_MAGIC:08x}")
            ln = _read_be32(f, labels_path, "count")
            if ln != n:
                raise ValueError(
                    f"label count {ln} does not match image count {n}")
            raw = f.read(ln)
            if len(raw) != ln:
                raise ValueError(f"{labels_path}: truncated label data")
        labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    return Dataset(images, labels, name=str(images_path))


def write_idx(images_path, images, labels_path=None, labels=None) -> None:
    """Write IDX files (test fixtures, round-trip checks)."""
    images = np.asarray(images)
    n, h, w = images.shape[0], images.shape[-2], images.shape[-1]
    pixels = np.clip(np.round(images.reshape(n, h, w) * 255.0), 0, 255)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, h, w))
        f.write(pixels.astype(np.uint8).tobytes())
    if labels_path is not None:
        with open(labels_path, "wb") as f:
            f.write(struct.pack(">II", IDX_LABEL_MAGIC, len(labels)))
            f.write(np.asarray(labels, dtype=np.uint8).tobytes())


def _is_number(token: str) -> bool:
    try:
        float(token)
        return True
    except ValueError:
        return False


def load_csv(path, channels: int, height: int, width: int) -> Dataset:
    """Rows of pixel values, optionally preceded by an integer label.

    A non-numeric first row is treated as a header. Values above 1 anywhere
    mark 0..255 pixel data, which is scaled down by 255.
    """
    pixel_count = channels * height * width
    rows = []
    labels = []
    has_labels = None
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv_module.reader(f)
        for lineno, row in enumerate(reader, start=1):
            if not row:
                continue
            if lineno == 1 and not all(_is_number(tok) for tok in row):
                continue  # header
            if has_labels is None:
                if len(row) == pixel_count:
                    has_labels = False
                elif len(row) == pixel_count + 1:
                    has_labels = True
                else:
                    raise ValueError(
                        f"{path}: row {lineno} has {len(row)} values, "
                        f"expected {pixel_count} or {pixel_count + 1}")
            expected = pixel_count + (1 if has_labels else 0)
            if len(row) != expected:
                raise ValueError(
                    f"{path}: row {lineno} has {len(row)} values, "
                    f"expected {expected}")
            values = [float(tok) for tok in row]
            if has_labels:
                labels.append(int(values[0]))
                values = values[1:]
            rows.append(values)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    images = np.array(rows).reshape(len(rows), channels, height, width)
    if images.max() > 1.0:
        images = images / 255.0
    return Dataset(images, np.array(labels) if has_labels else None,
                   name=str(path))


@dataclass(frozen=True)
class BlobSpec:
    """Isotropic 2-D Gaussian clusters lifted into flat image vectors."""

    per_cluster: int
    clusters: int
    means: np.ndarray        # (K, 2)
    sigma: float
    lift_dim: int
    seed: int

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError(f"BlobSpec: sigma must be positive, got {self.sigma}")
        means = np.asarray(self.means, dtype=np.float64)
        if means.shape != (self.clusters, 2):
            raise ValueError(
                f"BlobSpec: means must be ({self.clusters}, 2), got {means.shape}")
        if len({tuple(m) for m in means}) != self.clusters:
            raise ValueError("BlobSpec: cluster means must be pairwise distinct")
        object.__setattr__(self, "means", means)


def circle_means(clusters: int, separation: float) -> np.ndarray:
    """Cluster means equally spaced on a circle, adjacent pairs ``separation`` apart."""
    if clusters == 1:
        return np.zeros((1, 2))
    angles = 2 * np.pi * np.arange(clusters) / clusters
    # chord between adjacent means is 2 R sin(pi / K)
    radius = separation / (2 * np.sin(np.pi / clusters))
    return radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def _blob_image_side(lift_dim: int) -> int:
    side = math.isqrt(lift_dim)
    if side * side != lift_dim or side % 4:
        valid = [s * s for s in range(4, max(8, side + 5), 4)]
        nearest = min(valid, key=lambda v: abs(v - lift_dim))
        raise ValueError(
            f"make_blobs: lift_dim {lift_dim} is not a square with sides "
            f"divisible by 4; nearest valid value is {nearest}")
    return side


def make_blobs(spec: BlobSpec) -> Dataset:
    """Gaussian clusters in the plane, lifted by a seeded orthonormal map.

    The lift preserves the cluster geometry; pixel values are min-max
    rescaled to [0, 1] and reshaped to single-channel square images.
    """
    side = _blob_image_side(spec.lift_dim)
    rng = np.random.default_rng(spec.seed)
    points = np.concatenate([
        rng.normal(mean, spec.sigma, size=(spec.per_cluster, 2))
        for mean in spec.means
    ])
    labels = np.repeat(np.arange(spec.clusters), spec.per_cluster)
    basis, _ = np.linalg.qr(rng.normal(size=(spec.lift_dim, 2)))
    lifted = points @ basis.T
    lo, hi = lifted.min(), lifted.max()
    if hi == lo:
        lifted = np.full_like(lifted, 0.5)
    else:
        lifted = (lifted - lo) / (hi - lo)
    images = lifted.reshape(-1, 1, side, side)
    return Dataset(images, labels, name=f"blobs(seed={spec.seed})",
                   note=f"{spec.clusters} clusters x {spec.per_cluster}")


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of one (C, H, W) image, corners aligned to corners."""
    if out_h <= 0 or out_w <= 0:
        raise ValueError(f"resize: target {out_h}x{out_w} must be positive")
    image = np.asarray(image, dtype=np.float64)
    c, h, w = image.shape
    if (h, w) == (out_h, out_w):
        return image.copy()
    ys = np.linspace(0.0, h - 1.0, out_h) if out_h > 1 else np.zeros(1)
    xs = np.linspace(0.0, w - 1.0, out_w) if out_w > 1 else np.zeros(1)
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[None, :, None]
    fx = (xs - x0)[None, None, :]
    top = image[:, y0][:, :, x0] * (1 - fx) + image[:, y0][:, :, x1] * fx
    bottom = image[:, y1][:, :, x0] * (1 - fx) + image[:, y1][:, :, x1] * fx
    return top * (1 - fy) + bottom * fy


def resize_pad(image: np.ndarray, out_h: int, out_w: int,
               mode: str = "resize") -> np.ndarray:
    """Bring an image to (out_h, out_w): bilinear resize (default) or
    centered zero padding."""
    if mode == "resize":
        return resize_bilinear(image, out_h, out_w)
    if mode != "pad":
        raise ValueError(f"resize_pad: unknown mode {mode!r}")
    image = np.asarray(image, dtype=np.float64)
    c, h, w = image.shape
    if out_h < h or out_w < w:
        raise ValueError(
            f"resize_pad: cannot pad {h}x{w} down to {out_h}x{out_w}")
    out = np.zeros((c, out_h, out_w))
    top = (out_h - h) // 2
    left = (out_w - w) // 2
    out[:, top:top + h, left:left + w] = image
    return out


def resize_dataset(dataset: Dataset, out_h: int, out_w: int) -> Dataset:
    images = np.stack([
        resize_bilinear(img, out_h, out_w) for img in dataset.images
    ])
    return Dataset(np.clip(images, 0.0, 1.0), dataset.labels,
                   name=dataset.name, note=f"{dataset.note} resized {out_h}x{out_w}")
