"""Synthetic multi-grader segmentation data.

Images contain one to three soft elliptical blobs on a noisy background.
Every grader thresholds the same soft blob map after shifting its boundary
by a grader-specific erosion/dilation radius, so disagreement concentrates
in a band around object edges.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigurationError, DatasetError, ValidationError

SPLITS = ("train", "val", "test")
DEFAULT_RATIOS = (0.70, 0.15, 0.15)

# Largest boundary offset, as a fraction of the shorter image side, reached
# at disagreement = 1.
MAX_OFFSET_FRACTION = 0.1
MIN_SIZE = 8


@dataclass
class ImagePatch:
    id: str
    pixels: np.ndarray  # (H, W) float64 in [0, 1]

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2:
            raise ValidationError(f"image {self.id!r} must be 2-D, got shape {self.pixels.shape}")
        h, w = self.pixels.shape
        if h < MIN_SIZE or w < MIN_SIZE:
            raise ValidationError(f"image {self.id!r} is {h}x{w}; both sides must be >= {MIN_SIZE}")
        if not np.all(np.isfinite(self.pixels)):
            raise ValidationError(f"image {self.id!r} has non-finite intensities")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise ValidationError(f"image {self.id!r} intensities fall outside [0, 1]")

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape


@dataclass
class AnnotationSet:
    masks: np.ndarray  # (D, H, W) uint8 in {0, 1}

    def __post_init__(self):
        masks = np.asarray(self.masks)
        if masks.ndim == 2:
            masks = masks[None]
        if masks.ndim != 3 or masks.shape[0] < 1:
            raise ValidationError(f"annotation masks must have shape (D, H, W) with D >= 1, got {masks.shape}")
        if not np.isin(masks, (0, 1)).all():
            raise ValidationError("annotation masks must be strictly binary (values in {0, 1})")
        self.masks = masks.astype(np.uint8)

    @property
    def grader_count(self) -> int:
        return self.masks.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.masks.shape[1:]


@dataclass
class GraderStats:
    mean_map: np.ndarray
    variance_map: np.ndarray


def grader_stats(annotations: AnnotationSet | np.ndarray) -> GraderStats:
    """Per-pixel grader mean and population variance (divisor D)."""
    if not isinstance(annotations, AnnotationSet):
        annotations = AnnotationSet(annotations)
    d = annotations.grader_count
    ones = annotations.masks.sum(axis=0, dtype=np.int64)
    # For binary y, sum_j (y_j - mean)^2 = ones * (d - ones) / d. Integer
    # arithmetic keeps the result independent of grader order.
    mean = ones / d
    variance = (ones * (d - ones)) / float(d * d)
    return GraderStats(mean_map=mean, variance_map=variance)


@dataclass
class Item:
    image: ImagePatch
    annotations: AnnotationSet
    split: str
    stats: GraderStats = field(init=False)

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValidationError(f"unknown split {self.split!r} for item {self.image.id!r}")
        if self.annotations.shape != self.image.shape:
            raise ValidationError(
                f"item {self.image.id!r}: masks are {self.annotations.shape}, image is {self.image.shape}"
            )
        self.stats = grader_stats(self.annotations)

    @property
    def id(self) -> str:
        return self.image.id


@dataclass
class Dataset:
    items: list[Item]
    height: int
    width: int

    def __post_init__(self):
        ids = [it.id for it in self.items]
        if len(set(ids)) != len(ids):
            raise ValidationError("image ids must be unique across the dataset")
        for it in self.items:
            if it.image.shape != (self.height, self.width):
                raise ValidationError(f"item {it.id!r} is {it.image.shape}, dataset is {(self.height, self.width)}")

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self) -> Iterator[Item]:
        return iter(self.items)

    def subset(self, split: str) -> "Dataset":
        if split not in SPLITS:
            raise ConfigurationError(f"unknown split {split!r}; expected one of {SPLITS}")
        return Dataset([it for it in self.items if it.split == split], self.height, self.width)

    @property
    def ids(self) -> list[str]:
        return [it.id for it in self.items]

    @property
    def grader_count(self) -> int | None:
        counts = {it.annotations.grader_count for it in self.items}
        return counts.pop() if len(counts) == 1 else None


def _parse_size(size) -> tuple[int, int]:
    if isinstance(size, int):
        size = (size, size)
    try:
        h, w = (int(s) for s in size)
    except (TypeError, ValueError):
        raise ConfigurationError(f"size must be an int or an (H, W) pair, got {size!r}") from None
    if h < MIN_SIZE or w < MIN_SIZE:
        raise ConfigurationError(f"size {h}x{w} is too small; both sides must be >= {MIN_SIZE}")
    return h, w


def _disk(radius: float) -> np.ndarray:
    r = int(np.floor(radius))
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return (yy ** 2 + xx ** 2) <= radius ** 2


def soft_blob_map(shape, rng: np.random.Generator, n_blobs: int | None = None) -> np.ndarray:
    """Soft foreground map in [0, 1] made of elliptical blobs with blurred rims."""
    h, w = shape
    short = min(h, w)
    if n_blobs is None:
        n_blobs = int(rng.integers(1, 4))
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    soft = np.zeros(shape)
    for _ in range(n_blobs):
        cy = rng.uniform(0.25, 0.75) * h
        cx = rng.uniform(0.25, 0.75) * w
        a = rng.uniform(0.08, 0.2) * short
        b = rng.uniform(0.08, 0.2) * short
        theta = rng.uniform(0.0, np.pi)
        edge = rng.uniform(1.0, 2.5)
        u = np.cos(theta) * (xx - cx) + np.sin(theta) * (yy - cy)
        v = -np.sin(theta) * (xx - cx) + np.cos(theta) * (yy - cy)
        rho = np.sqrt((u / a) ** 2 + (v / b) ** 2)
        # (1 - rho) * min(a, b) approximates the signed distance to the rim in pixels
        blob = 1.0 / (1.0 + np.exp(-(1.0 - rho) * min(a, b) / edge))
        soft = np.maximum(soft, blob)
    return soft


def grader_masks(soft: np.ndarray, graders: int, disagreement: float, rng: np.random.Generator) -> np.ndarray:
    """Threshold ``soft`` once per grader after a random signed boundary offset."""
    max_radius = disagreement * MAX_OFFSET_FRACTION * min(soft.shape)
    masks = np.empty((graders,) + soft.shape, dtype=np.uint8)
    for j in range(graders):
        radius = rng.uniform(-max_radius, max_radius) if max_radius > 0 else 0.0
        if abs(radius) >= 1.0:
            footprint = _disk(abs(radius))
            op = ndimage.grey_dilation if radius > 0 else ndimage.grey_erosion
            shifted = op(soft, footprint=footprint, mode="nearest")
        else:
            shifted = soft
        masks[j] = shifted >= 0.5
    return masks


def render_image(soft: np.ndarray, rng: np.random.Generator, noise: float = 0.06) -> np.ndarray:
    """Noisy grayscale rendering of ``soft``, quantised to 8-bit levels."""
    background = rng.uniform(0.15, 0.3)
    contrast = rng.uniform(0.35, 0.6)
    pixels = background + contrast * soft + rng.normal(0.0, noise, soft.shape)
    pixels = np.clip(pixels, 0.0, 1.0)
    # 8-bit quantisation keeps PNG storage lossless
    return np.round(pixels * 255.0) / 255.0


def assign_splits(n: int, rng: np.random.Generator, ratios: Sequence[float] = DEFAULT_RATIOS) -> list[str]:
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not np.isclose(sum(ratios), 1.0):
        raise ConfigurationError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    n_train = int(round(ratios[0] * n))
    n_val = min(int(round(ratios[1] * n)), n - n_train)
    order = rng.permutation(n)
    splits = [""] * n
    for rank, idx in enumerate(order):
        if rank < n_train:
            splits[idx] = "train"
        elif rank < n_train + n_val:
            splits[idx] = "val"
        else:
            splits[idx] = "test"
    return splits


def generate_dataset(n_images: int, graders: int, disagreement: float, size=64, seed: int = 0,
                     ratios: Sequence[float] = DEFAULT_RATIOS) -> Dataset:
    """Build a synthetic dataset; bit-identical for equal arguments."""
    if int(n_images) < 1:
        raise ConfigurationError(f"n_images must be >= 1, got {n_images}")
    if int(graders) < 1:
        raise ConfigurationError(f"graders must be >= 1, got {graders}")
    if not (0.0 <= float(disagreement) <= 1.0):
        raise ConfigurationError(f"disagreement must lie in [0, 1], got {disagreement}")
    h, w = _parse_size(size)
    rng = np.random.default_rng(seed)
    splits = assign_splits(int(n_images), rng, ratios)
    items = []
    for i in range(int(n_images)):
        soft = soft_blob_map((h, w), rng)
        pixels = render_image(soft, rng)
        masks = grader_masks(soft, int(graders), float(disagreement), rng)
        items.append(Item(ImagePatch(f"img{i:05d}", pixels), AnnotationSet(masks), splits[i]))
    return Dataset(items, h, w)


# -- on-disk format ---------------------------------------------------------

def _write_png(path: Path, array: np.ndarray):
    Image.fromarray(array.astype(np.uint8)).save(path)


def _read_png(path: Path) -> np.ndarray:
    if not path.is_file():
        raise DatasetError(f"missing file referenced by manifest: {path}")
    with Image.open(path) as im:
        return np.asarray(im.convert("L"))


def save_dataset(dataset: Dataset, directory) -> Path:
    """Write PNGs plus ``manifest.json``; returns the manifest path."""
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    entries = []
    for it in dataset.items:
        image_rel = f"images/{it.id}.png"
        _write_png(root / image_rel, np.round(it.image.pixels * 255.0))
        mask_rels = []
        for j, mask in enumerate(it.annotations.masks):
            rel = f"masks/{it.id}_g{j}.png"
            _write_png(root / rel, mask * 255)
            mask_rels.append(rel)
        entries.append({"id": it.id, "image": image_rel, "masks": mask_rels, "split": it.split})
    manifest = {"items": entries, "height": dataset.height, "width": dataset.width}
    if dataset.grader_count is not None:
        manifest["graders"] = dataset.grader_count
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


def load_dataset(manifest_path) -> Dataset:
    """Read a dataset written by :func:`save_dataset` (paths relative to the manifest)."""
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    if not manifest_path.is_file():
        raise DatasetError(f"manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
        entries = manifest["items"]
        height, width = int(manifest["height"]), int(manifest["width"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"malformed manifest {manifest_path}: {exc}") from None
    graders = manifest.get("graders")
    root = manifest_path.parent
    items = []
    for entry in entries:
        if graders is not None and len(entry["masks"]) != graders:
            raise DatasetError(
                f"item {entry['id']!r} lists {len(entry['masks'])} masks but manifest declares {graders} graders"
            )
        pixels = _read_png(root / entry["image"]).astype(np.float64) / 255.0
        masks = []
        for rel in entry["masks"]:
            raw = _read_png(root / rel)
            if not np.isin(raw, (0, 255)).all():
                raise DatasetError(f"mask {root / rel} is not binary (expected pixel values 0 and 255)")
            masks.append((raw >= 128).astype(np.uint8))
        try:
            item = Item(ImagePatch(entry["id"], pixels), AnnotationSet(np.stack(masks)), entry["split"])
        except ValidationError as exc:
            raise DatasetError(f"invalid item in {manifest_path}: {exc}") from None
        items.append(item)
    try:
        return Dataset(items, height, width)
    except ValidationError as exc:
        raise DatasetError(f"invalid dataset {manifest_path}: {exc}") from None
