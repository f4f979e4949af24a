"""From labelled images to bags of patches.

Images are tiled on a regular grid (partial patches at the right and bottom
edges are dropped), flipped or rotated for augmentation, read from a folder
plus labels CSV, split into train/validation, or generated synthetically with
known motif locations for localization scoring.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ContractError, GeometryError, IngestionError
from .imageio import read_image
from .tensor import Tensor

TRANSFORMS = ("identity", "hflip", "vflip", "rot90", "rot180", "rot270")


@dataclass
class SourceImage:
    """An 8-bit RGB image, stored ``height×width×3``, with a binary label."""

    pixels: np.ndarray
    label: int = 0
    identifier: str = ""

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.dtype != np.uint8 or self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ContractError(f"pixels must be uint8 H×W×3, got {self.pixels.dtype} {self.pixels.shape}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return 3


@dataclass(frozen=True)
class TilingSpec:
    patch_size: int = 28
    stride: int = 28

    def __post_init__(self):
        if self.patch_size < 1 or self.stride < 1:
            raise ContractError(f"patch_size and stride must be >= 1, got {self.patch_size}, {self.stride}")

    def grid(self, width: int, height: int) -> tuple[int, int]:
        s = self.patch_size
        if width < s or height < s:
            raise GeometryError(f"{width}×{height} image is smaller than one {s}×{s} patch")
        return (height - s) // self.stride + 1, (width - s) // self.stride + 1


@dataclass
class Bag:
    """Patches of one image in row-major grid order.

    ``patches`` is an ``m×3×s×s`` float array scaled to ``[0, 1]``;
    ``origins[p]`` is the ``(row, col)`` pixel of patch ``p``'s top-left corner.
    """

    patches: np.ndarray
    grid: tuple[int, int]
    origins: list[tuple[int, int]]
    label: int
    identifier: str = ""
    tiling: TilingSpec = field(default_factory=TilingSpec)

    def __len__(self) -> int:
        return len(self.patches)

    def patch(self, p: int) -> Tensor:
        return Tensor(self.patches[p])


def tile(image: SourceImage, spec: TilingSpec = TilingSpec(), dtype=np.float32) -> Bag:
    rows, cols = spec.grid(image.width, image.height)
    s, st = spec.patch_size, spec.stride
    scaled = (image.pixels / 255.0).astype(dtype)
    chw = np.moveaxis(scaled, 2, 0)
    patches = np.empty((rows * cols, 3, s, s), dtype=scaled.dtype)
    origins = []
    for r in range(rows):
        for c in range(cols):
            y, x = r * st, c * st
            patches[r * cols + c] = chw[:, y:y + s, x:x + s]
            origins.append((y, x))
    return Bag(patches, (rows, cols), origins, int(image.label), image.identifier, spec)


def augment(image: SourceImage, transform: str) -> SourceImage:
    """Exact pixel permutation; rotations are counter-clockwise."""
    px = image.pixels
    if transform == "identity":
        out = px
    elif transform == "hflip":
        out = px[:, ::-1]
    elif transform == "vflip":
        out = px[::-1]
    elif transform in ("rot90", "rot180", "rot270"):
        out = np.rot90(px, k=int(transform[3:]) // 90, axes=(0, 1))
    else:
        raise ContractError(f"unknown transform {transform!r}; expected one of {TRANSFORMS}")
    return SourceImage(np.ascontiguousarray(out), image.label, image.identifier)


def load_dataset(root_path, labels_file) -> list[SourceImage]:
    """Read ``path,label`` rows (header optional) and the images they name."""
    labels_path = labels_file if os.path.isabs(str(labels_file)) else os.path.join(root_path, labels_file)
    if not os.path.exists(labels_path) and os.path.exists(labels_file):
        labels_path = labels_file
    try:
        with open(labels_path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise IngestionError(f"cannot read labels file {labels_path}: {exc}") from exc

    images = []
    for lineno, row in enumerate(rows, start=1):
        if not row or not "".join(row).strip():
            continue
        if len(row) != 2:
            raise IngestionError(f"{labels_path}:{lineno}: expected 'path,label', got {row!r}")
        rel, raw_label = row[0].strip(), row[1].strip()
        if lineno == 1 and not raw_label.lstrip("-").isdigit():
            continue  # header
        if raw_label not in ("0", "1"):
            raise IngestionError(f"{labels_path}:{lineno}: label must be 0 or 1, got {raw_label!r}")
        path = os.path.join(root_path, rel)
        try:
            pixels = read_image(path)
        except FileNotFoundError as exc:
            raise IngestionError(f"{labels_path}:{lineno}: missing image {path}") from exc
        except IngestionError as exc:
            raise IngestionError(f"{labels_path}:{lineno}: {exc}") from exc
        images.append(SourceImage(pixels, int(raw_label), rel))
    return images


def split_train_val(dataset: Sequence, fraction: float = 0.8, seed: int = 0) -> tuple[list, list]:
    """Seeded shuffle, then the first ``round(fraction·n)`` items go to training."""
    if not 0 < fraction < 1:
        raise ContractError(f"fraction must be in (0, 1), got {fraction}")
    n = len(dataset)
    if n == 0:
        raise ContractError("cannot split an empty dataset")
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fraction * n))
    if n >= 2:
        n_train = min(max(n_train, 1), n - 1)
    return [dataset[i] for i in order[:n_train]], [dataset[i] for i in order[n_train:]]


# ----------------------------------------------------------------------------
# synthetic motif bags

BACKGROUND_RGB = np.array([226.0, 178.0, 204.0])
MOTIF_RGB = np.array([70.0, 28.0, 96.0])


@dataclass
class SyntheticSample:
    image: SourceImage
    motif_cells: tuple[int, ...]
    grid: tuple[int, int]

    @property
    def instance_labels(self) -> list[int]:
        rows, cols = self.grid
        cells = set(self.motif_cells)
        return [int(p in cells) for p in range(rows * cols)]


def _background(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    noise = rng.standard_normal((height, width, 3))
    smooth = gaussian_filter(noise, sigma=(2.5, 2.5, 0), mode="wrap")
    smooth /= smooth.std() + 1e-12
    shade = gaussian_filter(rng.standard_normal((height, width)), sigma=8, mode="wrap")
    shade /= shade.std() + 1e-12
    return BACKGROUND_RGB + 12.0 * smooth + 10.0 * shade[..., None]


def _plant_disc(img: np.ndarray, rng: np.random.Generator, top: int, left: int, size: int) -> None:
    radius = rng.uniform(0.2, 0.3) * size
    margin = int(np.ceil(radius)) + 1
    cy = rng.uniform(top + margin, top + size - margin)
    cx = rng.uniform(left + margin, left + size - margin)
    yy, xx = np.mgrid[top:top + size, left:left + size]
    inside = (yy + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2 <= radius**2
    region = img[top:top + size, left:left + size]
    region[inside] = MOTIF_RGB + rng.normal(0.0, 6.0, size=(int(inside.sum()), 3))


def synth_generate(
    n_bags: int,
    grid: tuple[int, int] = (5, 5),
    patch_size: int = 28,
    positive_fraction: float = 0.5,
    motif_rate: float = 0.15,
    seed: int = 0,
) -> list[SyntheticSample]:
    """Images on a ``rows×cols`` patch grid over smooth pink noise.

    Exactly ``round(positive_fraction·n_bags)`` images are positive; each
    positive image gets a dark disc in every cell drawn with probability
    ``motif_rate`` (redrawn until at least one cell is chosen).  Negative
    images carry no discs.
    """
    if n_bags < 0:
        raise ContractError(f"n_bags must be >= 0, got {n_bags}")
    if not 0 < motif_rate <= 1:
        raise ContractError(f"motif_rate must be in (0, 1], got {motif_rate}")
    if not 0 <= positive_fraction <= 1:
        raise ContractError(f"positive_fraction must be in [0, 1], got {positive_fraction}")
    rows, cols = grid
    if rows < 1 or cols < 1 or patch_size < 1:
        raise ContractError(f"bad grid {grid} or patch size {patch_size}")

    root = np.random.SeedSequence(seed)
    label_rng, *bag_seeds = (np.random.default_rng(s) for s in root.spawn(n_bags + 1))
    n_pos = int(round(positive_fraction * n_bags))
    labels = np.zeros(n_bags, dtype=int)
    labels[label_rng.permutation(n_bags)[:n_pos]] = 1

    samples = []
    digits = max(3, len(str(max(n_bags - 1, 0))))
    for i, (label, rng) in enumerate(zip(labels, bag_seeds)):
        img = _background(rng, rows * patch_size, cols * patch_size)
        cells: tuple[int, ...] = ()
        if label:
            chosen = np.zeros(rows * cols, dtype=bool)
            while not chosen.any():
                chosen = rng.random(rows * cols) < motif_rate
            cells = tuple(int(p) for p in np.flatnonzero(chosen))
            for p in cells:
                _plant_disc(img, rng, (p // cols) * patch_size, (p % cols) * patch_size, patch_size)
        pixels = np.clip(np.rint(img), 0, 255).astype(np.uint8)
        samples.append(SyntheticSample(SourceImage(pixels, int(label), f"bag_{i:0{digits}d}"), cells, (rows, cols)))
    return samples
