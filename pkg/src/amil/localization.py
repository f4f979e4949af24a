"""Attention heatmaps over the patch grid, overlays and recall@k scoring."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Iterable

import numpy as np

from .bags import Bag, SourceImage, TilingSpec
from .errors import ContractError
from .tensor import Tensor

DEFAULT_ALPHA = 0.4


@lru_cache(maxsize=1)
def colormap() -> np.ndarray:
    """The packaged 256×3 uint8 blue→red lookup table."""
    text = resources.files("amil").joinpath("data/colormap.csv").read_text(encoding="utf-8")
    rows = list(csv.reader(text.splitlines()))[1:]
    lut = np.array([[int(r), int(g), int(b)] for _, r, g, b in rows], dtype=np.uint8)
    if lut.shape != (256, 3):
        raise RuntimeError(f"colormap table has shape {lut.shape}, expected (256, 3)")
    lut.setflags(write=False)
    return lut


@dataclass
class Heatmap:
    """Raw per-patch weights on the tiling grid plus the min/max used for display."""

    weights: np.ndarray  # rows×cols, unnormalized
    tiling: TilingSpec
    origins: list[tuple[int, int]]
    vmin: float
    vmax: float

    @property
    def grid(self) -> tuple[int, int]:
        return self.weights.shape

    @property
    def normalized(self) -> np.ndarray:
        if self.vmax == self.vmin:
            return np.full(self.weights.shape, 0.5)
        return (self.weights - self.vmin) / (self.vmax - self.vmin)

    def flat(self) -> np.ndarray:
        return self.weights.reshape(-1)


def scores_to_heatmap(scores, bag: Bag) -> Heatmap:
    """Lay any per-instance scores on the bag's grid in row-major order."""
    values = np.asarray(scores.data if isinstance(scores, Tensor) else scores, dtype=np.float64).reshape(-1)
    rows, cols = bag.grid
    if values.size != rows * cols or values.size != len(bag):
        raise ContractError(f"{values.size} scores for a bag of {len(bag)} patches on a {rows}×{cols} grid")
    return Heatmap(values.reshape(rows, cols).copy(), bag.tiling, list(bag.origins),
                   float(values.min()), float(values.max()))


def attention_to_heatmap(attention, bag: Bag) -> Heatmap:
    """``attention`` is an AttentionOutput, a Tensor, or an array of weights summing to 1."""
    weights = getattr(attention, "weights", attention)
    heat = scores_to_heatmap(weights, bag)
    total = heat.weights.sum()
    if abs(total - 1.0) > 1e-6:
        raise ContractError(f"attention weights sum to {total}, not 1")
    return heat


def render_overlay(image: SourceImage, heatmap: Heatmap, alpha: float = DEFAULT_ALPHA) -> SourceImage:
    """Alpha-blend each patch cell with the colormap colour of its normalized weight.

    Pixels outside the tiled grid keep their value.  Where patches overlap the
    later patch in row-major order sets the colour.
    """
    if not 0 <= alpha <= 1:
        raise ContractError(f"alpha must be in [0, 1], got {alpha}")
    if heatmap.tiling.grid(image.width, image.height) != heatmap.grid:
        raise ContractError(
            f"heatmap grid {heatmap.grid} does not match {image.width}×{image.height} tiled by {heatmap.tiling}"
        )
    if alpha == 0:
        return SourceImage(image.pixels.copy(), image.label, image.identifier)
    lut = colormap()
    idx = np.rint(heatmap.normalized.reshape(-1) * 255).astype(int)
    s = heatmap.tiling.patch_size
    layer = np.zeros(image.pixels.shape, dtype=np.float64)
    covered = np.zeros(image.pixels.shape[:2], dtype=bool)
    for p, (y, x) in enumerate(heatmap.origins):
        layer[y:y + s, x:x + s] = lut[idx[p]]
        covered[y:y + s, x:x + s] = True
    out = image.pixels.copy()
    blended = (1 - alpha) * image.pixels[covered].astype(np.float64) + alpha * layer[covered]
    out[covered] = np.clip(np.rint(blended), 0, 255).astype(np.uint8)
    return SourceImage(out, image.label, image.identifier)


def top_k(heatmap: Heatmap, k: int) -> list[int]:
    """Indices of the ``k`` largest weights; ties go to the lower row-major index."""
    w = heatmap.flat()
    if not 1 <= k <= w.size:
        raise ContractError(f"k must be in [1, {w.size}], got {k}")
    order = np.lexsort((np.arange(w.size), -w))
    return [int(p) for p in order[:k]]


def localization_score(heatmap: Heatmap, truth_cells: Iterable[int], k: int) -> float:
    """recall@k: ``|top-k ∩ truth| / min(k, |truth|)``."""
    truth = {int(c) for c in truth_cells}
    if not truth:
        raise ContractError("localization_score needs at least one truth cell")
    hits = len(set(top_k(heatmap, k)) & truth)
    return hits / min(k, len(truth))


def write_heatmap_csv(path, heatmap: Heatmap) -> None:
    """Raw (unnormalized) weights, one grid row per line."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for row in heatmap.weights:
            writer.writerow([repr(float(v)) for v in row])


def read_heatmap_csv(path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        return np.array([[float(v) for v in row] for row in csv.reader(fh) if row])
