"""Visual prompts and their rasterisation into prompt images.

A record carries K prompts of one kind (whole image, boxes or points), each
with a unique mark index in 1..K. Rasterisation paints every prompt into one
(H, W, 3) float image: pixels covered by mark i take intensity i/K in all
three channels, overlaps resolve to the larger mark, everything else is 0.
Boxes fill the half-open rect [x1, x2) x [y1, y2); points fill the Euclidean
disk of `point_radius` pixels around their centre.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .images import write_pgm


class PromptError(ValueError):
    pass


class PromptKind(str, Enum):
    IMAGE = "image"
    BOX = "box"
    POINT = "point"


class Level(str, Enum):
    IMAGE = "image"
    REGION = "region"
    POINT = "point"


_KIND_TO_LEVEL = {
    PromptKind.IMAGE: Level.IMAGE,
    PromptKind.BOX: Level.REGION,
    PromptKind.POINT: Level.POINT,
}


@dataclass(frozen=True)
class PromptSpec:
    kind: PromptKind
    coords: tuple[float, ...]
    mark: int

    def validate(self, width: int, height: int) -> None:
        if self.mark < 1:
            raise PromptError(f"mark index must be >= 1, got {self.mark}")
        if self.kind is PromptKind.IMAGE:
            if tuple(self.coords) != (0, 0, width, height):
                raise PromptError(
                    f"image-level prompt must span (0, 0, {width}, {height}), got {self.coords}"
                )
        elif self.kind is PromptKind.BOX:
            if len(self.coords) != 4:
                raise PromptError(f"box prompt needs 4 coords, got {self.coords}")
            x1, y1, x2, y2 = self.coords
            if not (0 <= x1 < x2 <= width and 0 <= y1 < y2 <= height):
                raise PromptError(
                    f"box {self.coords} outside image {width}x{height} or degenerate"
                )
        elif self.kind is PromptKind.POINT:
            if len(self.coords) != 2:
                raise PromptError(f"point prompt needs 2 coords, got {self.coords}")
            x, y = self.coords
            if not (0 <= x < width and 0 <= y < height):
                raise PromptError(f"point {self.coords} outside image {width}x{height}")
        else:  # pragma: no cover - enum is closed
            raise PromptError(f"unknown prompt kind {self.kind}")


def level_of(prompts: Sequence[PromptSpec]) -> Level:
    """Granularity of a homogeneous prompt set (the task selector)."""
    if not prompts:
        raise PromptError("level_of: empty prompt list")
    kinds = {p.kind for p in prompts}
    if len(kinds) > 1:
        raise PromptError(f"mixed prompt kinds in one record: {sorted(k.value for k in kinds)}")
    return _KIND_TO_LEVEL[prompts[0].kind]


def lambda_selector(level: Level) -> tuple[int, int, int]:
    """One-hot (image, region, point) granularity gate."""
    return {
        Level.IMAGE: (1, 0, 0),
        Level.REGION: (0, 1, 0),
        Level.POINT: (0, 0, 1),
    }[level]


def default_point_radius(width: int, height: int) -> int:
    return max(1, round(0.01 * min(width, height)))


@dataclass(frozen=True)
class PromptImage:
    width: int
    height: int
    data: np.ndarray  # (H, W, 3) float64 in [0, 1]


def validate_prompts(prompts: Sequence[PromptSpec], width: int, height: int) -> None:
    """Reject empty, mixed-kind, duplicate-mark or out-of-bounds prompt sets."""
    level_of(prompts)  # non-empty + homogeneous
    marks = [p.mark for p in prompts]
    if len(set(marks)) != len(marks):
        raise PromptError(f"duplicate mark indices: {sorted(marks)}")
    k = len(prompts)
    if max(marks) > k:
        raise PromptError(
            f"mark indices must cover 1..{k} so intensities stay in [0, 1], got {sorted(marks)}"
        )
    for p in prompts:
        p.validate(width, height)


def rasterize(
    prompts: Sequence[PromptSpec],
    width: int,
    height: int,
    point_radius: int | None = None,
) -> PromptImage:
    """Paint prompts into an (H, W, 3) intensity image.

    Painting happens in ascending mark order, so wherever prompts overlap the
    larger mark index wins regardless of list order.
    """
    if width < 1 or height < 1:
        raise PromptError(f"rasterize: bad image size {width}x{height}")
    if not prompts:
        return PromptImage(width, height, np.zeros((height, width, 3), dtype=np.float64))
    validate_prompts(prompts, width, height)
    radius = default_point_radius(width, height) if point_radius is None else point_radius
    if radius < 1:
        raise PromptError(f"point_radius must be >= 1, got {radius}")

    k = len(prompts)
    canvas = np.zeros((height, width), dtype=np.float64)
    for p in sorted(prompts, key=lambda q: q.mark):
        value = p.mark / k
        if p.kind in (PromptKind.IMAGE, PromptKind.BOX):
            x1, y1, x2, y2 = p.coords
            canvas[math.ceil(y1) : math.ceil(y2), math.ceil(x1) : math.ceil(x2)] = value
        else:
            x, y = p.coords
            x_lo = max(0, math.floor(x - radius))
            x_hi = min(width - 1, math.ceil(x + radius))
            y_lo = max(0, math.floor(y - radius))
            y_hi = min(height - 1, math.ceil(y + radius))
            ys, xs = np.mgrid[y_lo : y_hi + 1, x_lo : x_hi + 1]
            inside = (xs - x) ** 2 + (ys - y) ** 2 <= radius * radius
            canvas[y_lo : y_hi + 1, x_lo : x_hi + 1][inside] = value
    return PromptImage(width, height, np.repeat(canvas[:, :, None], 3, axis=2))


def dump_pgm(prompt_image: PromptImage, path: str | Path) -> None:
    """Debug dump of the raster as an 8-bit PGM."""
    write_pgm(path, np.rint(prompt_image.data[:, :, 0] * 255.0).astype(np.int64))
