"""Bounding boxes, IoU and the pixel <-> coordinate-token mapping.

Boxes are ``[x1, y1, x2, y2]`` in pixels on a square image of side
``image_size``. One token bin per pixel, so bin ``k`` covers ``[k, k + 1)``
and dequantizes to its left edge ``k``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float
    image_size: int

    def __post_init__(self):
        if not isinstance(self.image_size, int) or self.image_size <= 0:
            raise GeometryError(f"image_size must be a positive int, got {self.image_size!r}")
        for v in (self.x1, self.y1, self.x2, self.y2):
            if not math.isfinite(v) or v < 0 or v > self.image_size:
                raise GeometryError(f"coordinate {v} outside [0, {self.image_size}]")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise GeometryError(f"box {self.as_list()} is not canonical (use canonicalize)")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def degenerate(self) -> bool:
        return self.width == 0 or self.height == 0

    def as_list(self) -> list:
        return [self.x1, self.y1, self.x2, self.y2]

    def inside(self, other: "BBox") -> bool:
        return (self.x1 >= other.x1 and self.y1 >= other.y1
                and self.x2 <= other.x2 and self.y2 <= other.y2)

    @classmethod
    def from_list(cls, coords: Sequence[float], image_size: int) -> "BBox":
        if len(coords) != 4:
            raise GeometryError(f"expected 4 coordinates, got {len(coords)}")
        return cls(*(float(c) if not float(c).is_integer() else int(c) for c in coords),
                   image_size=image_size)


@dataclass(frozen=True)
class TokenSequence:
    tokens: tuple
    num_bins: int

    def __post_init__(self):
        if len(self.tokens) != 4:
            raise GeometryError(f"a token sequence has exactly 4 tokens, got {len(self.tokens)}")
        for t in self.tokens:
            if int(t) != t or not 0 <= t < self.num_bins:
                raise GeometryError(f"token {t} outside [0, {self.num_bins})")
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))


def canonicalize(x1: float, y1: float, x2: float, y2: float, image_size: int) -> BBox:
    """Sort the corners so that x1 <= x2 and y1 <= y2.

    Accepts either raw coordinates or (via :func:`canonical`) an existing box.
    """
    for v in (x1, y1, x2, y2):
        if v < 0 or v > image_size:
            raise GeometryError(f"coordinate {v} outside [0, {image_size}]")
    return BBox(min(x1, x2), min(y1, y2), max(x1, x2), max(y1, y2), image_size)


def canonical(b: BBox) -> BBox:
    return canonicalize(b.x1, b.y1, b.x2, b.y2, b.image_size)


def iou(a: BBox, b: BBox) -> float:
    if a.image_size != b.image_size:
        raise GeometryError(f"image_size mismatch: {a.image_size} vs {b.image_size}")
    if a == b:
        return 1.0
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union


def one_minus_iou(a: BBox, b: BBox) -> float:
    """Matching cost. Used instead of 1/IoU, which blows up for disjoint boxes."""
    return 1.0 - iou(a, b)


def quantize(b: BBox, num_bins: int | None = None) -> TokenSequence:
    num_bins = b.image_size if num_bins is None else num_bins
    if num_bins != b.image_size:
        raise GeometryError("one bin per pixel: num_bins must equal image_size")
    toks = tuple(min(max(int(math.floor(c)), 0), num_bins - 1) for c in b.as_list())
    return TokenSequence(toks, num_bins)


def dequantize(t: TokenSequence) -> BBox:
    x1, y1, x2, y2 = t.tokens
    return canonicalize(x1, y1, x2, y2, t.num_bins)


def iou_matrix(a, b) -> "np.ndarray":
    """Pairwise IoU between two lists of boxes (or (N, 4) / (M, 4) arrays)."""
    import numpy as np

    A = np.array([x.as_list() for x in a] if a and isinstance(a[0], BBox) else a, dtype=np.float64).reshape(-1, 4)
    B = np.array([x.as_list() for x in b] if b and isinstance(b[0], BBox) else b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(A[:, None, 2], B[None, :, 2]) - np.maximum(A[:, None, 0], B[None, :, 0])
    ih = np.minimum(A[:, None, 3], B[None, :, 3]) - np.maximum(A[:, None, 1], B[None, :, 1])
    inter = np.where((iw > 0) & (ih > 0), iw * ih, 0.0)
    area_a = (A[:, 2] - A[:, 0]) * (A[:, 3] - A[:, 1])
    area_b = (B[:, 2] - B[:, 0]) * (B[:, 3] - B[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(inter > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    same = (A[:, None, :] == B[None, :, :]).all(-1)
    return np.where(same, 1.0, out)
