"""Binary mask geometry on a fixed pixel canvas.

Masks are stored run-length encoded in row-major order, background run
first (the leading run may be 0, interior runs may not). The same runs
drive the text interchange form ``WxH:n0,n1,...`` used in dataset files
and API payloads.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    CanvasMismatchError,
    CorruptMaskError,
    EmptyMaskError,
    InvalidCanvasError,
    NumericalDegenerateError,
    OutOfBoundsError,
)

# Added to both diagonal entries of every pixel covariance so single-pixel
# and collinear masks stay positive definite.
COVARIANCE_REGULARIZER = 0.25

UNLABELED = -1


@dataclass(frozen=True)
class Canvas:
    """Pixel grid all masks of one image share."""

    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise InvalidCanvasError(f"canvas must be at least 1x1, got {self.width}x{self.height}")

    @property
    def pixel_count(self) -> int:
        return self.width * self.height

    def __str__(self):
        return f"{self.width}x{self.height}"


@dataclass(frozen=True)
class Point:
    """Image location; real-valued for simulated clicks, truncated to pixels."""

    x: float
    y: float

    def pixel(self) -> tuple[int, int]:
        """Column/row of the pixel containing this point (floor semantics)."""
        return math.floor(self.x), math.floor(self.y)


@dataclass(frozen=True)
class SpatialMoments:
    """Center of mass, second central moments (regularized), and area."""

    center: Point
    covariance: np.ndarray  # 2x2, axes ordered (x, y)
    area: int


@dataclass(frozen=True)
class Mask:
    """Immutable run-length encoded binary region on a canvas."""

    canvas: Canvas
    runs: tuple[int, ...]

    def __post_init__(self):
        runs = self.runs
        if any(r < 0 for r in runs):
            raise CorruptMaskError(f"negative run length in {runs}")
        if sum(runs) != self.canvas.pixel_count:
            raise CorruptMaskError(
                f"runs sum to {sum(runs)}, canvas {self.canvas} has {self.canvas.pixel_count} pixels"
            )
        if any(r == 0 for r in runs[1:]):
            raise CorruptMaskError("only the leading background run may be 0")

    @classmethod
    def from_bitmap(cls, bitmap, canvas: Canvas | None = None) -> "Mask":
        """Encode a row-major boolean grid."""
        arr = np.asarray(bitmap, dtype=bool)
        if arr.ndim != 2 or arr.size == 0:
            raise InvalidCanvasError(f"bitmap must be 2-D and non-empty, got shape {arr.shape}")
        h, w = arr.shape
        if canvas is None:
            canvas = Canvas(width=w, height=h)
        elif (canvas.width, canvas.height) != (w, h):
            raise CanvasMismatchError(f"bitmap is {w}x{h}, canvas is {canvas}")
        flat = arr.ravel()
        boundaries = np.flatnonzero(flat[1:] != flat[:-1]) + 1
        edges = np.concatenate(([0], boundaries, [flat.size]))
        runs = np.diff(edges)
        if flat[0]:
            runs = np.concatenate(([0], runs))
        return cls(canvas, tuple(int(r) for r in runs))

    @classmethod
    def full(cls, canvas: Canvas) -> "Mask":
        return cls(canvas, (0, canvas.pixel_count))

    @classmethod
    def empty(cls, canvas: Canvas) -> "Mask":
        return cls(canvas, (canvas.pixel_count,))

    @cached_property
    def _bitmap(self) -> np.ndarray:
        values = (np.arange(len(self.runs)) % 2).astype(bool)
        flat = np.repeat(values, np.asarray(self.runs, dtype=np.int64))
        grid = flat.reshape(self.canvas.height, self.canvas.width)
        grid.flags.writeable = False
        return grid

    @cached_property
    def _flat_indices(self) -> np.ndarray:
        idx = np.flatnonzero(self._bitmap.ravel())
        idx.flags.writeable = False
        return idx

    def __getstate__(self):
        # Cached decodes stay out of pickles (workers re-decode cheaply).
        return {"canvas": self.canvas, "runs": self.runs}

    def __setstate__(self, state):
        object.__setattr__(self, "canvas", state["canvas"])
        object.__setattr__(self, "runs", state["runs"])

    def bitmap(self) -> np.ndarray:
        """Decode to a read-only row-major boolean grid."""
        return self._bitmap

    def flat_indices(self) -> np.ndarray:
        """Row-major indices of set pixels (read-only)."""
        return self._flat_indices

    @property
    def area(self) -> int:
        return sum(self.runs[1::2])

    @property
    def is_empty(self) -> bool:
        return self.area == 0

    def to_rle_text(self) -> str:
        return f"{self.canvas.width}x{self.canvas.height}:" + ",".join(str(r) for r in self.runs)

    @classmethod
    def from_rle_text(cls, text: str) -> "Mask":
        try:
            dims, payload = text.split(":", 1)
            w, h = dims.split("x", 1)
            canvas = Canvas(width=int(w), height=int(h))
            runs = tuple(int(part) for part in payload.split(","))
        except (ValueError, InvalidCanvasError) as exc:
            raise CorruptMaskError(f"malformed RLE text {text!r}: {exc}") from exc
        return cls(canvas, runs)


def encode(bitmap, canvas: Canvas | None = None) -> Mask:
    """RLE-encode a row-major boolean grid."""
    return Mask.from_bitmap(bitmap, canvas)


def decode(mask: Mask) -> np.ndarray:
    """Decode a mask back to its boolean grid."""
    return mask.bitmap()


def _require_same_canvas(a: Mask, b: Mask):
    if a.canvas != b.canvas:
        raise CanvasMismatchError(f"masks on {a.canvas} vs {b.canvas}")


def iou(a: Mask, b: Mask) -> float:
    """Intersection over union; 0.0 when both masks are empty."""
    _require_same_canvas(a, b)
    inter = int(np.count_nonzero(a.bitmap() & b.bitmap()))
    union = a.area + b.area - inter
    if union == 0:
        return 0.0
    return inter / union


def contains(mask: Mask, p: Point) -> bool:
    """Whether the pixel containing ``p`` is set."""
    col, row = p.pixel()
    if not (0 <= col < mask.canvas.width and 0 <= row < mask.canvas.height):
        raise OutOfBoundsError(f"point ({p.x}, {p.y}) outside canvas {mask.canvas}")
    return bool(mask.bitmap()[row, col])


def moments(mask: Mask) -> SpatialMoments:
    """Center of mass and regularized pixel covariance of a non-empty mask.

    The covariance is the second central moment matrix of the set pixel
    coordinates plus ``COVARIANCE_REGULARIZER`` on the diagonal.
    """
    if mask.is_empty:
        raise EmptyMaskError("moments of an empty mask are undefined")
    rows, cols = np.nonzero(mask.bitmap())
    xs = cols.astype(np.float64)
    ys = rows.astype(np.float64)
    cx = float(xs.mean())
    cy = float(ys.mean())
    dx = xs - cx
    dy = ys - cy
    cov = np.array(
        [
            [float((dx * dx).mean()) + COVARIANCE_REGULARIZER, float((dx * dy).mean())],
            [float((dx * dy).mean()), float((dy * dy).mean()) + COVARIANCE_REGULARIZER],
        ]
    )
    return SpatialMoments(center=Point(cx, cy), covariance=cov, area=int(xs.size))


def mahalanobis(p: Point, m: SpatialMoments) -> float:
    """Covariance-normalized distance from ``p`` to the moment center."""
    a = m.covariance[0, 0]
    b = m.covariance[0, 1]
    d = m.covariance[1, 1]
    det = a * d - b * b
    if det <= 0.0:
        raise NumericalDegenerateError(f"covariance not positive definite: det={det}")
    dx = p.x - m.center.x
    dy = p.y - m.center.y
    q = (d * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det
    return math.sqrt(max(q, 0.0))


def rasterize(
    ordered_segments: Iterable[tuple[Mask, int]],
    canvas: Canvas,
    unlabeled: int = UNLABELED,
) -> np.ndarray:
    """Paint front-to-back segments into a per-pixel id map.

    Each pixel takes the id of the front-most (earliest) segment covering
    it; uncovered pixels hold ``unlabeled``.
    """
    out = np.full((canvas.height, canvas.width), unlabeled, dtype=np.int32)
    stack = list(ordered_segments)
    for mask, sid in reversed(stack):
        if mask.canvas != canvas:
            raise CanvasMismatchError(f"segment on {mask.canvas}, raster canvas {canvas}")
        out[mask.bitmap()] = sid
    out.flags.writeable = False
    return out


def union_masks(masks: Sequence[Mask], canvas: Canvas) -> Mask:
    """Union of masks; the empty mask when the sequence is empty."""
    acc = np.zeros((canvas.height, canvas.width), dtype=bool)
    for m in masks:
        if m.canvas != canvas:
            raise CanvasMismatchError(f"mask on {m.canvas}, union canvas {canvas}")
        acc |= m.bitmap()
    return Mask.from_bitmap(acc, canvas)
