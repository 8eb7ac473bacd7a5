"""Rough masks, overlap candidates, indicator grids and precise masks.

Coordinates: origin at the top-left cell, ``x`` grows rightward and ``y``
downward. A :class:`BBox` is ``(x, y, w, h)`` in integer canvas cells.
Offsets are floored and extents ceiled so adjacent strips never leave a
gap on the canvas.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum
from numbers import Integral

import numpy as np

from . import _kernels
from .errors import ContractError, InvalidPlanError, LayoutExhaustedError, PreciseMaskError

log = logging.getLogger(__name__)

DEFAULT_THRESHOLD_QUANTILE = 0.75


@dataclass(frozen=True)
class Canvas:
    width: int
    height: int

    def __post_init__(self):
        if not (_is_int(self.width) and _is_int(self.height)) or self.width < 1 or self.height < 1:
            raise ContractError(f"canvas dimensions must be positive integers, got {self.width}x{self.height}")

    @property
    def bbox(self) -> "BBox":
        return BBox(0, 0, self.width, self.height)


@dataclass(frozen=True)
class BBox:
    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        for name in ("x", "y", "w", "h"):
            if not _is_int(getattr(self, name)):
                raise ContractError(f"bbox field {name} must be an integer")
        if self.x < 0 or self.y < 0:
            raise ContractError(f"bbox origin must be non-negative, got ({self.x}, {self.y})")
        if self.w < 1 or self.h < 1:
            raise ContractError(f"bbox extent must be positive, got {self.w}x{self.h}")

    @property
    def right(self) -> int:
        return self.x + self.w

    @property
    def bottom(self) -> int:
        return self.y + self.h

    @property
    def area(self) -> int:
        return self.w * self.h

    def within(self, canvas: Canvas) -> bool:
        return self.right <= canvas.width and self.bottom <= canvas.height

    def intersection(self, other: "BBox") -> tuple[int, int]:
        """Overlap extents ``(dx, dy)``; zero along an axis when disjoint."""
        dx = max(0, min(self.right, other.right) - max(self.x, other.x))
        dy = max(0, min(self.bottom, other.bottom) - max(self.y, other.y))
        return dx, dy

    def intersects(self, other: "BBox") -> bool:
        dx, dy = self.intersection(other)
        return dx > 0 and dy > 0

    def contains_point(self, px: float, py: float) -> bool:
        return self.x <= px < self.right and self.y <= py < self.bottom

    def to_dict(self) -> dict:
        return {"x": int(self.x), "y": int(self.y), "w": int(self.w), "h": int(self.h)}

    @classmethod
    def from_dict(cls, data: dict) -> "BBox":
        return cls(int(data["x"]), int(data["y"]), int(data["w"]), int(data["h"]))


class PositionChoice(str, Enum):
    LEFT = "left"
    BOTTOM = "bottom"
    RIGHT = "right"
    TOP = "top"


FIRST_CHOICES = (PositionChoice.LEFT, PositionChoice.BOTTOM)
NEXT_CHOICES = (PositionChoice.RIGHT, PositionChoice.TOP)


def _is_int(v) -> bool:
    return isinstance(v, Integral) and not isinstance(v, bool)


def _check_count(num) -> int:
    if not _is_int(num) or num < 1:
        raise InvalidPlanError(f"region count must be a positive integer, got {num!r}")
    return int(num)


def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def rough_mask_first(opt: PositionChoice, num: int, canvas: Canvas) -> BBox:
    """Rough mask of the first object: the left or bottom ``1/num`` strip."""
    num = _check_count(num)
    opt = PositionChoice(opt)
    W, H = canvas.width, canvas.height
    if opt is PositionChoice.LEFT:
        return BBox(0, 0, max(1, W // num), H)
    if opt is PositionChoice.BOTTOM:
        y = ((num - 1) * H) // num
        return BBox(0, min(y, H - 1), W, max(1, H - y))
    raise InvalidPlanError(f"first object position must be left or bottom, got {opt.value}")


def split_strips(opt: PositionChoice, num: int, canvas: Canvas) -> list[BBox]:
    """All ``num`` strips of the first-object split, in painting order.

    Strip 0 is exactly :func:`rough_mask_first`; together they tile the canvas.
    """
    num = _check_count(num)
    opt = PositionChoice(opt)
    W, H = canvas.width, canvas.height
    out = []
    if opt is PositionChoice.LEFT:
        if num > W:
            raise InvalidPlanError(f"cannot split width {W} into {num} strips")
        for i in range(num):
            x0, x1 = (i * W) // num, ((i + 1) * W) // num
            out.append(BBox(x0, 0, x1 - x0, H))
    elif opt is PositionChoice.BOTTOM:
        if num > H:
            raise InvalidPlanError(f"cannot split height {H} into {num} strips")
        for i in range(num):
            y1 = ((num - i) * H) // num
            y0 = ((num - i - 1) * H) // num
            out.append(BBox(0, y0, W, y1 - y0))
    else:
        raise InvalidPlanError(f"first object position must be left or bottom, got {opt.value}")
    return out


def rough_mask_next(opt: PositionChoice, num: int, prev: BBox, canvas: Canvas) -> BBox:
    """Rough mask of object n > 1 from the previous object's precise mask.

    ``right`` splits the horizontal space remaining right of ``prev``;
    ``top`` splits the vertical space above it.
    """
    num = _check_count(num)
    opt = PositionChoice(opt)
    W, H = canvas.width, canvas.height
    if not prev.within(canvas):
        raise ContractError(f"previous mask {prev} lies outside canvas {W}x{H}")
    if opt is PositionChoice.RIGHT:
        x0 = prev.right
        remaining = W - x0
        if remaining <= 0:
            raise LayoutExhaustedError(f"no space right of x={x0} on a canvas of width {W}")
        return BBox(x0, 0, max(1, remaining // num), H)
    if opt is PositionChoice.TOP:
        top = prev.y
        if top <= 0:
            raise LayoutExhaustedError("no space above a mask touching y=0")
        y = (top * (num - 1)) // num
        return BBox(0, y, W, top - y)
    raise InvalidPlanError(f"subsequent positions must be right or top, got {opt.value}")


def clip_to_canvas(x: int, y: int, w: int, h: int, canvas: Canvas) -> tuple[BBox, bool]:
    """Clip a raw rectangle to the canvas; the flag reports whether it moved."""
    cx = min(max(0, x), canvas.width - 1)
    cy = min(max(0, y), canvas.height - 1)
    cw = max(1, min(x + w, canvas.width) - cx)
    ch = max(1, min(y + h, canvas.height) - cy)
    return BBox(cx, cy, cw, ch), (cx, cy, cw, ch) != (x, y, w, h)


def overlap_candidate(
    opt: PositionChoice,
    num: int,
    prev: BBox,
    canvas: Canvas,
    r: float,
    notes: list | None = None,
) -> BBox:
    """Rough mask that intrudes into ``prev`` by fraction ``r`` of its extent.

    Along the stacking axis the box starts ``round(r * extent)`` cells inside
    the previous object and extends over the same free space as
    :func:`rough_mask_next`; across it the box spans the full canvas, so
    ``r = 0`` gives exactly the non-overlapping mask. A clipped result is
    logged and, when ``notes`` is given, recorded there.
    """
    if not (0.0 <= float(r) < 1.0):
        raise ContractError(f"overlap ratio must lie in [0, 1), got {r}")
    opt = PositionChoice(opt)
    base = rough_mask_next(opt, num, prev, canvas)
    if opt is PositionChoice.RIGHT:
        intrusion = _round_half_up(prev.w * float(r))
        raw = (base.x - intrusion, base.y, base.w + intrusion, base.h)
    else:
        intrusion = _round_half_up(prev.h * float(r))
        raw = (base.x, base.y, base.w, base.h + intrusion)
    bbox, clipped = clip_to_canvas(*raw, canvas)
    if clipped:
        log.warning("overlap candidate %s clipped to canvas as %s", raw, bbox)
        if notes is not None:
            notes.append(f"candidate r={r} clipped from {raw} to {bbox.to_dict()}")
    return bbox


def grid_rect(bbox: BBox, canvas: Canvas, grid_h: int, grid_w: int) -> tuple[int, int, int, int]:
    """Half-open ``(y0, y1, x0, x1)`` of grid cells whose centres fall in ``bbox``.

    A cell centre ``(u + 0.5) * W / grid_w`` is tested in exact integer
    arithmetic. When the box is thinner than one grid cell the cell holding
    the box centre is used so the rectangle is never empty.
    """
    W, H = canvas.width, canvas.height

    def axis(lo, extent, full, cells):
        # lo <= (2u + 1) * full / (2 * cells) < lo + extent
        first = None
        last = None
        for u in range(cells):
            c = (2 * u + 1) * full
            if 2 * lo * cells <= c < 2 * (lo + extent) * cells:
                if first is None:
                    first = u
                last = u
        if first is None:
            mid = ((2 * lo + extent) * cells) // (2 * full)
            mid = min(max(mid, 0), cells - 1)
            return mid, mid + 1
        return first, last + 1

    x0, x1 = axis(bbox.x, bbox.w, W, grid_w)
    y0, y1 = axis(bbox.y, bbox.h, H, grid_h)
    return y0, y1, x0, x1


def indicator_mask(bbox: BBox, canvas: Canvas, resolution: Canvas | None = None) -> np.ndarray:
    """0/1 grid of shape ``(height, width)`` marking cells inside ``bbox``.

    ``resolution`` defaults to the canvas itself; other grids are mapped
    proportionally through cell centres.
    """
    res = resolution or canvas
    y0, y1, x0, x1 = grid_rect(bbox, canvas, res.height, res.width)
    grid = np.zeros((res.height, res.width), dtype=np.uint8)
    grid[y0:y1, x0:x1] = 1
    return grid


def bbox_from_attention(avg_map: np.ndarray, threshold_quantile: float = DEFAULT_THRESHOLD_QUANTILE) -> BBox:
    """Tightest box around the cells of ``avg_map`` above its quantile.

    Cells strictly above the ``threshold_quantile`` quantile are kept; when
    none are (a flat map) the cells equal to it are kept instead. The box is
    in the map's own grid coordinates.
    """
    arr = np.asarray(avg_map, dtype=np.float64)
    if arr.ndim != 2:
        raise ContractError(f"attention map must be 2-D, got shape {arr.shape}")
    if not (0.0 <= threshold_quantile <= 1.0):
        raise ContractError(f"threshold quantile must lie in [0, 1], got {threshold_quantile}")
    if not np.all(np.isfinite(arr)) or arr.max() <= 0.0:
        raise PreciseMaskError("attention map has no positive finite mass")
    thr = float(np.quantile(arr, threshold_quantile))
    flags = arr > thr
    if not flags.any():
        flags = arr >= thr
    x0, y0, x1, y1 = _kernels.tight_bbox(flags)
    if x0 < 0:
        raise PreciseMaskError("no cell passes the attention threshold")
    return BBox(int(x0), int(y0), int(x1 - x0), int(y1 - y0))
