"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``STAGEPAINT_DISABLE_NUMBA`` is unset (or set to ``0``). Both
implementations share signatures and agree to floating-point rounding; the
two are not bit-identical, so a run and its replay must use the same path.

All rectangles are half-open grid ranges ``[y0, y1) x [x0, x1)``.
"""

from __future__ import annotations

import os
from types import SimpleNamespace

import numpy as np

__all__ = [
    "BACKEND",
    "box_mass",
    "softmax_box_grad",
    "tight_bbox",
    "select_blend",
    "numpy_impl",
    "numba_impl",
]


# --------------------------------------------------------------------------
# pure numpy
# --------------------------------------------------------------------------

def _np_box_mass(grid, y0, y1, x0, x1):
    inside = float(grid[y0:y1, x0:x1].sum())
    total = float(grid.sum())
    return inside, total


def _np_softmax_box_grad(logits, y0, y1, x0, x1):
    shifted = logits - logits.max()
    ex = np.exp(shifted)
    attn = ex / ex.sum()
    inside = float(attn[y0:y1, x0:x1].sum())
    resid = 1.0 - inside
    energy = resid * resid
    indicator = np.zeros_like(attn)
    indicator[y0:y1, x0:x1] = 1.0
    # dE/dl_m = -2 (1 - S) * A_m * (1[m in box] - S)
    grad = -2.0 * resid * attn * (indicator - inside)
    return attn, energy, grad


def _np_tight_bbox(flags):
    rows = np.flatnonzero(flags.any(axis=1))
    cols = np.flatnonzero(flags.any(axis=0))
    if rows.size == 0:
        return -1, -1, -1, -1
    return int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1


def _np_select_blend(z_new, z_prev, mask):
    return np.where(mask[None, :, :] != 0, z_new, z_prev)


numpy_impl = SimpleNamespace(
    name="numpy",
    box_mass=_np_box_mass,
    softmax_box_grad=_np_softmax_box_grad,
    tight_bbox=_np_tight_bbox,
    select_blend=_np_select_blend,
)


# --------------------------------------------------------------------------
# numba
# --------------------------------------------------------------------------

def _build_numba():
    from numba import njit

    @njit(cache=True)
    def box_mass(grid, y0, y1, x0, x1):
        inside = 0.0
        total = 0.0
        h, w = grid.shape
        for i in range(h):
            for j in range(w):
                v = grid[i, j]
                total += v
                if y0 <= i < y1 and x0 <= j < x1:
                    inside += v
        return inside, total

    @njit(cache=True)
    def softmax_box_grad(logits, y0, y1, x0, x1):
        h, w = logits.shape
        peak = logits[0, 0]
        for i in range(h):
            for j in range(w):
                if logits[i, j] > peak:
                    peak = logits[i, j]
        attn = np.empty((h, w))
        denom = 0.0
        for i in range(h):
            for j in range(w):
                e = np.exp(logits[i, j] - peak)
                attn[i, j] = e
                denom += e
        inside = 0.0
        for i in range(h):
            for j in range(w):
                attn[i, j] /= denom
                if y0 <= i < y1 and x0 <= j < x1:
                    inside += attn[i, j]
        resid = 1.0 - inside
        grad = np.empty((h, w))
        for i in range(h):
            for j in range(w):
                ind = 1.0 if (y0 <= i < y1 and x0 <= j < x1) else 0.0
                grad[i, j] = -2.0 * resid * attn[i, j] * (ind - inside)
        return attn, resid * resid, grad

    @njit(cache=True)
    def tight_bbox(flags):
        h, w = flags.shape
        x0, y0, x1, y1 = w, h, -1, -1
        for i in range(h):
            for j in range(w):
                if flags[i, j]:
                    if j < x0:
                        x0 = j
                    if j > x1:
                        x1 = j
                    if i < y0:
                        y0 = i
                    if i > y1:
                        y1 = i
        if x1 < 0:
            return -1, -1, -1, -1
        return x0, y0, x1 + 1, y1 + 1

    @njit(cache=True)
    def select_blend(z_new, z_prev, mask):
        c, h, w = z_new.shape
        out = np.empty_like(z_new)
        for ch in range(c):
            for i in range(h):
                for j in range(w):
                    if mask[i, j] != 0:
                        out[ch, i, j] = z_new[ch, i, j]
                    else:
                        out[ch, i, j] = z_prev[ch, i, j]
        return out

    return SimpleNamespace(
        name="numba",
        box_mass=box_mass,
        softmax_box_grad=softmax_box_grad,
        tight_bbox=tight_bbox,
        select_blend=select_blend,
    )


def _numba_disabled() -> bool:
    flag = os.environ.get("STAGEPAINT_DISABLE_NUMBA", "").strip().lower()
    return flag not in ("", "0", "false", "no")


try:
    numba_impl = _build_numba()
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba_impl = None

_active = numpy_impl if (numba_impl is None or _numba_disabled()) else numba_impl

BACKEND: str = _active.name


def box_mass(grid: np.ndarray, y0: int, y1: int, x0: int, x1: int) -> tuple[float, float]:
    """Return ``(mass inside the rectangle, total mass)`` of a 2-D grid."""
    return _active.box_mass(np.ascontiguousarray(grid, dtype=np.float64), y0, y1, x0, x1)


def softmax_box_grad(logits: np.ndarray, y0: int, y1: int, x0: int, x1: int):
    """Softmax over all cells, then the box energy and its logit gradient.

    Returns ``(attention, energy, d_energy/d_logits)``.
    """
    return _active.softmax_box_grad(
        np.ascontiguousarray(logits, dtype=np.float64), y0, y1, x0, x1
    )


def tight_bbox(flags: np.ndarray) -> tuple[int, int, int, int]:
    """Return ``(x0, y0, x1, y1)`` of set cells, or all ``-1`` when none."""
    return _active.tight_bbox(np.ascontiguousarray(flags, dtype=np.bool_))


def select_blend(z_new: np.ndarray, z_prev: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Per-cell selection broadcast over channels: ``mask ? z_new : z_prev``."""
    return _active.select_blend(
        np.ascontiguousarray(z_new, dtype=np.float64),
        np.ascontiguousarray(z_prev, dtype=np.float64),
        np.ascontiguousarray(mask, dtype=np.uint8),
    )
