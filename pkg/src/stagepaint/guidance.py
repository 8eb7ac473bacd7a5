"""Single-object diffusion with attention guidance and latent combination.

Timesteps count down from ``T`` to ``1``. A step ``t`` is guided when
``t > T_prime`` and, for stages after the first, combined with the previous
stage's latent when ``t > T_star``.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import ContractError, NumericalError, PreciseMaskError
from .geometry import (
    DEFAULT_THRESHOLD_QUANTILE,
    BBox,
    Canvas,
    bbox_from_attention,
    grid_rect,
    indicator_mask,
)
from .latent_io import digest
from .ports import BLOCK_TAGS, AttentionMaps, DenoiserPort, ImageRef

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GuidanceConfig:
    T: int = 50
    T_prime: int = 35
    T_star: int = 30
    eta: float = 40.0
    block_selection: str = "near_middle"
    guidance_iters_per_step: int = 1
    threshold_quantile: float = DEFAULT_THRESHOLD_QUANTILE

    def __post_init__(self):
        if int(self.T) != self.T or self.T < 1:
            raise ContractError(f"T must be a positive integer, got {self.T}")
        if not (0 <= self.T_prime <= self.T):
            raise ContractError(f"T_prime must lie in [0, T], got {self.T_prime}")
        if not (0 <= self.T_star <= self.T):
            raise ContractError(f"T_star must lie in [0, T], got {self.T_star}")
        if not (self.eta >= 0 and np.isfinite(self.eta)):
            raise ContractError(f"eta must be a finite non-negative number, got {self.eta}")
        if self.block_selection not in BLOCK_TAGS:
            raise ContractError(f"block_selection must be one of {BLOCK_TAGS}, got {self.block_selection!r}")
        if self.guidance_iters_per_step < 1:
            raise ContractError("guidance_iters_per_step must be >= 1")

    def replace(self, **changes) -> "GuidanceConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class StageRecord:
    n: int
    subprompt: str
    token_index: int
    rough_mask: BBox
    config: GuidanceConfig
    trajectory: np.ndarray  # (T + 1, C, H, W); index i holds z_{T - i}
    precise_mask: BBox
    precise_mask_fallback: bool = False
    final_attention: np.ndarray | None = None
    image: ImageRef | None = None
    attempts: list = field(default_factory=list)
    guidance_trace: list = field(default_factory=list)
    notes: list = field(default_factory=list)
    candidates: list = field(default_factory=list)
    chosen_ratio: float | None = None
    chosen_attempt: int = 0

    @property
    def final_latent(self) -> np.ndarray:
        return self.trajectory[-1]

    def latent_at(self, t: int) -> np.ndarray:
        """``z_t`` of this stage (``t`` counts down from ``T``)."""
        T = self.trajectory.shape[0] - 1
        if not 0 <= t <= T:
            raise ContractError(f"timestep {t} outside [0, {T}]")
        return self.trajectory[T - t]

    def trajectory_digests(self) -> list[str]:
        return [digest(z) for z in self.trajectory]


def _block_energy(grid: np.ndarray, rect) -> float:
    y0, y1, x0, x1 = rect
    inside, total = _kernels.box_mass(grid, y0, y1, x0, x1)
    if total <= 0.0:
        log.warning("degenerate attention (zero total mass); block energy set to 1")
        return 1.0
    resid = 1.0 - inside / total
    return resid * resid


def attention_energy(
    maps: AttentionMaps,
    bbox: BBox,
    k: int,
    canvas: Canvas,
    blocks: str | None = None,
) -> float:
    """Summed box energy ``(1 - inside/total)^2`` of token ``k`` over blocks.

    ``blocks`` restricts the sum to one block tag; ``None`` sums every block.
    The box is mapped onto each block's own grid.
    """
    selected = maps.blocks if blocks is None else maps.select(blocks)
    if not selected:
        raise ContractError(f"no attention blocks tagged {blocks!r}")
    if not 0 <= k < maps.n_tokens:
        raise ContractError(f"token index {k} outside [0, {maps.n_tokens})")
    total = 0.0
    for blk in selected:
        h, w = blk.grid
        total += _block_energy(blk.token_grid(k), grid_rect(bbox, canvas, h, w))
    return total


def guidance_step(
    latent: np.ndarray,
    t: int,
    subprompt: str,
    bbox: BBox,
    k: int,
    config: GuidanceConfig,
    port: DenoiserPort,
) -> np.ndarray:
    """Gradient-descent update of the latent on the attention energy."""
    if t <= config.T_prime:
        raise ContractError(f"guidance applies only for t > T_prime ({t} <= {config.T_prime})")
    z = np.asarray(latent, dtype=np.float64)
    for _ in range(config.guidance_iters_per_step):
        grad = port.energy_gradient(z, t, subprompt, bbox, k, config.block_selection)
        if not np.all(np.isfinite(grad)):
            raise NumericalError(f"non-finite energy gradient at t={t}")
        z = z - config.eta * grad
    return z


def combine_latents(z_new: np.ndarray, z_prev: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """``mask * z_new + (1 - mask) * z_prev`` for a 0/1 mask, broadcast over channels.

    Implemented as a selection, so every cell is a bit-exact copy of one input.
    """
    z_new = np.asarray(z_new)
    z_prev = np.asarray(z_prev)
    mask = np.asarray(mask)
    if z_new.shape != z_prev.shape or z_new.ndim != 3:
        raise ContractError(f"latent shapes differ or are not 3-D: {z_new.shape} vs {z_prev.shape}")
    if mask.shape != z_new.shape[1:]:
        raise ContractError(f"mask shape {mask.shape} does not match latent grid {z_new.shape[1:]}")
    return _kernels.select_blend(z_new, z_prev, mask)


def _resample_to_canvas(grid: np.ndarray, canvas: Canvas) -> np.ndarray:
    gh, gw = grid.shape
    rows = (np.arange(canvas.height) * gh) // canvas.height
    cols = (np.arange(canvas.width) * gw) // canvas.width
    density = (gh * gw) / (canvas.height * canvas.width)
    return grid[np.ix_(rows, cols)] * density


def mean_token_map(maps: AttentionMaps, k: int, canvas: Canvas, blocks: str | None = None) -> np.ndarray:
    """Average of token ``k``'s maps over the selected blocks, on the canvas grid."""
    selected = maps.blocks if blocks is None else maps.select(blocks)
    if not selected:
        raise ContractError(f"no attention blocks tagged {blocks!r}")
    acc = np.zeros((canvas.height, canvas.width))
    for blk in selected:
        acc += _resample_to_canvas(blk.token_grid(k), canvas)
    return acc / len(selected)


def attention_centroid(grid: np.ndarray) -> tuple[float, float]:
    """Mass-weighted cell-centre ``(x, y)`` of a non-negative grid."""
    g = np.asarray(grid, dtype=np.float64)
    total = g.sum()
    if total <= 0:
        raise ContractError("centroid of a grid with no mass")
    ys, xs = np.indices(g.shape)
    return float(((xs + 0.5) * g).sum() / total), float(((ys + 0.5) * g).sum() / total)


def canvas_of(port: DenoiserPort) -> Canvas:
    _, h, w = port.latent_shape
    return Canvas(w, h)


def single_object_diffusion(
    n: int,
    subprompt: str,
    token_index: int,
    rough_mask: BBox,
    prev_record: StageRecord | None,
    config: GuidanceConfig,
    port: DenoiserPort,
    init_latent: np.ndarray,
    trace_energy: bool = False,
) -> StageRecord:
    """Generate one object: guided, optionally combined, denoising from ``T`` to ``0``."""
    if (n == 1) != (prev_record is None):
        raise ContractError("a previous stage record is required exactly when n > 1")
    canvas = canvas_of(port)
    if not rough_mask.within(canvas):
        raise ContractError(f"rough mask {rough_mask} outside canvas {canvas}")
    T = config.T
    z = np.array(init_latent, dtype=np.float64, copy=True)
    if z.shape != tuple(port.latent_shape):
        raise ContractError(f"initial latent shape {z.shape} != backend shape {port.latent_shape}")
    if prev_record is not None and prev_record.trajectory.shape[0] != T + 1:
        raise ContractError("previous stage trajectory length does not match T + 1")

    mask = indicator_mask(rough_mask, canvas)
    trajectory = [z.copy()]
    trace = []
    maps = None
    try:
        for t in range(T, 0, -1):
            if t > config.T_prime:
                before = None
                if trace_energy:
                    before = attention_energy(port.step(z, t, subprompt)[1], rough_mask, token_index,
                                              canvas, config.block_selection)
                z = guidance_step(z, t, subprompt, rough_mask, token_index, config, port)
                if trace_energy:
                    after = attention_energy(port.step(z, t, subprompt)[1], rough_mask, token_index,
                                             canvas, config.block_selection)
                    trace.append((t, before, after))
            z_next, maps = port.step(z, t, subprompt)
            if prev_record is not None and t > config.T_star:
                z_next = combine_latents(z_next, prev_record.latent_at(t - 1), mask)
            if not np.all(np.isfinite(z_next)):
                raise NumericalError(f"non-finite latent after step t={t}")
            z = np.asarray(z_next, dtype=np.float64)
            trajectory.append(z.copy())
    except Exception as exc:
        exc.partial_trajectory = np.stack(trajectory)
        raise

    avg = mean_token_map(maps, token_index, canvas, config.block_selection)
    notes = []
    fallback = False
    try:
        precise = bbox_from_attention(avg, config.threshold_quantile)
    except PreciseMaskError as exc:
        log.warning("stage %d: precise mask extraction failed (%s); using rough mask", n, exc)
        notes.append(f"precise mask fallback: {exc}")
        precise, fallback = rough_mask, True

    pixels = port.decode(z)
    return StageRecord(
        n=n,
        subprompt=subprompt,
        token_index=token_index,
        rough_mask=rough_mask,
        config=config,
        trajectory=np.stack(trajectory),
        precise_mask=precise,
        precise_mask_fallback=fallback,
        final_attention=avg,
        image=ImageRef(pixels=pixels, attention=avg),
        guidance_trace=trace,
        notes=notes,
    )
