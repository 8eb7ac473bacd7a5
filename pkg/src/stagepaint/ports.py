"""Interfaces the pipeline talks to. Mock and live backends both satisfy them."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Protocol, runtime_checkable

import numpy as np

if TYPE_CHECKING:
    from .geometry import BBox


BLOCK_TAGS = ("near_input", "near_middle", "near_output")


@dataclass(frozen=True)
class BlockAttention:
    """Cross-attention of one block: ``values[m, k]`` for cell ``m``, token ``k``."""

    tag: str
    grid: tuple[int, int]  # (height, width)
    values: np.ndarray  # (height * width, tokens)

    def token_grid(self, k: int) -> np.ndarray:
        h, w = self.grid
        return self.values[:, k].reshape(h, w)


@dataclass(frozen=True)
class AttentionMaps:
    blocks: tuple[BlockAttention, ...]

    def select(self, tag: str) -> list[BlockAttention]:
        return [b for b in self.blocks if b.tag == tag]

    @property
    def n_tokens(self) -> int:
        return int(self.blocks[0].values.shape[1]) if self.blocks else 0


@dataclass
class ImageRef:
    """A decoded stage image plus what mock judges need to look at it."""

    pixels: np.ndarray  # (H, W, 3) uint8
    attention: np.ndarray | None = None  # mean token-k map on the canvas grid
    path: str | None = None
    meta: dict = field(default_factory=dict)


@runtime_checkable
class TextCompletionPort(Protocol):
    def complete(self, prompt: str) -> str: ...


@runtime_checkable
class VlmPort(Protocol):
    def ask(self, image_ref: ImageRef | str, question: str) -> str: ...


@runtime_checkable
class ScorerPort(Protocol):
    def score(self, image_ref: ImageRef, text: str) -> float: ...


@runtime_checkable
class DenoiserPort(Protocol):
    """Sampler plus attention access for one diffusion backend.

    ``step`` returns the next latent together with the cross-attention maps
    computed on the input latent. ``energy_gradient`` is the gradient, with
    respect to the latent, of the summed box energy over the blocks tagged
    ``blocks``.
    """

    latent_shape: tuple[int, int, int]

    def initial_latent(self, seed: int) -> np.ndarray: ...

    def step(self, latent: np.ndarray, t: int, text: str) -> tuple[np.ndarray, AttentionMaps]: ...

    def energy_gradient(
        self, latent: np.ndarray, t: int, text: str, bbox: "BBox", k: int, blocks: str
    ) -> np.ndarray: ...

    def decode(self, latent: np.ndarray) -> np.ndarray: ...
