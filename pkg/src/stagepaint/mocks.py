"""Deterministic test doubles for every port.

Scripted fixture grammar (one record per line)::

    # comment
    @exhaustion repeat          optional; "error" (default) or "repeat"
    <matcher> => <reply>

``<matcher>`` is ``*`` (anything), ``/regex/`` (``re.search``) or a literal
substring. In replies ``\\n`` stands for a newline and ``\\\\`` for a
backslash. A call takes the first unconsumed entry whose matcher accepts the
text. When nothing is left, the ``repeat`` policy re-serves the most recent
matching entry and ``error`` raises :class:`ScriptExhaustedError`.
"""

from __future__ import annotations

import re
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import ContractError, ScriptExhaustedError
from .geometry import BBox, Canvas, grid_rect
from .guidance import attention_centroid
from .ports import AttentionMaps, BlockAttention, ImageRef

_SEP = " => "


@dataclass
class ScriptEntry:
    matcher: str
    reply: str
    consumed: bool = False

    def matches(self, text: str) -> bool:
        m = self.matcher
        if m == "*":
            return True
        if len(m) >= 2 and m.startswith("/") and m.endswith("/"):
            return re.search(m[1:-1], text) is not None
        return m in text


@dataclass
class ScriptedReplySet:
    entries: list[ScriptEntry] = field(default_factory=list)
    exhaustion: str = "error"

    def __post_init__(self):
        if self.exhaustion not in ("error", "repeat"):
            raise ContractError(f"unknown exhaustion policy {self.exhaustion!r}")

    @classmethod
    def ordered(cls, replies, exhaustion: str = "error") -> "ScriptedReplySet":
        return cls([ScriptEntry("*", r) for r in replies], exhaustion)

    @classmethod
    def keyed(cls, pairs, exhaustion: str = "error") -> "ScriptedReplySet":
        return cls([ScriptEntry(m, r) for m, r in pairs], exhaustion)

    @classmethod
    def parse(cls, text: str) -> "ScriptedReplySet":
        entries = []
        exhaustion = "error"
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("@exhaustion"):
                exhaustion = line.split(None, 1)[1].strip()
                continue
            if _SEP not in line:
                raise ContractError(f"fixture line {lineno}: expected '<matcher> => <reply>'")
            matcher, reply = line.split(_SEP, 1)
            entries.append(ScriptEntry(matcher.strip(), _unescape(reply)))
        return cls(entries, exhaustion)

    @classmethod
    def load(cls, path: str | Path) -> "ScriptedReplySet":
        return cls.parse(Path(path).read_text(encoding="utf-8"))

    def next_reply(self, text: str) -> str:
        for entry in self.entries:
            if not entry.consumed and entry.matches(text):
                entry.consumed = True
                return entry.reply
        if self.exhaustion == "repeat":
            for entry in reversed(self.entries):
                if entry.consumed and entry.matches(text):
                    return entry.reply
        raise ScriptExhaustedError(f"no scripted reply left for: {text[:120]!r}")


def _unescape(s: str) -> str:
    out = []
    i = 0
    while i < len(s):
        if s[i] == "\\" and i + 1 < len(s):
            nxt = s[i + 1]
            out.append("\n" if nxt == "n" else nxt)
            i += 2
        else:
            out.append(s[i])
            i += 1
    return "".join(out)


def escape_reply(s: str) -> str:
    return s.replace("\\", "\\\\").replace("\n", "\\n")


class ScriptedTextPort:
    """Text-completion port answering from a :class:`ScriptedReplySet`. Not thread-safe."""

    def __init__(self, replies: ScriptedReplySet):
        self.replies = replies
        self.calls: list[tuple[str, str]] = []

    def complete(self, prompt: str) -> str:
        reply = self.replies.next_reply(prompt)
        self.calls.append((prompt, reply))
        return reply


class ScriptedVlm:
    """VLM port answering questions from a scripted reply set (matched on the question)."""

    def __init__(self, replies: ScriptedReplySet):
        self.replies = replies
        self.calls: list[tuple[str, str]] = []

    def ask(self, image_ref, question: str) -> str:
        answer = self.replies.next_reply(question)
        self.calls.append((question, answer))
        return answer


class ConstantVlm:
    def __init__(self, answer: str = "Yes"):
        self.answer = answer

    def ask(self, image_ref, question: str) -> str:
        return self.answer


class MockScorer:
    """Negative squared distance from token attention centroid to a target point."""

    def __init__(self, target: tuple[float, float] | None):
        self.target = target

    def score(self, image_ref: ImageRef, text: str) -> float:
        if self.target is None:
            raise ContractError("mock scorer has no target point configured")
        if image_ref.attention is None:
            raise ContractError("image reference carries no attention map")
        cx, cy = attention_centroid(image_ref.attention)
        tx, ty = self.target
        return -((cx - tx) ** 2 + (cy - ty) ** 2)


def tokenize(text: str) -> list[str]:
    return [w.strip(".,;:!?\"'").lower() for w in text.split()]


_BLOCK_LAYOUT = (("near_input", 1), ("near_middle", 2), ("near_output", 1))


class ToyDenoiser:
    """Small differentiable stand-in for a latent diffusion model.

    Attention of token ``k`` in block ``j`` is a softmax over cells of
    ``tau * <a_jk, pool_j(z)[:, m]>``, where ``a_jk`` mixes a seeded per-word
    vector with a seeded per-block vector and ``pool_j`` averages ``f x f``
    patches (``f = 2`` for the middle block). Each map therefore sums to one,
    and adding a spatially constant offset to the latent leaves it unchanged.

    ``step`` contracts the latent toward a seeded text-dependent pattern by a
    factor ``(1 - rho) / t``. Instances are immutable and safe to share.
    """

    def __init__(
        self,
        channels: int = 4,
        size: int = 16,
        seed: int = 0,
        tau: float = 1.0,
        rho: float = 0.9,
        pattern_scale: float = 0.3,
        init_scale: float = 0.5,
        weight_scale: float = 1.0,
    ):
        if size % 2:
            raise ContractError("toy latent size must be even")
        self.latent_shape = (int(channels), int(size), int(size))
        self.seed = int(seed)
        self.tau = float(tau)
        self.rho = float(rho)
        self.pattern_scale = float(pattern_scale)
        self.init_scale = float(init_scale)
        self.weight_scale = float(weight_scale)
        rng = np.random.default_rng([self.seed, 7])
        self._block_vecs = {tag: rng.standard_normal(channels) for tag, _ in _BLOCK_LAYOUT}

    @property
    def canvas(self) -> Canvas:
        _, h, w = self.latent_shape
        return Canvas(w, h)

    def spec(self) -> str:
        c, h, _ = self.latent_shape
        return (f"toy:seed={self.seed},channels={c},size={h},tau={self.tau!r},rho={self.rho!r},"
                f"pattern_scale={self.pattern_scale!r},init_scale={self.init_scale!r},"
                f"weight_scale={self.weight_scale!r}")

    def _word_vec(self, word: str) -> np.ndarray:
        crc = zlib.crc32(word.encode("utf-8"))
        return np.random.default_rng([self.seed, 11, crc]).standard_normal(self.latent_shape[0])

    def _token_vec(self, tag: str, word: str) -> np.ndarray:
        return self.weight_scale * (self._word_vec(word) + 0.3 * self._block_vecs[tag])

    def _pattern(self, text: str) -> np.ndarray:
        crc = zlib.crc32(text.encode("utf-8"))
        return self.pattern_scale * np.random.default_rng([self.seed, 13, crc]).standard_normal(self.latent_shape)

    def _check(self, latent) -> np.ndarray:
        z = np.asarray(latent, dtype=np.float64)
        if z.shape != self.latent_shape:
            raise ContractError(f"latent shape {z.shape} != {self.latent_shape}")
        return z

    @staticmethod
    def _pool(z: np.ndarray, f: int) -> np.ndarray:
        if f == 1:
            return z
        c, h, w = z.shape
        return z.reshape(c, h // f, f, w // f, f).mean(axis=(2, 4))

    def _logits(self, z: np.ndarray, tag: str, f: int, word: str) -> np.ndarray:
        return self.tau * np.tensordot(self._token_vec(tag, word), self._pool(z, f), axes=1)

    def initial_latent(self, seed: int) -> np.ndarray:
        return self.init_scale * np.random.default_rng(int(seed)).standard_normal(self.latent_shape)

    def attention(self, latent, text: str) -> AttentionMaps:
        z = self._check(latent)
        words = tokenize(text)
        blocks = []
        for tag, f in _BLOCK_LAYOUT:
            h, w = z.shape[1] // f, z.shape[2] // f
            cols = []
            for word in words:
                logits = self._logits(z, tag, f, word)
                ex = np.exp(logits - logits.max())
                cols.append((ex / ex.sum()).reshape(-1))
            values = np.stack(cols, axis=1) if cols else np.zeros((h * w, 0))
            blocks.append(BlockAttention(tag=tag, grid=(h, w), values=values))
        return AttentionMaps(tuple(blocks))

    def step(self, latent, t: int, text: str):
        z = self._check(latent)
        if t < 1:
            raise ContractError(f"timestep must be >= 1, got {t}")
        maps = self.attention(z, text)
        z_next = z - ((1.0 - self.rho) / t) * (z - self._pattern(text))
        return z_next, maps

    def energy_gradient(self, latent, t: int, text: str, bbox: BBox, k: int, blocks: str) -> np.ndarray:
        z = self._check(latent)
        words = tokenize(text)
        if not 0 <= k < len(words):
            raise ContractError(f"token index {k} outside [0, {len(words)})")
        grad = np.zeros_like(z)
        for tag, f in _BLOCK_LAYOUT:
            if blocks is not None and tag != blocks:
                continue
            h, w = z.shape[1] // f, z.shape[2] // f
            y0, y1, x0, x1 = grid_rect(bbox, self.canvas, h, w)
            a = self._token_vec(tag, words[k])
            _, _, dlog = _kernels.softmax_box_grad(self._logits(z, tag, f, words[k]), y0, y1, x0, x1)
            dpool = self.tau * a[:, None, None] * dlog[None, :, :]
            if f > 1:
                dpool = np.repeat(np.repeat(dpool, f, axis=1), f, axis=2) / (f * f)
            grad += dpool
        return grad

    def decode(self, latent) -> np.ndarray:
        z = self._check(latent)
        rgb = z[:3] if z.shape[0] >= 3 else np.repeat(z[:1], 3, axis=0)
        img = 255.0 / (1.0 + np.exp(-2.0 * rgb))
        img = np.transpose(img, (1, 2, 0))
        img = np.repeat(np.repeat(img, 4, axis=0), 4, axis=1)
        return np.clip(np.round(img), 0, 255).astype(np.uint8)


def parse_kv(body: str) -> dict[str, str]:
    out = {}
    for part in filter(None, (p.strip() for p in body.split(","))):
        if "=" not in part:
            raise ContractError(f"expected key=value, got {part!r}")
        key, value = part.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def toy_from_spec(body: str) -> ToyDenoiser:
    kv = parse_kv(body)
    ints = {"seed", "channels", "size"}
    floats = {"tau", "rho", "pattern_scale", "init_scale", "weight_scale"}
    kwargs = {}
    for key, value in kv.items():
        if key in ints:
            kwargs[key] = int(value)
        elif key in floats:
            kwargs[key] = float(value)
        else:
            raise ContractError(f"unknown toy backend option {key!r}")
    return ToyDenoiser(**kwargs)


def scorer_from_spec(body: str) -> MockScorer:
    kv = parse_kv(body)
    if "x" not in kv or "y" not in kv:
        return MockScorer(None)
    return MockScorer((float(kv["x"]), float(kv["y"])))
