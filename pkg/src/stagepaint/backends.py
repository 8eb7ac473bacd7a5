"""Port construction from spec strings, and JSON-over-HTTP live ports.

Spec strings::

    toy:seed=0,channels=4,size=16      toy denoiser
    script:<fixture path>              scripted planner / checker
    yes | const:<answer>               checker that always gives one answer
    centroid:x=<float>,y=<float>       mock scorer with a target point
    http://host:port/path              live port (JSON over HTTP POST)

Live wire format: arrays travel as ``{"shape": [...], "dtype": "<f8",
"b64": <base64 of row-major bytes>}`` and images as base64 PNG.

=========  ===================  ==========================================
port       request body         response body
=========  ===================  ==========================================
planner    {prompt}             {text}
checker    {question, image}    {answer}
scorer     {text, image}        {score}
denoiser   POST <base>/info     {latent_shape}
           /initial_latent      {seed} -> {latent}
           /step                {latent, t, text} -> {latent, blocks}
           /energy_gradient     {latent, t, text, bbox, k, blocks} -> {gradient}
           /decode              {latent} -> {image}
=========  ===================  ==========================================

``blocks`` in a step reply is a list of ``{tag, grid: [h, w], values}``.
"""

from __future__ import annotations

import base64
import io
import json
import urllib.request
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ContractError, StagePaintError
from .geometry import BBox
from .mocks import (
    ConstantVlm,
    ScriptedReplySet,
    ScriptedTextPort,
    ScriptedVlm,
    scorer_from_spec,
    toy_from_spec,
)
from .ports import AttentionMaps, BlockAttention, ImageRef


def encode_array(arr: np.ndarray) -> dict:
    a = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
    return {"shape": list(a.shape), "dtype": "<f8", "b64": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(obj: dict) -> np.ndarray:
    raw = base64.b64decode(obj["b64"])
    return np.frombuffer(raw, dtype=np.dtype(obj.get("dtype", "<f8"))).reshape(obj["shape"]).astype(np.float64)


def encode_png(pixels: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(np.asarray(pixels, dtype=np.uint8)).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_png(data: str) -> np.ndarray:
    return np.asarray(Image.open(io.BytesIO(base64.b64decode(data))).convert("RGB"))


def _image_payload(image_ref) -> str:
    if isinstance(image_ref, ImageRef):
        return encode_png(image_ref.pixels)
    return encode_png(np.asarray(Image.open(image_ref).convert("RGB")))


class HttpError(StagePaintError):
    pass


def _post(url: str, payload: dict, timeout: float) -> dict:
    req = urllib.request.Request(url, data=json.dumps(payload).encode("utf-8"),
                                 headers={"Content-Type": "application/json"}, method="POST")
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            return json.loads(resp.read().decode("utf-8"))
    except OSError as exc:
        raise HttpError(f"request to {url} failed: {exc}") from exc


class HttpTextPort:
    def __init__(self, url: str, timeout: float = 120.0):
        self.url, self.timeout = url, timeout

    def complete(self, prompt: str) -> str:
        return str(_post(self.url, {"prompt": prompt}, self.timeout)["text"])


class HttpVlm:
    def __init__(self, url: str, timeout: float = 120.0):
        self.url, self.timeout = url, timeout

    def ask(self, image_ref, question: str) -> str:
        body = {"question": question, "image": _image_payload(image_ref)}
        return str(_post(self.url, body, self.timeout)["answer"])


class HttpScorer:
    def __init__(self, url: str, timeout: float = 120.0):
        self.url, self.timeout = url, timeout

    def score(self, image_ref, text: str) -> float:
        body = {"text": text, "image": _image_payload(image_ref)}
        return float(_post(self.url, body, self.timeout)["score"])


class HttpDenoiser:
    """Denoiser port forwarding every call to a remote service."""

    def __init__(self, base_url: str, timeout: float = 600.0):
        self.base = base_url.rstrip("/")
        self.timeout = timeout
        info = _post(f"{self.base}/info", {}, timeout)
        self.latent_shape = tuple(int(d) for d in info["latent_shape"])
        if len(self.latent_shape) != 3:
            raise ContractError(f"remote latent shape must be 3-D, got {self.latent_shape}")

    def spec(self) -> str:
        return self.base

    def initial_latent(self, seed: int) -> np.ndarray:
        return decode_array(_post(f"{self.base}/initial_latent", {"seed": int(seed)}, self.timeout)["latent"])

    def step(self, latent, t: int, text: str):
        reply = _post(f"{self.base}/step", {"latent": encode_array(latent), "t": int(t), "text": text}, self.timeout)
        blocks = tuple(
            BlockAttention(tag=b["tag"], grid=tuple(b["grid"]), values=decode_array(b["values"]))
            for b in reply["blocks"]
        )
        return decode_array(reply["latent"]), AttentionMaps(blocks)

    def energy_gradient(self, latent, t: int, text: str, bbox: BBox, k: int, blocks: str):
        body = {"latent": encode_array(latent), "t": int(t), "text": text,
                "bbox": bbox.to_dict(), "k": int(k), "blocks": blocks}
        return decode_array(_post(f"{self.base}/energy_gradient", body, self.timeout)["gradient"])

    def decode(self, latent) -> np.ndarray:
        return decode_png(_post(f"{self.base}/decode", {"latent": encode_array(latent)}, self.timeout)["image"])


def _split(spec: str) -> tuple[str, str]:
    if spec.startswith(("http://", "https://")):
        return "http", spec
    kind, _, body = spec.partition(":")
    return kind, body


def make_denoiser(spec: str):
    kind, body = _split(spec)
    if kind == "toy":
        return toy_from_spec(body)
    if kind == "http":
        return HttpDenoiser(body)
    raise ContractError(f"unknown backend spec {spec!r}")


def make_planner_port(spec: str):
    kind, body = _split(spec)
    if kind == "script":
        return ScriptedTextPort(ScriptedReplySet.load(Path(body)))
    if kind == "http":
        return HttpTextPort(body)
    raise ContractError(f"unknown planner spec {spec!r}")


def make_vlm(spec: str):
    kind, body = _split(spec)
    if kind == "yes":
        return ConstantVlm("Yes")
    if kind == "const":
        return ConstantVlm(body)
    if kind == "script":
        return ScriptedVlm(ScriptedReplySet.load(Path(body)))
    if kind == "http":
        return HttpVlm(body)
    raise ContractError(f"unknown checker/judge spec {spec!r}")


def make_scorer(spec: str):
    kind, body = _split(spec)
    if kind == "centroid":
        return scorer_from_spec(body)
    if kind == "http":
        return HttpScorer(body)
    raise ContractError(f"unknown scorer spec {spec!r}")


def is_mock_spec(spec: str) -> bool:
    return _split(spec)[0] in ("toy", "script", "yes", "const", "centroid")
