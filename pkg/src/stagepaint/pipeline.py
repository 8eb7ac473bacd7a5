"""End-to-end progressive generation, run manifests and replay.

A run directory holds ``manifest.json`` (stable key order, no timestamps),
``timing.json``, ``final.png`` and one ``stage_<n>/`` directory per object
with the stage image, its masks, its transcripts and, when intermediates are
saved, the latent trajectory blob.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import _kernels
from .backends import is_mock_spec, make_denoiser, make_planner_port, make_scorer, make_vlm
from .candidates import DEFAULT_RATIOS, generate_candidates, select_best
from .errors import (
    ContractError,
    LayoutExhaustedError,
    PlanningError,
    ReplayMismatchError,
    StagePaintError,
)
from .feedback import RetryPolicy, build_stage_questions, run_stage_with_feedback
from .geometry import Canvas, PositionChoice, rough_mask_first, rough_mask_next
from .guidance import GuidanceConfig, StageRecord, attention_centroid, canvas_of, single_object_diffusion
from .latent_io import digest, read_latent, write_latent
from .planner import ObjectPlan, Planner, make_subprompt, object_token_index

log = logging.getLogger(__name__)

MANIFEST_FORMAT = "stagepaint-manifest/1"


@dataclass
class RunConfig:
    prompt: str
    seed: int = 0
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    overlap_ratios: tuple = DEFAULT_RATIOS
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    backend: str = "toy:seed=0"
    planner: str = ""
    checker: str = "yes"
    scorer: str = "centroid:"
    out_dir: str | None = None
    save_intermediates: bool = False
    trace_energy: bool = False

    def __post_init__(self):
        if not self.prompt or not self.prompt.strip():
            raise ContractError("prompt must be non-empty")
        self.overlap_ratios = tuple(float(r) for r in self.overlap_ratios)
        if not self.overlap_ratios or any(not 0.0 <= r < 1.0 for r in self.overlap_ratios):
            raise ContractError(f"overlap ratios must be non-empty and in [0, 1): {self.overlap_ratios}")

    def snapshot(self) -> dict:
        """Everything needed to replay the run; the output directory is omitted."""
        return {
            "prompt": self.prompt,
            "seed": int(self.seed),
            "guidance": self.guidance.to_dict(),
            "overlap_ratios": list(self.overlap_ratios),
            "retry": self.retry.to_dict(),
            "backend": self.backend,
            "planner": self.planner,
            "checker": self.checker,
            "scorer": self.scorer,
            "save_intermediates": bool(self.save_intermediates),
            "trace_energy": bool(self.trace_energy),
        }

    @classmethod
    def from_snapshot(cls, data: dict, out_dir: str | None = None) -> "RunConfig":
        return cls(
            prompt=data["prompt"],
            seed=int(data["seed"]),
            guidance=GuidanceConfig(**data["guidance"]),
            overlap_ratios=tuple(data["overlap_ratios"]),
            retry=RetryPolicy.from_dict(data["retry"]),
            backend=data["backend"],
            planner=data["planner"],
            checker=data["checker"],
            scorer=data["scorer"],
            out_dir=out_dir,
            save_intermediates=bool(data.get("save_intermediates", False)),
            trace_energy=bool(data.get("trace_energy", False)),
        )


@dataclass
class Ports:
    planner: object
    denoiser: object
    checker: object
    scorer: object

    @classmethod
    def from_config(cls, config: RunConfig) -> "Ports":
        return cls(
            planner=make_planner_port(config.planner),
            denoiser=make_denoiser(config.backend),
            checker=make_vlm(config.checker),
            scorer=make_scorer(config.scorer),
        )


@dataclass
class RunManifest:
    data: dict
    timing: dict = field(default_factory=dict)
    records: list = field(default_factory=list)
    plan: ObjectPlan | None = None

    @property
    def ok(self) -> bool:
        return self.data["status"] == "ok"

    @property
    def stages(self) -> list[dict]:
        return self.data["stages"]

    def to_json(self) -> str:
        return dumps(self.data)


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def _next_rough_mask(opt, num, prev_mask, canvas, notes):
    try:
        return opt, rough_mask_next(opt, num, prev_mask, canvas)
    except LayoutExhaustedError as exc:
        other = PositionChoice.TOP if opt is PositionChoice.RIGHT else PositionChoice.RIGHT
        msg = f"no space {opt.value} of previous object ({exc}); switched to {other.value}"
        log.warning(msg)
        notes.append(msg)
        return other, rough_mask_next(other, num, prev_mask, canvas)


def _save_png(path: Path, pixels: np.ndarray) -> None:
    Image.fromarray(np.asarray(pixels, dtype=np.uint8)).save(path, format="PNG")


def _stage_entry(n, obj, record: StageRecord, opt, num, rough, overlap, overrides, out: Path | None,
                 save_intermediates: bool) -> dict:
    centroid = None
    if record.final_attention is not None and record.final_attention.sum() > 0:
        centroid = list(attention_centroid(record.final_attention))
    artifacts = {"image": None, "masks": None, "transcript": None, "trajectory": None}
    if out is not None:
        sdir = out / f"stage_{n}"
        sdir.mkdir(parents=True, exist_ok=True)
        _save_png(sdir / "image.png", record.image.pixels)
        artifacts["image"] = f"stage_{n}/image.png"
        artifacts["masks"] = f"stage_{n}/masks.json"
        artifacts["transcript"] = f"stage_{n}/transcript.json"
        if save_intermediates:
            write_latent(sdir / "trajectory.bin", record.trajectory)
            artifacts["trajectory"] = f"stage_{n}/trajectory.bin"
        record.image.path = str(sdir / "image.png")
    return {
        "n": n,
        "object": obj,
        "subprompt": record.subprompt,
        "token_index": record.token_index,
        "opt": PositionChoice(opt).value,
        "num": int(num),
        "overrides": list(overrides),
        "rough_mask": rough.to_dict(),
        "used_mask": record.rough_mask.to_dict(),
        "overlap": bool(overlap),
        "candidates": list(record.candidates),
        "chosen_ratio": record.chosen_ratio,
        "feedback": [rep.to_dict() for rep in record.attempts],
        "chosen_attempt": record.chosen_attempt,
        "passed": any(rep.passed for rep in record.attempts),
        "config_used": record.config.to_dict(),
        "precise_mask": record.precise_mask.to_dict(),
        "precise_mask_fallback": record.precise_mask_fallback,
        "attention_centroid": centroid,
        "guidance_trace": [list(x) for x in record.guidance_trace],
        "trajectory_digests": record.trajectory_digests(),
        "notes": list(record.notes),
        "artifacts": artifacts,
    }


def _write_stage_sidecars(out: Path, entry: dict, planner: Planner) -> None:
    sdir = out / f"stage_{entry['n']}"
    masks = {k: entry[k] for k in ("rough_mask", "used_mask", "precise_mask", "candidates", "chosen_ratio")}
    (sdir / "masks.json").write_text(dumps(masks), encoding="utf-8")
    transcript = {
        "planner": [e.to_dict() for e in planner.transcript if e.stage == entry["n"]],
        "feedback": entry["feedback"],
    }
    (sdir / "transcript.json").write_text(dumps(transcript), encoding="utf-8")


def run_pipeline(config: RunConfig, ports: Ports | None = None, write: bool = True) -> RunManifest:
    """Decompose the prompt, then plan, generate and check one object per stage."""
    ports = ports or Ports.from_config(config)
    out = Path(config.out_dir) if (write and config.out_dir) else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    planner = Planner(ports.planner)
    canvas: Canvas = canvas_of(ports.denoiser)
    data = {
        "format": MANIFEST_FORMAT,
        "kernel_backend": _kernels.BACKEND,
        "config": config.snapshot(),
        "canvas": {"width": canvas.width, "height": canvas.height},
        "status": "ok",
        "error": None,
        "plan": None,
        "planner_transcript": [],
        "planner_flags": [],
        "stages": [],
        "final_image": None,
    }
    manifest = RunManifest(data)
    timing = {"stages": []}
    t_run = time.perf_counter()
    prompt = config.prompt
    try:
        plan = planner.decompose(prompt)
        manifest.plan = plan
        data["plan"] = plan.to_dict()
        init = np.asarray(ports.denoiser.initial_latent(config.seed), dtype=np.float64)
        prev: StageRecord | None = None
        for n in range(1, len(plan.objects) + 1):
            t_stage = time.perf_counter()
            planner.stage = n
            obj = plan.objects[n - 1]
            sub = make_subprompt(plan, n)
            k = object_token_index(sub.text, obj)
            overrides: list[str] = []
            if n == 1:
                opt, num = planner.plan_first(prompt, obj)
                rough = rough_mask_first(opt, num, canvas)
                overlap = False
                prev_obj = None
            else:
                prior = plan.objects[: n - 1]
                prev_obj = prior[-1]
                try:
                    opt = planner.position_next(prompt, prior, obj)
                except PlanningError as exc:
                    opt = PositionChoice.RIGHT
                    overrides.append(f"position defaulted to right: {exc}")
                    log.warning(overrides[-1])
                try:
                    num = planner.count_next(prompt, prior, opt)
                except PlanningError as exc:
                    num = 1
                    overrides.append(f"count defaulted to 1: {exc}")
                    log.warning(overrides[-1])
                try:
                    opt, rough = _next_rough_mask(opt, num, prev.precise_mask, canvas, overrides)
                except LayoutExhaustedError as exc:
                    # a diffuse attention map can yield a precise mask that fills the canvas
                    overrides.append(f"precise mask of stage {n - 1} leaves no room ({exc}); "
                                     f"planned from its rough mask instead")
                    log.warning(overrides[-1])
                    opt, rough = _next_rough_mask(opt, num, prev.rough_mask, canvas, overrides)
                overlap = planner.judge_overlap(prompt, obj, prev_obj)
            questions = build_stage_questions(sub.text, obj, n, opt if n > 1 else None, prev_obj)

            def run_single(bbox, cfg, n=n, sub=sub, k=k, prev=prev):
                return single_object_diffusion(n, sub.text, k, bbox, prev, cfg, ports.denoiser, init,
                                               trace_energy=config.trace_energy)

            def generate(cfg, opt=opt, num=num, rough=rough, overlap=overlap, prev=prev, sub=sub, run_single=run_single):
                if not overlap:
                    return run_single(rough, cfg)
                dropped: list = []
                cands = generate_candidates(lambda b: run_single(b, cfg), opt, num, prev.precise_mask,
                                            canvas, config.overlap_ratios, dropped)
                best = select_best(cands, sub.text, ports.scorer)
                record = best.record
                record.candidates = [c.to_dict() for c in cands]
                record.chosen_ratio = best.ratio
                record.notes.extend(dropped)
                return record

            record = run_stage_with_feedback(generate, config.guidance, questions, ports.checker, config.retry)
            entry = _stage_entry(n, obj, record, opt, num, rough, overlap, overrides, out, config.save_intermediates)
            data["stages"].append(entry)
            manifest.records.append(record)
            if out is not None:
                _write_stage_sidecars(out, entry, planner)
            timing["stages"].append({"n": n, "seconds": time.perf_counter() - t_stage})
            prev = record
        if out is not None and manifest.records:
            _save_png(out / "final.png", manifest.records[-1].image.pixels)
            data["final_image"] = "final.png"
    except ReplayMismatchError:
        raise
    except StagePaintError as exc:
        log.error("run failed: %s", exc)
        data["status"] = "failed"
        data["error"] = f"{type(exc).__name__}: {exc}"
    data["planner_transcript"] = [e.to_dict() for e in planner.transcript]
    data["planner_flags"] = list(planner.flags)
    timing["total_seconds"] = time.perf_counter() - t_run
    manifest.timing = timing
    if out is not None:
        (out / "manifest.json").write_text(manifest.to_json(), encoding="utf-8")
        (out / "timing.json").write_text(dumps(timing), encoding="utf-8")
    return manifest


# --------------------------------------------------------------------------
# replay
# --------------------------------------------------------------------------

class RecordedTextPort:
    """Serves recorded planner replies in order, checking each prompt matches."""

    def __init__(self, entries: list[dict]):
        self.entries = list(entries)
        self.pos = 0

    def complete(self, prompt: str) -> str:
        if self.pos >= len(self.entries):
            raise ReplayMismatchError("replay issued more planner calls than were recorded")
        entry = self.entries[self.pos]
        if entry["prompt"] != prompt:
            raise ReplayMismatchError(f"planner prompt #{self.pos} differs from the recording", stage=entry.get("stage"))
        self.pos += 1
        return entry["reply"]


class RecordedVlm:
    def __init__(self, qa: list[tuple[str, str]]):
        self.qa = list(qa)
        self.pos = 0

    def ask(self, image_ref, question: str) -> str:
        if self.pos >= len(self.qa):
            raise ReplayMismatchError("replay issued more checker calls than were recorded")
        q, a = self.qa[self.pos]
        if q != question:
            raise ReplayMismatchError(f"checker question #{self.pos} differs from the recording")
        self.pos += 1
        return a


def _first_diff(a, b, path=""):
    if type(a) is not type(b):
        return path or "/"
    if isinstance(a, dict):
        for key in sorted(set(a) | set(b)):
            if key not in a or key not in b:
                return f"{path}/{key}"
            d = _first_diff(a[key], b[key], f"{path}/{key}")
            if d:
                return d
        return None
    if isinstance(a, list):
        for i, (x, y) in enumerate(zip(a, b)):
            d = _first_diff(x, y, f"{path}/{i}")
            if d:
                return d
        return None if len(a) == len(b) else f"{path}/{min(len(a), len(b))}"
    return None if a == b else (path or "/")


def _mismatch_at_step(n: int, i: int, T: int, what: str) -> ReplayMismatchError:
    where = "initial latent" if i == 0 else f"latent after step t={T - i + 1}"
    err = ReplayMismatchError(f"stage {n}: {what} diverges at trajectory index {i} ({where})", stage=n, step=i)
    err.timestep = T - i + 1 if i else None
    return err


def _check_blobs(run_dir: Path, recorded: dict) -> None:
    for stage in recorded["stages"]:
        rel = stage["artifacts"].get("trajectory")
        if not rel:
            continue
        traj = read_latent(run_dir / rel)
        digests = stage["trajectory_digests"]
        T = len(digests) - 1
        for i, z in enumerate(traj):
            if i >= len(digests) or digest(z) != digests[i]:
                raise _mismatch_at_step(stage["n"], i, T, "saved trajectory blob")


def compare_manifests(recorded: dict, rerun: dict) -> None:
    """Raise :class:`ReplayMismatchError` at the first divergence between two manifests."""
    if recorded.get("kernel_backend") != rerun.get("kernel_backend"):
        raise ReplayMismatchError("kernel backend differs from the recorded run")
    rec_stages, new_stages = recorded["stages"], rerun["stages"]
    for old, new in zip(rec_stages, new_stages):
        n = old["n"]
        for key in ("object", "subprompt", "opt", "num", "rough_mask", "overlap", "used_mask"):
            if old[key] != new[key]:
                raise ReplayMismatchError(f"stage {n}: {key} differs", stage=n)
        a, b = old["trajectory_digests"], new["trajectory_digests"]
        T = len(a) - 1
        for i in range(max(len(a), len(b))):
            if i >= len(a) or i >= len(b) or a[i] != b[i]:
                raise _mismatch_at_step(n, i, T, "trajectory")
        d = _first_diff(old, new)
        if d:
            raise ReplayMismatchError(f"stage {n}: field {d} differs", stage=n)
    if len(rec_stages) != len(new_stages):
        n = min(len(rec_stages), len(new_stages)) + 1
        raise ReplayMismatchError(f"stage count differs ({len(rec_stages)} vs {len(new_stages)})", stage=n)
    d = _first_diff(recorded, rerun)
    if d:
        raise ReplayMismatchError(f"manifest field {d} differs")


def replay(manifest_path: str | Path) -> RunManifest:
    """Re-execute a mock-backed run from its manifest and verify every stage bit-for-bit."""
    manifest_path = Path(manifest_path)
    recorded = json.loads(manifest_path.read_text(encoding="utf-8"))
    config = RunConfig.from_snapshot(recorded["config"])
    for spec in (config.backend, config.scorer):
        if not is_mock_spec(spec):
            raise ContractError(f"replay requires mock backends, got {spec!r}")
    _check_blobs(manifest_path.parent, recorded)
    qa = [(v["question"], v["answer"])
          for stage in recorded["stages"] for rep in stage["feedback"] for v in rep["verdicts"]]
    ports = Ports(
        planner=RecordedTextPort(recorded["planner_transcript"]),
        denoiser=make_denoiser(config.backend),
        checker=RecordedVlm(qa),
        scorer=make_scorer(config.scorer),
    )
    rerun = run_pipeline(config, ports, write=False)
    # artifact paths are only known to the recorded run
    for old, new in zip(recorded["stages"], rerun.data["stages"]):
        new["artifacts"] = old["artifacts"]
    rerun.data["final_image"] = recorded.get("final_image")
    compare_manifests(recorded, rerun.data)
    return rerun
