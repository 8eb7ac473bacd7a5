"""Command line: ``run``, ``replay`` and ``eval``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .backends import make_vlm
from .candidates import DEFAULT_RATIOS
from .errors import ReplayMismatchError, StagePaintError
from .evaluation import build_questionnaire, evaluate, format_report, heuristic_plan
from .feedback import RetryPolicy, escalating_schedule
from .guidance import GuidanceConfig
from .pipeline import RunConfig, dumps, replay, run_pipeline
from .ports import ImageRef

log = logging.getLogger("stagepaint")

BLOCK_CHOICES = {"near-input": "near_input", "near-middle": "near_middle", "near-output": "near_output"}

# flag dest -> default; a config file may set any of these by the same name
RUN_DEFAULTS = {
    "prompt": None,
    "seed": 0,
    "steps": GuidanceConfig.T,
    "guide_until": GuidanceConfig.T_prime,
    "combine_until": GuidanceConfig.T_star,
    "lr": GuidanceConfig.eta,
    "blocks": "near-middle",
    "iters_per_step": 1,
    "overlap_ratios": ",".join(str(r) for r in DEFAULT_RATIOS),
    "max_retries": 2,
    "backend": "toy:seed=0",
    "planner": None,
    "checker": "yes",
    "scorer": "centroid:x=8,y=8",
    "out": None,
    "save_intermediates": False,
    "trace_energy": False,
}


def _ratios(text) -> tuple[float, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(float(r) for r in text)
    return tuple(float(r) for r in str(text).split(",") if r.strip())


def load_config_file(path: str | Path) -> dict:
    """Flat JSON object; keys use flag names with either ``-`` or ``_``."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(data, dict):
        raise SystemExit(f"config file {path} must hold a JSON object")
    out = {}
    for key, value in data.items():
        dest = key.lstrip("-").replace("-", "_")
        if dest not in RUN_DEFAULTS:
            raise SystemExit(f"unknown config key {key!r} in {path}")
        out[dest] = value
    return out


def resolve_run_options(args: argparse.Namespace) -> dict:
    opts = dict(RUN_DEFAULTS)
    if args.config:
        opts.update(load_config_file(args.config))
    for dest in RUN_DEFAULTS:
        value = getattr(args, dest, None)
        if value is not None:
            opts[dest] = value
    return opts


def run_config_from_options(opts: dict) -> RunConfig:
    for required in ("prompt", "planner", "out"):
        if not opts.get(required):
            raise SystemExit(f"--{required} is required (flag or config file)")
    blocks = BLOCK_CHOICES.get(opts["blocks"], opts["blocks"])
    guidance = GuidanceConfig(
        T=int(opts["steps"]),
        T_prime=int(opts["guide_until"]),
        T_star=int(opts["combine_until"]),
        eta=float(opts["lr"]),
        block_selection=blocks,
        guidance_iters_per_step=int(opts["iters_per_step"]),
    )
    max_retries = int(opts["max_retries"])
    return RunConfig(
        prompt=opts["prompt"],
        seed=int(opts["seed"]),
        guidance=guidance,
        overlap_ratios=_ratios(opts["overlap_ratios"]),
        retry=RetryPolicy(max_retries, escalating_schedule(max_retries)),
        backend=opts["backend"],
        planner=opts["planner"],
        checker=opts["checker"],
        scorer=opts["scorer"],
        out_dir=str(opts["out"]),
        save_intermediates=bool(opts["save_intermediates"]),
        trace_energy=bool(opts["trace_energy"]),
    )


def cmd_run(args) -> int:
    config = run_config_from_options(resolve_run_options(args))
    manifest = run_pipeline(config)
    out = Path(config.out_dir)
    if manifest.ok:
        print(f"ok: {len(manifest.stages)} stage(s); manifest at {out / 'manifest.json'}")
        return 0
    print(f"failed: {manifest.data['error']} (partial manifest at {out / 'manifest.json'})", file=sys.stderr)
    return 1


def cmd_replay(args) -> int:
    try:
        rerun = replay(args.manifest)
    except ReplayMismatchError as exc:
        loc = f" (stage {exc.stage}, step {exc.step})" if exc.stage is not None else ""
        print(f"mismatch{loc}: {exc}", file=sys.stderr)
        return 2
    print(f"replay verified: {len(rerun.stages)} stage(s) identical")
    return 0


IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".webp"}


def cmd_eval(args) -> int:
    """Images sorted by file name pair with prompt lines in order."""
    images = sorted(p for p in Path(args.images).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    prompts = [ln.strip() for ln in Path(args.prompts).read_text(encoding="utf-8").splitlines() if ln.strip()]
    if len(images) != len(prompts):
        print(f"{len(images)} images but {len(prompts)} prompts", file=sys.stderr)
        return 1
    refs = [ImageRef(pixels=np.asarray(Image.open(p).convert("RGB")), path=str(p)) for p in images]
    questionnaires = [build_questionnaire(p, heuristic_plan(p)) for p in prompts]
    scores = evaluate(refs, questionnaires, make_vlm(args.judge))
    report = Path(args.report)
    report.parent.mkdir(parents=True, exist_ok=True)
    report.write_text(format_report(scores), encoding="utf-8")
    report.with_name(report.name + ".json").write_text(dumps(scores.to_dict()), encoding="utf-8")
    print(format_report(scores), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stagepaint", description="Stage-by-stage multi-object image generation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="generate an image for a prompt")
    run.add_argument("--config", help="flat JSON file of run options; flags override it")
    run.add_argument("--prompt")
    run.add_argument("--seed", type=int)
    run.add_argument("--steps", type=int, help="total denoising steps T")
    run.add_argument("--guide-until", type=int, dest="guide_until", help="guide while t > this")
    run.add_argument("--combine-until", type=int, dest="combine_until", help="combine latents while t > this")
    run.add_argument("--lr", type=float, help="guidance step size")
    run.add_argument("--blocks", choices=sorted(BLOCK_CHOICES))
    run.add_argument("--iters-per-step", type=int, dest="iters_per_step")
    run.add_argument("--overlap-ratios", dest="overlap_ratios")
    run.add_argument("--max-retries", type=int, dest="max_retries")
    run.add_argument("--backend")
    run.add_argument("--planner")
    run.add_argument("--checker")
    run.add_argument("--scorer")
    run.add_argument("--out")
    run.add_argument("--save-intermediates", action="store_true", default=None, dest="save_intermediates")
    run.add_argument("--trace-energy", action="store_true", default=None, dest="trace_energy")
    run.set_defaults(func=cmd_run)

    rep = sub.add_parser("replay", help="re-execute a mock run and verify it")
    rep.add_argument("--manifest", required=True)
    rep.set_defaults(func=cmd_replay)

    ev = sub.add_parser("eval", help="questionnaire evaluation of a folder of images")
    ev.add_argument("--images", required=True)
    ev.add_argument("--prompts", required=True, help="text file, one prompt per line")
    ev.add_argument("--judge", required=True)
    ev.add_argument("--report", required=True)
    ev.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except StagePaintError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
