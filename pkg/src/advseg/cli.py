"""``advseg`` command line: synth, train, eval, ablation, overlay.

Exit codes: 0 success, 1 config/parse, 2 output I/O, 3 dataset, 4 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .core import DatasetError, load_dataset
from .evaluation import EmptyDataset as EvalEmpty, evaluate, overlay, predict, render_report
from .experiment import ConfigFileError, ExperimentConfig, run_ablation
from .model import CheckpointMismatch, ConfigError, ShapeError, load_checkpoint
from .scenegen import GenerationPlan, InvalidSpec, generate_dataset
from .training import AllPixelsIgnored, EmptyDataset as TrainEmpty, train

log = logging.getLogger("advseg")

EXIT_OK, EXIT_CONFIG, EXIT_OUTPUT, EXIT_DATASET, EXIT_INTERNAL = 0, 1, 2, 3, 4


class OutputError(Exception):
    pass


def _write_text(path: Path, text: str) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as e:
        raise OutputError(f"cannot write {path}: {e.strerror or e}") from None
    return path


def _ensure_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".advseg-write-test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as e:
        raise OutputError(f"cannot write to {path}: {e.strerror or e}") from None
    return path


def _device(name: str) -> str:
    if name == "cpu":
        return "cpu"
    if name == "gpu":
        if not torch.cuda.is_available():
            raise ConfigFileError("--device gpu requested but no CUDA device is available")
        return "cuda"
    return "cuda" if torch.cuda.is_available() else "cpu"


def _figure(fn, *args):
    from . import plotting  # matplotlib is only imported by commands that draw

    try:
        return getattr(plotting, fn)(*args)
    except OSError as e:
        raise OutputError(f"cannot write figure: {e}") from None


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    try:
        plan = GenerationPlan.load(args.config)
    except json.JSONDecodeError as e:
        raise ConfigFileError(f"{args.config}: invalid JSON at line {e.lineno} column {e.colno}: {e.msg}") from None
    except OSError as e:
        raise ConfigFileError(f"{args.config}: cannot read plan ({e.strerror})") from None
    if args.seed is not None:
        plan = replace(plan, master_seed=args.seed).validate()
    if args.out is None:
        raise ConfigFileError("synth needs --out <dir>")
    out = _ensure_dir(Path(args.out))
    try:
        manifest = generate_dataset(plan, out, workers=args.workers)
    except DatasetError:
        raise
    except OSError as e:
        raise OutputError(f"cannot write dataset to {out}: {e}") from None
    print(f"wrote {len(manifest)} samples to {out}")
    for (w, t), n in sorted(manifest.cell_counts().items()):
        print(f"  {w}/{t}: {n}")
    return EXIT_OK


def _experiment(args) -> ExperimentConfig:
    if args.config is None:
        raise ConfigFileError("--config <experiment.json> is required")
    exp = ExperimentConfig.load(args.config)
    if args.seed is not None:
        exp.train = replace(exp.train, seed=args.seed)
        exp.seeds = (args.seed,)
    if args.out is not None:
        exp.out_dir = Path(args.out)
    if getattr(args, "format", None):
        exp.format = args.format
    return exp


def cmd_train(args) -> int:
    exp = _experiment(args)
    mode = exp.train.mode
    real = exp.dataset("real") if mode.needs_real else None
    synth = exp.dataset("synth") if mode.needs_synth else None
    out = _ensure_dir(exp.out_dir)
    result = train(exp.train, real, synth, out_dir=out, device=_device(args.device))
    if result.log:
        _figure("plot_losses", result.log, out / "losses.png")
        last = result.log[-1]
        print(f"iteration {last.iter}: l_seg={last.l_seg:.4f} l_was={last.l_was:.4f} "
              f"l_tas={last.l_tas:.4f} l_total={last.l_total:.4f}")
    print(f"final checkpoint: {out / 'final.pt'}")
    return EXIT_OK


def _eval_data(args):
    if not args.data:
        raise ConfigFileError("--data <dataset dir> is required")
    samples = []
    for root in args.data:
        samples.extend(load_dataset(root))
    return samples


def cmd_eval(args) -> int:
    if args.checkpoint is None:
        raise ConfigFileError("--checkpoint is required")
    ckpt = load_checkpoint(args.checkpoint)
    samples = _eval_data(args)
    device = _device(args.device)
    report = evaluate(ckpt.model.to(device), samples, device=device)
    name = args.name or Path(args.checkpoint).stem
    text = render_report({name: report}, fmt=args.format or "md")
    if args.out is not None:
        path = _write_text(Path(args.out), text)
        _figure("plot_condition_bars", {name: report}, path.with_suffix(".png"))
        _write_text(path.with_suffix(".json"), json.dumps(report.to_dict(), indent=2))
    for g, title in (("overall", "Overall (adverse)"), ("standard", "Standard")):
        v = report.miou(g)
        print(f"{title} mIoU: {'—' if v is None else f'{v:.2f}'}")
    return EXIT_OK


def cmd_ablation(args) -> int:
    exp = _experiment(args)
    real, synth = exp.dataset("real"), exp.dataset("synth")
    eval_set = exp.eval_set()
    if not eval_set:
        raise EvalEmpty("no eval_datasets configured")
    out = _ensure_dir(exp.out_dir)
    outcome = run_ablation(exp.train, real, synth, eval_set, modes=exp.modes, seeds=exp.seeds,
                           out_dir=out, device=_device(args.device), progress=lambda m: print(m, flush=True))
    table = outcome.table()
    text = render_report(table, fmt=exp.format, row_header="Mode")
    ext = "csv" if exp.format == "csv" else "md"
    _write_text(out / f"ablation.{ext}", text)
    _write_text(out / "ablation.json", json.dumps(outcome.to_dict(), indent=2))
    _figure("plot_condition_bars", table, out / "ablation.png", "Median mIoU per ablation mode")
    print(text, end="")
    return EXIT_OK


def cmd_overlay(args) -> int:
    if args.checkpoint is None or args.out is None:
        raise ConfigFileError("overlay needs --checkpoint and --out")
    ckpt = load_checkpoint(args.checkpoint)
    samples = _eval_data(args)
    if args.ids:
        wanted = set(args.ids)
        samples = [s for s in samples if s.id in wanted]
    samples = samples[: args.limit] if args.limit else samples
    out = _ensure_dir(Path(args.out))
    device = _device(args.device)
    model = ckpt.model.to(device)
    for s in samples:
        pred = predict(model, np.stack([s.image]), device=device)[0]
        try:
            overlay(s, pred, out / f"{s.id}.png")
        except OSError as e:
            raise OutputError(f"cannot write overlay: {e}") from None
    print(f"wrote {len(samples)} overlays to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config (generation plan for synth, experiment otherwise)")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", help="output directory (report file for eval)")
    common.add_argument("--format", choices=("md", "csv"), help="report format")
    common.add_argument("--device", choices=("auto", "cpu", "gpu"), default="auto")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="advseg", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"advseg {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset from a plan")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", parents=[common], help="train one ablation mode")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint per condition")
    s.add_argument("--checkpoint")
    s.add_argument("--data", action="append", help="dataset dir (repeatable)")
    s.add_argument("--name", help="row label in the report")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablation", parents=[common], help="train and evaluate all ablation modes")
    s.set_defaults(func=cmd_ablation)

    s = sub.add_parser("overlay", parents=[common], help="write prediction overlays as PNG")
    s.add_argument("--checkpoint")
    s.add_argument("--data", action="append")
    s.add_argument("--ids", nargs="*")
    s.add_argument("--limit", type=int, default=0)
    s.set_defaults(func=cmd_overlay)
    return p


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, OutputError):
        return EXIT_OUTPUT
    if isinstance(exc, (DatasetError, TrainEmpty, EvalEmpty, AllPixelsIgnored)):
        return EXIT_DATASET
    if isinstance(exc, (ConfigFileError, InvalidSpec, ConfigError, CheckpointMismatch, ShapeError, ValueError)):
        return EXIT_CONFIG
    return EXIT_INTERNAL


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if os.environ.get("ADVSEG_DETERMINISTIC") == "1":
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")
        torch.use_deterministic_algorithms(True)
    try:
        return args.func(args)
    except Exception as exc:  # mapped to documented exit codes
        code = _exit_code(exc)
        print(f"advseg {args.command}: error: {exc}", file=sys.stderr)
        if code == EXIT_INTERNAL:
            log.exception("internal error")
        return code


if __name__ == "__main__":
    sys.exit(main())
