"""Synthetic-aware training: composite loss, gradient routing, alternating schedule, DCNN freeze.

One optimizer step routes gradients as follows:

* segmentation loss -> DCNN, EncoderRest, Decoder (never the supervisor heads)
* weather / time loss -> DCNN and the matching supervisor head only
* standard-real batch -> DCNN parameters receive no update at all

The supervisor heads sit off the segmentation path, so the first two rules are
structural. Each head is trained on its own cross-entropy while the gradient it
sends into the DCNN is multiplied by alpha (beta), which makes the DCNN see
exactly d/dθ [l_seg + alpha*l_was + beta*l_tas]. With ``scale_head_gradients``
the heads are also trained on the alpha/beta-scaled losses.
"""

from __future__ import annotations

import csv
import enum
import json
import logging
import math
import re
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .core import IGNORE_INDEX, AdvsegError, DomainTag, LabeledSample
from .model import (
    Checkpoint,
    CheckpointMismatch,
    ModelConfig,
    Partition,
    SegmentationModel,
    build_model,
    load_checkpoint,
    parameters_of,
    save_checkpoint,
)

log = logging.getLogger(__name__)

METRICS_COLUMNS = ["iter", "domain", "l_seg", "l_was", "l_tas", "l_total", "lr"]


class EmptyDataset(AdvsegError, ValueError):
    def __init__(self, source: str):
        super().__init__(f"{source} dataset is empty or missing")
        self.source = source


class AllPixelsIgnored(AdvsegError, ValueError):
    pass


class AblationMode(str, enum.Enum):
    SCRATCH_SYNTH_ONLY = "scratch_synth_only"
    SCRATCH_REAL_ONLY = "scratch_real_only"
    SCRATCH_REAL_THEN_FINETUNE_SYNTH = "scratch_real_then_finetune_synth"
    ALTERNATING_NO_SUPERVISORS = "alternating_no_supervisors"
    ALTERNATING_WEATHER_AWARE = "alternating_weather_aware"
    ALTERNATING_WEATHER_TIME_AWARE = "alternating_weather_time_aware"

    @property
    def alternating(self) -> bool:
        return self.value.startswith("alternating")

    @property
    def heads(self) -> tuple[str, ...]:
        if self is AblationMode.ALTERNATING_WEATHER_AWARE:
            return ("was",)
        if self is AblationMode.ALTERNATING_WEATHER_TIME_AWARE:
            return ("was", "tas")
        return ()

    @property
    def needs_real(self) -> bool:
        return self is not AblationMode.SCRATCH_SYNTH_ONLY

    @property
    def needs_synth(self) -> bool:
        return self is not AblationMode.SCRATCH_REAL_ONLY

    @property
    def title(self) -> str:
        return _MODE_TITLES[self]


_MODE_TITLES = {
    AblationMode.SCRATCH_SYNTH_ONLY: "scratch on synthetic",
    AblationMode.SCRATCH_REAL_ONLY: "scratch on real",
    AblationMode.SCRATCH_REAL_THEN_FINETUNE_SYNTH: "scratch on real, fine-tuned on synthetic",
    AblationMode.ALTERNATING_NO_SUPERVISORS: "alternating real + synthetic",
    AblationMode.ALTERNATING_WEATHER_AWARE: "alternating + weather aware",
    AblationMode.ALTERNATING_WEATHER_TIME_AWARE: "alternating + weather and time aware",
}


@dataclass(frozen=True)
class OptimizerConfig:
    base_lr: float = 0.007
    momentum: float = 0.9
    weight_decay: float = 5e-4
    poly_power: float = 0.9


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 1e-5
    beta: float = 1e-5
    batch_size: int = 4
    iterations: int = 2000
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    seed: int = 0
    mode: AblationMode = AblationMode.ALTERNATING_WEATHER_TIME_AWARE
    checkpoint_every: int = 500
    finetune_fraction: float = 0.25
    scale_head_gradients: bool = False
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self) -> "TrainConfig":
        if not (self.alpha >= 0 and math.isfinite(self.alpha)):
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if not (self.beta >= 0 and math.isfinite(self.beta)):
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.iterations < 0:
            raise ValueError(f"iterations must be >= 0, got {self.iterations}")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")
        if not 0.0 <= self.finetune_fraction <= 1.0:
            raise ValueError("finetune_fraction must lie in [0, 1]")
        if self.optimizer.base_lr < 0 or not 0 <= self.optimizer.momentum < 1:
            raise ValueError("optimizer: need base_lr >= 0 and 0 <= momentum < 1")
        AblationMode(self.mode)
        self.model.validate()
        return self

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["optimizer"] = asdict(self.optimizer)
        d["mode"] = AblationMode(self.mode).value
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config key {sorted(unknown)[0]!r}")
        if "optimizer" in d:
            d["optimizer"] = OptimizerConfig(**d["optimizer"])
        if "mode" in d:
            d["mode"] = AblationMode(d["mode"])
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        return cls(**d).validate()


# ---------------------------------------------------------------- data


@dataclass
class Batch:
    images: torch.Tensor  # B x 3 x H x W
    masks: torch.Tensor  # B x H x W, int64
    weather: torch.Tensor  # B
    time: torch.Tensor  # B
    domain: DomainTag
    ids: tuple[str, ...] = ()

    def to(self, device) -> "Batch":
        return replace(
            self,
            images=self.images.to(device),
            masks=self.masks.to(device),
            weather=self.weather.to(device),
            time=self.time.to(device),
        )


class BatchSource:
    """A dataset held as stacked tensors, sliced into batches by index."""

    def __init__(self, samples: Sequence[LabeledSample], name: str = "dataset"):
        if not samples:
            raise EmptyDataset(name)
        domains = {s.domain for s in samples}
        if len(domains) != 1:
            raise ValueError(f"{name} dataset mixes domains {sorted(d.value for d in domains)}")
        self.name = name
        self.domain = domains.pop()
        self.ids = tuple(s.id for s in samples)
        self.images = torch.from_numpy(np.stack([s.image for s in samples])).permute(0, 3, 1, 2).contiguous()
        self.masks = torch.from_numpy(np.stack([s.mask for s in samples]).astype(np.int64))
        self.weather = torch.tensor([s.weather.index for s in samples], dtype=torch.long)
        self.time = torch.tensor([s.time.index for s in samples], dtype=torch.long)

    def __len__(self):
        return len(self.ids)

    @property
    def resolution(self) -> tuple[int, int]:
        return tuple(self.masks.shape[-2:])

    def batch(self, indices) -> Batch:
        idx = torch.as_tensor(np.asarray(indices, dtype=np.int64))
        return Batch(
            images=self.images[idx],
            masks=self.masks[idx],
            weather=self.weather[idx],
            time=self.time[idx],
            domain=self.domain,
            ids=tuple(self.ids[i] for i in idx.tolist()),
        )


def as_source(data, name: str) -> BatchSource:
    if isinstance(data, BatchSource):
        return data
    if data is None or len(data) == 0:
        raise EmptyDataset(name)
    return BatchSource(list(data), name)


def _index_batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[list[int]]:
    """Endless index batches; each pass over the data is a fresh permutation."""
    order, pos = rng.permutation(n), 0
    while True:
        out = []
        while len(out) < batch_size:
            if pos == n:
                order, pos = rng.permutation(n), 0
            take = min(batch_size - len(out), n - pos)
            out.extend(order[pos:pos + take].tolist())
            pos += take
        yield out


def _stream_rngs(seed: int, k: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(k)]


def single_source_batches(source, batch_size: int, seed: int, name: str = "dataset") -> Iterator[Batch]:
    source = as_source(source, name)
    (rng,) = _stream_rngs(seed, 1)
    for idx in _index_batches(len(source), batch_size, rng):
        yield source.batch(idx)


def alternating_batches(real_source, synth_source, batch_size: int, seed: int) -> Iterator[Batch]:
    """Endless stream alternating real, synthetic, real, ... batches.

    Each source is reshuffled on every pass, so the smaller one simply cycles.
    """
    real = as_source(real_source, "real")
    synth = as_source(synth_source, "synth")
    rng_real, rng_synth = _stream_rngs(seed, 2)
    real_it = _index_batches(len(real), batch_size, rng_real)
    synth_it = _index_batches(len(synth), batch_size, rng_synth)
    while True:
        yield real.batch(next(real_it))
        yield synth.batch(next(synth_it))


# ---------------------------------------------------------------- losses


@dataclass(frozen=True)
class LossBundle:
    l_seg: float
    l_was: float
    l_tas: float
    l_total: float

    @classmethod
    def assemble(cls, l_seg: float, l_was: float, l_tas: float, alpha: float, beta: float) -> "LossBundle":
        return cls(l_seg, l_was, l_tas, l_seg + alpha * l_was + beta * l_tas)


def _loss_tensors(model: SegmentationModel, batch: Batch, heads, grad_scale=None):
    if not bool((batch.masks != IGNORE_INDEX).any()):
        raise AllPixelsIgnored(f"batch {list(batch.ids)} contains only ignored pixels")
    out = model(batch.images, with_supervisors=bool(heads), heads=heads, supervisor_grad_scale=grad_scale)
    l_seg = F.cross_entropy(out.seg_logits, batch.masks, ignore_index=IGNORE_INDEX)
    l_was = F.cross_entropy(out.weather_logits, batch.weather) if "was" in heads else None
    l_tas = F.cross_entropy(out.time_logits, batch.time) if "tas" in heads else None
    return l_seg, l_was, l_tas


def compute_losses(model: SegmentationModel, batch: Batch, config: TrainConfig) -> LossBundle:
    """Evaluate the three loss terms and their weighted total (no gradients)."""
    with torch.no_grad():
        l_seg, l_was, l_tas = _loss_tensors(model, batch, AblationMode(config.mode).heads)
    return LossBundle.assemble(
        float(l_seg),
        float(l_was) if l_was is not None else 0.0,
        float(l_tas) if l_tas is not None else 0.0,
        config.alpha,
        config.beta,
    )


# ---------------------------------------------------------------- optimisation


def make_optimizer(model: SegmentationModel, cfg: OptimizerConfig) -> torch.optim.SGD:
    return torch.optim.SGD(
        model.parameters(), lr=cfg.base_lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay
    )


def poly_lr(cfg: OptimizerConfig, step: int, max_steps: int) -> float:
    if max_steps <= 0:
        return cfg.base_lr
    return cfg.base_lr * max(0.0, 1.0 - step / max_steps) ** cfg.poly_power


@dataclass
class LogRow:
    iter: int
    domain: str
    l_seg: float
    l_was: float
    l_tas: float
    l_total: float
    lr: float

    def as_csv(self) -> list[str]:
        return [str(self.iter), self.domain] + [repr(float(v)) for v in
                                                (self.l_seg, self.l_was, self.l_tas, self.l_total, self.lr)]


@dataclass
class TrainState:
    model: SegmentationModel
    optimizer: torch.optim.Optimizer
    iteration: int = 0
    phase: int = 0
    phase_start: int = 0
    phase_length: int = 0
    heads: tuple[str, ...] = ()
    freeze_on_real: bool = False
    log: list[LogRow] = field(default_factory=list)


def new_state(config: TrainConfig, model: SegmentationModel | None = None) -> TrainState:
    mode = AblationMode(config.mode)
    model = model or build_model(config.model, seed=config.seed)
    return TrainState(
        model=model,
        optimizer=make_optimizer(model, config.optimizer),
        phase_length=config.iterations,
        heads=mode.heads,
        freeze_on_real=mode.alternating,
    )


def train_step(state: TrainState, batch: Batch, config: TrainConfig) -> TrainState:
    """One optimizer step with per-loss routing and the real-batch DCNN freeze."""
    model = state.model
    model.train()
    heads = state.heads
    frozen = state.freeze_on_real and batch.domain is DomainTag.STANDARD_REAL
    dcnn = parameters_of(model, Partition.DCNN)
    lr = poly_lr(config.optimizer, state.iteration - state.phase_start, state.phase_length)
    for group in state.optimizer.param_groups:
        group["lr"] = lr

    grad_scale = None if config.scale_head_gradients else (config.alpha, config.beta)
    head_weight = {"was": config.alpha, "tas": config.beta} if config.scale_head_gradients else {"was": 1.0, "tas": 1.0}
    if frozen:
        # no DCNN gradients are even computed on a frozen step
        for p in dcnn:
            p.requires_grad_(False)
    try:
        l_seg, l_was, l_tas = _loss_tensors(model, batch, heads, grad_scale)
        objective = l_seg
        if l_was is not None:
            objective = objective + head_weight["was"] * l_was
        if l_tas is not None:
            objective = objective + head_weight["tas"] * l_tas
        state.optimizer.zero_grad(set_to_none=True)
        objective.backward()
    finally:
        if frozen:
            for p in dcnn:
                p.requires_grad_(True)
    if frozen:
        for p in dcnn:
            p.grad = None
    state.optimizer.step()
    state.iteration += 1

    bundle = LossBundle.assemble(
        float(l_seg.detach()),
        float(l_was.detach()) if l_was is not None else 0.0,
        float(l_tas.detach()) if l_tas is not None else 0.0,
        config.alpha,
        config.beta,
    )
    state.log.append(LogRow(state.iteration, batch.domain.value, bundle.l_seg, bundle.l_was,
                            bundle.l_tas, bundle.l_total, lr))
    return state


# ---------------------------------------------------------------- driver


@dataclass
class Phase:
    kind: str  # "real", "synth" or "alternating"
    length: int
    heads: tuple[str, ...]
    freeze_on_real: bool


def plan_phases(config: TrainConfig) -> list[Phase]:
    mode = AblationMode(config.mode)
    n = config.iterations
    if mode is AblationMode.SCRATCH_REAL_ONLY:
        return [Phase("real", n, (), False)]
    if mode is AblationMode.SCRATCH_SYNTH_ONLY:
        return [Phase("synth", n, (), False)]
    if mode is AblationMode.SCRATCH_REAL_THEN_FINETUNE_SYNTH:
        ft = int(round(n * config.finetune_fraction))
        return [Phase("real", n - ft, (), False), Phase("synth", ft, (), False)]
    return [Phase("alternating", n, mode.heads, True)]


def _phase_stream(phase: Phase, index: int, config: TrainConfig, real, synth) -> Iterator[Batch]:
    seed = int(np.random.SeedSequence([config.seed, 7919, index]).generate_state(1)[0])
    if phase.kind == "alternating":
        return alternating_batches(real, synth, config.batch_size, seed)
    source = real if phase.kind == "real" else synth
    return single_source_batches(source, config.batch_size, seed, phase.kind)


@dataclass
class TrainResult:
    model: SegmentationModel
    log: list[LogRow]
    checkpoints: list[Path] = field(default_factory=list)


_CKPT_RE = re.compile(r"^checkpoint_(\d{6,})\.pt$")


def checkpoint_path(out_dir, iteration: int) -> Path:
    return Path(out_dir) / f"checkpoint_{iteration:06d}.pt"


def list_checkpoints(out_dir) -> list[tuple[int, Path]]:
    out_dir = Path(out_dir)
    if not out_dir.is_dir():
        return []
    found = []
    for p in out_dir.iterdir():
        m = _CKPT_RE.match(p.name)
        if m:
            found.append((int(m.group(1)), p))
    return sorted(found)


def write_metrics(rows: Sequence[LogRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_COLUMNS)
        for r in rows:
            w.writerow(r.as_csv())


def read_metrics(path) -> list[LogRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [
            LogRow(int(r["iter"]), r["domain"], float(r["l_seg"]), float(r["l_was"]),
                   float(r["l_tas"]), float(r["l_total"]), float(r["lr"]))
            for r in reader
        ]


def _save(state: TrainState, config: TrainConfig, out_dir: Path, path: Path) -> Path:
    extra = {"train_config": config.to_dict(), "phase": state.phase, "phase_start": state.phase_start}
    return save_checkpoint(path, state.model, state.iteration, state.optimizer.state_dict(), extra)


def _resume(config: TrainConfig, out_dir: Path) -> Optional[tuple[TrainState, Checkpoint]]:
    found = list_checkpoints(out_dir)
    if not found:
        return None
    _, path = found[-1]
    ckpt = load_checkpoint(path, expected_config=config.model)
    if ckpt.extra.get("train_config") != json.loads(json.dumps(config.to_dict())):
        raise CheckpointMismatch(f"{path}: written by a different training config")
    phases = plan_phases(config)
    state = new_state(config, ckpt.model)
    state.iteration = ckpt.iteration
    state.phase = int(ckpt.extra["phase"])
    state.phase_start = int(ckpt.extra["phase_start"])
    if state.phase < len(phases):
        ph = phases[state.phase]
        state.phase_length, state.heads, state.freeze_on_real = ph.length, ph.heads, ph.freeze_on_real
        if ckpt.optimizer_state is not None:
            state.optimizer.load_state_dict(ckpt.optimizer_state)
    metrics = out_dir / "metrics.csv"
    if metrics.is_file():
        state.log = [r for r in read_metrics(metrics) if r.iter <= state.iteration]
    return state, ckpt


def train(config: TrainConfig, real_dataset=None, synth_dataset=None, out_dir=None,
          resume: bool = True, device="cpu") -> TrainResult:
    """Run ``config.iterations`` steps of the configured ablation mode.

    With ``out_dir`` set, numbered checkpoints are written every
    ``checkpoint_every`` steps and at the end, the metrics log goes to
    ``metrics.csv``, and an interrupted run resumes from its latest checkpoint.
    """
    config.validate()
    mode = AblationMode(config.mode)
    real = as_source(real_dataset, "real") if mode.needs_real else None
    synth = as_source(synth_dataset, "synth") if mode.needs_synth else None
    for src in (real, synth):
        if src is not None and src.resolution != tuple(config.model.input_resolution):
            raise CheckpointMismatch(
                f"{src.name} dataset resolution {src.resolution} != model input {config.model.input_resolution}")

    out_path = Path(out_dir) if out_dir is not None else None
    state = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        if resume:
            resumed = _resume(config, out_path)
            if resumed is not None:
                state = resumed[0]
                log.info("resuming %s from iteration %d", mode.value, state.iteration)
    if state is None:
        state = new_state(config)
    state.model.to(device)
    if state.iteration and device != "cpu":
        state.optimizer.load_state_dict(state.optimizer.state_dict())

    checkpoints = [p for it, p in list_checkpoints(out_path)] if out_path is not None else []
    phases = plan_phases(config)
    start = 0
    for idx, phase in enumerate(phases):
        end = start + phase.length
        if state.iteration >= end:
            start = end
            continue
        if state.phase != idx or state.iteration == start:
            state.phase, state.phase_start = idx, start
            state.phase_length, state.heads, state.freeze_on_real = phase.length, phase.heads, phase.freeze_on_real
            state.optimizer = make_optimizer(state.model, config.optimizer)
        stream = _phase_stream(phase, idx, config, real, synth)
        for _ in range(state.iteration - start):
            next(stream)
        while state.iteration < end:
            train_step(state, next(stream).to(device), config)
            if out_path is not None and config.checkpoint_every and state.iteration % config.checkpoint_every == 0:
                checkpoints.append(_save(state, config, out_path, checkpoint_path(out_path, state.iteration)))
                write_metrics(state.log, out_path / "metrics.csv")
        start = end

    if out_path is not None:
        final = checkpoint_path(out_path, state.iteration)
        if not final.exists():
            checkpoints.append(_save(state, config, out_path, final))
        write_metrics(state.log, out_path / "metrics.csv")
        save_final = out_path / "final.pt"
        save_final.write_bytes(final.read_bytes())
    state.model.to("cpu")
    return TrainResult(state.model, state.log, sorted(set(checkpoints)))


def fine_tune(checkpoint, dataset, config: TrainConfig, out_dir=None, device="cpu") -> TrainResult:
    """Continue training a checkpoint on one dataset: no freezing, no supervisors, fresh schedule."""
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    if ckpt.model.config != config.model:
        raise CheckpointMismatch("checkpoint model config differs from the fine-tune config")
    source = as_source(dataset, "fine-tune")
    if source.resolution != tuple(ckpt.model.config.input_resolution):
        raise CheckpointMismatch(
            f"dataset resolution {source.resolution} != checkpoint input {ckpt.model.config.input_resolution}")
    model = ckpt.model.to(device)
    state = TrainState(model=model, optimizer=make_optimizer(model, config.optimizer),
                       iteration=ckpt.iteration, phase_start=ckpt.iteration, phase_length=config.iterations)
    seed = int(np.random.SeedSequence([config.seed, 104729]).generate_state(1)[0])
    stream = single_source_batches(source, config.batch_size, seed, "fine-tune")
    for _ in range(config.iterations):
        train_step(state, next(stream).to(device), config)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "final.pt", model, state.iteration, state.optimizer.state_dict(),
                        {"train_config": config.to_dict(), "fine_tune": True})
        write_metrics(state.log, out / "metrics.csv")
    model.to("cpu")
    return TrainResult(model, state.log)
