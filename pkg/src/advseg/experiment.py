"""Experiment plumbing shared by the CLI and the acceptance suite: config files,
desk-scale data plans, and the ablation ladder (modes x seeds -> median reports)."""

from __future__ import annotations

import json
import logging
import statistics
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

from .core import AdvsegError, DomainTag, LabeledSample, dataset_exists, load_dataset
from .evaluation import GROUPS, ConditionReport, evaluate
from .model import ModelConfig
from .scenegen import GenerationPlan, SceneSpec, generate_dataset, generate_scene, plan_spec
from .training import AblationMode, TrainConfig, train

log = logging.getLogger(__name__)

# adverse cells mirror the ACDC evaluation split: each weather by day, plus clear nights
ADVERSE_CELLS = {("rain", "day"): 1.0, ("fog", "day"): 1.0, ("snow", "day"): 1.0, ("normal", "night"): 1.0}
DESK_RESOLUTION = (64, 64)
LADDER = (
    AblationMode.ALTERNATING_NO_SUPERVISORS,
    AblationMode.ALTERNATING_WEATHER_AWARE,
    AblationMode.ALTERNATING_WEATHER_TIME_AWARE,
)


class ConfigFileError(AdvsegError, ValueError):
    pass


def desk_plans(resolution=DESK_RESOLUTION, n_train: int = 400, n_eval: int = 100, seed: int = 0) -> dict:
    """Standard train set, adverse synthetic train set and the two held-out eval splits."""
    tmpl = SceneSpec(seed=0, resolution=tuple(resolution))
    std = dict(weather_weights={"normal": 1.0}, time_weights={"day": 1.0},
               template=tmpl, domain=DomainTag.STANDARD_REAL)
    adv = dict(cell_weights=dict(ADVERSE_CELLS), template=tmpl, domain=DomainTag.ADVERSE_SYNTHETIC)
    return {
        "real": GenerationPlan(n_train, 4 * seed + 1, id_prefix="real_", **std),
        "synth": GenerationPlan(n_train, 4 * seed + 2, id_prefix="synth_", **adv),
        "eval_standard": GenerationPlan(n_eval, 4 * seed + 3, id_prefix="evs_", **std),
        "eval_adverse": GenerationPlan(n_eval, 4 * seed + 4, id_prefix="eva_", **adv),
    }


def render_plan(plan: GenerationPlan) -> list[LabeledSample]:
    """In-memory counterpart of :func:`generate_dataset` (same samples, no files)."""
    plan.validate()
    return [generate_scene(plan_spec(plan, i), plan.domain, f"{plan.id_prefix}{i:05d}") for i in range(plan.count)]


def desk_data(resolution=DESK_RESOLUTION, n_train: int = 400, n_eval: int = 100, seed: int = 0) -> dict:
    plans = desk_plans(resolution, n_train, n_eval, seed)
    data = {k: render_plan(p) for k, p in plans.items()}
    return {"real": data["real"], "synth": data["synth"], "eval": data["eval_standard"] + data["eval_adverse"]}


@dataclass
class AblationOutcome:
    runs: dict[AblationMode, list[ConditionReport]] = field(default_factory=dict)
    seeds: tuple[int, ...] = ()

    def median(self, mode, group: str) -> Optional[float]:
        vals = [r.miou(group) for r in self.runs[AblationMode(mode)]]
        vals = [v for v in vals if v is not None]
        return statistics.median(vals) if vals else None

    def median_report(self, mode) -> ConditionReport:
        mode = AblationMode(mode)
        per_class = {}
        for g in GROUPS:
            cols = []
            for k in range(10):
                vals = [r.groups[g].per_class[k] for r in self.runs[mode]]
                vals = [v for v in vals if v is not None]
                cols.append(statistics.median(vals) if vals else None)
            per_class[g] = cols
        return ConditionReport.from_values({g: self.median(mode, g) for g in GROUPS}, per_class)

    def table(self) -> dict[str, ConditionReport]:
        """Mode title -> median report, in ablation order."""
        return {m.title: self.median_report(m) for m in AblationMode if m in self.runs}

    def to_dict(self) -> dict:
        return {
            "seeds": list(self.seeds),
            "runs": {m.value: [r.to_dict() for r in reps] for m, reps in self.runs.items()},
        }


def run_ablation(base: TrainConfig, real, synth, eval_set: Sequence[LabeledSample],
                 modes: Sequence[AblationMode] = tuple(AblationMode), seeds: Sequence[int] = (0, 1, 2),
                 out_dir=None, device="cpu", progress: Callable[[str], None] | None = None) -> AblationOutcome:
    """Train every (mode, seed) pair on shared data and evaluate on ``eval_set``.

    With ``out_dir`` each run checkpoints into ``out_dir/<mode>/seed_<k>`` and
    resumes from there, so an interrupted ladder picks up where it stopped.
    """
    outcome = AblationOutcome(seeds=tuple(seeds))
    for mode in modes:
        mode = AblationMode(mode)
        outcome.runs[mode] = []
        for seed in seeds:
            cfg = replace(base, mode=mode, seed=int(seed))
            run_dir = Path(out_dir) / mode.value / f"seed_{seed}" if out_dir is not None else None
            res = train(cfg, real if mode.needs_real else None, synth if mode.needs_synth else None,
                        out_dir=run_dir, device=device)
            rep = evaluate(res.model, eval_set, device=device)
            outcome.runs[mode].append(rep)
            msg = f"{mode.value} seed={seed} adverse={rep.miou('overall'):.3f} standard={rep.miou('standard'):.3f}"
            log.info(msg)
            if progress is not None:
                progress(msg)
    return outcome


# ---------------------------------------------------------------- config files


@dataclass
class ExperimentConfig:
    real_dataset: Optional[Path] = None
    synth_dataset: Optional[Path] = None
    eval_datasets: list[Path] = field(default_factory=list)
    out_dir: Path = Path("runs")
    train: TrainConfig = field(default_factory=TrainConfig)
    # real/synth: one plan each; eval: a list, one per eval_datasets entry
    plans: dict = field(default_factory=dict)
    seeds: tuple[int, ...] = (0, 1, 2)
    modes: tuple[AblationMode, ...] = tuple(AblationMode)
    eval_batch_size: int = 16
    format: str = "md"

    @classmethod
    def from_dict(cls, d: dict, base_dir=None) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigFileError("experiment config must be a JSON object")
        unknown = set(d) - {"paths", "train", "plans", "seeds", "modes", "eval", "format"}
        if unknown:
            raise ConfigFileError(f"unknown config key {sorted(unknown)[0]!r}")
        base = Path(base_dir) if base_dir is not None else Path(".")

        def rel(p):
            return None if p is None else (base / p if not Path(p).is_absolute() else Path(p))

        paths = d.get("paths", {})
        bad = set(paths) - {"real_dataset", "synth_dataset", "eval_datasets", "out_dir"}
        if bad:
            raise ConfigFileError(f"unknown paths key {sorted(bad)[0]!r}")
        try:
            train_cfg = TrainConfig.from_dict(d.get("train", {}))
        except (ValueError, TypeError) as e:
            raise ConfigFileError(f"train: {e}") from None
        plans = {}
        def plan(spec, where):
            try:
                return GenerationPlan.load(rel(spec)) if isinstance(spec, str) else GenerationPlan.from_json(spec)
            except (ValueError, OSError) as e:
                raise ConfigFileError(f"plans.{where}: {e}") from None

        for name, spec in d.get("plans", {}).items():
            if name not in ("real", "synth", "eval"):
                raise ConfigFileError(f"plans: unknown plan {name!r} (expected real, synth, eval)")
            if name == "eval":
                specs = spec if isinstance(spec, list) else [spec]
                plans[name] = [plan(s, f"eval[{i}]") for i, s in enumerate(specs)]
            else:
                plans[name] = plan(spec, name)
        try:
            modes = tuple(AblationMode(m) for m in d.get("modes", [m.value for m in AblationMode]))
            seeds = tuple(int(s) for s in d.get("seeds", [0, 1, 2]))
        except (ValueError, TypeError) as e:
            raise ConfigFileError(str(e)) from None
        fmt = d.get("format", "md")
        if fmt not in ("md", "csv"):
            raise ConfigFileError(f"format must be 'md' or 'csv', got {fmt!r}")
        evals = paths.get("eval_datasets", [])
        if isinstance(evals, str):
            evals = [evals]
        return cls(
            real_dataset=rel(paths.get("real_dataset")),
            synth_dataset=rel(paths.get("synth_dataset")),
            eval_datasets=[rel(p) for p in evals],
            out_dir=rel(paths.get("out_dir", "runs")),
            train=train_cfg,
            plans=plans,
            seeds=seeds,
            modes=modes,
            eval_batch_size=int(d.get("eval", {}).get("batch_size", 16)),
            format=fmt,
        )

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigFileError(f"{path}: invalid JSON at line {e.lineno} column {e.colno}: {e.msg}") from None
        except OSError as e:
            raise ConfigFileError(f"{path}: cannot read config ({e.strerror})") from None
        return cls.from_dict(doc, base_dir=path.parent)

    def dataset(self, name: str) -> Optional[list[LabeledSample]]:
        """Load (generating from its plan first if needed) the real or synth dataset."""
        root = self.real_dataset if name == "real" else self.synth_dataset
        if root is None:
            return None
        if not dataset_exists(root) and name in self.plans:
            generate_dataset(self.plans[name], root)
        return load_dataset(root)

    def eval_set(self) -> list[LabeledSample]:
        out = []
        eval_plans = self.plans.get("eval", [])
        for i, root in enumerate(self.eval_datasets):
            if not dataset_exists(root) and i < len(eval_plans):
                generate_dataset(eval_plans[i], root)
            out.extend(load_dataset(root))
        return out


def default_model_config(resolution=DESK_RESOLUTION) -> ModelConfig:
    return ModelConfig(input_resolution=tuple(resolution))
