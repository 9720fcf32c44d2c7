"""Confusion-matrix metrics, condition-grouped mIoU reports and prediction overlays."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .core import (
    CLASS_NAMES,
    IGNORE_INDEX,
    NUM_CLASSES,
    AdvsegError,
    LabeledSample,
    TimeOfDay,
    WeatherCondition,
    encode_mask,
)


class ShapeMismatch(AdvsegError, ValueError):
    pass


class InvalidPrediction(AdvsegError, ValueError):
    pass


class NoDefinedClasses(AdvsegError, ValueError):
    pass


class EmptyDataset(AdvsegError, ValueError):
    pass


@dataclass
class ConfusionMatrix:
    """counts[g, p] = pixels of ground-truth class g predicted as p (Ignore excluded)."""

    counts: np.ndarray = field(default_factory=lambda: np.zeros((NUM_CLASSES, NUM_CLASSES), np.int64))

    def update(self, predicted, ground_truth) -> "ConfusionMatrix":
        pred = np.asarray(predicted)
        gt = np.asarray(ground_truth)
        if pred.shape != gt.shape:
            raise ShapeMismatch(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
        if pred.size and (pred.min() < 0 or pred.max() >= NUM_CLASSES):
            bad = pred[(pred < 0) | (pred >= NUM_CLASSES)].flat[0]
            raise InvalidPrediction(f"predicted value {int(bad)} outside 0..{NUM_CLASSES - 1}")
        valid = gt != IGNORE_INDEX
        g = gt[valid].astype(np.int64)
        if g.size and g.max() >= NUM_CLASSES:
            raise InvalidPrediction(f"ground truth value {int(g.max())} is not a class index")
        p = pred[valid].astype(np.int64)
        self.counts += np.bincount(g * NUM_CLASSES + p, minlength=NUM_CLASSES**2).reshape(NUM_CLASSES, NUM_CLASSES)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    __add__ = merge

    def copy(self) -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts.copy())

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)


def accumulate(cm: ConfusionMatrix, predicted_mask, ground_truth_mask) -> ConfusionMatrix:
    """Pure form of :meth:`ConfusionMatrix.update`: returns a new matrix."""
    return cm.copy().update(predicted_mask, ground_truth_mask)


def iou_per_class(cm: ConfusionMatrix) -> list[Optional[float]]:
    c = cm.counts
    tp = np.diag(c)
    union = c.sum(axis=1) + c.sum(axis=0) - tp
    return [float(tp[k]) / float(union[k]) if union[k] > 0 else None for k in range(NUM_CLASSES)]


def miou(cm: ConfusionMatrix) -> float:
    defined = [v for v in iou_per_class(cm) if v is not None]
    if not defined:
        raise NoDefinedClasses("confusion matrix has no class with a non-empty union")
    return float(sum(defined) / len(defined))


# ---------------------------------------------------------------- condition groups

GROUPS = ("rain", "fog", "snow", "night", "overall", "standard")
GROUP_TITLES = {
    "rain": "Rain",
    "fog": "Fog",
    "snow": "Snow",
    "night": "Night",
    "overall": "Overall",
    "standard": "Standard",
}


def sample_groups(weather: WeatherCondition, time: TimeOfDay) -> list[str]:
    """Groups a sample contributes to; night samples also count toward their weather column."""
    weather, time = WeatherCondition(weather), TimeOfDay(time)
    out = []
    if weather is not WeatherCondition.NORMAL:
        out.append(weather.value)
    if time is TimeOfDay.NIGHT:
        out.append("night")
    out.append("overall" if out else "standard")
    return out


@dataclass
class GroupResult:
    miou: Optional[float]
    per_class: list[Optional[float]]
    samples: int
    cm: Optional[ConfusionMatrix] = None

    @classmethod
    def from_cm(cls, cm: ConfusionMatrix, samples: int) -> "GroupResult":
        per_class = iou_per_class(cm)
        defined = [v for v in per_class if v is not None]
        value = float(sum(defined) / len(defined)) if defined and samples else None
        return cls(value, per_class, samples, cm)

    @classmethod
    def absent(cls) -> "GroupResult":
        return cls(None, [None] * NUM_CLASSES, 0, None)


@dataclass
class ConditionReport:
    groups: dict[str, GroupResult]

    def miou(self, group: str) -> Optional[float]:
        return self.groups[group].miou

    @classmethod
    def from_matrices(cls, matrices: Mapping[str, ConfusionMatrix], counts: Mapping[str, int]) -> "ConditionReport":
        groups = {}
        for g in GROUPS:
            n = counts.get(g, 0)
            groups[g] = GroupResult.from_cm(matrices[g], n) if n else GroupResult.absent()
        return cls(groups)

    @classmethod
    def from_values(cls, values: Mapping[str, Optional[float]],
                    per_class: Mapping[str, Sequence[Optional[float]]] | None = None) -> "ConditionReport":
        """Build a report from already computed numbers (e.g. published tables)."""
        per_class = per_class or {}
        groups = {}
        for g in GROUPS:
            v = values.get(g)
            pc = list(per_class.get(g, [None] * NUM_CLASSES))
            groups[g] = GroupResult(v, pc, 1 if v is not None else 0)
        return cls(groups)

    def to_dict(self) -> dict:
        return {
            g: {"miou": r.miou, "per_class": r.per_class, "samples": r.samples}
            for g, r in self.groups.items()
        }


@torch.no_grad()
def predict(model, images: np.ndarray | torch.Tensor, batch_size: int = 16, device="cpu") -> np.ndarray:
    """Argmax class map for Nx H x W x 3 images in [0, 1]; supervisors stay off."""
    model.eval()
    x = torch.as_tensor(np.asarray(images, dtype=np.float32)).permute(0, 3, 1, 2)
    preds = []
    for i in range(0, len(x), batch_size):
        logits = model(x[i:i + batch_size].to(device), with_supervisors=False).seg_logits
        preds.append(logits.argmax(1).to(torch.uint8).cpu().numpy())
    return np.concatenate(preds) if preds else np.zeros((0,) + tuple(x.shape[-2:]), np.uint8)


def group_matrices(predictions: Sequence[np.ndarray], samples: Sequence[LabeledSample]):
    matrices = {g: ConfusionMatrix() for g in GROUPS}
    counts = {g: 0 for g in GROUPS}
    for pred, s in zip(predictions, samples):
        per_sample = ConfusionMatrix().update(pred, s.mask)
        for g in sample_groups(s.weather, s.time):
            matrices[g] = matrices[g].merge(per_sample)
            counts[g] += 1
    return matrices, counts


def evaluate(model, dataset: Sequence[LabeledSample], batch_size: int = 16, device="cpu") -> ConditionReport:
    """Pool one confusion matrix per condition group over ``dataset`` and report mIoU."""
    if not dataset:
        raise EmptyDataset("evaluation dataset is empty")
    preds = predict(model, np.stack([s.image for s in dataset]), batch_size, device)
    return ConditionReport.from_matrices(*group_matrices(preds, dataset))


# ---------------------------------------------------------------- rendering

ABSENT = "—"
TABLE_COLUMNS = [GROUP_TITLES[g] for g in GROUPS]


def _fmt(v: Optional[float]) -> str:
    return ABSENT if v is None else f"{v:.2f}"


def _as_rows(reports) -> list[tuple[str, ConditionReport]]:
    if reports is None:
        return []
    if isinstance(reports, ConditionReport):
        return [("model", reports)]
    if isinstance(reports, Mapping):
        return list(reports.items())
    return list(reports)


def render_report(reports, fmt: str = "md", row_header: str = "Model",
                  per_class_groups: Sequence[str] = ("overall", "standard")) -> str:
    """Render condition reports as a markdown or CSV table with a per-class section.

    ``reports`` is a single report, a name -> report mapping or a list of pairs.
    """
    rows = _as_rows(reports)
    header = [row_header] + TABLE_COLUMNS
    class_header = [row_header] + CLASS_NAMES + [GROUP_TITLES["overall"]]
    if fmt == "md":
        out = ["| " + " | ".join(header) + " |", "|" + "|".join(["---"] * len(header)) + "|"]
        for name, rep in rows:
            out.append(f"| {name} | " + " | ".join(_fmt(rep.miou(g)) for g in GROUPS) + " |")
        for g in per_class_groups:
            if not rows:
                break
            out += ["", f"Per-class IoU ({GROUP_TITLES[g].lower()})", ""]
            out.append("| " + " | ".join(class_header) + " |")
            out.append("|" + "|".join(["---"] * len(class_header)) + "|")
            for name, rep in rows:
                r = rep.groups[g]
                out.append(f"| {name} | " + " | ".join(_fmt(v) for v in r.per_class) + f" | {_fmt(r.miou)} |")
        return "\n".join(out) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for name, rep in rows:
            w.writerow([name] + [_fmt(rep.miou(g)) for g in GROUPS])
        for g in per_class_groups:
            if not rows:
                break
            w.writerow([])
            w.writerow([f"{row_header} ({GROUP_TITLES[g].lower()})"] + class_header[1:])
            for name, rep in rows:
                r = rep.groups[g]
                w.writerow([name] + [_fmt(v) for v in r.per_class] + [_fmt(r.miou)])
        return buf.getvalue()
    raise ValueError(f"unknown report format {fmt!r}; expected 'md' or 'csv'")


def overlay(sample: LabeledSample, predicted_mask, out_path, alpha: float = 0.5) -> Path:
    """Write the sample image alpha-blended with the color-coded prediction as PNG."""
    pred = np.asarray(predicted_mask)
    if pred.shape != sample.shape:
        raise ShapeMismatch(f"prediction shape {pred.shape} != sample shape {sample.shape}")
    if pred.size and (pred.min() < 0 or pred.max() >= NUM_CLASSES):
        raise InvalidPrediction("predictions must be class indices 0..9")
    colors = encode_mask(pred).astype(np.float32) / 255.0
    blend = (1.0 - alpha) * sample.image + alpha * colors
    pixels = np.round(np.clip(blend, 0, 1) * 255).astype(np.uint8)
    out_path = Path(out_path)
    Image.fromarray(pixels, mode="RGB").save(out_path, format="PNG")
    return out_path
