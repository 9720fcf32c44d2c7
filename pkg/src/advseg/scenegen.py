"""Procedural 2D street scenes with pixel-exact labels and weather/time compositing.

Scenes are painted back to front (sky, buildings, vegetation, road band,
sidewalks, then small objects), so the label mask is exact by construction.
Weather and time effects only touch the image; the mask is read, never written.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from .core import (
    IGNORE_INDEX,
    DatasetManifest,
    DomainTag,
    LabeledSample,
    SemanticClass as C,
    TimeOfDay,
    WeatherCondition,
    prepare_root,
    write_manifest,
    write_sample,
)

LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)


class InvalidSpec(ValueError):
    def __init__(self, field_name: str, reason: str):
        super().__init__(f"{field_name}: {reason}")
        self.field = field_name


@dataclass(frozen=True)
class WeatherEffects:
    """Tunable constants for the weather compositor."""

    haze_gray: float = 0.72
    fog_max_alpha: float = 0.85
    fog_near_weight: float = 0.45  # relative fog strength at the bottom row
    fog_blur_sigma: float = 1.2
    rain_streaks_per_kpx: float = 6.0
    rain_darken: float = 0.12
    heavy_rain_threshold: float = 0.8
    heavy_rain_haze: float = 0.2
    snow_flakes_per_kpx: float = 14.0
    snow_ground_lift: float = 0.65


@dataclass(frozen=True)
class TimeEffects:
    """Tunable constants for the night compositor."""

    luminance_range: tuple[float, float] = (0.15, 0.35)
    blue_shift: tuple[float, float, float] = (0.85, 0.95, 1.25)
    flicker_prob: float = 0.2
    bloom_radius: float = 2.5
    bloom_intensity: tuple[float, float] = (0.5, 1.0)


@dataclass(frozen=True)
class SceneCounts:
    cars: int = 3
    persons: int = 2
    poles: int = 3
    traffic_lights: int = 2
    traffic_signs: int = 2
    buildings: int = 5

    def __post_init__(self):
        for name, v in asdict(self).items():
            if not isinstance(v, (int, np.integer)) or v < 0:
                raise InvalidSpec(f"counts.{name}", f"must be a non-negative integer, got {v!r}")


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    weather: WeatherCondition = WeatherCondition.NORMAL
    time: TimeOfDay = TimeOfDay.DAY
    severity: float = 0.0
    counts: SceneCounts = field(default_factory=SceneCounts)
    resolution: tuple[int, int] = (128, 128)
    horizon: float = 0.45
    road_band: float = 0.35
    weather_effects: WeatherEffects = field(default_factory=WeatherEffects)
    time_effects: TimeEffects = field(default_factory=TimeEffects)

    def validate(self) -> "SceneSpec":
        if not isinstance(self.seed, (int, np.integer)) or not 0 <= self.seed < 2**64:
            raise InvalidSpec("seed", f"must be a 64-bit unsigned integer, got {self.seed!r}")
        try:
            WeatherCondition(self.weather)
        except ValueError:
            raise InvalidSpec("weather", f"unknown weather {self.weather!r}") from None
        try:
            TimeOfDay(self.time)
        except ValueError:
            raise InvalidSpec("time", f"unknown time of day {self.time!r}") from None
        if not 0.0 <= self.severity <= 1.0:
            raise InvalidSpec("severity", f"must lie in [0, 1], got {self.severity}")
        if not isinstance(self.counts, SceneCounts):
            raise InvalidSpec("counts", "must be a SceneCounts")
        h, w = self.resolution
        if h < 32 or w < 32:
            raise InvalidSpec("resolution", f"H and W must be >= 32, got {self.resolution}")
        if not 0.0 < self.horizon < 1.0:
            raise InvalidSpec("horizon", f"must lie in (0, 1), got {self.horizon}")
        if not 0.0 < self.road_band < 1.0:
            raise InvalidSpec("road_band", f"must lie in (0, 1), got {self.road_band}")
        if self.horizon + self.road_band >= 1.0:
            raise InvalidSpec("road_band", "horizon + road_band must be < 1")
        return self


@dataclass(frozen=True)
class GenerationPlan:
    count: int
    master_seed: int = 0
    weather_weights: dict = field(default_factory=lambda: {w.value: 1.0 for w in WeatherCondition})
    time_weights: dict = field(default_factory=lambda: {t.value: 1.0 for t in TimeOfDay})
    severity: tuple[float, float] = (0.3, 1.0)
    template: SceneSpec = field(default_factory=lambda: SceneSpec(seed=0))
    domain: DomainTag = DomainTag.ADVERSE_SYNTHETIC
    id_prefix: str = "scene_"
    # optional joint weights {(weather, time): w}; overrides the per-attribute weights
    cell_weights: Optional[dict] = None

    def validate(self) -> "GenerationPlan":
        if not isinstance(self.count, (int, np.integer)) or self.count < 0:
            raise InvalidSpec("count", f"must be a non-negative integer, got {self.count!r}")
        for name, weights, enum_ in (
            ("weights.weather", self.weather_weights, WeatherCondition),
            ("weights.time", self.time_weights, TimeOfDay),
        ):
            for k, v in weights.items():
                try:
                    enum_(k)
                except ValueError:
                    raise InvalidSpec(name, f"unknown key {k!r}") from None
                if not isinstance(v, (int, float)) or v < 0 or not math.isfinite(v):
                    raise InvalidSpec(name, f"weight for {k!r} must be a finite non-negative number")
            if sum(weights.values()) <= 0:
                raise InvalidSpec(name, "weights must not all be zero")
        if self.cell_weights is not None:
            for (wk, tk), v in self.cell_weights.items():
                try:
                    WeatherCondition(wk), TimeOfDay(tk)
                except ValueError:
                    raise InvalidSpec("weights.cells", f"unknown cell {wk}/{tk}") from None
                if not isinstance(v, (int, float)) or v < 0 or not math.isfinite(v):
                    raise InvalidSpec("weights.cells", f"weight for {wk}/{tk} must be a finite non-negative number")
            if sum(self.cell_weights.values()) <= 0:
                raise InvalidSpec("weights.cells", "weights must not all be zero")
        lo, hi = self.severity
        if not 0.0 <= lo <= hi <= 1.0:
            raise InvalidSpec("severity", f"need 0 <= lo <= hi <= 1, got {self.severity}")
        if DomainTag(self.domain) is DomainTag.STANDARD_REAL:
            if {c for c, p in self.cells().items() if p > 0} - {("normal", "day")}:
                raise InvalidSpec("domain", "standard_real samples must be normal/day")
        self.template.validate()
        return self

    def cells(self) -> dict[tuple[str, str], float]:
        """Normalized probability of every (weather, time) cell."""
        if self.cell_weights is not None:
            raw = {(w.value, t.value): float(self.cell_weights.get((w.value, t.value), 0.0))
                   for w in WeatherCondition for t in TimeOfDay}
        else:
            ww = {w.value: float(self.weather_weights.get(w.value, 0.0)) for w in WeatherCondition}
            tw = {t.value: float(self.time_weights.get(t.value, 0.0)) for t in TimeOfDay}
            raw = {(w, t): ww[w] * tw[t] for w in ww for t in tw}
        total = sum(raw.values())
        return {k: v / total for k, v in raw.items()}

    @classmethod
    def from_json(cls, d: dict) -> "GenerationPlan":
        """Build a plan from ``{count, master_seed, resolution, weights, severity, counts, ...}``."""
        if not isinstance(d, dict):
            raise InvalidSpec("plan", "must be a JSON object")
        known = {"count", "master_seed", "resolution", "weights", "severity", "counts",
                 "domain", "id_prefix", "horizon", "road_band"}
        unknown = set(d) - known
        if unknown:
            raise InvalidSpec(sorted(unknown)[0], "unknown plan key")
        if "count" not in d:
            raise InvalidSpec("count", "required")
        try:
            template = SceneSpec(
                seed=0,
                resolution=tuple(d.get("resolution", (128, 128))),
                counts=SceneCounts(**d.get("counts", {})),
                horizon=float(d.get("horizon", 0.45)),
                road_band=float(d.get("road_band", 0.35)),
            )
        except TypeError as e:
            raise InvalidSpec("counts", str(e)) from None
        weights = d.get("weights", {})
        cells = None
        if "cells" in weights:
            try:
                cells = {tuple(k.split("/")): v for k, v in weights["cells"].items()}
            except AttributeError:
                raise InvalidSpec("weights.cells", "expected {\"weather/time\": weight}") from None
            if any(len(k) != 2 for k in cells):
                raise InvalidSpec("weights.cells", "keys must look like 'rain/day'")
        sev = d.get("severity", {"lo": 0.3, "hi": 1.0})
        try:
            severity = (float(sev["lo"]), float(sev["hi"]))
        except (KeyError, TypeError, ValueError):
            raise InvalidSpec("severity", "expected {lo, hi}") from None
        try:
            domain = DomainTag(d.get("domain", DomainTag.ADVERSE_SYNTHETIC.value))
        except ValueError:
            raise InvalidSpec("domain", f"unknown domain {d.get('domain')!r}") from None
        plan = cls(
            count=d["count"],
            master_seed=int(d.get("master_seed", 0)),
            weather_weights=dict(weights.get("weather", {w.value: 1.0 for w in WeatherCondition})),
            time_weights=dict(weights.get("time", {t.value: 1.0 for t in TimeOfDay})),
            severity=severity,
            template=template,
            domain=domain,
            id_prefix=str(d.get("id_prefix", "scene_")),
            cell_weights=cells,
        )
        return plan.validate()

    @classmethod
    def load(cls, path) -> "GenerationPlan":
        return cls.from_json(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------- rendering


@dataclass
class _Canvas:
    image: np.ndarray
    mask: np.ndarray
    lights: list  # (row, col, rgb) of lamps that glow at night

    def paint(self, region: np.ndarray, cls: C, color, rng, texture: float = 0.03):
        n = int(region.sum())
        if n == 0:
            return
        noise = rng.normal(0.0, texture, size=(n, 1)).astype(np.float32)
        self.image[region] = np.clip(np.asarray(color, np.float32) + noise, 0.0, 1.0)
        self.mask[region] = int(cls)


def _rect(h, w, r0, r1, c0, c1) -> np.ndarray:
    m = np.zeros((h, w), dtype=bool)
    m[max(0, int(r0)):max(0, int(r1)), max(0, int(c0)):max(0, int(c1))] = True
    return m


def _ellipse(rows, cols, rc, cc, ry, rx) -> np.ndarray:
    return ((rows - rc) / max(ry, 0.5)) ** 2 + ((cols - cc) / max(rx, 0.5)) ** 2 <= 1.0


def _jitter(rng, base, amount) -> np.ndarray:
    return np.clip(np.asarray(base, np.float32) + rng.uniform(-amount, amount, 3), 0.0, 1.0)


def _render_layout(spec: SceneSpec, rng: np.random.Generator) -> _Canvas:
    h, w = spec.resolution
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float32)
    # unlabeled terrain gets a dull color; its mask stays Ignore
    terrain = _jitter(rng, (0.42, 0.4, 0.33), 0.05) + rng.normal(0, 0.03, (h, w, 1))
    canvas = _Canvas(
        image=np.clip(terrain, 0, 1).astype(np.float32),
        mask=np.full((h, w), IGNORE_INDEX, np.uint8),
        lights=[],
    )
    horizon = int(round(spec.horizon * h))
    road_top = int(round((1.0 - spec.road_band) * h))
    curb = max(horizon + 1, road_top - max(2, h // 24))
    n = spec.counts

    # sky with a vertical gradient
    sky = rows < horizon
    top = _jitter(rng, (0.45, 0.62, 0.85), 0.05)
    canvas.paint(sky, C.SKY, top, rng, texture=0.01)
    grad = (rows[sky] / max(horizon, 1))[:, None] * 0.15
    canvas.image[sky] = np.clip(canvas.image[sky] + grad, 0, 1)

    # buildings standing on the curb line
    for _ in range(n.buildings):
        bw = rng.uniform(0.12, 0.3) * w
        c0 = rng.uniform(-0.1 * w, w - 0.5 * bw)
        r0 = rng.uniform(0.08, 0.9) * horizon
        region = _rect(h, w, r0, curb, c0, c0 + bw)
        canvas.paint(region, C.BUILDING, _jitter(rng, (0.5, 0.45, 0.42), 0.12), rng)
        # darker windows, still Building
        win = region & ((rows.astype(int) // 4) % 3 == 1) & ((cols.astype(int) // 3) % 3 == 1)
        canvas.image[win] *= 0.55

    # vegetation blobs along the building base
    for _ in range(max(1, n.buildings // 2 + 1)):
        cc = rng.uniform(0, w)
        rc = rng.uniform(horizon - 0.05 * h, curb - 0.02 * h)
        region = _ellipse(rows, cols, rc, cc, rng.uniform(0.05, 0.12) * h, rng.uniform(0.05, 0.14) * w)
        region &= rows < curb
        canvas.paint(region, C.VEGETATION, _jitter(rng, (0.25, 0.5, 0.18), 0.06), rng, texture=0.06)

    # road band: trapezoid widening toward the camera, sidewalks on both flanks
    band = rows >= road_top
    canvas.paint(band, C.SIDEWALK, _jitter(rng, (0.68, 0.64, 0.62), 0.05), rng)
    t = (rows - road_top) / max(h - road_top, 1)
    center = w / 2 + rng.uniform(-0.1, 0.1) * w
    half = (0.18 + 0.42 * t) * w
    road = band & (np.abs(cols - center) <= half)
    canvas.paint(road, C.ROAD, _jitter(rng, (0.3, 0.3, 0.32), 0.04), rng, texture=0.025)
    # lane marks are still Road
    lane = road & (np.abs(cols - center) <= 0.5 + 0.6 * t) & ((rows.astype(int) // 3) % 2 == 0)
    canvas.image[lane] = 0.85
    # curb strip in front of the buildings
    canvas.paint((rows >= curb) & (rows < road_top), C.SIDEWALK, _jitter(rng, (0.62, 0.6, 0.58), 0.04), rng)

    def ground_row():
        return rng.uniform(curb, h - 1)

    def scale_at(row):
        return 0.5 + 1.0 * (row - horizon) / max(h - horizon, 1)

    # poles carrying a street lamp
    for _ in range(n.poles):
        base = rng.uniform(curb, road_top + 0.3 * (h - road_top))
        s = scale_at(base)
        pw = max(1.0, 0.012 * w * s)
        ph = 0.35 * h * s
        c0 = rng.uniform(0, w - pw)
        region = _rect(h, w, base - ph, base, c0, c0 + pw)
        canvas.paint(region, C.POLE, _jitter(rng, (0.55, 0.55, 0.55), 0.05), rng, texture=0.01)
        canvas.lights.append((max(0, int(base - ph)), int(c0 + pw / 2), (1.0, 0.9, 0.7)))

    # traffic lights: dark box with one lit lamp
    for _ in range(n.traffic_lights):
        base = rng.uniform(curb, road_top)
        s = scale_at(base)
        bw, bh = max(2.0, 0.03 * w * s), max(4.0, 0.08 * h * s)
        c0 = rng.uniform(0, w - bw)
        r1 = base - 0.2 * h * s
        region = _rect(h, w, r1 - bh, r1, c0, c0 + bw)
        canvas.paint(region, C.TRAFFIC_LIGHT, (0.15, 0.15, 0.12), rng, texture=0.01)
        lamp_color = [(1.0, 0.15, 0.1), (1.0, 0.75, 0.1), (0.2, 1.0, 0.4)][rng.integers(3)]
        lr = int(r1 - bh + rng.integers(0, 3) * bh / 3 + bh / 6)
        lc = int(c0 + bw / 2)
        lamp = region & (np.abs(rows - lr) <= max(1, bh / 8)) & (np.abs(cols - lc) <= max(0.5, bw / 4))
        canvas.image[lamp] = lamp_color
        if 0 <= lr < h and 0 <= lc < w:
            canvas.lights.append((lr, lc, lamp_color))

    # traffic signs: colored plates
    for _ in range(n.traffic_signs):
        base = rng.uniform(curb, road_top)
        s = scale_at(base)
        size = max(3.0, 0.05 * min(h, w) * s)
        cc = rng.uniform(size, w - size)
        rc = base - 0.18 * h * s
        color = [(0.1, 0.3, 0.85), (0.85, 0.1, 0.1), (0.95, 0.85, 0.1)][rng.integers(3)]
        if rng.random() < 0.5:
            region = _ellipse(rows, cols, rc, cc, size / 2, size / 2)
        else:
            region = _rect(h, w, rc - size / 2, rc + size / 2, cc - size / 2, cc + size / 2)
        canvas.paint(region, C.TRAFFIC_SIGN, _jitter(rng, color, 0.05), rng, texture=0.01)

    # persons on the sidewalks
    for _ in range(n.persons):
        base = ground_row()
        s = scale_at(base)
        ph, pw = 0.16 * h * s, 0.035 * w * s
        side = rng.random() < 0.5
        tb = (base - road_top) / max(h - road_top, 1)
        edge = center - (0.18 + 0.42 * max(tb, 0)) * w if side else center + (0.18 + 0.42 * max(tb, 0)) * w
        cc = rng.uniform(0, max(edge, 1)) if side else rng.uniform(min(edge, w - 1), w)
        body = _rect(h, w, base - 0.8 * ph, base, cc - pw / 2, cc + pw / 2)
        head = _ellipse(rows, cols, base - 0.88 * ph, cc, 0.1 * ph, 0.6 * pw)
        canvas.paint(body, C.PERSON, _jitter(rng, (0.35, 0.25, 0.45), 0.2), rng)
        canvas.paint(head, C.PERSON, _jitter(rng, (0.85, 0.65, 0.5), 0.08), rng, texture=0.01)

    # cars on the road, far ones first so near ones occlude them
    bases = sorted(rng.uniform(road_top + 0.05 * h, h + 0.05 * h) for _ in range(n.cars))
    for base in bases:
        s = scale_at(min(base, h - 1))
        cw, ch = 0.22 * w * s, 0.1 * h * s
        tb = (min(base, h - 1) - road_top) / max(h - road_top, 1)
        half_road = (0.18 + 0.42 * tb) * w
        cc = center + rng.uniform(-half_road + cw / 2, max(-half_road + cw / 2, half_road - cw / 2))
        body = _rect(h, w, base - ch, base, cc - cw / 2, cc + cw / 2)
        cabin = _rect(h, w, base - 1.6 * ch, base - ch, cc - cw / 3, cc + cw / 3)
        color = _jitter(rng, rng.uniform(0.1, 0.9, 3), 0.0)
        canvas.paint(body | cabin, C.CAR, color, rng, texture=0.02)
        glass = cabin & (rows > base - 1.5 * ch) & (np.abs(cols - cc) < cw / 3.6)
        canvas.image[glass] = (0.3, 0.35, 0.4)

    return canvas


# ---------------------------------------------------------------- effects


def luminance(image: np.ndarray) -> np.ndarray:
    return image @ LUMA


def fog_depth(shape: tuple[int, int], road_top: int, near_weight: float) -> np.ndarray:
    """Per-row fog strength in [near_weight, 1]; everything above the road band is far."""
    h = shape[0]
    r = np.arange(h, dtype=np.float32)
    t = np.clip((r - road_top) / max(h - road_top, 1), 0.0, 1.0)
    return 1.0 - (1.0 - near_weight) * t


def _fog(image: np.ndarray, severity: float, road_top: int, fx: WeatherEffects) -> np.ndarray:
    if severity <= 0:
        return image
    depth = fog_depth(image.shape[:2], road_top, fx.fog_near_weight)
    sigma = fx.fog_blur_sigma * severity
    blurred = ndimage.gaussian_filter(image, sigma=(sigma, sigma, 0), mode="nearest")
    alpha = (fx.fog_max_alpha * severity * depth)[:, None, None]
    return (1.0 - alpha) * blurred + alpha * fx.haze_gray


def _rain(image, mask, severity, rng, road_top, fx: WeatherEffects) -> np.ndarray:
    h, w = mask.shape
    out = image * (1.0 - fx.rain_darken * severity)
    n = rng.poisson(fx.rain_streaks_per_kpx * severity * h * w / 1000.0)
    if n:
        length = max(3, h // 16)
        r0 = rng.integers(-length, h, n)
        c0 = rng.integers(0, w + length // 2, n)
        strength = rng.uniform(0.25, 0.5, n).astype(np.float32)
        for k in range(length):
            rr, cc = r0 + k, c0 - k // 2
            ok = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
            a = strength[ok][:, None]
            out[rr[ok], cc[ok]] = (1 - a) * out[rr[ok], cc[ok]] + a * 0.85
    ground = (mask == C.ROAD) | (mask == C.SIDEWALK)
    splash = ground & (rng.random((h, w)) < 0.06 * severity)
    out[splash] = np.minimum(out[splash] + 0.35, 1.0)
    if severity >= fx.heavy_rain_threshold:
        out = _fog(out, fx.heavy_rain_haze, road_top, fx)
    return out


def _snow(image, mask, severity, rng, fx: WeatherEffects) -> np.ndarray:
    h, w = mask.shape
    out = image.copy()
    ground = (mask == C.ROAD) | (mask == C.SIDEWALK)
    lift = fx.snow_ground_lift * severity
    out[ground] = out[ground] + lift * (0.95 - out[ground])
    n = rng.poisson(fx.snow_flakes_per_kpx * severity * h * w / 1000.0)
    if n:
        rr = rng.integers(0, h, n)
        cc = rng.integers(0, w, n)
        a = rng.uniform(0.5, 0.95, n).astype(np.float32)[:, None]
        out[rr, cc] = (1 - a) * out[rr, cc] + a
        big = rng.random(n) < 0.3
        rr2, cc2 = np.minimum(rr[big] + 1, h - 1), np.minimum(cc[big] + 1, w - 1)
        out[rr2, cc2] = (1 - a[big]) * out[rr2, cc2] + a[big]
    return out


def _road_top(mask: np.ndarray) -> int:
    """First row whose majority is Road or Sidewalk; bottom third if none."""
    h = mask.shape[0]
    ground = ((mask == C.ROAD) | (mask == C.SIDEWALK)).mean(axis=1)
    hits = np.flatnonzero(ground > 0.5)
    return int(hits[0]) if len(hits) else (2 * h) // 3


def apply_weather(image, mask, weather, severity: float, rng: np.random.Generator,
                  effects: WeatherEffects = WeatherEffects()) -> np.ndarray:
    """Composite a weather condition onto ``image``; ``mask`` is only consulted."""
    if not 0.0 <= severity <= 1.0:
        raise ValueError(f"severity must lie in [0, 1], got {severity}")
    weather = WeatherCondition(weather)
    image = np.asarray(image, dtype=np.float32)
    mask = np.asarray(mask)
    if weather is WeatherCondition.NORMAL:
        return image
    road_top = _road_top(mask)
    if weather is WeatherCondition.FOG:
        out = _fog(image, severity, road_top, effects)
    elif weather is WeatherCondition.RAIN:
        out = _rain(image, mask, severity, rng, road_top, effects)
    else:
        out = _snow(image, mask, severity, rng, effects)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def apply_time(image, time, rng: np.random.Generator, lights=(),
               effects: TimeEffects = TimeEffects()) -> np.ndarray:
    """Darken to night and light up lamps; ``lights`` holds (row, col, rgb) tuples."""
    time = TimeOfDay(time)
    image = np.asarray(image, dtype=np.float32)
    if time is TimeOfDay.DAY:
        return image
    lo, hi = effects.luminance_range
    factor = rng.uniform(lo, hi)
    out = image * factor * np.asarray(effects.blue_shift, np.float32)
    h, w = image.shape[:2]
    radius = effects.bloom_radius * max(1.0, min(h, w) / 128)
    for r, c, color in lights:
        # drawn even when skipped so the stream does not depend on earlier outcomes
        skip = rng.random() < effects.flicker_prob
        level = rng.uniform(*effects.bloom_intensity)
        if skip:
            continue
        r0, r1 = max(0, int(r - 3 * radius)), min(h, int(r + 3 * radius) + 1)
        c0, c1 = max(0, int(c - 3 * radius)), min(w, int(c + 3 * radius) + 1)
        if r0 >= r1 or c0 >= c1:
            continue
        rr, cc = np.mgrid[r0:r1, c0:c1]
        glow = level * np.exp(-((rr - r) ** 2 + (cc - c) ** 2) / (2 * radius**2))[..., None]
        patch = out[r0:r1, c0:c1]
        out[r0:r1, c0:c1] = patch + glow * (np.asarray(color, np.float32) - patch).clip(0)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def generate_scene(spec: SceneSpec, domain: DomainTag = DomainTag.ADVERSE_SYNTHETIC,
                   sample_id: str | None = None) -> LabeledSample:
    """Render ``spec`` into a labeled sample; bit-identical for equal specs."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    canvas = _render_layout(spec, rng)
    image = apply_weather(canvas.image, canvas.mask, spec.weather, spec.severity, rng, spec.weather_effects)
    image = apply_time(image, spec.time, rng, canvas.lights, spec.time_effects)
    return LabeledSample(
        image=image,
        mask=canvas.mask,
        weather=spec.weather,
        time=spec.time,
        domain=domain,
        id=sample_id or f"scene_{spec.seed:016x}",
    )


def sample_seed(master_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1, np.uint64)[0])


def plan_spec(plan: GenerationPlan, index: int) -> SceneSpec:
    """The deterministic per-sample spec for position ``index`` of ``plan``."""
    seed = sample_seed(plan.master_seed, index)
    rng = np.random.default_rng(seed)
    cells = plan.cells()
    keys = sorted(cells, key=lambda k: (list(WeatherCondition).index(WeatherCondition(k[0])),
                                        list(TimeOfDay).index(TimeOfDay(k[1]))))
    w_key, t_key = keys[rng.choice(len(keys), p=np.array([cells[k] for k in keys]))]
    weather, time = WeatherCondition(w_key), TimeOfDay(t_key)
    lo, hi = plan.severity
    severity = float(rng.uniform(lo, hi)) if weather is not WeatherCondition.NORMAL else 0.0
    return replace(plan.template, seed=seed, weather=weather, time=time, severity=severity)


def _render_and_write(args):
    plan, index, out_root = args
    sample = generate_scene(plan_spec(plan, index), plan.domain, f"{plan.id_prefix}{index:05d}")
    return write_sample(sample, out_root)


def generate_dataset(plan: GenerationPlan, out_root, workers: int = 1) -> DatasetManifest:
    """Render ``plan.count`` scenes into ``out_root`` in the standard dataset layout."""
    plan.validate()
    root = prepare_root(out_root)
    jobs = [(plan, i, root) for i in range(plan.count)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as pool:
            records = list(pool.map(_render_and_write, jobs, chunksize=8))
    else:
        records = [_render_and_write(j) for j in jobs]
    manifest = DatasetManifest(tuple(records))
    write_manifest(manifest, root)
    return manifest
