"""Label schema, condition enums, mask color codec and dataset directory I/O."""

from __future__ import annotations

import enum
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

IGNORE_INDEX = 255
IGNORE_COLOR = (0, 0, 0)
NUM_CLASSES = 10
SCHEMA_VERSION = 1


class AdvsegError(Exception):
    """Base class for all package errors."""


class InvalidIndex(AdvsegError, ValueError):
    def __init__(self, value):
        super().__init__(f"invalid class index {value!r}; expected 0..9 or {IGNORE_INDEX}")
        self.value = value


class UnknownColor(AdvsegError, ValueError):
    def __init__(self, pixel, rgb):
        super().__init__(f"pixel {pixel} has color {rgb} which belongs to no class")
        self.pixel = pixel
        self.rgb = rgb


class DatasetError(AdvsegError):
    """Raised for unreadable or inconsistent dataset directories."""


class MissingManifest(DatasetError, FileNotFoundError):
    pass


class MissingFile(DatasetError, FileNotFoundError):
    def __init__(self, sample_id: str, path=None):
        msg = f"missing file for sample {sample_id!r}"
        if path is not None:
            msg += f": {path}"
        super().__init__(msg)
        self.sample_id = sample_id
        self.path = path


class DuplicateId(DatasetError, ValueError):
    def __init__(self, sample_id: str):
        super().__init__(f"duplicate sample id {sample_id!r}")
        self.sample_id = sample_id


class DatasetIOError(DatasetError, OSError):
    """Write failure, carrying the offending path."""

    def __init__(self, path, cause: OSError):
        super().__init__(f"cannot write {path}: {cause}")
        self.path = path


class SemanticClass(enum.IntEnum):
    ROAD = 0
    SIDEWALK = 1
    BUILDING = 2
    POLE = 3
    TRAFFIC_LIGHT = 4
    TRAFFIC_SIGN = 5
    VEGETATION = 6
    SKY = 7
    PERSON = 8
    CAR = 9

    @property
    def label(self) -> str:
        return _CLASS_NAMES[self]

    @property
    def color(self) -> tuple[int, int, int]:
        return _CLASS_COLORS[self]


# Cityscapes labelIds colors for the ten retained classes.
_CLASS_COLORS = {
    SemanticClass.ROAD: (128, 64, 128),
    SemanticClass.SIDEWALK: (244, 35, 232),
    SemanticClass.BUILDING: (70, 70, 70),
    SemanticClass.POLE: (153, 153, 153),
    SemanticClass.TRAFFIC_LIGHT: (250, 170, 30),
    SemanticClass.TRAFFIC_SIGN: (220, 220, 0),
    SemanticClass.VEGETATION: (107, 142, 35),
    SemanticClass.SKY: (70, 130, 180),
    SemanticClass.PERSON: (220, 20, 60),
    SemanticClass.CAR: (0, 0, 142),
}

_CLASS_NAMES = {
    SemanticClass.ROAD: "Road",
    SemanticClass.SIDEWALK: "Sidewalk",
    SemanticClass.BUILDING: "Building",
    SemanticClass.POLE: "Pole",
    SemanticClass.TRAFFIC_LIGHT: "TrafficLight",
    SemanticClass.TRAFFIC_SIGN: "TrafficSign",
    SemanticClass.VEGETATION: "Vegetation",
    SemanticClass.SKY: "Sky",
    SemanticClass.PERSON: "Person",
    SemanticClass.CAR: "Car",
}

CLASS_NAMES = [_CLASS_NAMES[c] for c in SemanticClass]


class WeatherCondition(str, enum.Enum):
    NORMAL = "normal"
    RAIN = "rain"
    FOG = "fog"
    SNOW = "snow"

    @property
    def index(self) -> int:
        return list(WeatherCondition).index(self)


class TimeOfDay(str, enum.Enum):
    DAY = "day"
    NIGHT = "night"

    @property
    def index(self) -> int:
        return list(TimeOfDay).index(self)


class DomainTag(str, enum.Enum):
    STANDARD_REAL = "standard_real"
    ADVERSE_SYNTHETIC = "adverse_synthetic"


def class_color(c) -> tuple[int, int, int]:
    """Return the RGB color of a class index (``IGNORE_INDEX`` included)."""
    if isinstance(c, (int, np.integer)) and int(c) == IGNORE_INDEX:
        return IGNORE_COLOR
    try:
        return SemanticClass(int(c)).color
    except ValueError:
        raise InvalidIndex(c) from None


# index -> color lookup; rows for unused indices stay invalid
_LUT = np.zeros((256, 3), dtype=np.uint8)
_LUT_VALID = np.zeros(256, dtype=bool)
for _c in SemanticClass:
    _LUT[_c] = _c.color
    _LUT_VALID[_c] = True
_LUT[IGNORE_INDEX] = IGNORE_COLOR
_LUT_VALID[IGNORE_INDEX] = True

_COLOR_KEYS = {
    (r << 16) | (g << 8) | b: idx
    for idx, (r, g, b) in [(int(c), c.color) for c in SemanticClass] + [(IGNORE_INDEX, IGNORE_COLOR)]
}


def _check_indices(mask: np.ndarray) -> None:
    if mask.size == 0:
        return
    if mask.min() < 0 or mask.max() > 255:
        bad = mask[(mask < 0) | (mask > 255)].flat[0]
        raise InvalidIndex(int(bad))
    ok = _LUT_VALID[mask.astype(np.intp)]
    if not ok.all():
        raise InvalidIndex(int(mask[~ok].flat[0]))


def encode_mask(index_mask: np.ndarray) -> np.ndarray:
    """Map an HxW index mask to an HxWx3 uint8 color image."""
    index_mask = np.asarray(index_mask)
    _check_indices(index_mask)
    return _LUT[index_mask.astype(np.intp)]


def decode_mask(color_image: np.ndarray) -> np.ndarray:
    """Inverse of :func:`encode_mask`; raises ``UnknownColor`` on the first foreign pixel."""
    color_image = np.asarray(color_image)
    if color_image.ndim != 3 or color_image.shape[2] != 3:
        raise ValueError(f"expected HxWx3 image, got shape {color_image.shape}")
    rgb = color_image.astype(np.uint32)
    keys = (rgb[..., 0] << 16) | (rgb[..., 1] << 8) | rgb[..., 2]
    out = np.full(keys.shape, -1, dtype=np.int16)
    for key, idx in _COLOR_KEYS.items():
        out[keys == key] = idx
    bad = np.argwhere(out < 0)
    if len(bad):
        r, c = (int(v) for v in bad[0])
        raise UnknownColor((r, c), tuple(int(v) for v in color_image[r, c]))
    return out.astype(np.uint8)


def quantize_image(image: np.ndarray) -> np.ndarray:
    """Round a [0,1] float image to the 8-bit grid it will have after a PNG round trip."""
    return (np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class LabeledSample:
    image: np.ndarray  # HxWx3 float32 in [0, 1]
    mask: np.ndarray  # HxW uint8, class indices or IGNORE_INDEX
    weather: WeatherCondition
    time: TimeOfDay
    domain: DomainTag
    id: str

    def __post_init__(self):
        image = np.asarray(self.image, dtype=np.float32)
        mask = np.asarray(self.mask)
        if image.ndim != 3 or image.shape[2] != 3:
            raise ValueError(f"sample {self.id!r}: image must be HxWx3, got {image.shape}")
        if mask.shape != image.shape[:2]:
            raise ValueError(f"sample {self.id!r}: mask shape {mask.shape} != image shape {image.shape[:2]}")
        if image.size and (image.min() < 0.0 or image.max() > 1.0 or not np.isfinite(image).all()):
            raise ValueError(f"sample {self.id!r}: image values must lie in [0, 1]")
        _check_indices(mask)
        if not self.id or "/" in self.id or "\\" in self.id or self.id.startswith("."):
            raise ValueError(f"invalid sample id {self.id!r}")
        object.__setattr__(self, "image", _frozen(image))
        object.__setattr__(self, "mask", _frozen(mask.astype(np.uint8)))
        object.__setattr__(self, "weather", WeatherCondition(self.weather))
        object.__setattr__(self, "time", TimeOfDay(self.time))
        object.__setattr__(self, "domain", DomainTag(self.domain))

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    def __eq__(self, other):
        if not isinstance(other, LabeledSample):
            return NotImplemented
        return (
            self.id == other.id
            and self.weather == other.weather
            and self.time == other.time
            and self.domain == other.domain
            and np.array_equal(self.image, other.image)
            and np.array_equal(self.mask, other.mask)
        )

    __hash__ = None


@dataclass(frozen=True)
class ManifestRecord:
    id: str
    image_path: str
    mask_path: str
    weather: WeatherCondition
    time: TimeOfDay
    domain: DomainTag

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "image": self.image_path,
            "mask": self.mask_path,
            "weather": self.weather.value,
            "time": self.time.value,
            "domain": self.domain.value,
        }

    @classmethod
    def from_json(cls, d: dict) -> "ManifestRecord":
        try:
            return cls(
                id=str(d["id"]),
                image_path=str(d["image"]),
                mask_path=str(d["mask"]),
                weather=WeatherCondition(d["weather"]),
                time=TimeOfDay(d["time"]),
                domain=DomainTag(d["domain"]),
            )
        except (KeyError, ValueError, TypeError) as e:
            raise DatasetError(f"malformed manifest record {d!r}: {e}") from None


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[ManifestRecord, ...] = ()
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        seen = set()
        for r in self.records:
            if r.id in seen:
                raise DuplicateId(r.id)
            seen.add(r.id)

    def __len__(self):
        return len(self.records)

    def to_json(self) -> dict:
        return {"schema_version": self.schema_version, "samples": [r.to_json() for r in self.records]}

    @classmethod
    def from_json(cls, d: dict) -> "DatasetManifest":
        if not isinstance(d, dict) or "samples" not in d:
            raise DatasetError("manifest must be an object with a 'samples' list")
        version = int(d.get("schema_version", SCHEMA_VERSION))
        if version != SCHEMA_VERSION:
            raise DatasetError(f"unsupported manifest schema_version {version}")
        return cls(tuple(ManifestRecord.from_json(r) for r in d["samples"]), version)

    def cell_counts(self) -> dict[tuple[str, str], int]:
        """Number of records per (weather, time) cell."""
        counts: dict[tuple[str, str], int] = {}
        for r in self.records:
            key = (r.weather.value, r.time.value)
            counts[key] = counts.get(key, 0) + 1
        return counts


def read_manifest(root) -> DatasetManifest:
    path = Path(root) / "manifest.json"
    if not path.is_file():
        raise MissingManifest(f"no manifest.json in {root}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"{path}: invalid JSON at line {e.lineno} column {e.colno}: {e.msg}") from None
    return DatasetManifest.from_json(data)


def _read_png(path: Path, sample_id: str) -> np.ndarray:
    if not path.is_file():
        raise MissingFile(sample_id, path)
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def load_sample(root, record: ManifestRecord) -> LabeledSample:
    root = Path(root)
    image = _read_png(root / record.image_path, record.id)
    color_mask = _read_png(root / record.mask_path, record.id)
    return LabeledSample(
        image=image.astype(np.float32) / 255.0,
        mask=decode_mask(color_mask),
        weather=record.weather,
        time=record.time,
        domain=record.domain,
        id=record.id,
    )


def load_dataset(root) -> list[LabeledSample]:
    """Eagerly load every sample under ``root``, sorted by id."""
    manifest = read_manifest(root)
    records = sorted(manifest.records, key=lambda r: r.id)
    return [load_sample(root, r) for r in records]


def _write_png(array: np.ndarray, path: Path) -> None:
    try:
        Image.fromarray(array, mode="RGB").save(path, format="PNG", optimize=False)
    except OSError as e:
        raise DatasetIOError(path, e) from e


def write_sample(sample: LabeledSample, root) -> ManifestRecord:
    root = Path(root)
    image_rel = f"images/{sample.id}.png"
    mask_rel = f"labels/{sample.id}.png"
    pixels = np.round(np.clip(sample.image, 0.0, 1.0) * 255.0).astype(np.uint8)
    _write_png(pixels, root / image_rel)
    _write_png(encode_mask(sample.mask), root / mask_rel)
    return ManifestRecord(sample.id, image_rel, mask_rel, sample.weather, sample.time, sample.domain)


def prepare_root(root) -> Path:
    root = Path(root)
    try:
        (root / "images").mkdir(parents=True, exist_ok=True)
        (root / "labels").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DatasetIOError(root, e) from e
    return root


def write_manifest(manifest: DatasetManifest, root) -> None:
    path = Path(root) / "manifest.json"
    try:
        path.write_text(json.dumps(manifest.to_json(), indent=2) + "\n")
    except OSError as e:
        raise DatasetIOError(path, e) from e


def save_dataset(samples: Iterable[LabeledSample], root) -> DatasetManifest:
    """Write images, color-encoded masks and ``manifest.json`` under ``root``."""
    samples = list(samples)
    seen = set()
    for s in samples:
        if s.id in seen:
            raise DuplicateId(s.id)
        seen.add(s.id)
    root = prepare_root(root)
    manifest = DatasetManifest(tuple(write_sample(s, root) for s in samples))
    write_manifest(manifest, root)
    return manifest


def dataset_exists(root) -> bool:
    return os.path.isfile(os.path.join(root, "manifest.json"))


def split_by_domain(samples: Sequence[LabeledSample]) -> dict[DomainTag, list[LabeledSample]]:
    out: dict[DomainTag, list[LabeledSample]] = {d: [] for d in DomainTag}
    for s in samples:
        out[s.domain].append(s)
    return out
