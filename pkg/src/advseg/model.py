"""Atrous encoder-decoder with weather/time supervisor heads and a parameter partition."""

from __future__ import annotations

import enum
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import NUM_CLASSES, AdvsegError


class ConfigError(AdvsegError, ValueError):
    def __init__(self, field_name: str, reason: str):
        super().__init__(f"{field_name}: {reason}")
        self.field = field_name


class ShapeError(AdvsegError, ValueError):
    pass


class UnknownPartition(AdvsegError, KeyError):
    pass


class CheckpointMismatch(AdvsegError, ValueError):
    pass


class Partition(str, enum.Enum):
    DCNN = "DCNN"
    ENCODER_REST = "EncoderRest"
    DECODER = "Decoder"
    WAS_HEAD = "WASHead"
    TAS_HEAD = "TASHead"


# top-level submodule name -> partition
_OWNER = {
    "backbone": Partition.DCNN,
    "aspp": Partition.ENCODER_REST,
    "decoder": Partition.DECODER,
    "was": Partition.WAS_HEAD,
    "tas": Partition.TAS_HEAD,
}


@dataclass(frozen=True)
class StageSpec:
    channels: int
    stride: int
    atrous_rate: int = 1


@dataclass(frozen=True)
class SupervisorConfig:
    conv_channels: int = 16
    fc_widths: tuple[int, int] = (256, 64)
    num_weather: int = 4
    num_time: int = 2


DEFAULT_BACKBONE = (
    StageSpec(16, 2, 1),
    StageSpec(32, 2, 1),
    StageSpec(48, 2, 1),
    StageSpec(64, 2, 2),
)


@dataclass(frozen=True)
class ModelConfig:
    input_resolution: tuple[int, int] = (128, 128)
    num_classes: int = NUM_CLASSES
    backbone: tuple[StageSpec, ...] = DEFAULT_BACKBONE
    aspp_rates: tuple[int, ...] = (1, 2, 3)
    decoder_channels: int = 32
    low_level_stage: int = 1
    low_level_channels: int = 8
    supervisor: SupervisorConfig = field(default_factory=SupervisorConfig)

    @property
    def output_stride(self) -> int:
        s = 1
        for st in self.backbone:
            s *= st.stride
        return s

    def validate(self) -> "ModelConfig":
        h, w = self.input_resolution
        if h < 1 or w < 1:
            raise ConfigError("input_resolution", f"must be positive, got {self.input_resolution}")
        if self.num_classes != NUM_CLASSES:
            raise ConfigError("num_classes", f"must be {NUM_CLASSES}")
        if not self.backbone:
            raise ConfigError("backbone", "needs at least one stage")
        for i, st in enumerate(self.backbone):
            if st.channels < 1:
                raise ConfigError(f"backbone[{i}].channels", "must be positive")
            if st.stride not in (1, 2):
                raise ConfigError(f"backbone[{i}].stride", "must be 1 or 2")
            if st.atrous_rate < 1:
                raise ConfigError(f"backbone[{i}].atrous_rate", "must be positive")
        os_ = self.output_stride
        if h % os_ or w % os_:
            raise ConfigError("backbone", f"output stride {os_} does not divide resolution {self.input_resolution}")
        if not self.aspp_rates or any(r < 1 for r in self.aspp_rates):
            raise ConfigError("aspp_rates", "must be a non-empty list of positive integers")
        if self.decoder_channels < 1:
            raise ConfigError("decoder_channels", "must be positive")
        if not 0 <= self.low_level_stage < len(self.backbone):
            raise ConfigError("low_level_stage", "must index a backbone stage")
        if self.low_level_channels < 1:
            raise ConfigError("low_level_channels", "must be positive")
        sup = self.supervisor
        if sup.conv_channels < 1:
            raise ConfigError("supervisor.conv_channels", "must be positive")
        if len(sup.fc_widths) != 2 or any(wd < 1 for wd in sup.fc_widths):
            raise ConfigError("supervisor.fc_widths", f"need two positive widths, got {list(sup.fc_widths)}")
        if sup.num_weather < 2 or sup.num_time < 2:
            raise ConfigError("supervisor", "need at least two weather and two time classes")
        return self

    def feature_size(self) -> tuple[int, int]:
        h, w = self.input_resolution
        return h // self.output_stride, w // self.output_stride

    def supervisor_flatten_dim(self) -> int:
        # each rate-2, padding-6 3x3 conv grows the map by 8 per side length
        fh, fw = self.feature_size()
        return self.supervisor.conv_channels * (fh + 16) * (fw + 16)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_resolution"] = list(self.input_resolution)
        d["backbone"] = [asdict(s) for s in self.backbone]
        d["aspp_rates"] = list(self.aspp_rates)
        d["supervisor"]["fc_widths"] = list(self.supervisor.fc_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        try:
            if "input_resolution" in d:
                d["input_resolution"] = tuple(int(v) for v in d["input_resolution"])
            if "backbone" in d:
                d["backbone"] = tuple(StageSpec(**s) for s in d["backbone"])
            if "aspp_rates" in d:
                d["aspp_rates"] = tuple(int(r) for r in d["aspp_rates"])
            if "supervisor" in d:
                sup = dict(d["supervisor"])
                if "fc_widths" in sup:
                    sup["fc_widths"] = tuple(int(v) for v in sup["fc_widths"])
                d["supervisor"] = SupervisorConfig(**sup)
            return cls(**d).validate()
        except TypeError as e:
            raise ConfigError("model", str(e)) from None


def _conv_bn_relu(cin, cout, k=3, stride=1, dilation=1, padding=None):
    if padding is None:
        padding = dilation * (k // 2)
    return nn.Sequential(
        nn.Conv2d(cin, cout, k, stride=stride, padding=padding, dilation=dilation, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class ResidualStage(nn.Module):
    def __init__(self, cin: int, spec: StageSpec):
        super().__init__()
        c = spec.channels
        self.conv1 = _conv_bn_relu(cin, c, stride=spec.stride)
        self.conv2 = nn.Sequential(
            nn.Conv2d(c, c, 3, padding=spec.atrous_rate, dilation=spec.atrous_rate, bias=False),
            nn.BatchNorm2d(c),
        )
        self.shortcut = nn.Identity()
        if spec.stride != 1 or cin != c:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, c, 1, stride=spec.stride, bias=False), nn.BatchNorm2d(c))

    def forward(self, x):
        return F.relu(self.conv2(self.conv1(x)) + self.shortcut(x))


class Backbone(nn.Module):
    def __init__(self, stages):
        super().__init__()
        layers, cin = [], 3
        for spec in stages:
            layers.append(ResidualStage(cin, spec))
            cin = spec.channels
        self.stages = nn.ModuleList(layers)
        self.out_channels = cin

    def forward(self, x):
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class ASPP(nn.Module):
    def __init__(self, cin: int, cout: int, rates):
        super().__init__()
        self.branches = nn.ModuleList([_conv_bn_relu(cin, cout, k=1)])
        self.branches.extend(_conv_bn_relu(cin, cout, dilation=r) for r in rates)
        # no batch norm on the pooled branch: its 1x1 map breaks BN at batch size 1
        self.pool = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Conv2d(cin, cout, 1), nn.ReLU(inplace=True))
        self.project = _conv_bn_relu(cout * (len(rates) + 2), cout, k=1)

    def forward(self, x):
        outs = [b(x) for b in self.branches]
        outs.append(self.pool(x).expand(-1, -1, x.shape[2], x.shape[3]))
        return self.project(torch.cat(outs, dim=1))


class Decoder(nn.Module):
    def __init__(self, low_cin: int, low_c: int, c: int, num_classes: int):
        super().__init__()
        self.low_proj = _conv_bn_relu(low_cin, low_c, k=1)
        self.fuse = nn.Sequential(_conv_bn_relu(c + low_c, c), _conv_bn_relu(c, c))
        self.classifier = nn.Conv2d(c, num_classes, 1)

    def forward(self, high, low, out_size):
        high = F.interpolate(high, size=low.shape[-2:], mode="bilinear", align_corners=False)
        x = self.fuse(torch.cat([high, self.low_proj(low)], dim=1))
        return F.interpolate(self.classifier(x), size=out_size, mode="bilinear", align_corners=False)


class SupervisorHead(nn.Module):
    """Two rate-2 atrous convs (padding 6), flatten, three fully connected layers."""

    def __init__(self, cin: int, flatten_dim: int, conv_channels: int, fc_widths, num_out: int):
        super().__init__()
        self.convs = nn.Sequential(
            _conv_bn_relu(cin, conv_channels, dilation=2, padding=6),
            _conv_bn_relu(conv_channels, conv_channels, dilation=2, padding=6),
        )
        w1, w2 = fc_widths
        self.fc = nn.Sequential(
            nn.Linear(flatten_dim, w1),
            nn.ReLU(inplace=True),
            nn.Linear(w1, w2),
            nn.ReLU(inplace=True),
            nn.Linear(w2, num_out),
        )

    def forward(self, x):
        return self.fc(torch.flatten(self.convs(x), 1))


class _ScaleGrad(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, scale):
        ctx.scale = scale
        return x.clone()

    @staticmethod
    def backward(ctx, grad):
        return grad * ctx.scale, None


def scale_grad(x: torch.Tensor, scale: float) -> torch.Tensor:
    """Identity in the forward pass; multiplies the incoming gradient by ``scale``."""
    return _ScaleGrad.apply(x, scale)


@dataclass
class ForwardOutputs:
    seg_logits: torch.Tensor
    dcnn_features: torch.Tensor
    weather_logits: Optional[torch.Tensor] = None
    time_logits: Optional[torch.Tensor] = None


class SegmentationModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config.validate()
        self.backbone = Backbone(config.backbone)
        c = self.backbone.out_channels
        self.aspp = ASPP(c, config.decoder_channels, config.aspp_rates)
        low_cin = config.backbone[config.low_level_stage].channels
        self.decoder = Decoder(low_cin, config.low_level_channels, config.decoder_channels, config.num_classes)
        sup = config.supervisor
        flat = config.supervisor_flatten_dim()
        self.was = SupervisorHead(c, flat, sup.conv_channels, sup.fc_widths, sup.num_weather)
        self.tas = SupervisorHead(c, flat, sup.conv_channels, sup.fc_widths, sup.num_time)
        self.partition = {name: _OWNER[name.split(".", 1)[0]] for name, _ in self.named_parameters()}

    def forward(self, images, with_supervisors: bool = False, heads=("was", "tas"),
                supervisor_grad_scale: Optional[tuple[float, float]] = None) -> ForwardOutputs:
        """Run the network.

        ``heads`` restricts which supervisors run when ``with_supervisors`` is set.
        ``supervisor_grad_scale`` = (weather, time) multiplies the gradient each head
        sends back into the DCNN without changing the head's own gradient.
        """
        expected = tuple(self.config.input_resolution)
        if images.ndim != 4 or images.shape[1] != 3 or tuple(images.shape[-2:]) != expected:
            raise ShapeError(f"expected Bx3x{expected[0]}x{expected[1]} images, got {tuple(images.shape)}")
        feats = self.backbone(images)
        dcnn = feats[-1]
        high = self.aspp(dcnn)
        seg = self.decoder(high, feats[self.config.low_level_stage], expected)
        out = ForwardOutputs(seg_logits=seg, dcnn_features=dcnn)
        if with_supervisors:
            sw, st = supervisor_grad_scale or (1.0, 1.0)
            if "was" in heads:
                out.weather_logits = self.was(dcnn if sw == 1.0 else scale_grad(dcnn, sw))
            if "tas" in heads:
                out.time_logits = self.tas(dcnn if st == 1.0 else scale_grad(dcnn, st))
        return out


def build_model(config: ModelConfig | None = None, seed: int = 0) -> SegmentationModel:
    """Construct a model with seeded initialization, leaving the global RNG untouched."""
    config = (config or ModelConfig()).validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return SegmentationModel(config)


def parameters_of(model: SegmentationModel, label) -> list[nn.Parameter]:
    try:
        label = Partition(label)
    except ValueError:
        raise UnknownPartition(f"unknown partition {label!r}; expected one of {[p.value for p in Partition]}") from None
    return [p for name, p in model.named_parameters() if model.partition[name] is label]


def named_parameters_of(model: SegmentationModel, label) -> dict[str, nn.Parameter]:
    label = Partition(label)
    return {name: p for name, p in model.named_parameters() if model.partition[name] is label}


def parameter_digest(params) -> str:
    """Stable hash of parameter values; equal iff the bytes are equal."""
    import hashlib

    h = hashlib.sha256()
    for p in params:
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_FORMAT = "advseg.checkpoint"


@dataclass
class Checkpoint:
    model: SegmentationModel
    iteration: int
    optimizer_state: Optional[dict] = None
    extra: dict = field(default_factory=dict)


def checkpoint_bytes(model: SegmentationModel, iteration: int, optimizer_state=None, extra=None) -> bytes:
    params = {p.value: {} for p in Partition}
    for name, prm in model.named_parameters():
        params[model.partition[name].value][name] = prm.detach().cpu().clone()
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "config": json.dumps(model.config.to_dict(), sort_keys=True),
        "parameters": params,
        "buffers": {n: b.detach().cpu().clone() for n, b in model.named_buffers()},
        "iteration": int(iteration),
        "optimizer": optimizer_state,
        "extra": json.dumps(extra or {}, sort_keys=True),
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    return buf.getvalue()


def save_checkpoint(path, model: SegmentationModel, iteration: int, optimizer_state=None, extra=None) -> Path:
    path = Path(path)
    data = checkpoint_bytes(model, iteration, optimizer_state, extra)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return path


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> Checkpoint:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as e:
        raise CheckpointMismatch(f"{path}: not a readable checkpoint ({e})") from None
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointMismatch(f"{path}: not an advseg checkpoint")
    config = ModelConfig.from_dict(json.loads(payload["config"]))
    if expected_config is not None and config != expected_config:
        raise CheckpointMismatch(f"{path}: checkpoint config differs from the expected model config")
    model = SegmentationModel(config)
    state = {}
    for part, tensors in payload["parameters"].items():
        for name, t in tensors.items():
            if model.partition.get(name) is not Partition(part):
                raise CheckpointMismatch(f"{path}: parameter {name} filed under {part}")
            state[name] = t
    state.update(payload["buffers"])
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as e:
        raise CheckpointMismatch(f"{path}: {e}") from None
    return Checkpoint(model, int(payload["iteration"]), payload.get("optimizer"), json.loads(payload.get("extra", "{}")))
