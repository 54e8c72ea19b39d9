"""Weather-conditioned camera/LiDAR fusion and the baseline fusions it is compared against."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from voxfuse.core.functional import relu, softmax, softplus
from voxfuse.core.nn import Conv3d, Linear, Module, Pointwise3d
from voxfuse.core.tensor import Tensor, as_tensor, concat
from voxfuse.errors import ShapeError
from voxfuse.semantic import PromptSpec, Region, TextEmbedding
from voxfuse.voxel import VoxelGrid

GATING_HIDDEN = 32


class WeatherCondition(str, enum.Enum):
    CLEAR_DAY = "clear_day"
    RAIN = "rain"
    NIGHT = "night"
    FOG = "fog"
    OTHER = "other"

    @classmethod
    def parse(cls, value) -> "WeatherCondition":
        if isinstance(value, WeatherCondition):
            return value
        aliases = {"day": "clear_day", "clear": "clear_day", "rainy": "rain"}
        key = aliases.get(str(value).lower(), str(value).lower())
        try:
            return cls(key)
        except ValueError:
            return cls.OTHER


class WeatherSource(str, enum.Enum):
    GROUND_TRUTH_LABEL = "ground_truth_label"
    TELEMETRY = "telemetry"


@dataclass(frozen=True)
class WeatherContext:
    """Environmental metadata standing in for vehicle telemetry."""

    condition: WeatherCondition = WeatherCondition.CLEAR_DAY
    region: Region = Region.OTHER
    timestamp: float = 0.0
    source: WeatherSource = WeatherSource.GROUND_TRUTH_LABEL

    def __post_init__(self):
        object.__setattr__(self, "condition", WeatherCondition.parse(self.condition))
        object.__setattr__(self, "region", Region.parse(self.region))
        object.__setattr__(self, "source", WeatherSource(self.source))

    def to_dict(self) -> dict:
        return {"condition": self.condition.value, "region": self.region.value,
                "timestamp": self.timestamp, "source": self.source.value}

    @classmethod
    def from_dict(cls, d: dict) -> "WeatherContext":
        return cls(d.get("condition", "other"), d.get("region", "Other"),
                   float(d.get("timestamp", 0.0)), d.get("source", "ground_truth_label"))


_WEATHER_TEMPLATES = {
    WeatherCondition.CLEAR_DAY: "driving on a clear sunny day in {region}, good visibility, dry road",
    WeatherCondition.RAIN: "driving in heavy rain in {region}, wet road, water spray and raindrops",
    WeatherCondition.NIGHT: "driving at night in {region}, dark street, low light and headlight glare",
    WeatherCondition.FOG: "driving in dense fog in {region}, hazy air and reduced visibility",
    WeatherCondition.OTHER: "driving in {region} under unspecified conditions",
}


def weather_prompt(ctx: WeatherContext) -> PromptSpec:
    """Fixed template per condition and region; unknown conditions use the "other" text."""
    phrase = _WEATHER_TEMPLATES[ctx.condition].format(region=ctx.region.phrase)
    return PromptSpec((ctx.condition.value,), ctx.region, "weather", (("weather", phrase),))


class GatingHead(Module):
    """Two-layer MLP (E -> 32 -> 2, ReLU) plus a learnable inverse temperature."""

    def __init__(self, embed_dim: int, hidden: int = GATING_HIDDEN,
                 rng: np.random.Generator | None = None, alpha_init: float = 1.0):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.fc1 = Linear(embed_dim, hidden, rng=rng)
        self.fc2 = Linear(hidden, 2, rng=rng)
        # softplus(raw) == alpha_init
        self.alpha_raw = Tensor(np.array(np.log(np.expm1(alpha_init))), requires_grad=True)

    @property
    def embed_dim(self) -> int:
        return self.fc1.in_dim

    def logits(self, embedding) -> Tensor:
        return self.fc2(relu(self.fc1(embedding)))

    def alpha(self) -> Tensor:
        return softplus(self.alpha_raw)

    def forward(self, embedding) -> Tensor:
        return softmax(self.logits(embedding) * self.alpha())


@dataclass(frozen=True)
class FusionWeights:
    """``(w_cam, w_pts)``; ``values`` keeps the tape so the weights stay trainable."""

    values: Tensor

    @classmethod
    def fixed(cls, w_cam: float, w_pts: float) -> "FusionWeights":
        return cls(Tensor(np.array([w_cam, w_pts], dtype=np.float64)))

    @property
    def w_cam(self) -> float:
        return float(self.values.data[0])

    @property
    def w_pts(self) -> float:
        return float(self.values.data[1])


def gate_weights(p_weath: TextEmbedding | Tensor, head: GatingHead) -> FusionWeights:
    vec = p_weath.vector if isinstance(p_weath, TextEmbedding) else as_tensor(p_weath)
    if vec.shape != (head.embed_dim,):
        raise ShapeError(f"embedding dim {vec.shape} vs gating head input {head.embed_dim}")
    return FusionWeights(head(vec))


def _check_extent(a: VoxelGrid, b: VoxelGrid) -> None:
    if not a.spec.same_extent(b.spec):
        raise ShapeError("camera and LiDAR grids must share spatial extents")


def _grid(features: Tensor, like: VoxelGrid) -> VoxelGrid:
    return like.with_features(features)


def fuse_weathfusion(v_cam: VoxelGrid, v_pts: VoxelGrid, w: FusionWeights,
                     projection: Pointwise3d | None = None) -> VoxelGrid:
    """Concatenate the weight-scaled grids, optionally followed by a 1x1x1 projection."""
    _check_extent(v_cam, v_pts)
    fused = concat([v_cam.features * w.values[0], v_pts.features * w.values[1]], axis=0)
    if projection is not None:
        fused = projection(fused)
    return _grid(fused, v_cam)


def fuse_addition(v_cam: VoxelGrid, v_pts: VoxelGrid) -> VoxelGrid:
    _check_extent(v_cam, v_pts)
    if v_cam.channels != v_pts.channels:
        raise ShapeError(f"addition needs equal channels, got {v_cam.channels} and {v_pts.channels}")
    return _grid(v_cam.features + v_pts.features, v_cam)


def fuse_concat(v_cam: VoxelGrid, v_pts: VoxelGrid) -> VoxelGrid:
    _check_extent(v_cam, v_pts)
    return _grid(concat([v_cam.features, v_pts.features], axis=0), v_cam)


def fuse_conv3d(v_cam: VoxelGrid, v_pts: VoxelGrid, conv: Conv3d) -> VoxelGrid:
    """Channel concat followed by one 3x3x3 convolution."""
    stacked = fuse_concat(v_cam, v_pts)
    return _grid(conv(stacked.features), v_cam)


FUSION_STRATEGIES = ("addition", "concat", "conv3d", "weathfusion")


def fused_channels(strategy: str, c_cam: int, c_pts: int) -> int:
    if strategy == "addition":
        return c_cam
    if strategy in ("concat", "conv3d", "weathfusion"):
        return c_cam + c_pts
    raise ValueError(f"unknown fusion strategy {strategy!r}")
