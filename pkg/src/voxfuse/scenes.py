"""Deterministic synthetic driving scenes.

A scene is a list of axis-aligned primitives (boxes and a ground slab).
Ground-truth occupancy is rasterized from voxel centers, LiDAR returns and
camera depths come from exact ray/box intersection, and camera "features" are
fixed per-class signature vectors rather than rendered pixels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from voxfuse.errors import ContractError, EmptySceneError
from voxfuse.fusion import WeatherCondition, WeatherContext
from voxfuse.metrics import EMPTY, OccupancyLabels
from voxfuse.voxel import CameraModel, GridSpec, PointCloud

SCENE_CLASSES = ("empty", "driveable_surface", "car", "pedestrian", "manmade", "vegetation")
CLASS_ID = {name: i for i, name in enumerate(SCENE_CLASSES)}
NUM_CLASSES = len(SCENE_CLASSES)

CAMERA_FEATURE_DIM = 8
LIDAR_FEATURE_DIM = 4
# LiDAR hits are pushed this far past the surface so boundary points land inside the primitive
SURFACE_NUDGE = 1e-6
_SIGNATURE_SEED = 20240613


def class_signatures(dim: int, tag: int, num_classes: int = NUM_CLASSES) -> np.ndarray:
    """Fixed unit-norm feature vector per class (row 0, empty, is zero)."""
    rng = np.random.default_rng([_SIGNATURE_SEED, tag, dim])
    sig = rng.standard_normal((num_classes, dim))
    sig /= np.linalg.norm(sig, axis=1, keepdims=True)
    sig[EMPTY] = 0.0
    return sig


@dataclass(frozen=True)
class Primitive:
    kind: str
    class_id: int
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]

    def __post_init__(self):
        if self.kind not in ("box", "ground"):
            raise ContractError(f"unknown primitive kind {self.kind!r}")
        object.__setattr__(self, "lo", tuple(float(v) for v in self.lo))
        object.__setattr__(self, "hi", tuple(float(v) for v in self.hi))
        if any(h <= l for l, h in zip(self.lo, self.hi)):
            raise ContractError("primitive extents must be positive")

    @classmethod
    def ground(cls, grid: GridSpec, height: float, class_id: int = CLASS_ID["driveable_surface"]):
        """Slab filling everything below ``height`` across twice the grid footprint."""
        lo, hi = grid.lower, grid.upper
        span = hi - lo
        return cls("ground", class_id, (lo[0] - span[0] / 2, lo[1] - span[1] / 2, lo[2] - span[2]),
                   (hi[0] + span[0] / 2, hi[1] + span[1] / 2, height))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "class_id": self.class_id, "lo": list(self.lo), "hi": list(self.hi)}

    @classmethod
    def from_dict(cls, d: dict) -> "Primitive":
        return cls(d["kind"], int(d["class_id"]), tuple(d["lo"]), tuple(d["hi"]))


@dataclass(frozen=True)
class LidarPattern:
    n_azimuth: int = 360
    n_elevation: int = 32
    elevation_deg: tuple[float, float] = (-30.0, 10.0)
    max_range: float = 30.0
    origin: tuple[float, float, float] = (0.0, 0.0, 0.3)

    def directions(self) -> np.ndarray:
        az = np.linspace(0.0, 2 * np.pi, self.n_azimuth, endpoint=False)
        el = np.deg2rad(np.linspace(*self.elevation_deg, self.n_elevation))
        el, az = np.meshgrid(el, az, indexing="ij")
        d = np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], -1)
        return d.reshape(-1, 3)

    def to_dict(self) -> dict:
        return {"n_azimuth": self.n_azimuth, "n_elevation": self.n_elevation,
                "elevation_deg": list(self.elevation_deg), "max_range": self.max_range,
                "origin": list(self.origin)}

    @classmethod
    def from_dict(cls, d: dict) -> "LidarPattern":
        return cls(int(d["n_azimuth"]), int(d["n_elevation"]), tuple(d["elevation_deg"]),
                   float(d["max_range"]), tuple(d["origin"]))


def default_camera(grid: GridSpec, ground_height: float, size: int = 32,
                   height_m: float = 12.0, bin_step: float = 0.25) -> CameraModel:
    """Nadir camera whose image covers the grid footprint at ground level."""
    half = max(abs(grid.x_range[0]), abs(grid.x_range[1]), abs(grid.y_range[0]), abs(grid.y_range[1]))
    ground_depth = height_m - ground_height
    near = height_m - grid.z_range[1] - 2 * bin_step
    far = height_m - grid.z_range[0] + 2 * bin_step
    bins = np.arange(near, far + 1e-9, bin_step)
    cam = CameraModel.looking_down(height_m, size, size, half, bins)
    # rescale focal lengths so the footprint is measured at the ground, not at z = 0
    scale = ground_depth / height_m
    return replace(cam, fx=cam.fx * scale, fy=cam.fy * scale)


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    layout: tuple[Primitive, ...]
    weather: WeatherContext = field(default_factory=WeatherContext)
    grid: GridSpec = field(default_factory=GridSpec)
    lidar: LidarPattern = field(default_factory=LidarPattern)
    ground_height: float = -1.5
    camera_size: int = 32
    depth_sigma: float = 0.4
    feature_noise: float = 0.02

    def __post_init__(self):
        object.__setattr__(self, "layout", tuple(self.layout))
        lo, hi = self.grid.lower, self.grid.upper
        span = hi - lo
        for p in self.layout:
            if np.any(np.array(p.lo) < lo - span) or np.any(np.array(p.hi) > hi + span):
                raise ContractError("primitive lies outside twice the grid range")

    @property
    def camera(self) -> CameraModel:
        return default_camera(self.grid, self.ground_height, self.camera_size)

    def with_weather(self, weather: WeatherContext) -> "SceneSpec":
        return replace(self, weather=weather)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "layout": [p.to_dict() for p in self.layout],
                "weather": self.weather.to_dict(), "grid": self.grid.to_dict(),
                "lidar": self.lidar.to_dict(), "ground_height": self.ground_height,
                "camera_size": self.camera_size, "depth_sigma": self.depth_sigma,
                "feature_noise": self.feature_noise}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(int(d["seed"]), tuple(Primitive.from_dict(p) for p in d["layout"]),
                   WeatherContext.from_dict(d["weather"]), GridSpec.from_dict(d["grid"]),
                   LidarPattern.from_dict(d["lidar"]), float(d["ground_height"]),
                   int(d["camera_size"]), float(d["depth_sigma"]), float(d["feature_noise"]))


def write_scene_file(path, spec: SceneSpec) -> None:
    Path(path).write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True))


def read_scene_file(path) -> SceneSpec:
    return SceneSpec.from_dict(json.loads(Path(path).read_text()))


@dataclass
class Observations:
    points: PointCloud
    image_features: np.ndarray
    depth_probs: np.ndarray
    labels: OccupancyLabels
    weather: WeatherContext
    lidar_origin: np.ndarray
    camera: CameraModel
    grid: GridSpec


# -- layouts ---------------------------------------------------------------------

_OBJECT_SIZES = {  # (sx, sy, sz) in voxels, before random jitter
    "car": (4, 2, 3),
    "pedestrian": (1, 1, 4),
    "manmade": (3, 5, 7),
    "vegetation": (2, 2, 5),
}


def random_layout(seed: int, grid: GridSpec = GridSpec(), ground_height: float = -1.5,
                  counts: dict[str, int] | None = None) -> tuple[Primitive, ...]:
    """Ground slab plus non-overlapping voxel-aligned boxes placed from ``seed``."""
    counts = counts or {"car": 3, "pedestrian": 3, "manmade": 2, "vegetation": 2}
    rng = np.random.default_rng([seed, 7919])
    size = grid.voxel_size
    ground_layer = int(round((ground_height - grid.z_range[0]) / size[2]))
    occupied = np.zeros((grid.nx, grid.ny), dtype=bool)
    occupied[grid.nx // 2 - 1: grid.nx // 2 + 1, grid.ny // 2 - 1: grid.ny // 2 + 1] = True
    layout = [Primitive.ground(grid, ground_height)]
    for name, n in counts.items():
        sx, sy, sz = _OBJECT_SIZES[name]
        for _ in range(n):
            for _attempt in range(50):
                if rng.random() < 0.5:
                    sx, sy = sy, sx
                ix = int(rng.integers(0, grid.nx - sx + 1))
                iy = int(rng.integers(0, grid.ny - sy + 1))
                if occupied[max(ix - 1, 0): ix + sx + 1, max(iy - 1, 0): iy + sy + 1].any():
                    continue
                occupied[ix: ix + sx, iy: iy + sy] = True
                top = min(ground_layer + sz, grid.nz)
                lo = grid.lower + size * np.array([ix, iy, ground_layer])
                hi = grid.lower + size * np.array([ix + sx, iy + sy, top])
                layout.append(Primitive("box", CLASS_ID[name], tuple(lo), tuple(hi)))
                break
    return tuple(layout)


def make_scene_spec(seed: int, weather: WeatherContext | str = "clear_day",
                    grid: GridSpec = GridSpec(), **kwargs) -> SceneSpec:
    if not isinstance(weather, WeatherContext):
        weather = WeatherContext(weather)
    ground = kwargs.pop("ground_height", -1.5)
    return SceneSpec(seed, random_layout(seed, grid, ground), weather, grid,
                     ground_height=ground, **kwargs)


# -- geometry ---------------------------------------------------------------------

def cast_rays(origins: np.ndarray, dirs: np.ndarray, layout) -> tuple[np.ndarray, np.ndarray]:
    """Nearest hit parameter ``t`` and class per ray (``inf`` / -1 for misses).

    ``t`` is measured in units of ``dirs``; rays starting inside a box ignore it.
    """
    origins = np.broadcast_to(np.asarray(origins, float), dirs.shape)
    best_t = np.full(len(dirs), np.inf)
    best_cls = np.full(len(dirs), -1, dtype=np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        for prim in layout:
            t1 = (np.array(prim.lo) - origins) * inv
            t2 = (np.array(prim.hi) - origins) * inv
            tmin = np.nan_to_num(np.minimum(t1, t2), nan=-np.inf).max(axis=1)
            tmax = np.nan_to_num(np.maximum(t1, t2), nan=np.inf).min(axis=1)
            hit = (tmax >= tmin) & (tmin > 0) & (tmin < best_t)
            best_t[hit] = tmin[hit]
            best_cls[hit] = prim.class_id
    return best_t, best_cls


def rasterize(layout, grid: GridSpec) -> np.ndarray:
    """Label every voxel whose center lies strictly inside a primitive (later ones win)."""
    centers = grid.voxel_centers()
    labels = np.full(grid.shape, EMPTY, dtype=np.int64)
    for prim in layout:
        inside = np.all((centers > np.array(prim.lo)) & (centers < np.array(prim.hi)), axis=-1)
        labels[inside] = prim.class_id
    return labels


def depth_distribution(depth: np.ndarray, bins: np.ndarray, sigma: float) -> np.ndarray:
    """Discretized Gaussian mass per bin around each depth; columns sum to at most 1."""
    spacing = np.gradient(bins) if len(bins) > 1 else np.ones(1)
    finite = np.isfinite(depth)
    z = (bins[:, None] - np.where(finite, depth, 0.0)[None, :]) / sigma
    mass = np.exp(-0.5 * z * z) * spacing[:, None] / (sigma * np.sqrt(2 * np.pi))
    mass[:, ~finite] = 0.0
    total = mass.sum(axis=0)
    return mass / np.maximum(total, 1.0)


def generate_scene(spec: SceneSpec) -> Observations:
    """Rasterized labels, a LiDAR sweep and camera features for one scene."""
    if not spec.layout:
        raise EmptySceneError("scene layout is empty")
    grid = spec.grid
    rng = np.random.default_rng([spec.seed, 104729])

    labels = OccupancyLabels(rasterize(spec.layout, grid), NUM_CLASSES)

    origin = np.array(spec.lidar.origin)
    dirs = spec.lidar.directions()
    t, cls = cast_rays(origin, dirs, spec.layout)
    hit = np.isfinite(t) & (t <= spec.lidar.max_range)
    xyz = origin + (t[hit] + SURFACE_NUDGE)[:, None] * dirs[hit]
    point_labels = cls[hit]
    lidar_sig = class_signatures(LIDAR_FEATURE_DIM, tag=1)
    feats = lidar_sig[point_labels] + spec.feature_noise * rng.standard_normal((len(xyz), LIDAR_FEATURE_DIM))
    points = PointCloud(xyz, feats, point_labels)

    cam = spec.camera
    rays = cam.pixel_rays().reshape(-1, 3)
    depth, pix_cls = cast_rays(cam.center, rays, spec.layout)
    cam_sig = class_signatures(CAMERA_FEATURE_DIM, tag=2)
    pix_feat = np.where(pix_cls[:, None] >= 0, cam_sig[np.maximum(pix_cls, 0)], 0.0)
    pix_feat = pix_feat + spec.feature_noise * rng.standard_normal(pix_feat.shape) * (pix_cls[:, None] >= 0)
    image_features = pix_feat.T.reshape(CAMERA_FEATURE_DIM, cam.height, cam.width)
    probs = depth_distribution(depth, cam.depth_bins, spec.depth_sigma)
    depth_probs = probs.reshape(cam.num_bins, cam.height, cam.width)

    return Observations(points, image_features, depth_probs, labels, spec.weather, origin, cam, grid)


# -- weather corruption ------------------------------------------------------------

@dataclass(frozen=True)
class CorruptionModel:
    rain_p_drop: float = 0.4
    rain_sigma: float = 0.1
    night_gamma: float = 0.2
    night_sigma: float = 0.05

    def __post_init__(self):
        if not 0.0 <= self.rain_p_drop <= 1.0:
            raise ContractError("p_drop must lie in [0, 1]")
        if not 0.0 < self.night_gamma <= 1.0:
            raise ContractError("gamma must lie in (0, 1]")
        if self.rain_sigma < 0 or self.night_sigma < 0:
            raise ContractError("noise levels must be >= 0")

    def to_dict(self) -> dict:
        return {"rain_p_drop": self.rain_p_drop, "rain_sigma": self.rain_sigma,
                "night_gamma": self.night_gamma, "night_sigma": self.night_sigma}


def corrupt_lidar(points: PointCloud, origin: np.ndarray, p_drop: float, sigma: float,
                  rng: np.random.Generator) -> PointCloud:
    """Drop each point with probability ``p_drop``; jitter survivors' range by N(0, sigma)."""
    keep = rng.random(len(points)) >= p_drop
    kept = points.subset(keep)
    if sigma > 0 and len(kept):
        offset = kept.xyz - origin
        rng_m = np.linalg.norm(offset, axis=1)
        new_range = rng_m + sigma * rng.standard_normal(len(kept))
        xyz = origin + offset * (new_range / rng_m)[:, None]
        kept = PointCloud(xyz, kept.features, kept.labels)
    return kept


def corrupt_camera(image_features: np.ndarray, gamma: float, sigma: float,
                   rng: np.random.Generator) -> np.ndarray:
    return gamma * image_features + sigma * rng.standard_normal(image_features.shape)


def apply_corruption(obs: Observations, model: CorruptionModel = CorruptionModel(),
                     ctx: WeatherContext | None = None, seed: int = 0) -> Observations:
    """Rain degrades LiDAR, night degrades the camera, anything else is left untouched."""
    ctx = ctx if ctx is not None else obs.weather
    rng = np.random.default_rng([seed, 15485863])
    if ctx.condition is WeatherCondition.RAIN:
        pts = corrupt_lidar(obs.points, obs.lidar_origin, model.rain_p_drop, model.rain_sigma, rng)
        return replace(obs, points=pts, weather=ctx)
    if ctx.condition is WeatherCondition.NIGHT:
        img = corrupt_camera(obs.image_features, model.night_gamma, model.night_sigma, rng)
        return replace(obs, image_features=img, weather=ctx)
    return replace(obs, weather=ctx)
