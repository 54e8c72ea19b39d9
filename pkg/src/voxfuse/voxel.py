"""Metric voxel grids, LiDAR voxelization and a lift-splat camera projector."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from voxfuse.core.tensor import Tensor, as_tensor, reshape, scatter_add
from voxfuse.errors import ContractError, ShapeError

_AXES = {"x": -3, "y": -2, "z": -1}


@dataclass(frozen=True)
class GridSpec:
    x_range: tuple[float, float] = (-10.0, 10.0)
    y_range: tuple[float, float] = (-10.0, 10.0)
    z_range: tuple[float, float] = (-2.0, 2.0)
    nx: int = 20
    ny: int = 20
    nz: int = 8
    channels: int = 1

    def __post_init__(self):
        for name in ("x_range", "y_range", "z_range"):
            lo, hi = getattr(self, name)
            object.__setattr__(self, name, (float(lo), float(hi)))
            if not hi > lo:
                raise ContractError(f"{name} must be non-degenerate, got {(lo, hi)}")
        if min(self.nx, self.ny, self.nz, self.channels) < 1:
            raise ContractError("voxel counts and channels must be >= 1")

    @classmethod
    def full_scale(cls, channels: int = 1) -> "GridSpec":
        """The 200 x 200 x 16 grid over [-50, 50]^2 x [-5, 3] m."""
        return cls((-50.0, 50.0), (-50.0, 50.0), (-5.0, 3.0), 200, 200, 16, channels)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.nx, self.ny, self.nz)

    @property
    def num_voxels(self) -> int:
        return self.nx * self.ny * self.nz

    @property
    def lower(self) -> np.ndarray:
        return np.array([self.x_range[0], self.y_range[0], self.z_range[0]])

    @property
    def upper(self) -> np.ndarray:
        return np.array([self.x_range[1], self.y_range[1], self.z_range[1]])

    @property
    def voxel_size(self) -> np.ndarray:
        return (self.upper - self.lower) / np.array(self.shape, dtype=np.float64)

    def with_channels(self, channels: int) -> "GridSpec":
        return replace(self, channels=channels)

    def same_extent(self, other: "GridSpec") -> bool:
        return (self.x_range, self.y_range, self.z_range, self.shape) == (
            other.x_range, other.y_range, other.z_range, other.shape)

    def voxel_center(self, index) -> np.ndarray:
        return self.lower + (np.asarray(index, dtype=np.float64) + 0.5) * self.voxel_size

    def voxel_centers(self) -> np.ndarray:
        """``nx x ny x nz x 3`` array of metric centers."""
        axes = [
            lo + (np.arange(n) + 0.5) * size
            for lo, n, size in zip(self.lower, self.shape, self.voxel_size)
        ]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def to_dict(self) -> dict:
        return {
            "x_range": list(self.x_range), "y_range": list(self.y_range),
            "z_range": list(self.z_range), "nx": self.nx, "ny": self.ny, "nz": self.nz,
            "channels": self.channels,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(tuple(d["x_range"]), tuple(d["y_range"]), tuple(d["z_range"]),
                   int(d["nx"]), int(d["ny"]), int(d["nz"]), int(d.get("channels", 1)))


def voxel_indices(spec: GridSpec, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`voxel_index`: returns ``(indices N x 3, inside mask)``."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    lower, upper = spec.lower, spec.upper
    inside = np.all((points >= lower) & (points < upper), axis=1)
    idx = np.floor((points - lower) / spec.voxel_size).astype(np.int64)
    # rounding can push a point just below the max edge onto index n
    idx = np.minimum(idx, np.array(spec.shape) - 1)
    idx = np.maximum(idx, 0)
    return idx, inside


def voxel_index(spec: GridSpec, p) -> tuple[int, int, int] | None:
    """Containing voxel of a metric point; the max boundary is exclusive."""
    idx, inside = voxel_indices(spec, np.asarray(p, dtype=np.float64)[None, :])
    if not inside[0]:
        return None
    return tuple(int(i) for i in idx[0])


def linear_index(spec: GridSpec, idx: np.ndarray) -> np.ndarray:
    return (idx[:, 0] * spec.ny + idx[:, 1]) * spec.nz + idx[:, 2]


@dataclass
class VoxelGrid:
    spec: GridSpec
    features: Tensor

    def __post_init__(self):
        self.features = as_tensor(self.features)
        expected = (self.spec.channels, *self.spec.shape)
        if self.features.shape != expected:
            raise ShapeError(f"features {self.features.shape} do not match spec {expected}")
        if not np.isfinite(self.features.data).all():
            raise ContractError("voxel features must be finite")

    @classmethod
    def zeros(cls, spec: GridSpec) -> "VoxelGrid":
        return cls(spec, Tensor(np.zeros((spec.channels, *spec.shape))))

    @property
    def channels(self) -> int:
        return self.spec.channels

    def with_features(self, features: Tensor) -> "VoxelGrid":
        """Same extents, new features (channel count taken from ``features``)."""
        return VoxelGrid(self.spec.with_channels(features.shape[0]), features)


@dataclass
class PointCloud:
    xyz: np.ndarray
    features: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2:
            feats = feats.reshape(len(self.xyz), -1)
        self.features = feats
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if len(self.labels) != len(self.xyz):
                raise ShapeError("one label per point required")
        if len(self.features) != len(self.xyz):
            raise ShapeError("one feature row per point required")
        if not np.isfinite(self.xyz).all():
            raise ContractError("point coordinates must be finite")

    def __len__(self) -> int:
        return len(self.xyz)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1] if self.features.ndim == 2 else 0

    def subset(self, mask: np.ndarray) -> "PointCloud":
        labels = None if self.labels is None else self.labels[mask]
        return PointCloud(self.xyz[mask], self.features[mask], labels)


def voxelize(pc: PointCloud, spec: GridSpec) -> VoxelGrid:
    """Per-voxel mean of point features; empty voxels stay zero.

    Points are summed in a canonical order (voxel, then coordinates and
    features) so the result does not depend on input order.
    """
    if len(pc) and pc.feature_dim != spec.channels:
        raise ShapeError(f"point feature dim {pc.feature_dim} vs grid channels {spec.channels}")
    out = np.zeros((spec.channels, spec.num_voxels))
    if len(pc):
        idx, inside = voxel_indices(spec, pc.xyz)
        lin = linear_index(spec, idx[inside])
        xyz = pc.xyz[inside]
        feats = pc.features[inside]
        keys = [feats[:, c] for c in range(feats.shape[1] - 1, -1, -1)]
        keys += [xyz[:, 2], xyz[:, 1], xyz[:, 0], lin]
        order = np.lexsort(keys)
        lin, feats = lin[order], feats[order]
        counts = np.bincount(lin, minlength=spec.num_voxels)
        for c in range(spec.channels):
            out[c] = np.bincount(lin, weights=feats[:, c], minlength=spec.num_voxels)
        occupied = counts > 0
        out[:, occupied] /= counts[occupied]
    return VoxelGrid(spec, Tensor(out.reshape(spec.channels, *spec.shape)))


def point_counts(pc: PointCloud, spec: GridSpec) -> np.ndarray:
    idx, inside = voxel_indices(spec, pc.xyz)
    lin = linear_index(spec, idx[inside])
    return np.bincount(lin, minlength=spec.num_voxels).reshape(spec.shape)


@dataclass
class CameraModel:
    """Pinhole camera; pixel ``(u, v)`` sits at integer image coordinates."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_bins: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.depth_bins = np.asarray(self.depth_bins, dtype=np.float64).reshape(-1)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ContractError("focal lengths must be positive")
        if np.abs(self.rotation @ self.rotation.T - np.eye(3)).max() > 1e-9:
            raise ContractError("rotation must be orthonormal")
        if len(self.depth_bins) == 0 or (self.depth_bins <= 0).any() or (
                np.diff(self.depth_bins) <= 0).any():
            raise ContractError("depth bins must be positive and strictly increasing")

    @property
    def num_bins(self) -> int:
        return len(self.depth_bins)

    @property
    def center(self) -> np.ndarray:
        """Camera origin in world coordinates."""
        return -self.rotation.T @ self.translation

    def pixel_rays(self) -> np.ndarray:
        """World-frame unit-depth directions, ``H x W x 3`` (camera z == 1)."""
        v, u = np.meshgrid(np.arange(self.height), np.arange(self.width), indexing="ij")
        cam = np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u, float)], -1)
        return cam @ self.rotation  # R^T applied row-wise

    def unproject(self) -> np.ndarray:
        """World points of every (bin, row, col): ``D x H x W x 3``."""
        rays = self.pixel_rays()
        return self.center + self.depth_bins[:, None, None, None] * rays[None]

    @classmethod
    def looking_down(cls, height_m: float, width: int, height: int, half_extent: float,
                     depth_bins) -> "CameraModel":
        """Nadir camera above the origin whose image spans ``+-half_extent`` at ``height_m``."""
        # camera axes in world: x_cam = +x, y_cam = -y, z_cam = -z
        rotation = np.array([[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]])
        center = np.array([0.0, 0.0, height_m])
        fx = (width / 2.0) * height_m / half_extent
        fy = (height / 2.0) * height_m / half_extent
        return cls(fx, fy, (width - 1) / 2.0, (height - 1) / 2.0, width, height,
                   np.asarray(depth_bins, float), rotation, -rotation @ center)


def splat_index(cam: CameraModel, spec: GridSpec) -> np.ndarray:
    """Target linear voxel of every (bin, pixel) column, -1 when outside the grid."""
    pts = cam.unproject().reshape(-1, 3)
    idx, inside = voxel_indices(spec, pts)
    lin = linear_index(spec, idx)
    lin[~inside] = -1
    return lin


def lss_splat(image_features, depth_probs, cam: CameraModel, spec: GridSpec,
              index: np.ndarray | None = None) -> VoxelGrid:
    """Lift ``F x H x W`` features along per-pixel depth distributions and sum-pool into voxels.

    ``index`` may carry a precomputed :func:`splat_index` for a fixed camera/grid.
    """
    image_features = as_tensor(image_features)
    depth_probs = as_tensor(depth_probs)
    if image_features.ndim != 3 or depth_probs.ndim != 3:
        raise ShapeError("expected F x H x W features and D x H x W depth probabilities")
    f, h, w = image_features.shape
    if (h, w) != (cam.height, cam.width) or depth_probs.shape != (cam.num_bins, h, w):
        raise ShapeError(
            f"features {image_features.shape} / depth {depth_probs.shape} vs camera "
            f"{cam.num_bins} x {cam.height} x {cam.width}")
    if (depth_probs.data < 0).any() or depth_probs.data.sum(axis=0).max(initial=0.0) > 1 + 1e-6:
        raise ContractError("depth probabilities must be nonnegative with column sums <= 1")
    if index is None:
        index = splat_index(cam, spec)
    d = cam.num_bins
    lifted = reshape(image_features, (f, 1, h * w)) * reshape(depth_probs, (1, d, h * w))
    pooled = scatter_add(reshape(lifted, (f, d * h * w)), index, spec.num_voxels)
    out_spec = spec.with_channels(f)
    return VoxelGrid(out_spec, reshape(pooled, (f, *spec.shape)))


def _volume(volume) -> Tensor:
    return volume.features if isinstance(volume, VoxelGrid) else as_tensor(volume)


def depth_slices(volume, D: int | None = None, axis: str = "z") -> list[Tensor]:
    """Split a volume into ``D`` slices along a spatial axis.

    Accepts a :class:`VoxelGrid` or any tensor whose last three axes are
    ``x, y, z``. When ``D`` is smaller than the axis extent, consecutive
    groups of ``extent / D`` layers are mean-pooled.
    """
    t = _volume(volume)
    ax = _AXES[axis] % t.ndim
    extent = t.shape[ax]
    D = extent if D is None else D
    if D < 1 or D > extent:
        raise ShapeError(f"D={D} must lie in [1, {extent}]")
    if extent % D:
        raise ShapeError(f"D={D} does not divide axis extent {extent}")
    group = extent // D
    slices = []
    for d in range(D):
        index = [slice(None)] * t.ndim
        if group == 1:
            index[ax] = d
            slices.append(t[tuple(index)])
        else:
            index[ax] = slice(d * group, (d + 1) * group)
            slices.append(t[tuple(index)].mean(axis=ax))
    return slices


def vertical_gradient(volume) -> Tensor:
    """Forward difference along z (the last axis)."""
    t = _volume(volume)
    if t.shape[-1] < 2:
        raise ShapeError("vertical gradient needs nz >= 2")
    return t[..., 1:] - t[..., :-1]


# -- serialization -------------------------------------------------------------

MAGIC = b"VOXF"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIIII6d")


def write_grid(path, grid: VoxelGrid) -> None:
    s = grid.spec
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, s.channels, s.nx, s.ny, s.nz,
                          *s.x_range, *s.y_range, *s.z_range)
    body = np.ascontiguousarray(grid.features.data, dtype="<f8").tobytes()
    Path(path).write_bytes(header + body)


def read_grid(path) -> VoxelGrid:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ContractError("truncated grid file")
    magic, version, c, nx, ny, nz, *bounds = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ContractError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ContractError(f"unsupported grid format version {version}")
    spec = GridSpec(tuple(bounds[0:2]), tuple(bounds[2:4]), tuple(bounds[4:6]), nx, ny, nz, c)
    expected = c * nx * ny * nz * 8
    if len(raw) - _HEADER.size != expected:
        raise ContractError(f"payload is {len(raw) - _HEADER.size} bytes, expected {expected}")
    data = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).astype(np.float64)
    return VoxelGrid(spec, Tensor(data.reshape(c, nx, ny, nz)))


def grid_to_json(grid: VoxelGrid) -> str:
    return json.dumps({"spec": grid.spec.to_dict(),
                       "features": grid.features.data.reshape(-1).tolist()})


def grid_from_json(text: str) -> VoxelGrid:
    d = json.loads(text)
    spec = GridSpec.from_dict(d["spec"])
    data = np.asarray(d["features"], dtype=np.float64)
    if data.size != spec.channels * spec.num_voxels:
        raise ContractError("feature count does not match spec")
    return VoxelGrid(spec, Tensor(data.reshape(spec.channels, *spec.shape)))


__all__ = [
    "CameraModel", "GridSpec", "PointCloud", "VoxelGrid", "depth_slices", "grid_from_json",
    "grid_to_json", "lss_splat", "point_counts", "read_grid", "splat_index", "voxel_index",
    "voxel_indices", "voxelize", "vertical_gradient", "write_grid",
]
