"""Depth-aware geometric alignment between camera-derived and LiDAR voxel volumes."""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass

from voxfuse.core.functional import l1, l2_norm, mse, sigmoid
from voxfuse.core.tensor import Tensor, as_tensor
from voxfuse.errors import ContractError, ShapeError
from voxfuse.voxel import VoxelGrid, depth_slices, vertical_gradient

class IntensityOrder(str, enum.Enum):
    NORM_THEN_SIGMOID = "norm_then_sigmoid"
    SIGMOID_THEN_NORM = "sigmoid_then_norm"


@dataclass(frozen=True)
class DagaConfig:
    """Loss hyperparameters.

    ``D=None`` slices every layer of ``depth_axis``. ``sharp_on`` selects
    whether the vertical term compares intensities or the raw feature volumes.
    """

    beta: float = 1.0
    D: int | None = None
    lambda_sharp: float = 0.1
    depth_axis: str = "z"
    intensity_order: IntensityOrder = IntensityOrder.NORM_THEN_SIGMOID
    sharp_on: str = "intensity"

    def __post_init__(self):
        object.__setattr__(self, "intensity_order", IntensityOrder(self.intensity_order))
        if self.beta < 0 or self.lambda_sharp < 0:
            raise ContractError("beta and lambda_sharp must be >= 0")
        if self.D is not None and self.D < 1:
            raise ContractError("D must be >= 1")
        if self.depth_axis not in ("x", "y", "z"):
            raise ContractError(f"depth_axis must be x, y or z, got {self.depth_axis!r}")
        if self.sharp_on not in ("intensity", "raw"):
            raise ContractError(f"sharp_on must be 'intensity' or 'raw', got {self.sharp_on!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["intensity_order"] = self.intensity_order.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DagaConfig":
        return cls(**d)


def _features(grid) -> Tensor:
    return grid.features if isinstance(grid, VoxelGrid) else as_tensor(grid)


def intensity(grid, order: IntensityOrder | str = IntensityOrder.NORM_THEN_SIGMOID) -> Tensor:
    """Per-voxel scalar from a ``C x X x Y x Z`` volume: channel L2 norm and a sigmoid."""
    v = _features(grid)
    order = IntensityOrder(order)
    if order is IntensityOrder.NORM_THEN_SIGMOID:
        return sigmoid(l2_norm(v, axis=0))
    return l2_norm(sigmoid(v), axis=0)


def depth_weight(d: int, cfg: DagaConfig, D: int | None = None) -> float:
    """``1 / (1 + beta * d / D)``, near layers weighted most."""
    D = cfg.D if D is None else D
    if D is None:
        raise ContractError("depth count D is not set")
    if not 0 <= d < D:
        raise ContractError(f"depth index {d} outside [0, {D})")
    return 1.0 / (1.0 + cfg.beta * (d / D))


def sharpness_loss(i_cam, i_pts) -> Tensor:
    """Mean L1 gap between the z forward differences of two volumes."""
    i_cam, i_pts = as_tensor(i_cam), as_tensor(i_pts)
    if i_cam.shape != i_pts.shape:
        raise ShapeError(f"sharpness_loss shapes differ: {i_cam.shape} vs {i_pts.shape}")
    return l1(vertical_gradient(i_cam), vertical_gradient(i_pts))


@dataclass
class DagaTerms:
    depth_term: Tensor
    sharp_term: Tensor
    total: Tensor


def daga_terms(v_cam, v_pts, cfg: DagaConfig = DagaConfig()) -> DagaTerms:
    a, b = _features(v_cam), _features(v_pts)
    if isinstance(v_cam, VoxelGrid) and isinstance(v_pts, VoxelGrid):
        if not v_cam.spec.same_extent(v_pts.spec):
            raise ShapeError("DAGA needs grids with the same spatial spec")
    if a.shape[1:] != b.shape[1:]:
        raise ShapeError(f"DAGA volume shapes differ: {a.shape} vs {b.shape}")
    i_cam = intensity(a, cfg.intensity_order)
    i_pts = intensity(b, cfg.intensity_order)
    cam_slices = depth_slices(i_cam, cfg.D, cfg.depth_axis)
    pts_slices = depth_slices(i_pts, cfg.D, cfg.depth_axis)
    D = len(cam_slices)
    depth_term = None
    for d, (sc, sp) in enumerate(zip(cam_slices, pts_slices)):
        term = mse(sc, sp) * depth_weight(d, cfg, D)
        depth_term = term if depth_term is None else depth_term + term
    depth_term = depth_term * (1.0 / D)
    if cfg.sharp_on == "intensity":
        sharp = sharpness_loss(i_cam, i_pts)
    else:
        sharp = sharpness_loss(a, b)
    return DagaTerms(depth_term, sharp, depth_term + sharp * cfg.lambda_sharp)


def daga_loss(v_cam, v_pts, cfg: DagaConfig = DagaConfig()) -> Tensor:
    """Depth-weighted slice MSE of intensities plus ``lambda_sharp`` times the vertical term."""
    return daga_terms(v_cam, v_pts, cfg).total


__all__ = ["DagaConfig", "DagaTerms", "IntensityOrder", "daga_loss", "daga_terms",
           "depth_weight", "intensity", "sharpness_loss"]
