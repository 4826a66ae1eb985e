"""Rectified stereo geometry: disparity/depth conversion, LIDAR projection, sparsity."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError

DEFAULT_MAX_DEPTH_M = 100.0
DEFAULT_INVERSION_CAP_M = 100.0


@dataclass(frozen=True)
class CameraRig:
    focal_px: float
    baseline_m: float
    cx: float
    cy: float
    width: int
    height: int
    max_depth_m: float = DEFAULT_MAX_DEPTH_M

    def __post_init__(self):
        if self.focal_px <= 0 or self.baseline_m <= 0:
            raise ContractError("CameraRig: focal_px and baseline_m must be positive")
        if self.width < 1 or self.height < 1:
            raise ContractError("CameraRig: width and height must be >= 1")
        if self.max_depth_m <= 0:
            raise ContractError("CameraRig: max_depth_m must be positive")

    @property
    def fb(self) -> float:
        """focal length times baseline (px * m)."""
        return self.focal_px * self.baseline_m

    @property
    def min_disparity(self) -> float:
        """Disparity below which depth is clamped to ``max_depth_m``."""
        return self.fb / self.max_depth_m

    def cropped(self, top: int, left: int, height: int, width: int) -> "CameraRig":
        return CameraRig(self.focal_px, self.baseline_m, self.cx - left, self.cy - top,
                         width, height, self.max_depth_m)


@dataclass(frozen=True)
class DepthMap:
    """Per-pixel depth in metres; invalid pixels hold 0."""

    depth: np.ndarray
    valid: np.ndarray = field(default=None)

    def __post_init__(self):
        depth = np.asarray(self.depth, dtype=np.float64)
        valid = depth > 0 if self.valid is None else np.asarray(self.valid, dtype=bool)
        if depth.ndim != 2 or valid.shape != depth.shape:
            raise ContractError(f"DepthMap: depth {depth.shape} and valid {valid.shape} must be equal 2-D grids")
        if np.any(depth[valid] <= 0):
            raise ContractError("DepthMap: valid pixels must have positive depth")
        if np.any(depth[~valid] != 0):
            raise ContractError("DepthMap: invalid pixels must hold depth 0")
        object.__setattr__(self, "depth", depth)
        object.__setattr__(self, "valid", valid)

    @property
    def shape(self):
        return self.depth.shape

    @property
    def count(self) -> int:
        return int(self.valid.sum())

    @classmethod
    def from_array(cls, depth) -> "DepthMap":
        depth = np.asarray(depth, dtype=np.float64)
        valid = depth > 0
        return cls(np.where(valid, depth, 0.0), valid)


@dataclass(frozen=True)
class DisparityMap:
    disparity: np.ndarray
    max_disparity: float = np.inf

    def __post_init__(self):
        d = np.asarray(self.disparity, dtype=np.float64)
        if d.ndim != 2:
            raise ContractError("DisparityMap: disparity must be a 2-D grid")
        if np.any(d < 0) or np.any(d > self.max_disparity):
            raise ContractError("DisparityMap: values must lie in [0, max_disparity]")
        object.__setattr__(self, "disparity", d)


def disparity_to_depth(disp, rig: CameraRig) -> DepthMap:
    """depth = f*B/d; disparities below f*B/max_depth (including 0) map to max_depth."""
    d = disp.disparity if isinstance(disp, DisparityMap) else np.asarray(disp, dtype=np.float64)
    depth = rig.fb / np.maximum(d, rig.min_disparity)
    return DepthMap(depth, np.ones(depth.shape, dtype=bool))


def disparity_to_depth_tensor(disp: ad.Tensor, rig: CameraRig) -> ad.Tensor:
    """Differentiable variant of :func:`disparity_to_depth` on (N,1,H,W) tensors."""
    return ad.div(ad.constant(np.full((1, 1, 1, 1), rig.fb)), ad.maximum(disp, rig.min_disparity))


def depth_to_disparity(depth: DepthMap, rig: CameraRig) -> DisparityMap:
    out = np.zeros(depth.shape)
    out[depth.valid] = rig.fb / depth.depth[depth.valid]
    return DisparityMap(out)


def project_lidar(points, rig: CameraRig) -> DepthMap:
    """Pinhole-project (x, y, z) points of the left camera frame; nearest depth wins."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    depth = np.zeros((rig.height, rig.width))
    front = pts[:, 2] > 0
    pts = pts[front]
    if len(pts) == 0:
        return DepthMap(depth)
    u = np.round(rig.focal_px * pts[:, 0] / pts[:, 2] + rig.cx).astype(np.int64)
    v = np.round(rig.focal_px * pts[:, 1] / pts[:, 2] + rig.cy).astype(np.int64)
    inside = (u >= 0) & (u < rig.width) & (v >= 0) & (v < rig.height)
    u, v, z = u[inside], v[inside], pts[inside, 2]
    # far-to-near so the nearest point is written last
    order = np.argsort(-z, kind="stable")
    depth[v[order], u[order]] = z[order]
    return DepthMap(depth)


def subsample_depth(depth: DepthMap, level_of_sparsity: float, seed: int) -> DepthMap:
    """Keep round(LoS * V) of the V valid pixels, chosen uniformly without replacement."""
    if not 0 < level_of_sparsity <= 1:
        raise ContractError(f"level_of_sparsity must be in (0, 1], got {level_of_sparsity}")
    if level_of_sparsity == 1:
        return depth
    idx = np.flatnonzero(depth.valid)
    keep_n = int(round(level_of_sparsity * len(idx)))
    keep = np.random.default_rng(seed).choice(idx, size=keep_n, replace=False)
    valid = np.zeros(depth.valid.size, dtype=bool)
    valid[keep] = True
    valid = valid.reshape(depth.shape)
    return DepthMap(np.where(valid, depth.depth, 0.0), valid)


def depth_inversion(depth: DepthMap, cap_m: float = DEFAULT_INVERSION_CAP_M) -> np.ndarray:
    """Valid pixels become ``cap_m - depth``; invalid pixels stay 0."""
    if depth.count and depth.depth[depth.valid].max() > cap_m:
        raise ContractError(f"depth_inversion: valid depth exceeds cap {cap_m} m")
    return np.where(depth.valid, cap_m - depth.depth, 0.0)
