"""Procedural rectified stereo scenes with exact ground truth and simulated LIDAR.

Scenes are built from a ground plane, a back wall, floating slanted rectangles
and axis-aligned boxes.  Both cameras ray-cast the same geometry, and colour is
a smooth 3-D value-noise field evaluated at the hit point, so the two views see
one consistent appearance.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff import ContractError
from .geometry import CameraRig, DepthMap, DisparityMap
from . import imageio

OCCLUSION_TOL_M = 1e-4


def desk_rig() -> CameraRig:
    # f*B = 56 px*m, so depths [2, 14] m span disparities [4, 28] px
    return CameraRig(focal_px=100.0, baseline_m=0.56, cx=63.5, cy=31.5, width=128, height=64)


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    num_planes: int = 2
    num_boxes: int = 1
    depth_near_m: float = 2.0
    depth_far_m: float = 14.0
    slant_deg: float = 35.0
    texture_octaves: int = 2
    texture_contrast: float = 0.6
    texture_cell_px: float = 7.0
    low_texture: bool = False
    rig: CameraRig = field(default_factory=desk_rig)
    lidar_beams: int = 16
    lidar_azimuth_step: int = 2

    def __post_init__(self):
        if not 0 < self.depth_near_m < self.depth_far_m:
            raise ContractError("SceneSpec: depth range must satisfy 0 < near < far")
        if self.depth_far_m >= self.rig.max_depth_m:
            raise ContractError("SceneSpec: depth_far_m must be below rig.max_depth_m")
        if self.lidar_beams < 1 or self.lidar_azimuth_step < 1:
            raise ContractError("SceneSpec: lidar_beams and lidar_azimuth_step must be >= 1")

    @property
    def height(self) -> int:
        return self.rig.height

    @property
    def width(self) -> int:
        return self.rig.width


@dataclass(frozen=True)
class SceneSample:
    left_image: np.ndarray
    right_image: np.ndarray
    gt_depth: DepthMap
    gt_disparity: DisparityMap
    sparse_depth: DepthMap
    occlusion: np.ndarray
    seed: int
    rig: CameraRig


# ---------------------------------------------------------------------------
# value noise

class ValueNoise:
    """Smooth 3-D lattice noise in [0, 1] with quintic fade interpolation."""

    def __init__(self, seed: int, size: int = 256):
        rng = np.random.default_rng(seed)
        self.perm = np.concatenate([rng.permutation(size)] * 2)
        self.values = rng.uniform(0, 1, size)
        self.size = size

    def _lattice(self, i, j, k):
        p, s = self.perm, self.size
        return self.values[p[p[p[i % s] + j % s] + k % s]]

    def __call__(self, x, y, z):
        xi, yi, zi = np.floor(x).astype(np.int64), np.floor(y).astype(np.int64), np.floor(z).astype(np.int64)
        fx, fy, fz = x - xi, y - yi, z - zi
        fade = lambda t: t * t * t * (t * (t * 6 - 15) + 10)  # noqa: E731
        u, v, w = fade(fx), fade(fy), fade(fz)
        out = 0.0
        for dx in (0, 1):
            wx = u if dx else 1 - u
            for dy in (0, 1):
                wy = v if dy else 1 - v
                for dz in (0, 1):
                    wz = w if dz else 1 - w
                    out = out + wx * wy * wz * self._lattice(xi + dx, yi + dy, zi + dz)
        return out

    def octaves(self, x, y, z, n: int):
        total, amp, norm = 0.0, 1.0, 0.0
        for o in range(n):
            f = 2.0 ** o
            total = total + amp * self(x * f, y * f, z * f + 31.7 * o)
            norm += amp
            amp *= 0.5
        return total / norm


# ---------------------------------------------------------------------------
# geometry primitives; every intersect() returns hit distance t along
# origin + t * direction (inf where missed)

class Plane:
    def __init__(self, point, normal, bounds=None):
        self.point = np.asarray(point, float)
        self.normal = np.asarray(normal, float) / np.linalg.norm(normal)
        # bounds: (axis_u, axis_v, half_u, half_v) for a finite rectangle
        self.bounds = bounds

    def intersect(self, origin, dirs):
        denom = dirs @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((self.point - origin) @ self.normal) / denom
        t = np.where(np.abs(denom) > 1e-12, t, np.inf)
        t = np.where(t > 1e-9, t, np.inf)
        if self.bounds is not None:
            au, av, hu, hv = self.bounds
            rel = origin + dirs * np.where(np.isfinite(t), t, 0)[..., None] - self.point
            inside = (np.abs(rel @ au) <= hu) & (np.abs(rel @ av) <= hv)
            t = np.where(inside, t, np.inf)
        return t

    def corners(self):
        au, av, hu, hv = self.bounds
        return [self.point + su * hu * au + sv * hv * av for su in (-1, 1) for sv in (-1, 1)]


class Box:
    def __init__(self, lo, hi):
        self.lo = np.asarray(lo, float)
        self.hi = np.asarray(hi, float)

    def intersect(self, origin, dirs):
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            t1 = (self.lo - origin) * inv
            t2 = (self.hi - origin) * inv
        tmin = np.nanmax(np.minimum(t1, t2), axis=-1)
        tmax = np.nanmin(np.maximum(t1, t2), axis=-1)
        hit = (tmax >= tmin) & (tmin > 1e-9)
        return np.where(hit, tmin, np.inf)

    def corners(self):
        return [np.array([x, y, z]) for x in (self.lo[0], self.hi[0])
                for y in (self.lo[1], self.hi[1]) for z in (self.lo[2], self.hi[2])]


def _rotation(yaw, pitch):
    cy_, sy_ = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    ry = np.array([[cy_, 0, sy_], [0, 1, 0], [-sy_, 0, cy_]])
    rx = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
    return ry @ rx


def _build_scene(spec: SceneSpec, rng: np.random.Generator):
    """Return (objects, per-object base colours)."""
    rig = spec.rig
    near, far = spec.depth_near_m, spec.depth_far_m
    slant = np.deg2rad(spec.slant_deg)
    objects = []

    # back wall: slightly yawed, all visible depths inside [0.8 far, far]
    wall_z = far * rng.uniform(0.88, 0.94)
    wall_yaw = rng.uniform(-1, 1) * min(slant, np.deg2rad(10))
    normal = _rotation(wall_yaw, 0) @ [0, 0, -1]
    # pull the wall in so its farthest visible point (an image corner) stays within range
    corners = np.array([[(u - rig.cx) / rig.focal_px, (v - rig.cy) / rig.focal_px, 1.0]
                        for u in (0, rig.width - 1) for v in (0, rig.height - 1)])
    corner_z = wall_z * normal[2] / (corners @ normal)
    wall_z *= min(1.0, far / corner_z.max())
    objects.append(Plane([0, 0, wall_z], normal))

    # ground plane y = cam_height, nearest visible row at >= near
    bottom = (rig.height - 1 - rig.cy) / rig.focal_px
    cam_height = bottom * near * rng.uniform(1.1, 1.6)
    objects.append(Plane([0, cam_height, 0], [0, -1, 0]))

    def half_view(z):
        return z * (rig.width / 2) / rig.focal_px, z * (rig.height / 2) / rig.focal_px

    for _ in range(spec.num_planes):
        for _attempt in range(50):
            z = rng.uniform(near * 1.3, far * 0.75)
            hx, hy = half_view(z)
            center = np.array([rng.uniform(-0.7, 0.7) * hx, rng.uniform(-0.7, 0.4) * hy, z])
            rot = _rotation(rng.uniform(-slant, slant), rng.uniform(-slant, slant) * 0.5)
            hu = rng.uniform(0.15, 0.35) * hx
            hv = rng.uniform(0.2, 0.45) * hy
            plane = Plane(center, rot @ [0, 0, -1], (rot @ [1, 0, 0], rot @ [0, 1, 0], hu, hv))
            zs = [c[2] for c in plane.corners()]
            if min(zs) > near * 1.05 and max(zs) < wall_z * 0.95:
                objects.append(plane)
                break

    for _ in range(spec.num_boxes):
        z0 = rng.uniform(near * 1.3, far * 0.6)
        hx, hy = half_view(z0)
        width_m = rng.uniform(0.15, 0.3) * hx
        depth_m = rng.uniform(0.3, 1.0) * width_m
        height_m = rng.uniform(0.3, 0.6) * hy * 2
        x0 = rng.uniform(-0.7, 0.7) * hx
        objects.append(Box([x0 - width_m / 2, cam_height - height_m, z0],
                           [x0 + width_m / 2, cam_height, z0 + depth_m]))

    colors = rng.uniform(0.3, 0.7, (len(objects), 3))
    return objects, colors


def _pixel_rays(rig: CameraRig):
    v, u = np.mgrid[0:rig.height, 0:rig.width].astype(float)
    return np.stack([(u - rig.cx) / rig.focal_px, (v - rig.cy) / rig.focal_px, np.ones_like(u)], axis=-1)


def _cast(objects, origin, dirs):
    ts = np.stack([obj.intersect(origin, dirs) for obj in objects])
    ids = np.argmin(ts, axis=0)
    t = np.take_along_axis(ts, ids[None], 0)[0]
    if not np.all(np.isfinite(t)):
        raise ContractError("scene does not cover every pixel")
    return t, ids


def _shade(spec: SceneSpec, noise: ValueNoise, colors, points, ids):
    rig = spec.rig
    x, y, z = points[..., 0], points[..., 1], points[..., 2]
    # perspective-normalised lattice: cells are ~texture_cell_px wide in the left view
    cell = spec.texture_cell_px * (4.0 if spec.low_texture else 1.0)
    qu = (rig.focal_px * x / z) / cell
    qv = (rig.focal_px * y / z) / cell
    qz = z / 2.5 + 13.37 * ids
    contrast = spec.texture_contrast * (0.1 if spec.low_texture else 1.0)
    img = np.empty(points.shape[:-1] + (3,))
    for c in range(3):
        n = noise.octaves(qu + 57.1 * c, qv, qz, spec.texture_octaves)
        img[..., c] = colors[ids, c] + contrast * (n - 0.5)
    return np.round(np.clip(img, 0, 1) * 255) / 255


def render(spec: SceneSpec):
    """Ray-cast both views; returns left/right images, left depth, occlusion mask."""
    rig = spec.rig
    rng = np.random.default_rng(spec.seed)
    objects, colors = _build_scene(spec, rng)
    noise = ValueNoise(int(rng.integers(2**31)))
    dirs = _pixel_rays(rig)
    left_origin = np.zeros(3)
    right_origin = np.array([rig.baseline_m, 0.0, 0.0])

    t_left, ids_left = _cast(objects, left_origin, dirs)
    pts_left = dirs * t_left[..., None]
    t_right, ids_right = _cast(objects, right_origin, dirs)
    pts_right = right_origin + dirs * t_right[..., None]

    left = _shade(spec, noise, colors, pts_left, ids_left)
    right = _shade(spec, noise, colors, pts_right, ids_right)
    depth = pts_left[..., 2]

    # occlusion, two depth tests against the right view:
    # (a) the exact ray from the right centre to the point hits a nearer surface
    to_pts = pts_left - right_origin
    t_occ = np.stack([obj.intersect(right_origin, to_pts) for obj in objects]).min(axis=0)
    occluded = t_occ * depth < depth - OCCLUSION_TOL_M
    # (b) a rendered right pixel used to interpolate the point lies on another
    # surface at a different depth (the footprint straddles a discontinuity)
    xr = np.arange(rig.width)[None, :] - rig.fb / depth
    outside = (xr < 0) | (xr > rig.width - 1)
    rows = np.arange(rig.height)[:, None]
    for tap in (np.floor, np.ceil):
        col = np.clip(tap(np.clip(xr, 0, rig.width - 1)).astype(int), 0, rig.width - 1)
        other = ids_right[rows, col] != ids_left
        occluded |= other & (np.abs(pts_right[rows, col, 2] - depth) > OCCLUSION_TOL_M)
    occluded |= outside
    return left, right, depth, occluded


def simulate_lidar(gt_depth: DepthMap, spec: SceneSpec) -> DepthMap:
    """Sample ``lidar_beams`` evenly spaced rows, every ``lidar_azimuth_step``-th column."""
    h, w = gt_depth.shape
    if spec.lidar_beams > h:
        raise ContractError("lidar_beams must not exceed the image height")
    rng = np.random.default_rng([spec.seed, 1])
    spacing = h / spec.lidar_beams
    jitter = rng.uniform(-0.49, 0.49) * min(1.0, spacing - 1.0) if spacing > 1 else 0.0
    rows = np.clip(np.round((np.arange(spec.lidar_beams) + 0.5) * spacing - 0.5 + jitter), 0, h - 1).astype(int)
    cols = np.arange(0, w, spec.lidar_azimuth_step)
    keep = np.zeros((h, w), dtype=bool)
    keep[np.ix_(rows, cols)] = True
    keep &= gt_depth.valid
    return DepthMap(np.where(keep, gt_depth.depth, 0.0), keep)


def generate_scene(spec: SceneSpec) -> SceneSample:
    left, right, depth, occluded = render(spec)
    gt = DepthMap(depth, np.ones(depth.shape, dtype=bool))
    disp = DisparityMap(spec.rig.fb / depth)
    return SceneSample(left_image=left, right_image=right, gt_depth=gt, gt_disparity=disp,
                       sparse_depth=simulate_lidar(gt, spec), occlusion=occluded,
                       seed=spec.seed, rig=spec.rig)


def photometric_consistency(sample: SceneSample, tol: float = 2e-2) -> float:
    """Fraction of non-occluded pixels where left matches the GT-warped right view."""
    from . import autodiff as ad

    with ad.precision(np.float64), ad.no_grad():
        right = ad.Tensor(sample.right_image.transpose(2, 0, 1)[None])
        disp = ad.Tensor(sample.gt_disparity.disparity[None, None])
        warped = ad.sample_horizontal(right, disp).data[0].transpose(1, 2, 0)
    ok = np.all(np.abs(warped - sample.left_image) <= tol, axis=-1)
    vis = ~sample.occlusion
    return float(ok[vis].mean())


# ---------------------------------------------------------------------------
# dataset directory I/O

SUBDIRS = ("left", "right", "sparse", "gt", "occ")


def _write(path: Path, data: bytes) -> None:
    try:
        path.write_bytes(data)
    except OSError as exc:
        raise OSError(f"failed to write {path}: {exc.strerror}") from exc


def write_dataset(specs, directory) -> Path:
    """Generate and store one sample per spec; returns the manifest path."""
    root = Path(directory)
    for sub in SUBDIRS:
        (root / sub).mkdir(parents=True, exist_ok=True)
    lines = []
    for i, spec in enumerate(specs):
        s = generate_scene(spec)
        name = f"{i:04d}"
        _write(root / "left" / f"{name}.ppm", imageio.encode_ppm(s.left_image))
        _write(root / "right" / f"{name}.ppm", imageio.encode_ppm(s.right_image))
        _write(root / "sparse" / f"{name}.png", imageio.encode_depth_png16(s.sparse_depth))
        _write(root / "gt" / f"{name}.png", imageio.encode_depth_png16(s.gt_depth))
        _write(root / "occ" / f"{name}.pgm", imageio.encode_pgm(s.occlusion))
        r = s.rig
        lines.append(f"{name} {r.focal_px!r} {r.baseline_m!r} {r.cx!r} {r.cy!r} {r.width} {r.height} "
                     f"{r.max_depth_m!r} {s.seed}")
    manifest = root / "manifest.txt"
    _write(manifest, ("\n".join(lines) + "\n").encode())
    return manifest


@dataclass(frozen=True)
class Record:
    name: str
    rig: CameraRig
    seed: int


class SceneDataset:
    """Lazy reader for a dataset directory written by :func:`write_dataset`.

    Files are only read when the corresponding accessor is called, so a
    self-supervised run never touches ``gt/``.
    """

    def __init__(self, directory):
        self.root = Path(directory)
        manifest = self.root / "manifest.txt"
        if not manifest.is_file():
            raise FileNotFoundError(f"missing manifest: {manifest}")
        self.records = []
        for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 9:
                raise imageio.CodecError(f"{manifest}:{lineno}: expected 9 fields, got {len(parts)}")
            name = parts[0]
            f, b, cx, cy = (float(p) for p in parts[1:5])
            w, h = int(parts[5]), int(parts[6])
            rig = CameraRig(f, b, cx, cy, w, h, float(parts[7]))
            self.records.append(Record(name, rig, int(parts[8])))
            for sub, ext in zip(SUBDIRS, ("ppm", "ppm", "png", "png", "pgm")):
                path = self.root / sub / f"{name}.{ext}"
                if not path.is_file():
                    raise FileNotFoundError(f"manifest references missing file: {path}")

    def __len__(self):
        return len(self.records)

    def _read(self, sub: str, i: int, ext: str) -> bytes:
        path = self.root / sub / f"{self.records[i].name}.{ext}"
        try:
            return path.read_bytes()
        except OSError as exc:
            raise OSError(f"failed to read {path}: {exc.strerror}") from exc

    def rig(self, i: int) -> CameraRig:
        return self.records[i].rig

    def left(self, i: int) -> np.ndarray:
        return imageio.decode_ppm(self._read("left", i, "ppm"))

    def right(self, i: int) -> np.ndarray:
        return imageio.decode_ppm(self._read("right", i, "ppm"))

    def sparse(self, i: int) -> DepthMap:
        return imageio.decode_depth_png16(self._read("sparse", i, "png"))

    def gt(self, i: int) -> DepthMap:
        return imageio.decode_depth_png16(self._read("gt", i, "png"))

    def occlusion(self, i: int) -> np.ndarray:
        return imageio.decode_pgm(self._read("occ", i, "pgm")) > 0


def dataset_specs(base: SceneSpec, count: int, first_seed: int = 0):
    return [replace(base, seed=first_seed + i) for i in range(count)]


class InMemoryDataset:
    """SceneDataset-compatible view over generated samples.

    Depth maps go through the PNG16 quantization so values match a dataset
    written to disk and read back.
    """

    def __init__(self, samples):
        self.samples = list(samples)

    @classmethod
    def generate(cls, specs) -> "InMemoryDataset":
        return cls(generate_scene(s) for s in specs)

    def __len__(self):
        return len(self.samples)

    def rig(self, i: int) -> CameraRig:
        return self.samples[i].rig

    def left(self, i: int) -> np.ndarray:
        return self.samples[i].left_image

    def right(self, i: int) -> np.ndarray:
        return self.samples[i].right_image

    def sparse(self, i: int) -> DepthMap:
        return imageio.quantize_depth(self.samples[i].sparse_depth)

    def gt(self, i: int) -> DepthMap:
        return imageio.quantize_depth(self.samples[i].gt_depth)

    def occlusion(self, i: int) -> np.ndarray:
        return self.samples[i].occlusion
