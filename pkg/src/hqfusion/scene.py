"""Synthetic 3-D scenes and the multi-modal feature maps rendered from them.

This module stands in for real sensor backbones: it generates ground-truth
objects, a surround-view camera rig and a radar point cloud, then renders
per-camera perspective-view (PV) feature maps, an image BEV grid and a
radar BEV grid plus detection heatmap.  Every object carries a distinct
unit-norm "signature" embedding that the renderers splat at the object
location, so tests can verify that sampled evidence really comes from the
object it claims to.

All generation and rendering is deterministic given (seed, config); random
streams are isolated per purpose via numpy SeedSequence lists.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import convolve2d

from .errors import ConfigError, GenerationError, ShapeError

# Seed-stream tags, so independent draws never alias each other.
_STREAM_OBJECTS = 0
_STREAM_RADAR = 7
_STREAM_PV_NOISE = 4
_STREAM_BEV_MISS = 5
_STREAM_BEV_NOISE = 6
_STREAM_RADAR_EMBED = 2

MIN_CAMERA_DEPTH = 0.1

# 3x3 binomial kernel used to smooth the radar heatmap.
_HEATMAP_KERNEL = np.array([[1, 2, 1], [2, 4, 2], [1, 2, 1]], dtype=np.float64) / 16.0


@dataclass
class SceneObject:
    """One ground-truth box: center/size in meters, yaw in radians."""

    id: int
    center: np.ndarray        # (3,) x, y, z
    size: np.ndarray          # (3,) w, l, h
    yaw: float
    velocity: np.ndarray      # (2,) vx, vy
    class_id: int
    signature: np.ndarray     # (d,) unit-norm embedding planted by renderers

    def footprint_corners(self) -> np.ndarray:
        """(4,2) BEV corners of the box footprint, counter-clockwise."""
        w, l = float(self.size[0]), float(self.size[1])
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        local = np.array(
            [[l / 2, w / 2], [-l / 2, w / 2], [-l / 2, -w / 2], [l / 2, -w / 2]]
        )
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + self.center[:2]


@dataclass
class Camera:
    """Pinhole camera: world -> camera rotation plus center position."""

    fx: float
    fy: float
    cx: float
    cy: float
    r_wc: np.ndarray      # (3,3), rows are camera axes in world coords
    position: np.ndarray  # (3,) camera center in world coords
    width: int
    height: int


@dataclass
class CameraRig:
    cameras: list[Camera]

    def __len__(self) -> int:
        return len(self.cameras)


@dataclass
class SceneConfig:
    extent: float = 51.2          # scene spans [-extent, extent]^2 in x, y
    num_objects: int = 12
    num_clutter: int = 20
    num_classes: int = 10
    num_cameras: int = 6
    feature_dim: int = 256
    min_separation: float = 2.0
    image_width: int = 800
    image_height: int = 450
    focal: float = 500.0
    camera_height: float = 1.6


@dataclass
class Scene:
    objects: list[SceneObject]
    seed: int
    config: SceneConfig


@dataclass
class GridConfig:
    """Square BEV grid layout: [-extent, extent]^2 at the given voxel size."""

    extent: float = 51.2
    voxel: float = 0.8

    def cells(self) -> int:
        span = 2.0 * self.extent
        n = round(span / self.voxel)
        if n < 1 or abs(n * self.voxel - span) > 1e-9 * max(span, 1.0):
            raise ConfigError(
                f"extent {self.extent} is not an integer number of {self.voxel} m voxels"
            )
        return n


@dataclass
class FeatureGrid:
    """Dense H x W x d BEV feature grid with metric extent.

    Rows index y, columns index x; cell (i, j) is centered at
    (x_min + (j+.5)*voxel, y_min + (i+.5)*voxel).
    """

    data: np.ndarray
    x_min: float
    x_max: float
    y_min: float
    y_max: float
    voxel: float
    kind: str

    def __post_init__(self):
        h, w = self.data.shape[:2]
        for span, n, axis in ((self.x_max - self.x_min, w, "x"),
                              (self.y_max - self.y_min, h, "y")):
            if abs(span / self.voxel - n) > 1e-9:
                raise ShapeError(f"{axis} extent does not tile into {n} voxels")

    @property
    def h(self) -> int:
        return self.data.shape[0]

    @property
    def w(self) -> int:
        return self.data.shape[1]

    @property
    def d(self) -> int:
        return self.data.shape[2]

    @classmethod
    def allocate(cls, grid_config: GridConfig, d: int, kind: str) -> "FeatureGrid":
        n = grid_config.cells()
        e = grid_config.extent
        return cls(np.zeros((n, n, d)), -e, e, -e, e, grid_config.voxel, kind)

    def cell_center(self, row: int, col: int) -> np.ndarray:
        return np.array(
            [self.x_min + (col + 0.5) * self.voxel,
             self.y_min + (row + 0.5) * self.voxel]
        )

    def frac_coords(self, x: float, y: float) -> tuple[float, float]:
        """Metric point -> fractional (fy, fx) cell-center coordinates."""
        return ((y - self.y_min) / self.voxel - 0.5,
                (x - self.x_min) / self.voxel - 0.5)


@dataclass
class PvFeatureMap:
    """Per-camera feature map at image resolution / downsample."""

    data: np.ndarray          # (H_f, W_f, d)
    downsample: int

    @property
    def d(self) -> int:
        return self.data.shape[2]

    def pixel_to_frac(self, u, v):
        """Pixel coords -> fractional feature-cell coords (fy, fx)."""
        return (np.asarray(v, dtype=np.float64) / self.downsample - 0.5,
                np.asarray(u, dtype=np.float64) / self.downsample - 0.5)


@dataclass
class RadarPointCloud:
    xyz: np.ndarray         # (M, 3)
    velocity: np.ndarray    # (M, 2)
    rcs: np.ndarray         # (M,)
    object_ids: np.ndarray  # (M,) source object id, -1 for clutter

    def __len__(self) -> int:
        return self.xyz.shape[0]

    @classmethod
    def empty(cls) -> "RadarPointCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 2)), np.zeros(0),
                   np.zeros(0, dtype=int))


@dataclass
class RadarSimConfig:
    points_per_object: int = 8
    pos_noise: float = 0.3
    vel_noise: float = 0.2
    clutter_count: int = 20


def make_camera(fx, fy, cx, cy, yaw, position, width, height) -> Camera:
    """Camera at `position` looking along world yaw, optical axis horizontal.

    Camera frame: +x right, +y down, +z forward (right-handed).
    """
    fwd = np.array([math.cos(yaw), math.sin(yaw), 0.0])
    right = np.array([math.sin(yaw), -math.cos(yaw), 0.0])
    down = np.array([0.0, 0.0, -1.0])
    r_wc = np.stack([right, down, fwd])
    return Camera(fx, fy, cx, cy, r_wc, np.asarray(position, dtype=np.float64),
                  width, height)


def build_rig(config: SceneConfig) -> CameraRig:
    """Surround-view rig: cameras at scene center, evenly spaced in yaw."""
    cams = []
    for k in range(config.num_cameras):
        yaw = 2.0 * math.pi * k / config.num_cameras
        cams.append(make_camera(
            config.focal, config.focal,
            config.image_width / 2.0, config.image_height / 2.0,
            yaw, (0.0, 0.0, config.camera_height),
            config.image_width, config.image_height,
        ))
    return CameraRig(cams)


def generate_scene(seed: int, config: SceneConfig) -> tuple[Scene, CameraRig]:
    """Place objects uniformly with a minimum center separation.

    Raises GenerationError when the extent cannot host the requested count
    at the configured separation.
    """
    if config.num_objects < 0:
        raise ConfigError("num_objects must be >= 0")
    rng = np.random.default_rng([seed, _STREAM_OBJECTS])
    margin = 2.0
    lo, hi = -config.extent + margin, config.extent - margin
    if config.num_objects > 0 and hi <= lo:
        raise GenerationError("extent too small for any object placement")

    centers: list[np.ndarray] = []
    attempts = 0
    max_attempts = 1000 * max(config.num_objects, 1)
    while len(centers) < config.num_objects:
        if attempts >= max_attempts:
            raise GenerationError(
                f"could not place {config.num_objects} objects at "
                f"{config.min_separation} m separation inside +/-{config.extent} m"
            )
        attempts += 1
        xy = rng.uniform(lo, hi, size=2)
        if all(np.hypot(*(xy - c[:2])) >= config.min_separation for c in centers):
            centers.append(np.array([xy[0], xy[1], 0.0]))

    objects = []
    for i, center in enumerate(centers):
        w = rng.uniform(1.5, 3.0)
        l = rng.uniform(3.0, 6.0)
        h = rng.uniform(1.0, 2.5)
        center[2] = h / 2.0
        yaw = rng.uniform(-math.pi, math.pi)
        vel = rng.uniform(-10.0, 10.0, size=2)
        class_id = int(rng.integers(0, config.num_classes))
        sig = rng.normal(0.0, 1.0, size=config.feature_dim)
        sig /= np.linalg.norm(sig)
        objects.append(SceneObject(i, center, np.array([w, l, h]), float(yaw),
                                   vel, class_id, sig))
    return Scene(objects, seed, config), build_rig(config)


def project_to_view(p, camera: Camera):
    """Pinhole projection; None when behind the camera or off the image."""
    p_cam = camera.r_wc @ (np.asarray(p, dtype=np.float64) - camera.position)
    depth = p_cam[2]
    if depth <= MIN_CAMERA_DEPTH:
        return None
    u = camera.fx * p_cam[0] / depth + camera.cx
    v = camera.fy * p_cam[1] / depth + camera.cy
    if not (0.0 <= u < camera.width and 0.0 <= v < camera.height):
        return None
    return float(u), float(v), float(depth)


def project_points(points: np.ndarray, camera: Camera):
    """Vectorized projection: (uv (N,2), depth (N,), visible (N,) bool)."""
    p_cam = (np.asarray(points, dtype=np.float64) - camera.position) @ camera.r_wc.T
    depth = p_cam[:, 2]
    safe = np.where(depth > MIN_CAMERA_DEPTH, depth, 1.0)
    u = camera.fx * p_cam[:, 0] / safe + camera.cx
    v = camera.fy * p_cam[:, 1] / safe + camera.cy
    visible = (
        (depth > MIN_CAMERA_DEPTH)
        & (u >= 0.0) & (u < camera.width)
        & (v >= 0.0) & (v < camera.height)
    )
    return np.stack([u, v], axis=1), depth, visible


def simulate_radar_points(scene: Scene, seed: int, config: RadarSimConfig) -> RadarPointCloud:
    """Radar returns near each box's sensor-facing face, plus clutter.

    With pos_noise = 0 the object points lie exactly on the footprint
    perimeter.  Velocities copy the object velocity plus Gaussian noise;
    clutter points are uniform in the extent with object id -1.
    """
    rng = np.random.default_rng([seed, _STREAM_RADAR])
    xyz, vel, rcs, ids = [], [], [], []
    for obj in scene.objects:
        corners = obj.footprint_corners()
        edges = [(corners[i], corners[(i + 1) % 4]) for i in range(4)]
        mids = [0.5 * (a + b) for a, b in edges]
        near = int(np.argmin([np.hypot(*m) for m in mids]))
        a, b = edges[near]
        for _ in range(config.points_per_object):
            t = rng.uniform(0.0, 1.0)
            pt = a + t * (b - a) + rng.normal(0.0, config.pos_noise, size=2)
            xyz.append([pt[0], pt[1], 0.0])
            vel.append(obj.velocity + rng.normal(0.0, config.vel_noise, size=2))
            rcs.append(rng.uniform(0.3, 1.0))
            ids.append(obj.id)
    e = scene.config.extent
    for _ in range(config.clutter_count):
        xyz.append([rng.uniform(-e, e), rng.uniform(-e, e), 0.0])
        vel.append(rng.normal(0.0, 1.0, size=2))
        rcs.append(rng.uniform(0.0, 0.3))
        ids.append(-1)
    if not xyz:
        return RadarPointCloud.empty()
    return RadarPointCloud(np.array(xyz), np.array(vel), np.array(rcs),
                           np.array(ids, dtype=int))


def _splat(data: np.ndarray, fy: float, fx: float, vec: np.ndarray, sigma: float):
    """Add a Gaussian-weighted copy of vec around fractional cell (fy, fx).

    Peak weight is exactly 1 at zero distance, so a splat centered on a cell
    deposits the unmodified vector there.
    """
    h, w = data.shape[:2]
    r = int(math.ceil(3.0 * sigma))
    y0, y1 = max(0, math.floor(fy) - r), min(h - 1, math.ceil(fy) + r)
    x0, x1 = max(0, math.floor(fx) - r), min(w - 1, math.ceil(fx) + r)
    if y1 < y0 or x1 < x0:
        return
    ys = np.arange(y0, y1 + 1)
    xs = np.arange(x0, x1 + 1)
    d2 = (ys[:, None] - fy) ** 2 + (xs[None, :] - fx) ** 2
    weight = np.exp(-d2 / (2.0 * sigma * sigma))
    data[y0:y1 + 1, x0:x1 + 1] += weight[:, :, None] * vec


def render_pv_features(scene: Scene, rig: CameraRig, d: int, noise_sigma: float,
                       seed: int = 0, downsample: int = 16) -> list[PvFeatureMap]:
    """Per-camera PV maps: noise background + signature splats at projected centers."""
    if d != scene.config.feature_dim:
        raise ConfigError("feature dim does not match scene signatures")
    maps = []
    for ci, cam in enumerate(rig.cameras):
        hf = max(1, cam.height // downsample)
        wf = max(1, cam.width // downsample)
        rng = np.random.default_rng([seed, _STREAM_PV_NOISE, ci])
        data = rng.normal(0.0, 1.0, size=(hf, wf, d)) * noise_sigma
        pv = PvFeatureMap(data, downsample)
        for obj in scene.objects:
            hit = project_to_view(obj.center, cam)
            if hit is None:
                continue
            u, v, _ = hit
            fy, fx = pv.pixel_to_frac(u, v)
            _splat(data, float(fy), float(fx), obj.signature, sigma=1.5)
        maps.append(pv)
    return maps


def render_image_bev(scene: Scene, grid_config: GridConfig, d: int,
                     noise_sigma: float, miss_rate: float = 0.0,
                     seed: int = 0) -> FeatureGrid:
    """Image-view BEV grid: signature splats at object BEV centers.

    A seeded fraction `miss_rate` of objects is omitted, emulating camera
    depth-lifting failures.  Miss decisions use the first len(objects) draws
    of stream [seed, 5] so tests can reproduce them independently.
    """
    grid = FeatureGrid.allocate(grid_config, d, "img_bev")
    miss = np.random.default_rng([seed, _STREAM_BEV_MISS]).random(len(scene.objects))
    noise_rng = np.random.default_rng([seed, _STREAM_BEV_NOISE])
    grid.data += noise_rng.normal(0.0, 1.0, size=grid.data.shape) * noise_sigma
    for obj, m in zip(scene.objects, miss):
        if m < miss_rate:
            continue
        fy, fx = grid.frac_coords(float(obj.center[0]), float(obj.center[1]))
        _splat(grid.data, fy, fx, obj.signature, sigma=1.0)
    return grid


def encode_radar_bev(points: RadarPointCloud, grid_config: GridConfig, d: int,
                     seed: int = 0) -> tuple[FeatureGrid, np.ndarray]:
    """Pillar-style radar encoding plus a detection heatmap.

    Per cell, the feature is the mean of a fixed hand-rolled featurization
    (in-cell offsets, velocity, RCS, count) pushed through a seeded fixed
    linear embedding to d channels.  The heatmap is the per-cell point count
    normalized by its max, smoothed with a 3x3 Gaussian and clipped to [0,1].
    Clutter contributes exactly like object points.
    """
    grid = FeatureGrid.allocate(grid_config, d, "rad_bev")
    n = grid.h
    heatmap = np.zeros((n, n))
    embed = np.random.default_rng([seed, _STREAM_RADAR_EMBED]).normal(
        0.0, 1.0 / math.sqrt(6.0), size=(6, d))

    if len(points) > 0:
        cols = np.floor((points.xyz[:, 0] - grid.x_min) / grid.voxel).astype(int)
        rows = np.floor((points.xyz[:, 1] - grid.y_min) / grid.voxel).astype(int)
        inside = (cols >= 0) & (cols < n) & (rows >= 0) & (rows < n)
        cols, rows = cols[inside], rows[inside]
        pts = points.xyz[inside]
        vel = points.velocity[inside]
        rcs = points.rcs[inside]

        flat = rows * n + cols
        counts = np.bincount(flat, minlength=n * n).astype(np.float64)
        cx = grid.x_min + (cols + 0.5) * grid.voxel
        cy = grid.y_min + (rows + 0.5) * grid.voxel
        raw = np.stack([pts[:, 0] - cx, pts[:, 1] - cy, vel[:, 0], vel[:, 1],
                        rcs, np.ones(len(rcs))], axis=1)
        sums = np.zeros((n * n, 6))
        np.add.at(sums, flat, raw)
        occupied = counts > 0
        pooled = np.zeros((n * n, 6))
        pooled[occupied] = sums[occupied] / counts[occupied, None]
        pooled[occupied, 5] = counts[occupied]  # count channel stays a count
        grid.data[:] = (pooled @ embed).reshape(n, n, d)

        cgrid = counts.reshape(n, n)
        if cgrid.max() > 0:
            heatmap = cgrid / cgrid.max()

    heatmap = convolve2d(heatmap, _HEATMAP_KERNEL, mode="same", boundary="fill")
    return grid, np.clip(heatmap, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def scene_to_dict(scene: Scene, rig: CameraRig) -> dict:
    cfg = scene.config
    return {
        "seed": scene.seed,
        "config": {
            "extent": cfg.extent, "num_objects": cfg.num_objects,
            "num_clutter": cfg.num_clutter, "num_classes": cfg.num_classes,
            "num_cameras": cfg.num_cameras, "feature_dim": cfg.feature_dim,
            "min_separation": cfg.min_separation,
            "image_width": cfg.image_width, "image_height": cfg.image_height,
            "focal": cfg.focal, "camera_height": cfg.camera_height,
        },
        "objects": [
            {
                "id": o.id, "center": o.center.tolist(), "size": o.size.tolist(),
                "yaw": o.yaw, "velocity": o.velocity.tolist(),
                "class_id": o.class_id, "signature": o.signature.tolist(),
            }
            for o in scene.objects
        ],
        "rig": [
            {
                "fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy,
                "r_wc": c.r_wc.tolist(), "position": c.position.tolist(),
                "width": c.width, "height": c.height,
            }
            for c in rig.cameras
        ],
    }


def scene_from_dict(doc: dict) -> tuple[Scene, CameraRig]:
    cfg = SceneConfig(**doc["config"])
    objects = [
        SceneObject(o["id"], np.array(o["center"]), np.array(o["size"]),
                    float(o["yaw"]), np.array(o["velocity"]), int(o["class_id"]),
                    np.array(o["signature"]))
        for o in doc["objects"]
    ]
    cams = [
        Camera(c["fx"], c["fy"], c["cx"], c["cy"], np.array(c["r_wc"]),
               np.array(c["position"]), int(c["width"]), int(c["height"]))
        for c in doc["rig"]
    ]
    return Scene(objects, int(doc["seed"]), cfg), CameraRig(cams)


def save_scene(scene: Scene, rig: CameraRig, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(scene_to_dict(scene, rig), fh, sort_keys=True, indent=2)


def load_scene(path) -> tuple[Scene, CameraRig]:
    with open(path, encoding="utf-8") as fh:
        return scene_from_dict(json.load(fh))


def save_grid(grid: FeatureGrid, path):
    """Header JSON + '\\n\\n' + raw little-endian float32 blob."""
    header = {
        "shape": list(grid.data.shape),
        "extent": [grid.x_min, grid.x_max, grid.y_min, grid.y_max],
        "voxel": grid.voxel,
        "kind": grid.kind,
        "dtype": "<f4",
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n\n")
        fh.write(grid.data.astype("<f4").tobytes())


def load_grid(path) -> FeatureGrid:
    blob = open(path, "rb").read()
    sep = blob.index(b"\n\n")
    header = json.loads(blob[:sep].decode("utf-8"))
    shape = tuple(header["shape"])
    data = np.frombuffer(blob[sep + 2:], dtype="<f4").reshape(shape).astype(np.float64)
    x_min, x_max, y_min, y_max = header["extent"]
    return FeatureGrid(data, x_min, x_max, y_min, y_max, header["voxel"],
                       header["kind"])
