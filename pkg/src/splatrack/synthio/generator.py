"""Analytic RGB-D-feature-instance sequences with ground-truth point tracks.

Scenes are built from ray-traced primitives (spheres, oriented boxes and
planar grids of small spheres) in front of a textured background plane or
inside a textured box. The world frame is the frame-0 camera frame.
"""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..geometry import make_pose, pose_inverse, so3_exp
from ..scene import FEATURE_DIM
from .tensorfile import atomic_write_bytes, write_tensor
from .threads import worker_count

SHAPES = ("sphere", "box", "blobs")
_FEATURE_TABLE = 512
_HASH = np.array([73856093, 19349663, 83492791], dtype=np.int64)


class SpecError(ValueError):
    pass


@dataclass
class ObjectSpec:
    shape: str
    instance_id: int
    center: list
    radius: float = 0.4
    half_extents: list = field(default_factory=lambda: [0.3, 0.3, 0.3])
    grid: list = field(default_factory=lambda: [3, 3])
    spacing: float = 0.25
    velocity: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    angular_velocity: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    color: list = field(default_factory=lambda: [0.8, 0.3, 0.2])
    patch_size: float = 0.15

    def pose(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        """Object-to-world rotation and translation at frame ``t``."""
        rot = so3_exp(t * np.asarray(self.angular_velocity, dtype=np.float64))
        return rot, np.asarray(self.center, dtype=np.float64) + t * np.asarray(self.velocity, dtype=np.float64)


@dataclass
class BackgroundSpec:
    kind: str = "plane"
    depth: float = 4.0
    half_extents: list = field(default_factory=lambda: [3.0, 3.0, 3.0])
    color: list = field(default_factory=lambda: [0.45, 0.5, 0.55])
    patch_size: float = 0.3


@dataclass
class CameraMotion:
    kind: str = "static"
    velocity: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    center: list = field(default_factory=lambda: [0.0, 0.0, 3.0])
    angular_speed: float = 0.0
    poses: list = field(default_factory=list)

    def pose(self, t: int) -> np.ndarray:
        """World-to-camera transform at frame ``t``."""
        if self.kind == "static":
            return np.eye(4)
        if self.kind == "linear":
            center = t * np.asarray(self.velocity, dtype=np.float64)
            return make_pose(np.eye(3), -center)
        if self.kind == "orbit":
            c = np.asarray(self.center, dtype=np.float64)
            rot = so3_exp(np.array([0.0, t * self.angular_speed, 0.0]))
            cam_to_world = make_pose(rot, c - rot @ c)
            return pose_inverse(cam_to_world)
        if self.kind == "poses":
            return np.asarray(self.poses[t], dtype=np.float64)
        raise SpecError(f"unknown camera motion '{self.kind}'")


@dataclass
class SceneSpec:
    width: int = 64
    height: int = 64
    fx: float = 60.0
    fy: float = 60.0
    cx: float | None = None
    cy: float | None = None
    frames: int = 20
    camera: CameraMotion = field(default_factory=CameraMotion)
    objects: list = field(default_factory=list)
    background: BackgroundSpec = field(default_factory=BackgroundSpec)
    depth_noise: float = 0.0
    feature_noise: float = 0.0
    color_noise: float = 0.0
    texture_frequency: float = 9.0
    tracks_per_object: int = 16
    feature_dim: int = FEATURE_DIM
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.camera, dict):
            self.camera = CameraMotion(**self.camera)
        if isinstance(self.background, dict):
            self.background = BackgroundSpec(**self.background)
        self.objects = [ObjectSpec(**o) if isinstance(o, dict) else o for o in self.objects]
        if self.cx is None:
            self.cx = (self.width - 1) / 2.0
        if self.cy is None:
            self.cy = (self.height - 1) / 2.0

    @classmethod
    def from_dict(cls, data: dict) -> "SceneSpec":
        try:
            return cls(**data)
        except TypeError as err:
            raise SpecError(str(err)) from None

    @classmethod
    def load(cls, path) -> "SceneSpec":
        with open(path) as fh:
            try:
                return cls.from_dict(json.load(fh))
            except json.JSONDecodeError as err:
                raise SpecError(f"{path}: {err}") from None

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def intrinsics(self) -> tuple:
        return (self.fx, self.fy, self.cx, self.cy)

    def validate(self) -> None:
        if self.frames < 2:
            raise SpecError("a sequence needs at least 2 frames")
        if self.width < 1 or self.height < 1 or self.fx <= 0 or self.fy <= 0:
            raise SpecError("image size and focal lengths must be positive")
        if self.background.kind not in ("plane", "box"):
            raise SpecError(f"unknown background '{self.background.kind}'")
        if self.camera.kind == "poses" and len(self.camera.poses) < self.frames:
            raise SpecError("explicit camera motion needs one pose per frame")
        pose0 = self.camera.pose(0)
        if not np.allclose(pose0, np.eye(4)):
            raise SpecError("the frame-0 camera must be the identity")
        ids = [o.instance_id for o in self.objects]
        if len(set(ids)) != len(ids) or any(i <= 0 for i in ids):
            raise SpecError("object instance ids must be unique and positive")
        for o in self.objects:
            if o.shape not in SHAPES:
                raise SpecError(f"unknown shape '{o.shape}'")
            x, y, z = o.center
            u = self.fx * x / z + self.cx if z > 0 else np.nan
            v = self.fy * y / z + self.cy if z > 0 else np.nan
            if not (z > 0 and 0 <= u <= self.width - 1 and 0 <= v <= self.height - 1):
                raise SpecError(f"object {o.instance_id} is outside the camera frustum at frame 0")


# --- ray casting -------------------------------------------------------------

def _sphere_hit(origin, dirs, center, radius):
    oc = origin - center
    b = dirs @ oc
    a = np.einsum("nd,nd->n", dirs, dirs)
    c = oc @ oc - radius * radius
    disc = b * b - a * c
    with np.errstate(invalid="ignore"):
        root = np.sqrt(disc)
    t0 = (-b - root) / a
    t1 = (-b + root) / a
    t = np.where(t0 > 1e-9, t0, t1)
    return np.where((disc >= 0) & (t > 1e-9), t, np.inf)


def _box_hit(origin, dirs, half, inside=False):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        lo = (-half - origin) * inv
        hi = (half - origin) * inv
    near = np.nanmax(np.minimum(lo, hi), axis=1)
    far = np.nanmin(np.maximum(lo, hi), axis=1)
    if inside:
        return np.where(far > 1e-9, far, np.inf)
    ok = (near <= far) & (far > 1e-9)
    return np.where(ok, np.where(near > 1e-9, near, far), np.inf)


def _blob_centers(obj: ObjectSpec) -> np.ndarray:
    nx, ny = obj.grid
    xs = (np.arange(nx) - (nx - 1) / 2.0) * obj.spacing
    ys = (np.arange(ny) - (ny - 1) / 2.0) * obj.spacing
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)], axis=1)


def object_hit(obj: ObjectSpec, t: int, origin_w, dirs_w) -> np.ndarray:
    """Ray parameter of the first hit with ``obj`` at frame ``t`` (inf = miss)."""
    rot, trans = obj.pose(t)
    origin = rot.T @ (origin_w - trans)
    dirs = dirs_w @ rot
    if obj.shape == "sphere":
        return _sphere_hit(origin, dirs, np.zeros(3), obj.radius)
    if obj.shape == "box":
        return _box_hit(origin, dirs, np.asarray(obj.half_extents, dtype=np.float64))
    hits = [_sphere_hit(origin, dirs, c, obj.radius) for c in _blob_centers(obj)]
    return np.min(hits, axis=0)


def background_hit(bg: BackgroundSpec, origin_w, dirs_w) -> np.ndarray:
    if bg.kind == "plane":
        with np.errstate(divide="ignore"):
            t = (bg.depth - origin_w[2]) / dirs_w[:, 2]
        return np.where(t > 1e-9, t, np.inf)
    return _box_hit(origin_w, dirs_w, np.asarray(bg.half_extents, dtype=np.float64), inside=True)


def camera_rays(spec: SceneSpec, pose: np.ndarray, uv: np.ndarray):
    """World-space origin and directions scaled so that ray ``t`` is camera z."""
    d_cam = np.stack([(uv[:, 0] - spec.cx) / spec.fx, (uv[:, 1] - spec.cy) / spec.fy,
                      np.ones(len(uv))], axis=1)
    rot = pose[:3, :3]
    origin = -rot.T @ pose[:3, 3]
    return origin, d_cam @ rot


def cast(spec: SceneSpec, t: int, uv: np.ndarray):
    """Nearest-hit depth and instance id for the rays through ``uv``.

    The depth buffer keeps, per ray, the smallest camera z over every surface.
    """
    origin, dirs = camera_rays(spec, spec.camera.pose(t), uv)
    depth = background_hit(spec.background, origin, dirs)
    inst = np.zeros(len(uv), dtype=np.int64)
    for obj in spec.objects:
        hit = object_hit(obj, t, origin, dirs)
        closer = hit < depth
        depth = np.where(closer, hit, depth)
        inst[closer] = obj.instance_id
    return depth, inst, origin, dirs


# --- appearance ----------------------------------------------------------------

def _unit_rows(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


class Appearance:
    """Texture and feature lookup in each surface's own coordinate frame."""

    def __init__(self, spec: SceneSpec):
        self.spec = spec
        rng = np.random.default_rng([spec.seed, 7])
        d = spec.feature_dim
        ids = [0] + [o.instance_id for o in spec.objects]
        self.base = {i: _unit_rows(rng.normal(size=d)) for i in ids}
        self.table = {i: _unit_rows(rng.normal(size=(_FEATURE_TABLE, d))) for i in ids}
        self.phase = {i: rng.uniform(0, 2 * np.pi, size=(3, 3)) for i in ids}
        self.colors = {0: np.asarray(spec.background.color, dtype=np.float64)}
        self.patch = {0: spec.background.patch_size}
        for o in spec.objects:
            self.colors[o.instance_id] = np.asarray(o.color, dtype=np.float64)
            self.patch[o.instance_id] = o.patch_size

    def color(self, inst: int, local: np.ndarray) -> np.ndarray:
        f = self.spec.texture_frequency
        ph = self.phase[inst]
        wave = np.stack([
            np.sin(f * local[:, 0] + ph[k, 0]) * np.cos(f * local[:, 1] + ph[k, 1])
            + 0.5 * np.sin(f * local[:, 2] + ph[k, 2]) for k in range(3)], axis=1)
        return np.clip(self.colors[inst] + 0.18 * wave, 0.0, 1.0)

    def feature(self, inst: int, local: np.ndarray) -> np.ndarray:
        cell = np.floor(local / self.patch[inst]).astype(np.int64)
        slot = np.bitwise_xor.reduce(cell * _HASH, axis=1) % _FEATURE_TABLE
        return _unit_rows(self.base[inst] + 0.6 * self.table[inst][slot])


def surface_local(spec: SceneSpec, inst: int, t: int, points_w: np.ndarray) -> np.ndarray:
    """World points expressed in the frame that carries their texture."""
    if inst == 0:
        return points_w
    obj = next(o for o in spec.objects if o.instance_id == inst)
    rot, trans = obj.pose(t)
    return (points_w - trans) @ rot


def local_to_world(spec: SceneSpec, inst: int, t: int, local: np.ndarray) -> np.ndarray:
    if inst == 0:
        return local
    obj = next(o for o in spec.objects if o.instance_id == inst)
    rot, trans = obj.pose(t)
    return local @ rot.T + trans


# --- frames ------------------------------------------------------------------------

@dataclass
class SyntheticFrame:
    rgb: np.ndarray
    depth: np.ndarray
    feature: np.ndarray
    instance: np.ndarray


def render_frame(spec: SceneSpec, t: int, appearance: Appearance | None = None) -> SyntheticFrame:
    appearance = appearance or Appearance(spec)
    h, w = spec.height, spec.width
    vs, us = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    uv = np.stack([us.ravel(), vs.ravel()], axis=1)
    depth, inst, origin, dirs = cast(spec, t, uv)
    if not np.all(np.isfinite(depth)):
        raise SpecError(f"frame {t}: some rays hit nothing; enlarge the background")
    points = origin + depth[:, None] * dirs
    rgb = np.zeros((len(uv), 3))
    feat = np.zeros((len(uv), spec.feature_dim))
    for i in np.unique(inst):
        sel = inst == i
        local = surface_local(spec, int(i), t, points[sel])
        rgb[sel] = appearance.color(int(i), local)
        feat[sel] = appearance.feature(int(i), local)

    rng = np.random.default_rng([spec.seed, 11, t])
    if spec.depth_noise:
        depth = depth * (1.0 + spec.depth_noise * rng.normal(size=depth.shape))
        depth = np.maximum(depth, 1e-3)
    if spec.color_noise:
        rgb = np.clip(rgb + spec.color_noise * rng.normal(size=rgb.shape), 0.0, 1.0)
    if spec.feature_noise:
        feat = feat + spec.feature_noise * rng.normal(size=feat.shape)
    return SyntheticFrame(
        rgb=rgb.reshape(h, w, 3).astype(np.float32),
        depth=depth.reshape(h, w).astype(np.float32),
        feature=feat.reshape(h, w, spec.feature_dim).astype(np.float32),
        instance=inst.reshape(h, w).astype(np.int32))


# --- ground-truth tracks -------------------------------------------------------------

def project(spec: SceneSpec, pose: np.ndarray, points_w: np.ndarray):
    pc = points_w @ pose[:3, :3].T + pose[:3, 3]
    uv = np.stack([spec.fx * pc[:, 0] / pc[:, 2] + spec.cx, spec.fy * pc[:, 1] / pc[:, 2] + spec.cy], axis=1)
    return uv, pc[:, 2]


def point_visibility(spec: SceneSpec, t: int, points_w: np.ndarray, rel_tol: float = 1e-6) -> np.ndarray:
    """Depth-buffer test: is each point the nearest surface along its ray?"""
    pose = spec.camera.pose(t)
    uv, z = project(spec, pose, points_w)
    inside = (z > 0) & (uv[:, 0] >= -0.5) & (uv[:, 0] <= spec.width - 0.5) \
        & (uv[:, 1] >= -0.5) & (uv[:, 1] <= spec.height - 0.5)
    depth, _, _, _ = cast(spec, t, uv)
    return inside & (depth >= z * (1.0 - rel_tol))


def sample_tracks(spec: SceneSpec, frame0: SyntheticFrame) -> list[dict]:
    """``tracks_per_object`` visible surface points per object at frame 0."""
    rng = np.random.default_rng([spec.seed, 3])
    tracks = []
    for obj in spec.objects:
        vs, us = np.nonzero(frame0.instance == obj.instance_id)
        if len(us) == 0:
            continue
        pick = rng.choice(len(us), size=min(spec.tracks_per_object, len(us)), replace=False)
        uv = np.stack([us[pick], vs[pick]], axis=1).astype(np.float64)
        depth, inst, origin, dirs = cast(spec, 0, uv)
        surf = origin + depth[:, None] * dirs
        local = surface_local(spec, obj.instance_id, 0, surf)
        for k in range(len(uv)):
            points = []
            for t in range(spec.frames):
                pose = spec.camera.pose(t)
                pw = local_to_world(spec, obj.instance_id, t, local[k:k + 1])
                xy, _ = project(spec, pose, pw)
                vis = bool(point_visibility(spec, t, pw)[0])
                points.append({"t": t, "x": float(xy[0, 0]), "y": float(xy[0, 1]),
                               "X": float(pw[0, 0]), "Y": float(pw[0, 1]), "Z": float(pw[0, 2]),
                               "visible": vis})
            tracks.append({"id": len(tracks), "instance_id": obj.instance_id,
                           "query": {"x": float(uv[k, 0]), "y": float(uv[k, 1]), "t": 0},
                           "gaussian_index": None, "points": points})
    return tracks


# --- dataset on disk -----------------------------------------------------------------

def frame_dir(root, t: int) -> Path:
    return Path(root) / f"frame_{t:04d}"


def cameras_dict(spec: SceneSpec) -> dict:
    return {
        "width": spec.width, "height": spec.height,
        "fx": spec.fx, "fy": spec.fy, "cx": spec.cx, "cy": spec.cy,
        "poses": [spec.camera.pose(t).tolist() for t in range(spec.frames)],
    }


def write_json(path, data) -> None:
    atomic_write_bytes(path, (json.dumps(data, indent=1) + "\n").encode())


def generate_sequence(spec: SceneSpec, out_dir) -> dict:
    """Write every frame, ``cameras.json`` and ``gt_tracks.json`` to ``out_dir``."""
    spec.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    appearance = Appearance(spec)

    def one(t):
        frame = render_frame(spec, t, appearance)
        d = frame_dir(out, t)
        d.mkdir(exist_ok=True)
        write_tensor(frame.rgb, d / "rgb.dotf")
        write_tensor(frame.depth, d / "depth.dotf")
        write_tensor(frame.feature, d / "feat.dotf")
        write_tensor(frame.instance, d / "inst.dotf")
        return frame

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        frames = list(pool.map(one, range(spec.frames)))
    gt = {"frames": spec.frames, "tracks": sample_tracks(spec, frames[0])}
    write_json(out / "cameras.json", cameras_dict(spec))
    write_json(out / "gt_tracks.json", gt)
    write_json(out / "scene.json", spec.to_dict())
    return gt
