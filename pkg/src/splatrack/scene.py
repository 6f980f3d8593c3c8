"""Dynamic Gaussian scene, cameras and per-frame observations."""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

FEATURE_DIM = 32
INIT_OPACITY_LOGIT = 0.7


@dataclass
class CameraState:
    """Pinhole intrinsics plus one world-to-camera pose per timestep."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    poses: list = field(default_factory=lambda: [np.eye(4)])

    def pose(self, time: int) -> np.ndarray:
        if not 0 <= time < len(self.poses):
            raise IndexError(f"no camera pose for time {time}")
        return self.poses[time]

    def set_pose(self, time: int, pose: np.ndarray) -> None:
        pose = np.asarray(pose, dtype=np.float64)
        if time == len(self.poses):
            self.poses.append(pose)
        else:
            self.poses[time] = pose

    @property
    def intrinsics(self) -> tuple:
        return (self.fx, self.fy, self.cx, self.cy)

    def project(self, points_cam: np.ndarray) -> np.ndarray:
        z = points_cam[..., 2]
        return np.stack(
            [self.fx * points_cam[..., 0] / z + self.cx,
             self.fy * points_cam[..., 1] / z + self.cy], axis=-1)

    def unproject(self, pixels: np.ndarray, depth: np.ndarray) -> np.ndarray:
        """Camera-frame points for pixel coordinates ``(u, v)`` at z-depth."""
        u, v = pixels[..., 0], pixels[..., 1]
        return np.stack(
            [(u - self.cx) / self.fx * depth, (v - self.cy) / self.fy * depth, depth], axis=-1)

    def copy(self) -> "CameraState":
        return CameraState(self.fx, self.fy, self.cx, self.cy, self.width, self.height,
                           [p.copy() for p in self.poses])


@dataclass
class FrameObservation:
    """One timestep of input maps, all of shape (H, W, ...)."""

    rgb: np.ndarray
    depth: np.ndarray
    feature: np.ndarray
    instance: np.ndarray

    def __post_init__(self):
        h, w = self.depth.shape
        for name in ("rgb", "feature", "instance"):
            if getattr(self, name).shape[:2] != (h, w):
                raise ValueError(f"{name} map shape {getattr(self, name).shape} != depth {(h, w)}")
        self.instance = np.asarray(self.instance, dtype=np.int64)

    @property
    def background(self) -> np.ndarray:
        return self.instance == 0

    @property
    def shape(self) -> tuple:
        return self.depth.shape

    def check_camera(self, camera: CameraState) -> None:
        if self.shape != (camera.height, camera.width):
            raise ValueError(
                f"frame size {self.shape[::-1]} does not match camera {(camera.width, camera.height)}")


@dataclass
class GaussianCloud:
    """Structure-of-arrays Gaussians with a per-timestep history.

    Gaussians are ordered by birth time, so the Gaussians alive at step ``t``
    are always the prefix ``[0, count_at(t))``. Means, rotations, colors and
    features keep one array per timestep; scale, opacity and instance id are
    constant over time.
    """

    log_scales: np.ndarray
    opacity_logits: np.ndarray
    instance_ids: np.ndarray
    birth_time: np.ndarray
    means_history: list = field(default_factory=list)
    quats_history: list = field(default_factory=list)
    colors_history: list = field(default_factory=list)
    features_history: list = field(default_factory=list)
    visibility_history: list = field(default_factory=list)
    rejected: int = field(default=0, repr=False, compare=False)

    @classmethod
    def empty(cls, feature_dim: int = FEATURE_DIM) -> "GaussianCloud":
        return cls(
            log_scales=np.zeros((0, 3)),
            opacity_logits=np.zeros(0),
            instance_ids=np.zeros(0, dtype=np.int64),
            birth_time=np.zeros(0, dtype=np.int64),
            means_history=[np.zeros((0, 3))],
            quats_history=[np.zeros((0, 4))],
            colors_history=[np.zeros((0, 3))],
            features_history=[np.zeros((0, feature_dim))],
        )

    def __len__(self) -> int:
        return len(self.birth_time)

    @property
    def current_time(self) -> int:
        return len(self.means_history) - 1

    @property
    def feature_dim(self) -> int:
        return self.features_history[-1].shape[1]

    def count_at(self, time: int) -> int:
        return int(np.searchsorted(self.birth_time, time, side="right"))

    def alive_at(self, time: int) -> np.ndarray:
        return np.arange(self.count_at(time))

    @property
    def means(self) -> np.ndarray:
        return self.means_history[-1]

    @property
    def quats(self) -> np.ndarray:
        return self.quats_history[-1]

    @property
    def colors(self) -> np.ndarray:
        return self.colors_history[-1]

    @property
    def features(self) -> np.ndarray:
        return self.features_history[-1]

    def params_at(self, time: int) -> dict:
        """Arrays describing the Gaussians alive at ``time`` (views, not copies)."""
        n = self.count_at(time)
        return {
            "means": self.means_history[time],
            "quats": self.quats_history[time],
            "colors": self.colors_history[time],
            "features": self.features_history[time],
            "log_scales": self.log_scales[:n],
            "opacity_logits": self.opacity_logits[:n],
            "instance_ids": self.instance_ids[:n],
        }

    def history_length(self) -> np.ndarray:
        return self.current_time - self.birth_time + 1

    def append_step(self, means, quats, colors=None, features=None) -> None:
        """Start a new timestep holding the given values for every Gaussian."""
        n = len(self)
        if means.shape != (n, 3) or quats.shape != (n, 4):
            raise ValueError("new step must cover every existing Gaussian")
        self.means_history.append(np.array(means, dtype=np.float64))
        self.quats_history.append(np.array(quats, dtype=np.float64))
        self.colors_history.append(np.array(self.colors if colors is None else colors, dtype=np.float64))
        self.features_history.append(
            np.array(self.features if features is None else features, dtype=np.float64))

    def add_gaussians(self, delta: "GaussianCloud") -> None:
        """Append freshly initialized Gaussians to the current timestep."""
        if len(delta) == 0:
            return
        if np.any(delta.birth_time != self.current_time):
            raise ValueError("new Gaussians must be born at the current timestep")
        self.log_scales = np.concatenate([self.log_scales, delta.log_scales])
        self.opacity_logits = np.concatenate([self.opacity_logits, delta.opacity_logits])
        self.instance_ids = np.concatenate([self.instance_ids, delta.instance_ids])
        self.birth_time = np.concatenate([self.birth_time, delta.birth_time])
        for name in ("means_history", "quats_history", "colors_history", "features_history"):
            hist = getattr(self, name)
            hist[-1] = np.concatenate([hist[-1], getattr(delta, name)[-1]])

    def copy(self) -> "GaussianCloud":
        return copy.deepcopy(self)


def pixel_grid(height: int, width: int, stride: int) -> np.ndarray:
    """Integer ``(u, v)`` coordinates of every ``stride``-th pixel, row-major."""
    vs, us = np.meshgrid(np.arange(0, height, stride), np.arange(0, width, stride), indexing="ij")
    return np.stack([us.ravel(), vs.ravel()], axis=-1)


def init_gaussians_from_frame(frame: FrameObservation, camera: CameraState, time: int,
                              stride: int = 2, pixel_mask: np.ndarray | None = None,
                              pose: np.ndarray | None = None) -> GaussianCloud:
    """Lift every ``stride``-th pixel (optionally masked) to a new Gaussian.

    The returned cloud is a delta: a single-step cloud whose Gaussians carry
    ``birth_time == time``. Pixels with non-positive depth are skipped; the
    count is logged and stored on the result as ``rejected``.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    frame.check_camera(camera)
    pose = camera.pose(time) if pose is None else pose
    pix = pixel_grid(camera.height, camera.width, stride)
    if pixel_mask is not None:
        pix = pix[pixel_mask[pix[:, 1], pix[:, 0]]]
    z = frame.depth[pix[:, 1], pix[:, 0]]
    ok = np.isfinite(z) & (z > 0)
    rejected = int(np.count_nonzero(~ok))
    if rejected:
        log.warning("skipped %d pixels with non-positive depth", rejected)
    pix, z = pix[ok], z[ok]

    pts_cam = camera.unproject(pix.astype(np.float64), z)
    r, t = pose[:3, :3], pose[:3, 3]
    means = (pts_cam - t) @ r
    n = len(pix)
    scale = z / (0.5 * (camera.fx + camera.fy))
    return GaussianCloud(
        log_scales=np.repeat(np.log(scale)[:, None], 3, axis=1),
        opacity_logits=np.full(n, INIT_OPACITY_LOGIT),
        instance_ids=frame.instance[pix[:, 1], pix[:, 0]].astype(np.int64),
        birth_time=np.full(n, time, dtype=np.int64),
        means_history=[means],
        quats_history=[np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))],
        colors_history=[frame.rgb[pix[:, 1], pix[:, 0]].astype(np.float64)],
        features_history=[frame.feature[pix[:, 1], pix[:, 0]].astype(np.float64)],
        rejected=rejected,
    )
