"""Online per-frame tracking loop.

Frame 0 lifts the first observation to Gaussians and fits them. Every later
frame runs camera optimization, densification, Gaussian optimization, and
constant-velocity forward propagation of Gaussians and camera.
"""
from __future__ import annotations

import copy
import json
import logging
import time as _time
import warnings
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .geometry import orthonormalize, pose_inverse, quat_conjugate, quat_multiply
from .losses import LossWeights, reconstruction_loss, total_loss
from .neighbors import build_graph_for_cloud
from .optimizer import DEFAULT_LR, AdamState, adam_step, pose_retract
from .renderer import RasterSettings, densification_mask, normalized_visibility, rasterize, render_backward
from .scene import CameraState, FrameObservation, GaussianCloud, init_gaussians_from_frame

log = logging.getLogger(__name__)

GAUSSIAN_GROUPS = ("means", "quats", "colors", "features")


class TrackerWarning(UserWarning):
    pass


class ConfigError(ValueError):
    pass


def config_schema() -> dict:
    text = resources.files("splatrack.synthio").joinpath("config.schema.json").read_text()
    return json.loads(text)


@dataclass
class TrackerConfig:
    camera_iterations: int = 200
    gaussian_iterations: int = 200
    weights: LossWeights = field(default_factory=LossWeights)
    learning_rates: dict = field(default_factory=lambda: dict(DEFAULT_LR))
    k: int = 20
    stride: int = 1
    densify_threshold: float = 0.5
    visibility_threshold: float = 0.5
    visibility_mode: str = "sum"
    presence_threshold: float = 0.99
    fix_camera: bool = False
    knn_select: str = "max_sim"
    instance_guided: bool = True
    pair_weighting: str = "feature"
    signed_iso: bool = False
    depth_mode: str = "z"
    alpha_min: float = 1.0 / 255.0
    t_min: float = 1e-4
    adam_reset_per_frame: bool = True

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.learning_rates = {**DEFAULT_LR, **self.learning_rates}
        if self.camera_iterations <= 0 or self.gaussian_iterations <= 0:
            raise ConfigError("iterations must be > 0")
        for name in ("densify_threshold", "visibility_threshold", "presence_threshold"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.k < 1 or self.stride < 1:
            raise ConfigError("k and stride must be >= 1")
        if self.knn_select not in ("max_sim", "min_sim"):
            raise ConfigError(f"unknown knn_select '{self.knn_select}'")
        if self.pair_weighting not in ("feature", "distance", "uniform"):
            raise ConfigError(f"unknown pair_weighting '{self.pair_weighting}'")
        if self.visibility_mode not in ("sum", "normalized"):
            raise ConfigError(f"unknown visibility_mode '{self.visibility_mode}'")
        if self.depth_mode not in ("z", "distance"):
            raise ConfigError(f"unknown depth_mode '{self.depth_mode}'")

    @property
    def raster(self) -> RasterSettings:
        return RasterSettings(self.alpha_min, self.t_min, self.depth_mode)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["weights"] = asdict(self.weights)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrackerConfig":
        try:
            jsonschema.validate(data, config_schema())
        except jsonschema.ValidationError as err:
            where = "/".join(str(p) for p in err.absolute_path) or "<root>"
            raise ConfigError(f"invalid config at {where}: {err.message}") from None
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})

    @classmethod
    def load(cls, path) -> "TrackerConfig":
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as err:
                raise ConfigError(f"{path}: {err}") from None
        return cls.from_dict(data)


@dataclass
class _Snapshot:
    cloud: GaussianCloud
    camera: CameraState
    graph: object
    pending: tuple | None
    next_time: int
    n_reports: int
    adam_states: dict


class Tracker:
    """Holds the cloud, camera track and neighbour graph of one sequence."""

    def __init__(self, cloud: GaussianCloud, camera: CameraState, config: TrackerConfig,
                 report_path=None):
        self.cloud = cloud
        self.camera = camera
        self.config = config
        self.graph = None
        self.reports: list[dict] = []
        self.report_path = Path(report_path) if report_path else None
        self.next_time = 0
        self._pending = None
        self._adam_states: dict[str, AdamState] = {}

    # --- setup ----------------------------------------------------------

    @classmethod
    def initialize(cls, frame0: FrameObservation, intrinsics, config: TrackerConfig | None = None,
                   report_path=None) -> "Tracker":
        """Lift ``frame0`` to Gaussians with the camera at the identity.

        ``intrinsics`` is either a :class:`CameraState` (only its intrinsics
        and size are used) or ``(fx, fy, cx, cy, width, height)``.
        """
        config = config or TrackerConfig()
        if isinstance(intrinsics, CameraState):
            fx, fy, cx, cy = intrinsics.intrinsics
            w, h = intrinsics.width, intrinsics.height
        else:
            fx, fy, cx, cy, w, h = intrinsics
        camera = CameraState(fx, fy, cx, cy, int(w), int(h))
        frame0.check_camera(camera)
        cloud = GaussianCloud.empty(frame0.feature.shape[2])
        cloud.add_gaussians(init_gaussians_from_frame(frame0, camera, 0, config.stride))
        tracker = cls(cloud, camera, config, report_path)
        tracker._rebuild_graph(0)
        return tracker

    def _rebuild_graph(self, time: int) -> None:
        c = self.config
        self.graph = build_graph_for_cloud(self.cloud, time, c.k, c.knn_select, c.instance_guided)

    def _adam(self, phase: str) -> AdamState:
        """Fresh moments per frame, or one persistent state per phase."""
        if self.config.adam_reset_per_frame:
            return AdamState(lr=dict(self.config.learning_rates))
        if phase not in self._adam_states:
            self._adam_states[phase] = AdamState(lr=dict(self.config.learning_rates))
        return self._adam_states[phase]

    def _render(self, time: int):
        return rasterize(self.cloud, self.camera, time, self.config.raster)

    # --- phases ----------------------------------------------------------

    def _camera_mask(self, maps, frame: FrameObservation) -> np.ndarray:
        """Pixels already explained by the map and showing background in both
        the observation and the rendering."""
        thr = self.config.presence_threshold
        return (maps.density > thr) & (maps.background > thr) & frame.background

    def optimize_camera(self, frame: FrameObservation, time: int) -> dict:
        """Refine ``pose(time)`` against background pixels already explained.

        Gaussians stay fixed. The best pose seen (lowest loss) is kept.
        """
        info = {"skipped": False, "initial_loss": None, "final_loss": None, "iterations": 0}
        if time < 1:
            raise ValueError("camera optimization needs time >= 1")
        if self.config.fix_camera:
            info["skipped"] = True
            return info
        weights = self.config.weights
        state = self._adam("camera")
        step = {"pose": np.zeros(6)}
        best_loss, best_pose = np.inf, self.camera.pose(time)
        for it in range(self.config.camera_iterations):
            maps = self._render(time)
            mask = self._camera_mask(maps, frame)
            if not mask.any():
                if it == 0:
                    msg = f"frame {time}: no observed background pixels, camera left at propagated pose"
                    log.warning(msg)
                    warnings.warn(msg, TrackerWarning, stacklevel=2)
                    info["skipped"] = True
                    return info
                break
            value, _, upstream = reconstruction_loss(maps, frame, mask, weights)
            if info["initial_loss"] is None:
                info["initial_loss"] = value
            if value < best_loss:
                best_loss, best_pose = value, self.camera.pose(time).copy()
            grad = render_backward(maps, upstream)["pose"]
            adam_step(step, {"pose": grad}, state)
            self.camera.set_pose(time, pose_retract(self.camera.pose(time), step["pose"]))
            step["pose"][:] = 0.0
            info["iterations"] = it + 1
        maps = self._render(time)
        mask = self._camera_mask(maps, frame)
        if mask.any():
            value = reconstruction_loss(maps, frame, mask, weights)[0]
            if value < best_loss:
                best_loss, best_pose = value, self.camera.pose(time).copy()
        self.camera.set_pose(time, best_pose)
        info["final_loss"] = float(best_loss)
        return info

    def densify(self, frame: FrameObservation, time: int) -> GaussianCloud:
        """Add Gaussians where the rendered density is below the threshold."""
        maps = self._render(time)
        mask = densification_mask(maps, self.config.densify_threshold)
        delta = init_gaussians_from_frame(frame, self.camera, time, self.config.stride, pixel_mask=mask)
        self.cloud.add_gaussians(delta)
        self._rebuild_graph(time)
        return delta

    def optimize_gaussians(self, frame: FrameObservation, time: int) -> dict:
        """Fit means, rotations, colors and features at ``time`` (pose fixed)."""
        c = self.config
        state = self._adam("gaussians")
        params = self.cloud.params_at(time)
        mask = np.ones(frame.shape, dtype=bool)
        trace = []
        for _ in range(c.gaussian_iterations):
            maps = self._render(time)
            breakdown, grads = total_loss(self.cloud, self.graph, maps, frame, mask, c.weights, time,
                                          c.pair_weighting, c.signed_iso)
            trace.append(breakdown.total)
            adam_step(params, {k: grads[k] for k in GAUSSIAN_GROUPS}, state)
        maps = self._render(time)
        breakdown, _ = total_loss(self.cloud, self.graph, maps, frame, mask, c.weights, time,
                                  c.pair_weighting, c.signed_iso)
        trace.append(breakdown.total)
        return {"breakdown": breakdown, "trace": trace, "maps": maps}

    def propagate_gaussians(self, time: int) -> tuple[np.ndarray, np.ndarray]:
        """Constant-velocity guess of means and rotations at ``time + 1``.

        Means move by the softmax-weighted velocity of their neighbours (self
        excluded); neighbours without a previous step are ignored and the
        weights renormalized. Rotations repeat their last relative rotation.
        """
        cloud = self.cloud
        means = cloud.means_history[time].copy()
        quats = cloud.quats_history[time].copy()
        if time < 1:
            return means, quats
        n_prev = cloud.count_at(time - 1)
        vel = means[:n_prev] - cloud.means_history[time - 1]

        nbr = self.graph.neighbor_indices
        usable = (nbr >= 0) & (nbr < n_prev)
        w = np.where(usable, self.graph.softmax_weights, 0.0)
        total = w.sum(axis=1, keepdims=True)
        w = np.divide(w, total, out=np.zeros_like(w), where=total > 0)
        safe = np.where(usable, nbr, 0)
        means += np.einsum("nk,nkd->nd", w, vel[safe])

        q_now = quats[:n_prev] / np.linalg.norm(quats[:n_prev], axis=1, keepdims=True)
        q_prev = cloud.quats_history[time - 1]
        q_prev = q_prev / np.linalg.norm(q_prev, axis=1, keepdims=True)
        rel = quat_multiply(q_now, quat_conjugate(q_prev))
        nxt = quat_multiply(rel, q_now)
        quats[:n_prev] = nxt / np.linalg.norm(nxt, axis=1, keepdims=True)
        return means, quats

    def propagate_camera(self, time: int) -> np.ndarray:
        """``pose(t) pose(t-1)^-1 pose(t)``; a plain copy at ``time == 0``."""
        now = self.camera.pose(time)
        if time < 1:
            return now.copy()
        nxt = now @ pose_inverse(self.camera.pose(time - 1)) @ now
        nxt[:3, :3] = orthonormalize(nxt[:3, :3])
        return nxt

    # --- frame loop --------------------------------------------------------

    def _snapshot(self) -> _Snapshot:
        pending = None
        if self._pending is not None:
            pending = tuple(np.array(a, copy=True) for a in self._pending)
        return _Snapshot(self.cloud.copy(), self.camera.copy(), self.graph, pending,
                         self.next_time, len(self.reports), copy.deepcopy(self._adam_states))

    def _restore(self, snap: _Snapshot) -> None:
        self.cloud, self.camera, self.graph = snap.cloud, snap.camera, snap.graph
        self._pending, self.next_time = snap.pending, snap.next_time
        self._adam_states = snap.adam_states
        del self.reports[snap.n_reports:]

    def _visibility(self, maps) -> np.ndarray:
        if self.config.visibility_mode == "normalized":
            return normalized_visibility(maps)
        return maps.per_gaussian_visibility.copy()

    def process_frame(self, frame: FrameObservation, time: int) -> dict:
        """Run every phase for one frame; on failure the tracker is rolled back."""
        frame.check_camera(self.camera)
        if frame.feature.shape[2] != self.cloud.feature_dim:
            raise ValueError(f"feature dim {frame.feature.shape[2]} != cloud {self.cloud.feature_dim}")
        if time != self.next_time:
            raise ValueError(f"expected frame {self.next_time}, got {time}")
        snap = self._snapshot()
        try:
            report = self._process(frame, time)
        except BaseException:
            self._restore(snap)
            raise
        self.reports.append(report)
        if self.report_path is not None:
            with open(self.report_path, "a") as fh:
                fh.write(json.dumps(report) + "\n")
        return report

    def _process(self, frame: FrameObservation, time: int) -> dict:
        started = _time.perf_counter()
        camera_info = {"skipped": True, "initial_loss": None, "final_loss": None, "iterations": 0}
        added = 0
        if time > 0:
            means, quats, pose = self._pending
            self.cloud.append_step(means, quats)
            self.camera.set_pose(time, pose)
            self._pending = None
            camera_info = self.optimize_camera(frame, time)
            added = len(self.densify(frame, time))

        fit = self.optimize_gaussians(frame, time)
        self.cloud.visibility_history.append(self._visibility(fit["maps"]))
        self._rebuild_graph(time)

        means, quats = self.propagate_gaussians(time)
        self._pending = (means, quats, self.propagate_camera(time))
        self.next_time = time + 1

        trace = fit["trace"]
        steps = np.diff(trace)
        return {
            "time": time,
            "num_gaussians": len(self.cloud),
            "added": added,
            "pose": self.camera.pose(time).tolist(),
            "camera": camera_info,
            "losses": fit["breakdown"].as_dict(),
            "initial_total": trace[0],
            "decreasing_fraction": float(np.mean(steps <= 0)) if len(steps) else 1.0,
            "seconds": _time.perf_counter() - started,
        }


def run_sequence(frames, intrinsics, config: TrackerConfig | None = None, report_path=None,
                 progress=None) -> Tracker:
    """Initialize on the first frame and process every frame in order."""
    frames = iter(frames)
    first = next(frames)
    tracker = Tracker.initialize(first, intrinsics, config, report_path)
    tracker.process_frame(first, 0)
    if progress:
        progress(tracker.reports[-1])
    for t, frame in enumerate(frames, start=1):
        tracker.process_frame(frame, t)
        if progress:
            progress(tracker.reports[-1])
    return tracker
