"""Reading datasets and writing/reading tracker run directories."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..scene import CameraState, FrameObservation, GaussianCloud
from .generator import frame_dir, write_json
from .tensorfile import read_tensor, write_tensor

_CLOUD_STATIC = ("log_scales", "opacity_logits", "instance_ids", "birth_time")
_CLOUD_HISTORY = ("means", "quats", "colors", "features", "visibility")


class DataError(ValueError):
    pass


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise DataError(f"missing file {path}") from None
    except json.JSONDecodeError as err:
        raise DataError(f"{path}: {err}") from None


def camera_from_dict(data: dict) -> CameraState:
    try:
        cam = CameraState(float(data["fx"]), float(data["fy"]), float(data["cx"]), float(data["cy"]),
                          int(data["width"]), int(data["height"]))
        poses = [np.asarray(p, dtype=np.float64) for p in data.get("poses", [])]
    except (KeyError, TypeError, ValueError) as err:
        raise DataError(f"bad camera description: {err}") from None
    if poses:
        cam.poses = poses
    return cam


def camera_to_dict(camera: CameraState) -> dict:
    return {"width": camera.width, "height": camera.height, "fx": camera.fx, "fy": camera.fy,
            "cx": camera.cx, "cy": camera.cy, "poses": [p.tolist() for p in camera.poses]}


@dataclass
class Dataset:
    root: Path
    camera: CameraState
    num_frames: int

    def frame(self, t: int) -> FrameObservation:
        d = frame_dir(self.root, t)
        try:
            return FrameObservation(
                rgb=read_tensor(d / "rgb.dotf").astype(np.float64),
                depth=read_tensor(d / "depth.dotf").astype(np.float64),
                feature=read_tensor(d / "feat.dotf").astype(np.float64),
                instance=read_tensor(d / "inst.dotf"))
        except FileNotFoundError as err:
            raise DataError(f"missing frame file {err.filename}") from None

    def frames(self):
        for t in range(self.num_frames):
            yield self.frame(t)

    def gt_tracks(self) -> dict:
        return _read_json(self.root / "gt_tracks.json")


def load_dataset(root) -> Dataset:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset directory {root} does not exist")
    camera = camera_from_dict(_read_json(root / "cameras.json"))
    n = 0
    while frame_dir(root, n).is_dir():
        n += 1
    if n == 0:
        raise DataError(f"no frames in {root}")
    return Dataset(root, camera, n)


# --- cloud dump ----------------------------------------------------------------

def _write_split(values: np.ndarray, path: Path) -> None:
    """float64 as a float32 tensor plus a float32 ``.residual`` tensor.

    ``hi + lo`` restores the value to about 1e-14 relative, so equal values
    stay equal and re-rendering keeps the same depth order.
    """
    hi = values.astype(np.float32)
    with np.errstate(invalid="ignore"):
        lo = (values - hi.astype(np.float64)).astype(np.float32)
    write_tensor(hi, path)
    write_tensor(lo, path.with_suffix(".residual.dotf"))


def _read_split(path: Path) -> np.ndarray:
    values = read_tensor(path).astype(np.float64)
    residual = path.with_suffix(".residual.dotf")
    if residual.exists():
        values += read_tensor(residual)
    return values


def save_cloud(cloud: GaussianCloud, out_dir) -> None:
    """Store a cloud as DOTF tensors; histories are padded with NaN before birth."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = len(cloud)
    _write_split(cloud.log_scales, out / "log_scales.dotf")
    _write_split(cloud.opacity_logits, out / "opacity_logits.dotf")
    write_tensor(cloud.instance_ids.astype(np.int32), out / "instance_ids.dotf")
    write_tensor(cloud.birth_time.astype(np.int32), out / "birth_time.dotf")
    for name in _CLOUD_HISTORY:
        hist = getattr(cloud, f"{name}_history")
        if not hist:
            continue
        tail = hist[0].shape[1:]
        block = np.full((len(hist), n) + tail, np.nan)
        for t, arr in enumerate(hist):
            block[t, :len(arr)] = arr
        _write_split(block, out / f"{name}.dotf")


def load_cloud(in_dir) -> GaussianCloud:
    d = Path(in_dir)
    try:
        static = {k: _read_split(d / f"{k}.dotf") for k in _CLOUD_STATIC}
    except FileNotFoundError as err:
        raise DataError(f"missing cloud file {err.filename}") from None
    birth = static["birth_time"].astype(np.int64)
    hist = {}
    for name in _CLOUD_HISTORY:
        path = d / f"{name}.dotf"
        if path.exists():
            block = _read_split(path)
            hist[name] = [block[t, :int(np.searchsorted(birth, t, side="right"))] for t in range(len(block))]
        else:
            hist[name] = []
    return GaussianCloud(
        log_scales=static["log_scales"].astype(np.float64),
        opacity_logits=static["opacity_logits"].astype(np.float64),
        instance_ids=static["instance_ids"].astype(np.int64),
        birth_time=birth,
        means_history=hist["means"], quats_history=hist["quats"],
        colors_history=hist["colors"], features_history=hist["features"],
        visibility_history=hist["visibility"])


def save_run(tracker, out_dir, trajectories: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_cloud(tracker.cloud, out / "cloud")
    write_json(out / "cameras.json", camera_to_dict(tracker.camera))
    write_json(out / "config.json", tracker.config.to_dict())
    if trajectories is not None:
        write_json(out / "trajectories.json", trajectories)
    return out


def load_run(run_dir):
    """``(cloud, camera, config_dict)`` from a tracker run directory."""
    run = Path(run_dir)
    if not run.is_dir():
        raise DataError(f"run directory {run} does not exist")
    cloud = load_cloud(run / "cloud")
    camera = camera_from_dict(_read_json(run / "cameras.json"))
    config = _read_json(run / "config.json")
    return cloud, camera, config
