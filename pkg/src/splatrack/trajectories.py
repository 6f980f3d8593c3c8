"""Point trajectories read off the reconstructed Gaussians."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .renderer import RasterSettings, depth_order, project_gaussians, sigmoid
from .scene import CameraState, GaussianCloud


class QueryError(ValueError):
    pass


@dataclass
class TrackResult:
    """One query's track; entries before ``valid_from`` are NaN / not visible."""

    query: tuple
    gaussian_index: int | None
    xy2d: np.ndarray
    xyz3d: np.ndarray
    visible: np.ndarray
    valid_from: int

    @property
    def valid(self) -> np.ndarray:
        return np.arange(len(self.visible)) >= self.valid_from

    def to_dict(self) -> dict:
        x, y, t = self.query
        points = []
        for tau in range(self.valid_from, len(self.visible)):
            (u, v), (px, py, pz) = self.xy2d[tau], self.xyz3d[tau]
            points.append({"t": tau, "x": float(u), "y": float(v), "X": float(px), "Y": float(py),
                           "Z": float(pz), "visible": bool(self.visible[tau])})
        return {"query": {"x": float(x), "y": float(y), "t": int(t)},
                "gaussian_index": None if self.gaussian_index is None else int(self.gaussian_index),
                "valid_from": int(self.valid_from), "points": points}


def project_points(camera: CameraState, time: int, points: np.ndarray) -> np.ndarray:
    pose = camera.pose(time)
    return camera.project(points @ pose[:3, :3].T + pose[:3, 3])


def visible_mask(cloud: GaussianCloud, time: int, threshold: float = 0.5) -> np.ndarray:
    if time >= len(cloud.visibility_history):
        raise QueryError(f"no visibility stored for time {time}")
    return cloud.visibility_history[time] > threshold


def select_gaussian(query_xy, time: int, cloud: GaussianCloud, camera: CameraState,
                    threshold: float = 0.5) -> int:
    """Visible Gaussian whose projection is nearest to the query pixel.

    Ties go to the lowest index.
    """
    vis = np.flatnonzero(visible_mask(cloud, time, threshold))
    if len(vis) == 0:
        raise QueryError("query unservable: no visible Gaussian at that time")
    xy = project_points(camera, time, cloud.means_history[time][vis])
    d2 = np.sum((xy - np.asarray(query_xy, dtype=np.float64)) ** 2, axis=1)
    return int(vis[np.argmin(d2)])


def extract_trajectory(cloud: GaussianCloud, camera: CameraState, index: int, query_time: int = 0,
                       direction: str = "both", query_xy=(np.nan, np.nan),
                       threshold: float = 0.5) -> TrackResult:
    """Follow one Gaussian through its stored history.

    ``direction="forward"`` leaves frames before ``query_time`` invalid;
    ``"both"`` reads the history back to the Gaussian's birth.
    """
    if direction not in ("forward", "both"):
        raise ValueError(f"unknown direction '{direction}'")
    if not 0 <= index < len(cloud):
        raise IndexError(f"no Gaussian {index}")
    steps = cloud.current_time + 1
    birth = int(cloud.birth_time[index])
    start = birth if direction == "both" else max(birth, query_time)
    xyz = np.full((steps, 3), np.nan)
    xy = np.full((steps, 2), np.nan)
    vis = np.zeros(steps, dtype=bool)
    for t in range(start, steps):
        xyz[t] = cloud.means_history[t][index]
        xy[t] = project_points(camera, t, xyz[t][None])[0]
        if t < len(cloud.visibility_history):
            vis[t] = cloud.visibility_history[t][index] > threshold
    return TrackResult((*query_xy, query_time), index, xy, xyz, vis, start)


def pixel_contributors(cloud: GaussianCloud, camera: CameraState, time: int, pixel,
                       settings: RasterSettings | None = None):
    """Gaussians blended at ``pixel`` with their weights ``T_i * alpha_i``.

    Uses the same cutoffs and depth order as the tile rasterizer.
    """
    settings = settings or RasterSettings()
    p = cloud.params_at(time)
    proj = project_gaussians(p["means"], p["quats"], p["log_scales"], camera.pose(time), camera.intrinsics)
    opacity = sigmoid(p["opacity_logits"])
    dx = pixel[0] - proj.mean2d[:, 0]
    dy = pixel[1] - proj.mean2d[:, 1]
    a, b, c = proj.conic[:, 0], proj.conic[:, 1], proj.conic[:, 2]
    with np.errstate(over="ignore", invalid="ignore"):
        alpha = opacity * np.exp(-0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy)
    alpha = np.where(proj.valid, alpha, 0.0)
    idx, weights = [], []
    trans = 1.0
    for g in depth_order(np.where(proj.valid, proj.depth, np.inf)):
        if not proj.valid[g] or alpha[g] < settings.alpha_min:
            continue
        idx.append(int(g))
        weights.append(trans * alpha[g])
        trans *= 1.0 - alpha[g]
        if trans < settings.t_min:
            break
    return np.array(idx, dtype=np.int64), np.array(weights)


def alpha_composed_trajectory(cloud: GaussianCloud, camera: CameraState, query_xy, query_time: int,
                              settings: RasterSettings | None = None) -> TrackResult:
    """Track the blend ``sum_i T_i alpha_i mu_i`` of the query pixel's contributors.

    Only Gaussians that exist at every frame of the result are blended, so
    the result starts at the latest birth among the contributors.
    """
    idx, w = pixel_contributors(cloud, camera, query_time, query_xy, settings)
    if len(idx) == 0:
        raise QueryError("query unservable: no Gaussian contributes to that pixel")
    steps = cloud.current_time + 1
    start = int(cloud.birth_time[idx].max())
    xyz = np.full((steps, 3), np.nan)
    xy = np.full((steps, 2), np.nan)
    vis = np.zeros(steps, dtype=bool)
    for t in range(start, steps):
        xyz[t] = w @ cloud.means_history[t][idx] / w.sum()
        xy[t] = project_points(camera, t, xyz[t][None])[0]
        if t < len(cloud.visibility_history):
            vis[t] = float(w @ (cloud.visibility_history[t][idx] > 0.5)) / w.sum() > 0.5
    return TrackResult((*query_xy, query_time), None, xy, xyz, vis, start)


def track_queries(cloud: GaussianCloud, camera: CameraState, queries, mode: str = "gaussian",
                  threshold: float = 0.5) -> list[TrackResult]:
    """Serve ``(x, y, t)`` queries; unservable ones are skipped with ``None``."""
    out = []
    for x, y, t in queries:
        try:
            if mode == "gaussian":
                g = select_gaussian((x, y), int(t), cloud, camera, threshold)
                out.append(extract_trajectory(cloud, camera, g, int(t), "both", (x, y), threshold))
            elif mode == "alpha":
                out.append(alpha_composed_trajectory(cloud, camera, (x, y), int(t)))
            else:
                raise ValueError(f"unknown trajectory mode '{mode}'")
        except QueryError:
            out.append(None)
    return out


def tracks_to_json(results) -> dict:
    return {"tracks": [r.to_dict() if r is not None else None for r in results]}
