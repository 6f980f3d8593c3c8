"""Forward/backward rasterization of multi-channel Gaussian attributes."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .projection import Projection, project_gaussians, project_gaussians_backward

TILE = 16


class RenderContractError(RuntimeError):
    """Backward was called with inputs that differ from the forward pass."""


@dataclass(frozen=True)
class RasterSettings:
    """Cutoffs for the tiled rasterizer.

    ``alpha_min`` also sets each Gaussian's footprint: pixels outside the
    radius where ``o * exp(-r^2 / 2) == alpha_min`` cannot contribute.
    ``depth_mode`` is ``"z"`` (camera-frame z) or ``"distance"`` (Euclidean).
    """

    alpha_min: float = 1e-9
    t_min: float = 1e-9
    depth_mode: str = "z"

    @classmethod
    def fast(cls, depth_mode: str = "z") -> "RasterSettings":
        """The customary splatting cutoffs (1/255 and 1e-4)."""
        return cls(alpha_min=1.0 / 255.0, t_min=1e-4, depth_mode=depth_mode)


@dataclass
class RenderedMaps:
    color: np.ndarray
    feature: np.ndarray
    depth: np.ndarray
    background: np.ndarray
    density: np.ndarray
    per_gaussian_visibility: np.ndarray
    ctx: "_RasterContext | None" = field(default=None, repr=False)

    @property
    def shape(self) -> tuple:
        return self.density.shape


@dataclass
class _RasterContext:
    params: dict
    pose: np.ndarray
    intrinsics: tuple
    settings: RasterSettings
    proj: Projection
    attrs: np.ndarray
    opacity: np.ndarray
    tile_ranges: np.ndarray
    tile_list: np.ndarray
    tiles_x: int
    n_contrib: np.ndarray
    fingerprint: str


PARAM_KEYS = ("means", "quats", "log_scales", "opacity_logits", "colors", "features", "instance_ids")


def fingerprint(params: dict, pose: np.ndarray, time: int | None = None) -> str:
    h = hashlib.blake2b(digest_size=16)
    for key in PARAM_KEYS:
        arr = np.ascontiguousarray(params[key])
        h.update(key.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    h.update(np.ascontiguousarray(pose, dtype=np.float64).tobytes())
    h.update(repr(time).encode())
    return h.hexdigest()


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _attribute_table(params, proj: Projection, depth_mode: str) -> np.ndarray:
    pts = proj.points_cam
    depth = pts[:, 2] if depth_mode == "z" else np.linalg.norm(pts, axis=1)
    bg = (np.asarray(params["instance_ids"]) == 0).astype(np.float64)
    return np.ascontiguousarray(np.concatenate(
        [params["colors"], params["features"], depth[:, None], bg[:, None]], axis=1), dtype=np.float64)


def depth_order(depth: np.ndarray) -> np.ndarray:
    """Front-to-back order; equal depths fall back to Gaussian index."""
    return np.lexsort((np.arange(len(depth)), depth))


def _bin_tiles(proj: Projection, opacity, alpha_min, width, height):
    tiles_x = -(-width // TILE)
    tiles_y = -(-height // TILE)
    n_tiles = tiles_x * tiles_y
    usable = proj.valid & (opacity > alpha_min)
    idx = np.flatnonzero(usable)
    if len(idx) == 0:
        return np.zeros((n_tiles, 2), dtype=np.int64), np.zeros(0, dtype=np.int64), tiles_x

    cov = proj.cov2d[idx]
    tr = 0.5 * (cov[:, 0, 0] + cov[:, 1, 1])
    det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] * cov[:, 1, 0]
    lam_max = tr + np.sqrt(np.maximum(tr * tr - det, 0.0))
    radius = np.sqrt(2.0 * np.log(opacity[idx] / alpha_min) * lam_max)
    mx, my = proj.mean2d[idx, 0], proj.mean2d[idx, 1]
    x0 = np.clip(np.floor((np.ceil(mx - radius)) / TILE), 0, tiles_x)
    x1 = np.clip(np.floor(np.floor(mx + radius) / TILE) + 1, 0, tiles_x)
    y0 = np.clip(np.floor((np.ceil(my - radius)) / TILE), 0, tiles_y)
    y1 = np.clip(np.floor(np.floor(my + radius) / TILE) + 1, 0, tiles_y)
    # limit to the image itself
    x1 = np.minimum(x1, np.floor((width - 1) / TILE) + 1)
    y1 = np.minimum(y1, np.floor((height - 1) / TILE) + 1)
    nx = np.maximum(x1 - x0, 0).astype(np.int64)
    ny = np.maximum(y1 - y0, 0).astype(np.int64)
    counts = nx * ny
    keep = counts > 0
    idx, x0, y0, nx, counts = idx[keep], x0[keep].astype(np.int64), y0[keep].astype(np.int64), nx[keep], counts[keep]

    rank = np.empty(len(proj.depth), dtype=np.int64)
    rank[depth_order(proj.depth)] = np.arange(len(proj.depth))

    owner = np.repeat(np.arange(len(idx)), counts)
    local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    tx = x0[owner] + local % nx[owner]
    ty = y0[owner] + local // nx[owner]
    tile_id = ty * tiles_x + tx
    gauss = idx[owner]
    order = np.argsort(tile_id * len(proj.depth) + rank[gauss], kind="stable")
    tile_id, tile_list = tile_id[order], gauss[order]
    starts = np.searchsorted(tile_id, np.arange(n_tiles), side="left")
    ends = np.searchsorted(tile_id, np.arange(n_tiles), side="right")
    return np.stack([starts, ends], axis=1).astype(np.int64), tile_list.astype(np.int64), tiles_x


def render(params: dict, pose: np.ndarray, camera, settings: RasterSettings | None = None,
           time: int | None = None) -> RenderedMaps:
    """Rasterize color, feature, depth, background and density images.

    ``params`` holds the per-Gaussian arrays named in ``PARAM_KEYS``.
    ``camera`` only needs ``intrinsics``, ``width`` and ``height``.
    """
    settings = settings or RasterSettings()
    intrinsics = tuple(float(v) for v in camera.intrinsics)
    width, height = int(camera.width), int(camera.height)
    proj = project_gaussians(params["means"], params["quats"], params["log_scales"], pose, intrinsics)
    opacity = sigmoid(np.asarray(params["opacity_logits"], dtype=np.float64))
    attrs = _attribute_table(params, proj, settings.depth_mode)
    tile_ranges, tile_list, tiles_x = _bin_tiles(proj, opacity, settings.alpha_min, width, height)

    out, density, _, n_contrib, vis = _kernels.rasterize_tiles(
        height, width, TILE, tiles_x, tile_ranges, tile_list,
        np.ascontiguousarray(proj.mean2d), np.ascontiguousarray(proj.conic),
        opacity, attrs, settings.alpha_min, settings.t_min)

    d = params["features"].shape[1]
    ctx = _RasterContext(
        params=params, pose=np.array(pose, dtype=np.float64), intrinsics=intrinsics,
        settings=settings, proj=proj, attrs=attrs, opacity=opacity, tile_ranges=tile_ranges,
        tile_list=tile_list, tiles_x=tiles_x, n_contrib=n_contrib,
        fingerprint=fingerprint(params, pose, time))
    return RenderedMaps(
        color=out[..., :3], feature=out[..., 3:3 + d], depth=out[..., 3 + d],
        background=out[..., 4 + d], density=density, per_gaussian_visibility=vis, ctx=ctx)


def render_backward(maps: RenderedMaps, upstream: dict) -> dict:
    """Gradients of ``sum(upstream[ch] * maps.ch)`` w.r.t. Gaussians and pose.

    ``upstream`` may contain any of ``color``, ``feature``, ``depth``,
    ``background`` and ``density``; missing channels count as zero. The
    background indicator is a frozen attribute and gets no gradient of its own.
    """
    ctx = maps.ctx
    if ctx is None:
        raise RenderContractError("maps carry no forward context")
    params, proj = ctx.params, ctx.proj
    h, w = maps.shape
    n, d = len(proj), params["features"].shape[1]
    grad_out = np.zeros((h, w, 5 + d))
    if "color" in upstream:
        grad_out[..., :3] = upstream["color"]
    if "feature" in upstream:
        grad_out[..., 3:3 + d] = upstream["feature"]
    if "depth" in upstream:
        grad_out[..., 3 + d] = upstream["depth"]
    if "background" in upstream:
        grad_out[..., 4 + d] = upstream["background"]
    grad_density = np.ascontiguousarray(upstream.get("density", np.zeros((h, w))), dtype=np.float64)

    g_mean2d, g_conic, g_opacity, g_attrs = _kernels.rasterize_tiles_backward(
        h, w, TILE, ctx.tiles_x, ctx.tile_ranges, ctx.tile_list,
        np.ascontiguousarray(proj.mean2d), np.ascontiguousarray(proj.conic),
        ctx.opacity, ctx.attrs, ctx.settings.alpha_min, ctx.n_contrib,
        grad_out, grad_density)

    g_pts = np.zeros((n, 3))
    g_depth = g_attrs[:, 3 + d]
    if ctx.settings.depth_mode == "z":
        g_pts[:, 2] = g_depth
    else:
        pts = proj.points_cam
        g_pts = g_depth[:, None] * pts / np.linalg.norm(pts, axis=1, keepdims=True)
    g_pts[~proj.valid] = 0.0

    d_means, d_quats, d_log_scales, d_pose = project_gaussians_backward(
        proj, params["means"], params["quats"], ctx.pose, ctx.intrinsics,
        g_mean2d, g_conic, g_pts)
    o = ctx.opacity
    return {
        "means": d_means,
        "quats": d_quats,
        "log_scales": d_log_scales,
        "opacity_logits": g_opacity * o * (1.0 - o),
        "colors": g_attrs[:, :3],
        "features": g_attrs[:, 3:3 + d],
        "pose": d_pose,
    }


def rasterize(cloud, camera, time: int, settings: RasterSettings | None = None) -> RenderedMaps:
    """Render the Gaussians alive at ``time`` through ``camera.pose(time)``."""
    return render(cloud.params_at(time), camera.pose(time), camera, settings, time)


def rasterize_backward(cloud, camera, time: int, maps: RenderedMaps, upstream: dict) -> dict:
    """Backward pass that first checks ``maps`` came from these exact inputs."""
    if maps.ctx is None or fingerprint(cloud.params_at(time), camera.pose(time), time) != maps.ctx.fingerprint:
        raise RenderContractError("backward inputs differ from the forward pass")
    return render_backward(maps, upstream)


def footprint_mass(maps: RenderedMaps) -> np.ndarray:
    """Alpha each Gaussian would deposit on the image if nothing occluded it."""
    ctx = maps.ctx
    if ctx is None:
        raise RenderContractError("maps carry no forward context")
    h, w = maps.shape
    return _kernels.footprint_mass(
        h, w, TILE, ctx.tiles_x, ctx.tile_ranges, ctx.tile_list,
        np.ascontiguousarray(ctx.proj.mean2d), np.ascontiguousarray(ctx.proj.conic),
        ctx.opacity, ctx.settings.alpha_min)


def normalized_visibility(maps: RenderedMaps) -> np.ndarray:
    """Share of each Gaussian's footprint alpha that reaches the camera.

    Lies in [0, 1]; Gaussians with no footprint on the image get 0.
    """
    mass = footprint_mass(maps)
    out = np.zeros_like(mass)
    np.divide(maps.per_gaussian_visibility, mass, out=out, where=mass > 0)
    return out


def densification_mask(maps: RenderedMaps, threshold: float = 0.5) -> np.ndarray:
    """Pixels whose accumulated opacity is strictly below ``threshold``."""
    return maps.density < threshold
