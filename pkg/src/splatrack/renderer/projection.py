"""EWA projection of 3D Gaussians to image-plane Gaussians, with its adjoint."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..geometry import quat_to_rotmat, quat_to_rotmat_backward

log = logging.getLogger(__name__)

NEAR_PLANE = 0.01
DILATION = 0.3
SINGULAR_DET = 1e-12


@dataclass
class Projection:
    """Projected Gaussians as parallel arrays (one row per input Gaussian).

    Rows with ``valid == False`` were culled (behind the near plane or with a
    degenerate footprint) and must not be rasterized.
    """

    mean2d: np.ndarray   # (N, 2) px
    cov2d: np.ndarray    # (N, 2, 2) px^2, dilated
    conic: np.ndarray    # (N, 3) upper triangle (a, b, c) of inv(cov2d)
    depth: np.ndarray    # (N,) camera-frame z
    valid: np.ndarray    # (N,) bool
    num_singular: int
    # cached for the backward pass
    points_cam: np.ndarray
    rot: np.ndarray
    scales: np.ndarray
    cov3d: np.ndarray
    jac: np.ndarray
    proj_mat: np.ndarray

    def __len__(self) -> int:
        return len(self.depth)

    @property
    def gaussian_index(self) -> np.ndarray:
        return np.flatnonzero(self.valid)


def project_gaussians(means, quats, log_scales, pose, intrinsics) -> Projection:
    fx, fy, cx, cy = intrinsics
    w_rot, w_t = pose[:3, :3], pose[:3, 3]
    pts = means @ w_rot.T + w_t
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    in_front = z > NEAR_PLANE
    zs = np.where(in_front, z, 1.0)

    rot = quat_to_rotmat(quats) if len(quats) else np.zeros((0, 3, 3))
    scales = np.exp(log_scales)
    m = rot * scales[:, None, :]
    cov3d = m @ np.swapaxes(m, 1, 2)

    n = len(means)
    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = fx / zs
    jac[:, 0, 2] = -fx * x / zs**2
    jac[:, 1, 1] = fy / zs
    jac[:, 1, 2] = -fy * y / zs**2
    proj_mat = jac @ w_rot
    cov_raw = proj_mat @ cov3d @ np.swapaxes(proj_mat, 1, 2)
    det_raw = cov_raw[:, 0, 0] * cov_raw[:, 1, 1] - cov_raw[:, 0, 1] * cov_raw[:, 1, 0]
    singular = in_front & (det_raw <= SINGULAR_DET)
    if np.any(singular):
        log.debug("skipping %d Gaussians with singular footprint", int(singular.sum()))

    cov2d = cov_raw + DILATION * np.eye(2)
    a, b, c = cov2d[:, 0, 0], 0.5 * (cov2d[:, 0, 1] + cov2d[:, 1, 0]), cov2d[:, 1, 1]
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=-1)
    mean2d = np.stack([fx * x / zs + cx, fy * y / zs + cy], axis=-1)
    return Projection(
        mean2d=mean2d, cov2d=cov2d, conic=conic, depth=z, valid=in_front & ~singular,
        num_singular=int(singular.sum()), points_cam=pts, rot=rot, scales=scales,
        cov3d=cov3d, jac=jac, proj_mat=proj_mat)


def _vee_rotation_grad(grad_r: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Tangent gradient for a left perturbation ``R -> exp(w) R``."""
    p = grad_r @ r.T
    return np.array([p[2, 1] - p[1, 2], p[0, 2] - p[2, 0], p[1, 0] - p[0, 1]])


def project_gaussians_backward(proj: Projection, means, quats, pose, intrinsics,
                               grad_mean2d, grad_conic, grad_points_cam):
    """Chain image-plane gradients to means, quaternions, log-scales and pose.

    ``grad_points_cam`` carries any direct dependence on camera-frame points
    (the composited depth channel). Culled rows must carry zero gradient.
    Returns ``(d_means, d_quats, d_log_scales, d_pose)`` with ``d_pose`` a
    6-vector ``(translation, rotation)`` in the camera frame.
    """
    fx, fy, _, _ = intrinsics
    w_rot = pose[:3, :3]
    x, y, z = proj.points_cam.T
    zs = np.where(proj.valid, z, 1.0)

    # conic -> 2D covariance:  dL/dS = -K G K
    ga, gb, gc = grad_conic.T
    a, b, c = proj.conic.T
    k = np.stack([np.stack([a, b], -1), np.stack([b, c], -1)], -2)
    g_k = np.stack([np.stack([ga, 0.5 * gb], -1), np.stack([0.5 * gb, gc], -1)], -2)
    g_cov2d = -k @ g_k @ k

    # cov2d = P S P^T with P = J W
    p = proj.proj_mat
    g_p = 2.0 * g_cov2d @ p @ proj.cov3d
    g_cov3d = np.swapaxes(p, 1, 2) @ g_cov2d @ p
    g_jac = g_p @ w_rot.T
    g_wrot = np.einsum("nij,nik->jk", proj.jac, g_p)

    # cov3d = M M^T with M = R diag(s)
    m = proj.rot * proj.scales[:, None, :]
    g_m = 2.0 * g_cov3d @ m
    g_rot = g_m * proj.scales[:, None, :]
    d_log_scales = np.einsum("nij,nij->nj", g_m, proj.rot) * proj.scales
    d_quats = quat_to_rotmat_backward(quats, g_rot) if len(quats) else np.zeros((0, 4))

    g_pts = np.array(grad_points_cam, dtype=np.float64, copy=True)
    gmx, gmy = grad_mean2d.T
    g_pts[:, 0] += gmx * fx / zs - g_jac[:, 0, 2] * fx / zs**2
    g_pts[:, 1] += gmy * fy / zs - g_jac[:, 1, 2] * fy / zs**2
    g_pts[:, 2] += (-gmx * fx * x / zs**2 - gmy * fy * y / zs**2
                    - g_jac[:, 0, 0] * fx / zs**2 + g_jac[:, 0, 2] * 2 * fx * x / zs**3
                    - g_jac[:, 1, 1] * fy / zs**2 + g_jac[:, 1, 2] * 2 * fy * y / zs**3)
    g_pts[~proj.valid] = 0.0
    d_log_scales[~proj.valid] = 0.0
    d_quats[~proj.valid] = 0.0

    d_means = g_pts @ w_rot
    g_wrot = g_wrot + g_pts.T @ means
    d_pose = np.concatenate([g_pts.sum(axis=0), _vee_rotation_grad(g_wrot, w_rot)])
    return d_means, d_quats, d_log_scales, d_pose
