"""Reconstruction losses, 3D motion regularizers and temporal smoothness.

Every loss returns its value together with analytic gradients. Pairwise
regularizers share the aggregation ``1/(k|G|) * sum_i sum_{j in N_i} w_ij L_ij``
where ``|G|`` counts the Gaussians that exist at both ``t-1`` and ``t``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .geometry import normalize_backward, quat_conjugate, quat_multiply, quat_multiply_backward, quat_to_rotmat, quat_to_rotmat_backward
from .renderer import render_backward


class EmptySupervisionError(ValueError):
    def __init__(self):
        super().__init__("no supervised pixels")


@dataclass
class LossWeights:
    image: float = 1.0
    feature: float = 16.0
    depth: float = 0.1
    background: float = 3.0
    rigid: float = 128.0
    iso: float = 16.0
    rot: float = 16.0
    smooth: float = 1.0
    smooth_feature: float = 20.0
    smooth_color: float = 20.0
    smooth_bg_mean: float = 5.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight '{f.name}' must be >= 0")

    @classmethod
    def zeros(cls) -> "LossWeights":
        return cls(**{f.name: 0.0 for f in fields(cls)})


@dataclass
class LossBreakdown:
    """Unweighted reconstruction/3D terms; smoothness terms carry their inner weights."""

    image: float = 0.0
    feature: float = 0.0
    depth: float = 0.0
    background: float = 0.0
    rigid: float = 0.0
    rot: float = 0.0
    iso: float = 0.0
    smooth_feature: float = 0.0
    smooth_color: float = 0.0
    smooth_bg_mean: float = 0.0
    total: float = 0.0

    def weighted_total(self, w: LossWeights) -> float:
        return (w.image * self.image + w.feature * self.feature + w.depth * self.depth
                + w.background * self.background + w.rigid * self.rigid + w.rot * self.rot
                + w.iso * self.iso
                + w.smooth * (self.smooth_feature + self.smooth_color + self.smooth_bg_mean))

    def as_dict(self) -> dict:
        return asdict(self)


# --- reconstruction -------------------------------------------------------

def reconstruction_loss(rendered, frame, pixel_mask: np.ndarray, weights: LossWeights):
    """Masked L1 (color, depth, background) and squared-L2 (feature) losses.

    Returns ``(weighted_value, terms, upstream)`` where ``upstream`` holds the
    gradient of the weighted value w.r.t. each rendered channel.
    """
    mask = np.asarray(pixel_mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise EmptySupervisionError()
    m = mask.astype(np.float64)

    d_color = rendered.color - frame.rgb
    d_depth = rendered.depth - frame.depth
    d_bg = rendered.background - frame.background.astype(np.float64)
    d_feat = rendered.feature - frame.feature

    terms = {
        "image": float(np.sum(np.abs(d_color) * m[..., None]) / (3 * count)),
        "depth": float(np.sum(np.abs(d_depth) * m) / count),
        "background": float(np.sum(np.abs(d_bg) * m) / count),
        "feature": float(np.sum(d_feat**2 * m[..., None]) / count),
    }
    upstream = {
        "color": weights.image * np.sign(d_color) * m[..., None] / (3 * count),
        "depth": weights.depth * np.sign(d_depth) * m / count,
        "background": weights.background * np.sign(d_bg) * m / count,
        "feature": weights.feature * 2.0 * d_feat * m[..., None] / count,
    }
    value = (weights.image * terms["image"] + weights.feature * terms["feature"]
             + weights.depth * terms["depth"] + weights.background * terms["background"])
    return value, terms, upstream


# --- pairwise 3D regularizers ----------------------------------------------

def _pairs(cloud, graph, time: int, weighting: str):
    """Edges whose endpoints both exist at ``time - 1``, with their weights."""
    if time < 1:
        raise ValueError("3D regularizers need time >= 1")
    n_prev = cloud.count_at(time - 1)
    i, j, _ = graph.edges()
    keep = (i < n_prev) & (j < n_prev)
    i, j = i[keep], j[keep]
    if weighting == "feature":
        # dissimilar pairs are ignored rather than rewarded
        w = np.maximum(graph.weights[graph.mask], 0.0)[keep]
    elif weighting == "distance":
        w = graph.distances[graph.mask][keep]
    elif weighting == "uniform":
        w = np.ones(len(i))
    else:
        raise ValueError(f"unknown pair weighting '{weighting}'")
    norm = 1.0 / (graph.k * n_prev) if n_prev else 0.0
    return i, j, w * norm, n_prev


def _scatter(index: np.ndarray, values: np.ndarray, n: int) -> np.ndarray:
    """Row sums of ``values`` grouped by ``index`` (a fast ``np.add.at``)."""
    flat = values.reshape(len(values), -1)
    out = np.stack([np.bincount(index, flat[:, c], minlength=n) for c in range(flat.shape[1])], axis=1)
    return out.reshape((n,) + values.shape[1:])


def _safe_unit(v):
    length = np.linalg.norm(v, axis=-1)
    unit = np.divide(v, length[:, None], out=np.zeros_like(v), where=length[:, None] > 0)
    return length, unit


def rigidity_loss(cloud, graph, time: int, weighting: str = "feature"):
    """Local rigidity; gradients flow to ``means`` and ``quats`` at ``time``."""
    p_now = cloud.params_at(time)
    n = len(p_now["means"])
    i, j, w, n_prev = _pairs(cloud, graph, time, weighting)
    g_means = np.zeros((n, 3))
    g_quats = np.zeros((n, 4))
    if len(i) == 0:
        return 0.0, {"means": g_means, "quats": g_quats}

    mu_prev = cloud.means_history[time - 1]
    mu = p_now["means"]
    q_prev = cloud.quats_history[time - 1][:n_prev]
    q_now = p_now["quats"][:n_prev]
    r_prev = quat_to_rotmat(q_prev)
    r_now = quat_to_rotmat(q_now)
    d_rot = r_prev @ np.swapaxes(r_now, 1, 2)

    offset_now = mu[j] - mu[i]
    err = (mu_prev[j] - mu_prev[i]) - np.einsum("nab,nb->na", d_rot[i], offset_now)
    length, unit = _safe_unit(err)
    value = float(np.sum(w * length))

    g_err = w[:, None] * unit
    g_off = -np.einsum("nab,na->nb", d_rot[i], g_err)
    g_means += _scatter(j, g_off, n) - _scatter(i, g_off, n)
    g_drot = _scatter(i, -g_err[:, :, None] * offset_now[:, None, :], n_prev)
    # dR_i = R_prev R_now^T  =>  dL/dR_now = dL/d(dR)^T R_prev
    g_rnow = np.swapaxes(g_drot, 1, 2) @ r_prev
    g_quats[:n_prev] = quat_to_rotmat_backward(q_now, g_rnow)
    return value, {"means": g_means, "quats": g_quats}


def relative_rotation(q_now, q_prev):
    """``q_now * q_prev^-1`` for normalized quaternions."""
    qn = q_now / np.linalg.norm(q_now, axis=-1, keepdims=True)
    qp = q_prev / np.linalg.norm(q_prev, axis=-1, keepdims=True)
    return quat_multiply(qn, quat_conjugate(qp))


def rotation_loss(cloud, graph, time: int, weighting: str = "feature"):
    """Neighbours should share the same relative rotation since ``time - 1``."""
    p_now = cloud.params_at(time)
    n = len(p_now["means"])
    i, j, w, n_prev = _pairs(cloud, graph, time, weighting)
    g_quats = np.zeros((n, 4))
    if len(i) == 0:
        return 0.0, {"quats": g_quats}

    q_now = p_now["quats"][:n_prev]
    q_prev_n = cloud.quats_history[time - 1][:n_prev]
    q_prev_n = q_prev_n / np.linalg.norm(q_prev_n, axis=-1, keepdims=True)
    rel = relative_rotation(q_now, q_prev_n)
    diff = rel[j] - rel[i]
    length, unit = _safe_unit(diff)
    value = float(np.sum(w * length))

    gd = w[:, None] * unit
    g_rel = _scatter(j, gd, n_prev) - _scatter(i, gd, n_prev)
    qn = q_now / np.linalg.norm(q_now, axis=-1, keepdims=True)
    g_qn, _ = quat_multiply_backward(qn, quat_conjugate(q_prev_n), g_rel)
    g_quats[:n_prev] = normalize_backward(q_now, g_qn)
    return value, {"quats": g_quats}


def isometry_loss(cloud, graph, time: int, weighting: str = "feature", signed: bool = False):
    """Keep neighbour distances at their value from the pair's joint birth time."""
    p_now = cloud.params_at(time)
    n = len(p_now["means"])
    i, j, w, _ = _pairs(cloud, graph, time, weighting)
    g_means = np.zeros((n, 3))
    if len(i) == 0:
        return 0.0, {"means": g_means}

    ref_time = np.maximum(cloud.birth_time[i], cloud.birth_time[j])
    ref = np.empty(len(i))
    for t0 in np.unique(ref_time):
        sel = ref_time == t0
        hist = cloud.means_history[t0]
        ref[sel] = np.linalg.norm(hist[j[sel]] - hist[i[sel]], axis=1)

    mu = p_now["means"]
    dist, unit = _safe_unit(mu[j] - mu[i])
    gap = ref - dist
    if signed:
        value = float(np.sum(w * gap))
        d_dist = -w
    else:
        value = float(np.sum(w * np.abs(gap)))
        d_dist = -w * np.sign(gap)
    g = d_dist[:, None] * unit
    g_means += _scatter(j, g, n) - _scatter(i, g, n)
    return value, {"means": g_means}


# --- temporal smoothness -----------------------------------------------------

def smoothness_loss(cloud, time: int, weights: LossWeights):
    """L1 pull of features, colors and background means toward ``time - 1``.

    Returns ``(value, grads, terms)``; each term already includes its inner
    weight and ``value`` is their sum.
    """
    if time < 1:
        raise ValueError("smoothness needs time >= 1")
    p_now = cloud.params_at(time)
    n_prev = cloud.count_at(time - 1)
    grads = {k: np.zeros_like(p_now[k]) for k in ("features", "colors", "means")}
    terms = {}

    for key, hist, lam, name in (
        ("features", cloud.features_history, weights.smooth_feature, "smooth_feature"),
        ("colors", cloud.colors_history, weights.smooth_color, "smooth_color"),
    ):
        diff = p_now[key][:n_prev] - hist[time - 1][:n_prev]
        terms[name] = float(lam * np.abs(diff).sum())
        grads[key][:n_prev] = lam * np.sign(diff)

    bg = np.flatnonzero(p_now["instance_ids"][:n_prev] == 0)
    diff = p_now["means"][bg] - cloud.means_history[time - 1][bg]
    terms["smooth_bg_mean"] = float(weights.smooth_bg_mean * np.abs(diff).sum())
    grads["means"][bg] = weights.smooth_bg_mean * np.sign(diff)
    return float(sum(terms.values())), grads, terms


# --- total -------------------------------------------------------------------

def total_loss(cloud, graph, rendered, frame, mask, weights: LossWeights, time: int,
               weighting: str = "feature", signed_iso: bool = False):
    """Weighted sum of every term, with gradients merged per parameter group.

    The rendered maps must come from the cloud's parameters at ``time``; the
    reconstruction gradient is chained through the rasterizer backward pass.
    """
    _, rec_terms, upstream = reconstruction_loss(rendered, frame, mask, weights)
    grads = render_backward(rendered, upstream)
    breakdown = LossBreakdown(**rec_terms)

    if time >= 1 and graph is not None:
        if weights.rigid:
            breakdown.rigid, g = rigidity_loss(cloud, graph, time, weighting)
            grads["means"] += weights.rigid * g["means"]
            grads["quats"] += weights.rigid * g["quats"]
        if weights.rot:
            breakdown.rot, g = rotation_loss(cloud, graph, time, weighting)
            grads["quats"] += weights.rot * g["quats"]
        if weights.iso:
            breakdown.iso, g = isometry_loss(cloud, graph, time, weighting, signed_iso)
            grads["means"] += weights.iso * g["means"]
    if time >= 1 and weights.smooth:
        _, g, terms = smoothness_loss(cloud, time, weights)
        for name, value in terms.items():
            setattr(breakdown, name, value)
        for key in ("features", "colors", "means"):
            grads[key] += weights.smooth * g[key]
    breakdown.total = breakdown.weighted_total(weights)
    return breakdown, grads
