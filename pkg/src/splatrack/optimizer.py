"""Adam with per-group learning rates, and the camera pose retraction."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import orthonormalize, so3_exp

DEFAULT_LR = {
    "means": 0.0016,
    "quats": 0.01,
    "opacity_logits": 0.0005,
    "log_scales": 0.001,
    "features": 0.001,
    "colors": 0.0025,
    "instance_ids": 0.0001,
    "pose": 0.001,
}
FROZEN_GAUSSIAN_GROUPS = frozenset({"log_scales", "opacity_logits", "instance_ids"})


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, group: str, index: tuple):
        super().__init__(f"non-finite gradient in group '{group}' at index {index}")
        self.group = group
        self.index = index


@dataclass
class AdamState:
    lr: dict = field(default_factory=lambda: dict(DEFAULT_LR))
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def reset(self) -> None:
        self.step = 0
        self.m.clear()
        self.v.clear()

    def resize(self, group: str, n: int) -> None:
        """Grow a group's moment buffers (zero rows for new entries)."""
        for buf in (self.m, self.v):
            if group in buf and len(buf[group]) < n:
                old = buf[group]
                pad = np.zeros((n - len(old),) + old.shape[1:])
                buf[group] = np.concatenate([old, pad])


def adam_step(params: dict, grads: dict, state: AdamState, frozen_groups=frozenset()) -> dict:
    """In-place Adam update of every non-frozen group that has a gradient.

    Quaternion groups (``"quats"``) are renormalized after the update.
    Raises :class:`NonFiniteGradientError` before touching any parameter.
    """
    active = [k for k in grads if k in params and k not in frozen_groups]
    for key in active:
        g = np.asarray(grads[key])
        if g.shape != np.shape(params[key]):
            raise ValueError(f"gradient shape {g.shape} does not match '{key}' {np.shape(params[key])}")
        bad = ~np.isfinite(g)
        if bad.any():
            raise NonFiniteGradientError(key, tuple(int(i) for i in np.argwhere(bad)[0]))
        if key not in state.lr:
            raise KeyError(f"no learning rate for group '{key}'")

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for key in active:
        g = np.asarray(grads[key], dtype=np.float64)
        m = state.m.get(key)
        if m is None or m.shape != g.shape:
            state.resize(key, len(g))
            m = state.m.get(key)
            if m is None or m.shape != g.shape:
                m = np.zeros_like(g)
                state.v[key] = np.zeros_like(g)
        v = state.v[key]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        state.m[key], state.v[key] = m, v
        params[key] -= state.lr[key] * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if key == "quats":
            params[key] /= np.linalg.norm(params[key], axis=-1, keepdims=True)
    return params


def pose_retract(base: np.ndarray, delta) -> np.ndarray:
    """Apply a 6-vector ``(tx, ty, tz, rx, ry, rz)`` increment to a pose.

    The rotation part is left-multiplied as ``exp(r) R``; the translation
    increment is added in the camera frame.
    """
    delta = np.asarray(delta, dtype=np.float64)
    if not np.any(delta):
        return np.array(base, dtype=np.float64, copy=True)
    out = np.array(base, dtype=np.float64, copy=True)
    out[:3, :3] = orthonormalize(so3_exp(delta[3:]) @ base[:3, :3])
    out[:3, 3] = base[:3, 3] + delta[:3]
    return out
