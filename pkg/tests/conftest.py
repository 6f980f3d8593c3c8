import sys
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from splatrack.scene import CameraState, FrameObservation, GaussianCloud  # noqa: E402


def random_params(rng, n, d=4, instances=3, depth=(2.0, 5.0), spread=1.0, scale=(0.03, 0.2)):
    means = np.stack([rng.uniform(-spread, spread, n), rng.uniform(-spread, spread, n),
                      rng.uniform(*depth, n)], axis=1)
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return dict(
        means=means, quats=q, log_scales=np.log(rng.uniform(*scale, (n, 3))),
        opacity_logits=rng.normal(0, 1.5, n), colors=rng.uniform(0, 1, (n, 3)),
        features=rng.normal(size=(n, d)), instance_ids=rng.integers(0, instances, n))


def small_camera(width=24, height=20, fx=40.0, fy=42.0):
    return SimpleNamespace(intrinsics=(fx, fy, width / 2, height / 2), width=width, height=height)


def cloud_from_steps(means_steps, quats_steps=None, instance_ids=None, features=None, colors=None,
                     birth_time=None):
    """A cloud whose Gaussians all exist over the given steps (or from ``birth_time``)."""
    steps = len(means_steps)
    n = len(means_steps[-1])
    birth = np.zeros(n, dtype=np.int64) if birth_time is None else np.asarray(birth_time)
    counts = [int(np.count_nonzero(birth <= t)) for t in range(steps)]
    if quats_steps is None:
        quats_steps = [np.tile([1.0, 0, 0, 0], (counts[t], 1)) for t in range(steps)]
    d = 4 if features is None else features.shape[1]
    feats = np.ones((n, d)) if features is None else features
    cols = np.full((n, 3), 0.5) if colors is None else colors
    return GaussianCloud(
        log_scales=np.full((n, 3), np.log(0.05)),
        opacity_logits=np.zeros(n),
        instance_ids=np.ones(n, dtype=np.int64) if instance_ids is None else np.asarray(instance_ids),
        birth_time=birth,
        means_history=[np.array(m[:counts[t]], dtype=float) for t, m in enumerate(means_steps)],
        quats_history=[np.array(q[:counts[t]], dtype=float) for t, q in enumerate(quats_steps)],
        colors_history=[cols[:counts[t]].copy() for t in range(steps)],
        features_history=[feats[:counts[t]].copy() for t in range(steps)],
    )


def flat_frame(width=8, height=8, depth=4.0, d=32, instance=0, seed=0):
    rng = np.random.default_rng(seed)
    return FrameObservation(
        rgb=rng.uniform(0, 1, (height, width, 3)),
        depth=np.full((height, width), depth),
        feature=rng.normal(size=(height, width, d)),
        instance=np.full((height, width), instance))


def pinhole(width=8, height=8, f=10.0):
    return CameraState(f, f, (width - 1) / 2, (height - 1) / 2, width, height)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def synthetic_frames(spec):
    """In-memory frames of a generator scene, as float64 observations."""
    from splatrack.synthio.generator import Appearance, render_frame
    spec.validate()
    look = Appearance(spec)
    out = []
    for t in range(spec.frames):
        f = render_frame(spec, t, look)
        out.append(FrameObservation(f.rgb.astype(np.float64), f.depth.astype(np.float64),
                                    f.feature.astype(np.float64), f.instance))
    return out


def intrinsics_of(spec):
    return (spec.fx, spec.fy, spec.cx, spec.cy, spec.width, spec.height)


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance verdicts in one block at the end of the run."""
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])
