import json

import numpy as np
import pytest

from conftest import cloud_from_steps, flat_frame, intrinsics_of, pinhole, synthetic_frames
from splatrack.geometry import axis_angle_to_quat, camera_center, make_pose, quat_multiply, so3_exp, so3_log
from splatrack.neighbors import NeighborGraph, build_instance_knn
from splatrack.renderer import rasterize
from splatrack.scene import FrameObservation, GaussianCloud
from splatrack.synthio.generator import SceneSpec
from splatrack.tracker import (
    ConfigError,
    Tracker,
    TrackerConfig,
    TrackerWarning,
    config_schema,
    run_sequence,
)

DOCS_SCHEMA = __import__("pathlib").Path(__file__).parents[1] / "docs" / "config.schema.json"


def quick(**kw):
    kw.setdefault("camera_iterations", 5)
    kw.setdefault("gaussian_iterations", 5)
    return TrackerConfig(**kw)


def full_graph(n, k=4):
    """Every Gaussian linked to every other one with equal weights."""
    idx = np.full((n, k), -1)
    for i in range(n):
        others = [j for j in range(n) if j != i][:k]
        idx[i, :len(others)] = others
    mask = idx >= 0
    w = np.where(mask, 1.0, 0.0)
    return NeighborGraph(idx, w, w / np.maximum(mask.sum(1, keepdims=True), 1), w, 1, k)


def tracker_for(cloud, camera=None, **kw):
    tr = Tracker(cloud, camera or pinhole(), quick(**kw))
    tr.graph = full_graph(len(cloud))
    return tr


def self_rendered_frame(cloud, camera, time):
    """Observation equal to the rendering of ``cloud`` itself.

    Every Gaussian is foreground, so the rendered background channel is
    exactly zero and matches the all-foreground instance map.
    """
    assert (cloud.instance_ids > 0).all()
    m = rasterize(cloud, camera, time, quick().raster)
    return FrameObservation(m.color.copy(), m.depth.copy(), m.feature.copy(), np.ones(m.depth.shape, int))


# --- configuration ----------------------------------------------------------------

def test_config_round_trip(tmp_path):
    cfg = TrackerConfig(k=7, stride=2, fix_camera=True, knn_select="min_sim")
    cfg.weights.rigid = 0.0
    again = TrackerConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again.to_dict() == cfg.to_dict()
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"stride": 3, "weights": {"iso": 0.5}}))
    loaded = TrackerConfig.load(path)
    assert loaded.stride == 3 and loaded.weights.iso == 0.5 and loaded.weights.rigid == 128.0


@pytest.mark.parametrize("bad", [
    {"stride": 0}, {"k": "x"}, {"knn_select": "median"}, {"fix_camera": 1},
    {"weights": {"rigid": -1}}, {"unknown_field": 1}, {"camera_iterations": 0},
    {"visibility_mode": "max"},
])
def test_config_rejects_invalid(bad):
    with pytest.raises(ConfigError):
        TrackerConfig.from_dict(bad)


def test_config_load_rejects_bad_json(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        TrackerConfig.load(path)


def test_documented_schema_matches_package():
    assert json.loads(DOCS_SCHEMA.read_text()) == config_schema()


# --- initialize -----------------------------------------------------------------------

def test_initialize_stride_two():
    tr = Tracker.initialize(flat_frame(), pinhole(), quick(stride=2))
    assert len(tr.cloud) == 16
    np.testing.assert_array_equal(tr.camera.pose(0), np.eye(4))


def test_initialize_is_deterministic():
    a = Tracker.initialize(flat_frame(), pinhole(), quick())
    b = Tracker.initialize(flat_frame(), pinhole(), quick())
    for k, v in a.cloud.params_at(0).items():
        assert v.tobytes() == b.cloud.params_at(0)[k].tobytes()
    np.testing.assert_array_equal(a.graph.neighbor_indices, b.graph.neighbor_indices)


def test_initialize_constant_depth_plane():
    tr = Tracker.initialize(flat_frame(depth=2.75), (10.0, 10.0, 3.5, 3.5, 8, 8), quick())
    np.testing.assert_allclose(tr.cloud.means[:, 2], 2.75, atol=1e-12)


# --- propagation ----------------------------------------------------------------------

def test_propagation_follows_neighbour_velocity(rng):
    m0 = rng.normal(size=(5, 3))
    tr = tracker_for(cloud_from_steps([m0, m0 + [1.0, 0, 0]]))
    means, quats = tr.propagate_gaussians(1)
    np.testing.assert_allclose(means, m0 + [2.0, 0, 0], atol=1e-12)
    np.testing.assert_allclose(quats, tr.cloud.quats, atol=1e-12)


def test_static_step_propagates_unchanged(rng):
    m0 = rng.normal(size=(6, 3))
    q = rng.normal(size=(6, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    tr = tracker_for(cloud_from_steps([m0, m0], [q, q]))
    means, quats = tr.propagate_gaussians(1)
    np.testing.assert_allclose(means, m0, atol=1e-15)
    np.testing.assert_allclose(quats, q, atol=1e-12)


def test_constant_spin_extrapolates_analytically():
    rate = 0.3
    q0 = axis_angle_to_quat([0.0, 1, 0], 0.4)
    steps = [quat_multiply(axis_angle_to_quat([0.0, 0, 1], t * rate), q0) for t in range(3)]
    m = np.zeros((1, 3))
    cloud = cloud_from_steps([m, m], [steps[0][None], steps[1][None]])
    tr = tracker_for(cloud)
    _, quats = tr.propagate_gaussians(1)
    assert abs(abs(quats[0] @ steps[2]) - 1) < 1e-12


def test_newborns_and_isolated_rows_copy_their_means(rng):
    m0 = rng.normal(size=(3, 3))
    m1 = np.vstack([m0 + [0, 0.5, 0], rng.normal(size=(2, 3))])
    cloud = cloud_from_steps([m0, m1], birth_time=[0, 0, 0, 1, 1])
    tr = tracker_for(cloud)
    tr.graph = full_graph(5)
    tr.graph.neighbor_indices[2] = -1
    tr.graph.softmax_weights[2] = 0
    means, _ = tr.propagate_gaussians(1)
    # newborns average the velocities of their older neighbours only
    np.testing.assert_allclose(means[3:], m1[3:] + [0, 0.5, 0], atol=1e-12)
    np.testing.assert_allclose(means[2], m1[2], atol=1e-15)
    np.testing.assert_allclose(means[:2], m1[:2] + [0, 0.5, 0], atol=1e-12)


def test_camera_propagation():
    tr = tracker_for(cloud_from_steps([np.zeros((2, 3))]))
    np.testing.assert_array_equal(tr.propagate_camera(0), np.eye(4))
    tr.camera.set_pose(1, np.eye(4))
    np.testing.assert_allclose(tr.propagate_camera(1), np.eye(4), atol=1e-15)

    tr.camera.set_pose(0, make_pose(np.eye(3), [0.1, 0.2, 0.3]))
    tr.camera.set_pose(1, make_pose(np.eye(3), [0.4, 0.1, 0.3]))
    np.testing.assert_allclose(tr.propagate_camera(1)[:3, 3], [0.7, 0.0, 0.3], atol=1e-12)

    yaw = so3_exp([0, 0, 0.2])
    tr.camera.set_pose(0, make_pose(yaw, [0, 0, 0]))
    tr.camera.set_pose(1, make_pose(yaw @ so3_exp([0, 0, 0.15]), [0, 0, 0]))
    np.testing.assert_allclose(so3_log(tr.propagate_camera(1)[:3, :3]), [0, 0, 0.5], atol=1e-12)


# --- camera phase -------------------------------------------------------------------------

def static_scene(**kw):
    return SceneSpec(width=24, height=24, fx=22.0, fy=22.0, frames=2, **kw)


def test_fix_camera_keeps_propagated_pose():
    frames = synthetic_frames(static_scene())
    tr = Tracker.initialize(frames[0], intrinsics_of(static_scene()), quick(fix_camera=True))
    tr.process_frame(frames[0], 0)
    guess = make_pose(so3_exp([0, 0.01, 0]), [0.05, 0, 0])
    tr._pending = (tr._pending[0], tr._pending[1], guess)
    tr.process_frame(frames[1], 1)
    assert tr.camera.pose(1).tobytes() == guess.tobytes()


def test_fully_dynamic_frame_skips_camera_with_warning():
    frame = flat_frame(instance=3)
    tr = Tracker.initialize(frame, pinhole(), quick())
    tr.process_frame(frame, 0)
    with pytest.warns(TrackerWarning):
        report = tr.process_frame(frame, 1)
    assert report["camera"]["skipped"]
    np.testing.assert_array_equal(tr.camera.pose(1), np.eye(4))


def test_recovers_two_pixel_camera_translation():
    spec = static_scene()
    step = 2 * spec.background.depth / spec.fx
    spec.camera = type(spec.camera)(kind="linear", velocity=[step, 0, 0])
    frames = synthetic_frames(spec)
    tr = Tracker.initialize(frames[0], intrinsics_of(spec), TrackerConfig(gaussian_iterations=40))
    tr.process_frame(frames[0], 0)
    tr.process_frame(frames[1], 1)
    err = np.linalg.norm(camera_center(tr.camera.pose(1)) - [step, 0, 0])
    assert err < 0.1 * step


# --- densification ------------------------------------------------------------------------

def test_identical_frame_adds_almost_nothing():
    frame = flat_frame(width=12, height=12)
    tr = Tracker.initialize(frame, pinhole(12, 12), quick(fix_camera=True))
    tr.process_frame(frame, 0)
    tr.process_frame(frame, 1)
    assert tr.reports[1]["added"] <= 2


def test_empty_cloud_adds_every_stride_pixel():
    frame = flat_frame()
    tr = Tracker(GaussianCloud.empty(32), pinhole(), quick(stride=2))
    delta = tr.densify(frame, 0)
    assert len(delta) == 16 and len(tr.cloud) == 16
    assert tr.graph is not None and len(tr.graph) == 16


# --- gaussian phase --------------------------------------------------------------------------

def moving_sphere():
    f = 30.0
    v = [2.5 / f, 0.0, 0.0]  # one pixel per frame at depth 2.5
    spec = SceneSpec(width=32, height=32, fx=f, fy=f, frames=2,
                     objects=[dict(shape="sphere", instance_id=1, center=[-0.2, 0, 2.5], radius=0.5,
                                   velocity=v)])
    return spec, np.array(v)


@pytest.fixture(scope="module")
def tracked_sphere():
    spec, v = moving_sphere()
    frames = synthetic_frames(spec)
    cfg = TrackerConfig(gaussian_iterations=100, fix_camera=True)
    tr = Tracker.initialize(frames[0], intrinsics_of(spec), cfg)
    tr.process_frame(frames[0], 0)
    tr.process_frame(frames[1], 1)
    return tr, v


def test_translating_object_displacement(tracked_sphere):
    tr, v = tracked_sphere
    n0 = tr.cloud.count_at(0)
    on_object = tr.cloud.instance_ids[:n0] == 1
    moved = tr.cloud.means_history[1][:n0][on_object] - tr.cloud.means_history[0][on_object]
    err = np.linalg.norm(moved - v, axis=1).mean()
    assert err < 0.1 * np.linalg.norm(v)


def test_loss_decreases_in_most_steps(tracked_sphere):
    tr, _ = tracked_sphere
    assert all(r["decreasing_fraction"] >= 0.9 for r in tr.reports)


def test_static_fixed_point(rng):
    camera = pinhole(12, 12, f=12.0)
    n = 30
    means = np.column_stack([rng.uniform(-1.5, 1.5, (n, 2)), rng.uniform(2.5, 3.5, n)])
    cloud = cloud_from_steps([means], instance_ids=np.full(n, 2), features=rng.normal(size=(n, 32)),
                             colors=rng.uniform(0, 1, (n, 3)))
    cloud.log_scales[:] = np.log(0.4)
    cloud.opacity_logits[:] = 4.0
    frame = self_rendered_frame(cloud, camera, 0)
    tr = Tracker(cloud, camera, quick(fix_camera=True, gaussian_iterations=10))
    tr.graph = build_instance_knn(cloud.means, cloud.features, cloud.instance_ids, 20)
    before = {k: v.copy() for k, v in cloud.params_at(0).items()}
    fit = tr.optimize_gaussians(frame, 0)
    assert fit["breakdown"].total < 1e-8
    for k, v in cloud.params_at(0).items():
        assert np.abs(v - before[k]).max() < 1e-6


# --- frame loop -----------------------------------------------------------------------------

def test_two_frame_static_sequence():
    spec = static_scene()
    frames = synthetic_frames(spec)
    tr = run_sequence(frames, intrinsics_of(spec), TrackerConfig(camera_iterations=30, gaussian_iterations=30))
    assert np.linalg.norm(camera_center(tr.camera.pose(1))) < 1e-2
    n0 = tr.cloud.count_at(0)
    motion = np.linalg.norm(tr.cloud.means_history[1][:n0] - tr.cloud.means_history[0], axis=1)
    assert motion.mean() < 1e-2


def test_size_mismatch_rejected_before_mutation():
    tr = Tracker.initialize(flat_frame(), pinhole(), quick())
    tr.process_frame(flat_frame(), 0)
    before = tr._snapshot()
    with pytest.raises(ValueError):
        tr.process_frame(flat_frame(width=9), 1)
    with pytest.raises(ValueError):
        tr.process_frame(flat_frame(d=8), 1)
    with pytest.raises(ValueError):
        tr.process_frame(flat_frame(), 2)
    assert len(tr.cloud.means_history) == 1 and len(tr.camera.poses) == 1
    assert tr.next_time == before.next_time and len(tr.reports) == 1


def test_failed_phase_rolls_back_bitwise(monkeypatch):
    frame = flat_frame()
    tr = Tracker.initialize(frame, pinhole(), quick())
    tr.process_frame(frame, 0)
    cloud_bytes = [a.tobytes() for a in tr.cloud.means_history + tr.cloud.quats_history]
    pending = [a.tobytes() for a in tr._pending]

    def boom(*args, **kwargs):
        raise RuntimeError("phase failed")

    monkeypatch.setattr(tr, "optimize_gaussians", boom)
    with pytest.raises(RuntimeError):
        tr.process_frame(frame, 1)
    assert [a.tobytes() for a in tr.cloud.means_history + tr.cloud.quats_history] == cloud_bytes
    assert [a.tobytes() for a in tr._pending] == pending
    assert len(tr.camera.poses) == 1 and tr.next_time == 1 and len(tr.reports) == 1
    monkeypatch.undo()
    tr.process_frame(frame, 1)
    assert tr.next_time == 2


def test_plumbing_over_twenty_frames(tmp_path):
    spec = SceneSpec(width=16, height=16, fx=15.0, fy=15.0, frames=20,
                     objects=[dict(shape="sphere", instance_id=1, center=[0, 0, 2.5], radius=0.4,
                                   velocity=[0.03, 0, 0])])
    frames = synthetic_frames(spec)
    log = tmp_path / "report.jsonl"
    seen = []
    tr = run_sequence(frames, intrinsics_of(spec), quick(camera_iterations=2, gaussian_iterations=2),
                      report_path=log, progress=seen.append)
    assert len(tr.reports) == len(seen) == 20
    lines = [json.loads(line) for line in log.read_text().splitlines()]
    assert [r["time"] for r in lines] == list(range(20))
    counts = [r["num_gaussians"] for r in lines]
    assert counts == sorted(counts)
    assert lines[-1]["num_gaussians"] == len(tr.cloud)
    np.testing.assert_array_equal(tr.cloud.history_length(), 20 - tr.cloud.birth_time)
    assert len(tr.cloud.visibility_history) == 20
    for r in lines:
        assert set(r["losses"]) >= {"total", "image", "depth", "feature", "background", "rigid", "rot", "iso"}


def test_normalized_visibility_mode_stores_fractions():
    spec = SceneSpec(width=16, height=16, fx=15.0, fy=15.0, frames=2,
                     objects=[dict(shape="sphere", instance_id=1, center=[0, 0, 2.5], radius=0.4)])
    frames = list(synthetic_frames(spec))
    raw = run_sequence(frames, intrinsics_of(spec), quick(fix_camera=True))
    norm = run_sequence(frames, intrinsics_of(spec), quick(fix_camera=True, visibility_mode="normalized"))
    for t in range(2):
        v = norm.cloud.visibility_history[t]
        assert np.all((v >= 0) & (v <= 1 + 1e-12))
        # identical optimization; only the stored visibility differs
        np.testing.assert_array_equal(norm.cloud.means_history[t], raw.cloud.means_history[t])
        assert raw.cloud.visibility_history[t].max() > 1.0
