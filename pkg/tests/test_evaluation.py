import math

import numpy as np
import pytest

from conftest import small_spec
from flowplane import evaluation as ev
from flowplane.environment import EpisodeConfig
from flowplane.geometry import PlaneState, rotate_in_plane
from flowplane.phantom import analytic_flow, make_phantom
from flowplane.policy_net import NetworkConfig
from flowplane.preproc import EnvVolumes, build_env
from flowplane.volume_store import ScalarVolume3D


def tiny_model(t_max=100):
    net = NetworkConfig(state_dims=(3, 5, 5), widths=(2, 2), latent=4, lstm=4)
    ep = EpisodeConfig(mode="eval", state_dims=net.state_dims, state_spacing=4.0, t_max=t_max)
    return net, ep


@pytest.fixture(scope="module")
def tube():
    """Wide straight tube along x with the target well away from the inlet."""
    spec = small_spec(dims=(4, 48, 48, 48), radius=8.0, origin=(22.0, 47.0, 47.0), length=56.0, noise=0.0)
    vol, gt = make_phantom(spec, 0)
    return spec, vol, gt, build_env(vol)


# --------------------------------------------------------------------------
# metrics


def test_metrics_identical_and_orthogonal():
    gt = PlaneState.from_vectors((1.0, 2.0, 3.0), (0, 0, 1))
    m = ev.plane_metrics(gt, gt)
    assert (m.angle_deg, m.distance_mm) == (0.0, 0.0)
    m = ev.plane_metrics(PlaneState.from_vectors((1.0, 5.0, 3.0), (1, 0, 0)), gt)
    assert m.angle_deg == pytest.approx(90.0) and m.distance_mm == pytest.approx(3.0)


def quaternion_angle(a, b):
    """Rotation angle of the shortest-arc quaternion taking ``a`` onto ``b``."""
    a, b = a / np.linalg.norm(a), b / np.linalg.norm(b)
    w = 1.0 + a @ b
    v = np.cross(a, b)
    if w < 1e-12:
        return 180.0
    return math.degrees(2.0 * math.atan2(np.linalg.norm(v), w))


def test_metrics_angle_against_quaternion_oracle(rng):
    for _ in range(200):
        n, m = rng.normal(size=3), rng.normal(size=3)
        s = PlaneState.from_vectors(rng.normal(size=3), n)
        gt = PlaneState.from_vectors(rng.normal(size=3), m)
        assert ev.plane_metrics(s, gt).angle_deg == pytest.approx(quaternion_angle(n, m), abs=1e-9)


# --------------------------------------------------------------------------
# deterministic evaluation


def test_zero_model_leaves_start_pose(small_phantom):
    vol, gt = small_phantom
    env = build_env(vol)
    net, ep = tiny_model()
    model = ev.Model.zeros(net, ep)
    pose, m, trace = ev.run_eval_episode(model, env, gt, record=True)
    start = ev.PlaneEnv(env, gt, ep).reset()
    s0 = ev.PlaneEnv(env, gt, ep)
    s0.reset()
    np.testing.assert_allclose(pose.P, s0.pose.P, atol=1e-12)
    np.testing.assert_allclose(pose.n, s0.pose.n, atol=1e-12)
    assert m == ev.plane_metrics(s0.pose, gt)
    assert len(trace) == 101 and start is not None


def test_eval_is_deterministic(small_phantom):
    from oracles import lively_params

    vol, gt = small_phantom
    env = build_env(vol)
    net, ep = tiny_model(t_max=30)
    params = lively_params(net, np.random.default_rng(3))
    model = ev.Model(params, net, ep)
    a = ev.run_eval_episode(model, env, gt)
    b = ev.run_eval_episode(model, env, gt)
    np.testing.assert_array_equal(a[0].P, b[0].P)
    assert a[1] == b[1]
    assert ev.validation_score(params, net, ep, [(env, gt)]) == ev.validation_score(params, net, ep, [(env, gt)])


def test_greedy_episode_requires_eval_mode(small_phantom):
    vol, gt = small_phantom
    net, _ = tiny_model()
    with pytest.raises(ValueError):
        ev.greedy_episode(ev.Model.zeros(net).params, net, EpisodeConfig(state_dims=(3, 5, 5)), build_env(vol), gt)


def test_model_from_checkpoint_checks_shapes(tmp_path):
    from flowplane.volume_store import Checkpoint, ShapeMismatchError, load_checkpoint, save_checkpoint
    from flowplane import policy_net as pn

    net, _ = tiny_model()
    params = pn.init_params(net, 0)
    save_checkpoint(Checkpoint(params, 3, 1.0, {"network": net.to_json(), "train": {"t_max": 7}}), tmp_path / "a")
    model = ev.Model.from_checkpoint(tmp_path / "a")
    assert model.net == net and model.episode.t_max == 7 and model.episode.mode == "eval"
    params.pop("mu.b")
    save_checkpoint(Checkpoint(params, 3, 1.0, {"network": net.to_json()}), tmp_path / "b")
    with pytest.raises((ShapeMismatchError, KeyError)):
        ev.Model.from_checkpoint(load_checkpoint(tmp_path / "b"))


# --------------------------------------------------------------------------
# invariance grid


def test_invariance_grid_zero_row_is_plain_eval(small_phantom):
    vol, gt = small_phantom
    net, ep = tiny_model(t_max=5)
    from oracles import lively_params

    model = ev.Model(lively_params(net, np.random.default_rng(0)), net, ep)
    rows, summary = ev.invariance_grid(model, vol, gt, angles=(-5, 0), offsets=(0, 5))
    assert len(rows) == summary["cells"] == 4
    zero = [r for r in rows if r["angle"] == 0 and r["offset"] == 0][0]
    _, m, _ = ev.run_eval_episode(model, build_env(vol), gt)
    assert zero["angle_error"] == m.angle_deg and zero["distance_error"] == m.distance_mm
    assert summary["baseline_angle"] == m.angle_deg
    assert summary["angle_mean"] == pytest.approx(np.mean([r["angle_error"] for r in rows]))


def test_invariance_grid_default_axes():
    assert ev.GRID_ANGLES == (-15, -10, -5, 0, 5, 10, 15) and ev.GRID_OFFSETS == ev.GRID_ANGLES


# --------------------------------------------------------------------------
# segmentation and flow


def test_segmentation_perpendicular_area(tube):
    spec, vol, gt, env = tube
    plane = PlaneState.from_vectors(gt.P_T, gt.n_T)
    seg = ev.segment_vessel(env, plane, gt.P_T)
    area = seg.mask.sum() * seg.spacing ** 2
    assert not seg.fallback
    assert area == pytest.approx(math.pi * spec.radius ** 2, rel=0.10)


def test_segmentation_oblique_ellipse(tube):
    # [DERIVED] a 60 degree cut of a cylinder is an ellipse of area pi R^2 / cos 60
    spec, vol, gt, env = tube
    plane = rotate_in_plane(PlaneState.from_vectors(gt.P_T, gt.n_T), "w1", 60.0, omega_max=None)
    seg = ev.segment_vessel(env, plane, gt.P_T)
    area = seg.mask.sum() * seg.spacing ** 2
    assert area == pytest.approx(math.pi * spec.radius ** 2 / math.cos(math.radians(60)), rel=0.15)


def test_segmentation_degenerate_plane_falls_back():
    dims = (20, 20, 20)
    env = EnvVolumes(ScalarVolume3D(np.zeros(dims), (2.0,) * 3), np.zeros((3,) + dims), 100.0)
    plane = PlaneState.from_vectors((20.0, 20.0, 20.0), (1, 0, 0))
    seg = ev.segment_vessel(env, plane, plane.P, size=16)
    assert seg.fallback and seg.center == (8, 8)
    assert seg.mask.sum() == ev.disk_mask((16, 16), (8, 8), 3).sum()


def test_compute_flow_units():
    # [DERIVED] 100 mm/s over 100 pixels of 4 mm^2 = 40000 mm^3/s = 2.4 L/min
    vn = np.zeros((20, 20))
    vn[:10, :10] = 100.0
    mask = vn > 0
    assert ev.compute_flow(mask, vn, 2.0) == pytest.approx(2.4, abs=1e-12)
    assert ev.compute_flow(mask, np.zeros_like(vn), 2.0) == 0.0
    with pytest.raises(ValueError):
        ev.compute_flow(np.zeros_like(mask), vn)


def test_ideal_mask_flow_matches_poiseuille(tube):
    spec, vol, gt, env = tube
    plane = PlaneState.from_vectors(gt.P_T, gt.n_T)
    # the environment holds the systolic frame
    Q = analytic_flow(spec)[env.sys_index]
    from flowplane.geometry import plane_image

    fine = 0.5
    _, vn = plane_image(env, plane, 96, fine)
    mask = ev.ideal_mask(plane, gt.P_T, spec.radius, 96, fine)
    assert ev.compute_flow(mask, vn, fine) == pytest.approx(Q, rel=0.05)
    q, seg = ev.plane_flow(env, plane)
    assert q == pytest.approx(Q, rel=0.10)


def test_agreement_identity_and_shift():
    a = np.array([1.0, 2.0, 3.5, 4.0])
    m = [ev.disk_mask((20, 20), (10, 10), r) for r in (3, 4, 5, 6)]
    s = ev.agreement_stats(a, a, m, m)
    assert s["r2"] == pytest.approx(1.0) and s["bias"] == 0.0 and s["dice"] == 1.0 and s["area_diff_pct"] == 0.0
    s = ev.agreement_stats(a, a + 0.5)
    # [DERIVED] bias = mean(a - b) = -0.5, zero spread
    assert s["bias"] == pytest.approx(-0.5) and s["loa_low"] == pytest.approx(-0.5)
    assert s["loa_high"] == pytest.approx(-0.5) and s["slope"] == pytest.approx(1.0)


def test_dice_after_centre_alignment():
    a = ev.disk_mask((30, 30), (8, 8), 4)
    b = ev.disk_mask((30, 30), (20, 18), 4)
    assert not np.any(a & b)
    assert ev.dice_aligned(a, b) == 1.0


def test_agreement_errors():
    with pytest.raises(ValueError):
        ev.agreement_stats([1.0, 2.0], [1.0])
    with pytest.raises(ValueError):
        ev.agreement_stats([1.0, 1.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        ev.agreement_stats([1.0], [1.0])
