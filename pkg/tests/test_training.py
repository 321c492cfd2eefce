import itertools

import numpy as np
import pytest

import fovsplat as fs
from fovsplat.rasterizer import RasterOutput, rasterize
from fovsplat.splats import sigmoid
from fovsplat.training import (
    TrainConfig,
    ViewGate,
    model_view_mpsnr,
    seed_from_points,
    should_add_view,
    simplify,
    train_view_from_frame,
)

from conftest import render_train_views, standard_cameras


def _brute_force_gate(gate, existing, candidate, extent):
    # direct transliteration of the novelty predicate
    for cam in existing:
        dist = np.linalg.norm((candidate.position - cam.position) / extent)
        dot = float(np.dot(candidate.forward, cam.forward))
        if not (dist > gate.delta_pos or dot < np.cos(np.radians(gate.theta_view_deg))):
            return False
    return True


def _cam_at(pos, target=(0, 0, 0)):
    return fs.look_at(pos, target, fov_deg=20, resolution=(8, 8), near=0.1, far=100)


def test_gate_empty_set_accepts():
    assert should_add_view(ViewGate(), [], _cam_at((1, 0, 0))) is True


def test_gate_identical_camera_rejected():
    cam = _cam_at((1, 0.2, 0.3))
    assert should_add_view(ViewGate(), [cam], cam) is False


def test_gate_position_threshold():
    gate = ViewGate(delta_pos=0.05, theta_view_deg=5.0)
    base = _cam_at((1.0, 0.0, 0.0), target=(1.0, 0.0, -10.0))  # looking -z
    near = _cam_at((1.0, 0.04, 0.0), target=(1.0, 0.04, -10.0))  # same direction, 0.04 away
    far = _cam_at((1.0, 0.06, 0.0), target=(1.0, 0.06, -10.0))  # same direction, 0.06 away
    assert should_add_view(gate, [base], near, scene_extent=1.0) is False
    assert should_add_view(gate, [base], far, scene_extent=1.0) is True


def test_gate_angle_threshold():
    gate = ViewGate(delta_pos=0.05, theta_view_deg=5.0)
    base = _cam_at((0, 0, 1.0), target=(0, 0, 0))
    # same position, rotated by 6 degrees: novel despite zero distance
    rotated = fs.yaw_camera(base, 6.0)
    barely = fs.yaw_camera(base, 4.0)
    assert should_add_view(gate, [base], rotated) is True
    assert should_add_view(gate, [base], barely) is False


def test_gate_exhaustive_small_sets_match_brute_force():
    gate = ViewGate()
    grid = [
        _cam_at((0.0, 0.0, 1.0)),
        _cam_at((0.03, 0.0, 1.0)),
        _cam_at((0.2, 0.0, 1.0)),
        _cam_at((0.0, 0.5, 1.0)),
        _cam_at((1.0, 1.0, 1.0)),
    ]
    for size in range(0, 4):
        for existing in itertools.permutations(grid, size):
            for cand in grid:
                got = should_add_view(gate, list(existing), cand)
                want = _brute_force_gate(gate, list(existing), cand, 1.0)
                assert got == want


def test_gate_randomized_matches_brute_force():
    rng = np.random.default_rng(0)
    gate = ViewGate()
    mismatches = 0
    for _ in range(1000):
        k = int(rng.integers(0, 5))
        cams = [_cam_at(rng.normal(0, 0.1, 3) + [0, 0, 2]) for _ in range(k + 1)]
        existing, cand = cams[:-1], cams[-1]
        extent = float(rng.uniform(0.5, 3.0))
        if should_add_view(gate, existing, cand, extent) != _brute_force_gate(gate, existing, cand, extent):
            mismatches += 1
    assert mismatches == 0


def test_compute_loss_zero_for_exact_match(sphere_initial_model, fixture_scene):
    sc = fixture_scene("sphere")
    view = sc["views"][0]
    target = view.rgb * view.alpha[:, :, None]
    render = RasterOutput(
        rgb=target.copy(), alpha=view.alpha.copy(), max_blend_weight=np.zeros(1)
    )
    loss, d_rgb, d_alpha = fs.compute_loss(render, view, (0, 0, 0), (0.2, 0.1))
    assert loss == pytest.approx(0.0, abs=1e-12)
    # SSIM term cancels analytically; only float residuals remain
    assert np.abs(d_rgb).max() < 1e-12 and np.all(d_alpha == 0)


def test_compute_loss_l1_single_pixel():
    h = w = 8
    rgba = np.zeros((h, w, 4))
    rgba[:, :, 3] = 1.0
    view = fs.TrainView(
        camera=fs.look_at((0, 0, 5), (0, 0, 0), fov_deg=30, resolution=(w, h), near=0.1, far=50),
        rgba=rgba,
    )
    pred = np.zeros((h, w, 3))
    pred[3, 4, 1] = 0.1
    render = RasterOutput(rgb=pred, alpha=np.ones((h, w)), max_blend_weight=np.zeros(1))
    loss, _, _ = fs.compute_loss(render, view, (0, 0, 0), (0.0, 0.0))
    assert loss == pytest.approx(0.1 / (3 * h * w))


def test_compute_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    h = w = 8
    cam = fs.look_at((0, 0, 5), (0, 0, 0), fov_deg=30, resolution=(w, h), near=0.1, far=50)
    view = fs.TrainView(camera=cam, rgba=rng.uniform(0.1, 0.9, (h, w, 4)))
    rgb = rng.uniform(0.1, 0.9, (h, w, 3))
    alpha = rng.uniform(0.1, 0.9, (h, w))
    bg = np.array([0.3, 0.5, 0.7])
    lam = (0.2, 0.1)

    def loss_of(r, a):
        return fs.compute_loss(RasterOutput(r, a, np.zeros(1)), view, bg, lam)[0]

    _, d_rgb, d_alpha = fs.compute_loss(RasterOutput(rgb, alpha, np.zeros(1)), view, bg, lam)
    eps = 1e-6
    worst = 0.0
    for idx in [(1, 2, 0), (4, 4, 1), (7, 0, 2), (0, 7, 1)]:
        rp = rgb.copy()
        rp[idx] += eps
        rm = rgb.copy()
        rm[idx] -= eps
        fd = (loss_of(rp, alpha) - loss_of(rm, alpha)) / (2 * eps)
        worst = max(worst, abs(fd - d_rgb[idx]) / max(abs(fd), 1e-9))
    for idx in [(2, 2), (5, 6)]:
        ap = alpha.copy()
        ap[idx] += eps
        am = alpha.copy()
        am[idx] -= eps
        fd = (loss_of(rgb, ap) - loss_of(rgb, am)) / (2 * eps)
        worst = max(worst, abs(fd - d_alpha[idx]) / max(abs(fd), 1e-9))
    assert worst < 1e-4


def test_simplify_identity_when_target_covers(small_model):
    out = simplify(small_model, np.ones(len(small_model)), len(small_model) + 5, seed=1)
    assert len(out) == len(small_model)
    assert np.array_equal(out.positions, small_model.positions)


def test_simplify_zero_importance_never_selected(small_model):
    imp = np.ones(len(small_model))
    imp[7] = 0.0
    for seed in range(20):
        out = simplify(small_model, imp, len(small_model) // 2, seed=seed)
        assert not any(np.allclose(p, small_model.positions[7]) for p in out.positions)


def test_simplify_uniform_importance_is_unbiased(small_model):
    n = len(small_model)
    counts = np.zeros(n)
    for seed in range(300):
        out = simplify(small_model, np.ones(n), n // 2, seed=seed)
        for p in out.positions:
            idx = int(np.argmin(np.linalg.norm(small_model.positions - p, axis=1)))
            counts[idx] += 1
    freq = counts / 300.0
    assert abs(freq.mean() - 0.5) < 0.02
    assert freq.std() < 0.12  # roughly uniform inclusion


def test_simplify_deterministic(small_model):
    imp = np.linspace(0.1, 1.0, len(small_model))
    a = simplify(small_model, imp, 20, seed=3)
    b = simplify(small_model, imp, 20, seed=3)
    assert np.array_equal(a.positions, b.positions)


def test_initialize_model_validations(fixture_scene):
    sc = fixture_scene("sphere")
    with pytest.raises(ValueError):
        fs.initialize_model([], sc["views"], TrainConfig(total_iters=5, simplify_at=1))
    with pytest.raises(ValueError):
        fs.initialize_model(sc["points"], sc["views"][:3], TrainConfig(total_iters=5, simplify_at=1))


def test_initialize_never_exceeds_seed_count(fixture_scene):
    sc = fixture_scene("tubes")
    cfg = TrainConfig(total_iters=30, simplify_at=10, target_gaussians=10**6, seed=1)
    model = fs.initialize_model(sc["points"], sc["views"], cfg)
    assert len(model) <= len(sc["points"])


def test_initialize_deterministic(fixture_scene):
    sc = fixture_scene("sphere")
    cfg = TrainConfig(total_iters=25, simplify_at=10, target_gaussians=4000, seed=9)
    a = fs.initialize_model(sc["points"], sc["views"], cfg)
    b = fs.initialize_model(sc["points"], sc["views"], cfg)
    assert np.array_equal(a.positions, b.positions)
    assert np.array_equal(a.rgbs, b.rgbs)


def test_training_loss_decreases(fixture_scene):
    sc = fixture_scene("sphere")
    losses = []
    cfg = TrainConfig(total_iters=120, simplify_at=40, target_gaussians=8000, seed=2)
    fs.initialize_model(
        sc["points"], sc["views"], cfg, on_iteration=lambda i, l: losses.append(l)
    )
    first = np.mean(losses[:10])
    last = np.mean(losses[-10:])
    assert last < first


def test_refine_increments_generation_and_respects_cap(fixture_scene, sphere_initial_model):
    sc = fixture_scene("sphere")
    cfg = TrainConfig(
        total_iters=60, simplify_at=1, densify_from=10, densify_until=50, densify_interval=20, seed=4
    )
    out = fs.refine_model(sphere_initial_model, sc["views"], cfg, settings_hash=42)
    assert out.generation == sphere_initial_model.generation + 1
    assert out.settings_hash == sphere_initial_model.settings_hash
    assert len(out) <= int(np.ceil(cfg.max_growth * len(sphere_initial_model)))


def test_refine_zero_new_views_is_regression_guarded(fixture_scene, sphere_initial_model):
    sc = fixture_scene("sphere")
    before = np.mean([model_view_mpsnr(sphere_initial_model, v) for v in sc["holdout"]])
    cfg = TrainConfig(total_iters=600, simplify_at=95, densify_from=200, densify_until=400, seed=4)
    out = fs.refine_model(sphere_initial_model, sc["views"], cfg, settings_hash=42)
    after = np.mean([model_view_mpsnr(out, v) for v in sc["holdout"]])
    assert after - before >= -0.2  # validation selection blocks degradation
    assert out.generation == sphere_initial_model.generation + 1


def test_refine_settings_hash_mismatch_raises(fixture_scene, sphere_initial_model):
    sc = fixture_scene("sphere")
    with pytest.raises(ValueError):
        fs.refine_model(sphere_initial_model, sc["views"], TrainConfig(total_iters=5, simplify_at=1), settings_hash=999)


def test_refine_cancellation_stops_early(fixture_scene, sphere_initial_model):
    sc = fixture_scene("sphere")
    seen = []
    cfg = TrainConfig(total_iters=500, seed=4)
    fs.refine_model(
        sphere_initial_model,
        sc["views"],
        cfg,
        settings_hash=42,
        should_stop=lambda: len(seen) >= 7,
        on_iteration=lambda i, l: seen.append(i),
    )
    assert len(seen) == 7


def test_seed_from_points_isotropic_unit_quaternions(fixture_scene):
    sc = fixture_scene("sphere")
    raw = seed_from_points(sc["points"][:100])
    assert np.allclose(raw.rotations[:, 0], 1.0)
    assert np.allclose(raw.log_scales[:, 0], raw.log_scales[:, 1])
    assert np.all(sigmoid(raw.opacity_logits) == pytest.approx(0.5))


def test_checkpoint_round_trip(tmp_path, sphere_initial_model):
    import json

    fs.save_checkpoint(sphere_initial_model, tmp_path / "ck.fspl", iteration=700, loss=0.01, view_count=12)
    back = fs.load_model(tmp_path / "ck.fspl")
    assert len(back) == len(sphere_initial_model)
    meta = json.loads((tmp_path / "ck.fspl.json").read_text())
    assert meta["iteration"] == 700 and meta["view_count"] == 12
