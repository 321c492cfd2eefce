"""Shared fixtures: procedural scenes, rendered view sets, and trained
models. Session-scoped because rendering and training dominate suite time."""

from __future__ import annotations

import numpy as np
import pytest

import fovsplat as fs
from fovsplat.pathtracer import RenderSettings
from fovsplat.training import train_view_from_frame


@pytest.fixture(scope="session")
def demo_tf():
    return fs.TransferFunction.from_points(
        [
            (0.0, (0, 0, 0, 0)),
            (0.3, (0.8, 0.5, 0.3, 0.05)),
            (0.7, (0.9, 0.4, 0.25, 0.6)),
            (1.0, (0.95, 0.9, 0.85, 1.0)),
        ]
    )


@pytest.fixture(scope="session")
def grad_env():
    return fs.EnvironmentMap.vertical_gradient((1, 1, 1), (0.4, 0.45, 0.55))


@pytest.fixture(scope="session")
def white_env():
    return fs.EnvironmentMap.uniform((1.0, 1.0, 1.0))


@pytest.fixture(scope="session")
def sphere_vol():
    return fs.make_procedural_volume("sphere", (64, 64, 64))


@pytest.fixture(scope="session")
def tubes_vol():
    return fs.make_procedural_volume("tubes", (64, 64, 64))


@pytest.fixture(scope="session")
def wall_vol():
    return fs.make_procedural_volume("wall", (64, 64, 64))


def render_train_views(vol, tf, env, cams, spp, seed, source="initial", use_denoise=True):
    views = []
    for i, cam in enumerate(cams):
        frame = fs.render(vol, tf, env, cam, RenderSettings(spp=spp, seed=seed), frame_id=seed * 4096 + i)
        if use_denoise:
            frame = fs.denoise(frame)
        views.append(train_view_from_frame(frame, env, source))
    return views


def standard_cameras(vol, count, fov_deg=30.0, resolution=(128, 128), radius_factor=1.5, elevation=None):
    diag = vol.diagonal
    if elevation is None:
        return fs.fibonacci_sphere_cameras(
            vol.center_world, radius_factor * diag, count, fov_deg=fov_deg,
            resolution=resolution, near=0.5, far=6 * diag,
        )
    return fs.orbit_cameras(
        vol.center_world, radius_factor * diag, count, fov_deg=fov_deg,
        resolution=resolution, near=0.5, far=6 * diag, elevation_deg=elevation,
    )


@pytest.fixture(scope="session")
def fixture_scene(request, demo_tf, grad_env):
    """Scene bundle factory cached per volume kind."""
    cache = {}

    def get(kind):
        if kind not in cache:
            vol = fs.make_procedural_volume(kind, (64, 64, 64))
            train_cams = standard_cameras(vol, 12)
            holdout_cams = standard_cameras(vol, 4, elevation=33.0)
            views = render_train_views(vol, demo_tf, grad_env, train_cams, spp=8, seed=11)
            holdout = render_train_views(vol, demo_tf, grad_env, holdout_cams, spp=32, seed=12)
            points = fs.generate_point_cloud(vol, demo_tf, grad_env, 20000, 64, seed=5)
            cache[kind] = {
                "vol": vol,
                "tf": demo_tf,
                "env": grad_env,
                "views": views,
                "holdout": holdout,
                "points": points,
            }
        return cache[kind]

    return get


@pytest.fixture(scope="session")
def sphere_initial_model(fixture_scene):
    sc = fixture_scene("sphere")
    cfg = fs.TrainConfig(total_iters=700, simplify_at=95, target_gaussians=10000, seed=3)
    return fs.initialize_model(sc["points"], sc["views"], cfg, settings_hash=42)


@pytest.fixture(scope="session")
def small_model():
    """Tiny hand-built model for serialization / rasterizer edge tests."""
    rng = np.random.default_rng(0)
    n = 64
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    q[q[:, 0] < 0] *= -1
    return fs.SplatModel(
        positions=rng.uniform(-10, 10, (n, 3)),
        log_scales=np.log(rng.uniform(0.5, 2.0, (n, 3))),
        rotations=q,
        opacity_logits=rng.normal(0, 1, n),
        rgbs=rng.uniform(0, 1, (n, 3)),
        generation=3,
        settings_hash=0xDEADBEEF,
    )
