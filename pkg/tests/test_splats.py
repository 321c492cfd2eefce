import numpy as np
import pytest

import fovsplat as fs
from fovsplat.splats import (
    BadMagicError,
    RECORD_SIZE,
    TruncatedError,
    VersionMismatchError,
    compute_settings_hash,
    sigmoid,
)


def test_round_trip_within_quantization_steps(small_model):
    m = small_model
    back = fs.deserialize(fs.serialize(m))
    assert back.generation == m.generation
    assert back.settings_hash == m.settings_hash
    assert np.allclose(back.positions, m.positions, atol=1e-4)
    scale_step = (m.log_scales.max() - m.log_scales.min()) / 255.0
    assert np.abs(back.log_scales - m.log_scales).max() <= scale_step
    assert np.abs(back.rgbs - m.rgbs).max() <= 1.0 / 255.0
    assert np.abs(sigmoid(back.opacity_logits) - sigmoid(m.opacity_logits)).max() <= 1.0 / 256.0
    # quaternions are renormalized after 1/127 quantization
    assert np.abs(back.rotations - m.rotations).max() <= 1.5 / 127.0


def test_serialize_is_byte_idempotent(small_model):
    blob1 = fs.serialize(small_model)
    once = fs.deserialize(blob1)
    blob2 = fs.serialize(once)
    assert blob2 == blob1
    twice = fs.deserialize(blob2)
    for attr in ("positions", "log_scales", "rotations", "opacity_logits", "rgbs"):
        assert np.array_equal(getattr(once, attr), getattr(twice, attr))


def test_ten_thousand_gaussians_under_one_megabyte():
    rng = np.random.default_rng(1)
    n = 10000
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    m = fs.SplatModel(
        positions=rng.uniform(-50, 50, (n, 3)),
        log_scales=rng.uniform(-2, 1, (n, 3)),
        rotations=q,
        opacity_logits=rng.normal(size=n),
        rgbs=rng.uniform(0, 1, (n, 3)),
    )
    blob = fs.serialize(m)
    assert len(blob) < 1_000_000
    from fovsplat.splats import HEADER_SIZE
    assert len(blob) == HEADER_SIZE + n * RECORD_SIZE


def test_empty_model_serialization_error():
    m = fs.SplatModel(
        positions=np.zeros((0, 3)),
        log_scales=np.zeros((0, 3)),
        rotations=np.zeros((0, 4)),
        opacity_logits=np.zeros(0),
        rgbs=np.zeros((0, 3)),
    )
    with pytest.raises(ValueError):
        fs.serialize(m)


def test_deserialize_distinct_errors(small_model):
    blob = fs.serialize(small_model)
    with pytest.raises(BadMagicError):
        fs.deserialize(b"XSPL" + blob[4:])
    bad_version = blob[:4] + (9).to_bytes(4, "little") + blob[8:]
    with pytest.raises(VersionMismatchError):
        fs.deserialize(bad_version)
    with pytest.raises(TruncatedError):
        fs.deserialize(blob[:-3])
    with pytest.raises(TruncatedError):
        fs.deserialize(blob[:10])


def test_model_invariants():
    with pytest.raises(ValueError):
        fs.SplatModel(
            positions=np.zeros((1, 3)),
            log_scales=np.zeros((1, 3)),
            rotations=np.array([[2.0, 0, 0, 0]]),
            opacity_logits=np.zeros(1),
            rgbs=np.zeros((1, 3)),
        )
    g = fs.Gaussian(
        position=(0, 0, 0), log_scale=(0, 0, 0), rotation=(1, 0, 0, 0), opacity_logit=0.0, rgb=(1, 0, 0)
    )
    assert g.opacity == pytest.approx(0.5)


def test_viewer_boost_identity(small_model):
    out = fs.apply_viewer_boost(small_model, 1.0, 1.0)
    assert np.array_equal(out.log_scales, small_model.log_scales)
    assert np.array_equal(out.opacity_logits, small_model.opacity_logits)


def test_viewer_boost_ten_percent():
    m = fs.SplatModel(
        positions=np.zeros((1, 3)),
        log_scales=np.zeros((1, 3)),
        rotations=np.array([[1.0, 0, 0, 0]]),
        opacity_logits=np.array([0.0]),  # opacity 0.5
        rgbs=np.zeros((1, 3)),
    )
    out = fs.apply_viewer_boost(m, 1.1, 1.1)
    assert sigmoid(out.opacity_logits)[0] == pytest.approx(0.55)
    assert np.exp(out.log_scales[0, 0]) == pytest.approx(1.1)


def test_viewer_boost_clamps_below_one():
    m = fs.SplatModel(
        positions=np.zeros((1, 3)),
        log_scales=np.zeros((1, 3)),
        rotations=np.array([[1.0, 0, 0, 0]]),
        opacity_logits=np.array([float(np.log(0.95 / 0.05))]),
        rgbs=np.zeros((1, 3)),
    )
    out = fs.apply_viewer_boost(m, 1.1, 1.1)
    op = sigmoid(out.opacity_logits)[0]
    assert op < 1.0
    assert np.isfinite(out.opacity_logits[0])


def test_boost_identity_preserves_render(small_model):
    cam = fs.look_at((0, 0, 50), (0, 0, 0), fov_deg=45, resolution=(32, 32), near=0.5, far=500)
    a = fs.rasterize(small_model, cam, (0.1, 0.1, 0.1))
    b = fs.rasterize(fs.apply_viewer_boost(small_model, 1.0, 1.0), cam, (0.1, 0.1, 0.1))
    assert np.array_equal(a.rgb, b.rgb)


def test_settings_hash_sensitivity():
    h1 = compute_settings_hash(b'[{"d":0,"rgba":[0,0,0,0]}]', None)
    h2 = compute_settings_hash(b'[{"d":0,"rgba":[0,0,0,1]}]', None)
    h3 = compute_settings_hash(b'[{"d":0,"rgba":[0,0,0,0]}]', np.array([[1, 0, 0, 0.5]]))
    assert h1 != h2 and h1 != h3
    assert h1 == compute_settings_hash(b'[{"d":0,"rgba":[0,0,0,0]}]', None)


def test_save_load_model(tmp_path, small_model):
    fs.save_model(small_model, tmp_path / "m.fspl")
    back = fs.load_model(tmp_path / "m.fspl")
    assert len(back) == len(small_model)
    assert back.generation == small_model.generation
