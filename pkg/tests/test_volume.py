import numpy as np
import pytest
from hypothesis import given, strategies as st

import fovsplat as fs
from fovsplat.volume import (
    MalformedHeaderError,
    NonFiniteDataError,
    SizeMismatchError,
    centered_transform,
    shell_chord_length,
)


def test_sample_density_constant_volume_at_voxel_center():
    vol = fs.make_procedural_volume("homogeneous", (8, 8, 8), sigma=0.5)
    p = vol.voxel_center_world(3, 4, 2)
    assert fs.sample_density(vol, p) == pytest.approx(0.5)


def test_sample_density_outside_bounds_is_zero():
    vol = fs.make_procedural_volume("homogeneous", (8, 8, 8), sigma=0.9)
    assert fs.sample_density(vol, (100.0, 0.0, 0.0)) == 0.0
    assert fs.sample_density(vol, (-100.0, 3.0, 3.0)) == 0.0


def test_sample_density_midway_between_voxels():
    # neighbors 0 and 1 along x: halfway must interpolate to exactly 0.5
    data = np.zeros((1, 1, 2), dtype=np.float32)
    data[0, 0, 1] = 1.0
    vol = fs.Volume(dims=(2, 1, 1), spacing=(1, 1, 1), data=data)
    mid = 0.5 * (vol.voxel_center_world(0, 0, 0) + vol.voxel_center_world(1, 0, 0))
    assert fs.sample_density(vol, mid) == pytest.approx(0.5)


def test_sample_density_linear_along_axis():
    data = np.zeros((1, 1, 2), dtype=np.float32)
    data[0, 0, 1] = 1.0
    vol = fs.Volume(dims=(2, 1, 1), spacing=(1, 1, 1), data=data)
    c0 = vol.voxel_center_world(0, 0, 0)
    c1 = vol.voxel_center_world(1, 0, 0)
    for t in (0.0, 0.25, 0.5, 0.75, 1.0):
        p = (1 - t) * c0 + t * c1
        assert fs.sample_density(vol, p) == pytest.approx(t)


def test_volume_invariants_rejected():
    with pytest.raises(ValueError):
        fs.Volume(dims=(2, 2, 2), spacing=(1, 1, 1), data=np.zeros(7, dtype=np.float32))
    with pytest.raises(ValueError):
        fs.Volume(dims=(2, 2, 2), spacing=(0, 1, 1), data=np.zeros(8, dtype=np.float32))
    with pytest.raises(ValueError):
        fs.Volume(dims=(2, 2, 2), spacing=(1, 1, 1), data=np.full(8, 2.0, dtype=np.float32))


def test_eval_transfer_linear_table():
    tf = fs.TransferFunction.from_points([(0.0, (0, 0, 0, 0)), (1.0, (1, 1, 1, 1))])
    assert tf.eval(0.25) == pytest.approx([0.25, 0.25, 0.25, 0.25])


def test_eval_transfer_at_control_point():
    tf = fs.TransferFunction.from_points(
        [(0.0, (0, 0, 0, 0)), (0.4, (0.2, 0.8, 0.5, 0.3)), (1.0, (1, 1, 1, 1))]
    )
    assert tf.eval(0.4) == pytest.approx([0.2, 0.8, 0.5, 0.3])


def test_eval_transfer_three_point_segment():
    # between the 2nd and 3rd control points: hand-computed lerp at d=0.7,
    # halfway through [0.4, 1.0] -> mix(0.2, 1.0)=0.6, mix(0.8, 1.0)=0.9, ...
    tf = fs.TransferFunction.from_points(
        [(0.0, (0, 0, 0, 0)), (0.4, (0.2, 0.8, 0.5, 0.3)), (1.0, (1, 1, 1, 1))]
    )
    assert tf.eval(0.7) == pytest.approx([0.6, 0.9, 0.75, 0.65])


def test_eval_transfer_clamps_out_of_range():
    tf = fs.TransferFunction.from_points([(0.0, (0, 0, 0, 0)), (1.0, (1, 1, 1, 1))])
    assert tf.eval(-0.5) == pytest.approx([0, 0, 0, 0])
    assert tf.eval(1.5) == pytest.approx([1, 1, 1, 1])


def test_transfer_validation():
    with pytest.raises(ValueError):
        fs.TransferFunction.from_points([(0.1, (0, 0, 0, 0)), (1.0, (1, 1, 1, 1))])
    with pytest.raises(ValueError):
        fs.TransferFunction.from_points([(0.0, (0, 0, 0, 0)), (0.0, (1, 1, 1, 1))])


@given(
    st.lists(st.floats(0.0, 1.0), min_size=2, max_size=6),
    st.floats(0.0, 1.0),
    st.floats(0.0, 1.0),
)
def test_eval_transfer_monotone_when_controls_monotone(alphas, d1, d2):
    alphas = sorted(alphas)
    k = len(alphas)
    ds = np.linspace(0.0, 1.0, k)
    tf = fs.TransferFunction(ds, np.stack([alphas] * 4, axis=1))
    lo, hi = min(d1, d2), max(d1, d2)
    assert tf.eval(lo)[3] <= tf.eval(hi)[3] + 1e-12


def test_baked_lut_error_below_1e_3(demo_tf):
    lut = demo_tf.bake_lut(1024)
    grid = np.linspace(0, 1, 4097)
    exact = demo_tf.eval(grid)
    approx = np.stack(
        [np.interp(grid, np.linspace(0, 1, 1024), lut[:, c]) for c in range(4)], axis=1
    )
    assert np.abs(exact - approx).max() < 1e-3


def test_save_load_round_trip(tmp_path):
    vol = fs.make_procedural_volume("sphere", (2, 3, 4), spacing=(0.5, 1.0, 2.0))
    path = tmp_path / "v.vvol"
    fs.save_volume(vol, path)
    back = fs.load_volume(path)
    assert back.dims == vol.dims
    assert back.spacing == pytest.approx(vol.spacing)
    assert np.array_equal(back.data, vol.data)
    assert np.allclose(back.world_transform, vol.world_transform, atol=1e-6)


def test_load_truncated_file_is_size_mismatch(tmp_path):
    vol = fs.make_procedural_volume("homogeneous", (2, 2, 2))
    path = tmp_path / "v.vvol"
    fs.save_volume(vol, path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-4])
    with pytest.raises(SizeMismatchError):
        fs.load_volume(path)


def test_load_zero_dims_is_malformed_header(tmp_path):
    vol = fs.make_procedural_volume("homogeneous", (2, 2, 2))
    path = tmp_path / "v.vvol"
    fs.save_volume(vol, path)
    blob = bytearray(path.read_bytes())
    blob[8:12] = (0).to_bytes(4, "little")  # dims.x = 0
    path.write_bytes(bytes(blob))
    with pytest.raises(MalformedHeaderError):
        fs.load_volume(path)


def test_load_bad_magic_and_nonfinite(tmp_path):
    vol = fs.make_procedural_volume("homogeneous", (2, 2, 2))
    path = tmp_path / "v.vvol"
    fs.save_volume(vol, path)
    blob = bytearray(path.read_bytes())
    blob[:4] = b"XXXX"
    path.write_bytes(bytes(blob))
    with pytest.raises(MalformedHeaderError):
        fs.load_volume(path)
    fs.save_volume(vol, path)
    blob = bytearray(path.read_bytes())
    blob[-4:] = np.array([np.nan], dtype="<f4").tobytes()
    path.write_bytes(bytes(blob))
    with pytest.raises(NonFiniteDataError):
        fs.load_volume(path)


def test_procedural_homogeneous():
    vol = fs.make_procedural_volume("homogeneous", (8, 8, 8), sigma=0.5)
    assert np.all(vol.data == np.float32(0.5))


def test_procedural_sphere_center_and_corner():
    vol = fs.make_procedural_volume("sphere", (33, 33, 33))
    assert vol.data[16, 16, 16] == 1.0
    assert vol.data[0, 0, 0] == 0.0


def test_shell_center_ray_integral_matches_chord():
    vol = fs.make_procedural_volume("shell", (128, 128, 128))
    expected = shell_chord_length(vol.extent)
    # numeric line integral through the center along +x
    ts = np.linspace(-64, 64, 8001)
    pts = np.stack([ts, np.zeros_like(ts), np.zeros_like(ts)], axis=1)
    dens = fs.sample_density(vol, pts)
    integral = np.trapezoid(dens, ts)
    # voxelization + trilinear smoothing blur the shell edges by ~1 voxel
    assert integral == pytest.approx(expected, rel=0.12)


def test_transfer_function_json_round_trip(tmp_path, demo_tf):
    path = tmp_path / "tf.json"
    fs.save_transfer_function(demo_tf, path)
    back = fs.load_transfer_function(path)
    assert np.allclose(back.densities, demo_tf.densities)
    assert np.allclose(back.rgba, demo_tf.rgba)


def test_environment_map_validation_and_sampling():
    with pytest.raises(ValueError):
        fs.EnvironmentMap(np.full((2, 2, 3), -1.0))
    env = fs.EnvironmentMap.vertical_gradient((1, 0, 0), (0, 0, 1), resolution=(8, 16))
    up = env.sample(np.array([0.0, 1.0, 0.0]))
    down = env.sample(np.array([0.0, -1.0, 0.0]))
    assert up[0] > up[2] and down[2] > down[0]
