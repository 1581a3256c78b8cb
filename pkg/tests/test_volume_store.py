import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowplane import policy_net as pn
from flowplane.volume_store import (
    Checkpoint,
    FlowVolume4D,
    FormatError,
    NonFiniteError,
    ScalarVolume3D,
    ShapeMismatchError,
    TruncatedFileError,
    load_checkpoint,
    read_f4d,
    read_s3d,
    save_checkpoint,
    write_f4d,
    write_s3d,
)


def random_volume(rng, dims=(2, 4, 4, 4), venc=150.0):
    t, z, y, x = dims
    mag = rng.uniform(0, 2, dims)
    vel = rng.uniform(-100, 100, (t, 3, z, y, x))
    return FlowVolume4D(mag, vel, (1.5, 2.0, 2.5), venc)


def test_f4d_round_trip(tmp_path, rng):
    vol = random_volume(rng)
    write_f4d(vol, tmp_path / "v.f4d")
    back = read_f4d(tmp_path / "v.f4d")
    assert back.dims == vol.dims
    assert back.spacing == vol.spacing
    assert back.venc == vol.venc
    # equal up to 32-bit quantisation
    np.testing.assert_array_equal(back.magnitude, vol.magnitude.astype(np.float32))
    np.testing.assert_array_equal(back.velocity, vol.velocity.astype(np.float32))


def test_f4d_payload_size_from_header(tmp_path, rng):
    # [DERIVED] dims (2,4,4,4): four float32 grids of 2*64 values
    write_f4d(random_volume(rng), tmp_path / "v.f4d")
    blob = (tmp_path / "v.f4d").read_bytes()
    nl = blob.index(b"\n")
    header = json.loads(blob[:nl])
    assert header["magic"] == "F4D1"
    assert header["dims"] == [2, 4, 4, 4]
    assert len(blob) - nl - 1 == 4 * 2 * 64 * 4


def test_f4d_layout_is_little_endian_component_major(tmp_path, rng):
    vol = random_volume(rng)
    write_f4d(vol, tmp_path / "v.f4d")
    blob = (tmp_path / "v.f4d").read_bytes()
    payload = np.frombuffer(blob[blob.index(b"\n") + 1:], dtype="<f4").reshape(4, 2, 4, 4, 4)
    np.testing.assert_array_equal(payload[0], vol.magnitude.astype(np.float32))
    for j in range(3):
        np.testing.assert_array_equal(payload[1 + j], vol.velocity[:, j].astype(np.float32))


def test_f4d_rejects_nan(tmp_path, rng):
    vol = random_volume(rng)
    vol.velocity[0, 1, 2, 2, 2] = np.nan
    with pytest.raises(NonFiniteError):
        write_f4d(vol, tmp_path / "v.f4d")
    assert not (tmp_path / "v.f4d").exists()


def test_f4d_bad_magic(tmp_path, rng):
    write_f4d(random_volume(rng), tmp_path / "v.f4d")
    blob = (tmp_path / "v.f4d").read_bytes().replace(b"F4D1", b"XXXX", 1)
    (tmp_path / "bad.f4d").write_bytes(blob)
    with pytest.raises(FormatError):
        read_f4d(tmp_path / "bad.f4d")


def test_f4d_truncated(tmp_path, rng):
    write_f4d(random_volume(rng), tmp_path / "v.f4d")
    blob = (tmp_path / "v.f4d").read_bytes()
    (tmp_path / "short.f4d").write_bytes(blob[:-4])
    with pytest.raises(TruncatedFileError):
        read_f4d(tmp_path / "short.f4d")
    (tmp_path / "long.f4d").write_bytes(blob + b"\0\0\0\0")
    with pytest.raises(FormatError):
        read_f4d(tmp_path / "long.f4d")


def test_f4d_negative_spacing(tmp_path, rng):
    write_f4d(random_volume(rng), tmp_path / "v.f4d")
    blob = (tmp_path / "v.f4d").read_bytes()
    nl = blob.index(b"\n")
    header = json.loads(blob[:nl])
    header["spacing"][1] = -2.0
    (tmp_path / "neg.f4d").write_bytes(json.dumps(header).encode() + blob[nl:])
    with pytest.raises(FormatError):
        read_f4d(tmp_path / "neg.f4d")


def test_read_clamps_to_venc(tmp_path, rng):
    vol = random_volume(rng, venc=50.0)
    write_f4d(vol, tmp_path / "v.f4d")
    back = read_f4d(tmp_path / "v.f4d")
    assert np.abs(back.velocity).max() <= 50.0


def test_s3d_round_trip(tmp_path, rng):
    v = ScalarVolume3D(rng.normal(size=(3, 4, 5)), (1.0, 2.0, 3.0))
    write_s3d(v, tmp_path / "s.s3d")
    back = read_s3d(tmp_path / "s.s3d")
    np.testing.assert_array_equal(back.values, v.values.astype(np.float32))
    assert back.spacing == v.spacing


def test_scalar_volume_rejects_nonfinite():
    with pytest.raises(NonFiniteError):
        ScalarVolume3D(np.full((2, 2, 2), np.inf), (1, 1, 1))


def test_velocity_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        FlowVolume4D(np.zeros((2, 3, 3, 3)), np.zeros((2, 3, 3, 3, 4)), (1, 1, 1), 10)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-1e300, 1e300, allow_nan=False), min_size=1, max_size=20),
       st.integers(0, 10 ** 9))
def test_checkpoint_bit_exact(tmp_path_factory, values, step):
    path = tmp_path_factory.mktemp("ck") / "c.ckpt"
    params = {"a": np.array(values), "b.w": np.arange(6.0).reshape(2, 3) / 7.0}
    save_checkpoint(Checkpoint(params, step, 0.125, {"k": 1}), path)
    back = load_checkpoint(path)
    assert back.step == step and back.score == 0.125 and back.config == {"k": 1}
    for k in params:
        assert back.params[k].tobytes() == params[k].tobytes()


def test_checkpoint_untrained_sentinel(tmp_path):
    save_checkpoint(Checkpoint({"x": np.zeros(3)}), tmp_path / "c.ckpt")
    back = load_checkpoint(tmp_path / "c.ckpt")
    assert back.step == 0 and math.isinf(back.score) and back.untrained


def test_checkpoint_shape_mismatch_against_network(tmp_path, rng):
    small = pn.NetworkConfig(state_dims=(5, 8, 8), widths=(4, 8, 8, 8), latent=16, lstm=8)
    wider = pn.NetworkConfig(state_dims=(5, 8, 8), widths=(6, 8, 8, 8), latent=16, lstm=8)
    save_checkpoint(Checkpoint(pn.init_params(small, rng)), tmp_path / "c.ckpt")
    expected = pn.init_params(wider, rng)
    with pytest.raises(ShapeMismatchError):
        load_checkpoint(tmp_path / "c.ckpt", expected)


def test_checkpoint_missing_array(tmp_path):
    save_checkpoint(Checkpoint({"x": np.zeros(3)}), tmp_path / "c.ckpt")
    with pytest.raises(KeyError):
        load_checkpoint(tmp_path / "c.ckpt", {"x": np.zeros(3), "y": np.zeros(2)})


def test_checkpoint_truncated(tmp_path):
    save_checkpoint(Checkpoint({"x": np.arange(4.0)}), tmp_path / "c.ckpt")
    blob = (tmp_path / "c.ckpt").read_bytes()
    (tmp_path / "t.ckpt").write_bytes(blob[:-8])
    with pytest.raises(TruncatedFileError):
        load_checkpoint(tmp_path / "t.ckpt")
