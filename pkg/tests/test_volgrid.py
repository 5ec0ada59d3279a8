import itertools
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from tubeskel.volgrid import (
    BadMagicError,
    PayloadLengthError,
    UnknownDtypeError,
    Volume,
    VolumeError,
    connected_components,
    euclidean_distance_transform,
    read_volume,
    write_volume,
)


def brute_edt(mask, spacing=(1.0, 1.0, 1.0)):
    fg = np.argwhere(mask)
    bg = np.argwhere(~mask)
    out = np.zeros(mask.shape)
    sp = np.asarray(spacing)
    for p in fg:
        out[tuple(p)] = np.sqrt((((bg - p) * sp) ** 2).sum(axis=1).min())
    return out


masks = hnp.arrays(bool, hnp.array_shapes(min_dims=3, max_dims=3, min_side=1, max_side=7))


def test_single_voxel_edt():
    m = np.zeros((3, 3, 3), bool)
    m[1, 1, 1] = True
    assert euclidean_distance_transform(Volume(m)).data[1, 1, 1] == 1.0


def test_plane_edt():
    m = np.zeros((5, 6, 7), bool)
    m[2] = True
    d = euclidean_distance_transform(Volume(m)).data
    assert np.all(d[2] == 1.0) and np.all(d[m == 0] == 0)


def test_cube_centre_matches_brute_force():
    m = np.zeros((13, 13, 13), bool)
    m[2:11, 2:11, 2:11] = True
    d = euclidean_distance_transform(Volume(m)).data
    assert d[6, 6, 6] == pytest.approx(brute_edt(m)[6, 6, 6], abs=1e-5)
    assert d[6, 6, 6] == pytest.approx(5.0)


def test_anisotropic_spacing():
    rng = np.random.default_rng(3)
    m = rng.uniform(size=(8, 9, 10)) < 0.7
    sp = (2.0, 0.5, 1.25)
    d = euclidean_distance_transform(Volume(m, sp)).data
    np.testing.assert_allclose(d, brute_edt(m, sp), atol=1e-5)
    # explicit spacing argument overrides the volume's
    d2 = euclidean_distance_transform(Volume(m), spacing=sp).data
    np.testing.assert_allclose(d2, d, atol=1e-6)


def test_all_foreground_is_error():
    with pytest.raises(VolumeError):
        euclidean_distance_transform(Volume(np.ones((3, 3, 3), bool)))


@settings(max_examples=60, deadline=None)
@given(masks)
def test_edt_matches_brute_force(m):
    if m.all() or not m.any():
        return
    d = euclidean_distance_transform(Volume(m)).data
    np.testing.assert_allclose(d, brute_edt(m), atol=1e-5)


@settings(max_examples=40, deadline=None)
@given(masks, st.integers(0, 2**31 - 1))
def test_edt_non_increasing_under_removal(m, seed):
    if m.all() or not m.any():
        return
    rng = np.random.default_rng(seed)
    smaller = m & (rng.uniform(size=m.shape) < 0.7)
    before = euclidean_distance_transform(Volume(m)).data
    after = euclidean_distance_transform(Volume(smaller)).data
    assert np.all(after[smaller] <= before[smaller] + 1e-6)


def test_components_basic():
    assert connected_components(Volume(np.zeros((4, 4, 4), bool))).count == 0
    m = np.zeros((4, 4, 4), bool)
    m[0, 0, 0] = m[1, 1, 1] = True
    assert connected_components(Volume(m)).count == 1
    m = np.zeros((10, 4, 4), bool)
    m[0:3] = True
    m[5:8] = True
    lab = connected_components(Volume(m))
    assert lab.count == 2
    assert set(np.unique(lab.labels)) == {0, 1, 2}


@settings(max_examples=40, deadline=None)
@given(masks, st.permutations([0, 1, 2]), st.lists(st.booleans(), min_size=3, max_size=3))
def test_component_count_invariant_under_symmetry(m, perm, flips):
    t = np.transpose(m, perm)
    for ax, f in enumerate(flips):
        if f:
            t = np.flip(t, ax)
    assert connected_components(Volume(np.ascontiguousarray(t))).count == connected_components(Volume(m)).count


@settings(max_examples=30, deadline=None)
@given(masks)
def test_components_partition_foreground(m):
    lab = connected_components(Volume(m))
    assert np.array_equal(lab.labels > 0, m)
    for k in range(1, lab.count + 1):
        assert (lab.labels == k).any()


@pytest.mark.parametrize("kind", ["mask", "scalar", "vec3"])
def test_round_trip(tmp_path, kind):
    rng = np.random.default_rng(0)
    data = {
        "mask": rng.uniform(size=(4, 4, 4)) < 0.5,
        "scalar": rng.normal(size=(3, 4, 5)).astype(np.float32),
        "vec3": rng.normal(size=(3, 4, 5, 3)).astype(np.float32),
    }[kind]
    v = Volume(data, (1.0, 0.5, 2.0))
    write_volume(v, tmp_path / "v.vvol")
    back = read_volume(tmp_path / "v.vvol")
    assert back == v and back.kind == kind


def test_file_layout(tmp_path):
    m = np.zeros((2, 3, 4), bool)
    m[1, 2, 3] = True
    write_volume(Volume(m), tmp_path / "m.vvol")
    raw = (tmp_path / "m.vvol").read_bytes()
    assert raw[:5] == b"VVOL1"
    code, nz, ny, nx, sz, sy, sx = struct.unpack_from("<B3I3f", raw, 5)
    assert (code, nz, ny, nx, sz, sy, sx) == (0, 2, 3, 4, 1.0, 1.0, 1.0)
    body = raw[5 + struct.calcsize("<B3I3f"):]
    assert len(body) == 24 and body[-1] == 1 and sum(body) == 1


def test_read_errors(tmp_path):
    v = Volume(np.ones((4, 4, 4), np.float32))
    write_volume(v, tmp_path / "ok.vvol")
    raw = (tmp_path / "ok.vvol").read_bytes()
    (tmp_path / "magic.vvol").write_bytes(b"XVOL1" + raw[5:])
    (tmp_path / "trunc.vvol").write_bytes(raw[:-3])
    (tmp_path / "dtype.vvol").write_bytes(raw[:5] + bytes([7]) + raw[6:])
    with pytest.raises(BadMagicError):
        read_volume(tmp_path / "magic.vvol")
    with pytest.raises(PayloadLengthError, match="payload length mismatch"):
        read_volume(tmp_path / "trunc.vvol")
    with pytest.raises(UnknownDtypeError, match="unknown dtype"):
        read_volume(tmp_path / "dtype.vvol")
    errors = [BadMagicError, PayloadLengthError, UnknownDtypeError]
    for a, b in itertools.combinations(errors, 2):
        assert not issubclass(a, b) and not issubclass(b, a)


def test_volume_validation():
    with pytest.raises(VolumeError):
        Volume(np.zeros((2, 2), bool))
    with pytest.raises(VolumeError):
        Volume(np.zeros((2, 2, 2), bool), (1.0, 0.0, 1.0))
    v = Volume(np.zeros((2, 2, 2), bool))
    with pytest.raises(ValueError):
        v.data[0, 0, 0] = True
