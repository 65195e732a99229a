from concurrent.futures import ThreadPoolExecutor

import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mpunet.multiplanar import (PlaneSamplingError, PlaneSet, extract_slices, export_stack,
                                in_plane_basis, line_angles_deg, map_back, sample_plane_set)
from mpunet.volume import LABEL, PhantomSpec, Volume, make_phantom


def _frame_ok(v, u1, u2, tol=1e-9):
    m = np.stack([v, u1, u2])
    return (np.allclose(m @ m.T, np.eye(3), atol=tol)
            and abs(np.linalg.det(m) - 1.0) <= tol
            and np.allclose(np.cross(v, u1), u2, atol=tol))


def test_single_view_is_sagittal():
    ps = sample_plane_set(1, seed=77)
    assert ps.k == 1
    assert np.array_equal(ps.vectors[0], [1.0, 0.0, 0.0])


@pytest.mark.parametrize("k", [3, 6])
def test_plane_set_invariants_over_seeds(k):
    for seed in range(100):
        ps = sample_plane_set(k, seed=seed)
        assert np.all(np.abs(np.linalg.norm(ps.vectors, axis=1) - 1) <= 1e-9)
        assert line_angles_deg(ps.vectors).min() >= 60.0 - 1e-9
        for v, (u1, u2) in zip(ps.vectors, ps.in_plane_bases):
            assert _frame_ok(v, u1, u2)


def test_plane_set_is_deterministic():
    a, b = sample_plane_set(6, seed=5), sample_plane_set(6, seed=5)
    assert np.array_equal(a.vectors, b.vectors)
    assert not np.array_equal(a.vectors, sample_plane_set(6, seed=6).vectors)


def test_infeasible_angle_exhausts_budget():
    # at most three mutually (near-)orthogonal lines exist in 3-space
    with pytest.raises(PlaneSamplingError):
        sample_plane_set(6, seed=0, min_angle_deg=89.9, max_restarts=20)


def test_invalid_k():
    with pytest.raises(ValueError):
        sample_plane_set(2)


def test_line_angle_ignores_sign():
    assert line_angles_deg([[1, 0, 0], [-1, 0, 0]])[0] == pytest.approx(0.0)
    assert line_angles_deg([[1, 0, 0], [-0.5, np.sqrt(3) / 2, 0]])[0] == pytest.approx(60.0)


@given(st.lists(st.floats(-1, 1), min_size=3, max_size=3).filter(
    lambda x: np.linalg.norm(x) > 1e-3))
def test_in_plane_basis_right_handed(x):
    v = np.asarray(x) / np.linalg.norm(x)
    assert _frame_ok(v, *in_plane_basis(v))


def test_plane_set_dict_round_trip():
    ps = sample_plane_set(3, seed=2)
    back = PlaneSet.from_dict(json.loads(json.dumps(ps.to_dict())))
    assert np.array_equal(back.vectors, ps.vectors)
    for (a1, a2), (b1, b2) in zip(ps.in_plane_bases, back.in_plane_bases):
        assert np.array_equal(a1, b1) and np.array_equal(a2, b2)


# ------------------------------------------------------------ extraction

def _volume(rng, shape=(6, 5, 4), spacing=(1, 1, 1), origin=(0, 0, 0)):
    return Volume(rng.normal(size=shape).astype(np.float32), spacing, origin)


def test_axis_aligned_slices_are_native_planes(rng):
    v = _volume(rng)
    ps = PlaneSet.from_vectors([[0, 0, 1], [1, 0, 0]])
    axial = extract_slices(v, ps, 0, target_size=(6, 5), grid_spacing=1.0)
    assert axial.images.shape == (4, 6, 5)
    for s in range(4):
        assert np.array_equal(axial.images[s], v.data[:, :, s])
    sag = extract_slices(v, ps, 1, target_size=(5, 4), grid_spacing=1.0)
    for s in range(6):
        assert np.array_equal(sag.images[s], v.data[s])


def test_affine_field_is_reproduced_on_oblique_views():
    shape, spacing, origin = (9, 11, 7), (1.0, 0.8, 1.3), (2.0, -1.0, 0.5)
    vol = Volume(np.zeros(shape), spacing, origin)
    grid = vol.world_grid()
    f = lambda p: 2 * p[..., 0] + 3 * p[..., 1] - p[..., 2]  # noqa: E731
    vol = Volume(f(grid), spacing, origin)  # float64 keeps the check at 1e-5 meaningful
    ps = sample_plane_set(3, seed=11)
    lo = np.asarray(origin)
    hi = lo + (np.asarray(shape) - 1) * np.asarray(spacing)
    checked = 0
    for view in range(3):
        st_ = extract_slices(vol, ps, view, grid_spacing=0.9)
        pts = st_.grid_points
        inside = np.all((pts >= lo) & (pts <= hi), axis=-1)
        expect = f(pts)[inside]
        got = st_.images[inside]
        assert np.max(np.abs(got - expect) / np.maximum(np.abs(expect), 1.0)) <= 1e-5
        checked += inside.sum()
    assert checked > 500


def test_constant_label_volume(rng):
    v = _volume(rng, (8, 8, 8))
    lab = Volume(np.full((8, 8, 8), 2, np.uint8), kind=LABEL, num_classes=3)
    ps = sample_plane_set(3, seed=4)
    st_ = extract_slices(v, ps, 1, label=lab)
    q = v.world_to_voxel(st_.grid_points)
    inside = np.all((q >= -0.5) & (q <= 7.5), axis=-1)
    assert np.all(st_.labels[inside] == 2)
    assert np.all(st_.labels[~inside] == 0)
    assert np.all(st_.images[~inside] == 0)


def test_grid_points_spacing_is_isotropic(rng):
    v = _volume(rng, (8, 9, 10), (0.7, 1.0, 1.4))
    st_ = extract_slices(v, sample_plane_set(3, seed=0), 2)
    pts = st_.grid_points
    for axis in range(3):
        d = np.linalg.norm(np.diff(pts, axis=axis), axis=-1)
        assert np.allclose(d, 0.7)


def test_extract_errors(rng):
    ps = sample_plane_set(1)
    with pytest.raises(ValueError):
        extract_slices(Volume(np.zeros((1, 4, 4))), ps, 0)
    with pytest.raises(ValueError):
        extract_slices(_volume(rng), ps, 0, grid_spacing=0.0)
    with pytest.raises(ValueError):
        extract_slices(_volume(rng), ps, 0, target_size=(0, 4))


def test_parallel_extraction_is_bitwise_sequential(rng):
    v = _volume(rng, (10, 10, 10))
    ps = sample_plane_set(6, seed=3)
    seq = [extract_slices(v, ps, i).images for i in range(6)]
    with ThreadPoolExecutor(3) as pool:
        par = list(pool.map(lambda i: extract_slices(v, ps, i).images, range(6)))
    assert all(a.tobytes() == b.tobytes() for a, b in zip(seq, par))


# ------------------------------------------------------------- map_back

def _brute_force_map_back(pred, stack, target):
    """Nearest lattice point by exhaustive search; ties to the lowest flat index."""
    pts = stack.grid_points.reshape(-1, 3)
    flat = pred.reshape(len(pts), -1)
    out = np.empty(target.shape + (flat.shape[1],))
    for idx, p in zip(np.ndindex(*target.shape), target.world_grid().reshape(-1, 3)):
        d = np.linalg.norm(pts - p, axis=1)
        best = np.flatnonzero(d <= d.min() + 1e-9)[0]
        if d[best] > stack.grid_spacing * (1 + 1e-9):
            out[idx] = np.eye(flat.shape[1])[0]
        else:
            out[idx] = flat[best]
    return out


def test_map_back_matches_brute_force_oblique(rng):
    v = _volume(rng, (7, 6, 5), (1.0, 1.2, 0.9), (3.0, 1.0, -2.0))
    ps = sample_plane_set(3, seed=8)
    for view in range(3):
        st_ = extract_slices(v, ps, view, target_size=(6, 6), grid_spacing=1.1)
        pred = rng.random(st_.lattice_shape + (3,))
        assert np.array_equal(map_back(pred, st_, v), _brute_force_map_back(pred, st_, v))


def test_map_back_tie_goes_to_lower_index(rng):
    # grid spacing 2 on a unit grid: odd voxels sit exactly between two lattice points
    v = _volume(rng, (5, 5, 5))
    st_ = extract_slices(v, PlaneSet.from_vectors([[1, 0, 0]]), 0, target_size=(3, 3),
                         grid_spacing=2.0)
    n, w, h = st_.lattice_shape
    code = np.arange(n * w * h, dtype=float).reshape(n, w, h, 1)
    out = map_back(code, st_, v)[..., 0]
    assert out[1, 0, 0] == code[0, 0, 0, 0]   # between slices 0 and 1
    assert out[3, 0, 0] == code[1, 0, 0, 0]   # between slices 1 and 2
    assert out[1, 1, 1] == code[0, 0, 0, 0]   # eight-way tie
    assert np.array_equal(out[..., None], _brute_force_map_back(code, st_, v))


def test_axis_aligned_round_trip_is_exact():
    image, label = make_phantom(PhantomSpec((12, 10, 8), (1, 1, 1), 3, (0.3, 0.6, 0.9)))
    ps = PlaneSet.from_vectors([[1, 0, 0], [0, 1, 0], [0, 0, 1]])
    onehot = np.eye(4)[label.data]
    for view in range(3):
        st_ = extract_slices(image, ps, view, grid_spacing=1.0, label=label)
        back = map_back(np.eye(4)[st_.labels], st_, label)
        assert np.array_equal(back, onehot)


def test_map_back_constant_and_normalised(rng):
    v = _volume(rng, (8, 8, 8))
    st_ = extract_slices(v, sample_plane_set(3, seed=1), 0, grid_spacing=1.0)
    q = np.array([0.2, 0.5, 0.3])
    out = map_back(np.broadcast_to(q, st_.lattice_shape + (3,)).copy(), st_, v)
    assert np.allclose(out, q)
    probs = rng.random(st_.lattice_shape + (3,))
    probs /= probs.sum(-1, keepdims=True)
    assert np.allclose(map_back(probs, st_, v).sum(-1), 1.0, atol=1e-6)


def test_map_back_far_voxels_get_background(rng):
    v = _volume(rng, (12, 12, 12))
    # a 2x2 in-plane patch leaves most of each plane uncovered
    st_ = extract_slices(v, PlaneSet.from_vectors([[0, 0, 1]]), 0, target_size=(2, 2),
                         grid_spacing=1.0)
    out = map_back(np.full(st_.lattice_shape + (2,), 0.5), st_, v)
    assert np.array_equal(out[0, 0, 0], [1.0, 0.0])
    assert np.array_equal(out[5, 5, 0], [0.5, 0.5])


def test_map_back_errors(rng):
    v = _volume(rng)
    st_ = extract_slices(v, sample_plane_set(1), 0)
    with pytest.raises(ValueError, match="empty"):
        map_back(np.zeros((0, 5, 4, 2)), st_, v)
    with pytest.raises(ValueError):
        map_back(np.zeros((2, 5, 4, 2)), st_, v)


def test_oblique_round_trip_on_sphere():
    image, label = make_phantom(PhantomSpec((32, 32, 32), (1, 1, 1), 1, (0.5,)))
    ps = sample_plane_set(3, seed=0)
    for view in range(3):
        st_ = extract_slices(image, ps, view, label=label)
        back = np.argmax(map_back(np.eye(2)[st_.labels], st_, label), axis=-1)
        assert np.mean(back == label.data) >= 0.99


def test_export_stack(tmp_path, rng):
    v = _volume(rng, (6, 6, 6))
    lab = Volume(np.ones((6, 6, 6), np.uint8), kind=LABEL)
    st_ = extract_slices(v, sample_plane_set(3, seed=0), 0, label=lab)
    export_stack(st_, tmp_path)
    geo = json.loads((tmp_path / "geometry.json").read_text())
    assert geo["lattice_shape"] == list(st_.lattice_shape)
    n = st_.lattice_shape[0]
    assert len(list(tmp_path.glob("slice_*_image.hdr"))) == n
    assert len(list(tmp_path.glob("slice_*_label.hdr"))) == n
    from mpunet.volume import read_container
    data, hdr = read_container(tmp_path / "slice_0001_image")
    assert hdr["shape"] == st_.images.shape[1:]
    assert np.array_equal(data, st_.images[1].astype(np.float32))
