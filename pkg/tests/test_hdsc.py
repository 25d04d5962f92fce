import itertools

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from unicon.errors import ShapeError
from unicon.hdsc import (
    concat_coord_planes,
    concat_coords,
    coord_extents,
    coord_planes,
    dense_coords,
    hdsc_plan,
)
from unicon.sampling import CropBox


def reference_matrices(box, H, W, Z):
    """Relative i/j/k coordinate matrices built entry by entry."""
    h, w = box.b - box.t, box.r - box.l
    i = np.empty((h, w))
    j = np.empty((h, w))
    for m in range(h):
        for n in range(w):
            i[m, n] = (box.l + n) / W
            j[m, n] = (box.t + m) / H
    k = np.full((h, w), box.z / Z)
    return i, j, k


def test_i_plane_columns():
    g = dense_coords(CropBox(0, 3, 2, 6, 0), H=5, W=8, Z=1)
    assert g.resolution == (3, 4)
    for row in g.i_plane:
        np.testing.assert_array_equal(row, [0.25, 0.375, 0.5, 0.625])


def test_k_plane_constant():
    g = dense_coords(CropBox(0, 4, 0, 4, 5), H=4, W=4, Z=10)
    assert np.all(g.k_plane == 0.5)


def test_downsampled_corners():
    g = dense_coords(CropBox(0, 3, 2, 6, 0), H=5, W=8, Z=1, resolution=(3, 2))
    np.testing.assert_allclose(g.i_plane[0], [0.25, 0.625])


def corner_aligned_resample(plane, out_w):
    """Linear interpolation of each row at corner-aligned sample positions."""
    w = plane.shape[1]
    src = np.linspace(0, w - 1, out_w) if out_w > 1 else np.array([0.0])
    return np.stack([np.interp(src, np.arange(w), row) for row in plane])


def test_analytic_grid_equals_resampled_native():
    box = CropBox(3, 19, 5, 37, 2)
    native = dense_coords(box, 40, 50, 6)
    for out_w in (1, 2, 3, 8, 16, 32):
        g = dense_coords(box, 40, 50, 6, (16, out_w))
        np.testing.assert_allclose(g.i_plane, corner_aligned_resample(native.i_plane, out_w), atol=1e-15)


def test_exhaustive_native_matches_matrices():
    H, W, Z = 8, 8, 4
    n = 0
    for t, b in itertools.combinations(range(H + 1), 2):
        for l, r in itertools.combinations(range(W + 1), 2):  # noqa: E741
            for z in range(Z):
                box = CropBox(t, b, l, r, z)
                g = dense_coords(box, H, W, Z)
                i, j, k = reference_matrices(box, H, W, Z)
                np.testing.assert_allclose(g.i_plane, i, rtol=0, atol=1e-15)
                np.testing.assert_allclose(g.j_plane, j, rtol=0, atol=1e-15)
                np.testing.assert_array_equal(g.k_plane, k)
                assert g.stack().min() >= 0 and g.stack().max() <= 1
                n += 1
    assert n == 36 * 36 * 4


@st.composite
def box_and_res(draw):
    H = draw(st.integers(1, 200))
    W = draw(st.integers(1, 200))
    Z = draw(st.integers(1, 40))
    t = draw(st.integers(0, H - 1))
    b = draw(st.integers(t + 1, H))
    l = draw(st.integers(0, W - 1))  # noqa: E741
    r = draw(st.integers(l + 1, W))
    res = (draw(st.integers(1, 64)), draw(st.integers(1, 64)))
    return CropBox(t, b, l, r, draw(st.integers(0, Z - 1))), H, W, Z, res


@given(box_and_res())
def test_grid_invariants(case):
    box, H, W, Z, res = case
    g = dense_coords(box, H, W, Z, res)
    planes = g.stack()
    assert planes.shape == (3, *res)
    assert planes.min() >= 0 and planes.max() <= 1
    assert np.all(g.i_plane == g.i_plane[:1])  # rows identical
    assert np.all(g.j_plane == g.j_plane[:, :1])  # columns identical
    assert np.all(g.k_plane == g.k_plane[0, 0])
    if box.r - box.l >= 2 and res[1] >= 2:
        assert np.all(np.diff(g.i_plane[0]) > 0)
    if box.b - box.t >= 2 and res[0] >= 2:
        assert np.all(np.diff(g.j_plane[:, 0]) > 0)
    # corners survive resampling; a single sample keeps the first corner
    native = dense_coords(box, H, W, Z)
    assert g.i_plane[0, 0] == native.i_plane[0, 0] and g.j_plane[0, 0] == native.j_plane[0, 0]
    if res[1] >= 2:
        assert g.i_plane[-1, -1] == native.i_plane[-1, -1]
    if res[0] >= 2:
        assert g.j_plane[-1, -1] == native.j_plane[-1, -1]


def test_same_content_different_position():
    a = dense_coords(CropBox(0, 16, 0, 16, 3), 64, 64, 8, (4, 4))
    b = dense_coords(CropBox(10, 26, 20, 36, 3), 64, 64, 8, (4, 4))
    assert not np.array_equal(a.stack(), b.stack())


def test_concat_coords(rng):
    feats = rng.random((8, 4, 6))
    g = dense_coords(CropBox(2, 10, 1, 13, 1), 12, 14, 3, (4, 6))
    out = concat_coords(feats, g)
    assert out.shape == (11, 4, 6)
    assert np.array_equal(out[:8], feats)
    assert np.array_equal(out[8], g.i_plane)
    assert np.array_equal(out[9], g.j_plane)
    assert np.array_equal(out[10], g.k_plane)


def test_concat_coords_shape_error(rng):
    g = dense_coords(CropBox(0, 4, 0, 4, 0), 4, 4, 1)
    with pytest.raises(ShapeError):
        concat_coords(rng.random((2, 3, 4)), g)


def test_plan_corners_match():
    box = CropBox(64, 192, 100, 228, 9)
    plan = hdsc_plan([(32, 32), (64, 64), (128, 128)], box, (512, 600, 20))
    assert [g.resolution for g in plan] == [(32, 32), (64, 64), (128, 128)]
    for g in plan:
        for plane in ("i_plane", "j_plane", "k_plane"):
            a, ref = getattr(g, plane), getattr(plan[-1], plane)
            assert a[0, 0] == ref[0, 0] and a[-1, -1] == ref[-1, -1]


def test_plan_single_native_stage():
    box = CropBox(1, 5, 2, 7, 1)
    (g,) = hdsc_plan([(4, 5)], box, (8, 8, 4))
    i, j, k = reference_matrices(box, 8, 8, 4)
    np.testing.assert_allclose(g.i_plane, i)
    np.testing.assert_allclose(g.j_plane, j)
    np.testing.assert_array_equal(g.k_plane, k)


def test_plan_empty():
    assert hdsc_plan([], CropBox(0, 4, 0, 4, 0), (4, 4, 1)) == []


def test_torch_planes_match_numpy():
    boxes = [CropBox(0, 16, 0, 16, 0), CropBox(5, 21, 30, 46, 7), CropBox(48, 64, 48, 64, 9)]
    H, W, Z = 64, 64, 10
    ext = torch.tensor([coord_extents(b, H, W, Z) for b in boxes], dtype=torch.float64)
    for res in [(16, 16), (8, 8), (2, 2), (1, 1)]:
        planes = coord_planes(ext, *res).numpy()
        for p, b in zip(planes, boxes):
            np.testing.assert_allclose(p, dense_coords(b, H, W, Z, res).stack(), atol=1e-15)


def test_torch_concat_appends_last():
    feats = torch.randn(2, 5, 4, 4)
    ext = torch.tensor([[0.1, 0.4, 0.2, 0.5, 0.3]] * 2)
    out = concat_coord_planes(feats, ext)
    assert out.shape == (2, 8, 4, 4)
    assert torch.equal(out[:, :5], feats)
