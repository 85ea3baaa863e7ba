import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from fetoreg.imagecore import BinaryMask, ScalarImage
from fetoreg.warp import (
    AffineTransform,
    DegenerateTransformError,
    bilinear_sample,
    circular_mask,
    compose,
    corner_reprojection_error,
    default_visibility,
    invert,
    read_transforms_csv,
    warp_image,
    write_transforms_csv,
)

small = st.floats(-0.3, 0.3)
shift = st.floats(-50, 50)


@st.composite
def affines(draw):
    return AffineTransform(1 + draw(small), draw(small), draw(small), 1 + draw(small),
                           draw(shift), draw(shift))


def test_determinant_bounds():
    with pytest.raises(DegenerateTransformError):
        AffineTransform.scaling(0.2)
    with pytest.raises(DegenerateTransformError):
        AffineTransform(1, 0, 0, 1, math.nan, 0)
    AffineTransform.scaling(0.25)  # det exactly 1/16


def test_rotation_about_centre_fixes_centre():
    t = AffineTransform.rotation(30, 10, 20)
    x, y = t.apply(10, 20)
    assert abs(x - 10) < 1e-12 and abs(y - 20) < 1e-12
    x, y = AffineTransform.rotation(90).apply(1, 0)
    assert abs(x) < 1e-12 and abs(y - 1) < 1e-12


def test_compose_order():
    a = AffineTransform.translation(5, 0)
    b = AffineTransform.scaling(2)
    # a(b(1, 1)) = (2 + 5, 2)
    assert (a @ b).apply(1, 1) == (7.0, 2.0)
    assert compose(b, a).apply(1, 1) == (12.0, 2.0)


@settings(max_examples=100, deadline=None)
@given(affines())
def test_inverse_roundtrip(t):
    ti = compose(t, invert(t))
    assert np.allclose(ti.params, AffineTransform.identity().params, atol=1e-10)


@settings(max_examples=60, deadline=None)
@given(affines(), affines(), affines())
def test_compose_associative(a, b, c):
    assert np.allclose(compose(compose(a, b), c).params, compose(a, compose(b, c)).params,
                       rtol=1e-12, atol=1e-9)


def test_matrix_and_serialization():
    t = AffineTransform(1.1, 0.2, -0.1, 0.9, 3.5, -2.25)
    assert AffineTransform.from_matrix(t.matrix) == t
    assert AffineTransform.from_json(t.to_json()) == t
    assert AffineTransform.from_dict(t.to_dict()) == t


def test_transforms_csv(tmp_path):
    ts = [AffineTransform.rotation(1.234567891234, 3, 4), AffineTransform.translation(1 / 3, 0)]
    write_transforms_csv(ts, tmp_path / "t.csv")
    assert read_transforms_csv(tmp_path / "t.csv") == ts
    (tmp_path / "h.csv").write_text("1,0,0,1,2,3\n\n1,0,0,1,0,0\n")
    assert len(read_transforms_csv(tmp_path / "h.csv")) == 2
    (tmp_path / "bad.csv").write_text("1,0,0\n")
    with pytest.raises(ValueError, match="6 columns"):
        read_transforms_csv(tmp_path / "bad.csv")


def test_bilinear_matches_scipy():
    rng = np.random.default_rng(0)
    img = rng.random((20, 30))
    u = rng.uniform(0, 28.99, 500)
    v = rng.uniform(0, 18.99, 500)
    val, ok = bilinear_sample(img, None, u, v)
    assert ok.all()
    ref = ndimage.map_coordinates(img, [v, u], order=1)
    assert np.abs(val - ref).max() < 1e-13


def test_bilinear_gradient_is_exact_on_planes():
    ys, xs = np.mgrid[0:10, 0:10].astype(float)
    img = 0.01 * xs + 0.03 * ys
    _, ok, gx, gy = bilinear_sample(img, None, np.array([3.3, 7.9]), np.array([1.2, 4.5]), True)
    assert ok.all()
    assert np.allclose(gx, 0.01) and np.allclose(gy, 0.03)


def test_bilinear_validity():
    img = np.zeros((5, 5))
    valid = np.ones((5, 5), dtype=bool)
    valid[2, 2] = False
    u = np.array([-0.1, 3.9, 4.0, 1.5, 0.0])
    v = np.array([0.0, 0.0, 0.0, 1.5, 0.0])
    _, ok = bilinear_sample(img, valid, u, v)
    # right edge: footprint needs column x+1; (1.5, 1.5) touches the hole
    assert ok.tolist() == [False, True, False, False, True]


def test_warp_identity_and_translation():
    rng = np.random.default_rng(1)
    src = ScalarImage(rng.random((16, 16)))
    full = BinaryMask.full(16, 16)
    out = warp_image(src, full, AffineTransform.identity(), 16, 16)
    inner = out.validity.data
    assert inner[:15, :15].all() and not inner[15].any()
    assert np.array_equal(out.image.data[inner], src.data[inner])
    out = warp_image(src, full, AffineTransform.translation(2, 1), 10, 10)
    assert np.allclose(out.image.data[:5, :5], src.data[1:6, 2:7])
    assert not out.image.data[~out.validity.data].any()


def test_warp_size_mismatch():
    with pytest.raises(ValueError):
        warp_image(ScalarImage(np.zeros((4, 4))), BinaryMask.full(5, 4),
                   AffineTransform.identity(), 4, 4)


def test_masks():
    m = default_visibility(448, 448)
    r = 0.5 * 448 * 0.98
    assert abs(m.count() - math.pi * r * r) / m.count() < 0.01
    assert m.data[224, 224] and not m.data[0, 0]
    with pytest.raises(ValueError):
        circular_mask(4, 4, 1, 1, 0)


def test_corner_error():
    a = AffineTransform.identity()
    assert corner_reprojection_error(a, a, 10, 10) == 0.0
    assert corner_reprojection_error(AffineTransform.translation(3, 4), a, 10, 10) == 5.0
