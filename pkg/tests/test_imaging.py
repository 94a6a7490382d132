import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from oracles import bilinear_scalar
from warpforge.errors import ContractViolation, SchemaError
from warpforge.homography import apply_homography, homography_to_flow
from warpforge.imaging import (FlowField, as_image, average_fuse, bilinear_sample, bilinear_sample_grad,
                               load_flow, load_image, ones_mask, overlap_mask, save_flow, save_image,
                               warp_with_flow)

unit = st.floats(0, 1, allow_nan=False)


def test_sample_constant_image():
    img = np.full((2, 2), 0.5)
    v, inb = bilinear_sample(img, np.array(0.5), np.array(0.5))
    assert v[0] == 0.5 and inb


def test_sample_linear_between_pixels():
    img = np.array([[0.0, 1.0]])
    v, _ = bilinear_sample(img, np.array(0.25), np.array(0.0))
    assert v[0] == pytest.approx(0.25, abs=1e-15)


def test_sample_out_of_bounds_is_zero_and_flagged():
    img = np.ones((3, 3))
    v, inb = bilinear_sample(img, np.array(-1.0), np.array(0.0))
    assert v[0] == 0.0 and not inb


def test_sample_matches_scalar_oracle(rng):
    img = rng.random((7, 9, 3))
    xs = rng.uniform(-1.5, 9.5, 400)
    ys = rng.uniform(-1.5, 7.5, 400)
    vals, inb = bilinear_sample(img, xs, ys)
    for i in range(400):
        ov, ob = bilinear_scalar(img, xs[i], ys[i])
        assert ob == inb[i]
        np.testing.assert_allclose(vals[i], ov, atol=1e-14)


@given(arrays(np.float64, (5, 6), elements=unit))
def test_sample_exact_on_integer_grid(img):
    ys, xs = np.mgrid[0:5, 0:6].astype(float)
    v, inb = bilinear_sample(img, xs, ys)
    assert inb.all()
    assert np.array_equal(v[..., 0], img)


@given(arrays(np.float64, (4, 5), elements=unit), st.integers(0, 3), st.integers(0, 3),
       st.floats(0, 1))
def test_sample_linear_along_axes(img, row, col, t):
    v, _ = bilinear_sample(img, np.array(col + t), np.array(float(row)))
    expected = (1 - t) * img[row, col] + t * img[row, col + 1]
    assert abs(v[0] - expected) < 1e-12


def test_sample_grad_left_limit_at_integers():
    img = np.array([[0.0, 1.0, 3.0]])
    _, gx, _, _ = bilinear_sample_grad(np.vstack([img, img]), np.array(1.0), np.array(0.0))
    assert gx[0] == 1.0  # left cell slope, not the right one (2.0)
    _, gx, _, _ = bilinear_sample_grad(np.vstack([img, img]), np.array(1.5), np.array(0.0))
    assert gx[0] == 2.0


def test_zero_flow_is_identity(rng):
    img = rng.random((6, 8, 3))
    out, mask = warp_with_flow(img, FlowField.zeros(6, 8))
    assert np.array_equal(out, img)
    assert np.array_equal(mask, np.ones((6, 8)))


def test_uniform_translation_flow():
    img = np.arange(16, dtype=float).reshape(4, 4) / 16
    out, mask = warp_with_flow(img, FlowField(np.ones((4, 4)), np.zeros((4, 4))))
    assert np.all(mask[:, 3] == 0) and np.all(mask[:, :3] == 1)
    assert np.array_equal(out[:, :3, 0], img[:, 1:])


def test_dimension_mismatch_rejected():
    with pytest.raises(ContractViolation):
        warp_with_flow(np.zeros((4, 4)), FlowField.zeros(3, 4))


def test_canvas_warp_takes_flow_shape(rng):
    img = rng.random((4, 5))
    out, mask = warp_with_flow(img, FlowField.zeros(6, 7), canvas=True)
    assert out.shape == (6, 7, 1)
    assert mask[:4, :5].all() and not mask[4:, :].any()


def test_homography_flow_matches_pointwise_sampling(rng):
    img = rng.random((20, 24, 3))
    h = np.array([[1.02, 0.03, 1.5], [-0.02, 0.98, -0.7], [1e-4, -2e-4, 1.0]])
    out, mask = warp_with_flow(img, homography_to_flow(h, 20, 24))
    hinv = np.linalg.inv(h)
    for y in range(20):
        for x in range(24):
            px, py = apply_homography(hinv, np.array([[x, y]], dtype=float))[0]
            ov, ob = bilinear_scalar(img, px, py)
            assert bool(mask[y, x]) == ob
            np.testing.assert_allclose(out[y, x], ov, atol=1e-6)


@given(st.floats(-3, 3), st.floats(-3, 3))
def test_mask_is_warp_of_ones(dx, dy):
    flow = FlowField(np.full((5, 6), dx), np.full((5, 6), dy))
    _, mask = warp_with_flow(np.full((5, 6), 0.3), flow)
    ones, _ = warp_with_flow(ones_mask(5, 6), flow)
    assert np.array_equal(mask, ones[..., 0])


def test_overlap_mask_cases():
    one, zero = np.ones((4, 5)), np.zeros((4, 5))
    assert np.array_equal(overlap_mask(one, one), one)
    assert np.array_equal(overlap_mask(one, zero), zero)
    left = np.zeros((6, 10))
    left[:, :7] = 1
    right = np.zeros((6, 10))
    right[:, 4:] = 1
    strip = overlap_mask(left, right)
    assert strip.sum() == sum(1 for y in range(6) for x in range(10) if 4 <= x < 7) == 18
    with pytest.raises(ContractViolation):
        overlap_mask(one, np.ones((3, 3)))


def fuse_scalar_rule(a, ma, b, mb):
    out = np.zeros_like(a)
    for y in range(a.shape[0]):
        for x in range(a.shape[1]):
            if ma[y, x] > 0 and mb[y, x] > 0:
                out[y, x] = (a[y, x] + b[y, x]) / 2
            elif ma[y, x] > 0:
                out[y, x] = a[y, x]
            elif mb[y, x] > 0:
                out[y, x] = b[y, x]
    return out


def test_average_fuse_cases(rng):
    a = rng.random((5, 5, 3))
    ones = np.ones((5, 5))
    assert np.array_equal(average_fuse(a, ones, a, ones), a)
    assert np.all(average_fuse(np.ones((5, 5, 1)), ones, np.zeros((5, 5, 1)), ones) == 0.5)
    board = (np.indices((12, 12)).sum(axis=0) // 2 % 2).astype(float)[..., None]
    shifted = np.roll(board, 1, axis=1)
    ma = np.zeros((12, 12))
    ma[:, :8] = 1
    mb = np.zeros((12, 12))
    mb[:, 4:] = 1
    fused = average_fuse(board, ma, shifted, mb)
    assert np.array_equal(fused, fuse_scalar_rule(board, ma, shifted, mb))
    assert np.any(fused[:, 4:8] == 0.5)  # ghosting in the overlap


@given(arrays(np.float64, (4, 4, 1), elements=unit), arrays(np.float64, (4, 4, 1), elements=unit),
       arrays(np.float64, (4, 4), elements=unit), arrays(np.float64, (4, 4), elements=unit))
def test_average_fuse_symmetric(a, b, ma, mb):
    assert np.array_equal(average_fuse(a, ma, b, mb), average_fuse(b, mb, a, ma))


def test_as_image_validates_range():
    with pytest.raises(ContractViolation):
        as_image(np.full((2, 2), 1.5))
    assert as_image(np.zeros((2, 3))).shape == (2, 3, 1)


def test_flow_file_round_trip(tmp_path, rng):
    flow = FlowField(rng.normal(size=(5, 7)), rng.normal(size=(5, 7)))
    path = tmp_path / "f.wff"
    save_flow(path, flow)
    raw = path.read_bytes()
    assert raw[:4] == b"WFF1" and len(raw) == 12 + 8 * 35
    back = load_flow(path)
    np.testing.assert_array_equal(back.dx, flow.dx.astype(np.float32))
    np.testing.assert_array_equal(back.dy, flow.dy.astype(np.float32))


def test_flow_file_rejects_bad_magic(tmp_path):
    p = tmp_path / "bad.wff"
    p.write_bytes(b"NOPE" + b"\0" * 8)
    with pytest.raises(SchemaError):
        load_flow(p)


def test_png_round_trip(tmp_path, rng):
    img = np.round(rng.random((4, 6, 3)) * 255) / 255
    save_image(tmp_path / "a.png", img)
    assert np.array_equal(load_image(tmp_path / "a.png"), img)


def test_flowfield_rejects_nonfinite():
    with pytest.raises(ContractViolation):
        FlowField(np.array([[np.nan]]), np.zeros((1, 1)))
