import json
import pathlib

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import rasterize_scalar
from warpforge.errors import ContractViolation
from warpforge.npt import (KeypointSet, PointFeatureSet, encode_points, grid_size, rasterize)

GOLDEN = pathlib.Path(__file__).parent / "data" / "npt_golden.json"


def test_encoder_matches_golden_file():
    g = json.loads(GOLDEN.read_text())
    pts = np.array(g["points"])
    kp = KeypointSet(pts, np.zeros((len(pts), g["descriptor_dim"])), *g["frame"])
    pf = encode_points(kp, channels=g["channels"], seed=g["seed"])
    np.testing.assert_allclose(pf.features, np.array(g["features"]), atol=1e-12, rtol=0)


def test_identical_points_identical_features():
    kp = KeypointSet(np.array([[5.0, 6.0], [5.0, 6.0]]), None, 32, 32)
    f = encode_points(kp).features
    assert np.array_equal(f[0], f[1])


def test_encoder_is_pointwise(rng):
    pts = rng.uniform(0, 64, (30, 2))
    desc = rng.normal(size=(30, 3))
    perm = rng.permutation(30)
    a = encode_points(KeypointSet(pts, desc, 64, 64), seed=4).features
    b = encode_points(KeypointSet(pts[perm], desc[perm], 64, 64), seed=4).features
    assert np.array_equal(a[perm], b)


def test_encoder_rejects_empty():
    with pytest.raises(ContractViolation):
        encode_points(KeypointSet(np.zeros((0, 2)), None, 8, 8))


def test_descriptor_count_mismatch():
    with pytest.raises(ContractViolation):
        KeypointSet(np.zeros((3, 2)), np.zeros((2, 4)), 8, 8)


def test_single_point_cell():
    pf = PointFeatureSet(np.array([[0.7, -0.2]]), np.array([[17.9, 3.2]]))
    m = rasterize(pf, 1 / 8, 64, 64)
    nz = np.argwhere(np.any(m.data != 0, axis=0))
    assert nz.tolist() == [[0, 2]]  # (row y~, col x~)


def test_channelwise_max_in_shared_cell():
    pf = PointFeatureSet(np.array([[1.0, 5.0], [3.0, 2.0]]), np.array([[1.0, 1.0], [2.0, 3.0]]))
    m = rasterize(pf, 1 / 8, 64, 64)
    np.testing.assert_array_equal(m.data[:, 0, 0], [3.0, 5.0])


def test_other_pooling_modes():
    pf = PointFeatureSet(np.array([[1.0, 5.0], [3.0, 2.0]]), np.array([[1.0, 1.0], [2.0, 3.0]]))
    np.testing.assert_array_equal(rasterize(pf, 1 / 8, 64, 64, "mean").data[:, 0, 0], [2.0, 3.5])
    np.testing.assert_array_equal(rasterize(pf, 1 / 8, 64, 64, "sum").data[:, 0, 0], [4.0, 7.0])
    with pytest.raises(ContractViolation):
        rasterize(pf, 1 / 8, 64, 64, "median")


def test_matches_scalar_oracle(rng):
    pts = rng.uniform(0, [200, 150], (300, 2))
    feats = rng.normal(size=(300, 5))
    for scale in (1 / 8, 1 / 16):
        m = rasterize(PointFeatureSet(feats, pts), scale, 200, 150)
        assert np.array_equal(m.data, rasterize_scalar(feats, pts, scale, 200, 150))


def test_permutation_invariance(rng):
    pts = rng.uniform(0, [320, 240], (500, 2))
    feats = rng.normal(size=(500, 8))
    ref = rasterize(PointFeatureSet(feats, pts), 1 / 8, 320, 240).data
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    assert np.array_equal(rasterize(PointFeatureSet(feats[order], pts[order]), 1 / 8, 320, 240).data, ref)
    for _ in range(10):
        p = rng.permutation(500)
        assert np.array_equal(rasterize(PointFeatureSet(feats[p], pts[p]), 1 / 8, 320, 240).data, ref)


@given(st.integers(0, 2**31 - 1), st.sampled_from([1 / 8, 1 / 16]))
def test_occupancy_invariants(seed, scale):
    rng = np.random.default_rng(seed)
    w, h = 160, 96
    pts = rng.uniform(0, [w, h], (40, 2))
    feats = rng.uniform(0.1, 1.0, (40, 3))  # strictly positive, so occupied cells are nonzero
    m = rasterize(PointFeatureSet(feats, pts), scale, w, h)
    assert m.data.shape[1:] == grid_size(w, h, scale)
    occupied = np.zeros(m.data.shape[1:], dtype=bool)
    occupied[np.floor(pts[:, 1] * scale).astype(int), np.floor(pts[:, 0] * scale).astype(int)] = True
    assert np.array_equal(np.any(m.data != 0, axis=0), occupied)
    again = rasterize(PointFeatureSet(feats, pts), scale, w, h)
    assert np.array_equal(np.maximum(m.data, again.data), m.data)


def test_output_dims():
    pf = PointFeatureSet(np.ones((1, 2)), np.array([[0.0, 0.0]]))
    assert rasterize(pf, 1 / 8, 800, 566).data.shape == (2, 70, 100)
    assert rasterize(pf, 1 / 16, 800, 566).data.shape == (2, 35, 50)


@pytest.mark.parametrize("pt", [[64.0, 3.0], [3.0, 64.0], [-0.5, 3.0]])
def test_out_of_frame_point_rejected_with_index(pt):
    pf = PointFeatureSet(np.ones((3, 2)), np.array([[1.0, 1.0], [2.0, 2.0], pt]))
    with pytest.raises(ContractViolation, match="point 2"):
        rasterize(pf, 1 / 8, 64, 64)


def test_trailing_partial_strip_joins_last_cell():
    # width 20 at 1/8 gives 2 columns; x = 17.9 falls in the partial third strip
    pf = PointFeatureSet(np.ones((1, 1)), np.array([[17.9, 3.0]]))
    m = rasterize(pf, 1 / 8, 20, 16)
    assert m.data.shape == (1, 2, 2) and m.data[0, 0, 1] == 1.0
