"""Tests for the box head, soft raster, mask decoder, and similarity map."""

import numpy as np
import pytest

import medsegdet.autodiff as ad
from medsegdet.autodiff import NonFiniteError, ShapeError, Tensor
from medsegdet.decoders import (
    BBox,
    BBoxParams,
    DenseFeatures,
    MaskDecoderParams,
    bbox_decode,
    dense_features,
    init_bbox_params,
    init_mask_decoder_params,
    mask_decode,
    similarity_map,
    soft_box_raster,
)


def zero_bbox_params(d=6, hidden=4):
    z = lambda *s: Tensor(np.zeros(s), requires_grad=True)
    return BBoxParams(w1=z(d, hidden), b1=z(hidden), w2=z(hidden, hidden),
                      b2=z(hidden), w3=z(hidden, 4), b3=z(4))


# -- bbox decoding ------------------------------------------------------------

def test_bbox_decode_zero_logits_gives_centered_half_box():
    box = bbox_decode(Tensor(np.ones(6)), zero_bbox_params())
    np.testing.assert_allclose(box.as_floats(), (0.25, 0.25, 0.75, 0.75), atol=1e-15)


def test_bbox_decode_degenerate_size_still_valid():
    params = zero_bbox_params()
    params.b3.data[:] = [0.0, 0.0, -30.0, -30.0]
    box = bbox_decode(Tensor(np.zeros(6)), params)
    box.validate()
    x1, y1, x2, y2 = box.as_floats()
    assert x2 - x1 < 1e-10 and abs(x1 - 0.5) < 1e-10
    assert y2 - y1 < 1e-10 and abs(y1 - 0.5) < 1e-10


def test_bbox_decode_always_valid_on_random_inputs():
    rng = np.random.default_rng(0)
    params = init_bbox_params(d=6, hidden=4, seed=1)
    for _ in range(200):
        h = rng.normal(scale=rng.choice([0.1, 1.0, 100.0]), size=6)
        bbox_decode(Tensor(h), params).validate()


def test_bbox_decode_rejects_non_finite():
    params = init_bbox_params(d=6, hidden=4, seed=2)
    with pytest.raises(NonFiniteError):
        bbox_decode(Tensor([1.0, np.inf, 0.0, 0.0, 0.0, 0.0]), params)


def test_bbox_decode_gradcheck():
    ad.reset_tape()
    params = init_bbox_params(d=6, hidden=4, seed=3)
    h = Tensor(np.random.default_rng(4).normal(size=6), requires_grad=True)

    def f():
        box = bbox_decode(h, params)
        return box.x1 + box.y1 * 2.0 + box.x2 * 3.0 + box.y2 * 4.0

    leaves = [h] + [t for t in vars(params).values()]
    assert ad.finite_difference_check(f, leaves, max_coords_per_param=6) < 1e-4


# -- soft box raster ----------------------------------------------------------

def test_raster_full_box_interior_saturates():
    grid = soft_box_raster(BBox(0.0, 0.0, 1.0, 1.0), 16, 16, sharpness=200.0)
    assert np.all(grid.data > 0.9)
    small = soft_box_raster(BBox(0.0, 0.0, 1.0, 1.0), 8, 8, sharpness=50.0)
    assert np.all(small.data > 0.9)


def test_raster_point_far_outside_is_small():
    grid = soft_box_raster(BBox(0.1, 0.1, 0.5, 0.5), 10, 10, sharpness=50.0)
    assert grid.data[9, 9] < 0.1  # pixel center (0.95, 0.95), far outside
    assert grid.data[2, 2] > 0.9  # pixel center (0.25, 0.25), deep inside


def test_raster_values_in_unit_interval_and_differentiable_in_box():
    ad.reset_tape()
    coords = [Tensor(v, requires_grad=True) for v in (0.2, 0.3, 0.7, 0.9)]
    box = BBox(*coords)

    def f():
        return soft_box_raster(box, 6, 5, sharpness=50.0).sum()

    grid = soft_box_raster(box, 6, 5, sharpness=50.0)
    assert np.all((grid.data > 0) & (grid.data < 1))
    assert ad.finite_difference_check(f, coords) < 1e-4


def test_raster_rejects_bad_sharpness():
    with pytest.raises(ValueError):
        soft_box_raster(BBox(0, 0, 1, 1), 4, 4, sharpness=0.0)


# -- dense features & mask decoding -------------------------------------------

def test_dense_features_grid_shape():
    proj = Tensor(np.random.default_rng(5).normal(size=(4, 7)))
    f = dense_features(np.random.default_rng(6).normal(size=(8, 6)), 2, proj)
    assert f.grid.shape == (4, 3, 7)
    assert f.hw == (4, 3) and f.dim == 7
    with pytest.raises(ShapeError):
        dense_features(np.zeros((7, 6)), 2, proj)


def test_mask_decode_null_prompt_constant_bias():
    rng = np.random.default_rng(7)
    f = DenseFeatures(Tensor(rng.normal(size=(4, 4, 5))))
    params = MaskDecoderParams(
        w_p=Tensor(rng.normal(size=(6, 5)), requires_grad=True),
        gamma=Tensor(0.0, requires_grad=True),
        b=Tensor(0.7, requires_grad=True),
    )
    out = mask_decode(f, Tensor(np.zeros(6)), BBox(0.2, 0.2, 0.8, 0.8), params, (8, 8))
    np.testing.assert_allclose(out.grid.data, np.full((8, 8), 0.7), atol=1e-12)


def test_mask_decode_box_dominated_limit_matches_box_interior():
    f = DenseFeatures(Tensor(np.zeros((8, 8, 5))))
    params = MaskDecoderParams(
        w_p=Tensor(np.zeros((6, 5))), gamma=Tensor(20.0), b=Tensor(-10.0)
    )
    box = BBox(0.25, 0.25, 0.75, 0.75)
    out = mask_decode(f, Tensor(np.zeros(6)), box, params, (32, 32))
    pred = out.binary()
    ys = (np.arange(32) + 0.5) / 32
    inside = (ys >= 0.25) & (ys <= 0.75)
    expected = inside[:, None] & inside[None, :]
    inter = np.count_nonzero(pred & expected)
    union = np.count_nonzero(pred | expected)
    assert inter / union > 0.8


def test_mask_gradient_reaches_bbox_parameters():
    ad.reset_tape()
    rng = np.random.default_rng(8)
    bparams = init_bbox_params(d=6, hidden=4, seed=9)
    mparams = init_mask_decoder_params(feat_dim=5, prompt_dim=6, seed=10)
    f = DenseFeatures(Tensor(rng.normal(size=(4, 4, 5))))
    h_det = Tensor(rng.normal(size=6))
    h_seg = Tensor(rng.normal(size=6))
    box = bbox_decode(h_det, bparams)
    out = mask_decode(f, h_seg, box, mparams, (8, 8))
    ad.backward(out.grid.sum())
    assert np.any(bparams.w3.grad != 0)
    assert np.any(bparams.b3.grad != 0)
    assert np.any(mparams.w_p.grad == mparams.w_p.grad)  # finite layout intact
    assert np.all(np.isfinite(bparams.w1.grad))


def test_mask_decode_linear_in_features_when_box_channel_off():
    rng = np.random.default_rng(11)
    params = MaskDecoderParams(
        w_p=Tensor(rng.normal(size=(6, 5))), gamma=Tensor(0.0), b=Tensor(0.0)
    )
    h_seg = Tensor(rng.normal(size=6))
    box = BBox(0.1, 0.1, 0.9, 0.9)
    F1 = rng.normal(size=(4, 4, 5))
    F2 = rng.normal(size=(4, 4, 5))
    a, b = 1.7, -0.4

    def run(grid):
        return mask_decode(DenseFeatures(Tensor(grid)), h_seg, box, params, (8, 8)).grid.data

    np.testing.assert_allclose(
        run(a * F1 + b * F2), a * run(F1) + b * run(F2), atol=1e-10
    )


def test_mask_decode_dimension_mismatches_rejected():
    rng = np.random.default_rng(12)
    f = DenseFeatures(Tensor(rng.normal(size=(4, 4, 5))))
    params = init_mask_decoder_params(feat_dim=5, prompt_dim=6, seed=13)
    with pytest.raises(ShapeError):
        mask_decode(f, Tensor(np.zeros(7)), BBox(0, 0, 1, 1), params, (8, 8))
    bad = DenseFeatures(Tensor(rng.normal(size=(4, 4, 9))))
    with pytest.raises(ShapeError):
        mask_decode(bad, Tensor(np.zeros(6)), BBox(0, 0, 1, 1), params, (8, 8))


def test_mask_decode_gradcheck():
    ad.reset_tape()
    rng = np.random.default_rng(14)
    params = init_mask_decoder_params(feat_dim=5, prompt_dim=6, seed=15)
    h_seg = Tensor(rng.normal(size=6), requires_grad=True)
    coords = [Tensor(v, requires_grad=True) for v in (0.2, 0.25, 0.8, 0.7)]
    f = DenseFeatures(Tensor(rng.normal(size=(3, 3, 5))))
    weights = rng.normal(size=(6, 6))

    def loss():
        out = mask_decode(f, h_seg, BBox(*coords), params, (6, 6))
        return (out.grid * weights).sum()

    leaves = [h_seg, params.w_p, params.gamma, params.b] + coords
    assert ad.finite_difference_check(loss, leaves, max_coords_per_param=8) < 1e-4


# -- similarity map -----------------------------------------------------------

def test_similarity_zero_prompt_gives_zero_map():
    h_img = Tensor(np.random.default_rng(16).normal(size=(5, 4)))
    out = similarity_map(h_img, Tensor(np.zeros(4)))
    np.testing.assert_array_equal(out.data, np.zeros(5))


def test_similarity_orthonormal_rows_one_hot():
    h_img = Tensor(np.eye(4))
    out = similarity_map(h_img, Tensor(np.eye(4)[2]))
    np.testing.assert_array_equal(out.data, [0.0, 0.0, 1.0, 0.0])


def test_similarity_matches_naive_loop():
    rng = np.random.default_rng(17)
    h_img = rng.normal(size=(7, 5))
    h_seg = rng.normal(size=5)
    out = similarity_map(Tensor(h_img), Tensor(h_seg)).data
    expected = np.array([sum(h_img[p][k] * h_seg[k] for k in range(5)) for p in range(7)])
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_similarity_homogeneous_in_prompt():
    rng = np.random.default_rng(18)
    h_img = Tensor(rng.normal(size=(6, 4)))
    h_seg = rng.normal(size=4)
    # scale by a power of two so floating-point scaling is exact
    a = similarity_map(h_img, Tensor(2.0 * h_seg)).data
    b = 2.0 * similarity_map(h_img, Tensor(h_seg)).data
    np.testing.assert_array_equal(a, b)


def test_similarity_dimension_mismatch():
    with pytest.raises(ShapeError):
        similarity_map(Tensor(np.zeros((3, 4))), Tensor(np.zeros(5)))
