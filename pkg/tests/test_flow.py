import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from catsagg.engine import Tensor, finite_diff_check
from catsagg.errors import DimensionError, EvaluationError, FormatError, ParameterError
from catsagg.flow import (
    FlowField,
    KeypointSet,
    aepe,
    load_flow_text,
    pck,
    save_flow_text,
    soft_argmax,
    transfer_keypoints,
)
from catsagg.geometry import grid_coords


def flow(vec, valid=True):
    vec = np.asarray(vec, dtype=float)
    return FlowField(vec.shape[-3:-1], Tensor(vec), valid)


def test_soft_argmax_argmax_limit(rng):
    h, w = 3, 4
    corr = rng.uniform(0, 0.5, (h * w, h * w))
    best = rng.integers(0, h * w, size=h * w)
    corr[np.arange(h * w), best] = 1.0
    f = soft_argmax(Tensor(corr), (h, w), 1e-6).numpy().reshape(-1, 2)
    coords = grid_coords(h, w)
    np.testing.assert_allclose(f, coords[best] - coords, atol=1e-6)


def test_soft_argmax_uniform_row_gives_centroid():
    f = soft_argmax(Tensor(np.zeros((4, 4))), (2, 2), 0.02).numpy()
    np.testing.assert_allclose(f[0, 0], [0.5, 0.5], atol=1e-15)


def test_soft_argmax_two_position_closed_form():
    corr = np.array([[0.0, math.log(3)], [0.0, math.log(3)]])
    f = soft_argmax(Tensor(corr), (1, 2), 1.0).numpy()
    # expected x = 0.75 for both rows; flow subtracts the own coordinate
    np.testing.assert_allclose(f[0, :, 0], [0.75, -0.25], atol=1e-15)
    np.testing.assert_allclose(f[0, :, 1], 0.0, atol=0)


def test_soft_argmax_rejects_bad_input():
    with pytest.raises(ParameterError):
        soft_argmax(Tensor(np.zeros((4, 4))), (2, 2), 0.0)
    with pytest.raises(DimensionError):
        soft_argmax(Tensor(np.zeros((4, 4))), (2, 3), 0.1)


def test_soft_argmax_gradient(rng):
    corr = Tensor(rng.standard_normal((6, 6)))
    w = Tensor(rng.standard_normal((2, 3, 2)))
    err = finite_diff_check(lambda c: (soft_argmax(c, (2, 3), 0.5).vectors * w).sum(), corr)
    assert err <= 1e-5


def test_aepe_examples(rng):
    v = rng.standard_normal((3, 3, 2))
    assert aepe(flow(v), flow(v)).item() == 0.0
    valid = np.zeros((3, 3), bool)
    valid[1, 2] = True
    shifted = v.copy()
    shifted[1, 2] += [3.0, 4.0]
    shifted[0, 0] += [100.0, 0.0]
    assert aepe(flow(shifted), flow(v, valid)).item() == 5.0


def test_aepe_matches_pixel_loop(rng):
    a, b = rng.standard_normal((2, 4, 5, 2))
    valid = rng.random((4, 5)) < 0.7
    total, n = 0.0, 0
    for y in range(4):
        for x in range(5):
            if valid[y, x]:
                total += math.hypot(a[y, x, 0] - b[y, x, 0], a[y, x, 1] - b[y, x, 1])
                n += 1
    assert abs(aepe(flow(a), flow(b, valid)).item() - total / n) <= 1e-12


def test_aepe_batch_averages_per_sample(rng):
    a, b = rng.standard_normal((2, 3, 2, 2, 2))
    valid = np.ones((3, 2, 2), bool)
    valid[1, 0] = False
    per = [aepe(flow(a[n]), flow(b[n], valid[n])).item() for n in range(3)]
    assert abs(aepe(flow(a), flow(b, valid)).item() - np.mean(per)) <= 1e-14


def test_aepe_empty_mask_is_an_error(rng):
    v = rng.standard_normal((2, 2, 2))
    with pytest.raises(EvaluationError):
        aepe(flow(v), flow(v, False))


def test_transfer_examples():
    kps = KeypointSet(np.array([[0.0, 0.0], [2.5, 1.0]]), np.zeros((2, 2)))
    pred, valid = transfer_keypoints(flow(np.zeros((3, 4, 2))), kps)
    np.testing.assert_array_equal(pred, kps.src)
    assert valid.all()
    shift = np.zeros((3, 4, 2))
    shift[..., 0] = 1.0
    pred, _ = transfer_keypoints(flow(shift), kps)
    np.testing.assert_allclose(pred, kps.src + [1.0, 0.0], atol=0)


def test_transfer_bilinear_oracle():
    # dx(x, y) = 0.5x + 0.25y, dy(x, y) = -x
    ys, xs = np.mgrid[0:3, 0:4].astype(float)
    vec = np.stack([0.5 * xs + 0.25 * ys, -xs], axis=-1)
    kps = KeypointSet(np.array([[1.5, 0.5], [2.25, 1.75]]), np.zeros((2, 2)))
    pred, _ = transfer_keypoints(flow(vec), kps)
    want = [[1.5 + 0.75 + 0.125, 0.5 - 1.5], [2.25 + 1.125 + 0.4375, 1.75 - 2.25]]
    np.testing.assert_allclose(pred, want, atol=1e-14)


def test_transfer_marks_outside_points_invalid():
    kps = KeypointSet(np.array([[-0.5, 0.0], [1.0, 1.0]]), np.zeros((2, 2)))
    pred, valid = transfer_keypoints(flow(np.zeros((2, 2, 2))), kps)
    assert valid.tolist() == [False, True]
    assert np.isnan(pred[0]).all()


def test_pck_examples():
    pts = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert pck(pts, pts, 0.1, (8, 8)) == 1.0
    gt = np.array([[0.0, 0.0]])
    assert pck(np.array([[10.0, 0.0]]), gt, 0.1, (100, 100)) == 1.0
    assert pck(np.array([[10.0001, 0.0]]), gt, 0.1, (100, 100)) == 0.0
    assert pck(np.array([[0.0, 0.0], [0.0, 20.0]]), np.zeros((2, 2)), 0.1, (100, 100)) == 0.5


def test_pck_uses_larger_side_and_mask():
    pred = np.array([[0.0, 1.5], [50.0, 50.0]])
    assert pck(pred, np.zeros((2, 2)), 0.1, (4, 16), valid=[True, False]) == 1.0
    with pytest.raises(EvaluationError):
        pck(pred, np.zeros((2, 2)), 0.1, (4, 16), valid=[False, False])
    with pytest.raises(ParameterError):
        pck(pred, pred, 0.0, (4, 4))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.01, 0.5))
def test_pck_is_monotone_in_alpha(seed, alpha):
    rng = np.random.default_rng(seed)
    pred, gt = rng.uniform(0, 8, (2, 10, 2))
    assert pck(pred, gt, alpha, (8, 8)) <= pck(pred, gt, alpha * 1.5, (8, 8))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.005, 5.0))
def test_soft_argmax_stays_in_grid_hull(seed, tau):
    rng = np.random.default_rng(seed)
    h, w = 3, 4
    f = soft_argmax(Tensor(rng.standard_normal((h * w, h * w))), (h, w), tau).numpy().reshape(-1, 2)
    target = f + grid_coords(h, w)
    assert (target >= -1e-12).all()
    assert (target[:, 0] <= w - 1 + 1e-12).all() and (target[:, 1] <= h - 1 + 1e-12).all()


def test_flow_text_round_trip(tmp_path, rng):
    vec = rng.standard_normal((3, 2, 2))
    valid = rng.random((3, 2)) < 0.5
    save_flow_text(tmp_path / "f.txt", flow(vec, valid))
    back = load_flow_text(tmp_path / "f.txt", (3, 2))
    np.testing.assert_array_equal(back.numpy(), vec)
    np.testing.assert_array_equal(back.valid, valid)


def test_flow_text_errors(tmp_path):
    p = tmp_path / "f.txt"
    p.write_text("0,0,1.0,2.0,1\n")
    with pytest.raises(FormatError, match="missing"):
        load_flow_text(p, (1, 2))
    p.write_text("0,0,1.0\n")
    with pytest.raises(FormatError, match="5 fields"):
        load_flow_text(p, (1, 1))
