import numpy as np
import pytest

from rvdet.assign import LabelGrid
from rvdet.geom import Box7
from rvdet.grad import Tensor
from rvdet.rimg import CartesianPoint
from rvdet.targets import (
    DegenerateAzimuth,
    TargetVector,
    VflConfig,
    cls_loss,
    decode,
    decode_batch,
    encode,
    encode_batch,
    reg_loss,
    vfl,
)


def test_encode_hand_case_on_x_axis():
    # point azimuth 0: the local frame coincides with the sensor frame
    t = encode(CartesianPoint(10.0, 0.0, 0.0), Box7(12.0, 1.0, 0.5, 4.0, 2.0, 1.5, 0.3))
    assert t.ox == pytest.approx(2.0, abs=1e-12)
    assert t.oy == pytest.approx(1.0, abs=1e-12)
    assert t.oz == pytest.approx(0.5, abs=1e-12)
    assert t.log_l == pytest.approx(np.log(4.0))
    assert t.log_w == pytest.approx(np.log(2.0))
    assert t.log_h == pytest.approx(np.log(1.5))
    assert t.cos_phi == pytest.approx(np.cos(0.3))
    assert t.sin_phi == pytest.approx(np.sin(0.3))


def test_encode_azimuth_invariance_pair():
    # the same box-relative layout seen from azimuth 0 and azimuth pi/2
    # must produce identical targets
    a = encode(CartesianPoint(10.0, 0.0, 0.0), Box7(12.0, 1.0, 0.5, 4.0, 2.0, 1.5, 0.3))
    b = encode(CartesianPoint(0.0, 10.0, 0.0),
               Box7(-1.0, 12.0, 0.5, 4.0, 2.0, 1.5, 0.3 + np.pi / 2))
    assert np.max(np.abs(a.as_array() - b.as_array())) < 1e-9


def test_encode_azimuth_invariance_random_rotations():
    rng = np.random.default_rng(40)
    for _ in range(50):
        p = np.array([rng.uniform(3, 30), 0.0, rng.uniform(-2, 2)])
        box = Box7(p[0] + rng.uniform(-2, 2), rng.uniform(-2, 2), p[2] + rng.uniform(-1, 1),
                   rng.uniform(1, 5), rng.uniform(1, 3), rng.uniform(1, 2),
                   rng.uniform(-np.pi, np.pi))
        rot = rng.uniform(-np.pi, np.pi)
        c, s = np.cos(rot), np.sin(rot)
        p2 = CartesianPoint(c * p[0] - s * p[1], s * p[0] + c * p[1], p[2])
        box2 = Box7(c * box.cx - s * box.cy, s * box.cx + c * box.cy, box.cz,
                    box.length, box.width, box.height, box.yaw + rot)
        a = encode(CartesianPoint(*p), box).as_array()
        b = encode(p2, box2).as_array()
        assert np.max(np.abs(a - b)) < 1e-9


def test_encode_decode_round_trip():
    rng = np.random.default_rng(41)
    for _ in range(300):
        p = CartesianPoint(rng.uniform(-30, 30), rng.uniform(-30, 30), rng.uniform(-3, 3))
        if p.x_m == 0.0 and p.y_m == 0.0:
            continue
        box = Box7(rng.uniform(-35, 35), rng.uniform(-35, 35), rng.uniform(-3, 3),
                   rng.uniform(0.3, 8), rng.uniform(0.3, 8), rng.uniform(0.3, 8),
                   rng.uniform(-np.pi, np.pi))
        back = decode(p, encode(p, box))
        assert abs(back.cx - box.cx) < 1e-9
        assert abs(back.cy - box.cy) < 1e-9
        assert abs(back.cz - box.cz) < 1e-9
        assert abs(back.length - box.length) < 1e-9
        assert abs(back.width - box.width) < 1e-9
        assert abs(back.height - box.height) < 1e-9
        assert abs(np.sin(back.yaw - box.yaw)) < 1e-9


def test_degenerate_azimuth_raises():
    box = Box7(1, 1, 1, 1, 1, 1, 0)
    with pytest.raises(DegenerateAzimuth):
        encode(CartesianPoint(0.0, 0.0, 5.0), box)
    with pytest.raises(DegenerateAzimuth):
        decode(CartesianPoint(0.0, 0.0, 5.0), TargetVector(0, 0, 0, 0, 0, 0, 1, 0))
    with pytest.raises(DegenerateAzimuth):
        encode_batch(np.array([[0.0, 0.0, 2.0]]), np.array([[1, 1, 1, 1, 1, 1, 0.0]]))
    with pytest.raises(DegenerateAzimuth):
        decode_batch(np.array([[0.0, 0.0, 2.0]]), np.zeros((1, 8)))


def test_decode_accepts_unnormalized_heading():
    p = CartesianPoint(5.0, 2.0, 0.0)
    t = encode(p, Box7(6, 3, 0, 2, 1, 1, 0.7))
    scaled = TargetVector(t.ox, t.oy, t.oz, t.log_l, t.log_w, t.log_h,
                          3.0 * t.cos_phi, 3.0 * t.sin_phi)
    assert decode(p, scaled).yaw == pytest.approx(0.7, abs=1e-12)


def test_batch_matches_scalar():
    rng = np.random.default_rng(42)
    pts = rng.uniform(-20, 20, (64, 3))
    boxes = np.column_stack([
        rng.uniform(-20, 20, (64, 3)),
        rng.uniform(0.5, 6, (64, 3)),
        rng.uniform(-np.pi, np.pi, 64),
    ])
    enc = encode_batch(pts, boxes)
    for i in range(0, 64, 7):
        one = encode(CartesianPoint(*pts[i]), Box7(*boxes[i]))
        assert np.allclose(enc[i], one.as_array(), atol=1e-12)
    dec = decode_batch(pts, enc)
    assert np.max(np.abs(dec[:, :6] - boxes[:, :6])) < 1e-9
    assert np.max(np.abs(np.sin(dec[:, 6] - boxes[:, 6]))) < 1e-9


def test_target_vector_from_array_shape():
    from rvdet.grad import ShapeError

    with pytest.raises(ShapeError):
        TargetVector.from_array(np.zeros(7))


def test_vfl_point_values():
    # q = 0.8, p = 0.5: -0.8 * (0.8 ln .5 + 0.2 ln .5) = 0.8 ln 2 = 0.55452
    assert vfl(0.5, 0.8) == pytest.approx(0.55452, abs=1e-5)
    # q = 0: -0.75 * 0.5^2 * ln(0.5) = 0.12997
    assert vfl(0.5, 0.0, VflConfig(alpha=0.75, gamma=2.0)) == pytest.approx(0.12997, abs=1e-5)
    assert vfl(0.5, 0.0) == pytest.approx(0.12997, abs=1e-5)  # the defaults
    # clamping keeps the endpoints finite
    assert np.isfinite(vfl(0.0, 1.0))
    assert np.isfinite(vfl(1.0, 0.0))


def test_vfl_validation():
    with pytest.raises(ValueError):
        vfl(0.5, 1.5)
    with pytest.raises(ValueError):
        VflConfig(alpha=0.0)
    with pytest.raises(ValueError):
        VflConfig(gamma=-1.0)


def test_cls_loss_matches_scalar_mean():
    rng = np.random.default_rng(43)
    p = rng.uniform(0.01, 0.99, (4, 5))
    q = np.where(rng.random((4, 5)) < 0.3, rng.uniform(0.2, 0.9, (4, 5)), 0.0)
    valid = rng.random((4, 5)) < 0.8
    if not valid.any():
        valid[0, 0] = True
    want = np.mean([vfl(p[i, j], q[i, j]) for i, j in zip(*np.nonzero(valid))])
    got = cls_loss(Tensor(p), q, valid)
    assert float(got.data) == pytest.approx(want, abs=1e-12)


def test_cls_loss_empty_mask_is_zero():
    assert float(cls_loss(Tensor(np.full((2, 2), 0.5)), np.zeros((2, 2)),
                          np.zeros((2, 2), dtype=bool)).data) == 0.0


def test_cls_loss_rejects_bad_targets():
    with pytest.raises(ValueError):
        cls_loss(Tensor(np.full((2, 2), 0.5)), np.full((2, 2), 1.5),
                 np.ones((2, 2), dtype=bool))


def test_cls_loss_gradient_only_on_valid_pixels():
    p = Tensor(np.full((2, 3), 0.4), requires_grad=True)
    valid = np.array([[True, False, True], [False, False, True]])
    cls_loss(p, np.zeros((2, 3)), valid).backward()
    assert np.all((p.grad != 0.0) == valid)


def test_reg_loss_two_pixel_weighting_is_exactly_one():
    # one box owning two pixels; every component misses by exactly 0.5, so
    # each pixel contributes 8 * 0.125 = 1 and the 1/n weighting gives
    # (1/2) + (1/2) = 1 with no rounding anywhere
    pts = np.array([[[10.0, 0.0, 0.0], [9.0, 0.0, 0.0]]])  # (1, 2, 3), azimuth 0
    box = Box7(12.0, 1.0, 0.5, 1.0, 1.0, 1.0, 0.0)  # unit dims: log terms 0
    labels = LabelGrid(np.zeros((1, 2), dtype=np.int64), np.zeros((1, 2), dtype=np.int64))
    targets = encode_batch(pts.reshape(-1, 3), np.tile(
        [box.cx, box.cy, box.cz, 1.0, 1.0, 1.0, 0.0], (2, 1))).reshape(1, 2, 8)
    loss = reg_loss(Tensor(targets + 0.5), labels, [box], pts)
    assert float(loss.data) == 1.0


def test_reg_loss_weights_by_pixel_count_and_box_count():
    # box 0 owns three pixels, box 1 owns one; equal per-pixel error s gives
    # (1/2) * (3 * s/3 + 1 * s/1) = s
    pts = np.zeros((1, 4, 3))
    pts[0, :, 0] = [10.0, 9.0, 8.0, 7.0]
    box_index = np.array([[0, 0, 0, 1]], dtype=np.int64)
    labels = LabelGrid(box_index, np.zeros((1, 4), dtype=np.int64))
    boxes = [Box7(11, 0, 0, 1, 1, 1, 0), Box7(6, 0, 0, 1, 1, 1, 0)]
    rows = np.array([[b.cx, b.cy, b.cz, 1, 1, 1, 0.0] for b in boxes])
    targets = encode_batch(pts.reshape(-1, 3), rows[box_index.ravel()]).reshape(1, 4, 8)
    preds = targets.copy()
    preds[..., 0] += 2.0  # smooth l1 gives 2 - 0.5 = 1.5 per pixel
    loss = reg_loss(Tensor(preds), labels, boxes, pts)
    assert float(loss.data) == pytest.approx(1.5, abs=1e-12)


def test_reg_loss_empty_cases():
    pts = np.zeros((2, 2, 3))
    pts[..., 0] = 5.0
    labels = LabelGrid(np.full((2, 2), -1, dtype=np.int64), np.full((2, 2), -1, dtype=np.int64))
    assert float(reg_loss(Tensor(np.zeros((2, 2, 8))), labels, [], pts).data) == 0.0
    assert float(reg_loss(Tensor(np.zeros((2, 2, 8))), labels,
                          [Box7(1, 1, 1, 1, 1, 1, 0)], pts).data) == 0.0


def test_reg_loss_gradient_only_on_foreground():
    pts = np.zeros((1, 3, 3))
    pts[0, :, 0] = [10.0, 9.0, 8.0]
    labels = LabelGrid(np.array([[0, -1, 0]], dtype=np.int64),
                       np.array([[0, -1, 0]], dtype=np.int64))
    box = Box7(9.5, 0.3, 0.1, 2, 1, 1, 0.2)
    preds = Tensor(np.zeros((1, 3, 8)), requires_grad=True)
    reg_loss(preds, labels, [box], pts).backward()
    assert np.any(preds.grad[0, 0] != 0.0)
    assert np.all(preds.grad[0, 1] == 0.0)
    assert np.any(preds.grad[0, 2] != 0.0)
