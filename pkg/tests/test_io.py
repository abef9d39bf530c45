"""File format tests: RIMG container, JSONL boxes, checkpoints, renders."""

import json
import struct
import time

import numpy as np
import pytest

from rvdet import io
from rvdet.geom import Box7
from rvdet.io import BoxRecord, FormatError
from rvdet.rimg import NUM_CHANNELS, BeamTable, RangeImage

from helpers import filled_image


def _sample_image(rng, height=6, width=9, holes=0.2):
    return filled_image(height, width, rng, hole_fraction=holes)


def test_rimg_round_trip_exact(tmp_path):
    rng = np.random.default_rng(7)
    img = _sample_image(rng)
    path = tmp_path / "a.rimg"
    io.write_rimg(path, img)
    back = io.read_rimg(path)
    assert back.height == img.height and back.width == img.width
    assert np.array_equal(back.channels, img.channels)
    assert np.array_equal(back.beam_table.inclinations, img.beam_table.inclinations)


def test_rimg_writer_is_byte_deterministic(tmp_path):
    rng = np.random.default_rng(8)
    img = _sample_image(rng)
    p1, p2 = tmp_path / "a.rimg", tmp_path / "b.rimg"
    io.write_rimg(p1, img)
    io.write_rimg(p2, img)
    assert p1.read_bytes() == p2.read_bytes()


def test_rimg_ten_thousand_pixels_under_a_second(tmp_path):
    rng = np.random.default_rng(9)
    img = _sample_image(rng, height=100, width=100, holes=0.1)
    path = tmp_path / "big.rimg"
    t0 = time.perf_counter()
    io.write_rimg(path, img)
    back = io.read_rimg(path)
    assert time.perf_counter() - t0 < 1.0
    assert np.array_equal(back.channels, img.channels)


def _valid_rimg_bytes(tmp_path):
    rng = np.random.default_rng(10)
    img = _sample_image(rng, height=4, width=5)
    path = tmp_path / "ok.rimg"
    io.write_rimg(path, img)
    return bytearray(path.read_bytes()), img


def _expect_format_error(tmp_path, data, offset, fragment=None):
    bad = tmp_path / "bad.rimg"
    bad.write_bytes(bytes(data))
    with pytest.raises(FormatError) as exc:
        io.read_rimg(bad)
    assert exc.value.offset == offset
    assert f"at byte offset {offset}" in str(exc.value)
    if fragment is not None:
        assert fragment in str(exc.value)


def test_rimg_bad_magic_offset_zero(tmp_path):
    data, _ = _valid_rimg_bytes(tmp_path)
    data[0:4] = b"XIMG"
    _expect_format_error(tmp_path, data, 0, "bad magic")


def test_rimg_bad_version_offset_four(tmp_path):
    data, _ = _valid_rimg_bytes(tmp_path)
    data[4:8] = struct.pack("<I", 99)
    _expect_format_error(tmp_path, data, 4, "version")


def test_rimg_degenerate_size_offset_eight(tmp_path):
    data, img = _valid_rimg_bytes(tmp_path)
    data[8:12] = struct.pack("<I", 0)
    _expect_format_error(tmp_path, data, 8, "degenerate")


def test_rimg_wrong_channel_count_offset_sixteen(tmp_path):
    data, _ = _valid_rimg_bytes(tmp_path)
    data[16:20] = struct.pack("<I", NUM_CHANNELS + 3)
    _expect_format_error(tmp_path, data, 16, "channels")


def test_rimg_truncated_beam_table(tmp_path):
    data, img = _valid_rimg_bytes(tmp_path)
    # the beam table starts right after the 20-byte header
    _expect_format_error(tmp_path, data[:25], 20, "truncated")


def test_rimg_truncated_planes(tmp_path):
    data, img = _valid_rimg_bytes(tmp_path)
    planes_at = 20 + 8 * img.height
    _expect_format_error(tmp_path, data[:planes_at + 11], planes_at, "truncated")


def test_rimg_trailing_bytes_rejected(tmp_path):
    data, _ = _valid_rimg_bytes(tmp_path)
    end = len(data)
    _expect_format_error(tmp_path, data + b"xy", end, "2 trailing bytes")


def test_boxes_jsonl_round_trip(tmp_path):
    records = [
        BoxRecord(Box7(1.0, -2.0, 0.5, 4.0, 2.0, 1.5, 0.3), "VEHICLE_LIKE"),
        BoxRecord(Box7(8.0, 3.0, 1.0, 0.8, 0.8, 1.7, -1.2), "WALKER_LIKE", 0.75),
    ]
    path = tmp_path / "boxes.jsonl"
    io.write_boxes_jsonl(path, records)
    back = io.read_boxes_jsonl(path)
    assert len(back) == 2
    for orig, got in zip(records, back):
        assert got.box == orig.box
        assert got.cls == orig.cls
        assert got.score == orig.score
    assert back[0].score is None


def test_boxes_jsonl_byte_deterministic(tmp_path):
    rec = [BoxRecord(Box7(0.1, 0.2, 0.3, 1.0, 1.0, 1.0, 0.0), "VEHICLE_LIKE", 0.5)]
    p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    io.write_boxes_jsonl(p1, rec)
    io.write_boxes_jsonl(p2, rec)
    assert p1.read_bytes() == p2.read_bytes()


def test_boxes_jsonl_bad_line_reports_offset(tmp_path):
    good = json.dumps({"cx": 0.0, "cy": 0.0, "cz": 0.0, "l": 1.0, "w": 1.0,
                       "h": 1.0, "yaw": 0.0, "class": "VEHICLE_LIKE"})
    path = tmp_path / "boxes.jsonl"
    path.write_text(good + "\n{not json\n", encoding="utf-8")
    with pytest.raises(FormatError) as exc:
        io.read_boxes_jsonl(path)
    assert exc.value.offset == len(good) + 1
    assert "line 2" in str(exc.value)


def test_boxes_jsonl_missing_key_is_format_error(tmp_path):
    obj = {"cx": 0.0, "cy": 0.0, "cz": 0.0, "l": 1.0, "w": 1.0, "h": 1.0,
           "class": "VEHICLE_LIKE"}  # yaw missing
    path = tmp_path / "boxes.jsonl"
    path.write_text(json.dumps(obj) + "\n", encoding="utf-8")
    with pytest.raises(FormatError) as exc:
        io.read_boxes_jsonl(path)
    assert exc.value.offset == 0
    assert "line 1" in str(exc.value)


def test_boxes_jsonl_blank_lines_skipped(tmp_path):
    good = json.dumps({"cx": 0.0, "cy": 0.0, "cz": 0.0, "l": 1.0, "w": 1.0,
                       "h": 1.0, "yaw": 0.0, "class": "VEHICLE_LIKE"})
    path = tmp_path / "boxes.jsonl"
    path.write_text("\n" + good + "\n\n", encoding="utf-8")
    assert len(io.read_boxes_jsonl(path)) == 1


def test_checkpoint_round_trip_all_ranks(tmp_path):
    rng = np.random.default_rng(11)
    params = {
        "w2": rng.normal(size=(3, 4)),
        "bias": rng.normal(size=(4,)),
        "scale": np.float64(2.5),  # rank 0
    }
    path = tmp_path / "m.ckpt"
    io.save_checkpoint(path, params, "fp-string")
    back, fp = io.load_checkpoint(path)
    assert fp == "fp-string"
    assert sorted(back) == sorted(params)
    for name in params:
        got = back[name]
        want = np.asarray(params[name], dtype=np.float64)
        assert got.shape == want.shape
        assert np.array_equal(got, want)
    assert back["scale"].shape == ()


def test_checkpoint_bytes_ignore_insertion_order(tmp_path):
    a = np.arange(6.0).reshape(2, 3)
    b = np.arange(3.0)
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    io.save_checkpoint(p1, {"a": a, "b": b}, "fp")
    io.save_checkpoint(p2, {"b": b, "a": a}, "fp")
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_bad_magic_and_trailing(tmp_path):
    path = tmp_path / "m.ckpt"
    io.save_checkpoint(path, {"w": np.zeros(2)}, "fp")
    data = bytearray(path.read_bytes())

    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"XVCK" + bytes(data[4:]))
    with pytest.raises(FormatError) as exc:
        io.load_checkpoint(bad)
    assert exc.value.offset == 0

    bad.write_bytes(bytes(data) + b"\x00")
    with pytest.raises(FormatError) as exc:
        io.load_checkpoint(bad)
    assert exc.value.offset == len(data)


def test_checkpoint_implausible_rank(tmp_path):
    # hand-assembled file: empty fingerprint, one parameter of rank 9
    parts = [b"RVCK", struct.pack("<I", 1), struct.pack("<I", 0),
             struct.pack("<I", 1), struct.pack("<H", 1), b"w"]
    rank_at = sum(len(p) for p in parts)
    parts.append(struct.pack("<I", 9))
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"".join(parts))
    with pytest.raises(FormatError) as exc:
        io.load_checkpoint(path)
    assert exc.value.offset == rank_at
    assert "implausible rank 9" in str(exc.value)


def test_checkpoint_truncated_data(tmp_path):
    path = tmp_path / "m.ckpt"
    io.save_checkpoint(path, {"w": np.zeros(4)}, "fp")
    data = path.read_bytes()
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(data[:-8])
    with pytest.raises(FormatError) as exc:
        io.load_checkpoint(bad)
    assert "truncated" in str(exc.value)


def test_config_fingerprint_is_canonical():
    assert io.config_fingerprint({"b": 1, "a": [2, 3]}) == '{"a":[2,3],"b":1}'
    # key order of the input must not matter
    assert io.config_fingerprint({"a": [2, 3], "b": 1}) == '{"a":[2,3],"b":1}'


def test_render_range_channel_min_max():
    beams = BeamTable(np.array([0.1, 0.0]))
    channels = np.zeros((NUM_CHANNELS, 2, 2))
    channels[0] = [[10.0, 20.0], [0.0, 15.0]]
    img = RangeImage(channels, beams)
    gray = io.render_range_channel(img)
    assert gray.dtype == np.uint8
    # lo=10 -> 32, hi=20 -> 32+223=255, empty -> 0, midpoint rounds down
    assert gray[0, 0] == 32
    assert gray[0, 1] == 255
    assert gray[1, 0] == 0
    assert gray[1, 1] == 32 + int(223 * 0.5)


def test_render_range_channel_constant_and_empty():
    beams = BeamTable(np.array([0.0]))
    channels = np.zeros((NUM_CHANNELS, 1, 2))
    channels[0] = [[5.0, 5.0]]
    gray = io.render_range_channel(RangeImage(channels, beams))
    assert gray.tolist() == [[32, 32]]
    empty = io.render_range_channel(RangeImage(np.zeros((NUM_CHANNELS, 1, 2)), beams))
    assert empty.tolist() == [[0, 0]]


def test_render_range_channel_mask_tint():
    beams = BeamTable(np.array([0.0]))
    channels = np.zeros((NUM_CHANNELS, 1, 2))
    channels[0] = [[10.0, 20.0]]
    img = RangeImage(channels, beams)
    rgb = io.render_range_channel(img, fg_mask=np.array([[False, True]]))
    assert rgb.shape == (1, 2, 3)
    assert rgb[0, 0].tolist() == [32, 32, 32]
    assert rgb[0, 1].tolist() == [255, 64, 64]
    with pytest.raises(ValueError):
        io.render_range_channel(img, fg_mask=np.zeros((2, 2), dtype=bool))


def test_write_pnm_gray_and_color(tmp_path):
    gray = np.arange(6, dtype=np.uint8).reshape(2, 3)
    p = tmp_path / "img.pgm"
    io.write_pnm(p, gray)
    data = p.read_bytes()
    assert data.startswith(b"P5\n3 2\n255\n")
    assert data[len(b"P5\n3 2\n255\n"):] == gray.tobytes()

    rgb = np.arange(18, dtype=np.uint8).reshape(2, 3, 3)
    p = tmp_path / "img.ppm"
    io.write_pnm(p, rgb)
    data = p.read_bytes()
    assert data.startswith(b"P6\n3 2\n255\n")
    assert data[len(b"P6\n3 2\n255\n"):] == rgb.tobytes()


def test_write_pnm_rejects_bad_arrays(tmp_path):
    with pytest.raises(ValueError):
        io.write_pnm(tmp_path / "x.pgm", np.zeros((2, 3)))  # float dtype
    with pytest.raises(ValueError):
        io.write_pnm(tmp_path / "x.pgm", np.zeros(4, dtype=np.uint8))
    with pytest.raises(ValueError):
        io.write_pnm(tmp_path / "x.ppm", np.zeros((2, 3, 4), dtype=np.uint8))
