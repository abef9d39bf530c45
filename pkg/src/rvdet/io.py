"""File formats: the RIMG binary range-image container, line-delimited JSON
box records, a flat binary checkpoint, and portable-pixmap renders.

All multi-byte values are little-endian; floats are IEEE 754 binary64. Every
writer is byte-deterministic for equal inputs so seeded pipelines can be
compared with a plain file hash.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .geom import Box7
from .rimg import CH_RANGE, NUM_CHANNELS, BeamTable, RangeImage

RIMG_MAGIC = b"RIMG"
RIMG_VERSION = 1
CKPT_MAGIC = b"RVCK"
CKPT_VERSION = 1


class FormatError(ValueError):
    """Malformed file; `offset` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


class _Cursor:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated file: expected {n} bytes for {what}", self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def f64s(self, count: int, what: str) -> np.ndarray:
        raw = self.take(8 * count, what)
        return np.frombuffer(raw, dtype="<f8").astype(np.float64)


def write_rimg(path, img: RangeImage) -> None:
    h, w = img.height, img.width
    parts = [
        RIMG_MAGIC,
        struct.pack("<IIII", RIMG_VERSION, h, w, NUM_CHANNELS),
        img.beam_table.inclinations.astype("<f8").tobytes(),
        img.channels.astype("<f8").tobytes(),
    ]
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def read_rimg(path) -> RangeImage:
    with open(path, "rb") as f:
        cur = _Cursor(f.read())
    magic = cur.take(4, "magic")
    if magic != RIMG_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {RIMG_MAGIC!r}", 0)
    version = cur.u32("format version")
    if version != RIMG_VERSION:
        raise FormatError(f"unsupported format version {version}", 4)
    h = cur.u32("height")
    w = cur.u32("width")
    c = cur.u32("channel count")
    if c != NUM_CHANNELS:
        raise FormatError(f"expected {NUM_CHANNELS} channels, got {c}", 16)
    if h == 0 or w == 0:
        raise FormatError(f"degenerate image size {h}x{w}", 8)
    beams = BeamTable(cur.f64s(h, "beam table"))
    planes = cur.f64s(c * h * w, "channel planes").reshape(c, h, w)
    if cur.pos != len(cur.data):
        raise FormatError(f"{len(cur.data) - cur.pos} trailing bytes", cur.pos)
    return RangeImage(planes, beams)


@dataclass(frozen=True)
class BoxRecord:
    """One JSONL line: a box with its class name and, for detections, a score."""

    box: Box7
    cls: str
    score: float | None = None


def _record_to_obj(rec: BoxRecord) -> dict:
    b = rec.box
    obj = {"cx": b.cx, "cy": b.cy, "cz": b.cz, "l": b.length, "w": b.width,
           "h": b.height, "yaw": b.yaw, "class": rec.cls}
    if rec.score is not None:
        obj["score"] = rec.score
    return obj


def write_boxes_jsonl(path, records) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(_record_to_obj(rec), sort_keys=True))
            f.write("\n")


def read_boxes_jsonl(path):
    records = []
    offset = 0
    with open(path, "rb") as f:
        raw = f.read()
    for lineno, line in enumerate(raw.split(b"\n"), start=1):
        if line.strip():
            try:
                obj = json.loads(line)
                box = Box7(float(obj["cx"]), float(obj["cy"]), float(obj["cz"]),
                           float(obj["l"]), float(obj["w"]), float(obj["h"]),
                           float(obj["yaw"]))
                score = float(obj["score"]) if "score" in obj else None
                records.append(BoxRecord(box, str(obj["class"]), score))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise FormatError(f"bad box record on line {lineno}: {e}", offset) from e
        offset += len(line) + 1
    return records


def save_checkpoint(path, params: dict, fingerprint: str) -> None:
    """Parameters (name -> float64 array) plus a config fingerprint string.
    Parameters are written sorted by name so equal inputs give equal bytes."""
    fp = fingerprint.encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION),
             struct.pack("<I", len(fp)), fp,
             struct.pack("<I", len(params))]
    for name in sorted(params):
        arr = np.asarray(params[name], dtype=np.float64)
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f8").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def load_checkpoint(path):
    """Returns (params dict, fingerprint string)."""
    with open(path, "rb") as f:
        cur = _Cursor(f.read())
    magic = cur.take(4, "magic")
    if magic != CKPT_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {CKPT_MAGIC!r}", 0)
    version = cur.u32("checkpoint version")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    fp_len = cur.u32("fingerprint length")
    fingerprint = cur.take(fp_len, "fingerprint").decode("utf-8")
    count = cur.u32("parameter count")
    params = {}
    for _ in range(count):
        name_len = struct.unpack("<H", cur.take(2, "name length"))[0]
        name = cur.take(name_len, "parameter name").decode("utf-8")
        ndim = cur.u32("rank")
        if ndim > 8:
            raise FormatError(f"implausible rank {ndim} for {name}", cur.pos - 4)
        shape = tuple(cur.u32("dimension") for _ in range(ndim))
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        params[name] = cur.f64s(n, f"data of {name}").reshape(shape)
    if cur.pos != len(cur.data):
        raise FormatError(f"{len(cur.data) - cur.pos} trailing bytes", cur.pos)
    return params, fingerprint


def config_fingerprint(obj) -> str:
    """Canonical JSON of a config dict; stored in checkpoints and compared
    on load so a checkpoint cannot silently run under a different setup."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def render_range_channel(img: RangeImage, fg_mask=None) -> np.ndarray:
    """Min-max normalize the range channel to uint8. Without a mask returns
    (H, W) grayscale; with a foreground mask returns (H, W, 3) with the
    masked pixels tinted red."""
    rng = img.channels[CH_RANGE]
    filled = rng > 0.0
    if filled.any():
        lo, hi = rng[filled].min(), rng[filled].max()
        span = hi - lo if hi > lo else 1.0
        gray = np.where(filled, 32 + 223 * (rng - lo) / span, 0.0)
    else:
        gray = np.zeros_like(rng)
    gray = gray.astype(np.uint8)
    if fg_mask is None:
        return gray
    fg = np.asarray(fg_mask, dtype=bool)
    if fg.shape != gray.shape:
        raise ValueError(f"mask shape {fg.shape} does not match image {gray.shape}")
    rgb = np.stack([gray, gray, gray], axis=-1)
    rgb[fg] = [255, 64, 64]
    return rgb


def write_pnm(path, pixels: np.ndarray) -> None:
    """Write (H, W) uint8 as PGM (P5) or (H, W, 3) uint8 as PPM (P6)."""
    arr = np.asarray(pixels)
    if arr.dtype != np.uint8 or arr.ndim not in (2, 3):
        raise ValueError("expected a uint8 array of shape (H, W) or (H, W, 3)")
    if arr.ndim == 3 and arr.shape[2] != 3:
        raise ValueError(f"color image needs 3 channels, got {arr.shape[2]}")
    kind = b"P5" if arr.ndim == 2 else b"P6"
    header = kind + f"\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii")
    with open(path, "wb") as f:
        f.write(header)
        f.write(arr.tobytes())
