"""WTF1 binary feature files (little-endian).

Layout: ``b"WTF1"``, u32 T, u32 D_rgb, u32 D_flow, u32 C, u8 has_gt,
f32 seconds_per_segment, T*D_rgb f32 RGB rows, T*D_flow f32 flow rows,
C label bytes, then when has_gt: u32 n_gt and n_gt records of
(u32 class, f32 start_seg, f32 end_seg).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import FeatureFormatError
from .synth import VideoSample

MAGIC = b"WTF1"
_HEADER = struct.Struct("<4sIIIIBf")
_GT = struct.Struct("<Iff")


def encode(sample: VideoSample, include_gt: bool = True) -> bytes:
    T, d_rgb = sample.rgb.shape
    d_flow = sample.flow.shape[1]
    C = sample.label.shape[0]
    parts = [
        _HEADER.pack(MAGIC, T, d_rgb, d_flow, C, 1 if include_gt else 0, sample.seconds_per_segment),
        np.ascontiguousarray(sample.rgb, dtype="<f4").tobytes(),
        np.ascontiguousarray(sample.flow, dtype="<f4").tobytes(),
        np.asarray(sample.label, dtype=np.uint8).tobytes(),
    ]
    if include_gt:
        parts.append(struct.pack("<I", len(sample.gt_intervals)))
        parts.extend(_GT.pack(int(c), s, e) for c, s, e in sample.gt_intervals)
    return b"".join(parts)


def write_feature_file(sample: VideoSample, path, include_gt: bool = True) -> None:
    Path(path).write_bytes(encode(sample, include_gt))


def decode(buf: bytes, video_id: str = "") -> VideoSample:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise FeatureFormatError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}", 0)
    if len(buf) < _HEADER.size:
        raise FeatureFormatError(f"truncated header: expected {_HEADER.size} bytes, got {len(buf)}", len(buf))
    _, T, d_rgb, d_flow, C, has_gt, sps = _HEADER.unpack_from(buf, 0)
    if T == 0:
        raise FeatureFormatError("header declares T=0", 4)
    if d_rgb == 0 or d_flow == 0 or C == 0:
        raise FeatureFormatError("header declares an empty feature or label dimension", 8)
    if has_gt not in (0, 1):
        raise FeatureFormatError(f"has_gt must be 0 or 1, got {has_gt}", 20)
    off = _HEADER.size
    payload = 4 * T * (d_rgb + d_flow) + C
    if len(buf) < off + payload:
        raise FeatureFormatError(
            f"truncated payload: expected {off + payload} bytes, got {len(buf)}", len(buf))
    rgb = np.frombuffer(buf, dtype="<f4", count=T * d_rgb, offset=off).reshape(T, d_rgb)
    off += 4 * T * d_rgb
    flow = np.frombuffer(buf, dtype="<f4", count=T * d_flow, offset=off).reshape(T, d_flow)
    off += 4 * T * d_flow
    label = np.frombuffer(buf, dtype=np.uint8, count=C, offset=off).astype(np.int8)
    off += C
    gt = []
    if has_gt:
        if len(buf) < off + 4:
            raise FeatureFormatError(f"truncated gt count: expected {off + 4} bytes, got {len(buf)}", len(buf))
        (n_gt,) = struct.unpack_from("<I", buf, off)
        off += 4
        if len(buf) < off + n_gt * _GT.size:
            raise FeatureFormatError(
                f"truncated gt records: expected {off + n_gt * _GT.size} bytes, got {len(buf)}", len(buf))
        for _ in range(n_gt):
            c, s, e = _GT.unpack_from(buf, off)
            off += _GT.size
            gt.append((int(c), float(s), float(e)))
    if off != len(buf):
        raise FeatureFormatError(f"{len(buf) - off} trailing bytes", off)
    return VideoSample(video_id, rgb.astype(np.float64), flow.astype(np.float64), label, gt, float(sps))


def load_feature_file(path) -> VideoSample:
    path = Path(path)
    return decode(path.read_bytes(), path.stem)
