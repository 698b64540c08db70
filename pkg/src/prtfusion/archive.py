"""Binary containers for simulated sequences and model checkpoints.

Sequence archive (all integers little-endian)::

    magic    8 bytes  b"PRTSEQ\\0\\0"
    version  u32      1
    manifest u32 length + UTF-8 JSON {version, intrinsics, frame_count, seed, config}
    frame_count times:
        frame_index u32, payload_length u64, crc32(payload) u32, payload
    payload:
        pose         16 x f64, row-major camera-to-world
        depth_clean  u32 width, u32 height, width*height x f32 (row-major)
        depth_noisy  same layout
        appearance   u32 channels, u32 height, u32 width, channels*height*width x f32
        labels       u32 length + UTF-8 text, one JSON record per line

Checkpoint::

    magic    8 bytes  b"PRTCKPT\\0"
    version  u32      1
    header   u32 length + UTF-8 JSON {model_config}
    tensors  u32 count, then per tensor: u16 name length, name, u8 ndim, ndim x u32 dims
    data     every tensor as f64, in table order
    crc32    u32 over the data section
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .geometry import BBox2D, Box3D, CameraIntrinsics, DepthMap, RigidTransform
from .scenesim import FrameObservation, ObjectLabel, Sequence, SimConfig

SEQ_MAGIC = b"PRTSEQ\x00\x00"
CKPT_MAGIC = b"PRTCKPT\x00"
SEQ_VERSION = 1
CKPT_VERSION = 1


class ArchiveError(Exception):
    """Base class for unreadable archives."""


class BadMagicError(ArchiveError):
    pass


class UnsupportedVersionError(ArchiveError):
    pass


class TruncatedArchiveError(ArchiveError):
    pass


class ChecksumError(ArchiveError):
    def __init__(self, message: str, frame_index: int | None = None):
        super().__init__(message)
        self.frame_index = frame_index


class _Reader:
    def __init__(self, data: bytes):
        self.buf = memoryview(data)
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedArchiveError(f"archive truncated while reading {what} at byte {self.pos}")
        out = self.buf[self.pos : self.pos + n].tobytes()
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def done(self) -> bool:
        return self.pos == len(self.buf)


def _read_header(r: _Reader, magic: bytes, version: int, kind: str) -> None:
    got = r.take(len(magic), "magic")
    if got != magic:
        raise BadMagicError(f"not a {kind}: bad magic {got!r}")
    (v,) = r.unpack("<I", "version")
    if v != version:
        raise UnsupportedVersionError(f"unsupported {kind} version {v} (expected {version})")


def _json_block(obj) -> bytes:
    text = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return struct.pack("<I", len(text)) + text


# ------------------------------------------------------------------ sequences


def _label_record(obj: ObjectLabel) -> dict:
    b = obj.bbox2d
    return {
        "id": obj.id,
        "bbox2d": [b.x1, b.y1, b.x2, b.y2],
        "gt_depth": obj.gt_depth,
        "center": [float(c) for c in obj.box3d.center],
        "size": list(obj.box3d.size),
        "yaw": obj.box3d.yaw,
        "visibility": obj.visibility,
    }


def _label_from_record(d: dict) -> ObjectLabel:
    return ObjectLabel(
        int(d["id"]),
        BBox2D(*d["bbox2d"]),
        float(d["gt_depth"]),
        Box3D(np.array(d["center"]), tuple(d["size"]), float(d["yaw"])),
        float(d["visibility"]),
    )


def _grid_bytes(values: np.ndarray) -> bytes:
    h, w = values.shape
    return struct.pack("<II", w, h) + np.ascontiguousarray(values, dtype="<f4").tobytes()


def _frame_payload(frame: FrameObservation) -> bytes:
    out = io.BytesIO()
    out.write(np.ascontiguousarray(frame.ego_pose.matrix, dtype="<f8").tobytes())
    out.write(_grid_bytes(frame.depth_clean.values))
    out.write(_grid_bytes(frame.depth_noisy.values))
    c, h, w = frame.appearance.shape
    out.write(struct.pack("<III", c, h, w))
    out.write(np.ascontiguousarray(frame.appearance, dtype="<f4").tobytes())
    labels = "\n".join(json.dumps(_label_record(o), sort_keys=True) for o in frame.objects).encode()
    out.write(struct.pack("<I", len(labels)))
    out.write(labels)
    return out.getvalue()


def _manifest(seq: Sequence) -> dict:
    cam = seq.intrinsics
    return {
        "version": SEQ_VERSION,
        "intrinsics": {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy, "width": cam.width, "height": cam.height},
        "frame_count": len(seq.frames),
        "seed": seq.seed,
        "config": seq.config.to_dict(),
    }


def sequence_to_bytes(seq: Sequence) -> bytes:
    out = io.BytesIO()
    out.write(SEQ_MAGIC)
    out.write(struct.pack("<I", SEQ_VERSION))
    out.write(_json_block(_manifest(seq)))
    for frame in seq.frames:
        payload = _frame_payload(frame)
        out.write(struct.pack("<IQI", frame.frame_index, len(payload), zlib.crc32(payload)))
        out.write(payload)
    return out.getvalue()


def _read_grid(r: _Reader, what: str) -> np.ndarray:
    w, h = r.unpack("<II", what)
    data = r.take(4 * w * h, what)
    return np.frombuffer(data, dtype="<f4").astype(np.float64).reshape(h, w)


def _parse_frame(payload: bytes, frame_index: int) -> FrameObservation:
    r = _Reader(payload)
    pose = RigidTransform(np.frombuffer(r.take(128, "pose"), dtype="<f8").reshape(4, 4))
    clean = DepthMap(_read_grid(r, "clean depth"))
    noisy = DepthMap(_read_grid(r, "noisy depth"))
    c, h, w = r.unpack("<III", "appearance header")
    app = np.frombuffer(r.take(4 * c * h * w, "appearance"), dtype="<f4").reshape(c, h, w).astype(np.float32)
    (n,) = r.unpack("<I", "labels length")
    text = r.take(n, "labels").decode()
    labels = [_label_from_record(json.loads(line)) for line in text.split("\n") if line]
    if not r.done():
        raise ArchiveError(f"frame {frame_index}: {len(payload) - r.pos} unexpected trailing bytes")
    return FrameObservation(frame_index, pose, clean, noisy, app, labels)


def sequence_from_bytes(data: bytes) -> Sequence:
    r = _Reader(data)
    _read_header(r, SEQ_MAGIC, SEQ_VERSION, "sequence archive")
    (n,) = r.unpack("<I", "manifest length")
    manifest = json.loads(r.take(n, "manifest").decode())
    cam = CameraIntrinsics(**manifest["intrinsics"])
    frames = []
    for i in range(manifest["frame_count"]):
        frame_index, length, crc = r.unpack("<IQI", f"frame {i} header")
        payload = r.take(length, f"frame {frame_index} payload")
        if zlib.crc32(payload) != crc:
            raise ChecksumError(f"checksum mismatch in frame {frame_index}", frame_index)
        frames.append(_parse_frame(payload, frame_index))
    if not r.done():
        raise ArchiveError("unexpected trailing bytes after the last frame")
    return Sequence(frames, cam, int(manifest["seed"]), SimConfig.from_dict(manifest["config"]))


def write_sequence(seq: Sequence, path: str | Path) -> None:
    Path(path).write_bytes(sequence_to_bytes(seq))


def read_sequence(path: str | Path) -> Sequence:
    return sequence_from_bytes(Path(path).read_bytes())


def read_manifest(path: str | Path) -> dict:
    r = _Reader(Path(path).read_bytes())
    _read_header(r, SEQ_MAGIC, SEQ_VERSION, "sequence archive")
    (n,) = r.unpack("<I", "manifest length")
    return json.loads(r.take(n, "manifest").decode())


# ---------------------------------------------------------------- checkpoints


def checkpoint_to_bytes(model) -> bytes:
    out = io.BytesIO()
    out.write(CKPT_MAGIC)
    out.write(struct.pack("<I", CKPT_VERSION))
    out.write(_json_block({"model_config": model.config.to_dict()}))
    names = sorted(model.params)
    out.write(struct.pack("<I", len(names)))
    for name in names:
        shape = model.params[name].shape
        raw = name.encode()
        out.write(struct.pack("<H", len(raw)) + raw + struct.pack("<B", len(shape)))
        out.write(struct.pack(f"<{len(shape)}I", *shape))
    data = b"".join(np.ascontiguousarray(model.params[n], dtype="<f8").tobytes() for n in names)
    out.write(data)
    out.write(struct.pack("<I", zlib.crc32(data)))
    return out.getvalue()


def checkpoint_from_bytes(data: bytes):
    from .encoders.model import FusionModel, ModelConfig

    r = _Reader(data)
    _read_header(r, CKPT_MAGIC, CKPT_VERSION, "checkpoint")
    (n,) = r.unpack("<I", "header length")
    header = json.loads(r.take(n, "header").decode())
    (count,) = r.unpack("<I", "tensor count")
    table = []
    for _ in range(count):
        (ln,) = r.unpack("<H", "tensor name length")
        name = r.take(ln, "tensor name").decode()
        (ndim,) = r.unpack("<B", "tensor rank")
        shape = r.unpack(f"<{ndim}I", "tensor shape")
        table.append((name, shape))
    start = r.pos
    params = {}
    for name, shape in table:
        size = int(np.prod(shape)) if shape else 1
        params[name] = np.frombuffer(r.take(8 * size, f"tensor {name}"), dtype="<f8").reshape(shape).astype(np.float64)
    data_section = bytes(r.buf[start : r.pos])
    (crc,) = r.unpack("<I", "checksum")
    if zlib.crc32(data_section) != crc:
        raise ChecksumError("checkpoint data checksum mismatch")
    if not r.done():
        raise ArchiveError("unexpected trailing bytes in checkpoint")
    return FusionModel(ModelConfig.from_dict(header["model_config"]), params)


def write_checkpoint(model, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_to_bytes(model))


def read_checkpoint(path: str | Path):
    return checkpoint_from_bytes(Path(path).read_bytes())
