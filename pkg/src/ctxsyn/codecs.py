"""Bit-exact codecs: Middlebury .flo flow files, binary PPM images, and the
.ctxc tensor container used for checkpoints and context weights.

All decoders validate sizes before touching payload bytes, so truncated or
corrupt input raises CodecError instead of crashing. decode(encode(x)) == x
bit-exactly for every codec.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

FLO_MAGIC = 202021.25
UNKNOWN_FLOW = 1e9  # |value| above this marks an unknown/invalid flow vector
CONTAINER_MAGIC = b"CTXC"
CONTAINER_VERSION = 1
_MAX_ELEMENTS = 2 ** 31


class CodecError(ValueError):
    """Malformed or inconsistent bytes for one of the file formats."""


@dataclass
class FlowField:
    """Per-pixel displacement in pixels; u horizontal, v vertical, row-major."""

    width: int
    height: int
    u: np.ndarray  # (H, W) float32
    v: np.ndarray  # (H, W) float32

    def unknown_mask(self) -> np.ndarray:
        """Pixels whose flow is the Middlebury unknown sentinel or non-finite."""
        return (~np.isfinite(self.u) | ~np.isfinite(self.v)
                | (np.abs(self.u) > UNKNOWN_FLOW) | (np.abs(self.v) > UNKNOWN_FLOW))


@dataclass
class Frame:
    """RGB image with values in [0, 1], stored channels-first."""

    width: int
    height: int
    rgb: np.ndarray  # (3, H, W) float32

    @staticmethod
    def from_array(rgb: np.ndarray) -> "Frame":
        rgb = np.asarray(rgb, dtype=np.float32)
        if rgb.ndim != 3 or rgb.shape[0] != 3:
            raise CodecError(f"frame needs shape (3, H, W), got {rgb.shape}")
        return Frame(width=rgb.shape[2], height=rgb.shape[1], rgb=rgb)

    def luma(self) -> np.ndarray:
        """Rec.601 luma, float32 (H, W)."""
        r, g, b = self.rgb[0], self.rgb[1], self.rgb[2]
        return (0.299 * r + 0.587 * g + 0.114 * b).astype(np.float32)


def zero_flow(width: int, height: int) -> FlowField:
    return FlowField(width, height,
                     np.zeros((height, width), dtype=np.float32),
                     np.zeros((height, width), dtype=np.float32))


# ---------------------------------------------------------------------------
# Middlebury .flo


def read_flo(data: bytes) -> FlowField:
    if len(data) < 12:
        raise CodecError(f"corrupt flow file: header needs 12 bytes, got {len(data)}")
    magic, = struct.unpack_from("<f", data, 0)
    if magic != np.float32(FLO_MAGIC):
        raise CodecError("not a flow file (bad magic)")
    width, height = struct.unpack_from("<ii", data, 4)
    if width <= 0 or height <= 0:
        raise CodecError(f"not a flow file (dims {width}x{height})")
    expected = 12 + 8 * width * height
    if len(data) != expected:
        raise CodecError(f"corrupt flow file: expected {expected} bytes, "
                         f"got {len(data)}")
    uv = np.frombuffer(data, dtype="<f4", offset=12).reshape(height, width, 2)
    return FlowField(width, height, uv[:, :, 0].astype(np.float32),
                     uv[:, :, 1].astype(np.float32))


def write_flo(flow: FlowField) -> bytes:
    if flow.width <= 0 or flow.height <= 0:
        raise CodecError(f"refusing zero-sized flow field {flow.width}x{flow.height}")
    if flow.u.shape != (flow.height, flow.width) or flow.v.shape != flow.u.shape:
        raise CodecError(f"flow planes {flow.u.shape} do not match declared "
                         f"{flow.height}x{flow.width}")
    uv = np.empty((flow.height, flow.width, 2), dtype="<f4")
    uv[:, :, 0] = flow.u
    uv[:, :, 1] = flow.v
    return struct.pack("<fii", FLO_MAGIC, flow.width, flow.height) + uv.tobytes()


# ---------------------------------------------------------------------------
# binary portable pixmap (P6, maxval 255)


def _parse_pnm_header(data: bytes):
    """Return (width, height, maxval, payload_offset); skips comments."""
    if data[:2] != b"P6":
        raise CodecError("malformed image: not a binary PPM (P6)")
    pos = 2
    fields = []
    while len(fields) < 3:
        if pos >= len(data):
            raise CodecError("malformed image: truncated header")
        ch = data[pos:pos + 1]
        if ch == b"#":
            nl = data.find(b"\n", pos)
            if nl < 0:
                raise CodecError("malformed image: unterminated comment")
            pos = nl + 1
        elif ch.isspace():
            pos += 1
        elif ch.isdigit():
            end = pos
            while end < len(data) and data[end:end + 1].isdigit():
                end += 1
            fields.append(int(data[pos:end]))
            pos = end
        else:
            raise CodecError("malformed image: unexpected header byte")
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise CodecError("malformed image: missing separator after maxval")
    return fields[0], fields[1], fields[2], pos + 1


def read_image(data: bytes) -> Frame:
    width, height, maxval, offset = _parse_pnm_header(data)
    if maxval != 255:
        raise CodecError(f"only 8-bit images supported (maxval 255), got {maxval}")
    if width <= 0 or height <= 0:
        raise CodecError(f"malformed image: dims {width}x{height}")
    expected = width * height * 3
    payload = data[offset:]
    if len(payload) != expected:
        raise CodecError(f"corrupt image: expected {expected} payload bytes, "
                         f"got {len(payload)}")
    raw = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    rgb = (raw.astype(np.float32) / 255.0).transpose(2, 0, 1)
    return Frame(width, height, np.ascontiguousarray(rgb))


def write_image(frame: Frame) -> bytes:
    if frame.rgb.shape != (3, frame.height, frame.width):
        raise CodecError(f"frame planes {frame.rgb.shape} do not match declared "
                         f"{frame.height}x{frame.width}")
    # clamp happens here and only here; the network may overshoot [0, 1]
    quant = np.rint(np.clip(frame.rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    header = f"P6\n{frame.width} {frame.height}\n255\n".encode("ascii")
    return header + quant.transpose(1, 2, 0).tobytes()


# ---------------------------------------------------------------------------
# .ctxc tensor container


class TensorContainer:
    """Ordered name -> float32 array mapping with a bit-exact byte layout."""

    def __init__(self):
        self._entries: dict[str, np.ndarray] = {}

    def add(self, name: str, array: np.ndarray) -> None:
        if name in self._entries:
            raise CodecError(f"duplicate container entry {name!r}")
        arr = np.ascontiguousarray(array, dtype=np.float32)
        if arr.size >= _MAX_ELEMENTS:
            raise CodecError(f"entry {name!r} exceeds 2^31 elements")
        self._entries[name] = arr

    def get(self, name: str) -> np.ndarray:
        if name not in self._entries:
            raise CodecError(f"container is missing entry {name!r}")
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def names(self):
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def __len__(self) -> int:
        return len(self._entries)


def write_container(container: TensorContainer) -> bytes:
    parts = [CONTAINER_MAGIC,
             struct.pack("<II", CONTAINER_VERSION, len(container))]
    for name, arr in container.items():
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise CodecError(f"entry name too long ({len(encoded)} bytes)")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
        parts.append(arr.astype("<f4").tobytes())
    return b"".join(parts)


class _Reader:
    """Bounds-checked cursor; never reads past the buffer."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CodecError(f"corrupt container: truncated while reading {what} "
                             f"(need {n} bytes at offset {self.pos}, "
                             f"have {len(self.data) - self.pos})")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk


def read_container(data: bytes) -> TensorContainer:
    r = _Reader(data)
    if r.take(4, "magic") != CONTAINER_MAGIC:
        raise CodecError("not a tensor container (bad magic)")
    version, count = struct.unpack("<II", r.take(8, "header"))
    if version != CONTAINER_VERSION:
        raise CodecError(f"unsupported container version {version}")
    out = TensorContainer()
    for _ in range(count):
        name_len, = struct.unpack("<H", r.take(2, "name length"))
        try:
            name = r.take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CodecError(f"corrupt container: bad entry name ({exc})") from exc
        rank, = struct.unpack("<I", r.take(4, f"rank of {name!r}"))
        if rank > 8:
            raise CodecError(f"corrupt container: rank {rank} for {name!r}")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, f"dims of {name!r}"))
        n_elems = 1
        for d in dims:
            n_elems *= d
        if n_elems >= _MAX_ELEMENTS:
            raise CodecError(f"entry {name!r} exceeds 2^31 elements")
        payload = r.take(4 * n_elems, f"payload of {name!r}")
        arr = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
        out.add(name, arr)
    if r.pos != len(data):
        raise CodecError(f"corrupt container: {len(data) - r.pos} trailing bytes")
    return out
