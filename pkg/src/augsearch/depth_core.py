"""Depth frame and dataset types, validation, and bit-exact file I/O.

A depth frame is a normalized depth map (meters scaled into [0, 1] by
Z_MAX) plus a per-pixel segmentation mask. Datasets serialize to a fixed
little-endian binary layout so that load(save(d)) round-trips bit-exactly.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Z_MAX",
    "SegClass",
    "DomainTag",
    "DepthFrame",
    "LabeledFrame",
    "Dataset",
    "FormatError",
    "make_frame",
    "validate_frame",
    "save_dataset",
    "load_dataset",
    "export_pgm",
]

# Depth normalization: depth_norm = clamp(z_meters / Z_MAX, 0, 1). 2.0 m
# covers the camera distance range [1.35, 1.50] m plus scene extent.
Z_MAX = 2.0


class SegClass(enum.IntEnum):
    """Per-pixel segmentation classes. Background is the fill for rays hitting nothing."""

    Background = 0
    Table = 1
    Wall = 2
    Cube = 3
    Effector = 4


class DomainTag(enum.IntEnum):
    Sim = 0
    PseudoReal = 1


@dataclass(frozen=True)
class DepthFrame:
    """One H x W depth map with segmentation mask.

    `depth` is float32 in [0, 1], `mask` is uint8 SegClass values; both are
    row-major with width*height entries. Construction does not validate;
    use `validate_frame` to check the invariants.
    """

    width: int
    height: int
    depth: np.ndarray
    mask: np.ndarray

    def depth2d(self) -> np.ndarray:
        return np.reshape(self.depth, (self.height, self.width))

    def mask2d(self) -> np.ndarray:
        return np.reshape(self.mask, (self.height, self.width))

    def __eq__(self, other) -> bool:
        if not isinstance(other, DepthFrame):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and np.array_equal(self.depth, other.depth)
            and np.array_equal(self.mask, other.mask)
        )


@dataclass(frozen=True)
class LabeledFrame:
    """A frame plus the cube position label.

    The label is expressed in the world frame so that renders of one scene
    from different viewpoints share the identical label.
    """

    frame: DepthFrame
    cube_position: np.ndarray  # 3-vector, meters

    def __eq__(self, other) -> bool:
        if not isinstance(other, LabeledFrame):
            return NotImplemented
        return self.frame == other.frame and np.array_equal(
            self.cube_position, other.cube_position
        )


@dataclass(frozen=True)
class Dataset:
    items: list[LabeledFrame]
    domain_tag: DomainTag
    seed: int

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.domain_tag == other.domain_tag
            and self.seed == other.seed
            and self.items == other.items
        )

    @property
    def width(self) -> int:
        return self.items[0].frame.width

    @property
    def height(self) -> int:
        return self.items[0].frame.height


def make_frame(depth2d: np.ndarray, mask2d: np.ndarray) -> DepthFrame:
    """Build a canonical frame (float32 depth clipped to [0,1], uint8 mask)."""
    h, w = depth2d.shape
    depth = np.clip(depth2d, 0.0, 1.0).astype(np.float32, copy=False)
    return DepthFrame(width=w, height=h, depth=depth, mask=mask2d.astype(np.uint8, copy=False))


_VALID_CLASSES = frozenset(int(c) for c in SegClass)


def validate_frame(frame: DepthFrame) -> str | None:
    """Return None if the frame satisfies all invariants, else the first violation.

    Total: never raises on any array contents of a constructed frame.
    """
    expected = frame.width * frame.height
    depth = np.asarray(frame.depth)
    mask = np.asarray(frame.mask)
    if depth.size != expected:
        return f"size mismatch: {depth.size} depth entries for {frame.width}x{frame.height}"
    if mask.size != expected:
        return f"size mismatch: {mask.size} mask entries for {frame.width}x{frame.height}"
    flat = depth.ravel()
    bad = np.where(~((flat >= 0.0) & (flat <= 1.0)))[0]
    if bad.size:
        k = int(bad[0])
        return f"depth out of range at index {k}: {flat[k]!r}"
    mflat = mask.ravel()
    badm = np.where((mflat < 0) | (mflat > max(_VALID_CLASSES)))[0]
    if badm.size:
        k = int(badm[0])
        return f"invalid class at index {k}: {int(mflat[k])}"
    return None


class FormatError(ValueError):
    """Dataset file violates the binary format. `offset` is the first inconsistent byte."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


# Layout: magic "DAUG", format version u16, domain_tag u8, seed u64,
# count u32, width u16, height u16; then per item 3x f64 cube position,
# width*height f32 depth, width*height u8 mask. Little-endian throughout.
_MAGIC = b"DAUG"
_VERSION = 1
_HEADER = struct.Struct("<4sHBQIHH")


def save_dataset(dataset: Dataset, path) -> None:
    """Write a dataset in the fixed binary layout. Requires canonical dtypes."""
    if not dataset.items:
        raise ValueError("dataset must be non-empty")
    w, h = dataset.width, dataset.height
    parts = [
        _HEADER.pack(
            _MAGIC,
            _VERSION,
            int(dataset.domain_tag),
            dataset.seed & 0xFFFFFFFFFFFFFFFF,
            len(dataset.items),
            w,
            h,
        )
    ]
    for item in dataset.items:
        err = validate_frame(item.frame)
        if err is not None:
            raise ValueError(f"invalid frame: {err}")
        if item.frame.width != w or item.frame.height != h:
            raise ValueError("all frames in a dataset must share width/height")
        depth = np.asarray(item.frame.depth)
        mask = np.asarray(item.frame.mask)
        if depth.dtype != np.float32 or mask.dtype != np.uint8:
            raise ValueError("dataset frames must be float32 depth / uint8 mask")
        pos = np.asarray(item.cube_position, dtype=np.float64)
        parts.append(pos.astype("<f8").tobytes())
        parts.append(depth.ravel().astype("<f4").tobytes())
        parts.append(mask.ravel().tobytes())
    blob = b"".join(parts)
    with open(path, "wb") as f:
        f.write(blob)


def load_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise FormatError(
            f"truncated header: expected {_HEADER.size} bytes, got {len(raw)}", len(raw)
        )
    magic, version, domain, seed, count, w, h = _HEADER.unpack_from(raw, 0)
    if magic != _MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != _VERSION:
        raise FormatError(f"unsupported format version {version}", 4)
    if domain not in (int(DomainTag.Sim), int(DomainTag.PseudoReal)):
        raise FormatError(f"invalid domain tag {domain}", 6)
    item_bytes = 24 + w * h * 4 + w * h
    expected = _HEADER.size + count * item_bytes
    if len(raw) != expected:
        raise FormatError(
            f"payload length mismatch: expected {expected} bytes, got {len(raw)}",
            min(expected, len(raw)),
        )
    items = []
    off = _HEADER.size
    n = w * h
    for _ in range(count):
        pos = np.frombuffer(raw, dtype="<f8", count=3, offset=off).copy()
        off += 24
        depth = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(h, w).copy()
        off += 4 * n
        mask = np.frombuffer(raw, dtype=np.uint8, count=n, offset=off).reshape(h, w).copy()
        off += n
        items.append(LabeledFrame(frame=DepthFrame(w, h, depth, mask), cube_position=pos))
    return Dataset(items=items, domain_tag=DomainTag(domain), seed=seed)


def export_pgm(frame: DepthFrame, path) -> None:
    """Write a 16-bit binary PGM (P5), value = round(depth * 65535), row-major.

    Samples are written most-significant byte first per the Netpbm convention.
    """
    err = validate_frame(frame)
    if err is not None:
        raise ValueError(f"invalid frame: {err}")
    values = np.rint(np.asarray(frame.depth, dtype=np.float64) * 65535.0).astype(np.uint16)
    header = f"P5\n{frame.width} {frame.height}\n65535\n".encode("ascii")
    with open(path, "wb") as f:
        f.write(header)
        f.write(values.ravel().astype(">u2").tobytes())
