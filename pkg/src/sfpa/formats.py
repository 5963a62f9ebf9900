"""On-disk formats: PARF RF stacks, key-value sidecars, patch blobs, PGM images.

PARF v1 layout (little-endian)::

    b"PARF" | u32 version=1 | u32 n_samples | u32 n_elements | u32 n_frames
    | f32 sample_rate_hz | f32 speed_of_sound_mps | f32 element_pitch_m
    | f32 axial_offset_m | f32[n_frames, n_samples, n_elements]
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterable, Mapping, Sequence, Union

import numpy as np

from .errors import FormatError
from .rf import AcquisitionGeometry, FrameStack, RfFrame

PathLike = Union[str, Path]

PARF_MAGIC = b"PARF"
PARF_VERSION = 1
_PARF_HEADER = struct.Struct("<4sIIIIffff")


def write_parf(path: PathLike, data: np.ndarray, geometry: AcquisitionGeometry) -> None:
    """Write ``data`` shaped ``(n_frames, n_samples, n_elements)`` (or 2-D for one frame)."""
    arr = np.asarray(data)
    if arr.ndim == 2:
        arr = arr[None]
    n_frames, n_samples, n_elements = arr.shape
    header = _PARF_HEADER.pack(
        PARF_MAGIC,
        PARF_VERSION,
        n_samples,
        n_elements,
        n_frames,
        geometry.sample_rate,
        geometry.speed_of_sound,
        geometry.element_pitch,
        geometry.axial_offset,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_parf(path: PathLike) -> tuple[np.ndarray, AcquisitionGeometry]:
    raw = Path(path).read_bytes()
    if len(raw) < _PARF_HEADER.size:
        raise FormatError(f"{path}: truncated PARF header")
    magic, version, n_samples, n_elements, n_frames, fs, c, pitch, offset = _PARF_HEADER.unpack_from(raw)
    if magic != PARF_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != PARF_VERSION:
        raise FormatError(f"{path}: unsupported PARF version {version}")
    count = n_frames * n_samples * n_elements
    expected = _PARF_HEADER.size + 4 * count
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=_PARF_HEADER.size, count=count)
    geom = AcquisitionGeometry(
        n_elements=n_elements,
        n_samples=n_samples,
        n_frames=n_frames,
        sample_rate=float(fs),
        speed_of_sound=float(c),
        element_pitch=float(pitch),
        axial_offset=float(offset),
    )
    return data.reshape(n_frames, n_samples, n_elements).astype(np.float64), geom


def write_stack(path: PathLike, stack: FrameStack) -> None:
    write_parf(path, stack.as_array(), stack.geometry)


def read_stack(path: PathLike, **kwargs) -> FrameStack:
    data, geom = read_parf(path)
    frames = tuple(RfFrame(f, geom, 1) for f in data)
    return FrameStack(frames, **kwargs)


def format_value(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return ",".join(format_value(x) for x in v)
    return str(v)


def write_keyvalue(path: PathLike, items: Mapping[str, object]) -> None:
    lines = [f"{k} = {format_value(v)}" for k, v in items.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def parse_keyvalue(text: str, source: str = "<text>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in out:
            raise FormatError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def read_keyvalue(path: PathLike) -> dict[str, str]:
    return parse_keyvalue(Path(path).read_text(), str(path))


# Patch blob: u32 count | u32 side | f32[count, 2, side, side] (input, target interleaved)
_PATCH_HEADER = struct.Struct("<II")


def write_patch_blob(path: PathLike, inputs: np.ndarray, targets: np.ndarray) -> None:
    inputs = np.asarray(inputs)
    targets = np.asarray(targets)
    if inputs.shape != targets.shape or inputs.ndim != 3 or inputs.shape[1] != inputs.shape[2]:
        raise FormatError(f"patch arrays must be (count, side, side); got {inputs.shape}, {targets.shape}")
    count, side, _ = inputs.shape
    inter = np.stack([inputs, targets], axis=1).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(_PATCH_HEADER.pack(count, side))
        fh.write(inter.tobytes())


def read_patch_blob(path: PathLike) -> tuple[np.ndarray, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < _PATCH_HEADER.size:
        raise FormatError(f"{path}: truncated patch header")
    count, side = _PATCH_HEADER.unpack_from(raw)
    n = count * 2 * side * side
    if len(raw) != _PATCH_HEADER.size + 4 * n:
        raise FormatError(f"{path}: size does not match header ({count} x {side}^2)")
    data = np.frombuffer(raw, dtype="<f4", offset=_PATCH_HEADER.size, count=n)
    data = data.reshape(count, 2, side, side)
    return data[:, 0].copy(), data[:, 1].copy()


def to_gray8(image: np.ndarray, magnitude: bool = False) -> np.ndarray:
    """Max-abs normalise to 8 bit; signed images map zero to mid-grey."""
    img = np.asarray(image, dtype=np.float64)
    peak = float(np.max(np.abs(img))) if img.size else 0.0
    if peak == 0.0:
        return np.full(img.shape, 0 if magnitude else 128, dtype=np.uint8)
    if magnitude:
        scaled = np.abs(img) / peak
    else:
        scaled = (img / peak + 1.0) / 2.0
    return np.clip(np.rint(scaled * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path: PathLike, image: np.ndarray, magnitude: bool = False) -> None:
    g = image if np.asarray(image).dtype == np.uint8 else to_gray8(image, magnitude)
    h, w = g.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(g).tobytes())


def read_pgm(path: PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PGM supported")
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


def strip(panels: Sequence[np.ndarray], magnitude: Iterable[bool] = (), gap: int = 2) -> np.ndarray:
    """Lay panels side by side (each normalised on its own) with white gaps."""
    mags = list(magnitude)
    mags += [False] * (len(panels) - len(mags))
    grays = [to_gray8(p, m) for p, m in zip(panels, mags)]
    h = max(g.shape[0] for g in grays)
    cols = []
    for i, g in enumerate(grays):
        if g.shape[0] < h:
            g = np.vstack([g, np.full((h - g.shape[0], g.shape[1]), 255, np.uint8)])
        cols.append(g)
        if i < len(grays) - 1:
            cols.append(np.full((h, gap), 255, np.uint8))
    return np.hstack(cols)
