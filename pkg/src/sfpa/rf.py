"""RF frame types and frame-level preprocessing.

Frames are time-major ``(n_samples, n_elements)`` matrices. Every operation here
returns new frames; the sample arrays of constructed frames are read-only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import median_filter

from .errors import DegenerateInput, InvalidArgument, ShapeError


@dataclass(frozen=True)
class AcquisitionGeometry:
    """Linear-array acquisition layout.

    Elements sit on the lateral axis, centred on zero. Sample ``i`` of every
    channel corresponds to a one-way travel distance of
    ``axial_offset + i * speed_of_sound / sample_rate``.
    """

    n_elements: int = 128
    n_samples: int = 2000
    n_frames: int = 260
    sample_rate: float = 40e6
    speed_of_sound: float = 1480.0
    element_pitch: float = 0.3e-3
    axial_offset: float = 0.0

    def __post_init__(self):
        if self.n_elements < 2 or self.n_samples < 2 or self.n_frames < 1:
            raise InvalidArgument(
                f"need n_elements >= 2, n_samples >= 2, n_frames >= 1; got "
                f"{self.n_elements}, {self.n_samples}, {self.n_frames}"
            )
        if not (self.sample_rate > 0 and self.speed_of_sound > 0 and self.element_pitch > 0):
            raise InvalidArgument("sample_rate, speed_of_sound and element_pitch must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_samples, self.n_elements)

    @property
    def axial_spacing(self) -> float:
        """Distance travelled by sound in one sample period (m)."""
        return self.speed_of_sound / self.sample_rate

    @property
    def min_depth(self) -> float:
        return self.axial_offset

    @property
    def max_depth(self) -> float:
        return self.axial_offset + (self.n_samples - 1) * self.axial_spacing

    def element_positions(self) -> np.ndarray:
        idx = np.arange(self.n_elements, dtype=np.float64)
        return (idx - (self.n_elements - 1) / 2.0) * self.element_pitch

    def row_depths(self) -> np.ndarray:
        return self.axial_offset + np.arange(self.n_samples) * self.axial_spacing

    def lateral_extent(self) -> tuple[float, float]:
        half = (self.n_elements - 1) / 2.0 * self.element_pitch
        return (-half, half)

    def contains(self, axial: float, lateral: float) -> bool:
        lo, hi = self.lateral_extent()
        return self.min_depth <= axial <= self.max_depth and lo <= lateral <= hi

    def to_pixel(self, axial: float, lateral: float) -> tuple[float, float]:
        """Continuous (row, col) of a physical position on the image grid."""
        row = (axial - self.axial_offset) / self.axial_spacing
        col = lateral / self.element_pitch + (self.n_elements - 1) / 2.0
        return row, col


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class RfFrame:
    samples: np.ndarray
    geometry: AcquisitionGeometry
    frames_averaged: int = 1

    def __post_init__(self):
        s = np.asarray(self.samples)
        if s.shape != self.geometry.shape:
            raise ShapeError(f"frame shape {s.shape} does not match geometry {self.geometry.shape}")
        if not np.all(np.isfinite(s)):
            raise InvalidArgument("frame contains non-finite samples")
        if self.frames_averaged < 1:
            raise InvalidArgument("frames_averaged must be >= 1")
        object.__setattr__(self, "samples", _readonly(s.astype(np.float64, copy=False)))

    def with_samples(self, samples: np.ndarray, frames_averaged: Optional[int] = None) -> "RfFrame":
        fa = self.frames_averaged if frames_averaged is None else frames_averaged
        return RfFrame(samples, self.geometry, fa)


@dataclass(frozen=True)
class FrameStack:
    """All frames recorded at one acquisition spot.

    ``source_truth`` is ``(axial_m, lateral_m)`` when known; ``source`` optionally
    carries the full simulator source description.
    """

    frames: tuple
    source_truth: Optional[tuple[float, float]] = None
    source: object = None
    stack_id: str = ""

    def __post_init__(self):
        frames = tuple(self.frames)
        if not frames:
            raise InvalidArgument("a frame stack needs at least one frame")
        geom = frames[0].geometry
        if any(f.geometry != geom for f in frames):
            raise InvalidArgument("all frames of a stack must share one geometry")
        object.__setattr__(self, "frames", frames)
        if self.source_truth is not None:
            axial, lateral = self.source_truth
            if not geom.contains(axial, lateral):
                raise InvalidArgument(f"source truth {self.source_truth} outside the field of view")

    @property
    def geometry(self) -> AcquisitionGeometry:
        return self.frames[0].geometry

    def __len__(self) -> int:
        return len(self.frames)

    def as_array(self) -> np.ndarray:
        return np.stack([f.samples for f in self.frames])


@dataclass(frozen=True)
class BackgroundMask:
    """Boolean ``(n_samples, n_elements)`` matrix, True marks background."""

    mask: np.ndarray = field()

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=bool)
        if m.ndim != 2:
            raise ShapeError("background mask must be 2-D")
        n_bg = int(m.sum())
        if n_bg == 0:
            raise InvalidArgument("background mask has no background pixels")
        if n_bg == m.size:
            raise InvalidArgument("background mask has no signal pixels")
        object.__setattr__(self, "mask", _readonly(m))


def temporal_average(stack: FrameStack, k: int, stride_policy: str = "disjoint") -> list[RfFrame]:
    """Average runs of ``k`` consecutive frames.

    ``disjoint`` yields ``floor(n / k)`` non-overlapping averages, ``sliding``
    yields ``n - k + 1`` overlapping ones.
    """
    n = len(stack)
    if not 1 <= k <= n:
        raise InvalidArgument(f"k must be in [1, {n}], got {k}")
    if stride_policy not in ("disjoint", "sliding"):
        raise InvalidArgument(f"unknown stride policy {stride_policy!r}")
    data = stack.as_array()
    geom = stack.geometry
    if stride_policy == "disjoint":
        m = n // k
        means = data[: m * k].reshape(m, k, *geom.shape).mean(axis=1)
    else:
        means = np.stack([data[i : i + k].mean(axis=0) for i in range(n - k + 1)])
    return [RfFrame(m_, geom, k) for m_ in means]


def median_filter_temporal(frame: RfFrame, window: int) -> RfFrame:
    """Per-channel running median along time with edge replication."""
    if window < 1 or window % 2 == 0:
        raise InvalidArgument(f"median window must be odd and >= 1, got {window}")
    if window > frame.geometry.n_samples:
        raise InvalidArgument("median window longer than the frame")
    if window == 1:
        return frame
    out = median_filter(frame.samples, size=(window, 1), mode="nearest")
    return frame.with_samples(out)


def build_reference(stack: FrameStack, median_window: int = 5) -> RfFrame:
    """Average every frame of the stack, then median-filter along time."""
    (avg,) = temporal_average(stack, len(stack), "disjoint")
    return median_filter_temporal(avg, median_window)


def apply_background_median(frame: RfFrame, mask: BackgroundMask) -> RfFrame:
    m = mask.mask
    if m.shape != frame.samples.shape:
        raise ShapeError(f"mask shape {m.shape} does not match frame {frame.samples.shape}")
    if not m.any():
        raise InvalidArgument("mask selects no background pixels")
    med = np.median(frame.samples[m])
    out = np.where(m, med, frame.samples)
    return frame.with_samples(out)


def normalize(frame: RfFrame) -> tuple[RfFrame, float]:
    """Scale to max-abs 1; returns the frame and the divisor used."""
    scale = float(np.max(np.abs(frame.samples)))
    if scale == 0.0:
        raise DegenerateInput("cannot normalize an all-zero frame")
    return frame.with_samples(frame.samples / scale), scale


def denormalize(frame: RfFrame, scale: float) -> RfFrame:
    return frame.with_samples(frame.samples * scale)


def stack_from_frames(frames: Sequence[RfFrame], **kwargs) -> FrameStack:
    return FrameStack(tuple(frames), **kwargs)
