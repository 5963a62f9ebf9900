"""Delay-and-sum reconstruction for point-source photoacoustic RF frames.

Photoacoustic sources emit, so delays are one-way: the pixel at row ``i`` and
column ``j`` sits at depth ``axial_offset + i * c / fs`` under element ``j``,
and element ``e`` sees it ``dist / c`` seconds later. Images keep the
``(n_samples, n_elements)`` shape of the RF frame.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.signal import hilbert

from .errors import DegenerateInput, InvalidArgument, ShapeError
from .formats import write_parf, write_pgm
from .rf import AcquisitionGeometry, RfFrame

DEFAULT_SIGMA_M = 0.3e-3


@dataclass(frozen=True)
class DasImage:
    pixels: np.ndarray
    geometry: AcquisitionGeometry

    def __post_init__(self):
        p = np.asarray(self.pixels, dtype=np.float64)
        if p.shape != self.geometry.shape:
            raise ShapeError(f"image shape {p.shape} does not match geometry {self.geometry.shape}")
        if not np.all(np.isfinite(p)):
            raise InvalidArgument("image contains non-finite pixels")
        p = p.copy()
        p.flags.writeable = False
        object.__setattr__(self, "pixels", p)

    @property
    def axial_spacing(self) -> float:
        return self.geometry.axial_spacing

    @property
    def lateral_spacing(self) -> float:
        return self.geometry.element_pitch


@dataclass(frozen=True)
class PointTarget:
    row: int
    col: int
    sigma_m: float = DEFAULT_SIGMA_M

    def __post_init__(self):
        if not self.sigma_m > 0:
            raise InvalidArgument("sigma_m must be positive")


def _aperture_bounds(n_e: int, aperture: int) -> np.ndarray:
    """First element of the ``aperture``-wide window used for each image column."""
    j = np.arange(n_e)
    return np.clip(j - aperture // 2, 0, n_e - aperture)


def delay_table(geometry: AcquisitionGeometry) -> np.ndarray:
    """One-way delays in samples, indexed ``[row, (j - e) + n_e - 1]``."""
    n_t, n_e = geometry.shape
    x = geometry.element_positions()
    # dx for every column/element offset, built from positions like a per-pair loop would
    dx = np.concatenate([x[0] - x[::-1], x[1:] - x[0]])
    z = geometry.row_depths()
    dist = np.sqrt(dx[None, :] ** 2 + z[:, None] ** 2)
    return (dist - geometry.axial_offset) / geometry.speed_of_sound * geometry.sample_rate


def das_reconstruct(frame: RfFrame, aperture: Optional[int] = None, interp: str = "nearest") -> DasImage:
    """Sum each element's sample at its one-way delay to every pixel.

    ``aperture`` elements centred on the pixel column contribute (all of them by
    default). Delays falling outside the record contribute nothing. Summation
    runs over elements in ascending order, so the result is reproducible.
    """
    g = frame.geometry
    n_t, n_e = g.shape
    aperture = n_e if aperture is None else int(aperture)
    if not 1 <= aperture <= n_e:
        raise InvalidArgument(f"aperture must be in [1, {n_e}], got {aperture}")
    if interp not in ("nearest", "linear"):
        raise InvalidArgument(f"unknown interpolation {interp!r}")
    # each channel gets a trailing zero; out-of-record delays index into it
    padded = np.vstack([frame.samples, np.zeros((1, n_e))])
    table = delay_table(g)
    if interp == "nearest":
        idx = np.floor(table + 0.5).astype(np.int64)
        idx[(idx < 0) | (idx >= n_t)] = n_t
    else:
        i0 = np.floor(table).astype(np.int64)
        frac = table - i0
        bad = (i0 < 0) | (i0 + 1 >= n_t)
        i0[bad] = n_t
        frac[bad] = 0.0
        i1 = np.where(bad, n_t, i0 + 1)
    lo = _aperture_bounds(n_e, aperture)
    out = np.zeros((n_t, n_e))
    for e in range(n_e):
        sl = slice(n_e - 1 - e, 2 * n_e - 1 - e)  # columns j = 0..n_e-1 for this element
        chan = padded[:, e]
        if interp == "nearest":
            vals = chan[idx[:, sl]]
        else:
            f = frac[:, sl]
            vals = (1.0 - f) * chan[i0[:, sl]] + f * chan[i1[:, sl]]
        if aperture < n_e:
            vals[:, (e < lo) | (e >= lo + aperture)] = 0.0
        out += vals
    return DasImage(out, g)


def gaussian_mask(geometry: AcquisitionGeometry, peak: PointTarget) -> np.ndarray:
    rows = (np.arange(geometry.n_samples) - peak.row) * geometry.axial_spacing
    cols = (np.arange(geometry.n_elements) - peak.col) * geometry.element_pitch
    r2 = rows[:, None] ** 2 + cols[None, :] ** 2
    return np.exp(-r2 / (2.0 * peak.sigma_m**2))


def exact_target(image: DasImage, peak: PointTarget) -> DasImage:
    """Isolate the point source by weighting the image with a 2-D Gaussian."""
    n_t, n_e = image.geometry.shape
    if not (0 <= peak.row < n_t and 0 <= peak.col < n_e):
        raise InvalidArgument(f"peak ({peak.row}, {peak.col}) outside a {n_t}x{n_e} image")
    return DasImage(image.pixels * gaussian_mask(image.geometry, peak), image.geometry)


def magnitude(pixels: np.ndarray, envelope: bool = True) -> np.ndarray:
    """Absolute value, or the analytic-signal envelope along the axial direction."""
    if envelope:
        return np.abs(hilbert(pixels, axis=0))
    return np.abs(pixels)


def locate_peak(image: DasImage, envelope: bool = True, sigma_m: float = DEFAULT_SIGMA_M) -> PointTarget:
    """Brightest pixel; ties go to the smallest row, then the smallest column.

    With ``envelope`` the axial Hilbert envelope is used instead of the raw
    bipolar magnitude; it peaks on the pulse centre rather than on a lobe.
    """
    if not np.any(image.pixels):
        raise DegenerateInput("cannot locate a peak in an all-zero image")
    mag = magnitude(image.pixels, envelope)
    flat = int(np.argmax(mag))
    row, col = divmod(flat, mag.shape[1])
    return PointTarget(row, col, sigma_m)


def write_image_pgm(path, image: DasImage, magnitude_only: bool = True) -> None:
    write_pgm(path, image.pixels, magnitude=magnitude_only)


def write_image_blob(path, image: DasImage) -> None:
    write_parf(path, image.pixels, image.geometry)
