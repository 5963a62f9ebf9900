"""Synthetic point-source RF acquisitions.

A single absorber emits a derivative-of-Gaussian pulse; each element records it
after the one-way time of flight, scaled by ``1/r`` spreading and a cosine
directivity. Frames add white noise, a per-element DC band that is fixed for the
whole stack, and isolated single-sample spikes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import InvalidArgument, OutOfView
from .formats import read_keyvalue, write_keyvalue
from .rf import AcquisitionGeometry, BackgroundMask, FrameStack, RfFrame


@dataclass(frozen=True)
class SourceSpec:
    lateral_pos: float
    axial_pos: float
    pulse_width: float = 0.375e-6
    amplitude: float = 1.0
    spot_sigma: float = 0.0
    # out-of-plane distance; 0 for an in-plane source
    elevation: float = 0.0

    def __post_init__(self):
        if not self.axial_pos > 0:
            raise InvalidArgument("axial_pos must be positive")
        if not self.pulse_width > 0:
            raise InvalidArgument("pulse_width must be positive")
        if not self.amplitude > 0:
            raise InvalidArgument("amplitude must be positive")
        if self.spot_sigma < 0:
            raise InvalidArgument("spot_sigma must be >= 0")

    def check_in_view(self, geometry: AcquisitionGeometry) -> None:
        if not geometry.contains(self.axial_pos, self.lateral_pos):
            raise OutOfView(
                f"source at axial {self.axial_pos:.4g} m, lateral {self.lateral_pos:.4g} m is outside "
                f"depth [{geometry.min_depth:.4g}, {geometry.max_depth:.4g}] m / lateral "
                f"[{geometry.lateral_extent()[0]:.4g}, {geometry.lateral_extent()[1]:.4g}] m"
            )


@dataclass(frozen=True)
class NoiseSpec:
    white_noise_std: float = 0.5
    channel_offset_std: float = 0.05
    spike_rate: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.white_noise_std < 0 or self.channel_offset_std < 0:
            raise InvalidArgument("noise standard deviations must be >= 0")
        if not 0.0 <= self.spike_rate <= 1.0:
            raise InvalidArgument("spike_rate must lie in [0, 1]")


def element_distances(geometry: AcquisitionGeometry, source: SourceSpec) -> np.ndarray:
    dx = geometry.element_positions() - source.lateral_pos
    return np.sqrt(dx * dx + source.axial_pos**2 + source.elevation**2)


def arrival_samples(geometry: AcquisitionGeometry, source: SourceSpec) -> np.ndarray:
    """Continuous arrival position (in samples) of the pulse on each element."""
    dist = element_distances(geometry, source)
    return (dist - geometry.axial_offset) / geometry.speed_of_sound * geometry.sample_rate


def arrival_rows(geometry: AcquisitionGeometry, source: SourceSpec) -> np.ndarray:
    return np.floor(arrival_samples(geometry, source) + 0.5).astype(np.int64)


def pulse_sigma_samples(geometry: AcquisitionGeometry, source: SourceSpec) -> float:
    # pulse_width spans +-3 sigma; a finite spot adds its travel-time spread
    sigma_t = math.hypot(source.pulse_width / 6.0, source.spot_sigma / geometry.speed_of_sound)
    return sigma_t * geometry.sample_rate


def pulse_half_support(geometry: AcquisitionGeometry, source: SourceSpec) -> int:
    return max(1, math.ceil(3.0 * pulse_sigma_samples(geometry, source)))


def pulse_kernel(geometry: AcquisitionGeometry, source: SourceSpec) -> tuple[np.ndarray, np.ndarray]:
    """Sample offsets and values of the unit-peak N-shaped pulse."""
    sigma = pulse_sigma_samples(geometry, source)
    half = pulse_half_support(geometry, source)
    k = np.arange(-half, half + 1)
    u = k / sigma
    return k, -u * np.exp(-0.5 * u * u) * math.exp(0.5)


def synthesize_clean(geometry: AcquisitionGeometry, source: SourceSpec) -> RfFrame:
    source.check_in_view(geometry)
    dist = element_distances(geometry, source)
    centers = arrival_rows(geometry, source)
    if np.all((centers < 0) | (centers >= geometry.n_samples)):
        raise OutOfView("pulse arrives outside the recorded window on every element")
    cos_theta = source.axial_pos / dist
    gains = source.amplitude / dist * cos_theta
    offsets, pulse = pulse_kernel(geometry, source)
    frame = np.zeros(geometry.shape)
    for e in range(geometry.n_elements):
        rows = centers[e] + offsets
        ok = (rows >= 0) & (rows < geometry.n_samples)
        frame[rows[ok], e] = gains[e] * pulse[ok]
    return RfFrame(frame, geometry, 1)


def iter_noisy_frames(
    geometry: AcquisitionGeometry, source: SourceSpec, noise: NoiseSpec
) -> Iterator[np.ndarray]:
    """Yield ``geometry.n_frames`` noisy sample matrices, deterministic in ``noise.seed``."""
    clean = synthesize_clean(geometry, source).samples
    peak = float(np.max(np.abs(clean)))
    rng = np.random.default_rng(noise.seed)
    offsets = rng.normal(0.0, noise.channel_offset_std * peak, size=geometry.n_elements)
    n_t, n_e = geometry.shape
    for _ in range(geometry.n_frames):
        frame = clean + offsets[None, :]
        if noise.white_noise_std > 0:
            frame = frame + rng.normal(0.0, noise.white_noise_std * peak, size=geometry.shape)
        if noise.spike_rate > 0:
            hit = rng.random(n_e) < noise.spike_rate
            cols = np.flatnonzero(hit)
            rows = rng.integers(0, n_t, size=cols.size)
            amps = rng.uniform(5.0, 10.0, size=cols.size) * peak
            signs = rng.choice((-1.0, 1.0), size=cols.size)
            frame = frame.copy()
            frame[rows, cols] += amps * signs
        yield frame


def synthesize_stack(
    geometry: AcquisitionGeometry, source: SourceSpec, noise: NoiseSpec, stack_id: str = ""
) -> FrameStack:
    frames = tuple(RfFrame(f, geometry, 1) for f in iter_noisy_frames(geometry, source, noise))
    return FrameStack(frames, (source.axial_pos, source.lateral_pos), source, stack_id)


def ground_truth_mask(geometry: AcquisitionGeometry, source: SourceSpec, margin: int) -> BackgroundMask:
    """Background = every pixel more than ``margin`` samples from the arrival curve."""
    half = pulse_half_support(geometry, source)
    if margin < half:
        raise InvalidArgument(f"margin {margin} is narrower than the pulse half-support {half}")
    centers = arrival_rows(geometry, source)
    rows = np.arange(geometry.n_samples)[:, None]
    signal = np.abs(rows - centers[None, :]) <= margin
    return BackgroundMask(~signal)


def random_source(
    geometry: AcquisitionGeometry,
    axial_pos: float,
    rng: np.random.Generator,
    lateral_fraction: float = 0.6,
    **kwargs,
) -> SourceSpec:
    """Source at a fixed depth and a uniformly random lateral position."""
    lo, hi = geometry.lateral_extent()
    lateral = float(rng.uniform(lo * lateral_fraction, hi * lateral_fraction))
    return SourceSpec(lateral_pos=lateral, axial_pos=axial_pos, **kwargs)


_SOURCE_KEYS = {
    "lateral_pos": "lateral_m",
    "axial_pos": "axial_m",
    "pulse_width": "pulse_width_s",
    "amplitude": "amplitude",
    "spot_sigma": "spot_sigma_m",
    "elevation": "elevation_m",
}
_NOISE_KEYS = {
    "white_noise_std": "white_noise_std",
    "channel_offset_std": "channel_offset_std",
    "spike_rate": "spike_rate",
    "seed": "seed",
}


def write_sidecar(path, source: SourceSpec, noise: NoiseSpec, stack_id: str = "") -> None:
    items: dict[str, object] = {"stack_id": stack_id}
    for attr, key in _SOURCE_KEYS.items():
        items[key] = float(getattr(source, attr))
    for attr, key in _NOISE_KEYS.items():
        v = getattr(noise, attr)
        items[key] = int(v) if attr == "seed" else float(v)
    write_keyvalue(path, items)


def read_sidecar(path) -> tuple[SourceSpec, NoiseSpec, str]:
    kv = read_keyvalue(path)
    src = SourceSpec(**{attr: float(kv[key]) for attr, key in _SOURCE_KEYS.items()})
    nz = {attr: float(kv[key]) for attr, key in _NOISE_KEYS.items() if attr != "seed"}
    noise = NoiseSpec(seed=int(kv["seed"]), **nz)
    return src, noise, kv.get("stack_id", Path(path).stem)
