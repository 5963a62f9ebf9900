"""Image quality metrics, localization error and inference latency.

SSIM here is the single global window over the whole image with the absolute
constants c1 = 0.01 and c2 = 0.03; a sliding-window variant is available for
comparison via ``ssim(..., window=7)``.
"""

from __future__ import annotations

import csv
import io
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import uniform_filter
from threadpoolctl import threadpool_limits

from .beamform import PointTarget
from .errors import ConfigError, InvalidArgument, ShapeError
from .rf import AcquisitionGeometry, FrameStack, RfFrame, build_reference, normalize, temporal_average

C1 = 0.01
C2 = 0.03


def _pair(reference, candidate) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(reference, dtype=np.float64)
    b = np.asarray(candidate, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(reference, candidate) -> float:
    a, b = _pair(reference, candidate)
    if a.size == 0:
        raise InvalidArgument("mse of empty images")
    return float(np.mean((a - b) ** 2))


def ssim(reference, candidate, c1: float = C1, c2: float = C2, window: Optional[int] = None) -> float:
    """Global SSIM with sample (n - 1) statistics, or the mean of windowed SSIM maps."""
    a, b = _pair(reference, candidate)
    if a.size < 2:
        raise InvalidArgument("ssim needs at least two pixels")
    if window is not None:
        return _windowed_ssim(a, b, c1, c2, window)
    n = a.size
    mu_a, mu_b = a.mean(), b.mean()
    da, db = a - mu_a, b - mu_b
    var_a = np.sum(da * da) / (n - 1)
    var_b = np.sum(db * db) / (n - 1)
    cov = np.sum(da * db) / (n - 1)
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(num / den)


def _windowed_ssim(a: np.ndarray, b: np.ndarray, c1: float, c2: float, window: int) -> float:
    if window < 2 or any(s < window for s in a.shape):
        raise InvalidArgument(f"window {window} does not fit image {a.shape}")
    n = window**a.ndim
    corr = n / (n - 1)
    mu_a = uniform_filter(a, window)
    mu_b = uniform_filter(b, window)
    var_a = (uniform_filter(a * a, window) - mu_a**2) * corr
    var_b = (uniform_filter(b * b, window) - mu_b**2) * corr
    cov = (uniform_filter(a * b, window) - mu_a * mu_b) * corr
    smap = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
    h = window // 2
    inner = tuple(slice(h, s - h) for s in a.shape)
    return float(smap[inner].mean())


def localization_error(predicted: PointTarget, truth: tuple[float, float], geometry: AcquisitionGeometry) -> float:
    """Euclidean distance in pixels between a detected peak and a physical (axial, lateral) position."""
    row, col = geometry.to_pixel(*truth)
    return float(np.hypot(predicted.row - row, predicted.col - col))


# -- evaluation tables ---------------------------------------------------------------


@dataclass(frozen=True)
class LatencySummary:
    mean_ms: float
    std_ms: float
    min_ms: float
    n: int
    threads: Optional[int] = None
    mode: str = ""

    def __str__(self) -> str:
        return f"{self.mean_ms:.1f} ± {self.std_ms:.1f} ms (min {self.min_ms:.1f}, n={self.n}, {self.mode or 'default'})"


@dataclass(frozen=True)
class EvalReport:
    method: str
    stack_id: str
    mse: float
    ssim: float
    localization_error: Optional[float] = None
    detected: bool = False
    latency_ms: Optional[float] = None

    def __post_init__(self):
        if self.mse < 0 or not -1.0 - 1e-12 <= self.ssim <= 1.0 + 1e-12:
            raise InvalidArgument(f"metric out of range: mse={self.mse}, ssim={self.ssim}")


@dataclass(frozen=True)
class MethodSummary:
    method: str
    n: int
    mse_mean: float
    mse_std: float
    ssim_mean: float
    ssim_std: float
    latency_ms_mean: Optional[float] = None
    latency_ms_std: Optional[float] = None


def _std(values: Sequence[float]) -> float:
    return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


def summarize(reports: Sequence[EvalReport], latency: Optional[dict] = None) -> list[MethodSummary]:
    """Mean and sample std per method, methods in first-seen order."""
    order: list[str] = []
    groups: dict[str, list[EvalReport]] = {}
    for r in reports:
        if r.method not in groups:
            order.append(r.method)
            groups[r.method] = []
        groups[r.method].append(r)
    out = []
    for m in order:
        rs = groups[m]
        mses = [r.mse for r in rs]
        ssims = [r.ssim for r in rs]
        lat = (latency or {}).get(m)
        if lat is None:
            lats = [r.latency_ms for r in rs if r.latency_ms is not None]
            lat = (float(np.mean(lats)), _std(lats)) if lats else None
        elif isinstance(lat, LatencySummary):
            lat = (lat.mean_ms, lat.std_ms)
        out.append(
            MethodSummary(
                m, len(rs), float(np.mean(mses)), _std(mses), float(np.mean(ssims)), _std(ssims),
                None if lat is None else lat[0], None if lat is None else lat[1],
            )
        )
    return out


def format_pm(mean: Optional[float], std: Optional[float], digits: int = 3) -> str:
    if mean is None:
        return "-"
    return f"{mean:.{digits}f} ± {std:.{digits}f}"


REPORT_FIELDS = ("method", "mse_mean", "mse_std", "ssim_mean", "ssim_std", "latency_ms_mean", "latency_ms_std")


def report_csv(rows: Sequence[MethodSummary]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_FIELDS)
    for r in rows:
        w.writerow((
            r.method, repr(r.mse_mean), repr(r.mse_std), repr(r.ssim_mean), repr(r.ssim_std),
            "" if r.latency_ms_mean is None else repr(r.latency_ms_mean),
            "" if r.latency_ms_std is None else repr(r.latency_ms_std),
        ))
    return buf.getvalue()


def read_report_csv(path) -> list[MethodSummary]:
    def opt(v):
        return float(v) if v != "" else None

    with open(path, newline="") as fh:
        return [
            MethodSummary(r["method"], 0, float(r["mse_mean"]), float(r["mse_std"]), float(r["ssim_mean"]),
                          float(r["ssim_std"]), opt(r["latency_ms_mean"]), opt(r["latency_ms_std"]))
            for r in csv.DictReader(fh)
        ]


def format_table(rows: Sequence[MethodSummary]) -> str:
    """Aligned text table: method | MSE | SSIM | latency."""
    header = ("method", "MSE", "SSIM", "latency [ms]")
    body = [
        (r.method, format_pm(r.mse_mean, r.mse_std, 4), format_pm(r.ssim_mean, r.ssim_std), format_pm(r.latency_ms_mean, r.latency_ms_std, 1))
        for r in rows
    ]
    widths = [max(len(row[i]) for row in (header, *body)) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in (header, *body)]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def write_report(directory, rows: Sequence[MethodSummary], stem: str = "report") -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / f"{stem}.csv").write_text(report_csv(rows))
    (d / f"{stem}.txt").write_text(format_table(rows))


BASELINES = ("noisy", "avg10", "avg20")


def baseline_frame(stack: FrameStack, name: str, frame_index: int = 0) -> RfFrame:
    """Single noisy frame or the average of the first k frames (``avgK``)."""
    if name == "noisy":
        return stack.frames[frame_index]
    if name.startswith("avg") and name[3:].isdigit():
        k = int(name[3:])
        if k > len(stack):
            raise ConfigError(f"stack {stack.stack_id!r} has {len(stack)} frames, cannot form {name}")
        return temporal_average(stack, k)[0]
    raise ConfigError(f"unknown baseline {name!r}")


def evaluate_denoiser(
    model,
    test_stacks,
    baselines: Sequence[str] = BASELINES,
    frame_index: int = 0,
    median_window: int = 5,
    references: Optional[dict] = None,
    method_name: str = "model",
) -> list[EvalReport]:
    """Per-stack metrics against the normalized reference for baselines and the model.

    ``model`` may be None to score the baselines only. ``references`` optionally
    maps stack ids to precomputed reference frames; otherwise the reference is
    built from the stack itself.
    """
    from .gan import predict_frame

    reports = []
    for stack in test_stacks:
        if references is not None:
            if stack.stack_id not in references:
                raise ConfigError(f"no reference for stack {stack.stack_id!r}")
            ref = references[stack.stack_id]
        else:
            ref = build_reference(stack, median_window)
        ref_n, _ = normalize(ref)
        candidates = [(b, normalize(baseline_frame(stack, b, frame_index))[0]) for b in baselines]
        if model is not None:
            noisy_n, _ = normalize(stack.frames[frame_index])
            candidates.append((method_name, predict_frame(model, noisy_n)))
        for name, frame in candidates:
            reports.append(EvalReport(name, stack.stack_id, mse(ref_n.samples, frame.samples), ssim(ref_n.samples, frame.samples)))
    return reports


# -- latency --------------------------------------------------------------------------


def benchmark_inference(
    model, frame: RfFrame, warmup: int = 2, iters: int = 20, threads: Optional[int] = 1, mode: str = ""
) -> LatencySummary:
    """Wall-clock per-frame ``predict_frame`` latency under a pinned BLAS thread count.

    ``threads=None`` leaves the thread pools at their current setting.
    """
    from .gan import predict_frame

    if iters < 2:
        raise InvalidArgument("iters must be >= 2 for a standard deviation")
    if warmup < 0:
        raise InvalidArgument("warmup must be >= 0")
    times = []
    with threadpool_limits(limits=threads):
        for _ in range(warmup):
            predict_frame(model, frame)
        for _ in range(iters):
            t0 = time.perf_counter()
            predict_frame(model, frame)
            times.append((time.perf_counter() - t0) * 1e3)
    return LatencySummary(float(np.mean(times)), _std(times), float(np.min(times)), iters, threads, mode or (f"{threads} thread(s)" if threads else "default"))


def benchmark_modes(model, frame: RfFrame, warmup: int = 2, iters: int = 20) -> dict[str, LatencySummary]:
    """Single-threaded and all-core latency, measured separately."""
    cores = os.cpu_count() or 1
    return {
        "single": benchmark_inference(model, frame, warmup, iters, threads=1, mode="single"),
        "multi": benchmark_inference(model, frame, warmup, iters, threads=cores, mode="multi"),
    }
