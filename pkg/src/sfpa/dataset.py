"""Patch datasets: frame sampling, averaged variants and moving-window patches.

For every stack, single frames and disjoint 3- and 5-frame averages are pooled
separately; a fraction of each pool is sampled. Every sampled frame yields
``2 * steps + 1`` signal patches around the arrival-curve apex and as many noise
patches around a background anchor, each paired with the co-located patch of the
stack's target frame (reference, segmented reference or exact reconstruction).
"""

from __future__ import annotations

import csv
import hashlib
import io
import math
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .beamform import DEFAULT_SIGMA_M, das_reconstruct, exact_target, locate_peak
from .errors import ConfigError, FormatError, InvalidArgument
from .formats import format_value, parse_keyvalue, read_patch_blob, write_patch_blob
from .rf import (
    FrameStack,
    RfFrame,
    apply_background_median,
    build_reference,
    normalize,
    temporal_average,
)
from .simulate import SourceSpec, arrival_rows, ground_truth_mask, pulse_half_support

TARGET_KINDS = ("reference", "segmented", "exact_reconstruction")
KINDS = ("signal", "noise")
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class PatchConfig:
    fraction: float = 0.05
    averages: tuple = (1, 3, 5)
    stride_policy: str = "disjoint"
    steps: int = 10
    step_size: int = 8
    median_window: int = 5
    # samples around the arrival curve counted as signal; None = pulse half-support + 2
    mask_margin: Optional[int] = None
    target: str = "reference"
    sigma_m: float = DEFAULT_SIGMA_M
    # "background": prefer noise windows free of any signal; "far": any window
    # at least one patch height from the apex, arrival-curve tails included
    noise_anchor: str = "background"
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.fraction <= 1:
            raise InvalidArgument("fraction must lie in (0, 1]")
        if self.target not in TARGET_KINDS:
            raise InvalidArgument(f"target must be one of {TARGET_KINDS}, got {self.target!r}")
        if self.steps < 0 or self.step_size < 1:
            raise InvalidArgument("steps must be >= 0 and step_size >= 1")
        if self.noise_anchor not in ("background", "far"):
            raise InvalidArgument(f"noise_anchor must be 'background' or 'far', got {self.noise_anchor!r}")
        if not self.averages or any(k < 1 for k in self.averages):
            raise InvalidArgument("averages must be positive frame counts")


@dataclass(frozen=True)
class PatchSample:
    input: np.ndarray
    target: np.ndarray
    kind: str
    target_kind: str
    frames_averaged: int
    origin: tuple  # (stack_id, top_row, step_index)

    def __post_init__(self):
        if self.input.shape != self.target.shape or self.input.ndim != 2 or self.input.shape[0] != self.input.shape[1]:
            raise InvalidArgument(f"patches must be square and co-shaped, got {self.input.shape} / {self.target.shape}")
        if self.kind not in KINDS or self.target_kind not in TARGET_KINDS:
            raise InvalidArgument(f"bad patch labels {self.kind!r}/{self.target_kind!r}")


@dataclass
class DatasetManifest:
    counts: dict = field(default_factory=dict)  # (kind, frames_averaged, target_kind) -> patches
    frame_counts: dict = field(default_factory=dict)  # frames_averaged -> sampled frames
    split: str = "train"
    seed: int = 0
    side: int = 0
    stack_ids: list = field(default_factory=list)

    @property
    def total_patches(self) -> int:
        return sum(self.counts.values())

    @property
    def total_frames(self) -> int:
        return sum(self.frame_counts.values())

    def is_balanced(self) -> bool:
        keys = {(fa, tk) for (_, fa, tk) in self.counts}
        return all(self.counts.get(("signal", fa, tk), 0) == self.counts.get(("noise", fa, tk), 0) for fa, tk in keys)

    def breakdown(self) -> str:
        parts = [str(self.frame_counts[k]) for k in sorted(self.frame_counts)]
        return f"{' + '.join(parts)} = {self.total_frames}"

    def to_text(self) -> str:
        lines = [
            f"split = {self.split}",
            f"seed = {self.seed}",
            f"side = {self.side}",
            f"stacks = {format_value(list(self.stack_ids))}",
        ]
        for k in sorted(self.frame_counts):
            lines.append(f"frames.{k} = {self.frame_counts[k]}")
        for kind, fa, tk in sorted(self.counts):
            lines.append(f"count.{kind}.{fa}.{tk} = {self.counts[(kind, fa, tk)]}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "DatasetManifest":
        kv = parse_keyvalue(text, "manifest")
        m = cls(split=kv.get("split", "train"), seed=int(kv.get("seed", 0)), side=int(kv.get("side", 0)))
        stacks = kv.get("stacks", "")
        m.stack_ids = [s for s in stacks.split(",") if s]
        for key, value in kv.items():
            if key.startswith("frames."):
                m.frame_counts[int(key.split(".", 1)[1])] = int(value)
            elif key.startswith("count."):
                _, kind, fa, tk = key.split(".", 3)
                m.counts[(kind, int(fa), tk)] = int(value)
        return m

    @property
    def target_kinds(self) -> set:
        return {tk for (_, _, tk) in self.counts}


def stack_seed(seed: int, stack_id: str) -> np.random.Generator:
    """Per-stack generator, independent of processing order."""
    return np.random.default_rng([int(seed), zlib.crc32(stack_id.encode("utf-8"))])


def n_sampled(fraction: float, count: int) -> int:
    # guard against 0.05 * 260 = 13.000000000000002 style float noise
    return max(1, int(math.floor(fraction * count + 1e-9)))


def sample_frames(
    stack, fraction: float, rng: Optional[np.random.Generator] = None, seed: int = 0
) -> list[RfFrame]:
    """Uniform sample without replacement of ``floor(fraction * n)`` frames (at least one).

    Accepts a :class:`FrameStack` or any sequence of frames; the chosen frames keep
    their original order.
    """
    frames = list(stack.frames if isinstance(stack, FrameStack) else stack)
    if not frames:
        raise InvalidArgument("cannot sample from an empty stack")
    if not 0 < fraction <= 1:
        raise InvalidArgument("fraction must lie in (0, 1]")
    rng = np.random.default_rng(seed) if rng is None else rng
    n = n_sampled(fraction, len(frames))
    idx = np.sort(rng.choice(len(frames), size=n, replace=False))
    return [frames[i] for i in idx]


def frame_variants(stack: FrameStack, config: PatchConfig, rng: np.random.Generator) -> dict[int, list[RfFrame]]:
    """Sampled single frames and k-frame averages, keyed by k."""
    out = {}
    for k in config.averages:
        if k > len(stack):
            raise ConfigError(f"stack {stack.stack_id!r} has {len(stack)} frames, cannot average {k}")
        pool = temporal_average(stack, k, config.stride_policy)
        out[k] = sample_frames(pool, config.fraction, rng)
    return out


def window_offsets(steps: int, step_size: int) -> np.ndarray:
    return np.arange(-steps, steps + 1) * step_size


def extract_moving_window(
    frame: RfFrame,
    anchor_row: int,
    anchor_col: int = 0,
    steps: int = 10,
    step_size: int = 8,
    side: Optional[int] = None,
) -> list[np.ndarray]:
    """Square patches whose top rows are ``anchor_row + i * step_size``, i = -steps..steps.

    Patches come back ordered top to bottom, so the anchor patch is the middle one.
    """
    n_t, n_e = frame.samples.shape
    side = n_e if side is None else side
    if anchor_col < 0 or anchor_col + side > n_e:
        raise InvalidArgument(f"patch columns {anchor_col}..{anchor_col + side} exceed {n_e} elements")
    tops = anchor_row + window_offsets(steps, step_size)
    if tops[0] < 0 or tops[-1] + side > n_t:
        raise InvalidArgument(
            f"moving window rows {tops[0]}..{tops[-1] + side} exceed the frame's {n_t} samples"
        )
    return [frame.samples[t : t + side, anchor_col : anchor_col + side].copy() for t in tops]


def anchor_limits(n_samples: int, side: int, steps: int, step_size: int) -> tuple[int, int]:
    lo = steps * step_size
    hi = n_samples - side - steps * step_size
    if hi < lo:
        raise ConfigError(
            f"{n_samples} samples cannot hold a {side}-row patch moved {steps} x {step_size} rows each way"
        )
    return lo, hi


def mask_margin(stack: FrameStack, config: PatchConfig) -> int:
    if config.mask_margin is not None:
        return config.mask_margin
    return pulse_half_support(stack.geometry, _source_of(stack)) + 2


def _source_of(stack: FrameStack) -> SourceSpec:
    if not isinstance(stack.source, SourceSpec):
        raise ConfigError(f"stack {stack.stack_id!r} has no ground-truth source; anchors cannot be placed")
    return stack.source


def choose_anchors(stack: FrameStack, config: PatchConfig, rng: np.random.Generator) -> tuple[int, int]:
    """Top rows of the signal and noise anchor patches.

    The signal patch is centred on the arrival-curve apex. The noise patch is
    centred at least one patch height away from the apex, preferring positions
    whose rows contain no signal at all.
    """
    geom = stack.geometry
    side = geom.n_elements
    source = _source_of(stack)
    lo, hi = anchor_limits(geom.n_samples, side, config.steps, config.step_size)
    apex = int(np.min(arrival_rows(geom, source)))
    signal_top = int(np.clip(apex - side // 2, lo, hi))

    mask = ground_truth_mask(geom, source, mask_margin(stack, config)).mask
    signal_rows = np.flatnonzero(~mask.all(axis=1))
    tops = np.arange(lo, hi + 1)
    far = np.abs(tops + side / 2.0 - apex) >= side
    if signal_rows.size:
        first, last = signal_rows[0], signal_rows[-1]
        clean = (tops + side <= first) | (tops > last)
    else:
        clean = np.ones_like(far)
    preferred = (tops[far & clean], tops[far]) if config.noise_anchor == "background" else (tops[far],)
    for candidates in preferred:
        if candidates.size:
            return signal_top, int(rng.choice(candidates))
    raise ConfigError(f"stack {stack.stack_id!r}: no room for a noise window away from the signal")


def build_target(stack: FrameStack, target: str, config: PatchConfig) -> RfFrame:
    """Reference, segmented reference, or Gaussian-isolated DAS reconstruction."""
    if target not in TARGET_KINDS:
        raise ConfigError(f"unknown target kind {target!r}")
    ref = build_reference(stack, config.median_window)
    if target == "reference":
        return ref
    if target == "segmented":
        mask = ground_truth_mask(stack.geometry, _source_of(stack), mask_margin(stack, config))
        return apply_background_median(ref, mask)
    das = das_reconstruct(ref)
    peak = locate_peak(das, sigma_m=config.sigma_m)
    iso = exact_target(das, peak)
    return RfFrame(iso.pixels, stack.geometry, len(stack))


def _stack_patches(stack: FrameStack, config: PatchConfig, target_frame: Optional[RfFrame]) -> tuple[list, dict]:
    rng = stack_seed(config.seed, stack.stack_id)
    variants = frame_variants(stack, config, rng)
    signal_top, noise_top = choose_anchors(stack, config, rng)
    if target_frame is None:
        target_frame = build_target(stack, config.target, config)
    target_norm, _ = normalize(target_frame)
    out = []
    for k in config.averages:
        for frame in variants[k]:
            frame_norm, _ = normalize(frame)
            for kind, top in (("signal", signal_top), ("noise", noise_top)):
                ins = extract_moving_window(frame_norm, top, 0, config.steps, config.step_size)
                tgs = extract_moving_window(target_norm, top, 0, config.steps, config.step_size)
                for step, (a, b) in enumerate(zip(ins, tgs)):
                    out.append(
                        PatchSample(
                            input=a.astype(np.float32),
                            target=b.astype(np.float32),
                            kind=kind,
                            target_kind=config.target,
                            frames_averaged=k,
                            origin=(stack.stack_id, int(top + (step - config.steps) * config.step_size), step - config.steps),
                        )
                    )
    return out, {k: len(v) for k, v in variants.items()}


def build_patch_dataset(
    stacks: Iterable[FrameStack],
    targets: Optional[str] = None,
    config: PatchConfig = PatchConfig(),
    split: str = "train",
    target_frames: Optional[dict] = None,
) -> tuple[list[PatchSample], DatasetManifest]:
    """Patch samples and manifest for a collection of stacks.

    ``targets`` names the target kind and overrides ``config.target``. ``stacks``
    may be a generator; each stack is processed and released in turn.
    ``target_frames`` optionally maps stack ids to precomputed target frames.
    Only the training split uses the moving window; other splits keep the anchor
    patches alone.
    """
    if split not in SPLITS:
        raise InvalidArgument(f"split must be one of {SPLITS}, got {split!r}")
    if targets is not None:
        if targets not in TARGET_KINDS:
            raise ConfigError(f"unknown target kind {targets!r}")
        config = replace(config, target=targets)
    if split != "train":
        config = replace(config, steps=0)
    samples: list[PatchSample] = []
    manifest = DatasetManifest(split=split, seed=config.seed)
    for stack in stacks:
        tf = target_frames.get(stack.stack_id) if target_frames else None
        patches, frame_counts = _stack_patches(stack, config, tf)
        samples.extend(patches)
        manifest.stack_ids.append(stack.stack_id)
        manifest.side = stack.geometry.n_elements
        for k, n in frame_counts.items():
            manifest.frame_counts[k] = manifest.frame_counts.get(k, 0) + n
        for p in patches:
            key = (p.kind, p.frames_averaged, p.target_kind)
            manifest.counts[key] = manifest.counts.get(key, 0) + 1
    return samples, manifest


def frame_sample_counts(stacks: Iterable[FrameStack], config: PatchConfig) -> dict[int, int]:
    """Frame-level sample counts per averaging level, without cutting patches."""
    counts: dict[int, int] = {}
    for stack in stacks:
        for k in config.averages:
            pool = len(stack) // k if config.stride_policy == "disjoint" else len(stack) - k + 1
            if pool < 1:
                raise ConfigError(f"stack {stack.stack_id!r} too short for {k}-frame averages")
            counts[k] = counts.get(k, 0) + n_sampled(config.fraction, pool)
    return counts


def split_acquisitions(stacks: Sequence, ratios: Sequence[float], seed: int = 0) -> tuple[list, list, list]:
    """Split whole acquisitions (never frames or patches) into train/val/test."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) == 2:
        ratios = ratios + (0.0,)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise InvalidArgument(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    stacks = list(stacks)
    n = len(stacks)
    n_classes = sum(r > 0 for r in ratios)
    if n < n_classes:
        raise InvalidArgument(f"{n} stacks cannot fill {n_classes} splits")
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    if ratios[2] == 0:
        n_val = n - n_train
    n_val = min(n_val, n - n_train)
    parts = (order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :])
    return tuple([stacks[i] for i in part] for part in parts)


def stack_digest(stack: FrameStack) -> str:
    h = hashlib.sha256()
    for f in stack.frames:
        h.update(np.ascontiguousarray(f.samples).tobytes())
    return h.hexdigest()


def deduplicate_stacks(stacks: Iterable[FrameStack]) -> list[FrameStack]:
    """Drop stacks whose frame data is byte-identical to an earlier one."""
    seen = set()
    out = []
    for s in stacks:
        d = stack_digest(s)
        if d not in seen:
            seen.add(d)
            out.append(s)
    return out


def to_arrays(samples: Sequence[PatchSample]) -> tuple[np.ndarray, np.ndarray]:
    if not samples:
        return np.zeros((0, 0, 0), np.float32), np.zeros((0, 0, 0), np.float32)
    return (
        np.stack([s.input for s in samples]).astype(np.float32),
        np.stack([s.target for s in samples]).astype(np.float32),
    )


INDEX_FIELDS = ("kind", "target_kind", "frames_averaged", "stack_id", "top_row", "step")


def save_patch_dataset(directory, samples: Sequence[PatchSample], manifest: DatasetManifest) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    inputs, targets = to_arrays(samples)
    if not samples:
        inputs = targets = np.zeros((0, manifest.side, manifest.side), np.float32)
    write_patch_blob(d / "patches.bin", inputs, targets)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(INDEX_FIELDS)
    for s in samples:
        w.writerow((s.kind, s.target_kind, s.frames_averaged, *s.origin))
    (d / "index.csv").write_text(buf.getvalue())
    (d / "manifest").write_text(manifest.to_text())


@dataclass
class PatchDataset:
    inputs: np.ndarray
    targets: np.ndarray
    index: list
    manifest: DatasetManifest

    def __len__(self) -> int:
        return len(self.inputs)

    def select(self, mask: np.ndarray) -> "PatchDataset":
        idx = np.flatnonzero(mask)
        return replace(self, inputs=self.inputs[idx], targets=self.targets[idx], index=[self.index[i] for i in idx])

    @classmethod
    def from_samples(cls, samples: Sequence[PatchSample], manifest: DatasetManifest) -> "PatchDataset":
        inputs, targets = to_arrays(samples)
        index = [dict(zip(INDEX_FIELDS, (s.kind, s.target_kind, s.frames_averaged, *s.origin))) for s in samples]
        return cls(inputs, targets, index, manifest)


def load_patch_dataset(directory) -> PatchDataset:
    d = Path(directory)
    for name in ("manifest", "patches.bin", "index.csv"):
        if not (d / name).exists():
            raise FileNotFoundError(f"dataset directory {d} is missing {name}")
    manifest = DatasetManifest.from_text((d / "manifest").read_text())
    inputs, targets = read_patch_blob(d / "patches.bin")
    with open(d / "index.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    if len(rows) != len(inputs):
        raise FormatError(f"{d}: index has {len(rows)} rows but blob holds {len(inputs)} patches")
    return PatchDataset(inputs, targets, rows, manifest)
