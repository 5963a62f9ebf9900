"""Run configuration: flat ``section.key = value`` files with documented defaults.

Every key has a default, unknown keys are rejected, and cross-field constraints
are checked before any command starts work.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Optional

from .errors import ConfigError, FormatError
from .formats import format_value, parse_keyvalue


@dataclass(frozen=True)
class Key:
    kind: str  # int, float, str, bool, floats, ints, strs
    default: Any
    doc: str
    choices: tuple = ()


SCHEMA: dict[str, Key] = {
    "run.seed": Key("int", 0, "master seed for simulation, sampling and initialisation"),
    "geometry.n_elements": Key("int", 128, "transducer elements; also the patch side"),
    "geometry.n_samples": Key("int", 2000, "time samples per channel"),
    "geometry.n_frames": Key("int", 260, "frames recorded per acquisition spot"),
    "geometry.sample_rate": Key("float", 40e6, "sampling rate [Hz]"),
    "geometry.speed_of_sound": Key("float", 1480.0, "speed of sound [m/s]"),
    "geometry.element_pitch": Key("float", 0.3e-3, "element spacing [m]"),
    "geometry.axial_offset": Key("float", 0.0, "depth of the first sample [m]"),
    "source.pulse_width": Key("float", 0.375e-6, "emitted pulse duration [s] (six Gaussian sigmas)"),
    "source.amplitude": Key("float", 1.0, "source amplitude"),
    "source.spot_sigma": Key("float", 0.0, "optical spot size [m]"),
    "source.lateral_fraction": Key("float", 0.6, "sources lie within this fraction of the half aperture"),
    "noise.white_noise_std": Key("float", 0.5, "white noise std relative to the clean peak"),
    "noise.channel_offset_std": Key("float", 0.05, "per-element DC offset std relative to the peak"),
    "noise.spike_rate": Key("float", 0.01, "probability of a spike per channel and frame"),
    "simulate.spots": Key("int", 84, "number of acquisition spots"),
    "simulate.depths": Key("floats", (0.03, 0.04, 0.06, 0.07), "source depths [m], cycled over spots"),
    "dataset.fraction": Key("float", 0.05, "fraction of each frame pool sampled"),
    "dataset.averages": Key("ints", (1, 3, 5), "temporal averaging levels"),
    "dataset.stride_policy": Key("str", "disjoint", "how averaging windows advance", ("disjoint", "sliding")),
    "dataset.steps": Key("int", 10, "moving-window steps in each direction"),
    "dataset.step_size": Key("int", 8, "moving-window step [samples]"),
    "dataset.median_window": Key("int", 5, "temporal median filter length for the reference"),
    "dataset.target": Key("str", "reference", "target frame kind", ("reference", "segmented", "exact_reconstruction")),
    "dataset.sigma_m": Key("float", 0.3e-3, "Gaussian mask sigma for the exact reconstruction [m]"),
    "dataset.noise_anchor": Key("str", "background", "noise window placement", ("background", "far")),
    "dataset.split": Key("floats", (1.0, 0.0, 0.0), "train/val/test ratios over acquisitions"),
    "train.model": Key("str", "pix2pix", "generator family", ("pix2pix", "pix2pix-residual")),
    "train.lr": Key("float", 2e-4, "Adam learning rate"),
    "train.beta1": Key("float", 0.5, "Adam first-moment decay"),
    "train.beta2": Key("float", 0.999, "Adam second-moment decay"),
    "train.lambda_l1": Key("float", 1e3, "weight of the L1 term in the generator loss"),
    "train.batch_size": Key("int", 32, "patches per optimisation step"),
    "train.images_per_epoch": Key("int", 1024, "patches drawn per epoch"),
    "train.epochs": Key("int", 200, "training epochs"),
    "train.base_filters": Key("int", 0, "generator base width; 0 picks 16 (pix2pix) or 8 (residual)"),
    "train.depth": Key("int", 4, "generator levels"),
    "train.disc_filters": Key("int", 64, "discriminator base width"),
    "train.dropout": Key("float", 0.5, "decoder dropout rate"),
    "train.noise_channel": Key("bool", False, "concatenate an explicit noise channel to the generator input"),
    "train.checkpoint_interval": Key("int", 0, "epochs between checkpoints; 0 = final only"),
    "train.sample_interval": Key("int", 0, "epochs between PGM sample grids; 0 = none"),
    "train.lr_decay_epochs": Key("int", 0, "final epochs over which the learning rate decays linearly to zero"),
    "train.ema_decay": Key("float", 0.0, "generator weight averaging per step; 0 saves the raw weights"),
    "eval.frame_index": Key("int", 0, "frame of each test stack used as the noisy input"),
    "eval.baselines": Key("strs", ("noisy", "avg10", "avg20"), "baseline rows of the metric table"),
    "eval.detect_threshold": Key("float", 0.3, "detection threshold as a fraction of the calibration peak"),
    "eval.timing": Key("bool", False, "add latency columns (makes reports non-reproducible)"),
    "eval.strips": Key("int", 4, "number of figure strips written"),
    "bench.warmup": Key("int", 2, "discarded warm-up runs"),
    "bench.iters": Key("int", 20, "timed runs"),
}

# Small geometry and model that train in minutes on one CPU core. The aperture
# and depth range are half the full-scale ones, which keeps the f-number.
DESK_PROFILE: dict[str, Any] = {
    "geometry.n_elements": 64,
    "geometry.n_samples": 1024,
    "geometry.n_frames": 40,
    "simulate.spots": 16,
    "simulate.depths": (0.015, 0.02, 0.03, 0.035),
    "dataset.step_size": 3,
    "train.batch_size": 16,
    "train.images_per_epoch": 64,
    "train.base_filters": 8,
    "train.disc_filters": 8,
}

PROFILES = {"full": {}, "desk": DESK_PROFILE}


def _parse(key: str, spec: Key, raw: str) -> Any:
    raw = raw.strip()
    try:
        if spec.kind == "int":
            value: Any = int(raw)
        elif spec.kind == "float":
            value = float(raw)
            if not math.isfinite(value):
                raise ValueError("not finite")
        elif spec.kind == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError("expected true/false")
            value = low in ("true", "1", "yes")
        elif spec.kind == "floats":
            value = tuple(float(v) for v in raw.split(",") if v.strip())
        elif spec.kind == "ints":
            value = tuple(int(v) for v in raw.split(",") if v.strip())
        elif spec.kind == "strs":
            value = tuple(v.strip() for v in raw.split(",") if v.strip())
        else:
            value = raw
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {spec.kind} ({exc})") from None
    if spec.choices and value not in spec.choices:
        raise ConfigError(f"{key}: {value!r} is not one of {spec.choices}")
    return value


def _coerce(key: str, value: Any) -> Any:
    if key not in SCHEMA:
        raise ConfigError(f"unknown configuration key {key!r}")
    if isinstance(value, str):
        return _parse(key, SCHEMA[key], value)
    return _parse(key, SCHEMA[key], format_value(value))


class RunConfig(Mapping):
    """Immutable mapping of every schema key to its value."""

    def __init__(self, values: Optional[Mapping[str, Any]] = None, profile: str = "full"):
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
        merged = {k: spec.default for k, spec in SCHEMA.items()}
        for k, v in PROFILES[profile].items():
            merged[k] = _coerce(k, v)
        for k, v in (values or {}).items():
            merged[k] = _coerce(k, v)
        self._values = merged
        self.validate()

    def __getitem__(self, key: str) -> Any:
        return self._values[key]

    def __iter__(self):
        return iter(self._values)

    def __len__(self) -> int:
        return len(self._values)

    def replace(self, **updates) -> "RunConfig":
        """Copy with ``section__key=value`` style updates (double underscore for the dot)."""
        vals = dict(self._values)
        for k, v in updates.items():
            vals[k.replace("__", ".")] = v
        return RunConfig(vals)

    def with_values(self, values: Mapping[str, Any]) -> "RunConfig":
        vals = dict(self._values)
        vals.update(values)
        return RunConfig(vals)

    @classmethod
    def from_text(cls, text: str, source: str = "<config>", profile: str = "full") -> "RunConfig":
        try:
            values = parse_keyvalue(text, source)
        except FormatError as exc:
            raise ConfigError(str(exc)) from None
        return cls(values, profile)

    @classmethod
    def load(cls, path, profile: str = "full") -> "RunConfig":
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        return cls.from_text(p.read_text(), str(p), profile)

    def to_text(self) -> str:
        return "".join(f"{k} = {format_value(v)}\n" for k, v in self._values.items())

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    def validate(self) -> None:
        v = self._values
        for key in ("geometry.n_elements", "geometry.n_samples", "geometry.n_frames", "train.batch_size",
                    "train.images_per_epoch", "train.depth", "train.disc_filters", "bench.iters",
                    "dataset.step_size", "dataset.median_window", "eval.strips"):
            if v[key] < 1:
                raise ConfigError(f"{key} must be positive, got {v[key]}")
        for key in ("simulate.spots", "train.epochs", "dataset.steps", "train.base_filters", "bench.warmup",
                    "train.checkpoint_interval", "train.sample_interval", "train.lr_decay_epochs", "eval.frame_index"):
            if v[key] < 0:
                raise ConfigError(f"{key} must be >= 0, got {v[key]}")
        if not 0 <= v["train.ema_decay"] < 1:
            raise ConfigError("train.ema_decay must lie in [0, 1)")
        if v["train.lr_decay_epochs"] > v["train.epochs"]:
            raise ConfigError("train.lr_decay_epochs must not exceed train.epochs")
        if not 0 < v["dataset.fraction"] <= 1:
            raise ConfigError("dataset.fraction must lie in (0, 1]")
        if not 0 < v["eval.detect_threshold"] < 1:
            raise ConfigError("eval.detect_threshold must lie in (0, 1)")
        if v["dataset.median_window"] % 2 == 0:
            raise ConfigError("dataset.median_window must be odd")
        n_e, n_t, n_f = v["geometry.n_elements"], v["geometry.n_samples"], v["geometry.n_frames"]
        span = n_e + 2 * v["dataset.steps"] * v["dataset.step_size"]
        if span > n_t:
            raise ConfigError(
                f"patch side {n_e} (= geometry.n_elements) plus the moving window needs {span} samples, "
                f"geometry.n_samples is {n_t}"
            )
        if v["dataset.median_window"] > n_t:
            raise ConfigError("dataset.median_window exceeds geometry.n_samples")
        if max(v["dataset.averages"], default=0) > n_f or not v["dataset.averages"]:
            raise ConfigError("dataset.averages must be non-empty and no larger than geometry.n_frames")
        if v["eval.frame_index"] >= n_f:
            raise ConfigError("eval.frame_index must be smaller than geometry.n_frames")
        for b in v["eval.baselines"]:
            if b == "noisy":
                continue
            if not (b.startswith("avg") and b[3:].isdigit()):
                raise ConfigError(f"eval.baselines: unknown baseline {b!r}")
            if int(b[3:]) > n_f:
                raise ConfigError(f"eval.baselines: {b} needs more than geometry.n_frames = {n_f} frames")
        if n_e % (2 ** v["train.depth"]):
            raise ConfigError(f"patch side {n_e} is not divisible by 2^train.depth = {2 ** v['train.depth']}")
        ratios = v["dataset.split"]
        if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
            raise ConfigError("dataset.split must be three non-negative ratios summing to 1")
        if not v["simulate.depths"]:
            raise ConfigError("simulate.depths must list at least one depth")
        min_d = v["geometry.axial_offset"]
        max_d = min_d + (n_t - 1) * v["geometry.speed_of_sound"] / v["geometry.sample_rate"]
        for d in v["simulate.depths"]:
            if not min_d < d <= max_d:
                raise ConfigError(f"simulate.depths: {d} m lies outside the recorded depth range ({min_d}, {max_d:.4g}] m")
        if not 0 < v["source.lateral_fraction"] <= 1:
            raise ConfigError("source.lateral_fraction must lie in (0, 1]")
        if not 0 < v["train.dropout"] < 1 and v["train.dropout"] != 0:
            raise ConfigError("train.dropout must lie in [0, 1)")


def schema_doc() -> str:
    """Markdown table of every key, its default and meaning."""
    lines = ["| key | default | meaning |", "|---|---|---|"]
    for k, spec in SCHEMA.items():
        extra = f" ({' / '.join(spec.choices)})" if spec.choices else ""
        lines.append(f"| `{k}` | `{format_value(spec.default)}` | {spec.doc}{extra} |")
    desk = ", ".join(f"`{k} = {format_value(v)}`" for k, v in DESK_PROFILE.items())
    return "\n".join(lines) + f"\n\nThe `desk` profile overrides: {desk}.\n"
