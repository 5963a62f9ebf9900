"""Pix2Pix-style training, frame-level prediction and the denoise-then-reconstruct chain."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .beamform import DEFAULT_SIGMA_M, DasImage, PointTarget, locate_peak
from .dataset import TARGET_KINDS, PatchDataset
from .errors import ConfigError, DivergenceError, InvalidArgument, ShapeError
from .formats import strip, write_pgm
from .neural import Adam, ModelGraph, Tensor
from .neural import checkpoint
from .neural import functional as F
from .neural.graph import build_patchgan_discriminator, build_residual_unet_generator, build_unet_generator
from .rf import RfFrame

MODELS = ("pix2pix", "pix2pix-residual")
HISTORY_FIELDS = ("epoch", "loss_d", "loss_g", "loss_l1")

# below this peak the denoised frame is treated as empty and passed on unscaled
RENORM_FLOOR = 1e-6


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    lambda_l1: float = 1e3
    batch_size: int = 32
    minibatch_images_per_epoch: int = 1024
    epochs: int = 200
    seed: int = 0
    target_kind: str = "reference"
    model: str = "pix2pix"
    base_filters: Optional[int] = None  # None: 16 for pix2pix, 8 for the residual generator
    depth: int = 4
    disc_filters: int = 64
    dropout: float = 0.5
    noise_channel: bool = False
    checkpoint_interval: int = 0  # epochs; 0 writes only the final checkpoint
    sample_interval: int = 0
    # linear decay of both learning rates to zero over the last N epochs; 0 = constant
    lr_decay_epochs: int = 0
    # exponential moving average of generator weights, saved in place of the raw ones; 0 = off
    ema_decay: float = 0.0

    def __post_init__(self):
        if self.batch_size < 1 or self.minibatch_images_per_epoch < 1 or self.epochs < 0:
            raise ConfigError("batch_size and minibatch_images_per_epoch must be positive, epochs >= 0")
        if self.lambda_l1 < 0 or not self.lr > 0:
            raise ConfigError("lambda_l1 must be >= 0 and lr > 0")
        if self.target_kind not in TARGET_KINDS:
            raise ConfigError(f"target_kind must be one of {TARGET_KINDS}, got {self.target_kind!r}")
        if self.model not in MODELS:
            raise ConfigError(f"model must be one of {MODELS}, got {self.model!r}")
        if self.checkpoint_interval < 0 or self.sample_interval < 0:
            raise ConfigError("intervals must be >= 0")
        if not 0 <= self.lr_decay_epochs <= self.epochs:
            raise ConfigError("lr_decay_epochs must lie in [0, epochs]")
        if not 0 <= self.ema_decay < 1:
            raise ConfigError("ema_decay must lie in [0, 1)")

    def lr_at(self, epoch: int) -> float:
        """Learning rate used during ``epoch`` (1-based)."""
        remaining = self.epochs - epoch + 1
        if self.lr_decay_epochs and remaining <= self.lr_decay_epochs:
            return self.lr * remaining / (self.lr_decay_epochs + 1)
        return self.lr

    @property
    def generator_filters(self) -> int:
        if self.base_filters is not None:
            return self.base_filters
        return 16 if self.model == "pix2pix" else 8


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss_d: float
    loss_g: float
    loss_l1: float


@dataclass
class TrainedPair:
    generator: ModelGraph
    discriminator: ModelGraph
    history: list = field(default_factory=list)
    config: TrainConfig = TrainConfig()


def build_models(config: TrainConfig, side: int) -> tuple[ModelGraph, ModelGraph]:
    ss = np.random.SeedSequence(config.seed)
    g_seed, d_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(2))
    kw = dict(base_filters=config.generator_filters, depth=config.depth, side=side, seed=g_seed)
    if config.model == "pix2pix":
        gen = build_unet_generator(dropout=config.dropout, noise_channel=config.noise_channel, **kw)
    else:
        gen = build_residual_unet_generator(**kw)
    disc = build_patchgan_discriminator(base_filters=config.disc_filters, side=side, seed=d_seed)
    return gen, disc


# -- losses ---------------------------------------------------------------------


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise DivergenceError(f"non-finite values in {name}", epoch=None, batch=None, losses={})


def discriminator_loss(d_real: Tensor, d_fake: Tensor) -> Tensor:
    """BCE pushing real logits to 1 and fake logits to 0, averaged over both grids."""
    return (F.bce_with_logits(d_real, 1.0) + F.bce_with_logits(d_fake, 0.0)) * 0.5


def generator_loss(d_fake: Tensor, fake: Tensor, target: Tensor, lambda_l1: float) -> tuple[Tensor, Tensor]:
    """Adversarial term plus ``lambda_l1`` times the mean absolute error; also returns the raw L1."""
    l1 = F.l1_loss(fake, target)
    return F.bce_with_logits(d_fake, 1.0) + l1 * lambda_l1, l1


def gan_losses(d_real_logits, d_fake_logits, fake, target, lambda_l1: float) -> tuple[Tensor, Tensor]:
    """(loss_d, loss_g) for one batch; raises DivergenceError on non-finite inputs."""
    d_real, d_fake, fake, target = (x if isinstance(x, Tensor) else Tensor(np.asarray(x, float)) for x in (d_real_logits, d_fake_logits, fake, target))
    if d_real.shape != d_fake.shape:
        raise ShapeError(f"logit grids differ: {d_real.shape} vs {d_fake.shape}")
    if fake.shape != target.shape:
        raise ShapeError(f"fake {fake.shape} and target {target.shape} differ")
    for name, t in (("d_real_logits", d_real), ("d_fake_logits", d_fake), ("fake", fake), ("target", target)):
        _check_finite(name, t.data)
    loss_d = discriminator_loss(d_real, d_fake)
    loss_g, _ = generator_loss(d_fake, fake, target, lambda_l1)
    return loss_d, loss_g


# -- training -------------------------------------------------------------------


def _pair(x: Tensor, y: Tensor) -> Tensor:
    return F.concat([x, y], axis=1)


def train(
    dataset: PatchDataset,
    config: TrainConfig = TrainConfig(),
    out_dir=None,
    progress: Optional[Callable[[EpochRecord], None]] = None,
) -> TrainedPair:
    """Alternate one discriminator and one generator Adam step per batch.

    Each epoch draws ``minibatch_images_per_epoch`` patch indices (with
    replacement only when the dataset is smaller) and walks them in batches.
    With ``out_dir`` set, writes ``history.csv``, PAMG checkpoints and PGM
    sample grids.
    """
    if len(dataset) == 0:
        raise ConfigError("cannot train on an empty dataset")
    kinds = dataset.manifest.target_kinds
    if kinds and kinds != {config.target_kind}:
        raise ConfigError(f"dataset targets {sorted(kinds)} do not match config target_kind {config.target_kind!r}")
    side = dataset.inputs.shape[-1]
    gen, disc = build_models(config, side)
    sampler = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(3)[2])
    opt_g = Adam(gen.parameters(), config.lr, config.beta1, config.beta2)
    opt_d = Adam(disc.parameters(), config.lr, config.beta1, config.beta2)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    ema = None
    if config.ema_decay:
        ema = build_models(config, side)[0]
        ema.copy_state_from(gen)
        pairs = [(e.data, p) for (_, e), (_, p) in zip(ema.named_parameters(), gen.named_parameters())]

    def snapshot() -> ModelGraph:
        if ema is None:
            return gen
        for (_, e), (_, b) in zip(ema.named_buffers(), gen.named_buffers()):
            e[...] = b
        return ema

    inputs = dataset.inputs[:, None].astype(gen.dtype)
    targets = dataset.targets[:, None].astype(gen.dtype)
    n = len(dataset)
    per_epoch = config.minibatch_images_per_epoch
    history: list[EpochRecord] = []

    for epoch in range(1, config.epochs + 1):
        gen.train()
        disc.train()
        opt_g.state.lr = opt_d.state.lr = config.lr_at(epoch)
        idx = sampler.choice(n, size=per_epoch, replace=per_epoch > n)
        sums = np.zeros(3)
        batches = 0
        for b, start in enumerate(range(0, per_epoch, config.batch_size)):
            sel = idx[start : start + config.batch_size]
            x, y = Tensor(inputs[sel]), Tensor(targets[sel])
            fake = gen(x)

            opt_d.zero_grad()
            loss_d = discriminator_loss(disc(_pair(x, y)), disc(_pair(x, fake.detach())))
            loss_d.backward()
            opt_d.step()

            opt_g.zero_grad()
            loss_g, l1 = generator_loss(disc(_pair(x, fake)), fake, y, config.lambda_l1)
            loss_g.backward()
            opt_g.step()
            if ema is not None:
                for e, p in pairs:
                    e *= config.ema_decay
                    e += (1.0 - config.ema_decay) * p.data

            values = np.array([loss_d.item(), loss_g.item(), l1.item()])
            if not np.all(np.isfinite(values)):
                raise DivergenceError(
                    f"training diverged at epoch {epoch}, batch {b}",
                    epoch=epoch,
                    batch=b,
                    losses=dict(zip(HISTORY_FIELDS[1:], values.tolist())),
                )
            sums += values
            batches += 1
        rec = EpochRecord(epoch, *(float(v) for v in sums / batches))
        history.append(rec)
        if progress is not None:
            progress(rec)
        if out is not None:
            if config.checkpoint_interval and epoch % config.checkpoint_interval == 0:
                checkpoint.save(out / f"generator_e{epoch:05d}.pamg", snapshot())
                checkpoint.save(out / f"discriminator_e{epoch:05d}.pamg", disc)
            if config.sample_interval and epoch % config.sample_interval == 0:
                write_sample_grid(out / f"samples_e{epoch:05d}.pgm", snapshot(), dataset)

    gen = snapshot()
    gen.eval()
    disc.eval()
    pair = TrainedPair(gen, disc, history, config)
    if out is not None:
        checkpoint.save(out / "generator.pamg", gen)
        checkpoint.save(out / "discriminator.pamg", disc)
        write_history_csv(out / "history.csv", history)
    return pair


def history_csv(history: Sequence[EpochRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_FIELDS)
    for r in history:
        w.writerow((r.epoch, repr(r.loss_d), repr(r.loss_g), repr(r.loss_l1)))
    return buf.getvalue()


def write_history_csv(path, history: Sequence[EpochRecord]) -> None:
    Path(path).write_text(history_csv(history))


def read_history_csv(path) -> list[EpochRecord]:
    with open(path, newline="") as fh:
        return [
            EpochRecord(int(r["epoch"]), float(r["loss_d"]), float(r["loss_g"]), float(r["loss_l1"]))
            for r in csv.DictReader(fh)
        ]


def write_sample_grid(path, generator: ModelGraph, dataset: PatchDataset, count: int = 4) -> None:
    """Rows of input | prediction | target for the first ``count`` patches."""
    sel = np.arange(min(count, len(dataset)))
    was_training = generator.training
    generator.eval()
    pred = generator.predict(dataset.inputs[sel][:, None])[:, 0]
    generator.training = was_training
    rows = [strip([dataset.inputs[i], pred[k], dataset.targets[i]]) for k, i in enumerate(sel)]
    write_pgm(path, np.concatenate(rows, axis=0))


# -- inference --------------------------------------------------------------------


def patch_tops(n_rows: int, side: int, stride: int) -> list[int]:
    """Top rows of the patches covering ``n_rows``; the last may run past the end."""
    if n_rows < side:
        raise InvalidArgument(f"frame has {n_rows} rows, fewer than one {side}-row patch")
    if stride < 1 or stride > side:
        raise InvalidArgument(f"stride must lie in [1, {side}], got {stride}")
    tops = list(range(0, n_rows - side + 1, stride))
    if tops[-1] + side < n_rows:
        tops.append(tops[-1] + stride)
    return tops


def predict_frame(
    generator: ModelGraph, frame: RfFrame, stride: Optional[int] = None, batch_size: int = 32
) -> RfFrame:
    """Run ``generator`` over overlapping full-width patches and average the overlaps.

    The stride defaults to half a patch. When the rows do not divide evenly the
    frame is zero-padded at the bottom so a final patch covers the tail.
    """
    _, side, width = generator.input_shape
    n_rows, n_cols = frame.samples.shape
    if n_cols != width:
        raise ShapeError(f"frame has {n_cols} columns, generator expects {width}")
    stride = side // 2 if stride is None else stride
    tops = patch_tops(n_rows, side, stride)
    total = tops[-1] + side
    padded = np.zeros((total, n_cols), generator.dtype)
    padded[:n_rows] = frame.samples
    patches = np.stack([padded[t : t + side] for t in tops])[:, None]
    was_training = generator.training
    generator.eval()
    try:
        preds = np.concatenate(
            [generator.predict(patches[i : i + batch_size]) for i in range(0, len(patches), batch_size)]
        )[:, 0]
    finally:
        generator.training = was_training
    acc = np.zeros((total, n_cols))
    weight = np.zeros((total, 1))
    for t, p in zip(tops, preds):
        acc[t : t + side] += p
        weight[t : t + side] += 1.0
    return frame.with_samples(acc[:n_rows] / weight[:n_rows])


def _renormalize(frame: RfFrame) -> RfFrame:
    peak = float(np.max(np.abs(frame.samples)))
    if peak < RENORM_FLOOR:
        return frame
    return frame.with_samples(frame.samples / peak)


def dual_gan_stages(denoiser: ModelGraph, reconstructor: ModelGraph, frame: RfFrame) -> tuple[RfFrame, DasImage]:
    """Denoised frame and the reconstruction computed from it."""
    denoised = predict_frame(denoiser, _renormalize(frame))
    recon = predict_frame(reconstructor, _renormalize(denoised))
    return denoised, DasImage(recon.samples, frame.geometry)


def dual_gan(denoiser: ModelGraph, reconstructor: ModelGraph, frame: RfFrame) -> DasImage:
    return dual_gan_stages(denoiser, reconstructor, frame)[1]


def reconstruct_direct(reconstructor: ModelGraph, frame: RfFrame) -> DasImage:
    out = predict_frame(reconstructor, _renormalize(frame))
    return DasImage(out.samples, frame.geometry)


# -- detection ----------------------------------------------------------------------

DEFAULT_DETECT_THRESHOLD = 0.3


def calibration_constant(targets: Sequence[np.ndarray]) -> float:
    """Median peak magnitude over training targets."""
    peaks = [float(np.max(np.abs(t))) for t in targets]
    if not peaks:
        raise InvalidArgument("calibration needs at least one target")
    return float(np.median(peaks))


def detect_source(
    reconstruction: DasImage,
    threshold: float = DEFAULT_DETECT_THRESHOLD,
    calibration: float = 1.0,
    sigma_m: float = DEFAULT_SIGMA_M,
) -> Optional[PointTarget]:
    """Peak location if the image's peak exceeds ``threshold * calibration``, else None."""
    if not 0 < threshold < 1:
        raise InvalidArgument("threshold must lie in (0, 1)")
    peak = float(np.max(np.abs(reconstruction.pixels)))
    if not peak > threshold * calibration:
        return None
    return locate_peak(reconstruction, envelope=True, sigma_m=sigma_m)


def calibrate_detector(generator: ModelGraph, dataset: PatchDataset, max_patches: int = 256) -> float:
    """Median peak response of a trained reconstructor over training signal patches.

    Serves as the calibration constant of :func:`detect_source`, so thresholds
    are fractions of what the model typically outputs for a real source.
    """
    sel = [i for i, row in enumerate(dataset.index) if row["kind"] == "signal"][:max_patches]
    if not sel:
        raise InvalidArgument("calibration needs signal patches")
    was_training = generator.training
    generator.eval()
    try:
        out = np.concatenate(
            [generator.predict(dataset.inputs[sel[i : i + 32]][:, None]) for i in range(0, len(sel), 32)]
        )
    finally:
        generator.training = was_training
    return calibration_constant(list(out))
