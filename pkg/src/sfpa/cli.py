"""Command-line interface: simulate, build-dataset, train, evaluate, bench.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime or data error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import logging
import sys
from contextlib import nullcontext
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .beamform import das_reconstruct
from .config import PROFILES, RunConfig
from .dataset import PatchConfig, build_patch_dataset, load_patch_dataset, save_patch_dataset, split_acquisitions
from .errors import ConfigError, SfpaError
from .formats import read_stack, strip, write_keyvalue, write_pgm, write_stack
from .gan import (
    TrainConfig,
    calibrate_detector,
    detect_source,
    dual_gan_stages,
    reconstruct_direct,
    train,
)
from .metrics import (
    benchmark_modes,
    benchmark_inference,
    evaluate_denoiser,
    format_pm,
    localization_error,
    summarize,
    write_report,
)
from .neural import checkpoint
from .rf import AcquisitionGeometry, build_reference, normalize
from .simulate import NoiseSpec, random_source, read_sidecar, synthesize_stack, write_sidecar

log = logging.getLogger("sfpa")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
TARGET_ALIASES = {"reference": "reference", "segmented": "segmented", "exact": "exact_reconstruction",
                  "exact_reconstruction": "exact_reconstruction"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- config plumbing ---------------------------------------------------------------


def geometry_from(cfg: RunConfig) -> AcquisitionGeometry:
    return AcquisitionGeometry(
        n_elements=cfg["geometry.n_elements"],
        n_samples=cfg["geometry.n_samples"],
        n_frames=cfg["geometry.n_frames"],
        sample_rate=cfg["geometry.sample_rate"],
        speed_of_sound=cfg["geometry.speed_of_sound"],
        element_pitch=cfg["geometry.element_pitch"],
        axial_offset=cfg["geometry.axial_offset"],
    )


def patch_config_from(cfg: RunConfig) -> PatchConfig:
    return PatchConfig(
        fraction=cfg["dataset.fraction"],
        averages=cfg["dataset.averages"],
        stride_policy=cfg["dataset.stride_policy"],
        steps=cfg["dataset.steps"],
        step_size=cfg["dataset.step_size"],
        median_window=cfg["dataset.median_window"],
        target=cfg["dataset.target"],
        sigma_m=cfg["dataset.sigma_m"],
        noise_anchor=cfg["dataset.noise_anchor"],
        seed=cfg["run.seed"],
    )


def train_config_from(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(
        lr=cfg["train.lr"],
        beta1=cfg["train.beta1"],
        beta2=cfg["train.beta2"],
        lambda_l1=cfg["train.lambda_l1"],
        batch_size=cfg["train.batch_size"],
        minibatch_images_per_epoch=cfg["train.images_per_epoch"],
        epochs=cfg["train.epochs"],
        seed=cfg["run.seed"],
        target_kind=cfg["dataset.target"],
        model=cfg["train.model"],
        base_filters=cfg["train.base_filters"] or None,
        depth=cfg["train.depth"],
        disc_filters=cfg["train.disc_filters"],
        dropout=cfg["train.dropout"],
        noise_channel=cfg["train.noise_channel"],
        checkpoint_interval=cfg["train.checkpoint_interval"],
        sample_interval=cfg["train.sample_interval"],
        lr_decay_epochs=cfg["train.lr_decay_epochs"],
        ema_decay=cfg["train.ema_decay"],
    )


def _overrides(pairs: Sequence[str]) -> dict:
    out = {}
    for item in pairs or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_config(args, extra: Optional[dict] = None) -> RunConfig:
    base = RunConfig.load(args.config, args.profile) if args.config else RunConfig(profile=args.profile)
    values = dict(_overrides(args.set))
    if args.seed is not None:
        values["run.seed"] = str(args.seed)
    values.update(extra or {})
    return base.with_values(values) if values else base


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _stack_paths(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"input directory not found: {d}")
    return sorted(d.glob("*.parf"))


def _load_stack(path: Path):
    side = path.with_suffix(".sidecar")
    if side.exists():
        source, _, stack_id = read_sidecar(side)
        return read_stack(path, source=source, source_truth=(source.axial_pos, source.lateral_pos), stack_id=stack_id)
    return read_stack(path, stack_id=path.stem)


def _file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _load_model(path):
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"model checkpoint not found: {p}")
    return checkpoint.load(p)


# -- commands ----------------------------------------------------------------------


def cmd_simulate(cfg: RunConfig, out: Path) -> int:
    geom = geometry_from(cfg)
    seed = cfg["run.seed"]
    depths = cfg["simulate.depths"]
    rows = []
    for i in range(cfg["simulate.spots"]):
        ss = np.random.SeedSequence([seed, i])
        pos_seed, noise_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(2))
        source = random_source(
            geom,
            depths[i % len(depths)],
            np.random.default_rng(pos_seed),
            lateral_fraction=cfg["source.lateral_fraction"],
            pulse_width=cfg["source.pulse_width"],
            amplitude=cfg["source.amplitude"],
            spot_sigma=cfg["source.spot_sigma"],
        )
        noise = NoiseSpec(cfg["noise.white_noise_std"], cfg["noise.channel_offset_std"], cfg["noise.spike_rate"], noise_seed)
        stack_id = f"spot{i:03d}"
        stack = synthesize_stack(geom, source, noise, stack_id)
        write_stack(out / f"{stack_id}.parf", stack)
        write_sidecar(out / f"{stack_id}.sidecar", source, noise, stack_id)
        rows.append((stack_id, noise_seed, source.axial_pos, source.lateral_pos))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("stack_id", "noise_seed", "axial_m", "lateral_m"))
    for r in rows:
        w.writerow((r[0], r[1], repr(r[2]), repr(r[3])))
    (out / "manifest.csv").write_text(buf.getvalue())
    print(f"simulated {len(rows)} stacks into {out}")
    return EXIT_OK


def cmd_build_dataset(cfg: RunConfig, in_dir, out: Path) -> int:
    paths = _stack_paths(in_dir)
    if not paths:
        raise FileNotFoundError(f"no .parf stacks in {in_dir}")
    seen, unique = set(), []
    for p in paths:
        d = _file_digest(p)
        if d in seen:
            log.info("dropping duplicate stack %s", p.name)
            continue
        seen.add(d)
        unique.append(p)
    ratios = cfg["dataset.split"]
    parts = split_acquisitions(unique, ratios, cfg["run.seed"]) if len(unique) > 1 else ([unique[0]], [], [])
    pc = patch_config_from(cfg)
    split_lines = {}
    for name, part in zip(("train", "val", "test"), parts):
        split_lines[name] = [p.stem for p in sorted(part)]
        if not part:
            continue
        stacks = (_load_stack(p) for p in sorted(part))
        samples, manifest = build_patch_dataset(stacks, pc.target, pc, split=name)
        save_patch_dataset(out / name, samples, manifest)
        print(f"{name}: {manifest.breakdown()} frames, {manifest.total_patches} patches")
    write_keyvalue(out / "splits", split_lines)
    return EXIT_OK


def cmd_train(cfg: RunConfig, data_dir, out: Path) -> int:
    d = Path(data_dir)
    ds = load_patch_dataset(d / "train" if (d / "train").is_dir() else d)
    tc = train_config_from(cfg)

    def report(rec):
        if rec.epoch == 1 or rec.epoch % 10 == 0 or rec.epoch == tc.epochs:
            print(f"epoch {rec.epoch}: loss_d {rec.loss_d:.4f} loss_g {rec.loss_g:.4f} l1 {rec.loss_l1:.5f}")

    pair = train(ds, tc, out, progress=report)
    if tc.target_kind == "exact_reconstruction":
        cal = calibrate_detector(pair.generator, ds)
        write_keyvalue(out / "calibration", {"peak_response": cal})
    print(f"trained {tc.model} ({pair.generator.param_count} generator parameters) for {len(pair.history)} epochs")
    return EXIT_OK


def _calibration_for(model_path: Path) -> float:
    from .formats import read_keyvalue

    p = model_path.parent / "calibration"
    if p.exists():
        return float(read_keyvalue(p)["peak_response"])
    return 1.0


def _strip_panels(panels, mags):
    return strip([np.asarray(p) for p in panels], magnitude=mags)


def cmd_evaluate(cfg: RunConfig, args, out: Path) -> int:
    denoiser = _load_model(args.model)
    recon = _load_model(args.reconstructor) if args.reconstructor else None
    if args.dual and recon is None:
        raise ConfigError("--dual needs --reconstructor")
    stacks = [_load_stack(p) for p in _stack_paths(args.data)]
    if not stacks:
        raise FileNotFoundError(f"no .parf stacks in {args.data}")
    reports = evaluate_denoiser(
        denoiser, stacks, cfg["eval.baselines"], cfg["eval.frame_index"], cfg["dataset.median_window"]
    )
    latency = None
    if cfg["eval.timing"]:
        frame, _ = normalize(stacks[0].frames[cfg["eval.frame_index"]])
        latency = {"model": benchmark_inference(denoiser, frame, cfg["bench.warmup"], cfg["bench.iters"], threads=args.threads)}
    rows = summarize(reports, latency)
    write_report(out, rows)
    print((out / "report.txt").read_text(), end="")

    figs = out / "figures"
    figs.mkdir(exist_ok=True)
    det_rows = []
    threshold = cfg["eval.detect_threshold"]
    calibration = _calibration_for(Path(args.reconstructor)) if recon is not None else 1.0
    for k, stack in enumerate(stacks):
        noisy, _ = normalize(stack.frames[cfg["eval.frame_index"]])
        ref, _ = normalize(build_reference(stack, cfg["dataset.median_window"]))
        if recon is None:
            from .gan import predict_frame

            if k < cfg["eval.strips"]:
                pred = predict_frame(denoiser, noisy)
                write_pgm(figs / f"{stack.stack_id}.pgm", _strip_panels([noisy.samples, pred.samples, ref.samples], [False] * 3))
            continue
        denoised, dual_img = dual_gan_stages(denoiser, recon, noisy)
        direct_img = reconstruct_direct(recon, noisy)
        for method, img in (("direct", direct_img), ("dual", dual_img)):
            peak = detect_source(img, threshold, calibration)
            err = localization_error(peak, stack.source_truth, stack.geometry) if peak is not None and stack.source_truth else None
            det_rows.append((stack.stack_id, method, int(peak is not None), "" if err is None else repr(err)))
        if k < cfg["eval.strips"] and args.dual:
            panels = [
                noisy.samples,
                denoised.samples,
                das_reconstruct(noisy).pixels,
                das_reconstruct(ref).pixels,
                das_reconstruct(denoised).pixels,
                direct_img.pixels,
                dual_img.pixels,
            ]
            write_pgm(figs / f"{stack.stack_id}.pgm", _strip_panels(panels, [False, False] + [True] * 5))
    if det_rows:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("stack_id", "method", "detected", "localization_error_px"))
        w.writerows(det_rows)
        (out / "detection.csv").write_text(buf.getvalue())
    return EXIT_OK


def cmd_bench(cfg: RunConfig, model_paths: Sequence[str], out: Path) -> int:
    geom = geometry_from(cfg)
    src = random_source(geom, cfg["simulate.depths"][0], np.random.default_rng(cfg["run.seed"]),
                        pulse_width=cfg["source.pulse_width"])
    stack = synthesize_stack(
        replace(geom, n_frames=1), src,
        NoiseSpec(cfg["noise.white_noise_std"], cfg["noise.channel_offset_std"], cfg["noise.spike_rate"], cfg["run.seed"]),
    )
    frame, _ = normalize(stack.frames[0])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("model", "mode", "threads", "latency_ms_mean", "latency_ms_std", "latency_ms_min", "iters"))
    lines = []
    for path in model_paths:
        model = _load_model(path)
        for mode, s in benchmark_modes(model, frame, cfg["bench.warmup"], cfg["bench.iters"]).items():
            w.writerow((Path(path).name, mode, s.threads, repr(s.mean_ms), repr(s.std_ms), repr(s.min_ms), s.n))
            lines.append(f"{Path(path).name:<32} {mode:<6} {format_pm(s.mean_ms, s.std_ms, 1)} ms")
    (out / "bench.csv").write_text(buf.getvalue())
    text = "\n".join(lines) + "\n"
    (out / "bench.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


# -- argument parsing ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="key-value configuration file")
    common.add_argument("--profile", default=argparse.SUPPRESS, choices=sorted(PROFILES), help="default set (full or desk)")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="overrides run.seed")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="BLAS thread limit")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--set", action="append", default=argparse.SUPPRESS, metavar="KEY=VALUE",
                        help="override one configuration key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = _Parser(prog="sfpa", description=__doc__.splitlines()[0], parents=[common])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", parents=[common], help="synthesize RF stacks")
    s.add_argument("--spots", type=int, help="number of acquisition spots")
    s.add_argument("--depths", help="comma-separated source depths in metres")

    b = sub.add_parser("build-dataset", parents=[common], help="cut patch datasets from stacks")
    b.add_argument("--in", dest="in_dir", required=True, help="directory of .parf stacks")
    b.add_argument("--target", choices=sorted(TARGET_ALIASES), help="target frame kind")

    t = sub.add_parser("train", parents=[common], help="train a generator/discriminator pair")
    t.add_argument("--data", required=True, help="dataset directory from build-dataset")
    t.add_argument("--model", choices=("pix2pix", "pix2pix-residual"))
    t.add_argument("--target", choices=sorted(TARGET_ALIASES))
    t.add_argument("--epochs", type=int)

    e = sub.add_parser("evaluate", parents=[common], help="metric tables and figure strips")
    e.add_argument("--model", required=True, help="denoiser checkpoint")
    e.add_argument("--reconstructor", help="reconstruction checkpoint")
    e.add_argument("--dual", action="store_true", help="denoise then reconstruct; 7-panel strips")
    e.add_argument("--data", required=True, help="directory of test .parf stacks")

    k = sub.add_parser("bench", parents=[common], help="per-frame inference latency")
    k.add_argument("--model", action="append", required=True, help="checkpoint (repeatable)")
    return p


def _finish_args(args) -> argparse.Namespace:
    defaults = dict(config=None, profile="full", seed=None, threads=None, out="sfpa_out", set=[], verbose=False)
    for k, v in defaults.items():
        if not hasattr(args, k):
            setattr(args, k, v)
    return args


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = _finish_args(parser.parse_args(argv))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        extra = {}
        if args.command == "simulate":
            if args.spots is not None:
                extra["simulate.spots"] = str(args.spots)
            if args.depths is not None:
                extra["simulate.depths"] = args.depths
        if getattr(args, "target", None):
            extra["dataset.target"] = TARGET_ALIASES[args.target]
        if args.command == "train":
            if args.model:
                extra["train.model"] = args.model
            if args.epochs is not None:
                extra["train.epochs"] = str(args.epochs)
        cfg = load_config(args, extra)
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be positive")
    except ConfigError as exc:
        print(f"sfpa: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        out = _out_dir(args)
        cfg.save(out / "config")
        limit = threadpool_limits(limits=args.threads) if args.threads else nullcontext()
        with limit:
            if args.command == "simulate":
                return cmd_simulate(cfg, out)
            if args.command == "build-dataset":
                return cmd_build_dataset(cfg, args.in_dir, out)
            if args.command == "train":
                return cmd_train(cfg, args.data, out)
            if args.command == "evaluate":
                return cmd_evaluate(cfg, args, out)
            return cmd_bench(cfg, args.model, out)
    except ConfigError as exc:
        print(f"sfpa: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SfpaError, OSError) as exc:
        print(f"sfpa: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
