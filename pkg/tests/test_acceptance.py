"""Acceptance criteria, each at its stated tolerance.

Criteria 9 to 11 share desk-scale models trained once per session. The
terminal summary prints one PASS/FAIL line per criterion.
"""

import time

import numpy as np
import pytest
from gradcheck import layer_cases, max_relative_error
from oracles import adam_trace, das_triple_loop
from test_cli import pipeline

from sfpa.beamform import DasImage, PointTarget, das_reconstruct, exact_target, locate_peak
from sfpa.dataset import PatchConfig, PatchDataset, build_patch_dataset
from sfpa.gan import TrainConfig, calibrate_detector, calibration_constant, detect_source, dual_gan, reconstruct_direct, train
from sfpa.metrics import benchmark_inference, evaluate_denoiser, localization_error, mse, ssim
from sfpa.neural import AdamState, LAYER_KINDS, checkpoint, adam_step, build_residual_unet_generator, build_unet_generator
from sfpa.rf import AcquisitionGeometry, RfFrame, normalize
from sfpa.simulate import NoiseSpec, SourceSpec, random_source, synthesize_clean, synthesize_stack

criterion = pytest.mark.criterion


# -- 1, 2: dataset and patch counts -----------------------------------------------------


@pytest.fixture(scope="module")
def paper_counts():
    g = AcquisitionGeometry(n_elements=8, n_samples=512, n_frames=260, sample_rate=20e6)
    src = SourceSpec(0.0, 0.01, pulse_width=0.75e-6)

    def stacks():
        for i in range(84):
            yield synthesize_stack(g, src, NoiseSpec(seed=i), stack_id=f"s{i:02d}")

    t0 = time.perf_counter()
    samples, manifest = build_patch_dataset(stacks(), "reference", PatchConfig(fraction=0.05, averages=(1, 3, 5)))
    return samples, manifest, time.perf_counter() - t0


@criterion(1, "dataset counts 1092 / 336 / 168 = 1596")
def test_dataset_counts(paper_counts):
    _, manifest, seconds = paper_counts
    assert manifest.frame_counts == {1: 1092, 3: 336, 5: 168}
    assert manifest.total_frames == 1596
    assert manifest.breakdown() == "1092 + 336 + 168 = 1596"
    assert seconds < 60


@criterion(2, "21 signal + 21 noise patches per frame sample")
def test_patch_counts(paper_counts):
    samples, manifest, _ = paper_counts
    per_sample = {}
    for s in samples:
        key = (s.origin[0], s.frames_averaged)
        per_sample.setdefault(key, []).append(s)
    assert len(samples) == 42 * 1596
    assert manifest.is_balanced()
    for (stack_id, k), group in per_sample.items():
        n_frames = manifest.frame_counts[k] // 84
        kinds = [s.kind for s in group]
        assert kinds.count("signal") == kinds.count("noise") == 21 * n_frames


# -- 3, 4, 5: beamforming ----------------------------------------------------------------


@criterion(3, "fast DAS equals the triple-loop oracle on 20 cases")
def test_das_oracle_equivalence():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(20):
        g = AcquisitionGeometry(
            n_elements=32,
            n_samples=256,
            sample_rate=float(rng.choice([20e6, 40e6, 50e6])),
            speed_of_sound=float(rng.uniform(1400, 1600)),
            element_pitch=float(rng.uniform(0.1e-3, 0.5e-3)),
            axial_offset=float(rng.uniform(0, 2e-3)),
        )
        x = rng.normal(size=g.shape)
        worst = max(worst, float(np.max(np.abs(das_reconstruct(RfFrame(x, g)).pixels - das_triple_loop(x, g)))))
    assert worst < 1e-6
    assert time.perf_counter() - t0 < 60


@criterion(4, "DAS argmax within one sample and one pitch for 50 sources at 3-7 cm")
def test_das_localization():
    g = AcquisitionGeometry()
    rng = np.random.default_rng(4)
    misses = []
    for depth in np.linspace(0.03, 0.07, 50):
        src = random_source(g, float(depth), rng)
        peak = locate_peak(das_reconstruct(synthesize_clean(g, src)))
        row, col = g.to_pixel(src.axial_pos, src.lateral_pos)
        if not (abs(peak.row - row) <= 1 and abs(peak.col - col) <= 1):
            misses.append((depth, peak.row - row, peak.col - col))
    assert misses == []


@criterion(5, "Gaussian target weight exp(-1/2) one sigma from the peak")
def test_gaussian_target_one_sigma():
    # an axial spacing of 0.1 mm puts one sigma (0.3 mm) exactly three rows away
    g = AcquisitionGeometry(n_elements=32, n_samples=200, sample_rate=1480 / 0.1e-3, element_pitch=0.3e-3)
    img = DasImage(np.ones(g.shape), g)
    peak = PointTarget(100, 16, sigma_m=0.3e-3)
    out = exact_target(img, peak).pixels
    assert abs(out[103, 16] - np.exp(-0.5)) <= 1e-9
    assert abs(out[97, 16] - np.exp(-0.5)) <= 1e-9
    assert abs(out[100, 17] - np.exp(-0.5)) <= 1e-9  # one pitch equals one sigma here
    assert out[100, 16] == 1.0


# -- 6, 7, 8: numerics ---------------------------------------------------------------------


@criterion(6, "finite-difference gradient checks for every layer kind")
def test_gradient_checks():
    t0 = time.perf_counter()
    cases = layer_cases(np.random.default_rng(99))
    names = {c[0] for c in cases}
    for kind in set(LAYER_KINDS) - {"input"}:
        assert any(n.startswith(kind) for n in names), kind
    errors = {name: max_relative_error(fn, inputs, np.random.default_rng(5), probes=5) for name, fn, inputs in cases}
    assert max(errors.values()) < 1e-4, errors
    assert time.perf_counter() - t0 < 120


@criterion(7, "Adam trace on w^2 matches the hand-computed oracle")
def test_adam_trace():
    state = AdamState(lr=0.1, beta1=0.9, beta2=0.999, epsilon=1e-8)
    w = np.array([1.0])
    got = []
    for _ in range(5):
        adam_step(state, [w], [2 * w])
        got.append(float(w[0]))
    hand = [0.9000000005, 0.8004122286917928, 0.7015862729460303, 0.603939060573746, 0.507963659264342]
    assert np.max(np.abs(np.array(got) - hand)) < 1e-10
    assert np.max(np.abs(np.array(got) - adam_trace(1.0, 0.1, 0.9, 0.999, 1e-8, 5))) < 1e-10


@criterion(8, "metric identities, symmetry and the 2x1 MSE example")
def test_metric_identities():
    rng = np.random.default_rng(8)
    for _ in range(100):
        shape = tuple(rng.integers(2, 40, size=2))
        a, b = rng.normal(size=shape) * rng.uniform(0.1, 10), rng.normal(size=shape)
        assert mse(a, a) == 0.0
        assert abs(ssim(a, a) - 1.0) <= 1e-12
        assert abs(ssim(a, b) - ssim(b, a)) <= 1e-12
    assert mse(np.array([[1.0], [2.0]]), np.array([[4.0], [1.0]])) == 5.0


# -- 9, 10, 11: desk-scale training --------------------------------------------------------

DESK = AcquisitionGeometry(n_elements=64, n_samples=1024, n_frames=40)
# full-length acquisitions, so the averaged reference is clean enough to learn from
DESK_260 = AcquisitionGeometry(n_elements=64, n_samples=1024, n_frames=260)
DESK_DEPTHS = (0.015, 0.02, 0.03, 0.035)
BUDGET_S = 20 * 60
DESK_TRAIN = dict(base_filters=8, disc_filters=8, batch_size=16, minibatch_images_per_epoch=64)
# white noise 0.25 with the default spikes puts a single frame at SSIM ~0.70 against its reference
DENOISE_SNR = dict(noise=0.25)
HIGH_SNR = dict(noise=0.25, spike_rate=0.0)
LOW_SNR = dict(noise=2.0)


def desk_stacks(count, seed, noise=0.5, spike_rate=0.01, geometry=DESK):
    """One random source per stack, cycling through the desk depths."""
    rng = np.random.default_rng(seed)
    for i in range(count):
        src = random_source(geometry, DESK_DEPTHS[i % len(DESK_DEPTHS)], rng)
        spec = NoiseSpec(white_noise_std=noise, spike_rate=spike_rate, seed=seed * 100_000 + i)
        yield synthesize_stack(geometry, src, spec, stack_id=f"{seed}-{i}")


def fit(stacks, target, patch_config, train_config, out_dir=None):
    t0 = time.perf_counter()
    samples, manifest = build_patch_dataset(stacks, target, patch_config)
    dataset = PatchDataset.from_samples(samples, manifest)
    pair = train(dataset, train_config, out_dir=out_dir)
    return pair, dataset, time.perf_counter() - t0


def noisy_input(stack):
    return normalize(stack.frames[0])[0]


def succeeds(image, stack, calibration):
    peak = detect_source(image, calibration=calibration)
    return peak is not None and localization_error(peak, stack.source_truth, DESK) <= 5


def direct_hits(generator, stacks, calibration):
    return [succeeds(reconstruct_direct(generator, noisy_input(s)), s, calibration) for s in stacks]


def report(capsys, text):
    with capsys.disabled():
        print(f"\n  {text}")


@pytest.fixture(scope="module")
def denoiser():
    config = TrainConfig(epochs=200, **{**DESK_TRAIN, "base_filters": 16})
    stacks = desk_stacks(48, seed=1, geometry=DESK_260, **DENOISE_SNR)
    return fit(stacks, "reference", PatchConfig(step_size=3), config)


@pytest.fixture(scope="module")
def reconstructor(tmp_path_factory):
    """Reconstructor checkpoint chosen on held-out validation frames.

    Returns (generator, dataset, training seconds, calibration, epoch chosen).
    """
    out = tmp_path_factory.mktemp("reconstructor")
    config = TrainConfig(
        target_kind="exact_reconstruction", depth=5, lambda_l1=300, epochs=500, lr_decay_epochs=250,
        checkpoint_interval=25, **DESK_TRAIN,
    )
    patches = PatchConfig(fraction=0.025, step_size=3, averages=(1,), noise_anchor="far")
    pair, dataset, seconds = fit(desk_stacks(192, seed=2), "exact_reconstruction", patches, config, out)
    validation = list(desk_stacks(20, seed=5, **HIGH_SNR))
    best = None
    for path in sorted(out.glob("generator_e*.pamg")):
        generator = checkpoint.load(path).eval()
        cal = calibrate_detector(generator, dataset)
        score = sum(direct_hits(generator, validation, cal))
        if best is None or score >= best[0]:
            best = (score, generator, cal, path.stem)
    _, generator, cal, name = best
    return generator, dataset, seconds, cal, name


@pytest.fixture(scope="module")
def residual_denoiser():
    """The two-stage default: residual U-Net trained on segmented targets."""
    config = TrainConfig(target_kind="segmented", model="pix2pix-residual", epochs=200, **DESK_TRAIN)
    stacks = (s for k, noise in enumerate((0.5, 1.0, 2.0)) for s in desk_stacks(32, seed=10 + k, noise=noise))
    return fit(stacks, "segmented", PatchConfig(step_size=3, averages=(1,)), config)


@criterion(9, "denoiser halves L1 and beats the noisy input on held-out SSIM")
def test_denoiser_training(denoiser, capsys):
    pair, dataset, seconds = denoiser
    first, last = pair.history[0].loss_l1, pair.history[-1].loss_l1
    reports = evaluate_denoiser(pair.generator, desk_stacks(12, seed=3, geometry=DESK_260, **DENOISE_SNR), baselines=("noisy",))
    noisy = np.mean([r.ssim for r in reports if r.method == "noisy"])
    model = np.mean([r.ssim for r in reports if r.method == "model"])
    report(capsys, f"{len(dataset)} pairs, {len(pair.history)} epochs, {seconds:.0f} s; L1 {first:.4f} -> {last:.4f}; "
           f"SSIM noisy {noisy:.3f} -> model {model:.3f} over 12 frames")
    assert len(dataset) >= 200 and len(pair.history) <= 500 and seconds <= BUDGET_S
    assert last <= 0.5 * first
    assert model > noisy


@criterion(10, "reconstructor detects and localizes within 5 px on >= 70% of high-SNR frames")
def test_reconstructor_training(reconstructor, capsys):
    generator, dataset, seconds, cal, name = reconstructor
    frames = list(desk_stacks(20, seed=4, **HIGH_SNR))
    hits = direct_hits(generator, frames, cal)
    spiky = direct_hits(generator, list(desk_stacks(20, seed=4, noise=0.25)), cal)
    signal = [t for t, row in zip(dataset.targets, dataset.index) if row["kind"] == "signal"]
    by_targets = direct_hits(generator, frames, calibration_constant(signal))
    report(capsys, f"{len(dataset)} pairs, 500 epochs, {seconds:.0f} s, kept {name}; {sum(hits)}/20 within 5 px; "
           f"{sum(spiky)}/20 when the frames also carry spikes, {sum(by_targets)}/20 calibrated on target peaks")
    assert len(dataset) >= 200 and seconds <= BUDGET_S
    assert sum(hits) >= 0.7 * len(hits)


@criterion(11, "two-stage pipeline recovers most low-SNR frames the direct reconstructor misses")
def test_dual_rescue(reconstructor, residual_denoiser, capsys):
    generator, _, _, cal, _ = reconstructor
    denoiser, dataset, seconds = residual_denoiser
    failures = []
    for stack in desk_stacks(40, seed=6, **LOW_SNR):
        if not direct_hits(generator, [stack], cal)[0]:
            failures.append(stack)
        if len(failures) == 8:
            break
    rescued = [succeeds(dual_gan(denoiser.generator, generator, noisy_input(s)), s, cal) for s in failures]
    report(capsys, f"denoiser: {len(dataset)} pairs, {seconds:.0f} s; rescued {sum(rescued)}/{len(failures)} direct failures")
    assert len(dataset) >= 200 and seconds <= BUDGET_S
    assert len(failures) >= 5
    assert sum(rescued) > len(failures) / 2


# -- 12: latency ordering ------------------------------------------------------------------------


@criterion(12, "residual generator slower than the plain U-Net, 20+ timed runs each")
def test_benchmark_ordering(capsys):
    g = AcquisitionGeometry(n_elements=64, n_samples=1024)
    frame, _ = normalize(synthesize_stack(g, SourceSpec(0.0, 0.02), NoiseSpec(seed=1), stack_id="b").frames[0])
    unet = build_unet_generator(base_filters=16, depth=4, side=64).eval()
    residual = build_residual_unet_generator(base_filters=8, depth=4, side=64).eval()
    a = benchmark_inference(unet, frame, warmup=2, iters=20, threads=1, mode="single")
    b = benchmark_inference(residual, frame, warmup=2, iters=20, threads=1, mode="single")
    with capsys.disabled():
        print(f"\n  pix2pix U-Net          {a}\n  residual U-Net         {b}")
    assert a.n >= 20 and b.n >= 20 and a.std_ms >= 0 and b.std_ms >= 0
    assert b.mean_ms > a.mean_ms


# -- 13: reproducibility ---------------------------------------------------------------------------


@criterion(13, "re-running every command gives byte-identical outputs")
def test_reproducibility(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    pipeline(a)
    pipeline(b)
    files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    assert files_a == files_b
    kinds = {p.suffix for p in files_a}
    assert {".parf", ".bin", ".pamg", ".csv"} <= kinds
    differing = [str(p) for p in files_a if (a / p).read_bytes() != (b / p).read_bytes()]
    assert differing == []
