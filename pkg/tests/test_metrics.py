import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from oracles import ssim_scalar

from sfpa.beamform import PointTarget
from sfpa.errors import ConfigError, InvalidArgument, ShapeError
from sfpa.metrics import (
    EvalReport,
    LatencySummary,
    baseline_frame,
    benchmark_inference,
    evaluate_denoiser,
    format_pm,
    format_table,
    localization_error,
    mse,
    read_report_csv,
    report_csv,
    ssim,
    summarize,
    write_report,
)
from sfpa.neural import build_unet_generator
from sfpa.rf import AcquisitionGeometry
from sfpa.simulate import NoiseSpec, SourceSpec, synthesize_stack
from conftest import constant_stack

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def test_mse_two_by_one_example():
    assert mse([[1.0], [2.0]], [[4.0], [1.0]]) == 5.0


def test_ssim_hand_value():
    # means 0.5, sample variances 0.5, covariance -0.5
    assert ssim([0.0, 1.0], [1.0, 0.0]) == pytest.approx(-0.97 / 1.03, abs=1e-15)


def test_ssim_matches_scalar_oracle():
    rng = np.random.default_rng(5)
    for _ in range(10):
        a, b = rng.normal(size=(2, 6, 5))
        assert ssim(a, b) == pytest.approx(ssim_scalar(a, b), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (4, 5), elements=finite), arrays(np.float64, (4, 5), elements=finite))
def test_identities_and_symmetry(a, b):
    assert mse(a, a) == 0.0
    assert abs(ssim(a, a) - 1.0) < 1e-12
    assert abs(ssim(a, b) - ssim(b, a)) < 1e-12
    assert mse(a, b) == mse(b, a)


def test_windowed_ssim():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(16, 16))
    assert ssim(a, a, window=7) == pytest.approx(1.0, abs=1e-12)
    b = a + rng.normal(size=a.shape)
    # interior windows only, each scored with the global formula
    brute = [ssim_scalar(a[i : i + 7, j : j + 7], b[i : i + 7, j : j + 7]) for i in range(10) for j in range(10)]
    assert ssim(a, b, window=7) == pytest.approx(np.mean(brute), abs=1e-10)
    with pytest.raises(InvalidArgument):
        ssim(a, a, window=32)


def test_metric_errors():
    with pytest.raises(ShapeError):
        mse(np.zeros(3), np.zeros(4))
    with pytest.raises(InvalidArgument):
        mse([], [])
    with pytest.raises(InvalidArgument):
        ssim([1.0], [1.0])


def test_localization_error():
    g = AcquisitionGeometry()
    row, col = g.to_pixel(0.03, 0.0)
    assert localization_error(PointTarget(row + 3, col + 4), (0.03, 0.0), g) == pytest.approx(5.0)


def test_summary_and_table(tmp_path):
    reports = [
        EvalReport("noisy", "a", 1.0, 0.5),
        EvalReport("model", "a", 0.5, 0.9),
        EvalReport("noisy", "b", 3.0, 0.7),
        EvalReport("model", "b", 0.5, 0.95),
    ]
    rows = summarize(reports, {"model": LatencySummary(12.0, 1.5, 10.0, 20)})
    assert [r.method for r in rows] == ["noisy", "model"]
    assert rows[0].mse_mean == 2.0 and rows[0].mse_std == pytest.approx(np.sqrt(2))
    assert rows[0].latency_ms_mean is None and rows[1].latency_ms_mean == 12.0
    text = format_table(rows)
    assert "0.600 ± 0.141" in text and "12.0 ± 1.5" in text
    write_report(tmp_path, rows)
    back = read_report_csv(tmp_path / "report.csv")
    assert [(r.method, r.ssim_mean, r.latency_ms_std) for r in back] == [(r.method, r.ssim_mean, r.latency_ms_std) for r in rows]
    assert report_csv(rows) == (tmp_path / "report.csv").read_text()
    assert format_pm(None, None) == "-"
    with pytest.raises(InvalidArgument):
        EvalReport("x", "a", -1.0, 0.5)


def test_baselines(small_geometry):
    stack = constant_stack(small_geometry, range(8), stack_id="c")
    assert baseline_frame(stack, "noisy", 2).samples[0, 0] == 2.0
    assert baseline_frame(stack, "avg4").samples[0, 0] == 1.5
    with pytest.raises(ConfigError):
        baseline_frame(stack, "avg9")
    with pytest.raises(ConfigError):
        baseline_frame(stack, "median")


def test_evaluate_denoiser_baselines_and_model():
    g = AcquisitionGeometry(n_elements=16, n_samples=256, n_frames=12, sample_rate=20e6)
    stacks = [synthesize_stack(g, SourceSpec(0.0, 0.005, pulse_width=0.75e-6), NoiseSpec(seed=i), stack_id=f"t{i}") for i in range(2)]
    gen = build_unet_generator(base_filters=2, depth=2, side=16).eval()
    reports = evaluate_denoiser(gen, stacks, ("noisy", "avg10"))
    rows = summarize(reports)
    assert [r.method for r in rows] == ["noisy", "avg10", "model"]
    assert rows[1].ssim_mean > rows[0].ssim_mean
    with pytest.raises(ConfigError):
        evaluate_denoiser(None, stacks, ("noisy",), references={})


def test_benchmark_reports_spread():
    g = AcquisitionGeometry(n_elements=16, n_samples=64)
    frame = synthesize_stack(g, SourceSpec(0.0, 0.001, pulse_width=0.75e-6), NoiseSpec(seed=0), stack_id="b").frames[0]
    gen = build_unet_generator(base_filters=2, depth=2, side=16).eval()
    lat = benchmark_inference(gen, frame, warmup=1, iters=3)
    assert lat.n == 3 and lat.mean_ms > 0 and lat.min_ms <= lat.mean_ms and lat.threads == 1
    with pytest.raises(InvalidArgument):
        benchmark_inference(gen, frame, iters=1)
