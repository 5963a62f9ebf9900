import numpy as np
import pytest

from sfpa.errors import InvalidArgument, OutOfView
from sfpa.rf import AcquisitionGeometry, build_reference
from sfpa.simulate import (
    NoiseSpec,
    SourceSpec,
    arrival_rows,
    ground_truth_mask,
    pulse_half_support,
    pulse_kernel,
    random_source,
    read_sidecar,
    synthesize_clean,
    synthesize_stack,
    write_sidecar,
)

QUIET = NoiseSpec(white_noise_std=0.0, channel_offset_std=0.0, spike_rate=0.0)


def test_apex_sample_at_3cm():
    g = AcquisitionGeometry()
    src = SourceSpec(0.0, 0.03)
    assert int(arrival_rows(g, src).min()) == round(0.03 / 1480 * 40e6) == 811
    frame = synthesize_clean(g, src).samples
    # the pulse is zero at its centre and extremal one sigma either side
    col = frame[:, 63]
    peak_row = int(np.argmax(np.abs(col)))
    assert abs(peak_row - 811) <= 3


def test_centred_source_is_symmetric():
    g = AcquisitionGeometry(n_elements=32, n_samples=1200)
    frame = synthesize_clean(g, SourceSpec(0.0, 0.02)).samples
    np.testing.assert_allclose(frame, frame[:, ::-1], atol=1e-12)
    rows = arrival_rows(g, SourceSpec(0.0, 0.02))
    np.testing.assert_array_equal(rows, rows[::-1])


def test_deeper_source_arrives_later():
    g = AcquisitionGeometry(n_elements=32)
    a = arrival_rows(g, SourceSpec(0.002, 0.02))
    b = arrival_rows(g, SourceSpec(0.002, 0.04))
    assert np.all(b > a)


def test_arrival_curve_is_convex():
    g = AcquisitionGeometry()
    rows = arrival_rows(g, SourceSpec(0.004, 0.03)).astype(float)
    assert np.all(np.diff(rows, 2) >= -1)


def test_out_of_view():
    g = AcquisitionGeometry(n_elements=16, n_samples=100)
    with pytest.raises(OutOfView):
        synthesize_clean(g, SourceSpec(0.0, 0.03))
    with pytest.raises(InvalidArgument):
        SourceSpec(0.0, -0.01)


def test_noiseless_stack_repeats_clean_frame():
    g = AcquisitionGeometry(n_elements=16, n_samples=600, n_frames=4)
    src = SourceSpec(0.001, 0.015)
    stack = synthesize_stack(g, src, QUIET)
    clean = synthesize_clean(g, src).samples
    for f in stack.frames:
        np.testing.assert_array_equal(f.samples, clean)
    assert stack.source_truth == (0.015, 0.001)


def test_same_seed_is_bit_identical():
    g = AcquisitionGeometry(n_elements=16, n_samples=600, n_frames=3)
    src = SourceSpec(0.0, 0.015)
    a = synthesize_stack(g, src, NoiseSpec(seed=5)).as_array()
    b = synthesize_stack(g, src, NoiseSpec(seed=5)).as_array()
    c = synthesize_stack(g, src, NoiseSpec(seed=6)).as_array()
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, c)


def test_white_noise_snr_monte_carlo():
    g = AcquisitionGeometry(n_elements=16, n_samples=600, n_frames=100)
    src = SourceSpec(0.0, 0.015)
    clean = synthesize_clean(g, src).samples
    stack = synthesize_stack(g, src, NoiseSpec(white_noise_std=0.5, channel_offset_std=0.0, spike_rate=0.0, seed=3))
    noise = stack.as_array() - clean
    snr = np.abs(clean).max() / noise.std(axis=(1, 2))
    assert np.all(np.abs(snr - 2.0) < 0.4)


def test_noise_independent_across_frames():
    g = AcquisitionGeometry(n_elements=16, n_samples=600, n_frames=100)
    src = SourceSpec(0.0, 0.015)
    clean = synthesize_clean(g, src).samples
    noise = synthesize_stack(g, src, NoiseSpec(channel_offset_std=0.0, spike_rate=0.0, seed=4)).as_array() - clean
    flat = noise.reshape(100, -1)
    corr = np.corrcoef(flat)
    off = corr[~np.eye(100, dtype=bool)]
    assert np.max(np.abs(off)) < 0.1


def test_channel_offsets_shared_across_frames():
    g = AcquisitionGeometry(n_elements=16, n_samples=600, n_frames=3)
    src = SourceSpec(0.0, 0.015)
    stack = synthesize_stack(g, src, NoiseSpec(white_noise_std=0.0, channel_offset_std=0.1, spike_rate=0.0, seed=2))
    a = stack.as_array()
    np.testing.assert_array_equal(a[0], a[1])
    assert np.ptp(a[0, 0]) > 0


def test_spikes_are_large_and_removed_by_median():
    g = AcquisitionGeometry(n_elements=16, n_samples=600, n_frames=1)
    src = SourceSpec(0.0, 0.015, pulse_width=0.75e-6)
    clean = synthesize_clean(g, src).samples
    stack = synthesize_stack(g, src, NoiseSpec(white_noise_std=0.0, channel_offset_std=0.0, spike_rate=1.0, seed=1))
    diff = stack.frames[0].samples - clean
    hits = np.abs(diff) > 0
    assert hits.sum(axis=0).tolist() == [1] * 16
    assert np.all(np.abs(diff[hits]) >= 5 * np.abs(clean).max() - 1e-9)
    ref = build_reference(stack, 5).samples
    assert np.abs(ref).max() <= np.abs(clean).max() * 1.0001


def test_reference_recovers_clean_frame():
    g = AcquisitionGeometry(n_elements=32, n_samples=800, n_frames=260)
    src = SourceSpec(0.002, 0.02)
    clean = synthesize_clean(g, src).samples
    noise = NoiseSpec(white_noise_std=0.5, channel_offset_std=0.0, spike_rate=0.01, seed=9)
    ref = build_reference(synthesize_stack(g, src, noise), 5).samples
    peak = np.abs(clean).max()
    rel = np.linalg.norm(ref - clean) / np.linalg.norm(clean)
    rms = np.sqrt(np.mean(clean**2))
    bound = 3 * (0.5 * peak / np.sqrt(260)) / rms
    assert rel < bound


def test_ground_truth_mask_covers_support():
    g = AcquisitionGeometry(n_elements=32, n_samples=800)
    src = SourceSpec(0.002, 0.02)
    half = pulse_half_support(g, src)
    clean = synthesize_clean(g, src).samples
    m = ground_truth_mask(g, src, half).mask
    assert np.all(~m[np.abs(clean) > 1e-9])
    bigger = ground_truth_mask(g, src, half + 5).mask
    assert np.all(bigger <= m)
    with pytest.raises(InvalidArgument):
        ground_truth_mask(g, src, half - 1)
    with pytest.raises(InvalidArgument):
        ground_truth_mask(g, src, 10_000)


def test_pulse_kernel_shape():
    g = AcquisitionGeometry()
    k, p = pulse_kernel(g, SourceSpec(0.0, 0.03))
    assert np.abs(p).max() == pytest.approx(1.0, abs=0.05)
    assert p[len(p) // 2] == 0.0
    np.testing.assert_allclose(p, -p[::-1])


def test_random_source_and_sidecar(tmp_path):
    g = AcquisitionGeometry()
    src = random_source(g, 0.04, np.random.default_rng(0), lateral_fraction=0.5)
    lo, hi = g.lateral_extent()
    assert lo * 0.5 <= src.lateral_pos <= hi * 0.5
    write_sidecar(tmp_path / "s", src, NoiseSpec(seed=17), "abc")
    s2, n2, sid = read_sidecar(tmp_path / "s")
    assert s2 == src and n2.seed == 17 and sid == "abc"
    assert "lateral_m" in (tmp_path / "s").read_text()
