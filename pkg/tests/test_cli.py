import subprocess
import sys

import pytest

from sfpa.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, run

TINY = [
    "geometry.n_elements=16",
    "geometry.n_samples=400",
    "geometry.n_frames=20",
    "geometry.sample_rate=20e6",
    "source.pulse_width=0.75e-6",
    "simulate.depths=0.01,0.012",
    "dataset.fraction=0.1",
    "dataset.averages=1,3",
    "dataset.steps=2",
    "dataset.step_size=4",
    "dataset.split=0.67,0,0.33",
    "eval.baselines=noisy,avg10",
    "train.epochs=2",
    "train.base_filters=4",
    "train.depth=2",
    "train.disc_filters=4",
    "train.batch_size=4",
    "train.images_per_epoch=8",
    "bench.iters=2",
    "bench.warmup=0",
]


def sfpa(*args, out):
    sets = [a for kv in TINY for a in ("--set", kv)]
    return run([*args, "--out", str(out), *sets])


def pipeline(root):
    assert sfpa("simulate", "--spots", "3", out=root / "sim") == EXIT_OK
    assert sfpa("build-dataset", "--in", str(root / "sim"), out=root / "data") == EXIT_OK
    assert sfpa("build-dataset", "--in", str(root / "sim"), "--target", "exact", out=root / "data_x") == EXIT_OK
    assert sfpa("train", "--data", str(root / "data"), out=root / "den") == EXIT_OK
    assert sfpa("train", "--data", str(root / "data_x"), "--target", "exact", out=root / "rec") == EXIT_OK
    assert sfpa(
        "evaluate", "--model", str(root / "den" / "generator.pamg"),
        "--reconstructor", str(root / "rec" / "generator.pamg"), "--dual",
        "--data", str(root / "sim"), out=root / "eval",
    ) == EXIT_OK


ARTIFACTS = [
    "sim/spot000.parf", "sim/spot002.sidecar", "sim/manifest.csv", "sim/config",
    "data/train/patches.bin", "data/train/index.csv", "data/train/manifest", "data/test/patches.bin", "data/splits",
    "data_x/train/patches.bin",
    "den/generator.pamg", "den/discriminator.pamg", "den/history.csv",
    "rec/generator.pamg", "rec/calibration",
    "eval/report.csv", "eval/report.txt", "eval/detection.csv", "eval/figures/spot000.pgm",
]


@pytest.fixture(scope="module")
def two_runs(tmp_path_factory):
    a, b = tmp_path_factory.mktemp("a"), tmp_path_factory.mktemp("b")
    pipeline(a)
    pipeline(b)
    return a, b


@pytest.mark.parametrize("name", ARTIFACTS)
def test_rerun_is_byte_identical(two_runs, name):
    a, b = two_runs
    assert (a / name).read_bytes() == (b / name).read_bytes()


def test_outputs_are_readable(two_runs):
    a, _ = two_runs
    report = (a / "eval" / "report.csv").read_text().splitlines()
    assert report[0].startswith("method,mse_mean")
    assert [r.split(",")[0] for r in report[1:]] == ["noisy", "avg10", "model"]
    assert "±" in (a / "eval" / "report.txt").read_text()
    assert "stack_id,method,detected" in (a / "eval" / "detection.csv").read_text()
    assert "train.epochs = 2" in (a / "den" / "config").read_text()
    assert "peak_response" in (a / "rec" / "calibration").read_text()


def test_bench(two_runs, tmp_path):
    a, _ = two_runs
    code = sfpa("bench", "--model", str(a / "den" / "generator.pamg"), "--model", str(a / "rec" / "generator.pamg"), out=tmp_path)
    assert code == EXIT_OK
    rows = (tmp_path / "bench.csv").read_text().splitlines()
    assert len(rows) == 1 + 2 * 2
    assert "±" in (tmp_path / "bench.txt").read_text()


def test_seed_changes_simulation(tmp_path):
    assert sfpa("simulate", "--spots", "1", out=tmp_path / "a") == EXIT_OK
    assert sfpa("simulate", "--spots", "1", "--seed", "9", out=tmp_path / "b") == EXIT_OK
    assert (tmp_path / "a" / "spot000.parf").read_bytes() != (tmp_path / "b" / "spot000.parf").read_bytes()


def test_usage_errors(tmp_path, capsys):
    with pytest.raises(SystemExit) as e:
        run(["frobnicate"])
    assert e.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as e:
        run(["train"])
    assert e.value.code == EXIT_USAGE
    assert run(["simulate", "--set", "nope.key=1", "--out", str(tmp_path)]) == EXIT_USAGE
    assert run(["simulate", "--set", "noequals", "--out", str(tmp_path)]) == EXIT_USAGE
    assert run(["simulate", "--config", str(tmp_path / "missing"), "--out", str(tmp_path)]) == EXIT_USAGE
    assert run(["simulate", "--threads", "0", "--out", str(tmp_path)]) == EXIT_USAGE
    assert "configuration error" in capsys.readouterr().err


def test_runtime_errors(tmp_path):
    assert sfpa("build-dataset", "--in", str(tmp_path / "none"), out=tmp_path / "o") == EXIT_RUNTIME
    assert sfpa("train", "--data", str(tmp_path / "none"), out=tmp_path / "o") == EXIT_RUNTIME
    assert sfpa("bench", "--model", str(tmp_path / "none.pamg"), out=tmp_path / "o") == EXIT_RUNTIME
    (tmp_path / "bad.pamg").write_bytes(b"junk")
    assert sfpa("bench", "--model", str(tmp_path / "bad.pamg"), out=tmp_path / "o") == EXIT_RUNTIME


def test_dual_needs_reconstructor(two_runs, tmp_path):
    a, _ = two_runs
    code = sfpa("evaluate", "--model", str(a / "den" / "generator.pamg"), "--dual", "--data", str(a / "sim"), out=tmp_path)
    assert code == EXIT_USAGE


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "sfpa", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and "sfpa" in res.stdout


def test_zero_spots_gives_empty_manifest(tmp_path):
    assert sfpa("simulate", "--spots", "0", out=tmp_path) == EXIT_OK
    assert (tmp_path / "manifest.csv").read_text() == "stack_id,noise_seed,axial_m,lateral_m\n"
    assert not list(tmp_path.glob("*.parf"))


def test_segmented_target_and_residual_model(two_runs, tmp_path):
    a, _ = two_runs
    assert sfpa("build-dataset", "--in", str(a / "sim"), "--target", "segmented", out=tmp_path / "d") == EXIT_OK
    assert "segmented" in (tmp_path / "d" / "train" / "manifest").read_text()
    code = sfpa("train", "--data", str(tmp_path / "d"), "--model", "pix2pix-residual", "--target", "segmented", out=tmp_path / "m")
    assert code == EXIT_OK
    assert (tmp_path / "m" / "generator.pamg").exists()
