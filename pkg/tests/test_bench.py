import csv
import io
import subprocess
import sys

import numpy as np
import pytest

from ppush import bench, cli
from ppush.bench import BenchConfig, ConfigError


def test_gen_synthetic_shapes_and_determinism():
    a = bench.gen_synthetic(200, 10, 128, seed=3)
    b = bench.gen_synthetic(200, 10, 128, seed=3)
    c = bench.gen_synthetic(200, 10, 128, seed=4)
    assert len(a) == 10
    x = np.concatenate([xb for xb, _ in a])
    y = np.concatenate([yb for _, yb in a])
    assert x.shape == (1280, 200) and y.shape == (1280, 1)
    assert all(np.array_equal(u[0], v[0]) and np.array_equal(u[1], v[1]) for u, v in zip(a, b))
    assert not np.array_equal(a[0][0], c[0][0])
    # the target only depends on the first coordinate plus small noise
    assert np.abs(y - np.sin(x[:, :1])).max() < 1.0
    with pytest.raises(ValueError):
        bench.gen_synthetic(0, 1, 1, 0)


def test_bench_arch():
    arch = bench.bench_arch(8, 3)
    assert arch.layer_dims == (8, 8, 8, 8, 1)
    assert arch.activation == "tanh"


def small_cfg(**kw):
    base = dict(dims=(8,), n_layers=2, particles=(1,), epochs=1, batches=2, batch_size=4)
    base.update(kw)
    return BenchConfig(**base)


@pytest.mark.parametrize("algo", ["svgd", "ensemble", "swag"])
def test_run_scaling_rows(algo):
    rows, slow = bench.run_scaling(small_cfg(algorithm=algo, particles=(1, 2)))
    expected = [3] if algo == "swag" else [1, 2]
    assert [r.particles for r in rows] == expected
    assert all(r.mean_epoch_seconds > 0 and np.isfinite(r.final_loss) for r in rows)


def test_single_particle_single_row():
    rows, _ = bench.run_scaling(small_cfg())
    assert len(rows) == 1 and rows[0].epochs_measured == 1


def test_csv_schema_and_slowdown_file(tmp_path):
    out = tmp_path / "timing.csv"
    rows, slow = bench.run_scaling(small_cfg(dims=(4, 8), particles=(1, 2), out=str(out)))
    recs = list(csv.reader(out.open()))
    assert recs[0] == bench.TIMING_COLUMNS
    assert len(recs) == 1 + 4
    assert [int(r[1]) for r in recs[1:]] == [1, 2, 1, 2]
    slow_recs = list(csv.DictReader((tmp_path / "timing_slowdown.csv").open()))
    assert [int(r["particles"]) for r in slow_recs] == [1, 2]
    for r, s in zip(slow_recs, slow):
        assert float(r["D=8/D=4"]) == pytest.approx(s["D=8/D=4"], abs=0.006)


def test_slowdown_table_ratio():
    rows = [bench.TimingRow("svgd", 1, 1, 1, 64, 1.0, 1), bench.TimingRow("svgd", 1, 1, 1, 128, 2.5, 1)]
    assert bench.slowdown_table(rows) == [
        {"particles": 1, "devices": 1, "active_capacity": 1, "D=128/D=64": 2.5}]


@pytest.mark.parametrize("bad", [
    dict(particles=(0,)), dict(particles=()), dict(dims=(-1,)), dict(devices=0),
    dict(active_capacity=0), dict(algorithm="mcmc"), dict(epochs=0),
])
def test_config_errors(bad):
    with pytest.raises(ConfigError):
        small_cfg(**bad).validate()


def test_capacity_does_not_change_results():
    a, _ = bench.run_scaling(small_cfg(particles=(4,), active_capacity=1, epochs=2))
    b, _ = bench.run_scaling(small_cfg(particles=(4,), active_capacity=4, epochs=2))
    c, _ = bench.run_scaling(small_cfg(particles=(4,), active_capacity=1, devices=2, epochs=2))
    assert a[0].final_loss == b[0].final_loss == c[0].final_loss


def test_svgd_timing_grows_with_particles():
    rows, _ = bench.run_scaling(small_cfg(dims=(48,), n_layers=4, particles=(1, 2, 4, 8),
                                          batches=4, batch_size=32, epochs=2, repeats=3))
    t = [r.mean_epoch_seconds for r in rows]
    assert all(b >= 0.95 * a for a, b in zip(t, t[1:])), t


# ---- regression demo


def test_regress_single_particle_has_zero_std():
    for algo in ("svgd", "ensemble", "swag"):
        res = bench.run_regression_demo(algo, 1, seed=0, epochs=2, grid_points=11)
        assert not res.summary.std.any()


def test_regress_csv_reproducible(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    bench.run_regression_demo("svgd", 3, seed=1, out=str(a), epochs=3, grid_points=21)
    bench.run_regression_demo("svgd", 3, seed=1, out=str(b), epochs=3, grid_points=21)
    assert a.read_bytes() == b.read_bytes()
    header = a.read_text().splitlines()[0].split(",")
    assert header == ["x", "mean", "std", "y_0", "y_1", "y_2"]
    assert len(a.read_text().splitlines()) == 22


def test_regress_rejects_bad_args():
    with pytest.raises(ConfigError):
        bench.run_regression_demo("svgd", 0, seed=0)
    with pytest.raises(ConfigError):
        bench.run_regression_demo("nope", 2, seed=0)


def test_demo_data_leaves_gap_empty():
    x = np.concatenate([xb for xb, _ in bench.demo_data(0)])
    assert not np.any((x > bench.GAP[0]) & (x < bench.GAP[1]))
    assert x.min() >= -1 and x.max() <= 1


# ---- CLI


def test_cli_scale_to_stdout(capsys):
    code = cli.main(["scale", "--d", "8", "--layers", "2", "--particles", "1,2", "--epochs", "1",
                     "--batches", "2", "--batch-size", "4"])
    assert code == 0
    out = capsys.readouterr().out
    recs = list(csv.reader(io.StringIO(out.split("\n\n")[0])))
    assert recs[0] == bench.TIMING_COLUMNS and len(recs) == 3


@pytest.mark.parametrize("argv", [
    ["scale", "--particles", "0"],
    ["scale", "--devices", "0"],
    ["scale", "--active", "0"],
    ["regress", "--particles", "0"],
    ["regress", "--devices", "0"],
])
def test_cli_config_errors_exit_2(argv, capsys):
    assert cli.main(argv) == 2
    assert "config error" in capsys.readouterr().err


def test_cli_unparseable_list_exits_2():
    with pytest.raises(SystemExit) as exc:
        cli.main(["scale", "--particles", "a,b"])
    assert exc.value.code == 2


def test_cli_regress_writes_csv(tmp_path):
    out = tmp_path / "demo.csv"
    assert cli.main(["regress", "--algo", "ensemble", "--particles", "2", "--epochs", "2",
                     "--out", str(out)]) == 0
    assert out.read_text().startswith("x,mean,std,y_0,y_1\n")


def test_console_entry_point_runs():
    proc = subprocess.run([sys.executable, "-m", "ppush", "selftest"], capture_output=True,
                          text=True, timeout=300)
    assert proc.returncode == 0, proc.stderr
    assert proc.stdout.count("PASS") == 4
