"""
Scaling benchmark and 1-D regression demo.

Timing covers only the training epochs: handle construction, particle
creation and dataset generation happen before the clock starts.
"""

from __future__ import annotations

import csv
import io
import logging
import statistics
import sys
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import infer
from .autodiff import SGD, MlpArch, mse_loss
from .runtime import ParticleNN

log = logging.getLogger(__name__)

ALGORITHMS = ("svgd", "ensemble", "swag")

TIMING_COLUMNS = ["algorithm", "particles", "devices", "active_capacity", "D",
                  "mean_epoch_seconds", "epochs_measured", "epoch_seconds", "final_loss"]


class ConfigError(ValueError):
    pass


def gen_synthetic(D: int, batches: int, batch_size: int, seed: int):
    """Random regression batches: x ~ N(0, 1), y = sin(x_1) + 0.1 * noise."""
    if min(D, batches, batch_size) < 1:
        raise ValueError("sizes must be positive")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((batches * batch_size, D))
    y = np.sin(x[:, :1]) + 0.1 * rng.standard_normal((batches * batch_size, 1))
    return [(x[i * batch_size:(i + 1) * batch_size], y[i * batch_size:(i + 1) * batch_size])
            for i in range(batches)]


def bench_arch(D: int, n_layers: int) -> MlpArch:
    """n_layers D x D layers followed by a D x 1 prediction layer."""
    return MlpArch((D,) * (n_layers + 1) + (1,), "tanh")


@dataclass
class BenchConfig:
    dims: tuple[int, ...] = (64, 128, 256)
    n_layers: int = 10
    particles: tuple[int, ...] = (1, 2, 4, 8, 16)
    devices: int = 1
    active_capacity: int = 1
    epochs: int = 20
    batches: int = 10
    batch_size: int = 128
    algorithm: str = "svgd"
    seed: int = 0
    repeats: int = 1
    out: str | None = None
    # svgd settings used in the scaling runs: bandwidth 1, step 1e-3, uniform prior
    svgd: infer.SvgdConfig = field(default_factory=infer.SvgdConfig)
    lr: float = 1e-3

    def validate(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        counts = {"dims": self.dims, "particles": self.particles}
        for name, values in counts.items():
            if not values or any(v < 1 for v in values):
                raise ConfigError(f"{name} must be a non-empty list of positive integers")
        for name in ("n_layers", "devices", "active_capacity", "epochs", "batches",
                     "batch_size", "repeats"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")


@dataclass
class TimingRow:
    algorithm: str
    particles: int
    devices: int
    active_capacity: int
    D: int
    mean_epoch_seconds: float
    epochs_measured: int
    epoch_seconds: list[float] = field(default_factory=list)
    final_loss: float = float("nan")

    def as_record(self) -> list:
        return [self.algorithm, self.particles, self.devices, self.active_capacity, self.D,
                f"{self.mean_epoch_seconds:.6f}", self.epochs_measured,
                ";".join(f"{t:.6f}" for t in self.epoch_seconds), repr(self.final_loss)]


def _mean_loss(pnn: ParticleNN, pid: int, data) -> float:
    outs = pnn.pjoin([pnn.pforward(pid, x) for x, _ in data])
    return float(np.mean([mse_loss(o, y).item() for o, (_, y) in zip(outs, data)]))


def time_cell(cfg: BenchConfig, D: int, n_particles: int, data) -> tuple[list[float], float]:
    """Run one (D, particle count) cell; returns per-epoch seconds and final loss."""
    arch = bench_arch(D, cfg.n_layers)
    seeds = [cfg.seed + i for i in range(n_particles)]
    with ParticleNN(arch, cfg.devices, cfg.active_capacity) as pnn:
        if cfg.algorithm == "svgd":
            pids = infer.init_svgd_particles(pnn, n_particles, cfg.svgd, seeds)
            run_epoch = lambda: infer.svgd_epoch(pnn, pids, data)
        elif cfg.algorithm == "ensemble":
            pids = [pnn.pinit(SGD(cfg.lr), seed=s) for s in seeds]
            run_epoch = lambda: infer.ensemble_epoch(pnn, pids, data)
        else:
            pids = [pnn.pinit(SGD(cfg.lr), seed=cfg.seed)]
            tracker = infer.SwagTracker(pnn, pids[0])
            run_epoch = lambda: tracker.epoch(data)
        times = []
        for _ in range(cfg.epochs):
            t0 = time.perf_counter()
            run_epoch()
            times.append(time.perf_counter() - t0)
        return times, _mean_loss(pnn, pids[0], data)


def run_scaling(cfg: BenchConfig) -> tuple[list[TimingRow], list[dict]]:
    """Time every (D, particle count) cell; returns timing rows and slowdown rows.

    With ``repeats > 1`` each cell is run that many times and the median of the
    per-repeat mean epoch times is reported.  SWAG always runs one chain (three
    particles), so its particle list collapses to a single row per D.
    """
    cfg.validate()
    counts = (3,) if cfg.algorithm == "swag" else tuple(cfg.particles)
    rows = []
    for D in cfg.dims:
        data = gen_synthetic(D, cfg.batches, cfg.batch_size, cfg.seed)
        for n in counts:
            means, all_times, loss = [], [], float("nan")
            for r in range(cfg.repeats):
                times, loss = time_cell(cfg, D, n, data)
                means.append(statistics.fmean(times))
                all_times.extend(times)
            row = TimingRow(cfg.algorithm, n, cfg.devices, cfg.active_capacity, D,
                            statistics.median(means), cfg.epochs, all_times, loss)
            log.info("%s D=%d particles=%d: %.4f s/epoch", cfg.algorithm, D, n,
                     row.mean_epoch_seconds)
            rows.append(row)
    slow = slowdown_table(rows)
    if cfg.out:
        write_outputs(cfg.out, rows, slow)
    return rows, slow


def slowdown_table(rows: Sequence[TimingRow]) -> list[dict]:
    """Ratio of epoch time between consecutive D values, per particle count."""
    by_key = {(r.particles, r.D): r.mean_epoch_seconds for r in rows}
    dims = sorted({r.D for r in rows})
    out = []
    for n in sorted({r.particles for r in rows}):
        rec = {"particles": n, "devices": rows[0].devices,
               "active_capacity": rows[0].active_capacity}
        for lo, hi in zip(dims[:-1], dims[1:]):
            if (n, lo) in by_key and (n, hi) in by_key:
                rec[f"D={hi}/D={lo}"] = by_key[(n, hi)] / by_key[(n, lo)]
        out.append(rec)
    return out


def timing_csv(rows: Sequence[TimingRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TIMING_COLUMNS)
    for r in rows:
        w.writerow(r.as_record())
    return buf.getvalue()


def slowdown_csv(slow: Sequence[dict]) -> str:
    buf = io.StringIO()
    if not slow:
        return ""
    cols = list(slow[0])
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for rec in slow:
        w.writerow([f"{rec[c]:.2f}" if isinstance(rec[c], float) else rec[c] for c in cols])
    return buf.getvalue()


def write_outputs(out: str, rows, slow) -> None:
    if out == "-":
        sys.stdout.write(timing_csv(rows))
        sys.stdout.write("\n")
        sys.stdout.write(slowdown_csv(slow))
        return
    with open(out, "w", newline="") as fh:
        fh.write(timing_csv(rows))
    stem = out[:-4] if out.endswith(".csv") else out
    with open(stem + "_slowdown.csv", "w", newline="") as fh:
        fh.write(slowdown_csv(slow))


# --------------------------------------------------------------------------
# regression demo


DEMO_ARCH = MlpArch((1, 32, 32, 1), "tanh")
GAP = (-0.2, 0.2)


def demo_data(seed: int, n_train: int = 80, noise: float = 0.05, batch_size: int = 40):
    """y = sin(2 pi x) on [-1, 1] with no training points inside the gap."""
    rng = np.random.default_rng(seed)
    half = n_train // 2
    x = np.concatenate([rng.uniform(-1.0, GAP[0], half), rng.uniform(GAP[1], 1.0, n_train - half)])
    x = rng.permutation(x)[:, None]
    y = np.sin(2 * np.pi * x) + noise * rng.standard_normal(x.shape)
    return [(x[i:i + batch_size], y[i:i + batch_size]) for i in range(0, n_train, batch_size)]


@dataclass
class DemoResult:
    grid: np.ndarray
    summary: infer.PredictiveSummary
    pids: list[int]

    def gap_mask(self) -> np.ndarray:
        g = self.grid[:, 0]
        return (g > GAP[0]) & (g < GAP[1])

    def mean_std_gap(self) -> float:
        return float(self.summary.std[self.gap_mask(), 0].mean())

    def mean_std_support(self) -> float:
        return float(self.summary.std[~self.gap_mask(), 0].mean())


def run_regression_demo(algorithm: str, n_particles: int, seed: int, out: str | None = None,
                        epochs: int | None = None, grid_points: int = 201,
                        devices: int = 1) -> DemoResult:
    """Train on the gapped sine task and summarise predictions on a dense grid."""
    if algorithm not in ALGORITHMS:
        raise ConfigError(f"algorithm must be one of {ALGORITHMS}, got {algorithm!r}")
    if n_particles < 1:
        raise ConfigError("need at least one particle")
    data = demo_data(seed)
    grid = np.linspace(-1.0, 1.0, grid_points)[:, None]
    seeds = [seed * 1000 + i for i in range(n_particles)]
    with ParticleNN(DEMO_ARCH, devices, active_capacity=max(n_particles, 1)) as pnn:
        if algorithm == "svgd":
            cfg = infer.SvgdConfig(bandwidth=1.0, lr=0.05 * n_particles)
            pids = infer.train_svgd(pnn, n_particles, data, epochs or 800, cfg, seeds)
        elif algorithm == "ensemble":
            pids = infer.train_ensemble_centralized(pnn, n_particles, data, epochs or 800,
                                                    0.05, seeds)
        else:
            n_swag = epochs or 500
            post = infer.train_swag(pnn, 1000, n_swag, data, 0.05, seed=seeds[0])
            samples = [post.mean] if n_particles == 1 else [
                infer.swag_sample(post, (seed, s)) for s in range(32)]
            pids = [pnn.pinit(None, params=p) for p in samples]
        summary = infer.ppush_predict(pnn, pids, grid)
    result = DemoResult(grid, summary, pids)
    if out:
        text = demo_csv(result)
        if out == "-":
            sys.stdout.write(text)
        else:
            with open(out, "w", newline="") as fh:
                fh.write(text)
    return result


def demo_csv(result: DemoResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    pids = sorted(result.summary.outputs)
    w.writerow(["x", "mean", "std"] + [f"y_{p}" for p in pids])
    for i, x in enumerate(result.grid[:, 0]):
        w.writerow([repr(float(x)), repr(float(result.summary.mean[i, 0])),
                    repr(float(result.summary.std[i, 0]))]
                   + [repr(float(result.summary.outputs[p].data[i, 0])) for p in pids])
    return buf.getvalue()
