"""Command line entry point: ``ppush scale|regress|selftest``."""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from . import bench, infer
from .autodiff import SGD, MlpArch, ParamSet, forward, loss_and_grad
from .runtime import ParticleNN

log = logging.getLogger("ppush")


def _int_list(text: str) -> tuple[int, ...]:
    try:
        values = tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma separated list of integers, got {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ppush", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("scale", help="time-per-epoch scaling benchmark")
    s.add_argument("--d", type=_int_list, default=(64, 128, 256), help="layer widths, e.g. 64,128,256")
    s.add_argument("--layers", type=int, default=10)
    s.add_argument("--particles", type=_int_list, default=(1, 2, 4, 8, 16))
    s.add_argument("--devices", type=int, default=1)
    s.add_argument("--active", type=int, default=1)
    s.add_argument("--epochs", type=int, default=20)
    s.add_argument("--batches", type=int, default=10)
    s.add_argument("--batch-size", type=int, default=128)
    s.add_argument("--repeats", type=int, default=1)
    s.add_argument("--algo", default="svgd", choices=bench.ALGORITHMS)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="-", help="CSV path, or - for stdout")

    r = sub.add_parser("regress", help="1-D regression uncertainty demo")
    r.add_argument("--algo", default="svgd", choices=bench.ALGORITHMS)
    r.add_argument("--particles", type=int, default=8)
    r.add_argument("--devices", type=int, default=1)
    r.add_argument("--epochs", type=int, default=None)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", default="-")

    sub.add_parser("selftest", help="quick end-to-end sanity checks")
    return p


def _selftest() -> bool:
    rng = np.random.default_rng(0)
    results = []

    arch = MlpArch((3, 4, 2), "tanh")
    params = ParamSet.init(arch, 1)
    x, y = rng.standard_normal((5, 3)), rng.standard_normal((5, 2))
    loss_and_grad(arch, params, x, y)
    ad = params.flatten_grad()
    theta = params.flatten()
    fd = np.empty_like(theta)
    for i in range(theta.size):
        hi, lo = theta.copy(), theta.copy()
        hi[i] += 1e-5
        lo[i] -= 1e-5
        f = lambda v: float(np.mean((forward(arch, params.unflatten(v), x, record=False).data - y) ** 2))
        fd[i] = (f(hi) - f(lo)) / 2e-5
    results.append(("gradient matches finite differences",
                    bool(np.all(np.abs(ad - fd) <= 1e-8 + 1e-5 * np.abs(fd)))))

    data = [(x, y)]
    with ParticleNN(arch) as pnn:
        pid = infer.train_svgd(pnn, 1, data, 5, infer.SvgdConfig(lr=0.1), seeds=[7])[0]
        svgd_theta = pnn.pget(pid).flatten()
    direct = ParamSet.init(arch, 7)
    for _ in range(5):
        loss_and_grad(arch, direct, x, y)
        SGD(0.1).step(direct)
    results.append(("single-particle SVGD equals SGD", bool(np.array_equal(svgd_theta, direct.flatten()))))

    record = []
    with ParticleNN(arch, num_devices=2) as pnn:
        post = infer.train_swag(pnn, 1, 3, data * 2, 0.05, record=record)
    snaps = np.stack([s.flatten() for s in record])
    results.append(("SWAG streaming moments equal batch moments",
                    bool(np.allclose(post.mean.flatten(), snaps.mean(0), rtol=1e-10, atol=1e-14))))

    with ParticleNN(arch, num_devices=2, active_capacity=2) as pnn:
        infer.train_svgd(pnn, 8, data, 1, infer.SvgdConfig())
    results.append(("all-to-all gather over 2 loops completes", True))

    for name, ok in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    return all(ok for _, ok in results)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(message)s")
    try:
        if args.command == "scale":
            cfg = bench.BenchConfig(
                dims=args.d, n_layers=args.layers, particles=args.particles,
                devices=args.devices, active_capacity=args.active, epochs=args.epochs,
                batches=args.batches, batch_size=args.batch_size, algorithm=args.algo,
                seed=args.seed, repeats=args.repeats, out=args.out)
            cfg.validate()
            bench.run_scaling(cfg)
        elif args.command == "regress":
            if args.devices < 1:
                raise bench.ConfigError("devices must be positive")
            bench.run_regression_demo(args.algo, args.particles, args.seed, args.out,
                                      epochs=args.epochs, devices=args.devices)
        else:
            return 0 if _selftest() else 1
    except bench.ConfigError as exc:
        print(f"ppush: config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"ppush: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0
