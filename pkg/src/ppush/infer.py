"""
Deep ensembles, diagonal SWAG and SVGD written against the particle runtime.

Dataloaders are plain re-iterable sequences of ``(x, y)`` numpy batches.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .autodiff import (
    SGD,
    ParamSet,
    PriorSpec,
    Tensor,
    prior_logdensity_grad_flat,
    sq_exp_kernel,
    sq_exp_kernel_grad_arg1,
)
from .runtime import ParticleContext, ParticleNN

Batches = Iterable[tuple[np.ndarray, np.ndarray]]


def _seeds(n: int, seeds: Sequence[int] | None) -> list[int]:
    if n < 1:
        raise ValueError("need at least one particle")
    if seeds is None:
        return list(range(n))
    if len(seeds) != n:
        raise ValueError(f"expected {n} seeds, got {len(seeds)}")
    return list(seeds)


# --------------------------------------------------------------------------
# deep ensembles


def train_ensemble_centralized(pnn: ParticleNN, n_particles: int, dataloader: Batches,
                               epochs: int, lr: float, seeds: Sequence[int] | None = None,
                               loss="mse") -> list[int]:
    """Coordinator steps every particle on each batch, then joins before the next batch."""
    pids = [pnn.pinit(SGD(lr), seed=s) for s in _seeds(n_particles, seeds)]
    for _ in range(epochs):
        ensemble_epoch(pnn, pids, dataloader, loss)
    return pids


def ensemble_epoch(pnn: ParticleNN, pids: Sequence[int], dataloader: Batches, loss="mse") -> list[float]:
    losses = []
    for x, y in dataloader:
        losses.append(pnn.pjoin([pnn.pstep(p, loss, x, y) for p in pids]))
    return losses


def _ensemble_main(ctx: ParticleContext, state: dict) -> None:
    start = time.perf_counter()
    loader, loss = state["dataloader"], state["loss"]
    for _ in range(state["epochs"]):
        for x, y in loader:
            ctx.step(loss, x, y)
    state["span"] = (start, time.perf_counter())


def train_ensemble_distributed(pnn: ParticleNN, n_particles: int,
                               dataloader_factory: Callable[[], Batches], epochs: int,
                               lr: float, seeds: Sequence[int] | None = None,
                               loss="mse", trace: list | None = None) -> list[int]:
    """Each particle trains itself inside an ENSEMBLE_MAIN hook; one final join.

    If ``trace`` is given, each hook's (start, end) perf_counter span is appended.
    """
    pids = [pnn.pinit(SGD(lr), seed=s) for s in _seeds(n_particles, seeds)]
    states = []
    for p in pids:
        state = {"dataloader": dataloader_factory(), "loss": loss, "epochs": epochs}
        pnn.phook_register(p, "ENSEMBLE_MAIN", _ensemble_main, state)
        states.append(state)
    pnn.pjoin([pnn.psend(p, "ENSEMBLE_MAIN") for p in pids])
    if trace is not None:
        trace.extend(s["span"] for s in states)
    return pids


# --------------------------------------------------------------------------
# SWAG


@dataclass
class SwagPosterior:
    mean: ParamSet
    mom2: ParamSet
    n: int

    def variance(self) -> np.ndarray:
        m = self.mean.flatten()
        return np.maximum(self.mom2.flatten() - m * m, 0.0)

    def raw_variance(self) -> np.ndarray:
        m = self.mean.flatten()
        return self.mom2.flatten() - m * m


def _swag_moment(power: int):
    def hook(ctx: ParticleContext, state: dict) -> None:
        src = state["source"]
        theta = ctx.join([ctx.get(src)])[src]
        n = state["n"]
        for acc, p in zip(ctx.module_params().tensors(), theta.tensors()):
            v = p.data if power == 1 else p.data ** 2
            acc.data[...] = (acc.data * n + v) / (n + 1)
        state["n"] = n + 1
    hook.__name__ = f"swag_moment_{power}"
    return hook


swag_first_moment = _swag_moment(1)
swag_second_moment = _swag_moment(2)


class SwagTracker:
    """Parameter particle plus two moment particles fed by SWAG_*_MOMENT hooks.

    The moment particles start from the parameter particle's current values
    with n=1.
    """

    def __init__(self, pnn: ParticleNN, param_pid: int):
        self.pnn = pnn
        self.param_pid = param_pid
        start = pnn.pget(param_pid).copy(with_grad=False)
        self.start = start
        self.mom1_state = {"n": 1, "source": param_pid}
        self.mom1_pid = pnn.pinit(None, params=start)
        pnn.phook_register(self.mom1_pid, "SWAG_1st_MOMENT", swag_first_moment, self.mom1_state)
        self.mom2_state = {"n": 1, "source": param_pid}
        self.mom2_pid = pnn.pinit(None, params=start.unflatten(start.flatten() ** 2))
        pnn.phook_register(self.mom2_pid, "SWAG_2nd_MOMENT", swag_second_moment, self.mom2_state)

    def epoch(self, dataloader: Batches, loss="mse", record: list | None = None) -> list[float]:
        pnn, losses = self.pnn, []
        for x, y in dataloader:
            losses.append(pnn.pstep(self.param_pid, loss, x, y, sync=True))
            if record is not None:
                record.append(pnn.pget(self.param_pid).copy(with_grad=False))
            e1 = pnn.psend(self.mom1_pid, "SWAG_1st_MOMENT")
            e2 = pnn.psend(self.mom2_pid, "SWAG_2nd_MOMENT")
            pnn.pjoin([e1, e2])
        return losses

    def posterior(self) -> SwagPosterior:
        mean = self.pnn.pget(self.mom1_pid).copy(with_grad=False)
        mom2 = self.pnn.pget(self.mom2_pid).copy(with_grad=False)
        return SwagPosterior(mean, mom2, self.mom1_state["n"])


def train_swag(pnn: ParticleNN, pretrain_epochs: int, swag_epochs: int, dataloader: Batches,
               lr: float, seed: int = 0, loss="mse",
               record: list | None = None) -> SwagPosterior:
    """Pretrain one parameter particle, then track streaming moments in two more.

    If ``record`` is given it receives every parameter snapshot folded into the
    moments, the pretraining endpoint first.
    """
    param_pid = pnn.pinit(SGD(lr), seed=seed)
    for _ in range(pretrain_epochs):
        for x, y in dataloader:
            pnn.pstep(param_pid, loss, x, y, sync=True)
    tracker = SwagTracker(pnn, param_pid)
    if record is not None:
        record.append(tracker.start.copy(with_grad=False))
    for _ in range(swag_epochs):
        tracker.epoch(dataloader, loss, record)
    return tracker.posterior()


def swag_sample(posterior: SwagPosterior, rng_seed) -> ParamSet:
    """Draw from the diagonal Gaussian N(mean, max(mom2 - mean^2, 0))."""
    rng = np.random.default_rng(rng_seed)
    m = posterior.mean.flatten()
    z = rng.standard_normal(m.size)
    return posterior.mean.unflatten(m + np.sqrt(posterior.variance()) * z)


# --------------------------------------------------------------------------
# SVGD


@dataclass(frozen=True)
class SvgdConfig:
    bandwidth: float = 1.0
    lr: float = 1e-3
    prior: PriorSpec = PriorSpec()
    # 1/n on the kernel-gradient term only; likelihood term weighted by k alone,
    # prior term added unweighted for every j
    average_kernel_grad_only: bool = False

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")
        if not self.lr > 0:
            raise ValueError("step size must be positive")


def svgd_direction_from(theta_i: np.ndarray, others: dict[int, ParamSet],
                        cfg: SvgdConfig) -> np.ndarray:
    """Stein direction for one particle given every particle's params and loss grads.

    ``others`` must contain all particles (including the one being updated),
    each with populated ``grad`` buffers holding the loss gradient.
    Terms are accumulated in ascending pid order.
    """
    n = len(others)
    l = cfg.bandwidth
    acc = np.zeros_like(theta_i)
    for j in sorted(others):
        theta_j = others[j].flatten()
        loglik_grad = -others[j].flatten_grad()
        k = sq_exp_kernel(theta_j, theta_i, l)
        grad_k = sq_exp_kernel_grad_arg1(theta_j, theta_i, l)
        prior_grad = prior_logdensity_grad_flat(cfg.prior, theta_j)
        if cfg.average_kernel_grad_only:
            acc += k * loglik_grad
            acc += prior_grad
            acc += grad_k / n
        else:
            acc += k * (loglik_grad + prior_grad)
            acc += grad_k
    return acc if cfg.average_kernel_grad_only else acc / n


def svgd_direction(ctx: ParticleContext, cfg: SvgdConfig) -> np.ndarray:
    """Gather every particle's (params, grads) and compute this particle's direction."""
    others = [p for p in ctx.particles() if p != ctx.pid]
    snaps = ctx.join([ctx.get(p) for p in others])
    own = ctx.module_params()
    snaps[ctx.pid] = own
    return svgd_direction_from(own.flatten(), snaps, cfg)


def svgd_update(ctx: ParticleContext, cfg: SvgdConfig) -> None:
    """Gather, compute the direction and move this particle immediately."""
    phi = svgd_direction(ctx, cfg)
    own = ctx.module_params()
    own.assign_flat(own.flatten() + cfg.lr * phi)


def _svgd_gather_hook(ctx: ParticleContext, state: dict) -> None:
    state["pending"] = svgd_direction(ctx, state["cfg"])


def _svgd_apply_hook(ctx: ParticleContext, state: dict) -> None:
    own = ctx.module_params()
    phi = state["update"].pop("pending")
    own.assign_flat(own.flatten() + state["cfg"].lr * phi)


def svgd_update_hook(ctx: ParticleContext, state: dict) -> None:
    """Hook form of `svgd_update`; reads the config from ``state['cfg']``."""
    svgd_update(ctx, state["cfg"])


def init_svgd_particles(pnn: ParticleNN, n_particles: int, cfg: SvgdConfig,
                        seeds: Sequence[int] | None = None) -> list[int]:
    """Optimizer-free particles with SVGD_UPDATE and SVGD_APPLY hooks registered."""
    pids = [pnn.pinit(None, seed=s) for s in _seeds(n_particles, seeds)]
    for p in pids:
        update_state = {"cfg": cfg}
        pnn.phook_register(p, "SVGD_UPDATE", _svgd_gather_hook, update_state)
        pnn.phook_register(p, "SVGD_APPLY", _svgd_apply_hook, {"cfg": cfg, "update": update_state})
    return pids


def svgd_epoch(pnn: ParticleNN, pids: Sequence[int], dataloader: Batches, loss="mse") -> list[float]:
    """Per batch: gradient-only steps on all particles, join, all-to-all update.

    The update runs in two joined rounds (gather+direction, then apply) so
    every particle sees the same pre-update parameters regardless of how
    particles are spread over loops.  Returns the first particle's loss per batch.
    """
    losses = []
    for x, y in dataloader:
        losses.append(pnn.pjoin([pnn.pstep(p, loss, x, y, grad_only=True) for p in pids])[0])
        pnn.pjoin([pnn.psend(p, "SVGD_UPDATE") for p in pids])
        pnn.pjoin([pnn.psend(p, "SVGD_APPLY") for p in pids])
    return losses


def train_svgd(pnn: ParticleNN, n_particles: int, dataloader: Batches, epochs: int,
               cfg: SvgdConfig, seeds: Sequence[int] | None = None, loss="mse") -> list[int]:
    pids = init_svgd_particles(pnn, n_particles, cfg, seeds)
    for _ in range(epochs):
        svgd_epoch(pnn, pids, dataloader, loss)
    return pids


# --------------------------------------------------------------------------
# predictive pushforward


@dataclass
class PredictiveSummary:
    outputs: dict[int, Tensor]
    mean: np.ndarray
    std: np.ndarray


def ppush_predict(pnn: ParticleNN, pids: Sequence[int], x) -> PredictiveSummary:
    """Forward every particle (asynchronously) and summarise elementwise."""
    pids = list(pids)
    if not pids:
        raise ValueError("need at least one particle")
    outs = pnn.pjoin([pnn.pforward(p, x) for p in pids])
    outputs = dict(zip(pids, outs))
    # fixed pid order so the statistics do not depend on argument order
    stack = np.stack([outputs[p].data for p in sorted(outputs)])
    return PredictiveSummary(outputs, stack.mean(axis=0), stack.std(axis=0))
