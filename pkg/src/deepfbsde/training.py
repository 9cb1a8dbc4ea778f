"""Loss functions and the epoch/batch training loop."""
from __future__ import annotations

import csv
import logging
import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .nn import AdamState, NetworkStack, adam_step, init_stack, lr_schedule, mlp_forward
from .problems import ProblemSpec
from .rollout import PathBatch, Rollout, TimeGrid, rollout, sample_increments, simulate_chunked

log = logging.getLogger(__name__)

METHODS = ("robust", "naive", "naive-fixed-y0")


@dataclass(frozen=True)
class TrainConfig:
    method: str = "robust"
    lam: float = 0.0
    N: int = 10
    M_train: int = 2**16
    M_batch: int = 2**9
    K_epoch: int = 8
    seed: int = 0
    lr: float = 0.1
    shuffle: bool = True
    variance_y0: str = "batchB"
    y0: float | None = None  # initial (naive) or frozen (naive-fixed-y0) value

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.M_train % (2 * self.M_batch):
            raise ValueError("M_train must be divisible by 2*M_batch")
        if self.variance_y0 not in ("batchA", "batchB"):
            raise ValueError("variance_y0 must be 'batchA' or 'batchB'")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.method == "naive-fixed-y0" and self.y0 is None:
            raise ValueError("naive-fixed-y0 needs a fixed y0")

    @property
    def K_batch(self) -> int:
        return self.M_train // (2 * self.M_batch)


@dataclass
class TrainRecord:
    epoch: int
    batch: int
    loss: float
    cost_term: float
    var_term: float
    lr: float
    wall_time: float


@dataclass
class TrainHistory:
    records: list[TrainRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def append(self, rec: TrainRecord):
        self.records.append(rec)

    def to_csv(self, path, extra: dict | None = None) -> None:
        """Write one row per update; ``extra`` adds constant trailing columns."""
        extra = extra or {}
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "batch", "loss", "cost_term", "var_term", "lr", *extra])
            for r in self.records:
                w.writerow([r.epoch, r.batch, repr(r.loss), repr(r.cost_term), repr(r.var_term), repr(r.lr),
                            *extra.values()])


def _finite(x, what):
    if not np.all(np.isfinite(ad.value(x))):
        raise FloatingPointError(f"non-finite {what}")


def robust_loss(batch_a: Rollout, batch_b: Rollout, lam: float, variance_y0: str = "batchB"):
    """Mean stochastic cost on A plus lam times the mean squared terminal gap on B.

    Returns ``(loss, cost_term, var_term)``. Batch B's Y_0 is its own mean
    stochastic cost (or batch A's with ``variance_y0="batchA"``); gradients
    flow through that mean.
    """
    cost = ad.mean(batch_a.ycal0)
    y0 = ad.mean(batch_b.ycal0) if variance_y0 == "batchB" else cost
    gap = batch_b.g_terminal - batch_b.terminal_y(y0)
    var = ad.mean(ad.square(gap))
    _finite(cost, "cost term")
    _finite(var, "variance term")
    loss = cost if lam == 0 else cost + lam * var
    return loss, cost, var


def naive_loss(batch: Rollout, y0):
    """Mean squared terminal gap |Y_N - g(X_N)|^2 with Y started at ``y0``."""
    loss = ad.mean(ad.square(batch.terminal_y(y0) - batch.g_terminal))
    _finite(loss, "naive loss")
    return loss


def naive_loss_cost_form(batch: Rollout, y0):
    """The same loss written as mean |stochastic cost - y0|^2."""
    n = ad.value(batch.f_sum).shape[0]
    return ad.mean(ad.square(batch.ycal0 - ad.expand(y0, n)))


def _streams(seed: int):
    init, pool, shuffle, evaluation = np.random.SeedSequence(seed).spawn(4)
    return (np.random.default_rng(init), np.random.default_rng(pool),
            np.random.default_rng(shuffle), np.random.default_rng(evaluation))


def _update_loss(problem, stack, config, grid, dW):
    tape = ad.Tape()
    nets = [net.on_tape(tape) for net in stack.nets]
    leaves = {f"{n}.{k}": v for n, net in enumerate(nets) for k, v in net.arrays().items()}
    batch = rollout(problem, lambda n, x: mlp_forward(nets[n], x), grid, dW)
    if config.method == "robust":
        M = config.M_batch
        loss, cost, var = robust_loss(batch.rows(0, M), batch.rows(M, 2 * M), config.lam, config.variance_y0)
    else:
        if config.method == "naive":
            y0 = tape.leaf(stack.y0)
            leaves["y0"] = y0
        else:
            y0 = config.y0
        loss = naive_loss(batch, y0)
        cost, var = ad.mean(batch.ycal0), loss
    adj = tape.backward(loss)
    grads = {k: adj.get(v.index, np.zeros(v.shape)) for k, v in leaves.items()}
    return float(loss.value), float(ad.value(cost)), float(ad.value(var)), grads


def train(config: TrainConfig, problem: ProblemSpec, *, draw_log: list | None = None):
    """Run K_epoch epochs of K_batch Adam updates; returns ``(stack, history)``.

    The M_train training increments are drawn once; every update consumes
    2*M_batch of them not yet used in the current epoch. ``draw_log``, if
    given, receives the pool indices used by each update.
    """
    if config.lam == 0 and config.method == "robust" and problem.ell < problem.d:
        warnings.warn("lambda=0 with a non-invertible feedback map: the Markov map is not unique",
                      stacklevel=2)
    grid = TimeGrid(config.N, problem.T)
    init_rng, pool_rng, shuffle_rng, _ = _streams(config.seed)
    y0 = None
    if config.method == "naive":
        y0 = 0.0 if config.y0 is None else float(config.y0)
    stack = init_stack(config.N, problem.d, problem.d, init_rng, y0=y0)
    history = TrainHistory()
    if config.K_epoch == 0:
        return stack, history
    pool = sample_increments(grid, config.M_train, pool_rng, problem.k)
    params = stack.named_arrays()
    state = AdamState()
    per_update = 2 * config.M_batch
    start = time.perf_counter()
    for epoch in range(config.K_epoch):
        order = shuffle_rng.permutation(config.M_train) if config.shuffle else np.arange(config.M_train)
        lr = lr_schedule(epoch, base=config.lr)
        for b in range(config.K_batch):
            idx = order[b * per_update:(b + 1) * per_update]
            if draw_log is not None:
                draw_log.append((epoch, idx.copy()))
            stack = NetworkStack.from_named(params, config.N, problem.d)
            loss, cost, var, grads = _update_loss(problem, stack, config, grid, pool[idx])
            params, state = adam_step(params, grads, state, lr)
            history.append(TrainRecord(epoch, b, loss, cost, var, lr, time.perf_counter() - start))
        log.info("epoch %d lr %.4g loss %.6g cost %.6g var %.6g", epoch, lr, loss, cost, var)
    return NetworkStack.from_named(params, config.N, problem.d), history


def evaluation_increments(grid: TimeGrid, M_eval: int, seed: int, k: int) -> np.ndarray:
    """Fresh evaluation increments from the evaluation stream of ``seed``."""
    return sample_increments(grid, M_eval, _streams(seed)[3], k)


def evaluate(stack: NetworkStack, problem: ProblemSpec, grid: TimeGrid, M_eval: int, seed: int,
             workers: int = 1) -> PathBatch:
    dW = evaluation_increments(grid, M_eval, seed, problem.k)
    return simulate_chunked(problem, stack, grid, dW, workers=workers)


def estimate_y0(stack: NetworkStack, problem: ProblemSpec, grid: TimeGrid, M_eval: int,
                seed: int, workers: int = 1) -> tuple[float, float]:
    """Sample mean and standard error of the stochastic cost on fresh paths."""
    ycal0 = evaluate(stack, problem, grid, M_eval, seed, workers).ycal0
    return float(np.mean(ycal0)), float(np.std(ycal0, ddof=1) / np.sqrt(M_eval))


@dataclass
class LandscapePoint:
    y0: float
    mse: float
    cost: float


def landscape(problem: ProblemSpec, grid: TimeGrid, y0_grid: Sequence[float], config: TrainConfig,
              M_eval: int = 2**15, workers: int = 1) -> list[LandscapePoint]:
    """Train the Markov maps with y0 frozen at each grid value; report MSE(y0) and cost.

    Every grid point starts from the same initialisation and is evaluated on
    the same increments.
    """
    dW = evaluation_increments(grid, M_eval, config.seed, problem.k)
    out = []
    for y0 in y0_grid:
        cfg = replace(config, method="naive-fixed-y0", y0=float(y0), N=grid.N)
        stack, _ = train(cfg, problem)
        ycal0 = simulate_chunked(problem, stack, grid, dW, workers=workers).ycal0
        out.append(LandscapePoint(float(y0), float(np.mean((ycal0 - y0) ** 2)), float(np.mean(ycal0))))
        log.info("landscape y0=%.4f mse=%.6g cost=%.6g", y0, out[-1].mse, out[-1].cost)
    return out
