"""Euler-Maruyama simulation of the coupled discrete system."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .nn import NetworkStack, mlp_forward
from .problems import ProblemSpec


@dataclass(frozen=True)
class TimeGrid:
    N: int
    T: float

    def __post_init__(self):
        if self.N < 1 or not self.T > 0:
            raise ValueError(f"invalid grid N={self.N}, T={self.T}")

    @property
    def h(self) -> float:
        return self.T / self.N

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.N + 1)


def sample_increments(grid: TimeGrid, M: int, rng: np.random.Generator, k: int = 1) -> np.ndarray:
    """(M, N, k) i.i.d. N(0, h) Wiener increments."""
    if M < 1:
        raise ValueError("need at least one path")
    return rng.standard_normal((M, grid.N, k)) * np.sqrt(grid.h)


@dataclass
class Rollout:
    """Per-path terminal quantities of one simulation; entries may live on a tape."""

    f_sum: object
    stoch_sum: object
    g_terminal: object
    xs: list
    zs: list

    @property
    def ycal0(self):
        # stochastic cost g(X_N) + sum f h - sum <z, sigma dW>
        return self.g_terminal + self.f_sum - self.stoch_sum

    def terminal_y(self, y0):
        """Y_N = y0 - sum f h + sum <z, sigma dW>, for a scalar (or per-path) y0."""
        n = ad.value(self.f_sum).shape[0]
        start = ad.expand(y0, n) if np.ndim(ad.value(y0)) == 0 else y0
        return start - self.f_sum + self.stoch_sum

    def rows(self, start: int, stop: int) -> "Rollout":
        cut = lambda v: ad.rows(v, start, stop)  # noqa: E731
        return Rollout(cut(self.f_sum), cut(self.stoch_sum), cut(self.g_terminal), [], [])


def network_map(stack: NetworkStack) -> Callable:
    return lambda n, x: mlp_forward(stack.nets[n], x)


def rollout(problem: ProblemSpec, zeta: Callable, grid: TimeGrid, dW: np.ndarray,
            keep_paths: bool = False) -> Rollout:
    """Forward sweep X_{n+1} = X_n + b h + sigma dW with Z_n = zeta(n, X_n).

    Works on plain arrays or, when ``zeta`` returns tape variables, records
    everything on that tape.
    """
    M = dW.shape[0]
    if dW.shape != (M, grid.N, problem.k):
        raise ValueError(f"increments have shape {dW.shape}, expected ({M}, {grid.N}, {problem.k})")
    h = grid.h
    times = grid.times
    x = np.tile(problem.x0, (M, 1))
    f_sum = stoch_sum = 0.0
    xs, zs = [x], []
    for n in range(grid.N):
        z = zeta(n, x)
        noise = problem.noise(times[n], x, dW[:, n, :])
        f = problem.running_cost(times[n], x, z) * h
        s = ad.rowdot(z, noise)
        f_sum = f if n == 0 else f_sum + f
        stoch_sum = s if n == 0 else stoch_sum + s
        x = x + problem.drift(times[n], x, z) * h + noise
        if keep_paths:
            xs.append(x)
            zs.append(z)
    return Rollout(f_sum, stoch_sum, problem.terminal_cost(x), xs if keep_paths else [], zs)


@dataclass
class PathBatch:
    dW: np.ndarray         # (M, N, k)
    X: np.ndarray          # (M, N+1, d)
    Z: np.ndarray          # (M, N, d)
    f_sum: np.ndarray      # (M,)
    stoch_sum: np.ndarray  # (M,)
    ycal0: np.ndarray      # (M,)
    g_terminal: np.ndarray  # (M,)
    Y: np.ndarray | None = None  # (M, N+1) once reconstructed
    f_steps: np.ndarray | None = None      # (M, N) running cost times h
    stoch_steps: np.ndarray | None = None  # (M, N) <z, sigma dW>

    @property
    def M(self) -> int:
        return self.X.shape[0]


def simulate_forward(problem: ProblemSpec, zeta, grid: TimeGrid, dW: np.ndarray) -> PathBatch:
    """Numeric rollout that keeps full paths.

    ``zeta`` is a :class:`NetworkStack` or a callable ``(n, x) -> z``.
    """
    if isinstance(zeta, NetworkStack):
        zeta = network_map(zeta)
    M = dW.shape[0]
    if dW.shape != (M, grid.N, problem.k):
        raise ValueError(f"increments have shape {dW.shape}, expected ({M}, {grid.N}, {problem.k})")
    h, times = grid.h, grid.times
    X = np.empty((M, grid.N + 1, problem.d))
    Z = np.empty((M, grid.N, problem.d))
    f_steps = np.empty((M, grid.N))
    s_steps = np.empty((M, grid.N))
    X[:, 0] = problem.x0
    for n in range(grid.N):
        x = X[:, n]
        z = np.asarray(zeta(n, x))
        noise = problem.noise(times[n], x, dW[:, n, :])
        Z[:, n] = z
        f_steps[:, n] = problem.running_cost(times[n], x, z) * h
        s_steps[:, n] = np.einsum("mi,mi->m", z, noise)
        X[:, n + 1] = x + problem.drift(times[n], x, z) * h + noise
        bad = ~np.all(np.isfinite(X[:, n + 1]), axis=1)
        if bad.any():
            raise FloatingPointError(f"non-finite state on path {int(np.argmax(bad))} at step {n + 1}")
    f_sum = f_steps.sum(axis=1)
    stoch_sum = s_steps.sum(axis=1)
    g = problem.terminal_cost(X[:, -1])
    return PathBatch(dW, X, Z, f_sum, stoch_sum, g + f_sum - stoch_sum, g,
                     f_steps=f_steps, stoch_steps=s_steps)


EVAL_CHUNK = 2**14


def simulate_chunked(problem: ProblemSpec, zeta, grid: TimeGrid, dW: np.ndarray, workers: int = 1,
                     chunk: int = EVAL_CHUNK) -> PathBatch:
    """simulate_forward over fixed path chunks, optionally on a thread pool.

    The chunk boundaries do not depend on ``workers``, so neither does any bit
    of the result.
    """
    if workers < 1:
        raise ValueError("workers must be at least 1")
    if isinstance(zeta, NetworkStack):
        zeta = network_map(zeta)
    starts = range(0, dW.shape[0], chunk)
    run = lambda lo: simulate_forward(problem, zeta, grid, dW[lo:lo + chunk])  # noqa: E731
    if workers == 1 or len(starts) == 1:
        parts = [run(lo) for lo in starts]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, starts))
    if len(parts) == 1:
        return parts[0]
    cat = lambda name: np.concatenate([getattr(b, name) for b in parts])  # noqa: E731
    return PathBatch(dW, cat("X"), cat("Z"), cat("f_sum"), cat("stoch_sum"), cat("ycal0"),
                     cat("g_terminal"), f_steps=cat("f_steps"), stoch_steps=cat("stoch_steps"))


def reconstruct_y(batch: PathBatch, y0: float) -> np.ndarray:
    """Y_{n+1} = Y_n - f h + <z, sigma dW> started from ``y0`` on every path."""
    M, N = batch.f_steps.shape
    Y = np.empty((M, N + 1))
    Y[:, 0] = y0
    Y[:, 1:] = y0 + np.cumsum(batch.stoch_steps - batch.f_steps, axis=1)
    batch.Y = Y
    return Y


def hat_interpolate(values, grid: TimeGrid) -> Callable[[float], np.ndarray]:
    """Right-continuous piecewise-constant extension of grid values to [0, T]."""
    values = np.asarray(values)
    if values.shape[0] != grid.N + 1:
        raise ValueError(f"need {grid.N + 1} grid values, got {values.shape[0]}")

    def hat(t):
        t = np.asarray(t, dtype=np.float64)
        if np.any((t < 0) | (t > grid.T + 1e-12)):
            raise ValueError("time outside [0, T]")
        n = np.minimum(np.floor(t / grid.h + 1e-9).astype(int), grid.N)
        return values[n]

    return hat


def check_restrict(fn: Callable[[float], np.ndarray], grid: TimeGrid) -> np.ndarray:
    """Sample a function of time at the grid nodes."""
    return np.stack([np.asarray(fn(t)) for t in grid.times])
