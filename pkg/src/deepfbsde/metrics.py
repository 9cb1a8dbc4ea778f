"""Discrete norms, reference errors, convergence orders and percentile bands."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .problems import ProblemSpec
from .riccati import RiccatiSolution, reference_yz, riccati_map
from .rollout import PathBatch, TimeGrid, reconstruct_y

ERROR_KINDS = ("x_err", "y_err", "z_err", "terminal", "y0_err")


def _per_time_rms(values) -> np.ndarray:
    a = np.asarray(values, dtype=np.float64)
    if a.ndim < 2 or a.shape[0] == 0 or a.shape[1] == 0:
        raise ValueError(f"expected a nonempty (M, n[, q]) array, got shape {a.shape}")
    sq = a**2 if a.ndim == 2 else np.sum(a.reshape(a.shape[0], a.shape[1], -1) ** 2, axis=2)
    return np.sqrt(np.mean(sq, axis=0))


def s_norm(values) -> float:
    """max_n (mean_m |A_n(m)|^2)^(1/2) for values of shape (M, N+1[, q])."""
    return float(np.max(_per_time_rms(values)))


def h_norm(values) -> float:
    """(1/N) sum_n (mean_m |A_n(m)|^2)^(1/2) for values of shape (M, N[, q])."""
    return float(np.mean(_per_time_rms(values)))


def terminal_gap(batch: PathBatch) -> float:
    """L2 norm over paths of Y_N - g(X_N); needs a reconstructed Y."""
    if batch.Y is None:
        raise ValueError("terminal_gap needs Y; call reconstruct_y first")
    return float(np.sqrt(np.mean((batch.Y[:, -1] - batch.g_terminal) ** 2)))


def eoc(errors, h_values) -> list[float]:
    """log(e_{i+1}/e_i) / log(h_{i+1}/h_i) for consecutive pairs."""
    e = np.asarray(errors, dtype=np.float64)
    h = np.asarray(h_values, dtype=np.float64)
    if e.shape != h.shape or e.ndim != 1 or len(e) < 2:
        raise ValueError("need two equally long lists with at least two entries")
    if np.any(e <= 0) or np.any(h <= 0):
        raise ValueError(f"errors and step sizes must be positive, got {e.tolist()}")
    return [float(v) for v in np.diff(np.log(e)) / np.diff(np.log(h))]


def percentile_band(values, lo: float = 5, hi: float = 95):
    """Per-time nearest-rank percentiles and mean over paths (axis 0)."""
    a = np.asarray(values, dtype=np.float64)
    M = a.shape[0]
    if M < 20:
        raise ValueError(f"percentile bands need at least 20 paths, got {M}")
    if not 0 < lo < hi <= 100:
        raise ValueError("need 0 < lo < hi <= 100")
    s = np.sort(a, axis=0)

    def rank(p):
        return s[max(1, math.ceil(p / 100 * M)) - 1]

    return rank(lo), np.mean(a, axis=0), rank(hi)


@dataclass
class ErrorRecord:
    N: int
    x_err: float
    y_err: float
    z_err: float
    terminal: float
    y0_err: float
    y0_h: float
    M_eval: int
    seed: int

    def errors(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in ERROR_KINDS}


@dataclass
class EocReport:
    # kind -> rows of (N, error, eoc or None for the last N)
    rows: dict[str, list[tuple[int, float, float | None]]] = field(default_factory=dict)

    def eocs(self, kind: str) -> list[float]:
        return [r[2] for r in self.rows[kind][:-1]]


def eoc_report(Ns, errors: dict[str, list[float]], T: float = 1.0) -> EocReport:
    Ns = list(Ns)
    h = [T / n for n in Ns]
    rep = EocReport()
    for kind, errs in errors.items():
        rates = eoc(errs, h) if len(Ns) > 1 else []
        rep.rows[kind] = [(n, float(e), rates[i] if i < len(rates) else None)
                          for i, (n, e) in enumerate(zip(Ns, errs))]
    return rep


def refine_increments(dW: np.ndarray, h: float, r: int, rng: np.random.Generator) -> np.ndarray:
    """Split each coarse increment into r fine ones drawn from their conditional law.

    Given their sum, r i.i.d. N(0, h/r) draws are the centred draws plus sum/r.
    """
    M, N, k = dW.shape
    if r == 1:
        return dW.copy()
    xi = rng.standard_normal((M, N, r, k)) * np.sqrt(h / r)
    xi += dW[:, :, None, :] / r - xi.mean(axis=2, keepdims=True)
    return xi.reshape(M, N * r, k)


REF_CHUNK = 2**13


def reference_paths(problem: ProblemSpec, ric: RiccatiSolution, grid: TimeGrid, dW: np.ndarray,
                    r: int, seed: int) -> np.ndarray:
    """Optimally controlled state on an r-times finer grid, sampled at the coarse nodes.

    Paths are processed in fixed chunks of REF_CHUNK, each refined from one
    sequential generator, so the result does not depend on memory limits.
    """
    fine = TimeGrid(grid.N * r, grid.T)
    zeta = riccati_map(ric, fine.times)
    rng = np.random.default_rng(seed)
    M = dW.shape[0]
    X = np.empty((M, grid.N + 1, problem.d))
    for lo in range(0, M, REF_CHUNK):
        hi = min(M, lo + REF_CHUNK)
        dWf = refine_increments(dW[lo:hi], grid.h, r, rng)
        x = np.tile(problem.x0, (hi - lo, 1))
        X[lo:hi, 0] = x
        for n in range(fine.N):
            t = fine.times[n]
            x = x + problem.drift(t, x, zeta(n, x)) * fine.h + problem.noise(t, x, dWf[:, n, :])
            if (n + 1) % r == 0:
                X[lo:hi, (n + 1) // r] = x
    return X


def error_vs_reference(batch: PathBatch, problem: ProblemSpec, ric: RiccatiSolution | None,
                       grid: TimeGrid, seed: int = 0, z_convention: str = "dxv",
                       refine: int | None = None) -> ErrorRecord:
    """All five error columns of one evaluated batch.

    Y and Z are compared with the reference value and gradient along the
    approximate paths. X is compared with the optimally controlled state on a
    finer grid driven by the same Brownian path.
    """
    if ric is None:
        raise ValueError(f"problem {problem.name!r} has no semi-analytic reference")
    if z_convention not in ("dxv", "sigma-t"):
        raise ValueError("z_convention must be 'dxv' or 'sigma-t'")
    times = grid.times
    y0_h = float(np.mean(batch.ycal0))
    Y = reconstruct_y(batch, y0_h)
    Y_ref, Z_ref = reference_yz(ric, times, batch.X)
    Z, Z_ref = batch.Z, Z_ref[:, :-1]
    if z_convention == "sigma-t":
        Z = np.stack([problem.sigma_t_z(times[n], batch.X[:, n], Z[:, n]) for n in range(grid.N)], axis=1)
        Z_ref = np.stack([problem.sigma_t_z(times[n], batch.X[:, n], Z_ref[:, n]) for n in range(grid.N)], axis=1)
    r = refine or max(1, math.ceil(160 / grid.N))
    X_ref = reference_paths(problem, ric, grid, batch.dW, r, seed)
    y0 = float(Y_ref[0, 0])
    return ErrorRecord(
        N=grid.N,
        x_err=s_norm(batch.X - X_ref),
        y_err=s_norm(Y - Y_ref),
        z_err=h_norm(Z - Z_ref),
        terminal=terminal_gap(batch),
        y0_err=abs(y0 - y0_h),
        y0_h=y0_h,
        M_eval=batch.M,
        seed=seed,
    )
