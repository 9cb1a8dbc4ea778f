"""Semi-analytic references for linear-quadratic problems.

With the ansatz V(t, x) = x^T P x + x^T Q + R, the HJB equation for the drift
A(C - x) + B u, running cost <Rx x, x> + <Ru u, u> and terminal cost
<G x, x> reduces, with S = B Ru^-1 B^T, to

    P' = P A + A^T P + P S P - Rx,          P(T) = G,
    Q' = A^T Q + P S Q - 2 P A C,           Q(T) = 0,
    R' = -tr(Sigma Sigma^T P) - Q^T A C + Q^T S Q / 4,   R(T) = 0,

obtained by matching the quadratic, linear and constant terms in x after
inserting the minimising control u = -Ru^-1 B^T D_xV / 2. The system is
integrated backwards from T with explicit Euler steps.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .problems import LqSpec, ProblemSpec


@dataclass(frozen=True)
class RiccatiSolution:
    T: float
    P: np.ndarray  # (n+1, d, d)
    Q: np.ndarray  # (n+1, d)
    R: np.ndarray  # (n+1,)

    @property
    def steps(self) -> int:
        return len(self.R) - 1

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.steps + 1)

    def node(self, t: float) -> int:
        if not -1e-12 <= t <= self.T + 1e-12:
            raise ValueError(f"time {t} outside [0, {self.T}]")
        return int(np.clip(np.rint(t / self.T * self.steps), 0, self.steps))


def _lq_of(spec) -> LqSpec:
    if isinstance(spec, ProblemSpec):
        if spec.lq is None:
            raise ValueError(f"problem {spec.name!r} has no semi-analytic reference")
        return spec.lq
    return spec


def solve_riccati(spec: LqSpec | ProblemSpec, steps_fine: int = 80 * 2**8) -> RiccatiSolution:
    lq = _lq_of(spec)
    if steps_fine < 100:
        raise ValueError("steps_fine must be at least 100")
    A, C, Rx = lq.A, lq.C, 0.5 * (lq.Rx + lq.Rx.T)
    S = lq.B @ np.linalg.solve(lq.Ru, lq.B.T)
    SS = lq.Sigma @ lq.Sigma.T
    AC = A @ C
    h = lq.T / steps_fine
    d = A.shape[0]
    P = np.empty((steps_fine + 1, d, d))
    Q = np.empty((steps_fine + 1, d))
    R = np.empty(steps_fine + 1)
    P[-1], Q[-1], R[-1] = 0.5 * (lq.G + lq.G.T), 0.0, 0.0
    for i in range(steps_fine, 0, -1):
        p, q = P[i], Q[i]
        dP = p @ A + A.T @ p + p @ S @ p - Rx
        dQ = A.T @ q + p @ S @ q - 2.0 * p @ AC
        dR = -np.trace(SS @ p) - q @ AC + 0.25 * q @ S @ q
        p_new = p - h * dP
        P[i - 1] = 0.5 * (p_new + p_new.T)
        Q[i - 1] = q - h * dQ
        R[i - 1] = R[i] - h * dR
        if not (np.all(np.isfinite(P[i - 1])) and np.all(np.isfinite(Q[i - 1])) and np.isfinite(R[i - 1])):
            raise FloatingPointError(f"Riccati solution blew up at t={(i - 1) * h:.6g}")
    return RiccatiSolution(lq.T, P, Q, R)


def value_and_gradient(ric: RiccatiSolution, t: float, x) -> tuple[float, np.ndarray]:
    i = ric.node(t)
    x = np.asarray(x, dtype=np.float64)
    return float(x @ ric.P[i] @ x + x @ ric.Q[i] + ric.R[i]), 2.0 * ric.P[i] @ x + ric.Q[i]


def reference_yz(ric: RiccatiSolution, times: np.ndarray, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Reference Y and Z (D_xV convention) along paths ``X`` of shape (M, n, d)."""
    idx = [ric.node(t) for t in times]
    P, Q, R = ric.P[idx], ric.Q[idx], ric.R[idx]
    Y = np.einsum("mni,nij,mnj->mn", X, P, X) + np.einsum("mni,ni->mn", X, Q) + R[None, :]
    Z = 2.0 * np.einsum("nij,mnj->mni", P, X) + Q[None]
    return Y, Z


def riccati_map(ric: RiccatiSolution, times: np.ndarray):
    """Markov map (n, x) -> 2 P(t_n) x + Q(t_n) on the coarse grid ``times``."""
    idx = [ric.node(t) for t in times]

    def zeta(n, x):
        i = idx[n]
        return 2.0 * (x @ ric.P[i].T) + ric.Q[i]

    return zeta


def discrete_value(spec: LqSpec | ProblemSpec, N: int) -> float:
    """Optimal cost of the Euler-discretised control problem with N steps.

    Exact dynamic programming for X_{n+1} = X_n + (A(C - X_n) + B u_n) h + Sigma dW_n
    with cost sum_n (<Rx X_n, X_n> + <Ru u_n, u_n>) h + <G X_N, X_N>. When B is
    invertible this is the minimum of the mean stochastic cost over all Markov maps.
    """
    lq = _lq_of(spec)
    h = lq.T / N
    d = lq.A.shape[0]
    F = np.eye(d) - h * lq.A
    c = h * lq.A @ lq.C
    P, Q, R = 0.5 * (lq.G + lq.G.T), np.zeros(d), 0.0
    for _ in range(N):
        M = lq.Ru + h * lq.B.T @ P @ lq.B
        W = lq.B.T @ P @ F
        w0 = lq.B.T @ P @ c + 0.5 * lq.B.T @ Q
        Mi = np.linalg.inv(M)
        P_new = h * lq.Rx + F.T @ P @ F - h * W.T @ Mi @ W
        Q_new = 2.0 * F.T @ P @ c + F.T @ Q - 2.0 * h * W.T @ Mi @ w0
        R = c @ P @ c + c @ Q + R + h * np.trace(lq.Sigma.T @ P @ lq.Sigma) - h * w0 @ Mi @ w0
        P, Q = 0.5 * (P_new + P_new.T), Q_new
    return float(lq.x0 @ P @ lq.x0 + lq.x0 @ Q + R)


def bsde_residual_oracle(spec: ProblemSpec, ric: RiccatiSolution, N: int, M: int, seed: int) -> float:
    """RMS of Y_0 - sum f h + sum <sigma^T Z, dW> - g(X_N) with the reference (Y, Z).

    X is simulated with the reference feedback on an N-step Euler grid. The
    residual tends to 0 with h only when the driver signs and the drift are
    consistent with the Riccati solution.
    """
    rng = np.random.default_rng(seed)
    h = spec.T / N
    times = np.linspace(0.0, spec.T, N + 1)
    zeta = riccati_map(ric, times)
    x = np.tile(spec.x0, (M, 1))
    y = np.full(M, value_and_gradient(ric, 0.0, spec.x0)[0])
    for n in range(N):
        dw = rng.standard_normal((M, spec.k)) * np.sqrt(h)
        z = zeta(n, x)
        noise = spec.noise(times[n], x, dw)
        y = y - spec.running_cost(times[n], x, z) * h + np.einsum("mi,mi->m", z, noise)
        x = x + spec.drift(times[n], x, z) * h + noise
    return float(np.sqrt(np.mean((y - spec.terminal_cost(x)) ** 2)))
