"""Controlled SDEs and the coupled FBSDE they induce.

Every evaluator works on a batch of row vectors: ``x`` has shape (M, d) and
``z`` has shape (M, d). They accept plain arrays or tape variables alike.

Z convention: the Markov maps output ``z = D_xV(t, x)``. The stochastic
integral of the backward equation is then ``<z, sigma(t, x) dW>``, i.e.
``<sigma^T z, dW>``; :meth:`ProblemSpec.sigma_t_z` converts to the
``Z = sigma^T D_xV`` convention when needed.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class LqSpec:
    """dX = (A(C - X) + B u) dt + Sigma dW, cost <Rx X, X> + <Ru u, u>, terminal <G X, X>."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    Sigma: np.ndarray
    Rx: np.ndarray
    Ru: np.ndarray
    G: np.ndarray
    x0: np.ndarray
    T: float


@dataclass(frozen=True)
class NonlinearSpec:
    """dX = (A sin(pi C X) + B u) dt + Sigma (I + X X^T) dW with the LQ costs."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    Sigma: np.ndarray
    Rx: np.ndarray
    Ru: np.ndarray
    G: np.ndarray
    x0: np.ndarray
    T: float


@dataclass(frozen=True)
class ProblemSpec:
    name: str
    d: int
    k: int
    ell: int
    T: float
    x0: np.ndarray
    drift: Callable          # b(t, x, z)
    noise: Callable          # sigma(t, x) @ dW, row-wise
    sigma: Callable          # sigma(t, x) for a single point -> (d, k)
    running_cost: Callable   # f(t, x, z)
    terminal_cost: Callable  # g(x)
    feedback: Callable       # v*(t, x, z)
    control_drift: Callable  # drift with an explicit control u
    control_cost: Callable   # running cost with an explicit control u
    lq: LqSpec | None = None
    reference_y0: float | None = None
    default_lambda: float = 1.0
    extras: dict = field(default_factory=dict)

    def sigma_t_z(self, t: float, x: np.ndarray, z: np.ndarray) -> np.ndarray:
        """Rows sigma(t, x_m)^T z_m (the sigma^T D_xV convention)."""
        x, z = np.atleast_2d(x), np.atleast_2d(z)
        if self.lq is not None:
            return z @ self.lq.Sigma
        nl = self.extras.get("nonlinear")
        if nl is not None:
            # (I + x x^T) Sigma^T z
            sz = z @ nl.Sigma
            return sz + x * np.sum(x * sz, axis=1, keepdims=True)
        return np.stack([self.sigma(t, xm).T @ zm for xm, zm in zip(x, z)])


def _as2d(a, name):
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    if a.ndim != 2:
        raise ValueError(f"{name} must be a matrix")
    return a


def _normalize(cls, spec, matrices):
    vals = {}
    for f in ("A", "B", "C", "Sigma", "Rx", "Ru", "G", "x0"):
        a = getattr(spec, f)
        vals[f] = _as2d(a, f) if f in matrices else np.asarray(a, dtype=np.float64).reshape(-1)
    return cls(**vals, T=float(spec.T))


def _validate(spec, kind: str):
    d = spec.A.shape[0]
    if spec.A.shape != (d, d):
        raise ValueError(f"{kind}: A must be square, got {spec.A.shape}")
    if spec.B.shape[0] != d:
        raise ValueError(f"{kind}: B must have {d} rows, got {spec.B.shape}")
    ell = spec.B.shape[1]
    if spec.Ru.shape != (ell, ell):
        raise ValueError(f"{kind}: Ru must be {ell}x{ell}, got {spec.Ru.shape}")
    for name in ("Rx", "G"):
        if getattr(spec, name).shape != (d, d):
            raise ValueError(f"{kind}: {name} must be {d}x{d}")
    if spec.Sigma.shape[0] != d:
        raise ValueError(f"{kind}: Sigma must have {d} rows")
    if spec.C.shape != (d,) or spec.x0.shape != (d,):
        raise ValueError(f"{kind}: C and x0 must be vectors of length {d}")
    if not spec.T > 0:
        raise ValueError(f"{kind}: horizon T must be positive")
    if np.linalg.matrix_rank(spec.Ru) < ell:
        raise np.linalg.LinAlgError(f"{kind}: Ru is singular")


def _quadratic_pieces(spec):
    ru_inv = np.linalg.inv(spec.Ru)
    S = spec.B @ ru_inv @ spec.B.T                 # B Ru^-1 B^T
    K = ru_inv @ spec.B.T                          # z -> -2 u
    Rx = 0.5 * (spec.Rx + spec.Rx.T)
    G = 0.5 * (spec.G + spec.G.T)
    Ru = 0.5 * (spec.Ru + spec.Ru.T)

    def running_cost(t, x, z):
        return ad.rowdot(x @ Rx, x) + 0.25 * ad.rowdot(z @ S, z)

    def terminal_cost(x):
        return ad.rowdot(x @ G, x)

    def feedback(t, x, z):
        return -0.5 * (z @ K.T)

    def control_cost(t, x, u):
        return ad.rowdot(x @ Rx, x) + ad.rowdot(u @ Ru, u)

    return S, running_cost, terminal_cost, feedback, control_cost


def lq_problem(spec: LqSpec, name: str = "lq", default_lambda: float = 0.0) -> ProblemSpec:
    spec = _normalize(LqSpec, spec, matrices=("A", "B", "Sigma", "Rx", "Ru", "G"))
    _validate(spec, "lq_problem")
    S, running_cost, terminal_cost, feedback, control_cost = _quadratic_pieces(spec)
    A, B, Sig = spec.A, spec.B, spec.Sigma
    AC = A @ spec.C

    def drift(t, x, z):
        # A(C - x) - 1/2 B Ru^-1 B^T z
        return ad.affine(x, -A, AC) - 0.5 * (z @ S)

    def control_drift(t, x, u):
        return ad.affine(x, -A, AC) + u @ B.T

    def noise(t, x, dw):
        return dw @ Sig.T

    def sigma(t, x):
        return Sig

    return ProblemSpec(
        name=name, d=A.shape[0], k=Sig.shape[1], ell=B.shape[1], T=spec.T, x0=spec.x0,
        drift=drift, noise=noise, sigma=sigma, running_cost=running_cost,
        terminal_cost=terminal_cost, feedback=feedback, control_drift=control_drift,
        control_cost=control_cost, lq=spec, default_lambda=default_lambda,
    )


def nonlinear_problem(spec: NonlinearSpec, name: str = "nonlinear", default_lambda: float = 1.0,
                      reference_y0: float | None = None) -> ProblemSpec:
    spec = _normalize(NonlinearSpec, spec, matrices=("A", "B", "C", "Sigma", "Rx", "Ru", "G"))
    d = spec.A.shape[0]
    for name_, m in (("A", spec.A), ("C", spec.C), ("Sigma", spec.Sigma)):
        if m.shape != (d, d):
            raise ValueError(f"nonlinear_problem: {name_} must be {d}x{d}, got {m.shape}")
    _validate(NonlinearSpec(**{**spec.__dict__, "C": np.zeros(d)}), "nonlinear_problem")
    S, running_cost, terminal_cost, feedback, control_cost = _quadratic_pieces(spec)
    A, B, Sig = spec.A, spec.B, spec.Sigma
    piC = np.pi * spec.C

    def drift(t, x, z):
        return ad.sin(x @ piC.T) @ A.T - 0.5 * (z @ S)

    def control_drift(t, x, u):
        return ad.sin(x @ piC.T) @ A.T + u @ B.T

    def noise(t, x, dw):
        # Sigma (I + x x^T) dw = Sigma (dw + x <x, dw>)
        return (dw + ad.scale_rows(x, ad.rowdot(x, dw))) @ Sig.T

    def sigma(t, x):
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        return Sig @ (np.eye(d) + np.outer(x, x))

    return ProblemSpec(
        name=name, d=d, k=d, ell=B.shape[1], T=spec.T, x0=spec.x0,
        drift=drift, noise=noise, sigma=sigma, running_cost=running_cost,
        terminal_cost=terminal_cost, feedback=feedback, control_drift=control_drift,
        control_cost=control_cost, reference_y0=reference_y0, default_lambda=default_lambda,
        extras={"nonlinear": spec},
    )


def _lq1d() -> ProblemSpec:
    one = np.ones((1, 1))
    spec = LqSpec(A=one, B=one, C=np.ones(1), Sigma=0.5 * one, Rx=one, Ru=one, G=one,
                  x0=np.array([0.1]), T=0.5)
    return lq_problem(spec, "lq1d", default_lambda=0.0)


def _lq2d() -> ProblemSpec:
    spec = LqSpec(
        A=np.array([[1.0, 0.0], [0.0, 2.0]]),
        B=np.array([[1.0, 0.5], [-0.5, 1.0]]),
        C=np.array([0.1, 0.2]),
        Sigma=np.array([[0.05, 0.25], [0.05, 0.25]]),
        Rx=np.diag([100.0, 1.0]),
        Ru=np.eye(2),
        G=np.diag([1.0, 100.0]),
        x0=np.array([0.1, 0.1]),
        T=0.5,
    )
    return lq_problem(spec, "lq2d", default_lambda=0.0)


def _lq6d() -> ProblemSpec:
    spec = LqSpec(
        A=np.diag([1.0, 2.0, 3.0, 1.0, 2.0, 3.0]),
        B=np.array([[1, -1], [1, 1], [0.5, 1], [1, -1], [0, -1], [0, 1]], dtype=float),
        C=np.array([-0.2, -0.1, 0.0, 0.0, 0.1, 0.2]),
        Sigma=np.diag([0.05, 0.25, 0.05, 0.25, 0.05, 0.25]),
        Rx=np.diag([25.0, 1.0, 25.0, 1.0, 25.0, 1.0]),
        Ru=np.eye(2),
        G=np.diag([1.0, 25.0, 1.0, 25.0, 1.0, 25.0]),
        x0=np.full(6, 0.1),
        T=0.5,
    )
    return lq_problem(spec, "lq6d", default_lambda=1.0)


def _nl3d() -> ProblemSpec:
    spec = NonlinearSpec(
        A=np.eye(3),
        B=np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]),
        C=np.eye(3),
        Sigma=np.diag([0.1, 0.1, 0.1]),
        Rx=np.diag([5.0, 1.0, 1.0]),
        Ru=np.eye(2),
        G=np.diag([1.0, 5.0, 1.0]),
        x0=np.full(3, 0.1),
        T=0.25,
    )
    # fine-grid reference value quoted alongside the published convergence table
    return nonlinear_problem(spec, "nl3d", default_lambda=1.0, reference_y0=0.2194)


PRESETS: dict[str, Callable[[], ProblemSpec]] = {
    "lq1d": _lq1d,
    "lq2d": _lq2d,
    "lq6d": _lq6d,
    "nl3d": _nl3d,
}


def preset(name: str) -> ProblemSpec:
    try:
        return PRESETS[name]()
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; valid presets: {', '.join(PRESETS)}") from None


def load_problem(path: str | Path) -> ProblemSpec:
    """Custom problem from a JSON file.

    Keys: ``kind`` ("lq" or "nonlinear"), ``name``, ``T``, ``x0``, ``C`` and the
    matrices ``A``, ``B``, ``Sigma``, ``Rx``, ``Ru``, ``G`` given as lists of rows.
    Optional: ``lambda`` (default penalty weight), ``reference_y0``.
    """
    cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    kind = cfg.get("kind", "lq")
    mats = {k: np.asarray(cfg[k], dtype=np.float64) for k in ("A", "B", "C", "Sigma", "Rx", "Ru", "G", "x0")}
    name = cfg.get("name", Path(path).stem)
    if kind == "lq":
        return lq_problem(LqSpec(**mats, T=cfg["T"]), name, default_lambda=cfg.get("lambda", 0.0))
    if kind == "nonlinear":
        return nonlinear_problem(NonlinearSpec(**mats, T=cfg["T"]), name,
                                 default_lambda=cfg.get("lambda", 1.0),
                                 reference_y0=cfg.get("reference_y0"))
    raise ValueError(f"{path}: unknown problem kind {kind!r}")
