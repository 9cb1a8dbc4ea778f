"""Per-timestep ReLU networks, Adam and the learning-rate schedule."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad

HIDDEN = 20
PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3")


@dataclass
class MlpParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray

    @property
    def in_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W3.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def on_tape(self, tape: ad.Tape) -> "MlpParams":
        """Same parameters as trainable leaves of ``tape``."""
        return MlpParams(**{k: tape.leaf(v) for k, v in self.arrays().items()})


def init_params(d: int, out_dim: int, rng: np.random.Generator) -> MlpParams:
    """He-normal weights, zero biases."""
    if d < 1 or out_dim < 1:
        raise ValueError(f"dimensions must be positive, got d={d}, out_dim={out_dim}")

    def he(rows, cols):
        return rng.normal(0.0, math.sqrt(2.0 / cols), size=(rows, cols))

    return MlpParams(
        W1=he(HIDDEN, d), b1=np.zeros(HIDDEN),
        W2=he(HIDDEN, HIDDEN), b2=np.zeros(HIDDEN),
        W3=he(out_dim, HIDDEN), b3=np.zeros(out_dim),
    )


def mlp_forward(params: MlpParams, x):
    """W3 relu(W2 relu(W1 x + b1) + b2) + b3, for one point or a batch of rows."""
    width = ad.value(params.W1).shape[1]
    if ad.value(x).shape[-1] != width:
        raise ad.ShapeError(f"network expects inputs of size {width}, got shape {ad.value(x).shape}")
    h = ad.relu(ad.affine(x, params.W1, params.b1))
    h = ad.relu(ad.affine(h, params.W2, params.b2))
    return ad.affine(h, params.W3, params.b3)


@dataclass
class NetworkStack:
    """One network per time step, plus the free initial value of the naive method."""

    nets: list[MlpParams]
    out_dim: int
    y0: float | None = None

    def __len__(self):
        return len(self.nets)

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for n, net in enumerate(self.nets):
            for k, v in net.arrays().items():
                out[f"{n}.{k}"] = v
        if self.y0 is not None:
            out["y0"] = np.array(self.y0)
        return out

    @classmethod
    def from_named(cls, named: dict[str, np.ndarray], n_steps: int, out_dim: int) -> "NetworkStack":
        nets = [MlpParams(**{k: named[f"{n}.{k}"] for k in PARAM_NAMES}) for n in range(n_steps)]
        y0 = float(named["y0"]) if "y0" in named else None
        return cls(nets, out_dim, y0)


def init_stack(n_steps: int, d: int, out_dim: int, rng: np.random.Generator,
               y0: float | None = None) -> NetworkStack:
    return NetworkStack([init_params(d, out_dim, rng) for _ in range(n_steps)], out_dim, y0)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float) -> tuple[dict[str, np.ndarray], AdamState]:
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter block {name!r}")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    new_params, m, v = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name, np.zeros_like(p))
        m[name] = b1 * state.m.get(name, np.zeros_like(p)) + (1 - b1) * g
        v[name] = b2 * state.v.get(name, np.zeros_like(p)) + (1 - b2) * g * g
        m_hat = m[name] / (1 - b1 ** t)
        v_hat = v[name] / (1 - b2 ** t)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_params, AdamState(m, v, t, b1, b2, state.eps)


def lr_schedule(epoch: int, base: float = 0.1, hold: int = 3, decay: float = 0.5) -> float:
    """``base`` for the first ``hold`` epochs, then multiplied by exp(-decay) per epoch."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return base * math.exp(-decay * max(0, epoch - (hold - 1)))


# Checkpoint layout (JSON): {"format": "deepfbsde-checkpoint/1", "meta": {...},
# "params": {"<step>.<W1|b1|W2|b2|W3|b3>": nested lists, ..., "y0": float?}}.
# Blocks are written in step order, and within a step in PARAM_NAMES order.
CHECKPOINT_FORMAT = "deepfbsde-checkpoint/1"


def save_checkpoint(path: str | Path, stack: NetworkStack, meta: dict) -> None:
    meta = dict(meta, N=len(stack), out_dim=stack.out_dim, d=stack.nets[0].in_dim)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "meta": meta,
        "params": {k: v.tolist() for k, v in stack.named_arrays().items()},
    }
    Path(path).write_text(json.dumps(payload), encoding="utf-8")


def load_checkpoint(path: str | Path) -> tuple[NetworkStack, dict]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    meta = payload["meta"]
    named = {k: np.asarray(v, dtype=np.float64) for k, v in payload["params"].items()}
    return NetworkStack.from_named(named, meta["N"], meta["out_dim"]), meta
