"""Experiment runner: train | converge | landscape | reference | bands.

Settings come from defaults, then an optional JSON config file, then
command-line flags (flags win). Every artifact carries the config hash, the
seed and ``git describe`` of the source tree.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import subprocess
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import metrics
from .nn import load_checkpoint, save_checkpoint
from .problems import PRESETS, ProblemSpec, load_problem, preset
from .riccati import reference_yz, solve_riccati, value_and_gradient
from .rollout import TimeGrid, reconstruct_y
from .training import METHODS, TrainConfig, evaluate, landscape, train

log = logging.getLogger("deepfbsde")

COMMANDS = ("train", "converge", "landscape", "reference", "bands")
DESK_SCALE = {"M_train": 2**16, "M_batch": 2**9, "K_epoch": 8, "M_eval": 2**17}
PAPER_SCALE = {"M_train": 2**20, "M_batch": 2**9, "K_epoch": 15, "M_eval": 2**20}
LANDSCAPE_EPOCHS = 5
# settings that never change results and so stay out of the config hash
_UNHASHED = ("out", "workers")


class RunAborted(RuntimeError):
    pass


@dataclass
class RunConfig:
    command: str = "train"
    preset: str | None = "lq2d"
    problem_file: str | None = None
    N: list[int] = field(default_factory=lambda: [10])
    lam: float | None = None  # None: the problem's default
    method: str = "robust"
    M_train: int = DESK_SCALE["M_train"]
    M_batch: int = DESK_SCALE["M_batch"]
    K_epoch: int = DESK_SCALE["K_epoch"]
    M_eval: int = DESK_SCALE["M_eval"]
    seed: int = 0
    lr: float = 0.1
    shuffle: bool = True
    variance_y0: str = "batchB"
    z_convention: str = "dxv"
    y0_grid: list[float] | None = None
    checkpoint: str | None = None
    steps_fine: int = 80 * 2**8
    reference_stride: int = 16
    paper_scale: bool = False
    out: str = "runs"
    workers: int = 1

    def __post_init__(self):
        if isinstance(self.N, int):
            self.N = [self.N]
        self.N = [int(n) for n in self.N]
        if self.command not in COMMANDS:
            raise ValueError(f"unknown command {self.command!r}; expected one of {COMMANDS}")
        if not self.N or min(self.N) < 1:
            raise ValueError("N must be a positive integer")
        if self.command == "converge" and any(b <= a for a, b in zip(self.N, self.N[1:])):
            raise ValueError(f"converge needs a strictly increasing N-list, got {self.N}")
        if self.command in ("train", "landscape") and len(self.N) != 1:
            raise ValueError(f"{self.command} takes a single N, got {self.N}")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.z_convention not in ("dxv", "sigma-t"):
            raise ValueError("z_convention must be 'dxv' or 'sigma-t'")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")
        if self.preset is None and self.problem_file is None:
            raise ValueError("need a preset or a problem file")

    @classmethod
    def build(cls, command: str, file_values: dict | None = None, overrides: dict | None = None) -> "RunConfig":
        """Merge config-file values and flag overrides (flags win) over the defaults."""
        given = {**(file_values or {}), **(overrides or {})}
        unknown = set(given) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        given["command"] = command
        if given.get("paper_scale"):
            given = {**PAPER_SCALE, **given}
        elif command == "landscape" and "K_epoch" not in given:
            given["K_epoch"] = LANDSCAPE_EPOCHS
        return cls(**given)

    def to_dict(self) -> dict:
        return asdict(self)

    def settings(self) -> dict:
        """Everything that can influence a result (no output path, no worker count)."""
        return {k: v for k, v in self.to_dict().items() if k not in _UNHASHED}

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.settings(), sort_keys=True).encode()).hexdigest()[:16]

    def problem(self) -> ProblemSpec:
        return load_problem(self.problem_file) if self.problem_file else preset(self.preset)

    def train_config(self, problem: ProblemSpec, N: int, **kw) -> TrainConfig:
        return TrainConfig(
            method=kw.pop("method", self.method),
            lam=problem.default_lambda if self.lam is None else self.lam,
            N=N, M_train=self.M_train, M_batch=self.M_batch, K_epoch=self.K_epoch,
            seed=self.seed, lr=self.lr, shuffle=self.shuffle, variance_y0=self.variance_y0, **kw,
        )


def git_describe() -> str:
    try:
        res = subprocess.run(["git", "describe", "--always", "--tags"], cwd=Path(__file__).resolve().parent,
                             capture_output=True, text=True, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return res.stdout.strip() if res.returncode == 0 and res.stdout.strip() else "unknown"


def provenance(cfg: RunConfig) -> dict:
    return {"config_hash": cfg.config_hash(), "seed": cfg.seed, "git": git_describe()}


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_csv(path: Path, header, rows, prov: dict) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*header, *prov])
        for row in rows:
            w.writerow([_cell(v) for v in row] + list(prov.values()))


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def write_json(path: Path, obj: dict) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def reference_value(problem: ProblemSpec, steps_fine: int = 80 * 2**8) -> float | None:
    if problem.lq is not None:
        return value_and_gradient(solve_riccati(problem, steps_fine), 0.0, problem.x0)[0]
    return problem.reference_y0


def _train_or_abort(cfg: RunConfig, problem: ProblemSpec, N: int, out: Path, prov: dict, **kw):
    try:
        return train(cfg.train_config(problem, N, **kw), problem)
    except FloatingPointError as exc:
        write_json(out / "summary.json", {"status": "aborted", "error": str(exc), "N": N, **prov})
        raise RunAborted(f"training aborted at N={N}: {exc}") from exc


def run_train(cfg: RunConfig) -> dict:
    """Train one stack; write checkpoint.json, history.csv and summary.json."""
    out, prov = _out_dir(cfg), provenance(cfg)
    problem = cfg.problem()
    N = cfg.N[0]
    grid = TimeGrid(N, problem.T)
    stack, history = _train_or_abort(cfg, problem, N, out, prov)
    save_checkpoint(out / "checkpoint.json", stack, {"config": cfg.settings(), **prov})
    history.to_csv(out / "history.csv", extra=prov)
    batch = evaluate(stack, problem, grid, cfg.M_eval, cfg.seed, cfg.workers)
    y0_h = float(np.mean(batch.ycal0))
    reconstruct_y(batch, y0_h)
    summary = {
        "status": "ok",
        "problem": problem.name,
        "N": N,
        "lambda": cfg.train_config(problem, N).lam,
        "Y0_h": y0_h,
        "SE": float(np.std(batch.ycal0, ddof=1) / np.sqrt(batch.M)),
        "terminal_gap": metrics.terminal_gap(batch),
        "reference_Y0": reference_value(problem, cfg.steps_fine),
        "M_eval": cfg.M_eval,
        **prov,
    }
    write_json(out / "summary.json", summary)
    return summary


def run_converge(cfg: RunConfig) -> tuple[list[dict], metrics.EocReport]:
    """Train and evaluate for every N; write converge.csv with EOC columns."""
    out, prov = _out_dir(cfg), provenance(cfg)
    problem = cfg.problem()
    ric = solve_riccati(problem, cfg.steps_fine) if problem.lq is not None else None
    if ric is not None:
        kinds = metrics.ERROR_KINDS
    else:
        kinds = ("terminal", "y0_err") if problem.reference_y0 is not None else ("terminal",)
    rows = []
    for N in cfg.N:
        grid = TimeGrid(N, problem.T)
        stack, _ = _train_or_abort(cfg, problem, N, out, prov)
        save_checkpoint(out / f"checkpoint_N{N}.json", stack, {"config": cfg.settings(), **prov})
        batch = evaluate(stack, problem, grid, cfg.M_eval, cfg.seed, cfg.workers)
        if ric is not None:
            rec = metrics.error_vs_reference(batch, problem, ric, grid, seed=cfg.seed,
                                             z_convention=cfg.z_convention)
            row = {"N": N, **rec.errors(), "y0_h": rec.y0_h}
        else:
            y0_h = float(np.mean(batch.ycal0))
            reconstruct_y(batch, y0_h)
            row = {"N": N, "terminal": metrics.terminal_gap(batch), "y0_h": y0_h}
            if problem.reference_y0 is not None:
                row["y0_err"] = abs(problem.reference_y0 - y0_h)
        log.info("converge N=%d %s", N, row)
        rows.append(row)
    report = metrics.eoc_report(cfg.N, {k: [r[k] for r in rows] for k in kinds}, problem.T)
    header = ["N"]
    for k in kinds:
        header += [k, f"{k}_eoc"] if len(cfg.N) > 1 else [k]
    header += ["y0_h", "M_eval"]
    table = []
    for i, r in enumerate(rows):
        line = [r["N"]]
        for k in kinds:
            line += [r[k], report.rows[k][i][2]] if len(cfg.N) > 1 else [r[k]]
        table.append(line + [r["y0_h"], cfg.M_eval])
    write_csv(out / "converge.csv", header, table, prov)
    return rows, report


def run_landscape(cfg: RunConfig) -> list:
    """Frozen-y0 naive training over a y0 grid; write landscape.csv (y0, mse, cost)."""
    out, prov = _out_dir(cfg), provenance(cfg)
    problem = cfg.problem()
    N = cfg.N[0]
    grid = TimeGrid(N, problem.T)
    y0_grid = cfg.y0_grid
    if y0_grid is None:
        ref = reference_value(problem, cfg.steps_fine)
        if ref is None:
            raise ValueError("no reference Y_0 for this problem; pass --y0-grid")
        y0_grid = list(ref + np.linspace(-0.5, 0.5, 9))
    try:
        points = landscape(problem, grid, y0_grid, cfg.train_config(problem, N, method="robust"),
                           M_eval=cfg.M_eval, workers=cfg.workers)
    except FloatingPointError as exc:
        write_json(out / "summary.json", {"status": "aborted", "error": str(exc), **prov})
        raise RunAborted(f"landscape aborted: {exc}") from exc
    write_csv(out / "landscape.csv", ["y0", "mse", "cost"], [(p.y0, p.mse, p.cost) for p in points], prov)
    return points


def run_reference(cfg: RunConfig) -> float:
    """Riccati solution on the fine grid; write reference.csv and return V(0, x0)."""
    out, prov = _out_dir(cfg), provenance(cfg)
    problem = cfg.problem()
    if problem.lq is None:
        raise ValueError(f"problem {problem.name!r} has no semi-analytic reference")
    ric = solve_riccati(problem, cfg.steps_fine)
    v0 = value_and_gradient(ric, 0.0, problem.x0)[0]
    d = problem.d
    header = (["t"] + [f"P{i}{j}" for i in range(d) for j in range(d)] + [f"Q{i}" for i in range(d)] + ["R"])
    idx = sorted(set(range(0, ric.steps + 1, cfg.reference_stride)) | {ric.steps})
    rows = [[ric.times[i], *ric.P[i].ravel(), *ric.Q[i], ric.R[i]] for i in idx]
    write_csv(out / "reference.csv", header, rows, prov)
    write_json(out / "summary.json", {"problem": problem.name, "V0": v0, "steps_fine": cfg.steps_fine, **prov})
    return v0


def _band_rows(times, values, ref=None):
    """Rows (t, component, p5, mean, p95[, ref_p5, ref_mean, ref_p95])."""
    values = values if values.ndim == 3 else values[:, :, None]
    lo, mean, hi = metrics.percentile_band(values)
    if ref is not None:
        ref = ref if ref.ndim == 3 else ref[:, :, None]
        rlo, rmean, rhi = metrics.percentile_band(ref)
    rows = []
    for n, t in enumerate(times[:values.shape[1]]):
        for c in range(values.shape[2]):
            row = [t, c, lo[n, c], mean[n, c], hi[n, c]]
            if ref is not None:
                row += [rlo[n, c], rmean[n, c], rhi[n, c]]
            rows.append(row)
    return rows


def run_bands(cfg: RunConfig) -> dict[str, Path]:
    """Percentile bands of X, Y and Z from a checkpoint, with reference overlays for LQ problems."""
    if cfg.checkpoint is None or not Path(cfg.checkpoint).is_file():
        raise FileNotFoundError(f"checkpoint not found: {cfg.checkpoint}")
    if cfg.M_eval < 20:
        raise ValueError(f"bands need M_eval >= 20, got {cfg.M_eval}")
    out, prov = _out_dir(cfg), provenance(cfg)
    stack, meta = load_checkpoint(cfg.checkpoint)
    saved = meta.get("config", {})
    if saved.get("problem_file") or saved.get("preset"):
        problem = (load_problem(saved["problem_file"]) if saved.get("problem_file") else preset(saved["preset"]))
    else:
        problem = cfg.problem()
    grid = TimeGrid(len(stack), problem.T)
    batch = evaluate(stack, problem, grid, cfg.M_eval, cfg.seed, cfg.workers)
    Y = reconstruct_y(batch, float(np.mean(batch.ycal0)))
    times = grid.times
    X_ref = Y_ref = Z_ref = None
    if problem.lq is not None:
        ric = solve_riccati(problem, cfg.steps_fine)
        Y_ref, Z_ref = reference_yz(ric, times, batch.X)
        Z_ref = Z_ref[:, :-1]
        X_ref = metrics.reference_paths(problem, ric, grid, batch.dW, max(1, -(-160 // grid.N)), cfg.seed)

    def sig(Z):
        return np.stack([problem.sigma_t_z(times[n], batch.X[:, n], Z[:, n]) for n in range(grid.N)], axis=1)

    series = {
        "X": (batch.X, X_ref),
        "Y": (Y, Y_ref),
        "Z": (batch.Z, Z_ref),
        "Z_sigma_t": (sig(batch.Z), None if Z_ref is None else sig(Z_ref)),
    }
    header = ["t", "component", "p5", "mean", "p95"]
    paths = {}
    for name, (vals, ref) in series.items():
        h = header + (["ref_p5", "ref_mean", "ref_p95"] if ref is not None else [])
        paths[name] = out / f"bands_{name}.csv"
        write_csv(paths[name], h, _band_rows(times, vals, ref), prov)
    return paths


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _float_list(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deepfbsde", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="JSON file with RunConfig keys")
    common.add_argument("--preset", choices=sorted(PRESETS))
    common.add_argument("--problem-file", dest="problem_file", help="custom problem JSON")
    common.add_argument("--N", type=_int_list, help="time steps; comma list for converge")
    common.add_argument("--lambda", dest="lam", type=float)
    common.add_argument("--method", choices=METHODS)
    common.add_argument("--M-train", dest="M_train", type=int)
    common.add_argument("--M-batch", dest="M_batch", type=int)
    common.add_argument("--K-epoch", dest="K_epoch", type=int)
    common.add_argument("--M-eval", dest="M_eval", type=int)
    common.add_argument("--seed", type=int)
    common.add_argument("--lr", type=float)
    common.add_argument("--no-shuffle", dest="shuffle", action="store_false")
    common.add_argument("--variance-y0", dest="variance_y0", choices=("batchB", "batchA"))
    common.add_argument("--z-convention", dest="z_convention", choices=("dxv", "sigma-t"))
    common.add_argument("--y0-grid", dest="y0_grid", type=_float_list)
    common.add_argument("--checkpoint")
    common.add_argument("--steps-fine", dest="steps_fine", type=int)
    common.add_argument("--paper-scale", dest="paper_scale", action="store_true")
    common.add_argument("--workers", type=int)
    common.add_argument("--out")
    common.add_argument("-v", "--verbose", action="store_true")
    helps = {
        "train": "train one network stack",
        "converge": "errors and convergence orders over an N-list",
        "landscape": "MSE and cost of the frozen-y0 naive method over a y0 grid",
        "reference": "Riccati reference for LQ problems",
        "bands": "percentile bands of X, Y, Z from a checkpoint",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def main(argv=None) -> int:
    args = vars(build_parser().parse_args(argv))
    command = args.pop("command")
    verbose = args.pop("verbose", False)
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(message)s")
    file_values = {}
    if "config" in args:
        file_values = json.loads(Path(args.pop("config")).read_text(encoding="utf-8"))
    try:
        cfg = RunConfig.build(command, file_values, args)
        if command == "train":
            s = run_train(cfg)
            print(f"Y0_h={s['Y0_h']:.6f} SE={s['SE']:.2e} terminal_gap={s['terminal_gap']:.4e}")
        elif command == "converge":
            rows, _ = run_converge(cfg)
            for r in rows:
                print(" ".join(f"{k}={v:.6g}" for k, v in r.items()))
        elif command == "landscape":
            for p in run_landscape(cfg):
                print(f"y0={p.y0:.4f} mse={p.mse:.6g} cost={p.cost:.6g}")
        elif command == "reference":
            print(f"V(0,x0)={run_reference(cfg):.6f}")
        else:
            for name, path in run_bands(cfg).items():
                print(f"{name}: {path}")
    except RunAborted as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ValueError, KeyError, FileNotFoundError, np.linalg.LinAlgError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 2
    return 0
