"""Experiment driver: independent noise realizations, training, references and CSV output."""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
import os
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from . import nn, oracles
from .optim import LrSchedule
from .paths import NoiseRealization, UniformBox, make_grid, sample_noise
from .problems import COEFFICIENT_KEYS, PROBLEMS, SpdeProblem, make_problem
from .rng import make_stream
from .trainer import TrainConfig, TrainingError, solve

log = logging.getLogger(__name__)

NOISE_STREAM = 0
ORACLE_STREAM = 3

CSV_COLUMNS = ["problem", "d", "run", "result", "runtime_s", "reference", "rel_pathwise_error"]


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    problem: str = "heat-add"
    dim: int = 1
    T: Optional[float] = None
    N: Optional[int] = None
    M: Optional[int] = None
    batch: int = 64
    runs: int = 5
    seed: int = 0
    run_offset: int = 0
    x_eval: Optional[str] = None
    xi: str = "point"
    optimizer: str = "adam"
    schedule: Optional[LrSchedule] = None
    init: str = "uniform"
    hidden_dim: Optional[int] = None
    label_stats: str = "batch"
    noise_substeps: Optional[int] = None
    mc_pairs: int = 200_000
    fd_space: int = 2048
    fd_substeps: int = 16
    out: Optional[str] = None
    log: Optional[str] = None
    noise_dump: Optional[str] = None
    net_dump: Optional[str] = None
    coeffs: Dict[str, float] = field(default_factory=dict)

    def resolved(self) -> "ExperimentConfig":
        """Copy with preset defaults filled in and validated."""
        if self.problem not in PROBLEMS:
            raise ConfigError(f"unknown problem {self.problem!r}; choose from {sorted(PROBLEMS)}")
        pre = PROBLEMS[self.problem]().defaults
        c = dataclasses.replace(self, coeffs=dict(self.coeffs))
        c.T = pre.T if c.T is None else c.T
        c.N = pre.N if c.N is None else c.N
        c.M = pre.M if c.M is None else c.M
        if c.schedule is None:
            # shorter runs keep the preset's shape by compressing its bounds
            c.schedule = pre.schedule if c.M == pre.M else pre.schedule.scaled(max(c.M, 1) / pre.M)
        if c.x_eval is None:
            c.x_eval = repr(pre.x_eval)
        if c.noise_substeps is None:
            c.noise_substeps = 16 if self.problem == "zakai" else 1
        for name, ok in (("dim", c.dim >= 1), ("N", c.N >= 1), ("M", c.M >= 0),
                         ("batch", c.batch >= 1), ("runs", c.runs >= 1), ("T", c.T > 0),
                         ("seed", c.seed >= 0), ("run_offset", c.run_offset >= 0)):
            if not ok:
                raise ConfigError(f"invalid value for {name}")
        if c.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be adam or sgd, got {c.optimizer!r}")
        if c.label_stats not in ("batch", "running"):
            raise ConfigError(f"label_stats must be batch or running, got {c.label_stats!r}")
        return c

    def make_problem(self) -> SpdeProblem:
        return make_problem(self.problem, self.dim, self.T, **self.coeffs)

    def eval_point(self):
        vals = [float(v) for v in str(self.x_eval).split(",")]
        if len(vals) == 1:
            return np.full(self.dim, vals[0])
        if len(vals) != self.dim:
            raise ConfigError(f"x_eval has {len(vals)} entries, expected 1 or {self.dim}")
        return np.array(vals)

    def xi_spec(self):
        if self.xi == "point":
            return self.eval_point()
        kind, _, rest = self.xi.partition(":")
        if kind == "uniform":
            lo, hi = (float(v) for v in rest.split(","))
            return UniformBox(lo, hi, self.dim)
        raise ConfigError(f"xi must be 'point' or 'uniform:low,high', got {self.xi!r}")

    def train_config(self, progress=None) -> TrainConfig:
        return TrainConfig(iters=self.M, batch_size=self.batch, schedule=self.schedule,
                           optimizer=self.optimizer, init_scheme=self.init,
                           hidden_dim=self.hidden_dim, label_stats=self.label_stats,
                           progress=progress)


# -- parsing -----------------------------------------------------------------

def _schedule(text):
    return LrSchedule.parse(text)


_FIELD_TYPES = {
    "problem": str, "dim": int, "T": float, "N": int, "M": int, "batch": int, "runs": int,
    "seed": int, "run_offset": int, "x_eval": str, "xi": str, "optimizer": str,
    "schedule": _schedule, "init": str, "hidden_dim": int, "label_stats": str,
    "noise_substeps": int,
    "mc_pairs": int, "fd_space": int, "fd_substeps": int, "out": str, "log": str,
    "noise_dump": str, "net_dump": str,
}
_ALIASES = {"steps": "N", "iters": "M", "horizon": "T", "d": "dim", "lr_schedule": "schedule"}


def _set_key(cfg: ExperimentConfig, key, value, where=""):
    key = _ALIASES.get(key, key)
    if key in COEFFICIENT_KEYS:
        conv, target = float, None
    elif key in _FIELD_TYPES:
        conv, target = _FIELD_TYPES[key], key
    else:
        raise ConfigError(f"{where}unknown key {key!r}")
    try:
        val = conv(value) if isinstance(value, str) else value
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}bad value for {key}: {value!r} ({e})") from None
    if target is None:
        cfg.coeffs[COEFFICIENT_KEYS[key]] = val
    else:
        setattr(cfg, target, val)


def parse_config_text(text: str, cfg: ExperimentConfig = None) -> ExperimentConfig:
    cfg = ExperimentConfig() if cfg is None else cfg
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: missing key")
        _set_key(cfg, key, value, f"line {lineno}: ")
    return cfg


def parse_config(path=None, overrides: Optional[dict] = None) -> ExperimentConfig:
    """Read a ``key = value`` file (optional) and apply flag overrides, then fill in presets."""
    cfg = ExperimentConfig()
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            parse_config_text(fh.read(), cfg)
    for k, v in (overrides or {}).items():
        if v is not None:
            _set_key(cfg, k, v, "flag: ")
    return cfg.resolved()


# -- experiment ----------------------------------------------------------------

def rel_l2(errors) -> float:
    e = np.asarray(errors, dtype=float).ravel()
    if e.size == 0:
        raise ValueError("rel_l2 needs at least one error")
    return float(np.sqrt(np.mean(e * e)))


@dataclass
class RunRow:
    run: int
    result: float
    runtime_s: float
    reference: float
    rel_pathwise_error: float
    failed: bool = False
    reference_se: float = 0.0


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    rows: List[RunRow]

    @property
    def failed(self):
        return any(r.failed for r in self.rows)

    @property
    def rel_l2(self):
        if self.failed:
            return float("nan")
        return rel_l2([r.rel_pathwise_error for r in self.rows])

    def to_csv(self, include_runtime=True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = CSV_COLUMNS if include_runtime else [c for c in CSV_COLUMNS if c != "runtime_s"]
        w.writerow(cols)
        c = self.config
        for r in self.rows:
            vals = dict(problem=c.problem, d=c.dim, run=r.run, result=repr(r.result),
                        runtime_s=f"{r.runtime_s:.3f}", reference=repr(r.reference),
                        rel_pathwise_error=repr(r.rel_pathwise_error))
            w.writerow([vals[k] for k in cols])
        summ = dict(problem=c.problem, d=c.dim, run="L2", result="", runtime_s="",
                    reference="", rel_pathwise_error=repr(self.rel_l2))
        w.writerow([summ[k] for k in cols])
        return buf.getvalue()

    def write_csv(self, path, include_runtime=True):
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv(include_runtime))


def reference_value(cfg: ExperimentConfig, problem: SpdeProblem, z: NoiseRealization, run_id):
    """Reference ``X_T(x_eval)`` for the noise path ``z``; returns ``(value, standard_error)``."""
    x = cfg.eval_point()
    T = z.grid.T
    if problem.oracle in ("heat-add", "heat-mul"):
        return float(problem.reference(T, x, z.value_at(z.grid.N)[0])), 0.0
    if problem.oracle == "black-scholes":
        stream = make_stream(cfg.seed, run_id).substream(ORACLE_STREAM)
        return oracles.reference_bs(T, x, z.value_at(z.grid.N)[0], problem, stream, cfg.mc_pairs)
    if problem.oracle == "zakai-fd":
        if problem.dim != 1:
            return float("nan"), float("nan")
        return oracles.reference_zakai_1d(problem, z, float(x[0]), cfg.fd_space,
                                          cfg.fd_substeps), 0.0
    raise ValueError(f"no reference for problem {problem.id!r}")


def run_noise(cfg: ExperimentConfig, problem: SpdeProblem, run_id: int) -> NoiseRealization:
    grid = make_grid(cfg.T, cfg.N)
    root = make_stream(cfg.seed, run_id)
    return sample_noise(problem, grid, root.substream(NOISE_STREAM), cfg.noise_substeps)


class _TrainLog:
    def __init__(self, path):
        self.fh = open(path, "w", newline="")
        self.w = csv.writer(self.fh, lineterminator="\n")
        self.w.writerow(["run", "step", "iter", "loss", "lr"])
        self.run = 0

    def __call__(self, n, m, loss, lr):
        self.w.writerow([self.run, n, m, repr(float(loss)), repr(float(lr))])

    def close(self):
        self.fh.close()


def run_experiment(cfg: ExperimentConfig, progress: Optional[Callable] = None,
                   keep_solvers=False) -> ExperimentReport:
    """Train and evaluate ``cfg.runs`` independent realizations.

    Run ``r`` uses stream id ``run_offset + r``, so runs can be split across
    invocations without changing results.  Divergent runs are recorded as
    failed and the experiment continues.
    """
    cfg = cfg.resolved()
    problem = cfg.make_problem()
    grid = make_grid(cfg.T, cfg.N)
    x = cfg.eval_point()
    xi = cfg.xi_spec()
    trainlog = _TrainLog(cfg.log) if cfg.log else None

    def report_progress(n, m, loss, lr):
        if trainlog is not None:
            trainlog(n, m, loss, lr)
        if progress is not None:
            progress(n, m, loss, lr)

    tcfg = cfg.train_config(report_progress if (trainlog or progress) else None)
    rows, solvers = [], []
    try:
        for r in range(cfg.runs):
            run_id = cfg.run_offset + r
            if trainlog is not None:
                trainlog.run = run_id
            z = run_noise(cfg, problem, run_id)
            if cfg.noise_dump:
                os.makedirs(cfg.noise_dump, exist_ok=True)
                z.to_csv(os.path.join(cfg.noise_dump, f"noise_run{run_id}.csv"))
            ref, se = reference_value(cfg, problem, z, run_id)
            t0 = time.perf_counter()
            try:
                solver = solve(problem, grid, z, tcfg, make_stream(cfg.seed, run_id), xi)
            except (TrainingError, ArithmeticError) as e:
                log.error("run %d failed: %s", run_id, e)
                rows.append(RunRow(run_id, float("nan"), time.perf_counter() - t0, ref,
                                   float("nan"), failed=True, reference_se=se))
                continue
            runtime = time.perf_counter() - t0
            result = solver.evaluate(cfg.N, x)
            err = abs(result - ref) / abs(ref) if ref != 0 else float("inf")
            rows.append(RunRow(run_id, result, runtime, ref, err, reference_se=se))
            log.info("run %d: result %.6g reference %.6g rel err %.4g (%.1fs)",
                     run_id, result, ref, err, runtime)
            if cfg.net_dump:
                os.makedirs(cfg.net_dump, exist_ok=True)
                for st in solver.steps:
                    nn.dump_network(os.path.join(cfg.net_dump, f"run{run_id}_step{st.n}.bin"),
                                    st.theta, st.bn, solver.shape)
            if keep_solvers:
                solvers.append(solver)
    finally:
        if trainlog is not None:
            trainlog.close()
    rep = ExperimentReport(cfg, rows)
    if keep_solvers:
        rep.solvers = solvers
    if cfg.out:
        rep.write_csv(cfg.out)
    return rep


def summary_is_consistent(csv_text: str, tol=1e-12) -> bool:
    """Recompute the L2 summary from per-run rows of an emitted CSV."""
    rows = list(csv.DictReader(io.StringIO(csv_text)))
    errs = [float(r["rel_pathwise_error"]) for r in rows if r["run"] != "L2"]
    summ = float([r for r in rows if r["run"] == "L2"][0]["rel_pathwise_error"])
    if math.isnan(summ):
        return any(math.isnan(e) for e in errs)
    return abs(rel_l2(errs) - summ) <= tol
