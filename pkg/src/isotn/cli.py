"""Command line harness: ``isotn run``, ``isotn compare`` and ``isotn check``.

Every run writes to its own directory:

* ``trace.csv``: one row per iteration (see :data:`TRACE_COLUMNS`), preceded
  by a ``# isotn-trace v1`` schema line;
* ``timing.csv``: measured wall-clock seconds per iteration;
* ``summary.json``: final numbers, the reference energy and a config echo;
* ``checkpoint.json`` (plus ``checkpoint_<iter>.json`` on schedule).

Wall-clock time is not reproducible, so ``trace.csv`` carries ``nan`` in its
``wall_seconds`` column unless ``--wall-time`` is given; this keeps repeated
runs with the same seed byte-identical.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import enum
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, checkpoint
from . import mera as M
from . import mps as P
from .linalg import ConvergenceError
from .manifolds import ProductPoint
from .optimize import IterateRecord, LineSearchParams, Method, OptimizerOptions, default_linesearch, minimize
from .problems import brockett_problem

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10 only
    import tomli as tomllib

log = logging.getLogger("isotn")

OUTPUT_ENV = "ISOTN_OUTPUT_DIR"
TRACE_SCHEMA = "# isotn-trace v1"
TRACE_COLUMNS = ("iter", "wall_seconds", "energy", "energy_error_vs_reference", "grad_norm",
                 "step_alpha", "fevals")
SUMMARY_SCHEMA = 1

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2


class ConfigError(ValueError):
    pass


class Experiment(str, enum.Enum):
    MERA_ISING = "mera_ising"
    MPS_TFIM = "mps_tfim"
    SYNTHETIC = "synthetic"


class RunMethod(str, enum.Enum):
    GD = "gd"
    CG = "cg"
    LBFGS = "lbfgs"
    EV = "ev"
    EV_THEN_LBFGS = "ev_then_lbfgs"


@dataclasses.dataclass
class RunConfig:
    experiment: Experiment
    method: RunMethod = RunMethod.LBFGS
    D: int = 2
    D_ramp: list = dataclasses.field(default_factory=list)
    layers: int = 2
    init: str = "identity"
    g: float = 1.0
    seed: int = 0
    max_iters: int = 1000
    grad_tol: float = 1e-8
    lbfgs_memory: int = 8
    cg_restart_period: int = 100
    ls_c1: float | None = None
    ls_c2: float | None = None
    ls_max_evals: int = 30
    preconditioner: bool = True
    ev_sweeps: int = 30
    checkpoint_every: int = 0
    mpo_file: str | None = None
    synthetic_n: int = 20
    synthetic_p: int = 3
    output_dir: str | None = None
    wall_time: bool = False

    def __post_init__(self):
        try:
            self.experiment = Experiment(self.experiment)
            self.method = RunMethod(self.method)
        except ValueError as err:
            raise ConfigError(str(err)) from None
        if self.method in (RunMethod.EV, RunMethod.EV_THEN_LBFGS) and self.experiment is not Experiment.MERA_ISING:
            raise ConfigError(f"method {self.method.value} is only available for mera_ising")
        if self.init not in ("identity", "random"):
            raise ConfigError("init must be 'identity' or 'random'")
        for name in ("D", "layers", "max_iters", "lbfgs_memory", "synthetic_n", "synthetic_p"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive")
        if not self.grad_tol > 0:
            raise ConfigError("grad_tol must be positive")
        self.D_ramp = [int(d) for d in self.D_ramp]
        if self.D_ramp and self.experiment is not Experiment.MERA_ISING:
            raise ConfigError("D_ramp is only supported for mera_ising")
        if any(b < a for a, b in zip(self.D_ramp, self.D_ramp[1:])):
            raise ConfigError("D_ramp must be non-decreasing")

    def to_json(self) -> dict:
        out = dataclasses.asdict(self)
        out["experiment"] = self.experiment.value
        out["method"] = self.method.value
        return out


_FIELDS = {f.name for f in dataclasses.fields(RunConfig)}


def load_config(path) -> dict:
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except (OSError, tomllib.TOMLDecodeError) as err:
        raise ConfigError(f"cannot read config {path}: {err}") from None
    unknown = set(data) - _FIELDS
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return data


def tfim_energy_density(g: float) -> float:
    """Exact ground-state energy per site of ``-sum XX - g sum Z`` (free fermions)."""
    k, wts = np.polynomial.legendre.leggauss(200)
    k = 0.5 * math.pi * (k + 1.0)
    return float(-0.5 * np.sum(wts * np.sqrt(1 + g * g - 2 * g * np.cos(k))))


REFERENCE_NOTE = ("exact ground-state energy per site of the infinite transverse-field Ising chain "
                  "from its free-fermion solution; equals -4/pi at g = 1")


class _TraceWriter:
    def __init__(self, outdir: Path, reference: float, wall_time: bool):
        self.reference = reference
        self.wall_time = wall_time
        self.fh = open(outdir / "trace.csv", "w", newline="")
        self.th = open(outdir / "timing.csv", "w", newline="")
        self.fh.write(TRACE_SCHEMA + "\n")
        self.w = csv.writer(self.fh, lineterminator="\n")
        self.tw = csv.writer(self.th, lineterminator="\n")
        self.w.writerow(TRACE_COLUMNS)
        self.tw.writerow(("iter", "wall_seconds"))
        self.offset_iter = 0
        self.offset_fevals = 0
        self.last: IterateRecord | None = None
        self.t0 = time.perf_counter()

    def __call__(self, rec: IterateRecord, _x=None):
        it = rec.iter + self.offset_iter
        fe = rec.fevals + self.offset_fevals
        if self.last is not None and it <= self.last.iter:
            return  # stage boundaries repeat the starting point
        wall = time.perf_counter() - self.t0
        self.w.writerow((it, repr(wall) if self.wall_time else "nan", repr(float(rec.cost)),
                         repr(float(rec.cost - self.reference)), repr(float(rec.grad_norm)),
                         repr(float(rec.alpha)), fe))
        self.tw.writerow((it, repr(wall)))
        self.fh.flush()
        self.last = dataclasses.replace(rec, iter=it, fevals=fe)

    def next_stage(self):
        if self.last is not None:
            self.offset_iter = self.last.iter
            self.offset_fevals = self.last.fevals

    def close(self):
        self.fh.close()
        self.th.close()


def _options(cfg: RunConfig, method: Method, max_iters: int, callback) -> tuple:
    opts = OptimizerOptions(method, grad_tol=cfg.grad_tol, max_iters=max_iters,
                            lbfgs_memory=cfg.lbfgs_memory, cg_restart_period=cfg.cg_restart_period,
                            callback=callback)
    ls = default_linesearch(method)
    ls = dataclasses.replace(ls, c1=cfg.ls_c1 if cfg.ls_c1 is not None else ls.c1,
                             c2=cfg.ls_c2 if cfg.ls_c2 is not None else ls.c2,
                             max_evals=cfg.ls_max_evals)
    return opts, ls


def _run_mera(cfg: RunConfig, writer: _TraceWriter, outdir: Path):
    h = M.ising_hamiltonian(cfg.g)
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    stages = cfg.D_ramp or [cfg.D]
    state = M.random_mera(2, stages[0], cfg.layers, seed=rng, init=cfg.init)
    result = dict(converged=False, failed=False, message="")
    ckpt = _Checkpointer(cfg, outdir)
    for D in stages:
        if D > state.bond_dimension:
            state = M.grow_bond_dimension(state, D, seed=rng)
        ctx = M.MeraContext(h)

        def cb(rec, x, _d=2):
            writer(rec, x)
            ckpt(writer.last.iter, lambda: M.MeraState.from_point(x, _d))

        remaining = cfg.max_iters
        if cfg.method in (RunMethod.EV, RunMethod.EV_THEN_LBFGS):
            sweeps = remaining if cfg.method is RunMethod.EV else min(cfg.ev_sweeps, remaining)
            state, trace, conv = M.run_evenbly_vidal(state, h, sweeps, cfg.grad_tol, callback=cb, context=ctx)
            result.update(converged=conv, grad_norm=trace[-1].grad_norm, energy=trace[-1].cost)
            remaining -= trace[-1].iter
            writer.next_stage()
        if cfg.method is not RunMethod.EV and not result["converged"] and remaining > 0:
            method = Method.LBFGS if cfg.method is RunMethod.EV_THEN_LBFGS else Method(cfg.method.value)
            problem = M.mera_problem(h, 2, ctx, use_preconditioner=cfg.preconditioner)
            opts, ls = _options(cfg, method, remaining, cb)
            res = minimize(problem, state.to_point(), opts, ls)
            state = M.MeraState.from_point(res.x, 2)
            result.update(converged=res.converged, failed=res.failed, message=res.message,
                          grad_norm=res.gradient.norm(), energy=res.cost)
            writer.next_stage()
        if result["failed"]:
            break
    ckpt.final(state)
    return result


def _run_mps(cfg: RunConfig, writer: _TraceWriter, outdir: Path):
    try:
        mpo = P.load_mpo_json(cfg.mpo_file) if cfg.mpo_file else P.tfim_mpo(cfg.g)
    except (ValueError, KeyError, TypeError) as err:
        raise ConfigError(f"invalid MPO file {cfg.mpo_file}: {err}") from None
    ckpt = _Checkpointer(cfg, outdir)

    def cb(rec, x):
        writer(rec, x)
        ckpt(writer.last.iter, lambda: P.UniformMps(x[0], mpo.d, cfg.D))

    opts, ls = _options(cfg, Method(cfg.method.value), cfg.max_iters, cb)
    state, res = P.optimize_mps(mpo, cfg.D, opts, seed=cfg.seed, use_preconditioner=cfg.preconditioner,
                                ls_params=ls)
    ckpt.final(state)
    return dict(converged=res.converged, failed=res.failed, message=res.message,
                grad_norm=res.gradient.norm(), energy=res.cost)


def _run_synthetic(cfg: RunConfig, writer: _TraceWriter, outdir: Path):
    problem, x0, _ = brockett_problem(cfg.synthetic_n, cfg.synthetic_p, seed=cfg.seed)
    opts, ls = _options(cfg, Method(cfg.method.value), cfg.max_iters, writer)
    res = minimize(problem, ProductPoint(x0), opts, ls)
    return dict(converged=res.converged, failed=res.failed, message=res.message,
                grad_norm=res.gradient.norm(), energy=res.cost)


class _Checkpointer:
    def __init__(self, cfg: RunConfig, outdir: Path):
        self.every = cfg.checkpoint_every
        self.outdir = outdir
        self.seed = cfg.seed

    def __call__(self, it, make_state):
        if self.every and it and it % self.every == 0:
            checkpoint.save(self.outdir / f"checkpoint_{it:06d}.json", make_state(), self.seed, {"iter": it})

    def final(self, state):
        checkpoint.save(self.outdir / "checkpoint.json", state, self.seed)


def reference_energy(cfg: RunConfig) -> tuple[float, str]:
    if cfg.experiment is Experiment.SYNTHETIC:
        return brockett_problem(cfg.synthetic_n, cfg.synthetic_p, seed=cfg.seed)[2], \
            "minimum of the Brockett cost: weighted sum of the lowest eigenvalues"
    if cfg.experiment is Experiment.MPS_TFIM and cfg.mpo_file:
        return float("nan"), "no reference for a user-supplied MPO"
    return tfim_energy_density(cfg.g), REFERENCE_NOTE


def default_output_dir(cfg: RunConfig) -> Path:
    base = Path(os.environ.get(OUTPUT_ENV, "runs"))
    return base / f"{cfg.experiment.value}-{cfg.method.value}-D{cfg.D}-seed{cfg.seed}"


def run(cfg: RunConfig) -> int:
    """Execute one run; returns the process exit code."""
    outdir = Path(cfg.output_dir) if cfg.output_dir else default_output_dir(cfg)
    outdir.mkdir(parents=True, exist_ok=True)
    reference, note = reference_energy(cfg)
    writer = _TraceWriter(outdir, reference, cfg.wall_time)
    runner = {Experiment.MERA_ISING: _run_mera, Experiment.MPS_TFIM: _run_mps,
              Experiment.SYNTHETIC: _run_synthetic}[cfg.experiment]
    code = EXIT_OK
    try:
        result = runner(cfg, writer, outdir)
        if result["failed"]:
            code = EXIT_NUMERICAL
    except (ConvergenceError, FloatingPointError, np.linalg.LinAlgError) as err:
        log.error("numerical failure: %s", err)
        last = writer.last
        result = dict(converged=False, failed=True, message=f"{type(err).__name__}: {err}",
                      grad_norm=last.grad_norm if last else float("nan"),
                      energy=last.cost if last else float("nan"))
        code = EXIT_NUMERICAL
    finally:
        writer.close()
    last = writer.last
    summary = {
        "schema_version": SUMMARY_SCHEMA,
        "final_energy": result["energy"],
        "reference_energy": reference,
        "reference_note": note,
        "energy_error": result["energy"] - reference,
        "grad_norm": result["grad_norm"],
        "iterations": last.iter if last else 0,
        "fevals": last.fevals if last else 0,
        "converged": bool(result["converged"]),
        "failed": bool(result["failed"]),
        "message": result["message"],
        "config": cfg.to_json(),
        "version": __version__,
    }
    (outdir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    log.info("%s: energy %.12g, grad_norm %.3e, %d iterations -> %s", cfg.experiment.value,
             summary["final_energy"], summary["grad_norm"], summary["iterations"], outdir)
    return code


def read_trace(path) -> dict:
    """Columns of a trace CSV as float arrays; raises ConfigError on a bad schema."""
    with open(path, newline="") as fh:
        rows = [line for line in fh if not line.startswith("#")]
    reader = csv.DictReader(rows)
    missing = [c for c in TRACE_COLUMNS if c not in (reader.fieldnames or [])]
    if missing:
        raise ConfigError(f"{path}: missing columns {', '.join(missing)}")
    data = {c: [] for c in TRACE_COLUMNS}
    for row in reader:
        for c in TRACE_COLUMNS:
            data[c].append(float(row[c]))
    return {c: np.array(v) for c, v in data.items()}


THRESHOLDS = (1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8)


def first_reaching(trace: dict, column: str, threshold: float):
    """``(iter, fevals)`` of the first row with ``|column| <= threshold``, or None."""
    hits = np.nonzero(np.abs(trace[column]) <= threshold)[0]
    if hits.size == 0:
        return None
    i = hits[0]
    return int(trace["iter"][i]), int(trace["fevals"][i])


def compare(path_a, path_b) -> str:
    a, b = read_trace(path_a), read_trace(path_b)
    lines = [f"A = {path_a}", f"B = {path_b}",
             f"{'quantity':<26}{'threshold':>10}{'A iters':>10}{'A fevals':>10}{'B iters':>10}{'B fevals':>10}"]
    for column in ("grad_norm", "energy_error_vs_reference"):
        for thr in THRESHOLDS:
            cells = []
            for t in (a, b):
                hit = first_reaching(t, column, thr)
                cells += ["-", "-"] if hit is None else [str(hit[0]), str(hit[1])]
            lines.append(f"{column:<26}{thr:>10.0e}" + "".join(f"{c:>10}" for c in cells))
    return "\n".join(lines)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="isotn", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one benchmark optimization")
    r.add_argument("experiment", choices=[e.value for e in Experiment])
    r.add_argument("--config", help="TOML file with run settings; flags override it")
    r.add_argument("--method", choices=[m.value for m in RunMethod])
    r.add_argument("--D", type=int)
    r.add_argument("--D-ramp", dest="D_ramp", type=lambda s: [int(v) for v in s.split(",")])
    r.add_argument("--layers", type=int)
    r.add_argument("--init", choices=["identity", "random"])
    r.add_argument("--g", type=float)
    r.add_argument("--seed", type=int)
    r.add_argument("--seeds", type=lambda s: [int(v) for v in s.split(",")],
                   help="comma-separated seeds; each gets its own subdirectory")
    r.add_argument("--jobs", type=int, default=1, help="parallel processes for --seeds")
    r.add_argument("--max-iters", dest="max_iters", type=int)
    r.add_argument("--grad-tol", dest="grad_tol", type=float)
    r.add_argument("--lbfgs-memory", dest="lbfgs_memory", type=int)
    r.add_argument("--ev-sweeps", dest="ev_sweeps", type=int)
    r.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    r.add_argument("--mpo-file", dest="mpo_file")
    r.add_argument("--no-preconditioner", dest="preconditioner", action="store_false", default=None)
    r.add_argument("--output-dir", dest="output_dir")
    r.add_argument("--wall-time", dest="wall_time", action="store_true", default=None,
                   help="write measured times into trace.csv (breaks byte-identical reruns)")

    c = sub.add_parser("compare", help="iterations needed by two traces to reach thresholds")
    c.add_argument("trace_a")
    c.add_argument("trace_b")

    sub.add_parser("check", help="run the invariant self-test suite")
    return parser


_RUN_FLAGS = ("method", "D", "D_ramp", "layers", "init", "g", "seed", "max_iters", "grad_tol",
              "lbfgs_memory", "ev_sweeps", "checkpoint_every", "mpo_file", "preconditioner",
              "output_dir", "wall_time")


def config_from_args(args) -> RunConfig:
    values = load_config(args.config) if args.config else {}
    values["experiment"] = args.experiment
    for name in _RUN_FLAGS:
        v = getattr(args, name)
        if v is not None:
            values[name] = v
    try:
        return RunConfig(**values)
    except TypeError as err:
        raise ConfigError(str(err)) from None


def _run_seed(cfg: RunConfig) -> int:
    return run(cfg)


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "check":
            from .checks import run_checks

            results = run_checks()
            for res in results:
                print(f"{'PASS' if res.ok else 'FAIL'}  {res.name}: {res.value:.3e} (tol {res.tol:.0e})")
            return EXIT_OK if all(r.ok for r in results) else EXIT_NUMERICAL
        if args.command == "compare":
            print(compare(args.trace_a, args.trace_b))
            return EXIT_OK
        cfg = config_from_args(args)
        if not args.seeds:
            return run(cfg)
        base = Path(cfg.output_dir) if cfg.output_dir else default_output_dir(cfg).parent
        cfgs = [dataclasses.replace(cfg, seed=s, output_dir=str(base / f"seed{s}")) for s in args.seeds]
        if args.jobs > 1:
            with ProcessPoolExecutor(max_workers=args.jobs) as pool:
                codes = list(pool.map(_run_seed, cfgs))
        else:
            codes = [run(c) for c in cfgs]
        return max(codes)
    except (ConfigError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
