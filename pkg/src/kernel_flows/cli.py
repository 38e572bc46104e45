"""Command-line experiment runner.

Every run writes ``manifest.json`` (resolved configuration, seed, versions)
plus experiment-specific CSV files into ``--out``. Failures print one line
``error: <Kind>: <message>`` to stderr and exit nonzero.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from typing import List, Optional

import numpy as np
import scipy

from . import __version__
from .data import (
    Dataset,
    filter_classes,
    gamma_heuristic,
    load_mnist,
    normalize_l2,
    select_subset,
    split_train_test,
    swiss_roll,
)
from .errors import ConfigError
from .flow import (
    EpsilonRule,
    Evaluator,
    FlowConfig,
    FlowState,
    TrainRecord,
    evaluate_flow,
    load_checkpoint,
    predict_classes,
    save_checkpoint,
    train_flow,
    velocity_fields,
)
from .parametric import TrainConfig
from .pde import (
    ConductivityField,
    make_problem,
    multiresolution_experiment,
    random_subset_experiment,
    recover_conductivity,
)
from .rkhs import GaussianKernel

log = logging.getLogger("kernel_flows")

KINDS = ("pde-multires", "pde-recover", "swissroll", "image-kf", "evaluate", "velocity")


@dataclass
class ExperimentConfig:
    kind: str
    out: str = "runs/out"
    seed: int = 0
    # data
    n: Optional[int] = None
    n_test: int = 100
    data_dir: Optional[str] = None
    classes: Optional[str] = None
    normalize: bool = False
    # kernel
    gamma: Optional[float] = None
    nugget: Optional[float] = None
    # training
    n_f: Optional[int] = None
    n_c: Optional[int] = None
    steps: Optional[int] = None
    eps_mode: Optional[str] = None
    eps_value: Optional[float] = None
    eps_decay: Optional[int] = None
    drop_threshold: Optional[float] = None
    interp_nugget: bool = True
    n_i: List[int] = field(default_factory=list)
    cadence: int = 100
    final_window: int = 0
    store_records: Optional[bool] = None
    # pde
    level: int = 8
    modes: int = 64
    problem_seed: int = 0
    trials: int = 20
    # replay tools
    run: Optional[str] = None
    layer: int = 0
    window: int = 300
    grid: Optional[str] = None

    def resolve(self) -> "ExperimentConfig":
        """Fill per-experiment defaults and validate."""
        if self.kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}")
        d = DEFAULTS.get(self.kind, {})
        for k, v in d.items():
            if getattr(self, k) is None:
                setattr(self, k, v)
        if self.n_f is not None and self.n_c is not None and not 1 <= self.n_c < self.n_f:
            raise ConfigError(f"need 1 <= N_c < N_f, got N_c={self.n_c}, N_f={self.n_f}")
        if self.n is not None and self.n_f is not None and self.n_f > self.n:
            raise ConfigError(f"N_f={self.n_f} exceeds N={self.n}")
        if self.steps is not None and self.steps < 0:
            raise ConfigError("steps must be nonnegative")
        if self.cadence < 1:
            raise ConfigError("cadence must be >= 1")
        if self.kind in ("swissroll", "image-kf"):
            EpsilonRule(self.eps_mode, self.eps_value, self.eps_decay)
        if self.kind == "image-kf" and not self.data_dir:
            raise ConfigError("image-kf needs --data-dir with IDX files")
        if self.kind in ("evaluate", "velocity") and not self.run:
            raise ConfigError(f"{self.kind} needs --run pointing at a finished run")
        return self


DEFAULTS = {
    "pde-multires": dict(n_f=128, n_c=64),
    "pde-recover": dict(n_f=128, n_c=64, steps=350, eps_value=0.01),
    "swissroll": dict(n=100, n_f=100, n_c=50, steps=20000, eps_mode="absolute", eps_value=0.2,
                      gamma=0.25, nugget=math.exp(-9.0), store_records=True),
    "image-kf": dict(n=600, n_f=600, n_c=300, steps=4000, eps_mode="relative-strict",
                     eps_value=0.01, nugget=0.0, store_records=False),
}


def _coerce(f, raw: str):
    t = f.type if isinstance(f.type, str) else str(f.type)
    if "List[int]" in t:
        return [int(x) for x in str(raw).replace(",", " ").split()]
    if "bool" in t:
        return str(raw).strip().lower() in ("1", "true", "yes", "on")
    if "int" in t and "float" not in t:
        return int(raw)
    if "float" in t:
        return float(raw)
    return raw


def load_config(kind: str, path: Optional[str]) -> ExperimentConfig:
    """Read ``[DEFAULT]`` and ``[<kind>]`` sections of an INI file."""
    cfg = ExperimentConfig(kind=kind)
    if not path:
        return cfg
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise ConfigError(f"cannot read config file {path}")
    section = parser[kind] if parser.has_section(kind) else parser.defaults()
    known = {f.name: f for f in fields(ExperimentConfig)}
    for key, raw in section.items():
        name = key.replace("-", "_")
        if name not in known or name == "kind":
            raise ConfigError(f"unknown config key {key!r}")
        setattr(cfg, name, _coerce(known[name], raw))
    return cfg


FLAG_MAP = {
    "seed": "seed", "out": "out", "nf": "n_f", "nc": "n_c", "steps": "steps",
    "eps_mode": "eps_mode", "eps_value": "eps_value", "eps_decay": "eps_decay",
    "gamma": "gamma", "nugget": "nugget", "drop_threshold": "drop_threshold", "ni": "n_i",
    "n": "n", "n_test": "n_test", "data_dir": "data_dir", "classes": "classes",
    "normalize": "normalize", "cadence": "cadence", "final_window": "final_window",
    "run": "run", "layer": "layer", "window": "window", "grid": "grid",
    "level": "level", "problem_seed": "problem_seed", "trials": "trials",
    "store_records": "store_records", "no_interp_nugget": None,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        msg = " ".join(message.split())
        self.exit(2, f"error: UsageError: {msg}\n")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI file; flags override its values")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--nf", type=int, help="batch size N_f")
    common.add_argument("--nc", type=int, help="coarse size N_c")
    common.add_argument("--steps", type=int, help="iterations / layers")
    common.add_argument("--eps-mode", choices=EpsilonRule.MODES)
    common.add_argument("--eps-value", type=float)
    common.add_argument("--eps-decay", type=int, help="layer n0 after which eps decays as 1/sqrt(n/n0)")
    common.add_argument("--gamma", type=float, help="Gaussian gamma (default: heuristic for images)")
    common.add_argument("--nugget", type=float)
    common.add_argument("--drop-threshold", type=float)
    common.add_argument("--ni", type=lambda s: [int(x) for x in s.split(",")],
                        help="comma-separated interpolation-set sizes")
    common.add_argument("--n", type=int, help="number of training points")
    common.add_argument("--n-test", type=int)
    common.add_argument("--data-dir")
    common.add_argument("--classes", help="comma-separated digit classes to keep")
    common.add_argument("--normalize", action="store_const", const=True)
    common.add_argument("--cadence", type=int)
    common.add_argument("--final-window", type=int)
    common.add_argument("--store-records", action="store_const", const=True)
    common.add_argument("--no-interp-nugget", action="store_true")
    common.add_argument("--run", help="directory of a finished run (evaluate, velocity)")
    common.add_argument("--layer", type=int)
    common.add_argument("--window", type=int)
    common.add_argument("--grid", help="xmin,xmax,ymin,ymax,nx,ny")
    common.add_argument("--level", type=int)
    common.add_argument("--problem-seed", type=int)
    common.add_argument("--trials", type=int)
    common.add_argument("-v", "--verbose", action="store_true")
    p = _Parser(prog="kernel-flows", description="Kernel Flow experiments")
    sub = p.add_subparsers(dest="kind", required=True)
    for k in KINDS:
        sub.add_parser(k, parents=[common])
    return p


def config_from_args(args) -> ExperimentConfig:
    cfg = load_config(args.kind, args.config)
    for flag, name in FLAG_MAP.items():
        if name is None:
            continue
        v = getattr(args, flag, None)
        if v is not None:
            setattr(cfg, name, v)
    if args.no_interp_nugget:
        cfg.interp_nugget = False
    return cfg.resolve()


# --------------------------------------------------------------------------
# writers


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])


def write_manifest(cfg: ExperimentConfig, extra: Optional[dict] = None):
    doc = {
        "config": asdict(cfg),
        "seed": cfg.seed,
        "version": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
    }
    if extra:
        doc.update(extra)
    with open(os.path.join(cfg.out, "manifest.json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)


def read_manifest(run_dir) -> dict:
    with open(os.path.join(run_dir, "manifest.json")) as fh:
        return json.load(fh)


# --------------------------------------------------------------------------
# experiments


def run_pde_multires(cfg: ExperimentConfig) -> dict:
    problem = make_problem(cfg.problem_seed, cfg.level, cfg.modes)
    b = ConductivityField.constant(cfg.modes)
    rows = multiresolution_experiment(problem, b)
    write_csv(os.path.join(cfg.out, "multires.csv"), ["k", "rho_a", "rho_b", "e_a", "e_b"],
              [(r.k, r.rho_a, r.rho_b, r.e_a, r.e_b) for r in rows])
    trials = random_subset_experiment(problem, b, cfg.n_f, cfg.n_c, cfg.trials,
                                      np.random.default_rng(cfg.seed))
    write_csv(os.path.join(cfg.out, "subsets.csv"), ["trial", "rho_a", "rho_b", "e_a", "e_b"],
              [(t.trial, t.rho_a, t.rho_b, t.e_a, t.e_b) for t in trials])
    return {}


def run_pde_recover(cfg: ExperimentConfig) -> dict:
    problem = make_problem(cfg.problem_seed, cfg.level, cfg.modes)
    tc = TrainConfig(n_f=cfg.n_f, n_c=cfg.n_c, iterations=cfg.steps,
                     step_rule="normalized", step_size=cfg.eps_value, seed=cfg.seed)
    res = recover_conductivity(problem, tc)
    write_csv(os.path.join(cfg.out, "recover.csv"), ["step", "rho", "grad_norm", "e_b"],
              [(s.step, s.rho, s.grad_norm, e) for s, e in zip(res.trajectory.steps, res.errors)])
    x = problem.mesh.midpoints
    write_csv(os.path.join(cfg.out, "conductivity.csv"), ["x", "a", "b_initial", "b_final"],
              zip(x, problem.a(x), np.ones_like(x), ConductivityField(res.W)(x)))
    return {}


def _kernel(cfg: ExperimentConfig) -> GaussianKernel:
    return GaussianKernel(gamma=cfg.gamma, nugget=cfg.nugget or 0.0)


def _flow_config(cfg: ExperimentConfig) -> FlowConfig:
    return FlowConfig(n_f=cfg.n_f, n_c=cfg.n_c,
                      epsilon=EpsilonRule(cfg.eps_mode, cfg.eps_value, cfg.eps_decay),
                      interp_nugget=cfg.interp_nugget, drop_threshold=cfg.drop_threshold,
                      store_records=bool(cfg.store_records))


def _train(cfg: ExperimentConfig, state: FlowState, kernel, evaluator=None):
    rng = np.random.default_rng(cfg.seed)
    n_is = sorted(evaluator.subsets) if evaluator else []
    path = os.path.join(cfg.out, "train.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TrainRecord.header(n_is))

        def emit(rec: TrainRecord):
            w.writerow([repr(float(v)) if isinstance(v, float) else v for v in rec.row(n_is)])

        train_flow(state, kernel, _flow_config(cfg), cfg.steps, rng, cadence=cfg.cadence,
                   final_window=cfg.final_window, evaluator=evaluator, on_record=emit)
    if cfg.store_records and state.records:
        save_checkpoint(os.path.join(cfg.out, "flow.bin"), state.records, kernel, cfg.interp_nugget)


def _dump_points(path, X, labels):
    write_csv(path, ["index", "label"] + [f"x{j}" for j in range(X.shape[1])],
              [[i, int(l)] + list(map(float, x)) for i, (x, l) in enumerate(zip(X, labels))])


def run_swissroll(cfg: ExperimentConfig) -> dict:
    data = swiss_roll(cfg.n)
    kernel = _kernel(cfg)
    state = FlowState.start(data.points, data.signed)
    _dump_points(os.path.join(cfg.out, "initial.csv"), data.points, data.labels)
    _train(cfg, state, kernel)
    _dump_points(os.path.join(cfg.out, "positions.csv"), state.positions, data.labels)
    return {}


def image_datasets(cfg: ExperimentConfig):
    """Training and test sets for an image run, reproducible from ``cfg``."""
    rng = np.random.default_rng(cfg.seed)
    train_pool = load_mnist(cfg.data_dir, "train")
    try:
        test_pool = load_mnist(cfg.data_dir, "test")
    except FileNotFoundError:
        test_pool = None
    if cfg.classes:
        keep = [int(c) for c in cfg.classes.split(",")]
        train_pool = filter_classes(train_pool, keep)
        test_pool = filter_classes(test_pool, keep) if test_pool is not None else None
    if test_pool is None:
        train, test = split_train_test(train_pool, cfg.n, cfg.n_test, rng, balanced=False)
        source = "train-split"
    else:
        train = train_pool.subset(select_subset(train_pool, cfg.n, False, rng))
        test = test_pool.subset(select_subset(test_pool, cfg.n_test, False, rng))
        source = "test-files"
    if cfg.normalize:
        train = Dataset(normalize_l2(train.points), train.labels, train.n_classes, train.source)
        test = Dataset(normalize_l2(test.points), test.labels, test.n_classes, test.source)
    subsets = {}
    for k in cfg.n_i or [cfg.n]:
        balanced = k < cfg.n and k % train.n_classes == 0
        subsets[k] = select_subset(train, k, balanced, rng)
    return train, test, subsets, source


def run_image_kf(cfg: ExperimentConfig) -> dict:
    train, test, subsets, source = image_datasets(cfg)
    if cfg.gamma is None:
        cfg.gamma = gamma_heuristic(train.points)
    kernel = _kernel(cfg)
    state = FlowState.start(train.points, train.onehot, tracked=test.points)
    ev = Evaluator(kernel=kernel, test_classes=test.labels, subsets=subsets,
                   n_classes=train.n_classes)
    _train(cfg, state, kernel, ev)
    return {"test_source": source, "gamma_resolved": cfg.gamma}


def run_evaluate(cfg: ExperimentConfig) -> dict:
    man = read_manifest(cfg.run)
    prev = ExperimentConfig(**man["config"])
    if prev.kind != "image-kf":
        raise ConfigError("evaluate needs an image-kf run")
    if cfg.n_i:
        prev.n_i = cfg.n_i
    prev.seed = man["seed"]
    ckpt = os.path.join(cfg.run, "flow.bin")
    if not os.path.exists(ckpt):
        raise ConfigError("run has no checkpoint; train with --store-records")
    records, kernel, interp_nugget = load_checkpoint(ckpt)
    train, test, subsets, _ = image_datasets(prev)
    flowed_train = evaluate_flow(records, kernel, train.points, interp_nugget)
    flowed_test = evaluate_flow(records, kernel, test.points, interp_nugget)
    onehot = train.onehot
    rows = []
    for k in sorted(subsets):
        idx = subsets[k]
        pred = predict_classes(kernel, flowed_train[idx], onehot[idx], flowed_test)
        rows.append((k, float(np.mean(pred != test.labels))))
    write_csv(os.path.join(cfg.out, "evaluate.csv"), ["n_i", "test_error"], rows)
    return {"layers": len(records)}


def run_velocity(cfg: ExperimentConfig) -> dict:
    records, kernel, interp_nugget = load_checkpoint(os.path.join(cfg.run, "flow.bin"))
    if records and records[0].centers.shape[1] != 2:
        raise ConfigError("velocity fields need 2-D data")
    if cfg.grid:
        x0, x1, y0, y1, nx, ny = cfg.grid.split(",")
        xs, ys = np.linspace(float(x0), float(x1), int(nx)), np.linspace(float(y0), float(y1), int(ny))
    else:
        c = records[cfg.layer].centers
        lo, hi = c.min(axis=0) - 1, c.max(axis=0) + 1
        xs, ys = np.linspace(lo[0], hi[0], 25), np.linspace(lo[1], hi[1], 25)
    grid = np.stack(np.meshgrid(xs, ys), -1).reshape(-1, 2)
    inst, avg = velocity_fields(records, kernel, grid, cfg.layer, cfg.window, interp_nugget)
    write_csv(os.path.join(cfg.out, "velocity.csv"),
              ["x", "y", "vx_inst", "vy_inst", "vx_avg", "vy_avg"],
              np.hstack([grid, inst, avg]))
    return {}


RUNNERS = {
    "pde-multires": run_pde_multires,
    "pde-recover": run_pde_recover,
    "swissroll": run_swissroll,
    "image-kf": run_image_kf,
    "evaluate": run_evaluate,
    "velocity": run_velocity,
}


def run(cfg: ExperimentConfig) -> int:
    os.makedirs(cfg.out, exist_ok=True)
    write_manifest(cfg)
    extra = RUNNERS[cfg.kind](cfg)
    write_manifest(cfg, extra)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(config_from_args(args))
    except Exception as exc:  # one machine-parsable line, no traceback
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 2 if isinstance(exc, ConfigError) else 1


if __name__ == "__main__":
    sys.exit(main())
