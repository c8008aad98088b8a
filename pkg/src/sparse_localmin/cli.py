"""Command-line driver for data generation, probing, audits and learning sweeps.

Exit codes: 0 success, 1 configuration error, 2 runtime error, 3 failed
invariant suite.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import statistics
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import linregress

from .dictionary import Dictionary, hadamard, hadamard_dirac
from .errors import (ConditionViolatedError, ConvergenceError, InvalidArgumentError,
                     SingularSupportError, TuningFailedError)
from .learn import DEFAULT_GRID, LearnConfig, learn_dictionary, match_atoms, tune_lambda_report
from .model import CoefficientModel, NoiseModel, generate_dataset
from .serialization import (export_batch_csv, load_batch, load_dictionary_csv, save_batch,
                            save_dictionary_csv)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_INVARIANT = 0, 1, 2, 3
RECORD_HEADER = ("experiment", "point", "trial", "init", "lambda", "normalized_error", "seed",
                 "wall_ms")
SUMMARY_HEADER = ("experiment", "point", "init", "median_normalized_error", "trials")
EXPERIMENTS = ("ErrVsN", "ErrVsSigma", "Probe", "Coincide", "TheoryCheck")
DICTIONARY_KINDS = ("Hadamard", "HadamardDirac", "FromFile")
AUX_STREAM = 1


class ConfigError(InvalidArgumentError):
    pass


# ---------------------------------------------------------------- configuration

@dataclass
class ExperimentConfig:
    """Sweep description; JSON files use these field names.

    ``dictionary`` is ``{"kind": "Hadamard" | "HadamardDirac", "m": int}`` or
    ``{"kind": "FromFile", "path": str}``; ``lambda_policy`` is
    ``{"kind": "Fixed", "lambda": float}`` or ``{"kind": "TunedToK"}``.
    ``sweep`` holds sample sizes for ErrVsN and noise levels for ErrVsSigma.
    """

    experiment: str
    dictionary: dict
    sweep: list
    trials: int = 5
    seed: int = 0
    lambda_policy: dict = field(default_factory=lambda: {"kind": "TunedToK"})
    k: int = 2
    sigma: float = 1e-3
    n: int = 10_000
    inits: list = field(default_factory=lambda: ["oracle", "random"])
    alpha_lo: float = 0.1
    alpha_hi: float = 10.0
    aux_n: int = 2000
    grid: list | None = None
    batch_size: int = 128
    epochs: int = 25
    error_mode: str | None = None
    t: float = 0.1
    t_prime: float = 0.0
    n_probe: int = 256
    include_axes: bool = True

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"experiment must be one of {EXPERIMENTS}")
        kind = self.dictionary.get("kind") if isinstance(self.dictionary, dict) else None
        if kind not in DICTIONARY_KINDS:
            raise ConfigError(f"dictionary kind must be one of {DICTIONARY_KINDS}")
        if self.experiment in ("ErrVsN", "ErrVsSigma"):
            if not self.sweep:
                raise ConfigError("sweep must be nonempty")
            if any(b <= a for a, b in zip(self.sweep, self.sweep[1:])):
                raise ConfigError("sweep must be strictly increasing")
            if self.experiment == "ErrVsN" and any(int(v) != v or v < 1 for v in self.sweep):
                raise ConfigError("ErrVsN sweep values must be positive integers")
            if self.experiment == "ErrVsSigma" and any(v < 0 for v in self.sweep):
                raise ConfigError("noise levels must be nonnegative")
        if self.trials < 1:
            raise ConfigError("trials must be at least 1")
        if self.lambda_policy.get("kind") not in ("Fixed", "TunedToK"):
            raise ConfigError("lambda_policy kind must be Fixed or TunedToK")
        if self.lambda_policy["kind"] == "Fixed" and not self.lambda_policy.get("lambda", 0) > 0:
            raise ConfigError("Fixed lambda_policy needs a positive lambda")
        bad = [i for i in self.inits if i not in ("oracle", "random")]
        if bad or not self.inits:
            raise ConfigError("inits must be a nonempty subset of oracle, random")

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as err:
            raise ConfigError(str(err)) from err

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as err:
            raise ConfigError(f"cannot read config {path}: {err}") from err
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(data)

    def coefficient_model(self) -> CoefficientModel:
        return CoefficientModel(self.k, self.alpha_lo, self.alpha_hi)


@dataclass(frozen=True)
class ResultRecord:
    experiment: str
    point: float
    trial: int
    init: str
    lam: float
    normalized_error: float
    seed: int
    wall_ms: int

    def row(self) -> list:
        point = str(int(self.point)) if self.experiment == "ErrVsN" else repr(float(self.point))
        return [self.experiment, point, self.trial, self.init, repr(self.lam),
                repr(self.normalized_error), self.seed, self.wall_ms]


def build_dictionary(desc: dict) -> Dictionary:
    kind = desc.get("kind")
    try:
        if kind == "Hadamard":
            return hadamard(int(desc["m"]))
        if kind == "HadamardDirac":
            return hadamard_dirac(int(desc["m"]))
        if kind == "FromFile":
            return load_dictionary_csv(desc["path"])
    except KeyError as err:
        raise ConfigError(f"dictionary description misses {err}") from err
    except OSError as err:
        raise ConfigError(f"cannot read dictionary: {err}") from err
    raise ConfigError(f"unknown dictionary kind {kind!r}")


def parse_dictionary_arg(text: str) -> dict:
    """``hadamard:16``, ``hadamard-dirac:16`` or a CSV path."""
    name, _, size = text.partition(":")
    if name.lower() == "hadamard" and size:
        return {"kind": "Hadamard", "m": int(size)}
    if name.lower() in ("hadamard-dirac", "hadamarddirac") and size:
        return {"kind": "HadamardDirac", "m": int(size)}
    return {"kind": "FromFile", "path": text}


def derive_seed(master: int, *key: int) -> int:
    """Deterministic 63-bit seed for the stream ``key`` of ``master``."""
    ss = np.random.SeedSequence(master, spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


def choose_lambda(config: ExperimentConfig, D0: Dictionary, sigma: float, seed: int) -> float:
    if config.lambda_policy["kind"] == "Fixed":
        return float(config.lambda_policy["lambda"])
    aux = generate_dataset(D0, config.coefficient_model(), NoiseModel(sigma), config.aux_n, seed)
    return tune_lambda_report(aux, D0, config.grid or DEFAULT_GRID, config.k).lam


# ---------------------------------------------------------------- learning sweeps

def _trial(args) -> list[ResultRecord]:
    config, point_index, trial, timing = args
    D0 = build_dictionary(config.dictionary)
    point = config.sweep[point_index]
    n, sigma = (int(point), config.sigma) if config.experiment == "ErrVsN" else (config.n, float(point))
    seed = derive_seed(config.seed, point_index, trial)
    lam = choose_lambda(config, D0, sigma, derive_seed(config.seed, point_index, trial, AUX_STREAM))
    batch = generate_dataset(D0, config.coefficient_model(), NoiseModel(sigma), n, seed)
    out = []
    for init in config.inits:
        start = time.perf_counter()
        lc = LearnConfig(lam, config.batch_size, config.epochs, init, D0.entries, seed=seed)
        D_hat = learn_dictionary(batch, D0.p, lc)
        err = match_atoms(D_hat, D0, config.error_mode).normalized_error
        wall = int(round(1000 * (time.perf_counter() - start))) if timing else 0
        out.append(ResultRecord(config.experiment, point, trial, init, lam, err, seed, wall))
    return out


def summary_rows(records: list[ResultRecord]) -> list[list]:
    groups: dict = {}
    for r in records:
        groups.setdefault((r.point, r.init), []).append(r.normalized_error)
    rows = []
    for (point, init), errs in sorted(groups.items()):
        exp = records[0].experiment
        p = str(int(point)) if exp == "ErrVsN" else repr(float(point))
        rows.append([exp, p, init, repr(float(statistics.median(errs))), len(errs)])
    return rows


def summary_path(out_path) -> Path:
    out_path = Path(out_path)
    return out_path.with_name(out_path.stem + "_summary.csv")


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _canonical(records):
    order = {name: i for i, name in enumerate(("oracle", "random"))}
    return sorted(records, key=lambda r: (r.point, r.trial, order[r.init]))


def run(config: ExperimentConfig, out_path, threads: int = 1, timing: bool = True
        ) -> list[ResultRecord]:
    """Run an ErrVsN or ErrVsSigma sweep; write the records and per-point medians.

    Records are written in canonical order (point, trial, init). On failure
    the records finished so far are written before the error propagates.
    """
    if config.experiment not in ("ErrVsN", "ErrVsSigma"):
        raise ConfigError("run handles ErrVsN and ErrVsSigma experiments")
    build_dictionary(config.dictionary)
    jobs = [(config, i, t, timing) for i in range(len(config.sweep)) for t in range(config.trials)]
    records: list[ResultRecord] = []
    try:
        if threads > 1:
            with ProcessPoolExecutor(max_workers=threads) as pool:
                for part in pool.map(_trial, jobs):
                    records.extend(part)
        else:
            for job in jobs:
                records.extend(_trial(job))
    finally:
        records = _canonical(records)
        _write_csv(out_path, RECORD_HEADER, [r.row() for r in records])
        if records:
            _write_csv(summary_path(out_path), SUMMARY_HEADER, summary_rows(records))
    return records


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    std_error: float
    intercept: float
    n_points: int


def fit_slope(summary_csv, init: str | None = "oracle") -> SlopeFit:
    """Least-squares slope of log median error against log point value."""
    xs, ys = [], []
    with open(summary_csv, newline="") as fh:
        for row in csv.DictReader(fh):
            if init is not None and row["init"] != init:
                continue
            x, y = float(row["point"]), float(row["median_normalized_error"])
            if x > 0 and y > 0:
                xs.append(math.log(x))
                ys.append(math.log(y))
    return fit_loglog_slope_from_logs(xs, ys)


def fit_loglog_slope(points, values) -> SlopeFit:
    pairs = [(math.log(x), math.log(y)) for x, y in zip(points, values) if x > 0 and y > 0]
    return fit_loglog_slope_from_logs([a for a, _ in pairs], [b for _, b in pairs])


def fit_loglog_slope_from_logs(xs, ys) -> SlopeFit:
    if len(xs) < 3:
        raise InvalidArgumentError("need at least 3 points with positive values")
    res = linregress(xs, ys)
    return SlopeFit(float(res.slope), float(res.stderr), float(res.intercept), len(xs))


# ---------------------------------------------------------------- probing commands

def _theory_inputs(config: ExperimentConfig, D0: Dictionary):
    from .theory import DictionaryStats, ModelScalars
    return DictionaryStats.from_dictionary(D0, config.k), ModelScalars.from_model(config.coefficient_model())


def run_probe(config: ExperimentConfig, constants=None) -> dict:
    from .theory import bound_report, probe_infimum
    D0 = build_dictionary(config.dictionary)
    lam = choose_lambda(config, D0, config.sigma, derive_seed(config.seed, 0, 0, AUX_STREAM))
    batch = generate_dataset(D0, config.coefficient_model(), NoiseModel(config.sigma), config.n,
                             derive_seed(config.seed, 0, 0))
    rng = np.random.default_rng(derive_seed(config.seed, 0, 0, 2))
    res = probe_infimum(batch, D0, config.t, lam, config.n_probe, rng, config.include_axes)
    out = {"lambda": lam, "t": config.t, "n": config.n, "min_delta_F": res.min_delta_F,
           "min_delta_Phi": res.min_delta_Phi, "pathwise_ok": res.pathwise_ok,
           "n_evaluations": res.n_evaluations,
           "max_r_n": max(e.r_n for e in res.evaluations)}
    stats, scalars = _theory_inputs(config, D0)
    try:
        rep = bound_report(D0.m, D0.p, config.k, stats, scalars, config.sigma, lam, config.t,
                           config.n, constants)
        out["bound_report"] = json.loads(rep.to_json())
    except ConditionViolatedError as err:
        out["bound_report"] = {"condition_violated": err.condition, "message": str(err)}
    return out


def run_coincide(config: ExperimentConfig) -> dict:
    from .theory import CoincideConfig, coincide_frequency
    D0 = build_dictionary(config.dictionary)
    lam = choose_lambda(config, D0, config.sigma, derive_seed(config.seed, 0, 0, AUX_STREAM))
    cc = CoincideConfig(D0, config.coefficient_model(), config.sigma, config.t_prime, lam,
                        max(config.t, config.t_prime))
    res = coincide_frequency(cc, config.n, np.random.default_rng(derive_seed(config.seed, 0, 0)))
    return {"lambda": lam, "t_prime": config.t_prime, "t": cc.radius, "sigma": config.sigma,
            **asdict(res)}


# ---------------------------------------------------------------- argument parsing

def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="experiment configuration JSON")
    parser.add_argument("--seed", type=int, help="master seed (overrides the config)")
    parser.add_argument("--out", help="output path")
    parser.add_argument("--threads", type=int, default=1, help="worker processes for trials")
    parser.add_argument("--constants", help="JSON object overriding c0, c1, c2, c3, c_lambda")
    parser.add_argument("--no-timing", action="store_true", help="write wall_ms as 0")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparse-localmin", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a signal batch")
    _common(p)
    p.add_argument("--dictionary", default="hadamard:16")
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--alpha-lo", type=float, default=0.1)
    p.add_argument("--alpha-hi", type=float, default=10.0)
    p.add_argument("--csv", help="also export signals as CSV")

    p = sub.add_parser("learn", help="learn a dictionary from a batch file")
    _common(p)
    p.add_argument("--batch", required=True, help="binary batch file")
    p.add_argument("--p", type=int, help="number of atoms (default: from the batch header)")
    p.add_argument("--lambda", dest="lam", type=float, help="regularization (default: tuned)")
    p.add_argument("--reference", help="reference dictionary for tuning, oracle init and error")
    p.add_argument("--init", choices=("random", "oracle"), default="random")
    p.add_argument("--epochs", type=int, default=25)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--checkpoint-dir")

    for name, text in (("probe", "probe the local-minimum property"),
                       ("coincide", "estimate the exact-recovery frequency")):
        p = sub.add_parser(name, help=text)
        _common(p)
        p.add_argument("--dictionary")
        p.add_argument("--k", type=int)
        p.add_argument("--sigma", type=float)
        p.add_argument("--n", type=int, help="signals (probe) or trials (coincide)")
        p.add_argument("--t", type=float)
        p.add_argument("--t-prime", type=float)
        p.add_argument("--lambda", dest="lam", type=float)
        p.add_argument("--n-probe", type=int)

    for name in ("exp-n", "exp-sigma"):
        p = sub.add_parser(name, help=f"run the {name[4:]} learning sweep")
        _common(p)

    p = sub.add_parser("theory-check", help="run the randomized invariant suites")
    _common(p)

    p = sub.add_parser("slope", help="log-log slope of a summary CSV")
    _common(p)
    p.add_argument("summary", help="summary CSV written by exp-n or exp-sigma")
    p.add_argument("--init", default="oracle", help="init curve to fit, or 'all'")
    return parser


def _load_constants(path):
    from .theory import UniversalConstants
    if path is None:
        return None
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as err:
        raise ConfigError(f"cannot read constants {path}: {err}") from err
    return UniversalConstants.from_dict(data)


def _emit(obj, out) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True, default=float) + "\n"
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _probe_config(args, experiment: str) -> ExperimentConfig:
    base = (ExperimentConfig.load(args.config).__dict__.copy() if args.config
            else {"dictionary": {"kind": "Hadamard", "m": 16}, "sweep": []})
    base["experiment"] = experiment
    if experiment == "Coincide" and not args.config:
        base.update(n=2000, sigma=0.0, t=0.0)
    for attr, key in (("k", "k"), ("sigma", "sigma"), ("n", "n"), ("t", "t"),
                      ("t_prime", "t_prime"), ("n_probe", "n_probe"), ("seed", "seed")):
        value = getattr(args, attr, None)
        if value is not None:
            base[key] = value
    if getattr(args, "dictionary", None):
        base["dictionary"] = parse_dictionary_arg(args.dictionary)
    if getattr(args, "lam", None) is not None:
        base["lambda_policy"] = {"kind": "Fixed", "lambda": args.lam}
    return ExperimentConfig.from_dict(base)


def _cmd_gen(args) -> int:
    if not args.out:
        raise ConfigError("gen needs --out")
    D0 = build_dictionary(parse_dictionary_arg(args.dictionary))
    coeff = CoefficientModel(args.k, args.alpha_lo, args.alpha_hi)
    batch = generate_dataset(D0, coeff, NoiseModel(args.sigma), args.n, args.seed or 0)
    save_batch(args.out, batch)
    if args.csv:
        export_batch_csv(args.csv, batch)
    return EXIT_OK


def _cmd_learn(args) -> int:
    try:
        batch = load_batch(args.batch)
        ref = load_dictionary_csv(args.reference) if args.reference else None
    except OSError as err:
        raise ConfigError(f"cannot read input: {err}") from err
    p = args.p or batch.p
    lam = args.lam
    if lam is None:
        if ref is None:
            raise ConfigError("learn needs --lambda or a --reference dictionary for tuning")
        aux = generate_dataset(ref, CoefficientModel(batch.k), NoiseModel(batch.metadata["sigma"]),
                               2000, derive_seed(args.seed or 0, 0, 0, AUX_STREAM))
        lam = tune_lambda_report(aux, ref, DEFAULT_GRID, batch.k).lam
    if args.init == "oracle" and ref is None:
        raise ConfigError("oracle init needs --reference")
    lc = LearnConfig(lam, args.batch_size, args.epochs, args.init,
                     ref.entries if ref is not None else None, seed=args.seed or 0,
                     checkpoint_dir=args.checkpoint_dir)
    history: list = []
    D_hat = learn_dictionary(batch, p, lc, history)
    if args.out:
        save_dictionary_csv(args.out, D_hat)
    report = {"lambda": lam, "objective_history": history}
    if ref is not None and ref.shape == D_hat.shape:
        mr = match_atoms(D_hat, ref)
        report.update(matched_error=mr.matched_error, normalized_error=mr.normalized_error)
    _emit(report, None)
    return EXIT_OK


def _cmd_sweep(args, experiment: str) -> int:
    if not args.config:
        raise ConfigError(f"{args.command} needs --config")
    config = ExperimentConfig.load(args.config)
    if config.experiment != experiment:
        raise ConfigError(f"{args.command} expects experiment {experiment}, got {config.experiment}")
    if args.seed is not None:
        config.seed = args.seed
    if not args.out:
        raise ConfigError(f"{args.command} needs --out")
    run(config, args.out, max(1, args.threads), timing=not args.no_timing)
    return EXIT_OK


def _cmd_theory_check(args) -> int:
    from .theory import run_invariant_suites
    results = run_invariant_suites(args.seed or 0)
    lines = [f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail}" for r in results]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK if all(r.passed for r in results) else EXIT_INVARIANT


def _cmd_slope(args) -> int:
    fit = fit_slope(args.summary, None if args.init == "all" else args.init)
    _emit(asdict(fit), args.out)
    return EXIT_OK


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as stop:
        # usage errors are configuration errors; --help exits cleanly
        return EXIT_OK if stop.code in (0, None) else EXIT_CONFIG
    try:
        if args.command == "gen":
            return _cmd_gen(args)
        if args.command == "learn":
            return _cmd_learn(args)
        if args.command == "probe":
            constants = _load_constants(args.constants)
            _emit(run_probe(_probe_config(args, "Probe"), constants), args.out)
            return EXIT_OK
        if args.command == "coincide":
            _emit(run_coincide(_probe_config(args, "Coincide")), args.out)
            return EXIT_OK
        if args.command == "exp-n":
            return _cmd_sweep(args, "ErrVsN")
        if args.command == "exp-sigma":
            return _cmd_sweep(args, "ErrVsSigma")
        if args.command == "theory-check":
            _load_constants(args.constants)
            return _cmd_theory_check(args)
        if args.command == "slope":
            return _cmd_slope(args)
    except (InvalidArgumentError, ConditionViolatedError, SingularSupportError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConvergenceError, TuningFailedError, OSError, RuntimeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
