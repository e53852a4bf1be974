"""Experiment runner.

Subcommands write plot-ready CSV (and a JSON summary where noted) into the
output directory. Settings come from an optional flat ``key = value`` file;
any key can be overridden by the flag of the same name (``--sigma2-z0`` for
``sigma2_z0``). ``QPDMM_OUTPUT_DIR`` overrides the configured output
directory unless ``--out-dir`` is given explicitly.

Exit codes: 0 success, 2 configuration error, 3 divergence.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics, privacy
from . import rng as _rng
from .graph import GraphError, generate_geometric_graph
from .optimizer import ConfigError, DivergenceError, OptimizerConfig, run
from .problem import ConsensusProblem, LeastSquaresProblem, ProblemError
from .quantizer import QuantizerConfig, QuantizerError

OUTPUT_ENV = "QPDMM_OUTPUT_DIR"
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3
COMPARE_THRESHOLD = 1e-8

SUMMARY_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "title": "qpdmm run summary",
    "type": "object",
    "required": ["converged_at", "final_mse", "total_bits"],
    "properties": {
        "converged_at": {"type": ["integer", "null"], "minimum": 0},
        "final_mse": {"type": "number", "minimum": 0},
        "total_bits": {"type": "integer", "minimum": 0},
    },
}


@dataclass
class ExperimentConfig:
    application: str = "consensus"
    n: int = 30
    seed: int = 0
    theta: float = 0.0
    c: float = 0.9
    gamma: float = 0.9
    l: int = 1
    delta0: float | None = None  # defaults to sqrt(sigma2_z0)
    sigma2_z0: float = 1.0
    max_iters: int = 500
    mse_threshold: float = 1e-10
    stop_rule: str = "oracle"
    average_quantized: bool = False
    init_bits: int = 64
    quantize: bool = True
    u: int | None = None
    p: int = 5
    corrupted: list = field(default_factory=list)  # 1-based node ids
    eavesdropper: bool = True
    trials: int = 10000
    iterations: int = 60
    bins: int = 16
    levels: list = field(default_factory=lambda: [1.0, 1e2, 1e4])
    delta_grid: list = field(default_factory=lambda: [0.05, 0.1, 0.25, 0.5, 1.0, 1.5, 2.0])
    delta: float = 0.5
    sigma2_s: float = 1.0
    delta_sr: float = 1e-5
    out_dir: str = "."

    def validate(self):
        errors = []
        if self.application not in ("consensus", "least-squares"):
            errors.append(f"application: must be 'consensus' or 'least-squares', got {self.application!r}")
        if self.n < 2:
            errors.append(f"n: must be >= 2, got {self.n}")
        for name, builder in (("optimizer", self.optimizer_config), ("quantizer", self.quantizer_config)):
            try:
                builder()
            except (ConfigError, QuantizerError) as exc:
                errors.append(f"{name}: {exc}")
        if any(not 1 <= c <= self.n for c in self.corrupted):
            errors.append(f"corrupted: node ids must be in 1..{self.n}")
        if self.trials < 100:
            errors.append(f"trials: must be >= 100, got {self.trials}")
        if self.bins < 2:
            errors.append(f"bins: must be >= 2, got {self.bins}")
        if any(v < 0 for v in self.levels):
            errors.append("levels: noise variances must be >= 0")
        if any(not d > 0 for d in self.delta_grid):
            errors.append("delta_grid: values must be > 0")
        if not (self.sigma2_s > 0 and self.delta_sr > 0 and self.delta > 0):
            errors.append("delta, sigma2_s, delta_sr: must be > 0")
        if errors:
            raise ConfigError("; ".join(errors))
        return self

    def optimizer_config(self, **over):
        kw = dict(theta=self.theta, c=self.c, max_iters=self.max_iters,
                  mse_threshold=self.mse_threshold, sigma2_z0=self.sigma2_z0,
                  init_bits=self.init_bits, stop_rule=self.stop_rule,
                  average_quantized=self.average_quantized)
        kw.update(over)
        return OptimizerConfig(**kw)

    def quantizer_config(self, sigma2_z0=None, **over):
        s2 = self.sigma2_z0 if sigma2_z0 is None else sigma2_z0
        delta0 = self.delta0
        if delta0 is None:
            delta0 = math.sqrt(s2) if s2 > 0 else 1.0
        kw = dict(l=self.l, delta0=delta0, gamma=self.gamma, enabled=self.quantize)
        kw.update(over)
        return QuantizerConfig(**kw)


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
_LIST_TYPES = {"corrupted": int, "levels": float, "delta_grid": float}


def _coerce(name, raw):
    if name in _LIST_TYPES:
        if isinstance(raw, list):
            return [_LIST_TYPES[name](v) for v in raw]
        raw = raw.strip()
        return [_LIST_TYPES[name](v) for v in raw.split(",") if v.strip()] if raw else []
    default = _FIELDS[name].default
    if name in ("delta0", "u"):
        if raw in (None, "", "none", "None"):
            return None
        return float(raw) if name == "delta0" else int(raw)
    if isinstance(default, bool):
        if isinstance(raw, bool):
            return raw
        low = str(raw).strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(float(raw)) if str(raw).strip().lower().count("e") else int(raw)
    if isinstance(default, float):
        return float(raw)
    return str(raw).strip()


def parse_config_text(text):
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = raw
    return values


def build_config(file_values, flag_values, env=None):
    env = os.environ if env is None else env
    merged = dict(file_values)
    if OUTPUT_ENV in env and "out_dir" not in flag_values:
        merged["out_dir"] = env[OUTPUT_ENV]
    merged.update(flag_values)
    kwargs = {}
    for key, raw in merged.items():
        try:
            kwargs[key] = _coerce(key, raw)
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from None
    return ExperimentConfig(**kwargs).validate()


# -- experiment plumbing -----------------------------------------------------

def make_instance(cfg):
    graph = generate_geometric_graph(cfg.n, cfg.seed)
    gen = _rng.substream(cfg.seed, _rng.DATA)
    if cfg.application == "consensus":
        problem = ConsensusProblem.random(cfg.n, gen, u=cfg.u or 1)
    else:
        problem = LeastSquaresProblem.random(cfg.n, gen, u=cfg.u or 3, p=cfg.p)
    return graph, problem


def _write(out_dir, name, text):
    path = Path(out_dir) / name
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(text)
    return path


def _rows_csv(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def run_csv(result):
    return result.to_csv()


def cmd_run(cfg, save_transcript=False):
    graph, problem = make_instance(cfg)
    result = run(graph, problem, cfg.optimizer_config(), cfg.quantizer_config(), seed=cfg.seed,
                 keep_history=False)
    _write(cfg.out_dir, "run.csv", run_csv(result))
    summary = result.summary()
    _write(cfg.out_dir, "run_summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if save_transcript:
        _write(cfg.out_dir, "transcript.json", result.transcript.to_json())
        _write(cfg.out_dir, "graph.json", graph.to_json())
        _write(cfg.out_dir, "problem.json", json.dumps(problem.to_dict()))
    return result, summary


def privacy_sweep(cfg, levels=None):
    """One run per noise level with ``delta0**2 = sigma2_z0``; returns ``{level: RunResult}``."""
    levels = sorted(cfg.levels if levels is None else levels)
    graph, problem = make_instance(cfg)
    out = {}
    for level in levels:
        q = cfg.quantizer_config(sigma2_z0=level, delta0=math.sqrt(level) if level > 0 else 1.0)
        out[level] = run(graph, problem, cfg.optimizer_config(sigma2_z0=level), q, seed=cfg.seed,
                         keep_history=False)
    return out


def cmd_privacy_sweep(cfg, sigma2_list=None):
    results = privacy_sweep(cfg, sigma2_list)
    rows = [(float(level), r.t, r.mse, r.cum_bits)
            for level, res in results.items() for r in res.trace]
    _write(cfg.out_dir, "privacy_sweep.csv", _rows_csv(("sigma2", "t", "mse", "cum_bits"), rows))
    return results


def cmd_privacy_curve(cfg):
    graph, _ = make_instance(cfg)
    if cfg.corrupted:
        model = privacy.AdversaryModel([c - 1 for c in cfg.corrupted], cfg.eavesdropper)
    else:
        model, _ = privacy.one_honest_neighbor_model(graph, eavesdropper=cfg.eavesdropper)
    rows = privacy.empirical_privacy_curve(
        graph, cfg.levels, model=model, trials=cfg.trials, seed=cfg.seed,
        config=cfg.optimizer_config(), qcfg=cfg.quantizer_config(), iterations=cfg.iterations,
        bins=cfg.bins, sigma2_s=cfg.sigma2_s)
    _write(cfg.out_dir, "privacy_curve.csv", privacy.curve_to_csv(rows))
    return rows


def rate_bound_rows(delta_grid, sigma2_s=1.0, delta_sr=1e-5):
    return [(float(d), privacy.min_bits_bound(d, sigma2_s, delta_sr)) for d in delta_grid]


def cmd_rate_bound(cfg):
    rows = rate_bound_rows(cfg.delta_grid, cfg.sigma2_s, cfg.delta_sr)
    _write(cfg.out_dir, "rate_bound.csv", _rows_csv(("delta", "bits"), rows))
    return rows


def cmd_calibrate(cfg):
    return privacy.required_noise_variance(cfg.delta, cfg.sigma2_s)


def compare_runs(cfg):
    """Proposed l-bit run against the unquantized 64-bit baseline, same graph, data and z0."""
    graph, problem = make_instance(cfg)
    opt = cfg.optimizer_config()
    z0 = _rng.substream(cfg.seed, _rng.ZINIT).normal(
        0.0, math.sqrt(opt.sigma2_z0), size=(2 * graph.m, problem.u))
    proposed = run(graph, problem, opt, cfg.quantizer_config(enabled=True), seed=cfg.seed, z0=z0,
                   keep_history=False)
    baseline = run(graph, problem, opt, cfg.quantizer_config(enabled=False), seed=cfg.seed, z0=z0,
                   keep_history=False)
    return {"proposed": proposed, "unquantized": baseline}


def cmd_compare(cfg):
    results = compare_runs(cfg)
    rows = [(name, r.t, r.mse, r.cum_bits) for name, res in results.items() for r in res.trace]
    _write(cfg.out_dir, "compare.csv", _rows_csv(("variant", "t", "mse", "cum_bits"), rows))
    summary = {name: {"bits_to_threshold": metrics.bits_to_threshold(res.trace, COMPARE_THRESHOLD),
                      "iterations_to_threshold": metrics.iterations_to_threshold(res.trace, COMPARE_THRESHOLD)}
               for name, res in results.items()}
    _write(cfg.out_dir, "compare_summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return results


# -- argument parsing --------------------------------------------------------

COMMANDS = ("run", "privacy-sweep", "privacy-curve", "rate-bound", "compare", "calibrate")


def build_parser():
    parser = argparse.ArgumentParser(prog="qpdmm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value settings file")
        for fname, f in _FIELDS.items():
            flag = "--" + fname.replace("_", "-")
            if isinstance(f.default, bool):
                p.add_argument(flag, dest=fname, action="store_const", const="true", default=None)
                p.add_argument("--no-" + fname.replace("_", "-"), dest=fname, action="store_const",
                               const="false")
            else:
                p.add_argument(flag, dest=fname, default=None)
        if name == "run":
            p.add_argument("--save-transcript", action="store_true")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    ns = vars(args)
    flags = {k: v for k, v in ns.items() if k in _FIELDS and v is not None}
    try:
        file_values = {}
        if args.config:
            file_values = parse_config_text(Path(args.config).read_text())
        cfg = build_config(file_values, flags)
        if args.command == "run":
            _, summary = cmd_run(cfg, save_transcript=args.save_transcript)
            print(json.dumps(summary, sort_keys=True))
        elif args.command == "privacy-sweep":
            cmd_privacy_sweep(cfg)
        elif args.command == "privacy-curve":
            cmd_privacy_curve(cfg)
        elif args.command == "rate-bound":
            for d, bits in cmd_rate_bound(cfg):
                print(f"{d!r},{bits!r}")
        elif args.command == "compare":
            cmd_compare(cfg)
        elif args.command == "calibrate":
            print(repr(cmd_calibrate(cfg)))
    except (ConfigError, QuantizerError, ProblemError, GraphError, privacy.PrivacyError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    return 0


if __name__ == "__main__":
    sys.exit(main())
