"""Experiment front-end: scenario/config files and the generate-scenario, baseline, train,
evaluate and ablate subcommands.

Scenario and experiment configs are INI files (sections of key = value pairs). Relative output
paths are resolved under $HIERTSC_OUT_ROOT when it is set.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .neural import CheckpointError
from .simulator import (EPISODE_SECONDS, FLOW_PATTERNS, FlowSpec, NoTrafficError, episode_metrics,
                        ftc_controller, max_pressure_controller, run_episode)
from .training import VARIANTS, TrainConfig, Trainer, TrainingDiverged, append_log

log = logging.getLogger(__name__)

SCENARIO_VERSION = 1
CSV_SCHEMA_VERSION = 1
OUT_ROOT_ENV = "HIERTSC_OUT_ROOT"

# Exit codes by failure category.
EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_CHECKPOINT = 4
EXIT_DIVERGED = 5
EXIT_SIMULATION = 6

# kind -> (rows, cols, region_rows, region_cols, min_rate, max_rate)
SCENARIO_KINDS = {
    "grid4x4": (4, 4, 2, 2, 0.018, 0.038),
    "grid5x5": (5, 5, 2, 2, 0.033, 0.379),
    "grid2x2": (2, 2, 1, 1, 0.05, 0.10),
}

METRIC_COLUMNS = ("episode", "seed", "ATT", "ADT", "throughput", "mean_reward")
BASELINE_COLUMNS = ("controller", "seed", "ATT", "ADT", "throughput")
CONTROLLERS = {"ftc": ftc_controller, "maxpressure": max_pressure_controller}


class ConfigError(ValueError):
    pass


# -- scenario ----------------------------------------------------------------------------

@dataclass(frozen=True)
class Scenario:
    kind: str = "grid2x2"
    rows: int = 2
    cols: int = 2
    link_length: float = 200.0
    speed_limit: float = 13.89
    region_rows: int = 1
    region_cols: int = 1
    pattern: str = "multimodal_gaussian"
    min_rate: float = 0.05
    max_rate: float = 0.10
    flow_seed: int = 0
    horizon: int = EPISODE_SECONDS

    def flow(self) -> FlowSpec:
        return FlowSpec(self.pattern, self.min_rate, self.max_rate, seed=self.flow_seed, horizon=self.horizon)

    def train_fields(self) -> dict:
        return {"rows": self.rows, "cols": self.cols, "region_rows": self.region_rows,
                "region_cols": self.region_cols, "link_length": self.link_length,
                "speed_limit": self.speed_limit, "flow_pattern": self.pattern, "min_rate": self.min_rate,
                "max_rate": self.max_rate, "flow_seed": self.flow_seed, "horizon": self.horizon}


_SCENARIO_SECTIONS = {
    "network": ("kind", "rows", "cols", "link_length", "speed_limit", "region_rows", "region_cols"),
    "flow": ("pattern", "min_rate", "max_rate", "flow_seed", "horizon"),
}


def _convert(value: str, kind: type, key: str):
    try:
        if kind is bool:
            lowered = value.strip().lower()
            if lowered not in ("true", "false"):
                raise ValueError(value)
            return lowered == "true"
        return kind(value)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {value!r} as {kind.__name__}") from exc


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    return str(value)


def _field_types(cls) -> dict[str, type]:
    types = {"int": int, "float": float, "str": str, "bool": bool}
    return {f.name: types.get(f.type if isinstance(f.type, str) else f.type.__name__, str) for f in fields(cls)}


def _parser() -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    return cp


def _dump(cp: configparser.ConfigParser) -> str:
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def scenario_to_text(sc: Scenario) -> str:
    cp = _parser()
    cp["meta"] = {"version": str(SCENARIO_VERSION)}
    values = asdict(sc)
    for section, keys in _SCENARIO_SECTIONS.items():
        cp[section] = {k: _format(values[k]) for k in keys}
    return _dump(cp)


def scenario_from_text(text: str) -> Scenario:
    cp = _parser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed scenario: {exc}") from exc
    if not cp.has_section("meta") or cp["meta"].get("version") != str(SCENARIO_VERSION):
        raise ConfigError(f"scenario version mismatch: expected {SCENARIO_VERSION}")
    extra = set(cp.sections()) - set(_SCENARIO_SECTIONS) - {"meta"}
    if extra or set(cp["meta"]) != {"version"}:
        raise ConfigError(f"unknown scenario sections/keys: {sorted(extra) or sorted(set(cp['meta']) - {'version'})}")
    types = _field_types(Scenario)
    values = {}
    for section, keys in _SCENARIO_SECTIONS.items():
        if not cp.has_section(section):
            continue
        unknown = set(cp[section]) - set(keys)
        if unknown:
            raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
        for k, v in cp[section].items():
            values[k] = _convert(v, types[k], k)
    sc = Scenario(**values)
    if sc.kind not in SCENARIO_KINDS:
        raise ConfigError(f"unknown scenario kind {sc.kind!r}")
    try:
        sc.flow()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return sc


def load_scenario(path: str | Path) -> Scenario:
    try:
        return scenario_from_text(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read scenario {path}: {exc}") from exc


def make_scenario(kind: str, pattern: str, seed: int) -> Scenario:
    if kind not in SCENARIO_KINDS:
        raise ConfigError(f"unknown scenario kind {kind!r}; expected one of {sorted(SCENARIO_KINDS)}")
    if pattern not in FLOW_PATTERNS:
        raise ConfigError(f"unknown flow pattern {pattern!r}; expected one of {FLOW_PATTERNS}")
    rows, cols, rr, rc, lo, hi = SCENARIO_KINDS[kind]
    return Scenario(kind, rows, cols, 200.0, 13.89, rr, rc, pattern, lo, hi, int(seed), EPISODE_SECONDS)


# -- experiment config -------------------------------------------------------------------

# TrainConfig fields that come from the scenario file rather than the experiment config.
_SCENARIO_OWNED = {"rows", "cols", "region_rows", "region_cols", "link_length", "speed_limit",
                   "flow_pattern", "min_rate", "max_rate", "flow_seed", "horizon", "seed"}
_HYPER_KEYS = tuple(f.name for f in fields(TrainConfig) if f.name not in _SCENARIO_OWNED)


@dataclass
class ExperimentConfig:
    scenario: str = ""
    seeds: tuple[int, ...] = (0,)
    out: str = "runs"
    eval_seeds: tuple[int, ...] = (1000, 1001, 1002)
    hyper: dict = field(default_factory=dict)

    def __post_init__(self):
        unknown = set(self.hyper) - set(_HYPER_KEYS)
        if unknown:
            raise ConfigError(f"unknown hyperparameter keys: {sorted(unknown)}")
        if not self.seeds:
            raise ConfigError("at least one seed required")
        self.seeds = tuple(int(s) for s in self.seeds)
        self.eval_seeds = tuple(int(s) for s in self.eval_seeds)

    def train_config(self, scenario: Scenario, seed: int, **overrides) -> TrainConfig:
        base = {**asdict(TrainConfig()), **self.hyper, **scenario.train_fields(), "seed": int(seed), **overrides}
        try:
            return TrainConfig.from_dict(base)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


def config_to_text(cfg: ExperimentConfig) -> str:
    cp = _parser()
    cp["experiment"] = {"scenario": cfg.scenario, "seeds": _format(cfg.seeds), "out": cfg.out,
                        "eval_seeds": _format(cfg.eval_seeds)}
    defaults = asdict(TrainConfig())
    cp["hyperparameters"] = {k: _format(cfg.hyper.get(k, defaults[k])) for k in _HYPER_KEYS}
    return _dump(cp)


def _int_list(text: str, key: str) -> tuple[int, ...]:
    try:
        return tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError as exc:
        raise ConfigError(f"{key}: expected comma-separated integers, got {text!r}") from exc


def config_from_text(text: str) -> ExperimentConfig:
    cp = _parser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    extra = set(cp.sections()) - {"experiment", "hyperparameters"}
    if extra:
        raise ConfigError(f"unknown config sections: {sorted(extra)}")
    exp = dict(cp["experiment"]) if cp.has_section("experiment") else {}
    unknown = set(exp) - {"scenario", "seeds", "out", "eval_seeds"}
    if unknown:
        raise ConfigError(f"unknown keys in [experiment]: {sorted(unknown)}")
    kwargs = {}
    if "scenario" in exp:
        kwargs["scenario"] = exp["scenario"]
    if "out" in exp:
        kwargs["out"] = exp["out"]
    for key in ("seeds", "eval_seeds"):
        if key in exp:
            kwargs[key] = _int_list(exp[key], key)
    types = _field_types(TrainConfig)
    hyper = {}
    if cp.has_section("hyperparameters"):
        for k, v in cp["hyperparameters"].items():
            if k not in _HYPER_KEYS:
                raise ConfigError(f"unknown hyperparameter {k!r}")
            hyper[k] = _convert(v, types[k], k)
    return ExperimentConfig(hyper=hyper, **kwargs)


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        return config_from_text(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


# -- helpers -----------------------------------------------------------------------------

def resolve_out(path: str | Path) -> Path:
    path = Path(path)
    root = os.environ.get(OUT_ROOT_ENV)
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


def _write_csv(path: Path, columns: Sequence[str], rows: Sequence[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema_version={CSV_SCHEMA_VERSION}\n")
        writer = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def read_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def _summary(values: Sequence[float]) -> str:
    arr = np.asarray(values, dtype=float)
    return f"{arr.mean():.4f}±{arr.std():.4f}"


# -- commands ----------------------------------------------------------------------------

def cmd_generate_scenario(kind: str, pattern: str, seed: int, out: str | Path) -> Path:
    path = resolve_out(out)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(scenario_to_text(make_scenario(kind, pattern, seed)))
    return path


def cmd_baseline(scenario: Scenario, controllers: Sequence[str], seeds: Sequence[int], out: str | Path) -> list[dict]:
    net = build_network(scenario)
    flow = scenario.flow()
    rows = []
    for name in controllers:
        if name not in CONTROLLERS:
            raise ConfigError(f"unknown controller {name!r}; expected one of {sorted(CONTROLLERS)}")
        for seed in seeds:
            try:
                m = episode_metrics(run_episode(net, flow, CONTROLLERS[name], int(seed), scenario.horizon))
            except NoTrafficError as exc:
                raise NoTrafficError(f"{name} seed {seed}: {exc}") from exc
            rows.append({"controller": name, "seed": int(seed), **m})
    footer = []
    for name in controllers:
        sel = [r for r in rows if r["controller"] == name]
        footer.append({"controller": name, "seed": "mean±std",
                       **{k: _summary([r[k] for r in sel]) for k in ("ATT", "ADT", "throughput")}})
    _write_csv(resolve_out(out), BASELINE_COLUMNS, rows + footer)
    return rows


def build_network(scenario: Scenario):
    from .network import build_grid_network
    return build_grid_network(scenario.rows, scenario.cols, scenario.link_length, scenario.speed_limit,
                              scenario.region_rows, scenario.region_cols)


def cmd_train(cfg: ExperimentConfig, scenario: Scenario, out: str | Path, seeds: Sequence[int] | None = None,
              **overrides) -> dict[int, Trainer]:
    out = resolve_out(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "experiment.ini").write_text(config_to_text(cfg))
    (out / "scenario.ini").write_text(scenario_to_text(scenario))
    trainers = {}
    for seed in (seeds or cfg.seeds):
        tc = cfg.train_config(scenario, seed, **overrides)
        run_dir = out / f"{tc.variant}_seed{seed}"
        trainer = Trainer(tc)
        trainer.train(tc.episodes, out_dir=run_dir, log_path=run_dir / "train_log.csv")
        trainers[seed] = trainer
    return trainers


def _check_compatible(trainer: Trainer, scenario: Scenario) -> None:
    tc = trainer.config
    for key, value in (("rows", scenario.rows), ("cols", scenario.cols),
                       ("region_rows", scenario.region_rows), ("region_cols", scenario.region_cols)):
        if getattr(tc, key) != value:
            raise CheckpointError(f"checkpoint was trained with {key}={getattr(tc, key)}, scenario has {value}")


def evaluate_trainer(trainer: Trainer, scenario: Scenario, seeds: Sequence[int]) -> list[dict]:
    _check_compatible(trainer, scenario)
    rows = trainer.evaluate(seeds, scenario.flow())
    return [{"episode": i, **r} for i, r in enumerate(rows)]


def cmd_evaluate(checkpoint: str | Path, scenario: Scenario, seeds: Sequence[int], out: str | Path) -> list[dict]:
    trainer = Trainer.load(checkpoint)
    rows = evaluate_trainer(trainer, scenario, seeds)
    _write_csv(resolve_out(out), METRIC_COLUMNS, rows)
    return rows


def cmd_ablate(cfg: ExperimentConfig, scenario: Scenario, variants: Sequence[str], out: str | Path,
               tail: int = 10) -> list[dict]:
    """Train each variant on the shared seeds and write a metric-by-variant table."""
    out = resolve_out(out)
    table = {}
    for variant in variants:
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        trainers = cmd_train(cfg, scenario, out, variant=variant)
        finals, att, adt = [], [], []
        for trainer in trainers.values():
            finals.append(np.mean([r["mean_reward"] for r in trainer.rows[-tail:]]))
            ev = evaluate_trainer(trainer, scenario, cfg.eval_seeds)
            att.append(np.mean([r["ATT"] for r in ev]))
            adt.append(np.mean([r["ADT"] for r in ev]))
        table[variant] = {"final_mean_reward": float(np.mean(finals)), "eval_ATT": float(np.mean(att)),
                          "eval_ADT": float(np.mean(adt))}
    rows = [{"metric": m, **{v: table[v][m] for v in variants}}
            for m in ("final_mean_reward", "eval_ATT", "eval_ADT")]
    _write_csv(out / "ablation.csv", ("metric", *variants), rows)
    return rows


# -- argument parsing --------------------------------------------------------------------

def _seeds(text: str) -> tuple[int, ...]:
    try:
        return _int_list(text, "--seed")
    except ConfigError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hiertsc", description="Hierarchical traffic-signal-control experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-scenario", help="write a scenario file")
    g.add_argument("--kind", required=True, choices=sorted(SCENARIO_KINDS))
    g.add_argument("--flow", default="multimodal_gaussian", choices=FLOW_PATTERNS)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    b = sub.add_parser("baseline", help="run FTC / MaxPressure baselines")
    b.add_argument("--scenario", required=True)
    b.add_argument("--controller", default="ftc,maxpressure")
    b.add_argument("--seed", type=_seeds, default=(0, 1, 2))
    b.add_argument("--out", default="baseline.csv")

    def experiment_flags(sp):
        sp.add_argument("--config")
        sp.add_argument("--scenario")
        sp.add_argument("--seed", type=_seeds)
        sp.add_argument("--episodes", type=int)
        sp.add_argument("--out")
        sp.add_argument("--strict-paper-mode", action="store_true")

    t = sub.add_parser("train", help="joint training")
    experiment_flags(t)
    t.add_argument("--variant", default=None, choices=VARIANTS)

    e = sub.add_parser("evaluate", help="greedy evaluation of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--scenario", required=True)
    e.add_argument("--seed", type=_seeds, default=(1000, 1001, 1002))
    e.add_argument("--out", default="evaluation.csv")

    a = sub.add_parser("ablate", help="train several variants on shared seeds")
    experiment_flags(a)
    a.add_argument("--variant", default="full,no_meta", help="comma-separated variants")
    return p


def _experiment(args) -> tuple[ExperimentConfig, Scenario]:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    scenario_path = args.scenario or cfg.scenario
    if not scenario_path:
        raise ConfigError("a scenario is required (--scenario or [experiment] scenario)")
    if args.scenario:
        cfg = replace(cfg, scenario=args.scenario)
    if args.seed:
        cfg = replace(cfg, seeds=args.seed)
    if args.out:
        cfg = replace(cfg, out=args.out)
    hyper = dict(cfg.hyper)
    if args.episodes is not None:
        hyper["episodes"] = args.episodes
    if args.strict_paper_mode:
        hyper["strict_paper_mode"] = True
    cfg = replace(cfg, hyper=hyper)
    return cfg, load_scenario(scenario_path)


def run(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "generate-scenario":
        print(cmd_generate_scenario(args.kind, args.flow, args.seed, args.out))
    elif args.command == "baseline":
        rows = cmd_baseline(load_scenario(args.scenario), args.controller.split(","), args.seed, args.out)
        for name in dict.fromkeys(r["controller"] for r in rows):
            print(name, "ATT", _summary([r["ATT"] for r in rows if r["controller"] == name]))
    elif args.command == "train":
        cfg, scenario = _experiment(args)
        overrides = {"variant": args.variant} if args.variant else {}
        cmd_train(cfg, scenario, cfg.out, **overrides)
        print(resolve_out(cfg.out))
    elif args.command == "evaluate":
        rows = cmd_evaluate(args.checkpoint, load_scenario(args.scenario), args.seed, args.out)
        print("ATT", _summary([r["ATT"] for r in rows]), "ADT", _summary([r["ADT"] for r in rows]))
    elif args.command == "ablate":
        cfg, scenario = _experiment(args)
        for row in cmd_ablate(cfg, scenario, args.variant.split(","), cfg.out):
            print(row)
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    try:
        return run(argv)
    except SystemExit as exc:               # argparse usage errors
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except NoTrafficError as exc:
        print(f"simulation error: {exc}", file=sys.stderr)
        return EXIT_SIMULATION
    except Exception as exc:                # noqa: BLE001 - last-resort category
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
