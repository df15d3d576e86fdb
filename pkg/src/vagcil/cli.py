"""Command-line experiment runner.

Subcommands::

    vagcil gen-data --config data.ini --out DIR
    vagcil run      --config exp.ini  --out DIR [--seeds 0,1,2] [--threads N]
    vagcil sweep    --config exp.ini  --out DIR [--param lambda_lpr=0,0.1]
    vagcil report   RUN_DIR [RUN_DIR ...] --out DIR

Configs are INI files with the sections ``[data]``, ``[experiment]``,
``[learner]``, ``[model]`` and ``[sweep]``; every key is optional. Exit codes:
0 success, 2 bad configuration, 3 failure while running.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import (
    SyntheticSpec,
    TaskStream,
    dataset_from_records,
    generate_synthetic,
    ingest_jsonl,
    load_dataset,
    read_stream,
    save_dataset,
    split_tasks,
    write_stream,
)
from .errors import ConfigError, ContractError
from .harness import METHODS, LearnerConfig, RunReport, run_joint, run_single
from .seq2seq import ModelConfig

log = logging.getLogger("vagcil")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
SECTIONS = ("data", "experiment", "learner", "model", "sweep")
_DATA_KEYS = {"source", "split_seed", "n_tasks", "classes_per_task"}
_LEARNER_SKIP = {"method", "seeds", "model"}


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    source: str = "synthetic"
    split_seed: int = 0
    n_tasks: int | None = None
    classes_per_task: int | None = None
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    methods: tuple[str, ...] = ("vag",)
    seeds: tuple[int, ...] = (0, 1, 2)
    joint: bool = False
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    sweep_param: str = "lambda_lpr"
    sweep_values: tuple[float, ...] = (0.0, 0.05, 0.1, 0.2, 0.5)
    base_dir: Path = field(default_factory=Path.cwd)

    def learner_for(self, method: str, **overrides) -> LearnerConfig:
        cfg = replace(self.learner, method=method, seeds=self.seeds, **overrides)
        if method not in ("er", "vag+er"):
            cfg = replace(cfg, buffer_fraction=0.0)
        return cfg

    def validate(self) -> None:
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}; choose from {', '.join(METHODS)}")
        if not self.methods:
            raise ConfigError("at least one method is required")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.sweep_param not in {f.name for f in fields(LearnerConfig)} - _LEARNER_SKIP:
            raise ConfigError(f"cannot sweep {self.sweep_param!r}")
        self.synthetic.validate()
        if not 0 <= self.learner.buffer_fraction <= 1:
            raise ConfigError("buffer_fraction must be in [0, 1]")
        for m in self.methods:
            try:
                self.learner_for(m).validate()
            except (ConfigError, ContractError) as exc:
                raise ConfigError(f"{exc} (methods = {m})") from exc

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        data = {"source": self.source, "split_seed": self.split_seed}
        if self.n_tasks is not None:
            data["n_tasks"] = self.n_tasks
        if self.classes_per_task is not None:
            data["classes_per_task"] = self.classes_per_task
        for f in fields(SyntheticSpec):
            data.setdefault(f.name, getattr(self.synthetic, f.name))
        cp["data"] = {k: _render(v) for k, v in data.items()}
        cp["experiment"] = {"methods": _render(self.methods), "seeds": _render(self.seeds),
                            "joint": _render(self.joint)}
        cp["learner"] = {f.name: _render(getattr(self.learner, f.name))
                         for f in fields(LearnerConfig) if f.name not in _LEARNER_SKIP}
        cp["model"] = {f.name: _render(getattr(self.learner.model, f.name)) for f in fields(ModelConfig)}
        cp["sweep"] = {"param": self.sweep_param, "values": _render(self.sweep_values)}
        lines = []
        for section in cp.sections():
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {v}" for k, v in cp[section].items())
            lines.append("")
        return "\n".join(lines)


def _render(v) -> str:
    if isinstance(v, (tuple, list)):
        return ", ".join(_render(x) for x in v)
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _key_lines(text: str) -> dict[tuple[str, str], int]:
    """Line number of every ``key = value`` entry, keyed by (section, key)."""
    out, section = {}, ""
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        m = re.match(r"\[([^\]]+)\]", line)
        if m:
            section = m.group(1).strip().lower()
            out[(section, "")] = n
            continue
        key = re.split(r"[=:]", line, maxsplit=1)[0].strip().lower()
        out[(section, key)] = n
    return out


def _coerce(raw: str, kind: str, what: str):
    raw = raw.strip()
    try:
        if "None" in kind and raw.lower() in ("none", ""):
            return None
        if kind.startswith("tuple[int"):
            return tuple(int(x) for x in raw.replace(",", " ").split())
        if kind.startswith("tuple[str"):
            return tuple(x.strip() for x in raw.split(",") if x.strip())
        if kind.startswith("tuple[float"):
            return tuple(float(x) for x in raw.replace(",", " ").split())
        if kind.startswith("bool"):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind.startswith("int"):
            return int(raw)
        if kind.startswith("float"):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{what}: cannot read {raw!r} as {kind}") from None


def _field_types(cls) -> dict[str, str]:
    return {f.name: str(f.type) for f in fields(cls)}


def parse_config(text: str, base_dir: Path | None = None) -> ExperimentConfig:
    """Parse INI text into an :class:`ExperimentConfig`; errors carry line numbers."""
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(exc.message.splitlines()[0], line=getattr(exc, "lineno", None)) from None
    lines = _key_lines(text)
    cfg = ExperimentConfig(base_dir=base_dir or Path.cwd())
    spec_types, learner_types = _field_types(SyntheticSpec), _field_types(LearnerConfig)
    model_types = _field_types(ModelConfig)
    spec_kw, learner_kw, model_kw = {}, {}, {}

    for section in cp.sections():
        name = section.lower()
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]", line=lines.get((name, "")))
        for key, raw in cp[section].items():
            where = lines.get((name, key))
            what = f"[{name}] {key}"
            try:
                if name == "data":
                    if key == "source":
                        cfg.source = raw.strip()
                    elif key in _DATA_KEYS:
                        setattr(cfg, key, _coerce(raw, "int", what))
                        if key in spec_types:
                            spec_kw[key] = getattr(cfg, key)
                    elif key in spec_types:
                        spec_kw[key] = _coerce(raw, spec_types[key], what)
                    else:
                        raise ConfigError(f"unknown key {what}")
                elif name == "experiment":
                    if key == "methods":
                        cfg.methods = _coerce(raw, "tuple[str]", what)
                        unknown = [m for m in cfg.methods if m not in METHODS]
                        if unknown:
                            raise ConfigError(f"unknown method {unknown[0]!r}; choose from {', '.join(METHODS)}")
                    elif key == "seeds":
                        cfg.seeds = _coerce(raw, "tuple[int]", what)
                    elif key == "joint":
                        cfg.joint = _coerce(raw, "bool", what)
                    else:
                        raise ConfigError(f"unknown key {what}")
                elif name == "learner":
                    if key not in learner_types or key in _LEARNER_SKIP:
                        raise ConfigError(f"unknown key {what}")
                    learner_kw[key] = _coerce(raw, learner_types[key], what)
                elif name == "model":
                    if key not in model_types:
                        raise ConfigError(f"unknown key {what}")
                    model_kw[key] = _coerce(raw, model_types[key], what)
                else:
                    if key == "param":
                        cfg.sweep_param = raw.strip()
                    elif key == "values":
                        cfg.sweep_values = _coerce(raw, "tuple[float]", what)
                    else:
                        raise ConfigError(f"unknown key {what}")
            except ConfigError as exc:
                raise ConfigError(str(exc), line=where) from None

    cfg.synthetic = SyntheticSpec(**spec_kw)
    cfg.learner = LearnerConfig(model=ModelConfig(**model_kw), **learner_kw)
    try:
        cfg.validate()
    except ConfigError as exc:
        raise ConfigError(str(exc), line=_guess_line(str(exc), lines)) from None
    except ContractError as exc:
        raise ConfigError(str(exc), line=_guess_line(str(exc), lines)) from None
    return cfg


def _guess_line(message: str, lines: dict[tuple[str, str], int]) -> int | None:
    """Point a validation message at the first config key it mentions."""
    ordered = sorted(lines.items(), key=lambda kv: (kv[0][1] == "methods", kv[1]))
    for (_, key), n in ordered:
        if key and re.search(rf"\b{re.escape(key)}\b", message):
            return n
    return None


def load_config(path: str | None) -> ExperimentConfig:
    if path is None:
        cfg = ExperimentConfig()
        cfg.validate()
        return cfg
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {path} not found")
    try:
        return parse_config(p.read_text(), p.parent)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def build_stream(cfg: ExperimentConfig) -> TaskStream:
    if cfg.source == "synthetic":
        ds = generate_synthetic(cfg.synthetic)
        n_tasks = cfg.n_tasks or cfg.synthetic.n_tasks
        per_task = cfg.classes_per_task or cfg.synthetic.classes_per_task
        return split_tasks(ds, n_tasks, per_task, cfg.split_seed)
    path = Path(cfg.source)
    if not path.is_absolute():
        path = cfg.base_dir / path
    if (path / "manifest.json").exists():
        return read_stream(path)
    if path.is_dir():
        ds = load_dataset(path)
    elif path.is_file():
        ds = dataset_from_records(ingest_jsonl(path), seed=cfg.split_seed)
    else:
        raise ConfigError(f"data source {cfg.source} does not exist")
    if cfg.n_tasks is None or cfg.classes_per_task is None:
        raise ConfigError("ingested data needs n_tasks and classes_per_task in [data]")
    return split_tasks(ds, cfg.n_tasks, cfg.classes_per_task, cfg.split_seed)


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------


def _num(x: float) -> str:
    return "" if x is None or (isinstance(x, float) and np.isnan(x)) else f"{x:.6f}"


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _slug(method: str) -> str:
    return method.replace(" (joint)", "-joint")


def write_run(report: RunReport, run_dir: Path, cfg_text: str) -> None:
    """Per-seed CSVs plus the resolved config for one run."""
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.ini").write_text(cfg_text)
    (run_dir / "learner.json").write_text(json.dumps(report.config, indent=2, sort_keys=True) + "\n")
    n = report.acc_matrix.shape[1]
    _write_csv(run_dir / "accuracy_matrix.csv", ["after_task"] + [f"task_{i + 1}" for i in range(n)],
               [[t + 1] + [_num(v) for v in row] for t, row in enumerate(report.acc_matrix)])
    _write_csv(run_dir / "confusion.csv", ["true"] + report.labels,
               [[lab] + list(map(int, row)) for lab, row in zip(report.labels, report.confusion)])
    _write_csv(run_dir / "nc.csv", ["task", "nc"], [[i, _num(v)] for i, v in enumerate(report.nc)])
    _write_csv(run_dir / "events.csv", ["task", "epoch", "kind", "n", "expected", "size"],
               [[e["task"], e["epoch"], e["kind"], e["n"], e["expected"], e.get("size", "")]
                for e in report.events])


def metric_rows(report: RunReport) -> list[list]:
    return [[report.seed, report.method, t + 1, _num(report.seen_accuracy[t]), _num(report.nc[t + 1]),
             _num(report.bias_trajectory[t])] for t in range(len(report.seen_accuracy))]


METRIC_HEADER = ["seed", "method", "task", "accuracy", "nc", "last_task_bias"]
AGG_HEADER = ["method", "n_seeds", "final_accuracy_mean", "final_accuracy_std", "final_nc_mean",
              "final_nc_std", "last_task_bias_mean", "last_task_bias_std", "closed_world_violations"]


def aggregate_rows(reports: Sequence[RunReport]) -> list[list]:
    by_method: dict[str, list[RunReport]] = {}
    for r in reports:
        by_method.setdefault(r.method, []).append(r)
    rows = []
    for method, rs in by_method.items():
        acc = np.array([r.final_accuracy for r in rs])
        nc = np.array([r.final_nc for r in rs])
        bias = np.array([r.last_task_bias for r in rs])
        rows.append([method, len(rs), _num(acc.mean()), _num(acc.std()), _num(nc.mean()), _num(nc.std()),
                     _num(bias.mean()), _num(bias.std()), sum(r.closed_world_violations for r in rs)])
    return rows


def _summary(rows: Sequence[Sequence]) -> str:
    out = [f"{'method':<24}{'seeds':>6}  {'final accuracy':>18}  {'final NC':>18}  {'last-task bias':>18}"]
    for r in rows:
        pm = lambda m, s: f"{float(m):.4f} +- {float(s):.4f}"
        out.append(f"{r[0]:<24}{r[1]:>6}  {pm(r[2], r[3]):>18}  {pm(r[4], r[5]):>18}  {pm(r[6], r[7]):>18}")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# Execution
# ---------------------------------------------------------------------------


def _execute(job: tuple) -> RunReport:
    stream, learner, seed, joint = job
    return run_joint(stream, learner, seed) if joint else run_single(stream, learner, seed)


def _map(jobs: list[tuple], threads: int, keep_going: bool = False) -> list:
    """Run jobs in order, optionally across worker processes.

    With ``keep_going`` a failing job yields its exception instead of aborting.
    """
    def guard(fn, job):
        try:
            return fn(job)
        except Exception as exc:  # recorded per cell by the caller
            if not keep_going:
                raise
            return exc

    if threads <= 1 or len(jobs) <= 1:
        return [guard(_execute, j) for j in jobs]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(_execute, j) for j in jobs]
        return [guard(lambda f: f.result(), f) for f in futures]


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    ds = generate_synthetic(cfg.synthetic)
    save_dataset(ds, out)
    stream = split_tasks(ds, cfg.synthetic.n_tasks, cfg.synthetic.classes_per_task, cfg.split_seed)
    write_stream(stream, out / "stream")
    (out / "config.ini").write_text(cfg.to_ini())
    print(f"wrote {len(ds.train)}/{len(ds.val)}/{len(ds.test)} examples and {len(stream)} tasks to {out}")
    return EXIT_OK


def _seeds(args, cfg: ExperimentConfig) -> ExperimentConfig:
    if args.seeds:
        cfg.seeds = _coerce(args.seeds, "tuple[int]", "--seeds")
        cfg.validate()
    return cfg


def cmd_run(args) -> int:
    cfg = _seeds(args, load_config(args.config))
    stream = build_stream(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg_text = cfg.to_ini()
    (out / "config.ini").write_text(cfg_text)

    jobs, names = [], []
    for method in cfg.methods:
        learner = cfg.learner_for(method)
        for seed in cfg.seeds:
            jobs.append((stream, learner, seed, False))
            names.append((method, seed))
            if cfg.joint:
                jobs.append((stream, learner, seed, True))
                names.append((f"{method} (joint)", seed))
    reports = _map(jobs, args.threads)

    metrics = []
    for (method, seed), rep in zip(names, reports):
        write_run(rep, out / "runs" / _slug(method) / f"seed_{seed}", cfg_text)
        metrics.extend(metric_rows(rep))
        log.info("%s seed %d: final accuracy %.4f", method, seed, rep.final_accuracy)
    _write_csv(out / "metrics.csv", METRIC_HEADER, metrics)
    agg = aggregate_rows(reports)
    _write_csv(out / "aggregate.csv", AGG_HEADER, agg)
    summary = _summary(agg)
    (out / "summary.txt").write_text(summary)
    print(summary, end="")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _seeds(args, load_config(args.config))
    if args.param:
        name, _, values = args.param.partition("=")
        cfg.sweep_param = name.strip()
        cfg.sweep_values = _coerce(values, "tuple[float]", "--param")
        cfg.validate()
    stream = build_stream(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg_text = cfg.to_ini()
    (out / "config.ini").write_text(cfg_text)
    kind = _field_types(LearnerConfig)[cfg.sweep_param]

    jobs, cells = [], []
    for value in cfg.sweep_values:
        v = int(value) if kind.startswith("int") else value
        for method in cfg.methods:
            try:
                learner = cfg.learner_for(method, **{cfg.sweep_param: v})
                learner.validate()
            except ConfigError as exc:
                cells.append((value, method, None, exc))
                continue
            for seed in cfg.seeds:
                jobs.append((stream, learner, seed, False))
                cells.append((value, method, seed, None))
    results = iter(_map(jobs, args.threads, keep_going=True))

    rows, failed = [], 0
    acc: dict[tuple[str, float], list[float]] = {}
    for value, method, seed, error in cells:
        result = error if error is not None else next(results)
        if isinstance(result, Exception):
            failed += 1
            rows.append([cfg.sweep_param, value, method, "" if seed is None else seed,
                         f"error: {type(result).__name__}: {result}", "", "", ""])
            continue
        cell_dir = out / "cells" / f"{cfg.sweep_param}={value}" / _slug(method) / f"seed_{seed}"
        write_run(result, cell_dir, cfg_text)
        acc.setdefault((method, value), []).append(result.final_accuracy)
        rows.append([cfg.sweep_param, value, method, seed, "ok", _num(result.final_accuracy),
                     _num(result.final_nc), _num(result.last_task_bias)])
    _write_csv(out / "sweep_cells.csv",
               ["param", "value", "method", "seed", "status", "final_accuracy", "final_nc", "last_task_bias"], rows)
    curve = []
    for method in cfg.methods:
        for stat, fn in (("mean", np.mean), ("std", np.std)):
            curve.append([method, stat] + [_num(fn(acc[(method, v)])) if (method, v) in acc else ""
                                           for v in cfg.sweep_values])
    _write_csv(out / "sweep_curve.csv", ["method", "statistic"] + [str(v) for v in cfg.sweep_values], curve)
    print(f"sweep over {cfg.sweep_param}: {len(rows) - failed} cells ok, {failed} failed")
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_report(args) -> int:
    out = Path(args.out)
    rows, curve_src = [], {}
    for run in args.runs:
        path = Path(run) / "metrics.csv"
        if not path.is_file():
            raise ConfigError(f"{run} has no metrics.csv")
        with open(path, newline="") as fh:
            records = list(csv.DictReader(fh))
        per_method: dict[str, dict[str, list]] = {}
        for rec in records:
            m = per_method.setdefault(rec["method"], {})
            m.setdefault(rec["seed"], []).append(rec)
            key = (rec["method"], int(rec["task"]))
            curve_src.setdefault(key, []).append((float(rec["accuracy"]), float(rec["nc"])))
        for method, seeds in per_method.items():
            finals = [max(recs, key=lambda r: int(r["task"])) for recs in seeds.values()]
            acc = np.array([float(r["accuracy"]) for r in finals])
            nc = np.array([float(r["nc"]) for r in finals])
            bias = np.array([float(r["last_task_bias"]) for r in finals])
            rows.append([method, len(finals), _num(acc.mean()), _num(acc.std()), _num(nc.mean()),
                         _num(nc.std()), _num(bias.mean()), _num(bias.std()), Path(run).name])
    _write_csv(out / "report.csv", AGG_HEADER[:-1] + ["run"], rows)
    curve = [[m, t, len(v), _num(np.mean([a for a, _ in v])), _num(np.std([a for a, _ in v])),
              _num(np.mean([n for _, n in v])), _num(np.std([n for _, n in v]))]
             for (m, t), v in curve_src.items()]
    _write_csv(out / "curve.csv",
               ["method", "task", "n", "accuracy_mean", "accuracy_std", "nc_mean", "nc_std"], curve)
    summary = _summary(rows)
    (out / "summary.txt").write_text(summary)
    print(summary, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vagcil", description="Class-incremental learning by label generation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write the synthetic benchmark and its task stream")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    for name, fn, helptext in (("run", cmd_run, "train and evaluate every method x seed"),
                               ("sweep", cmd_sweep, "grid over one learner parameter")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--config")
        s.add_argument("--out", required=True)
        s.add_argument("--seeds", help="comma-separated seeds, overriding the config")
        s.add_argument("--threads", type=int, default=1, help="worker processes for independent runs")
        if name == "sweep":
            s.add_argument("--param", help="name=v1,v2,... overriding the [sweep] section")
        s.set_defaults(func=fn)

    r = sub.add_parser("report", help="aggregate finished run directories")
    r.add_argument("runs", nargs="+")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
