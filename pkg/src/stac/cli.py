"""Experiment harness: ``stac run <config>`` and ``stac compare <csv...>``.

Configs are flat ``key = value`` files with ``[section]`` headers. The
``[job]`` section names the job kind and shared settings; training jobs list
one ``[arm.<name>]`` section per algorithm variant, with ``[common]`` holding
keys shared by every arm. Example::

    [job]
    kind = train
    env = cartpole
    total_steps = 100000
    seeds = 0, 1, 2

    [arm.stac]
    algo = AC
    stackelberg = on

Exit codes: 0 on success, 1 for configuration or schema errors, 2 when a
run aborts.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import logging
import math
import os
import re
import sys
import time
from collections.abc import Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from stac.env import make_env
from stac.examples import GAMES, error_curve
from stac.game import Grid, JointPoint, LeaderConfig, check_dse, integrate, sample_vector_field
from stac.nets import save_params
from stac.rl.config import AlgoConfig, ConfigError
from stac.rl.train import RunRecord, TrainingAborted, steps_to_threshold, train

log = logging.getLogger("stac")

OUTPUT_ROOT_ENV = "STAC_OUTPUT_ROOT"
JOB_KINDS = ("train", "vector-field", "trajectory", "dse-check")
THRESHOLDS = {"cartpole": 450.0, "pendulum": -300.0}

VECTOR_FIELD_COLUMNS = ["x1", "x2", "dx1", "dx2", "fallback"]
TRAJECTORY_COLUMNS = ["k", "x1", "x2", "err"]
DSE_COLUMNS = ["x1", "x2", "verdict", "leader_grad_norm", "follower_grad_norm",
               "follower_hessian_min_eig", "leader_hessian_min_eig"]
RUN_COLUMNS = RunRecord.columns()

EXIT_OK, EXIT_CONFIG, EXIT_ABORT = 0, 1, 2


class ConfigParseError(ConfigError):
    def __init__(self, message: str, line: int | None = None, key: str | None = None):
        self.line = line
        self.key = key
        where = []
        if line is not None:
            where.append(f"line {line}")
        if key is not None:
            where.append(f"field {key!r}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)


class SchemaError(ValueError):
    pass


def fmt(x) -> str:
    """CSV text for one value: integers as-is, floats with 17 significant digits."""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.17g}"
    return str(x)


def write_csv(path: Path, columns: Sequence[str], rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([fmt(v) for v in row])


# --- configuration -----------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    kind: str
    name: str
    seeds: list[int]
    output: Path
    job: dict[str, str]
    arms: dict[str, AlgoConfig] = field(default_factory=dict)
    text_hash: str = ""
    workers: int = 1
    record_wall_time: bool = False


def _line_of(text: str, section: str, key: str | None) -> int | None:
    current = None
    for i, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        m = re.fullmatch(r"\[(.+)\]", line)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return i
            continue
        if current == section and key is not None and re.match(rf"{re.escape(key)}\s*[=:]", line):
            return i
    return None


def _parse_bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("on", "true", "yes", "1"):
        return True
    if v in ("off", "false", "no", "0"):
        return False
    raise ValueError(f"expected on/off, got {value!r}")


def _parse_floats(value: str) -> list[float]:
    return [float(v) for v in value.replace(",", " ").split()]


def _algo_config(values: dict[str, str], text: str, section: str, env_name: str) -> AlgoConfig:
    """Build an arm's config on top of the per-environment reference defaults."""
    kinds = {f.name: f.type for f in fields(AlgoConfig)}
    kwargs = {}
    for key, raw in values.items():
        if key not in kinds:
            raise ConfigParseError("unknown key", _line_of(text, section, key), key)
        typ = str(kinds[key])
        try:
            if typ == "bool":
                kwargs[key] = _parse_bool(raw)
            elif typ == "int":
                kwargs[key] = int(raw)
            elif typ == "float":
                kwargs[key] = float(raw)
            elif typ == "float | None":
                kwargs[key] = None if raw.strip().lower() in ("", "none", "default") else float(raw)
            elif typ.startswith("tuple"):
                kwargs[key] = tuple(int(v) for v in raw.replace(",", " ").split())
            else:
                kwargs[key] = raw.strip()
        except ValueError as err:
            raise ConfigParseError(str(err), _line_of(text, section, key), key) from None
    try:
        return AlgoConfig.for_env(env_name, kwargs.pop("algo", "AC"), **kwargs)
    except ConfigError as err:
        raise ConfigParseError(str(err), _line_of(text, section, None)) from None


def load_config(path: str | Path, output_root: str | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise ConfigParseError(f"cannot read {path}: {err}") from None
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=str(path))
    except configparser.MissingSectionHeaderError as err:
        raise ConfigParseError("key outside any [section]", err.lineno) from None
    except configparser.ParsingError as err:
        lineno = err.errors[0][0] if err.errors else None
        raise ConfigParseError("malformed line (expected 'key = value')", lineno) from None
    except configparser.Error as err:
        raise ConfigParseError(str(err), getattr(err, "lineno", None)) from None
    if not parser.has_section("job"):
        raise ConfigParseError("missing [job] section")
    job = dict(parser["job"])
    kind = job.get("kind", "")
    if kind not in JOB_KINDS:
        raise ConfigParseError(f"kind must be one of {JOB_KINDS}", _line_of(text, "job", "kind"), "kind")
    try:
        seeds = [int(s) for s in job.get("seeds", "0").replace(",", " ").split()]
    except ValueError:
        raise ConfigParseError("seeds must be integers", _line_of(text, "job", "seeds"), "seeds") from None
    if not seeds or len(set(seeds)) != len(seeds):
        raise ConfigParseError("seeds must be a non-empty list of distinct integers",
                               _line_of(text, "job", "seeds"), "seeds")
    root = Path(output_root or os.environ.get(OUTPUT_ROOT_ENV) or job.get("output_root", "results"))
    name = job.get("name", path.stem)
    cfg = ExperimentConfig(kind, name, seeds, root / name, job,
                           text_hash=hashlib.sha256(text.encode()).hexdigest())
    try:
        cfg.workers = int(job.get("workers", "1"))
        cfg.record_wall_time = _parse_bool(job.get("record_wall_time", "off"))
    except ValueError as err:
        raise ConfigParseError(str(err), _line_of(text, "job", None)) from None
    if kind == "train":
        env_name = job.get("env", "")
        try:
            make_env(env_name)
        except (KeyError, ValueError) as err:
            raise ConfigParseError(f"unknown env {env_name!r}", _line_of(text, "job", "env"), "env") from None
        common = dict(parser["common"]) if parser.has_section("common") else {}
        for section in parser.sections():
            if section.startswith("arm."):
                arm = section[4:]
                if not re.fullmatch(r"[A-Za-z0-9_-]+", arm):
                    raise ConfigParseError("arm names use letters, digits, '-' and '_'",
                                           _line_of(text, section, None))
                cfg.arms[arm] = _algo_config(common | dict(parser[section]), text, section, env_name)
        if not cfg.arms:
            raise ConfigParseError("train jobs need at least one [arm.<name>] section")
        for key in ("total_steps",):
            if key not in job:
                raise ConfigParseError("required for train jobs", _line_of(text, "job", None), key)
    elif job.get("game", "motivating") not in GAMES:
        raise ConfigParseError(f"unknown game; choose from {sorted(GAMES)}", _line_of(text, "job", "game"),
                               "game")
    return cfg


# --- jobs --------------------------------------------------------------------------------------


def _job_float(cfg: ExperimentConfig, key: str, default: float) -> float:
    try:
        return float(cfg.job.get(key, default))
    except ValueError:
        raise ConfigParseError("expected a number", key=key) from None


def _leader_cfg(cfg: ExperimentConfig, lam: float | None = None) -> LeaderConfig:
    return LeaderConfig(leader=int(cfg.job.get("leader", "1")),
                        lam=_job_float(cfg, "lam", 0.0) if lam is None else lam,
                        cg_iters=int(cfg.job.get("cg_iters", "10")),
                        unroll_m=int(cfg.job.get("unroll_m", "1")))


def _rules(cfg: ExperimentConfig, default: str) -> list[str]:
    rules = [r.strip() for r in cfg.job.get("rules", default).split(",") if r.strip()]
    for r in rules:
        if r not in ("individual", "stackelberg", "regularized"):
            raise ConfigParseError(f"unknown rule {r!r}", key="rules")
    return rules


def run_vector_field(cfg: ExperimentConfig, seed: int) -> list[Path]:
    game = GAMES[cfg.job.get("game", "motivating")]()
    n = int(cfg.job.get("grid", "21"))
    lo, hi = _job_float(cfg, "low", -1.0), _job_float(cfg, "high", 1.0)
    grid = Grid.square(lo, hi, n)
    out = []
    for rule in _rules(cfg, "individual,stackelberg"):
        lam = _job_float(cfg, "reg_lambda", 0.01) if rule == "regularized" else None
        mode = "individual" if rule == "individual" else "stackelberg"
        rows = sample_vector_field(game, mode, _leader_cfg(cfg, lam), grid)
        path = cfg.output / f"vector-field-{rule}-seed{seed}.csv"
        write_csv(path, VECTOR_FIELD_COLUMNS, rows)
        out.append(path)
    return out


def run_trajectory(cfg: ExperimentConfig, seed: int) -> list[Path]:
    game = GAMES[cfg.job.get("game", "motivating")]()
    start = _parse_floats(cfg.job.get("start", "0.5, 0.5"))
    if len(start) != 2:
        raise ConfigParseError("start needs two numbers", key="start")
    alpha = _job_float(cfg, "alpha", 0.05)
    steps = int(cfg.job.get("steps", "2000"))
    x0 = JointPoint([start[0]], [start[1]])
    out = []
    for rule in _rules(cfg, "individual,stackelberg,regularized"):
        lam = _job_float(cfg, "reg_lambda", 0.01) if rule == "regularized" else None
        mode = "individual" if rule == "individual" else "stackelberg"
        traj = integrate(game, x0, mode, _leader_cfg(cfg, lam), alpha, alpha, steps)
        err = error_curve(traj)
        rows = [(k, p.x1[0], p.x2[0], e) for k, (p, e) in enumerate(zip(traj, err))]
        path = cfg.output / f"trajectory-{rule}-seed{seed}.csv"
        write_csv(path, TRAJECTORY_COLUMNS, rows)
        out.append(path)
    return out


def run_dse_check(cfg: ExperimentConfig, seed: int) -> list[Path]:
    game = GAMES[cfg.job.get("game", "motivating")]()
    pts = _parse_floats(cfg.job.get("points", "0, 0"))
    if len(pts) % 2:
        raise ConfigParseError("points need (x1, x2) pairs", key="points")
    rows = []
    for x1, x2 in zip(pts[0::2], pts[1::2]):
        rep = check_dse(game, JointPoint([x1], [x2]), leader=int(cfg.job.get("leader", "1")))
        min_f = float(rep.follower_hessian_eigs.min()) if rep.follower_hessian_eigs.size else math.nan
        min_l = float(rep.leader_hessian_eigs_sym.min()) if rep.leader_hessian_eigs_sym.size else math.nan
        rows.append((x1, x2, rep.verdict.value, rep.leader_grad_norm, rep.follower_grad_norm, min_f, min_l))
    path = cfg.output / f"dse-check-seed{seed}.csv"
    write_csv(path, DSE_COLUMNS, rows)
    return [path]


def run_train_arm(cfg: ExperimentConfig, arm: str, seed: int) -> list[Path]:
    env_name = cfg.job["env"]
    algo = cfg.arms[arm]
    total = int(cfg.job["total_steps"])
    algo_cfg = AlgoConfig(**{f.name: getattr(algo, f.name) for f in fields(AlgoConfig)} | {"seed": seed})
    stem = cfg.output / f"{arm}-seed{seed}"
    records: list[RunRecord] = []
    clock = time.perf_counter if cfg.record_wall_time else (lambda: 0.0)
    try:
        result = train(make_env(env_name), algo_cfg, total, on_record=records.append,
                       checkpoint_dir=Path(f"{stem}.ckpt"), clock=clock)
    finally:
        write_csv(Path(f"{stem}.csv"), RUN_COLUMNS, [r.values() for r in records])
    save_params(Path(f"{stem}.actor.bin"), result.actor)
    save_params(Path(f"{stem}.critic.bin"), result.critic)
    return [Path(f"{stem}.csv"), Path(f"{stem}.actor.bin"), Path(f"{stem}.critic.bin")]


def _task(args: tuple[ExperimentConfig, str | None, int]) -> list[Path]:
    cfg, arm, seed = args
    if cfg.kind == "train":
        return run_train_arm(cfg, arm, seed)
    runner = {"vector-field": run_vector_field, "trajectory": run_trajectory, "dse-check": run_dse_check}
    return runner[cfg.kind](cfg, seed)


def run(config_path: str | Path, output_root: str | None = None) -> tuple[int, Path | None]:
    """Execute every (arm, seed) task of a config and write the manifest."""
    cfg = load_config(config_path, output_root)
    cfg.output.mkdir(parents=True, exist_ok=True)
    arms: list[str | None] = list(cfg.arms) if cfg.kind == "train" else [None]
    tasks = [(cfg, arm, seed) for arm in arms for seed in cfg.seeds]
    t0 = time.perf_counter()
    if cfg.workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_task, tasks))
    else:
        results = [_task(t) for t in tasks]
    manifest = {
        "config": str(Path(config_path)),
        "config_sha256": cfg.text_hash,
        "kind": cfg.kind,
        "seeds": cfg.seeds,
        "runs": [{"arm": arm, "seed": seed, "artifacts": [str(p.relative_to(cfg.output)) for p in paths]}
                 for (_, arm, seed), paths in zip(tasks, results)],
        "wall_seconds": time.perf_counter() - t0,
    }
    path = cfg.output / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return EXIT_OK, path


# --- comparison --------------------------------------------------------------------------------


@dataclass
class ArmSummary:
    arm: str
    runs: int
    final_mean: float
    final_std: float
    pooled_std: float
    steps_to_threshold: float
    fallback_rate: float


def read_run_csv(path: str | Path) -> list[RunRecord]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != RUN_COLUMNS:
            raise SchemaError(f"{path}: header {header} does not match {RUN_COLUMNS}")
        out = []
        for i, row in enumerate(reader, 2):
            if len(row) != len(RUN_COLUMNS):
                raise SchemaError(f"{path}:{i}: expected {len(RUN_COLUMNS)} fields, got {len(row)}")
            try:
                out.append(RunRecord(int(row[0]), *map(float, row[1:7]), int(row[7]), float(row[8])))
            except ValueError as err:
                raise SchemaError(f"{path}:{i}: {err}") from None
    return out


def arm_of(path: str | Path) -> str:
    return re.sub(r"-seed\d+$", "", Path(path).stem)


def compare(paths: Sequence[str | Path], threshold: float | None = None) -> list[ArmSummary]:
    """Aggregate run CSVs by arm (file name without the ``-seed<k>`` suffix).

    ``final_std`` is the spread of final returns across runs; ``pooled_std``
    also folds in each run's own evaluation spread. Steps-to-threshold is the
    median over runs of the first evaluation step reaching ``threshold``.
    """
    groups: dict[str, list[list[RunRecord]]] = {}
    for p in paths:
        recs = read_run_csv(p)
        if not recs:
            raise SchemaError(f"{p}: no rows")
        groups.setdefault(arm_of(p), []).append(recs)
    out = []
    for arm, runs in groups.items():
        finals = np.array([r[-1].eval_return_mean for r in runs])
        within = np.array([r[-1].eval_return_std for r in runs])
        pooled = math.sqrt(float(np.mean(within ** 2 + (finals - finals.mean()) ** 2)))
        steps = [steps_to_threshold(r, threshold) for r in runs] if threshold is not None else [math.nan]
        fb = float(np.mean([rec.fallback for r in runs for rec in r]))
        out.append(ArmSummary(arm, len(runs), float(finals.mean()), float(finals.std()), pooled,
                               float(np.median(steps)), fb))
    return out


def format_summary(rows: Sequence[ArmSummary]) -> str:
    head = f"{'arm':<16}{'runs':>5}{'final_mean':>14}{'final_std':>12}{'pooled_std':>12}{'steps':>12}{'fallback':>10}"
    lines = [head]
    for r in rows:
        lines.append(f"{r.arm:<16}{r.runs:>5}{r.final_mean:>14.3f}{r.final_std:>12.3f}{r.pooled_std:>12.3f}"
                     f"{r.steps_to_threshold:>12.0f}{r.fallback_rate:>10.3f}")
    return "\n".join(lines)


# --- entry point -------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stac", description="Stackelberg actor-critic experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)
    r = sub.add_parser("run", help="execute an experiment config")
    r.add_argument("config")
    r.add_argument("--output-root", help=f"overrides ${OUTPUT_ROOT_ENV} and the config")
    c = sub.add_parser("compare", help="summarize training CSVs by arm")
    c.add_argument("csv", nargs="+")
    g = c.add_mutually_exclusive_group()
    g.add_argument("--threshold", type=float)
    g.add_argument("--env", choices=sorted(THRESHOLDS), help="use the default threshold for this env")
    c.add_argument("--out", help="also write the summary as CSV")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.verb == "run":
            _, manifest = run(args.config, args.output_root)
            print(manifest)
            return EXIT_OK
        threshold = args.threshold if args.threshold is not None else THRESHOLDS.get(args.env)
        rows = compare(args.csv, threshold)
        print(format_summary(rows))
        if args.out:
            write_csv(Path(args.out), [f.name for f in fields(ArmSummary)],
                      [[getattr(r, f.name) for f in fields(ArmSummary)] for r in rows])
        return EXIT_OK
    except (ConfigError, SchemaError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAborted as err:
        print(f"aborted: {err} (checkpoint: {err.checkpoint})", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
