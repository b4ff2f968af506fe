"""Command-line front end: ``lyaplearn {learn,test,sweep,grad-check}``.

Experiment configs are TOML files with an optional top-level ``example``
preset and the sections ``plant``, ``reference``, ``controller``, ``learner``
and ``run``.  A ``test`` table may hold ``plant``/``reference`` overrides that
apply only in test mode.  Every run directory receives a ``manifest.json``.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .controller import load_params, save_params
from .dynamics import PlantModel, Variant
from .experiments import (
    ControllerConfig,
    EpisodeConfig,
    EpisodeResult,
    LearnerConfig,
    ReferenceSignal,
    example_config,
    init_params,
    run_episode,
    write_csv,
)
from .learner import StepContext, step_loss_gradient_error

log = logging.getLogger("lyaplearn")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERIC = 2

GRAD_TOLERANCE = 1e-4


class ConfigError(ValueError):
    """A config file is missing, malformed or out of range."""


# -- config parsing -------------------------------------------------------------
_SECTIONS = {
    "plant": PlantModel,
    "reference": ReferenceSignal,
    "controller": ControllerConfig,
    "learner": LearnerConfig,
}
_RUN_KEYS = {"dt", "duration", "seed", "x0", "settle_threshold", "tail_window", "mode"}
_TOP_KEYS = {"example", "test", "run", *_SECTIONS}


def _field_types(cls) -> dict[str, type]:
    return {f.name: f.type for f in fields(cls)}


def _check_value(path: str, value, default):
    """Reject values whose TOML type cannot stand in for the default's type."""
    if isinstance(default, bool) or isinstance(value, bool):
        ok = isinstance(value, bool) and isinstance(default, bool)
    elif isinstance(default, (int, float)) and not isinstance(default, bool):
        ok = isinstance(value, (int, float))
        if ok and isinstance(default, int) and not isinstance(default, float):
            ok = isinstance(value, int)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, tuple):
        ok = isinstance(value, list) and len(value) == len(default) and all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in value
        )
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{path}: expected a value like {default!r}, got {value!r}")
    if isinstance(default, float) and not isinstance(default, bool):
        return float(value)
    if isinstance(default, tuple):
        return tuple(float(v) for v in value)
    return value


def _apply(obj, table: dict, section: str):
    if not isinstance(table, dict):
        raise ConfigError(f"{section}: expected a table")
    known = _field_types(type(obj))
    updates = {}
    for key, value in table.items():
        path = f"{section}.{key}"
        if key not in known:
            raise ConfigError(f"{path}: unknown key")
        default = getattr(obj, key)
        if key == "variant":
            try:
                updates[key] = Variant(value)
            except ValueError:
                raise ConfigError(f"{path}: expected one of {[v.value for v in Variant]}") from None
            continue
        updates[key] = _check_value(path, value, default)
    try:
        return replace(obj, **updates)
    except ValueError as exc:
        raise ConfigError(f"{section}: {exc}") from None


def resolve_config(raw: dict, mode: str | None = None) -> EpisodeConfig:
    """Turn a parsed TOML document into an :class:`EpisodeConfig`."""
    for key in raw:
        if key not in _TOP_KEYS:
            raise ConfigError(f"{key}: unknown key")
    run = raw.get("run", {})
    if not isinstance(run, dict):
        raise ConfigError("run: expected a table")
    for key in run:
        if key not in _RUN_KEYS:
            raise ConfigError(f"run.{key}: unknown key")
    mode = mode or run.get("mode", "learn")
    if mode not in ("learn", "test"):
        raise ConfigError(f"run.mode: expected 'learn' or 'test', got {mode!r}")

    example = raw.get("example")
    if example is None:
        cfg = EpisodeConfig(mode=mode)
    else:
        if isinstance(example, bool) or example not in (1, 2, 3):
            raise ConfigError(f"example: expected 1, 2 or 3, got {example!r}")
        cfg = example_config(example, mode=mode)

    parts = {name: getattr(cfg, name) for name in _SECTIONS}
    for name in _SECTIONS:
        if name in raw:
            parts[name] = _apply(parts[name], raw[name], name)
    test = raw.get("test", {})
    if not isinstance(test, dict):
        raise ConfigError("test: expected a table")
    for key, table in test.items():
        if key not in ("plant", "reference"):
            raise ConfigError(f"test.{key}: unknown key")
        if mode == "test":
            parts[key] = _apply(parts[key], table, f"test.{key}")

    defaults = EpisodeConfig()
    run_updates = {}
    for key, value in run.items():
        if key == "mode":
            continue
        run_updates[key] = _check_value(f"run.{key}", value, getattr(defaults, key))
    if "seed" in run_updates and run_updates["seed"] < 0:
        raise ConfigError("run.seed: must be a non-negative integer")
    if "dt" in run_updates and not run_updates["dt"] > 0:
        raise ConfigError(f"run.dt: must be positive, got {run_updates['dt']}")
    try:
        return replace(cfg, **parts, **run_updates)
    except ValueError as exc:
        raise ConfigError(f"run: {exc}") from None


def parse_config(path, mode: str | None = None) -> EpisodeConfig:
    """Read and resolve a TOML experiment config; ``mode`` overrides ``run.mode``."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"{path}: no such config file")
    try:
        raw = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return resolve_config(raw, mode)


def config_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def describe_config(cfg: EpisodeConfig) -> dict:
    d = asdict(cfg)
    d["plant"]["variant"] = cfg.plant.variant.value
    return d


# -- manifest ---------------------------------------------------------------
@dataclass
class RunManifest:
    command: str
    mode: str
    config_path: str | None
    config_hash: str | None
    seeds: list[int]
    out_dir: str
    files: list[str] = field(default_factory=list)
    status: str = "ok"
    partial: bool = False
    message: str = ""
    wall_clock_s: float = 0.0
    version: str = __version__

    def write(self, out_dir: Path) -> Path:
        missing = [f for f in self.files if not (out_dir / f).exists()]
        if missing:
            self.partial = True
            self.message = (self.message + "; " if self.message else "") + f"missing {missing}"
        path = out_dir / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


# -- argument handling ------------------------------------------------------
class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def parse_seed_range(text: str) -> list[int]:
    """``"3"`` -> [3]; ``"1..5"`` -> [1, 2, 3, 4, 5]."""
    try:
        if ".." in text:
            a, b = (int(v) for v in text.split("..", 1))
        else:
            a = b = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid seed range {text!r}; use N or A..B") from None
    if a < 0 or b < a:
        raise argparse.ArgumentTypeError(f"invalid seed range {text!r}")
    return list(range(a, b + 1))


def _nonneg_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError("seed must be non-negative")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lyaplearn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, seeds=False):
        p.add_argument("--config", required=True, help="TOML experiment config")
        if seeds:
            p.add_argument("--seeds", type=parse_seed_range, default=[0, 1, 2], help="seed range A..B")
        else:
            p.add_argument("--seed", type=_nonneg_int, default=None, help="overrides run.seed")
        p.add_argument("--out", default="runs", help="output directory (default: runs)")

    p = sub.add_parser("learn", help="learn online from fresh weights")
    common(p)
    p.add_argument("--params-out", default=None, help="where to save learned weights (default: OUT/params.txt)")

    p = sub.add_parser("test", help="run frozen weights")
    common(p)
    p.add_argument("--params-in", required=True, help="weights saved by 'learn'")

    p = sub.add_parser("sweep", help="repeat a run over a seed range and aggregate metrics")
    common(p, seeds=True)
    p.add_argument("--mode", choices=("learn", "test"), default="learn",
                   help="'test' learns per seed first unless --params-in is given")
    p.add_argument("--params-in", default=None)

    p = sub.add_parser("grad-check", help="compare step-loss gradients with finite differences")
    p.add_argument("--config", action="append", default=None,
                   help="config(s) to check; default is the three example presets")
    p.add_argument("--points", type=int, default=20, help="random points per system (default: 20)")
    p.add_argument("--seed", type=_nonneg_int, default=0)
    p.add_argument("--out", default=None, help="optional directory for a JSON report")
    return parser


# -- commands -----------------------------------------------------------------
def _report_text(result: EpisodeResult) -> str:
    lines = [f"{k:30s} {v:.6g}" for k, v in result.metrics.as_dict().items()]
    if result.aborted:
        lines.append(f"{'aborted':30s} {result.aborted}")
    if result.skipped_updates:
        lines.append(f"{'skipped_updates':30s} {result.skipped_updates}")
    return "\n".join(lines) + "\n"


def _write_run(result: EpisodeResult, cfg: EpisodeConfig, out: Path) -> list[str]:
    out.mkdir(parents=True, exist_ok=True)
    write_csv(result.records, out / "log.csv")
    report = {
        "config": describe_config(cfg),
        "metrics": result.metrics.as_dict(),
        "aborted": result.aborted,
        "skipped_updates": result.skipped_updates,
    }
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    (out / "report.txt").write_text(_report_text(result))
    return ["log.csv", "report.json", "report.txt"]


def _episode_config(args, mode: str) -> EpisodeConfig:
    cfg = parse_config(args.config, mode)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def cmd_learn(args) -> int:
    cfg = _episode_config(args, "learn")
    out = Path(args.out)
    started = time.perf_counter()
    result = run_episode(cfg)
    files = _write_run(result, cfg, out)
    params_out = Path(args.params_out) if args.params_out else out / "params.txt"
    save_params(result.params, params_out)
    files.append(str(params_out.relative_to(out)) if params_out.is_relative_to(out) else str(params_out.resolve()))
    sys.stdout.write(_report_text(result))
    return _finish(args, "learn", cfg, [cfg.seed], out, files, result.aborted, started)


def cmd_test(args) -> int:
    cfg = _episode_config(args, "test")
    params = load_params(args.params_in)
    out = Path(args.out)
    started = time.perf_counter()
    result = run_episode(cfg, params)
    files = _write_run(result, cfg, out)
    sys.stdout.write(_report_text(result))
    return _finish(args, "test", cfg, [cfg.seed], out, files, result.aborted, started)


def _finish(args, command, cfg, seeds, out, files, aborted, started) -> int:
    manifest = RunManifest(
        command=command,
        mode=cfg.mode,
        config_path=str(args.config),
        config_hash=config_hash(args.config),
        seeds=seeds,
        out_dir=str(out),
        files=files,
        status="aborted" if aborted else "ok",
        partial=bool(aborted),
        message=aborted or "",
        wall_clock_s=round(time.perf_counter() - started, 3),
    )
    manifest.write(out)
    if aborted:
        print(f"error: episode aborted: {aborted}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def aggregate(rows: list[dict]) -> dict[str, dict[str, float]]:
    """Median and interquartile range of every metric across runs."""
    out = {}
    for key in rows[0]:
        vals = np.array([r[key] for r in rows], dtype=float)
        q25, med, q75 = np.percentile(vals, [25, 50, 75])
        out[key] = {"median": float(med), "q25": float(q25), "q75": float(q75), "iqr": float(q75 - q25)}
    return out


def cmd_sweep(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    fixed_params = load_params(args.params_in) if args.params_in else None
    rows, files, failures = [], [], []
    for seed in args.seeds:
        run_dir = out / f"seed_{seed}"
        cfg = replace(parse_config(args.config, args.mode), seed=seed)
        params = fixed_params
        if cfg.mode == "test" and params is None:
            trained = run_episode(replace(parse_config(args.config, "learn"), seed=seed))
            if trained.aborted:
                failures.append(f"seed {seed} learn: {trained.aborted}")
                continue
            params = trained.params
        result = run_episode(cfg, params)
        files += [f"{run_dir.name}/{f}" for f in _write_run(result, cfg, run_dir)]
        if cfg.mode == "learn":
            save_params(result.params, run_dir / "params.txt")
            files.append(f"{run_dir.name}/params.txt")
        log.info("seed %d: %s", seed, result.metrics)
        if result.aborted:
            failures.append(f"seed {seed}: {result.aborted}")
        rows.append(result.metrics.as_dict())

    if rows:
        agg = aggregate(rows)
        (out / "aggregate.json").write_text(json.dumps(agg, indent=2, sort_keys=True) + "\n")
        with open(out / "aggregate.csv", "w") as fh:
            fh.write("metric,median,q25,q75,iqr\n")
            for key, s in agg.items():
                fh.write(f"{key},{s['median']:.17g},{s['q25']:.17g},{s['q75']:.17g},{s['iqr']:.17g}\n")
        files += ["aggregate.json", "aggregate.csv"]
        print(f"{'metric':30s} {'median':>12s} {'iqr':>12s}")
        for key, s in agg.items():
            print(f"{key:30s} {s['median']:12.6g} {s['iqr']:12.6g}")

    manifest = RunManifest(
        command="sweep",
        mode=args.mode,
        config_path=str(args.config),
        config_hash=config_hash(args.config),
        seeds=list(args.seeds),
        out_dir=str(out),
        files=files,
        status="aborted" if failures else "ok",
        partial=bool(failures),
        message="; ".join(failures),
        wall_clock_s=round(time.perf_counter() - started, 3),
    )
    manifest.write(out)
    if failures:
        print("error: " + "; ".join(failures), file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def random_step_context(cfg: EpisodeConfig, rng: np.random.Generator) -> StepContext:
    """A random but plausible (state, features, reference) tuple for gradient checks."""
    amp = cfg.reference.amplitude
    x_prev = rng.uniform(-2.0, 2.0, size=2)

    def feats():
        x_p = np.array([rng.uniform(-1, 1), rng.uniform(-0.5, 0.5), rng.uniform(-5, 5)])
        return x_p, rng.uniform(-amp, amp, size=cfg.controller.n_f)

    return StepContext(x_prev, feats(), feats(), float(rng.uniform(-amp, amp)),
                       float(rng.uniform(-amp, amp)), cfg.dt)


def grad_check_system(cfg: EpisodeConfig, points: int, rng: np.random.Generator) -> float:
    """Worst relative gradient error of the step loss over random weights and states."""
    worst = 0.0
    sat, pen = cfg.controller.saturation(), cfg.learner.penalty()
    for i in range(points):
        params = init_params(replace(cfg, seed=int(rng.integers(2**31))))
        # move the biases off zero so every weight gets a generic gradient
        params = params.with_flat(params.flat() + rng.normal(0.0, 0.3, params.size()))
        ctx = random_step_context(cfg, rng)
        worst = max(worst, step_loss_gradient_error(params, cfg.plant, ctx, sat, pen))
    return worst


def cmd_grad_check(args) -> int:
    if args.points < 1:
        raise ConfigError("--points must be at least 1")
    if args.config:
        systems = [(str(p), parse_config(p, "learn")) for p in args.config]
    else:
        systems = [(f"example {n}", example_config(n)) for n in (1, 2, 3)]
    rng = np.random.default_rng(args.seed)
    started = time.perf_counter()
    results = {}
    for name, cfg in systems:
        results[name] = grad_check_system(cfg, args.points, rng)
        print(f"{name:20s} points={args.points:<4d} max_rel_error={results[name]:.3e}")
    elapsed = time.perf_counter() - started
    worst = max(results.values())
    ok = bool(worst < GRAD_TOLERANCE)
    print(f"{'overall':20s} max_rel_error={worst:.3e} {'PASS' if ok else 'FAIL'} ({elapsed:.2f}s)")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        report = {"points": args.points, "seed": args.seed, "tolerance": GRAD_TOLERANCE,
                  "max_rel_error": results, "passed": ok, "wall_clock_s": round(elapsed, 3)}
        (out / "grad_check.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return EXIT_OK if ok else EXIT_NUMERIC


COMMANDS = {"learn": cmd_learn, "test": cmd_test, "sweep": cmd_sweep, "grad-check": cmd_grad_check}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
