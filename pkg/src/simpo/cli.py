"""Command line entry point: ``simpo run | verify | sweep | plot-data``.

Every command writes into a staging directory next to its target and renames
it into place at the end, so a failed command leaves nothing behind.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import shutil
import sys
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .bandit import LANDSCAPES, ShapingTransform, TrainConfig, action_grid, reward, run_trial, shape_reward
from .checkpoint import checkpoint_from_matcher, save_checkpoint
from .config import CONFIG_KEYS, coerce_value, format_config, parse_config, parse_config_text
from .exceptions import ConfigError, SimpoError

__all__ = ["METRICS_HEADER", "RunManifest", "cmd_run", "cmd_verify", "cmd_sweep", "cmd_plotdata", "main",
           "worker_count", "read_metrics"]

SCHEMA_VERSION = 1
METRICS_HEADER = ["seed", "epoch", "regret", "mean_weight", "min_weight", "max_weight", "nu", "lambda",
                  "weight_entropy", "wall_ms"]


@dataclass(frozen=True)
class RunManifest:
    schema_version: int
    config: dict
    seeds: list
    started: str
    output_dir: str
    config_hash: str

    def to_json(self):
        return json.dumps(asdict(self), indent=1, sort_keys=True) + "\n"


def config_hash(text: str) -> str:
    """Git-style blob hash of the resolved config text."""
    data = text.encode("utf-8")
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def worker_count(n_tasks: int) -> int:
    env = os.environ.get("SIMPO_THREADS")
    if env:
        try:
            cap = int(env)
        except ValueError:
            raise ConfigError(f"SIMPO_THREADS must be an integer, got {env!r}", key="SIMPO_THREADS") from None
        if cap < 1:
            raise ConfigError("SIMPO_THREADS must be at least 1", key="SIMPO_THREADS")
    else:
        cap = os.cpu_count() or 1
    return max(1, min(cap, n_tasks))


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


class _Staging:
    """Directory created beside ``target`` and renamed onto it on success."""

    def __init__(self, target):
        self.target = Path(target)

    def __enter__(self):
        if self.target.exists() and (not self.target.is_dir() or any(self.target.iterdir())):
            raise SimpoError(f"output directory {self.target} already exists and is not empty")
        parent = self.target.parent
        parent.mkdir(parents=True, exist_ok=True)
        self.path = Path(tempfile.mkdtemp(prefix=f".{self.target.name}.", dir=parent))
        return self.path

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            shutil.rmtree(self.path, ignore_errors=True)
            return False
        if self.target.is_dir():
            self.target.rmdir()
        os.rename(self.path, self.target)
        return False


def _write_metrics(path, results, timing):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for res in results:
            for r in res.records:
                w.writerow([_fmt(res.seed), _fmt(r.epoch), _fmt(r.regret), _fmt(r.mean_weight),
                            _fmt(r.min_weight), _fmt(r.max_weight), _fmt(r.nu), _fmt(r.lam),
                            _fmt(r.weight_entropy), _fmt(r.wall_ms if timing else 0.0)])


def _run_into(stage: Path, config: TrainConfig, seeds, target: Path, timing=False, workers=None):
    text = format_config(config)
    manifest = RunManifest(SCHEMA_VERSION, {k: getattr(config, "lam" if k == "lambda" else k) for k in CONFIG_KEYS},
                           list(seeds), datetime.now(timezone.utc).isoformat(timespec="seconds"),
                           str(target.resolve()), config_hash(text))
    (stage / "manifest.json").write_text(manifest.to_json(), encoding="utf-8")
    (stage / "config.ini").write_text(text, encoding="utf-8")
    workers = worker_count(len(seeds)) if workers is None else workers
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda s: run_trial(config, s), seeds))
    else:
        results = [run_trial(config, s) for s in seeds]
    _write_metrics(stage / "metrics.csv", results, timing)
    ckdir = stage / "checkpoints"
    ckdir.mkdir()
    for res in results:
        st = res.state
        ck = checkpoint_from_matcher(st.policy, epoch=st.epoch, lam=st.lam, meta={"seed": res.seed})
        save_checkpoint(ck, ckdir / f"seed_{res.seed}.json")
    return results


def cmd_run(config: TrainConfig, out_dir, n_seeds=1, timing=False, workers=None):
    """Run ``n_seeds`` trials (seeds ``config.seed + i``) into ``out_dir``.

    Returns the trial results. ``wall_ms`` is written as 0 unless ``timing``
    is set, which keeps metrics.csv byte-identical across reruns.
    """
    if n_seeds < 1:
        raise ConfigError("--seeds must be at least 1", key="seeds")
    seeds = [config.seed + i for i in range(n_seeds)]
    target = Path(out_dir)
    with _Staging(target) as stage:
        return _run_into(stage, config, seeds, target, timing, workers)


def cmd_verify(perturb_nu=0.0, out=sys.stdout) -> int:
    from .verify import run_checks

    start = time.perf_counter()
    results = run_checks(perturb_nu=perturb_nu, out=out)
    n_fail = sum(not r.passed for r in results)
    print(f"{len(results) - n_fail}/{len(results)} check groups passed in {time.perf_counter() - start:.1f}s",
          file=out)
    return 0 if n_fail == 0 else 1


def _parse_values(axis, values):
    if axis not in CONFIG_KEYS:
        raise ConfigError(f"sweep axis {axis!r} is not a config key; choose from {', '.join(CONFIG_KEYS)}", key=axis)
    raw = [v.strip() for v in values.split(",")] if isinstance(values, str) else [str(v) for v in values]
    raw = [v for v in raw if v]
    if not raw:
        raise ConfigError("sweep needs at least one value", key=axis)
    return raw, [coerce_value(axis, v) for v in raw]


def cmd_sweep(config: TrainConfig, axis: str, values, out_dir, n_seeds=1, timing=False):
    """One full run per value of ``axis`` plus summary.csv of median final regrets."""
    raw, parsed = _parse_values(axis, values)
    field = "lam" if axis == "lambda" else axis
    try:
        configs = [replace(config, **{field: v}) for v in parsed]
    except ValueError as exc:
        raise ConfigError(f"invalid value for {axis!r}: {exc}", key=axis) from None
    target = Path(out_dir)
    with _Staging(target) as stage:
        seeds = [config.seed + i for i in range(n_seeds)]
        jobs = list(zip(raw, configs))
        outer = worker_count(len(jobs))
        inner = max(1, worker_count(len(jobs) * len(seeds)) // outer)

        def one(job):
            name, cfg = job
            sub = stage / f"{axis}={name}"
            sub.mkdir()
            return _run_into(sub, cfg, seeds, target / sub.name, timing, inner)

        if outer > 1:
            with ThreadPoolExecutor(max_workers=outer) as pool:
                all_results = list(pool.map(one, jobs))
        else:
            all_results = [one(j) for j in jobs]
        with open(stage / "summary.csv", "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["axis", "value", "median_final_regret", "n_seeds"])
            for name, results in zip(raw, all_results):
                w.writerow([axis, name, _fmt(float(np.median([r.final_regret for r in results]))),
                            len(results)])
    return all_results


def read_metrics(path):
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != METRICS_HEADER:
        raise SimpoError(f"{path}: unexpected metrics header {rows[0] if rows else '(empty file)'}")
    return [dict(zip(METRICS_HEADER, r)) for r in rows[1:]]


def cmd_plotdata(run_dir):
    """Write regret_median.csv and landscape.csv into ``run_dir``."""
    run_dir = Path(run_dir)
    metrics = run_dir / "metrics.csv"
    if not metrics.is_file():
        raise SimpoError(f"{metrics} not found; plot-data needs a finished run directory")
    rows = read_metrics(metrics)
    cfg_path = run_dir / "config.ini"
    config = parse_config(cfg_path) if cfg_path.is_file() else TrainConfig()
    by_epoch = {}
    for r in rows:
        by_epoch.setdefault(int(r["epoch"]), []).append(float(r["regret"]))
    with open(run_dir / "regret_median.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "median", "q25", "q75"])
        for ep in sorted(by_epoch):
            v = np.asarray(by_epoch[ep])
            w.writerow([ep, _fmt(np.median(v)), _fmt(np.percentile(v, 25)), _fmt(np.percentile(v, 75))])
    land = LANDSCAPES[config.landscape]
    grid = action_grid()
    r = reward(land, grid)
    shaped = shape_reward(ShapingTransform(config.shaping), land, grid)
    with open(run_dir / "landscape.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["a", "reward", "shaped_reward"])
        for a, rv, sv in zip(grid, r, shaped):
            w.writerow([_fmt(a), _fmt(rv), _fmt(sv)])
    return run_dir / "regret_median.csv", run_dir / "landscape.csv"


def _load_config(path):
    return parse_config(path) if path else parse_config_text("")


def build_parser():
    p = argparse.ArgumentParser(prog="simpo", description="Signed-measure reweighted flow policy experiments.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train one config over several seeds")
    r.add_argument("--config", help="INI config file (defaults when omitted)")
    r.add_argument("--out", required=True, help="output directory (must not exist or be empty)")
    r.add_argument("--seeds", type=int, default=1, help="number of seeds, starting at the config seed")
    r.add_argument("--timing", action="store_true", help="record real wall_ms (breaks byte-identical reruns)")

    v = sub.add_parser("verify", help="run the oracle and invariant checks")
    v.add_argument("--perturb-nu", type=float, default=0.0, help=argparse.SUPPRESS)

    s = sub.add_parser("sweep", help="one run per value of a config key")
    s.add_argument("--config", help="INI config file (defaults when omitted)")
    s.add_argument("--axis", required=True, help="config key to vary")
    s.add_argument("--values", required=True, help="comma-separated values")
    s.add_argument("--out", help="output directory (default: sweep-<axis>)")
    s.add_argument("--seeds", type=int, default=1)
    s.add_argument("--timing", action="store_true")

    d = sub.add_parser("plot-data", help="emit regret and landscape CSVs for a run")
    d.add_argument("run_dir")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            results = cmd_run(_load_config(args.config), args.out, args.seeds, args.timing)
            med = float(np.median([r.final_regret for r in results]))
            print(f"wrote {args.out}: {len(results)} seed(s), median final regret {med:.4f}")
            return 0
        if args.command == "verify":
            return cmd_verify(args.perturb_nu)
        if args.command == "sweep":
            out = args.out or f"sweep-{args.axis}"
            cmd_sweep(_load_config(args.config), args.axis, args.values, out, args.seeds, args.timing)
            print(f"wrote {out}/summary.csv")
            return 0
        if args.command == "plot-data":
            for path in cmd_plotdata(args.run_dir):
                print(f"wrote {path}")
            return 0
    except ConfigError as exc:
        where = f" (line {exc.line})" if exc.line else ""
        print(f"simpo: config error{where}: {exc}", file=sys.stderr)
        return 2
    except (SimpoError, OSError) as exc:
        print(f"simpo: error: {exc}", file=sys.stderr)
        return 1
    return 2


if __name__ == "__main__":
    sys.exit(main())
