"""Command-line entry points: train, eval, diversity, paths, replay.

Every command writes into one output directory::

    manifest.json    command, resolved config, seed, sha256 of every artifact
    checkpoints/     train only
    curves.csv       train only
    results.csv      eval only
    diversity.csv    diversity only
    logs/            run log plus per-episode / per-step CSVs

The directory is ``--out`` (default: the command name), placed under
``$DIVNAV_OUTPUT_ROOT`` when that is set and ``--out`` is relative.

Exit codes: 0 success, 2 configuration error, 3 missing input file,
4 any other failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import nn
from .config import load_suite_config, load_train_config
from .evaluation import (MissingArtifactError, ScenarioError, behavior_paths, collect_probe, diversity_metric,
                         load_probe, run_suite, save_probe, write_diversity, write_episodes, write_results)
from .sim import TrajectoryLog
from .trainer import ConfigError, config_from_checkpoint, networks_from_checkpoint, train

log = logging.getLogger("divnav")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_RUNTIME = 0, 2, 3, 4
OUTPUT_ROOT_ENV = "DIVNAV_OUTPUT_ROOT"


class ReplayError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


# ----------------------------------------------------------------------------
# run directory and manifest


def output_dir(out: str | None, command: str) -> Path:
    p = Path(out or command)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    """Owns the output directory; the manifest is written first and completed last."""

    def __init__(self, command: str, out: Path, config_path, config: dict, seed):
        self.dir = out
        self.dir.mkdir(parents=True, exist_ok=True)
        (self.dir / "logs").mkdir(exist_ok=True)
        self.manifest = {"command": command, "config_path": str(config_path) if config_path else None,
                         "config": config, "seed": seed, "output_dir": str(out), "artifacts": {}}
        self._write_manifest()
        self._handler = logging.FileHandler(self.dir / "logs" / f"{command}.log", mode="w")
        self._handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        self._handler.run_log = True
        logging.getLogger().addHandler(self._handler)

    def _write_manifest(self):
        with open(self.dir / "manifest.json", "w") as fh:
            json.dump(self.manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def finish(self):
        _detach_run_logs()
        arts = {}
        for p in sorted(self.dir.rglob("*")):
            if p.is_file() and p.name != "manifest.json":
                arts[p.relative_to(self.dir).as_posix()] = sha256(p)
        self.manifest["artifacts"] = arts
        self._write_manifest()


def _detach_run_logs():
    root = logging.getLogger()
    for h in list(root.handlers):
        if getattr(h, "run_log", False):
            root.removeHandler(h)
            h.close()


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise MissingArtifactError(f"{what} not found: {p}")
    return p


def _load_policy(path):
    ckpt = nn.load_checkpoint(_require_file(path, "checkpoint"))
    return networks_from_checkpoint(ckpt), config_from_checkpoint(ckpt)


# ----------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = load_train_config(args.config, args.set)
    resume = nn.load_checkpoint(_require_file(args.resume, "checkpoint")) if args.resume else None
    run = Run("train", output_dir(args.out, "train"), args.config, cfg.to_dict(), cfg.seed)

    def progress(row):
        log.info("update %d task %.4f intrinsic %.4f acc %.3f", row["update"], row["mean_task_reward"],
                 row["mean_intrinsic_reward"], row["disc_sa_acc"])

    train(cfg, run.dir, resume=resume, progress=progress)
    run.finish()
    print(run.dir / "checkpoints" / "final.bin")
    return EXIT_OK


def cmd_eval(args) -> int:
    overrides = list(args.set)
    if args.episodes is not None:
        overrides.append(f"episodes={args.episodes}")
    if args.seeds is not None:
        overrides.append(f"seeds={args.seeds}")
    if args.kinds is not None:
        overrides.append(f"kinds={args.kinds}")
    suite = load_suite_config(args.scenario, overrides)
    nets, train_cfg = _load_policy(args.checkpoint)
    snapshot = {**suite.__dict__, "checkpoint": str(args.checkpoint), "trajectories": args.trajectories}
    run = Run("eval", output_dir(args.out, "eval"), args.scenario, snapshot, list(suite.seeds))
    episodes: list = []
    rows = run_suite(nets, suite.kinds, suite.episodes, suite.seeds, suite.n_agents,
                     suite.pedestrian_checkpoints, suite.suboptimal_checkpoint or None, train_cfg,
                     episode_log=episodes, trajectory_dir=run.dir / "logs" if args.trajectories else None)
    write_results(run.dir / "results.csv", rows)
    write_episodes(run.dir / "logs" / "episodes.csv", episodes)
    for r in rows:
        log.info("%s seed %d success %.3f", r["kind"], r["seed"], r["success_rate"])
    run.finish()
    print(run.dir / "results.csv")
    return EXIT_OK


def cmd_diversity(args) -> int:
    if (args.probe is None) == (args.probe_checkpoint is None):
        raise ConfigError("probe", "give exactly one of --probe or --probe-checkpoint")
    policies = [(p, *_load_policy(p)) for p in args.checkpoint]
    for path, nets, _ in policies:
        if args.M is not None and args.M != nets.arch.n_tokens:
            raise ConfigError("M", f"requested M={args.M} but {path} has M={nets.arch.n_tokens}")
    snapshot = {"checkpoints": [str(p) for p in args.checkpoint], "probe": args.probe,
                "probe_checkpoint": args.probe_checkpoint, "probe_states": args.probe_states, "M": args.M}
    if args.probe is not None:
        probe = load_probe(args.probe)
        run = Run("diversity", output_dir(args.out, "diversity"), None, snapshot, args.seed)
    else:
        probe_nets, probe_cfg = _load_policy(args.probe_checkpoint)
        run = Run("diversity", output_dir(args.out, "diversity"), None, snapshot, args.seed)
        probe = collect_probe(probe_nets, probe_cfg, args.probe_states, args.seed)
        save_probe(run.dir / "logs" / "probe.npy", probe)
    rows = []
    for path, nets, _ in policies:
        d = diversity_metric(nets, probe)
        log.info("%s: D=%.6f", path, d)
        rows.append((Path(path).as_posix(), nets.arch.n_tokens, d))
    write_diversity(run.dir / "diversity.csv", rows)
    run.finish()
    print(run.dir / "diversity.csv")
    return EXIT_OK


def cmd_paths(args) -> int:
    nets, train_cfg = _load_policy(args.checkpoint)
    snapshot = {"checkpoint": str(args.checkpoint), "start": args.start, "goal": args.goal}
    run = Run("paths", output_dir(args.out, "paths"), None, snapshot, 0)
    with open(run.dir / "logs" / "paths.csv", "w", newline="") as fh:
        behavior_paths(nets, train_cfg, start=tuple(args.start), goal=tuple(args.goal), log=TrajectoryLog(fh))
    run.finish()
    print(run.dir / "logs" / "paths.csv")
    return EXIT_OK


REPLAY_FIELDS = ["episode_id", "agent_id", "token", "seq", "x", "y", "speed"]


def read_polylines(path) -> dict[tuple[int, int], list[tuple]]:
    """Group a per-step trajectory CSV into one polyline per (episode, agent)."""
    groups: dict[tuple[int, int], list[tuple]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return groups
        need = ("episode_id", "agent_id", "x", "y", "v", "token")
        missing = [c for c in need if c not in header]
        if missing:
            raise ReplayError(1, f"missing columns {missing}")
        col = {c: header.index(c) for c in need}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ReplayError(lineno, f"expected {len(header)} fields, got {len(row)}")
            try:
                key = (int(row[col["episode_id"]]), int(row[col["agent_id"]]))
                x, y, v = float(row[col["x"]]), float(row[col["y"]]), float(row[col["v"]])
                token = int(row[col["token"]])
            except ValueError as e:
                raise ReplayError(lineno, str(e)) from None
            if not all(np.isfinite([x, y, v])):
                raise ReplayError(lineno, "non-finite value")
            groups.setdefault(key, []).append((token, x, y, abs(v)))
    return groups


def cmd_replay(args) -> int:
    groups = read_polylines(_require_file(args.log, "trajectory log"))
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPLAY_FIELDS)
        for (ep, agent), pts in sorted(groups.items()):
            for k, (token, x, y, speed) in enumerate(pts):
                w.writerow([ep, agent, token, k, f"{x:.6f}", f"{y:.6f}", f"{speed:.6f}"])
    print(f"{len(groups)} polylines -> {out}")
    return EXIT_OK


# ----------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="divnav", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a behavior-conditioned policy")
    p.add_argument("--config", help="INI file with a [train] section")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one option")
    p.add_argument("--resume", help="continue from this checkpoint")
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="run the pedestrian scenario suite")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenario", help="INI file with a [scenario] section")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--episodes", type=int)
    p.add_argument("--seeds", help="comma-separated")
    p.add_argument("--kinds", help="comma-separated subset of NH,IN,VA,SO,VO,SF")
    p.add_argument("--trajectories", action="store_true", help="also write per-step CSVs under logs/")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("diversity", help="action diversity of one or more checkpoints")
    p.add_argument("--checkpoint", required=True, action="append")
    p.add_argument("--probe", help="saved probe features (.npy)")
    p.add_argument("--probe-checkpoint", help="generate probe states with this (no-intrinsic) policy")
    p.add_argument("--probe-states", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--M", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_diversity)

    p = sub.add_parser("paths", help="one path per token around an obstacle")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--start", type=float, nargs=2, default=[4.0, 10.0])
    p.add_argument("--goal", type=float, nargs=2, default=[16.0, 10.0])
    p.add_argument("--out")
    p.set_defaults(func=cmd_paths)

    p = sub.add_parser("replay", help="turn a trajectory log into plot-ready polylines")
    p.add_argument("--log", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_replay)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(format="%(levelname)s %(message)s", stream=sys.stderr)
    logging.getLogger().setLevel(logging.DEBUG if args.verbose else logging.INFO)
    try:
        return args.func(args)
    except (ConfigError, ScenarioError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        print(f"missing: {e}", file=sys.stderr)
        return EXIT_MISSING
    except Exception as e:  # noqa: BLE001 - every other failure maps to one exit code
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        _detach_run_logs()


if __name__ == "__main__":
    sys.exit(main())
