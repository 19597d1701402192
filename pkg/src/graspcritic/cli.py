"""Command-line entry point: ``graspcritic {train,score,eval,report}``."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .env import EnvConfig, PlanarHandEnv, trace_row, write_trace
from .geometry import InvalidShapeError, default_shapes_path, load_shapes
from .graspgen import EmptyCandidateSetError, base_grid, filter_stable, sample_candidates, with_base
from .rl.checkpoint import CheckpointError, load_checkpoint
from .rl.ppo import NonFiniteLossError
from .rl.train import TrainConfig, Trainer

log = logging.getLogger("graspcritic")

OUT_ENV = "GRASPCRITIC_OUT"
EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_EMPTY, EXIT_CHECKPOINT = 0, 1, 2, 3, 4
FULL_TRIALS = 50_000


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    shapes_path: str = ""
    shape_names: list = field(default_factory=list)
    env: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=lambda: {"train": 0, "grasp": 1, "eval": 2})
    out_dir: str = ""
    strategies: list = field(default_factory=lambda: ["all"])
    trials: int = 5000
    k: int = 32
    base_grid: int = 17
    corr_pairs: int = 5000

    @classmethod
    def load(cls, path: str | None) -> "RunConfig":
        if path is None:
            return cls()
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        data = yaml.safe_load(p.read_text()) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{p}: expected a mapping at the top level")
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown config field(s): {', '.join(sorted(unknown))}")
        cfg = cls()
        for k, v in data.items():
            want = type(getattr(cfg, k))
            if not isinstance(v, want) or (want is int and isinstance(v, bool)):
                raise ConfigError(f"config field {k!r} must be {want.__name__}, got {type(v).__name__}")
            if k == "seeds":
                cfg.seeds = {**cfg.seeds, **v}
            else:
                setattr(cfg, k, v)
        return cfg


def _shapes(cfg: RunConfig):
    path = Path(cfg.shapes_path) if cfg.shapes_path else default_shapes_path()
    if not path.is_file():
        raise ConfigError(f"shape file not found: {path}")
    shapes = load_shapes(path)
    if cfg.shape_names:
        by_name = {s.name: s for s in shapes}
        missing = [n for n in cfg.shape_names if n not in by_name]
        if missing:
            raise ConfigError(f"shape_names: {missing} not in {path}")
        shapes = [by_name[n] for n in cfg.shape_names]
    return shapes


def _env_config(overrides: dict) -> EnvConfig:
    try:
        return EnvConfig.from_dict(overrides)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"env: {exc}") from None


def _train_config(d: dict, seeds: dict) -> TrainConfig:
    d = dict(d)
    d.setdefault("seed", seeds.get("train", 0))
    d.setdefault("grasp_seed", seeds.get("grasp", 1))
    try:
        return TrainConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train: {exc}") from None


def _out_dir(cfg: RunConfig, arg: str | None, default: str) -> Path:
    root = Path(os.environ.get(OUT_ENV, "runs"))
    out = Path(arg or cfg.out_dir or root / default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(checkpoint: str):
    if not Path(checkpoint).is_file():
        raise ConfigError(f"checkpoint not found: {checkpoint}")
    agent, meta, cfg_hash = load_checkpoint(checkpoint)
    from .geometry import ObjectShape
    shapes = [ObjectShape(d["name"], np.array(d["vertices"])) for d in meta["shapes"]]
    env_cfg = EnvConfig.from_dict(meta["env"])
    return agent, meta, cfg_hash, shapes, env_cfg


# -- subcommands ------------------------------------------------------------
def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    if args.shapes:
        cfg.shapes_path = args.shapes
    if args.shape_names:
        cfg.shape_names = args.shape_names.split(",")
    if args.seed is not None:
        cfg.seeds["train"] = args.seed
    if args.grasp_seed is not None:
        cfg.seeds["grasp"] = args.grasp_seed
    shapes = _shapes(cfg)
    tc = _train_config(cfg.train, cfg.seeds)
    if args.total_steps is not None:
        tc = dataclasses.replace(tc, total_steps=args.total_steps)
    if args.resume:
        trainer = Trainer.load_state(args.resume)
    else:
        trainer = Trainer(_env_config(cfg.env), shapes, tc)
    out = _out_dir(cfg, args.out, "train")
    state_path = out / "trainer_state.pkl"
    ckpt = out / "checkpoint.gcp"
    t0 = time.perf_counter()

    def progress(row):
        log.info("iter %d steps %d success %.3f drop %.3f (%.0fs)", row["iteration"], row["env_steps"],
                 row["success_rate"], row["drop_rate"], time.perf_counter() - t0)

    trainer.train(tc.total_steps, checkpoint_path=ckpt, on_iteration=progress)
    trainer.save_checkpoint(ckpt)
    trainer.write_log(out / "train_log.csv")
    trainer.save_state(state_path)
    print(f"checkpoint: {ckpt}")
    print(f"log: {out / 'train_log.csv'}")
    return EXIT_OK


def cmd_score(args) -> int:
    from .scoring import Strategy, candidate_pairs, score_candidates, select, write_scored_csv
    cfg = RunConfig.load(args.config)
    agent, meta, cfg_hash, shapes, env_cfg = _load(args.checkpoint)
    by_name = {s.name: s for s in shapes}
    if args.shape not in by_name:
        raise ConfigError(f"shape {args.shape!r} not in checkpoint shapes {sorted(by_name)}")
    shape = by_name[args.shape]
    env = PlanarHandEnv(dataclasses.replace(env_cfg, goal_resample=False), shapes)
    seed = cfg.seeds.get("eval", 2) if args.seed is None else args.seed
    cands = filter_stable(sample_candidates(shape, args.object_angle, args.k, seed, env.config))
    grid = base_grid(args.base_grid) if args.base_grid > 1 else [0.0]
    t0 = time.perf_counter()
    scored = score_candidates(agent, env, candidate_pairs(cands, grid), args.goal_angle)
    elapsed = time.perf_counter() - t0
    out = _out_dir(cfg, args.out, "score")
    write_scored_csv(out / "scored.csv", scored, cfg_hash)
    print(f"scored {len(scored)} candidates ({len(cands)} stable grasps x {len(grid)} base angles) "
          f"in {elapsed:.3f}s -> {out / 'scored.csv'}")
    print(f"{'grasp_id':>8} {'base':>8} {'epsilon':>9} {'v_d':>9} {'v_s':>9}")
    for c in sorted(scored, key=lambda c: -c.v_s)[:args.top]:
        print(f"{c.grasp_id:>8} {c.base_angle:>8.4f} {c.epsilon:>9.5f} {c.v_d:>9.4f} {c.v_s:>9.4f}")
    base0 = [c for c in scored if c.base_angle == 0.0] or scored
    rng = np.random.default_rng(seed)
    by_id = {g.id: g for g in cands}
    chosen = {}
    for strat in Strategy:
        pool = scored if strat.moves_base else base0
        chosen[strat] = select(strat, pool, rng)
        c = chosen[strat]
        print(f"{strat.value:>26}: grasp {c.grasp_id} base {c.base_angle:+.4f} v_s {c.v_s:.4f} eps {c.epsilon:.5f}")
    if args.trace:
        c = chosen[Strategy.HIGHEST_SCORING]
        g = with_base(by_id[c.grasp_id], c.base_angle)
        state, _ = env.reset(g, args.goal_angle, seed)
        rows = [trace_row(state)]
        while not state.done[0]:
            a = agent.policy(agent.normalize(env.observe(state).vector())).action
            res = env.step(state, a)
            rows.append(trace_row(state, res))
            state = res.next_state
        write_trace(args.trace, rows)
        print(f"trace: {args.trace}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .eval import (eval_hash, read_csv_hash, run_correlation_eval, run_strategy_eval, write_correlation_csv,
                       write_report_csv, CorrelationUndefinedError)
    from .scoring import Strategy
    cfg = RunConfig.load(args.config)
    agent, meta, ck_hash, shapes, env_cfg = _load(args.checkpoint)
    names = args.strategies.split(",") if args.strategies else cfg.strategies
    if names == ["all"] or names == ["*"]:
        strategies = list(Strategy)
    else:
        try:
            strategies = [Strategy.parse(n) for n in names]
        except ValueError as exc:
            raise ConfigError(f"strategies: {exc}") from None
        if Strategy.ALL not in strategies:
            strategies.insert(0, Strategy.ALL)
    trials = cfg.trials if args.trials is None else args.trials
    if args.full:
        trials = FULL_TRIALS
    k = cfg.k if args.k is None else args.k
    grid_n = cfg.base_grid if args.base_grid is None else args.base_grid
    seed = cfg.seeds.get("eval", 2) if args.seed is None else args.seed
    pairs = cfg.corr_pairs if args.corr_pairs is None else args.corr_pairs
    params = {"strategies": [s.value for s in strategies], "trials": trials, "k": k, "base_grid": grid_n,
              "seed": seed, "corr_pairs": pairs, "all_mode": args.all_mode,
              "action_mode": args.action_mode}
    h = eval_hash(ck_hash, params)
    if args.verify:
        found = read_csv_hash(args.verify)
        if found != h:
            print(f"error: {args.verify} has config hash {found}, expected {h}", file=sys.stderr)
            return EXIT_ERROR
        print(f"verified: {args.verify} matches config hash {h}")
        return EXIT_OK
    env = PlanarHandEnv(dataclasses.replace(env_cfg, goal_resample=False), shapes)
    out = _out_dir(cfg, args.out, "eval")
    grid = base_grid(grid_n) if grid_n > 1 else [0.0]
    t0 = time.perf_counter()
    report = run_strategy_eval(agent, env, shapes, strategies, trials, seed, k=k, base_angles=grid,
                               all_mode=args.all_mode, workers=args.workers, cfg_hash=h,
                               action_mode=args.action_mode)
    write_report_csv(out / "eval_report.csv", report)
    print(f"report: {out / 'eval_report.csv'} ({time.perf_counter() - t0:.0f}s)")
    if pairs > 0:
        try:
            corr = run_correlation_eval(agent, env, shapes, pairs, seed, workers=args.workers,
                                        action_mode=args.action_mode)
        except CorrelationUndefinedError as exc:
            print(f"correlation undefined: {exc}", file=sys.stderr)
        else:
            write_correlation_csv(out / "correlation.csv", corr, h)
            print(f"correlation: {out / 'correlation.csv'} pearson_r={corr.pearson_r:.3f}")
    _print_report(out / "eval_report.csv")
    return EXIT_OK


def _print_report(path) -> None:
    import csv
    with open(path) as fh:
        rows = list(csv.reader(line for line in fh if not line.startswith("#")))
    body = [r[:3] + [f"{float(v):.4f}" for v in r[3:]] for r in rows[1:]]
    table = [rows[0]] + body
    widths = [max(len(r[i]) for r in table) for i in range(len(rows[0]))]
    for r in table:
        print("  ".join(v.ljust(w) if i < 2 else v.rjust(w) for i, (v, w) in enumerate(zip(r, widths))))


def cmd_report(args) -> int:
    from .eval import read_csv_hash
    for p in args.paths:
        if not Path(p).is_file():
            raise ConfigError(f"report not found: {p}")
        print(f"{p} (config_hash={read_csv_hash(p)})")
        _print_report(p)
    return EXIT_OK


# -- parser -----------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="graspcritic", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train the policy and critic")
    t.add_argument("--config")
    t.add_argument("--shapes", help="shape library YAML")
    t.add_argument("--shape-names", help="comma-separated subset of the library")
    t.add_argument("--total-steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--grasp-seed", type=int)
    t.add_argument("--resume", help="trainer_state.pkl to continue from")
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("score", help="score candidate grasps for one object pose and goal")
    s.add_argument("--config")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--shape", required=True)
    s.add_argument("--object-angle", type=float, default=0.0)
    s.add_argument("--goal-angle", type=float, default=0.0)
    s.add_argument("--k", type=int, default=200)
    s.add_argument("--base-grid", type=int, default=17, help="number of base angles in [-pi/2, pi/2]")
    s.add_argument("--seed", type=int)
    s.add_argument("--top", type=int, default=10)
    s.add_argument("--trace", help="write a mean-action episode trace of the highest-scoring candidate here")
    s.add_argument("--out")
    s.set_defaults(func=cmd_score)

    e = sub.add_parser("eval", help="strategy comparison and score/success correlation")
    e.add_argument("--config")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--strategies", help="'all' or a comma-separated list")
    e.add_argument("--trials", type=int)
    e.add_argument("--full", action="store_true", help=f"use {FULL_TRIALS} trials instead of the configured count")
    e.add_argument("--k", type=int)
    e.add_argument("--base-grid", type=int)
    e.add_argument("--corr-pairs", type=int)
    e.add_argument("--all-mode", choices=("mean", "sample"), default="mean")
    e.add_argument("--action-mode", choices=("sample", "mean"), default="sample",
                   help="roll out sampled policy actions or the mean action")
    e.add_argument("--seed", type=int)
    e.add_argument("--verify", help="check that an existing report matches this configuration")
    e.add_argument("--out")
    e.add_argument("--workers", type=int, default=1)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="print report CSVs")
    r.add_argument("paths", nargs="+")
    r.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, InvalidShapeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except EmptyCandidateSetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EMPTY
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
