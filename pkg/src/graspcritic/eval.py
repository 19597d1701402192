"""Strategy comparison and critic-score / success correlation experiments."""
from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .env import PlanarHandEnv
from .geometry import ObjectShape
from .graspgen import EmptyCandidateSetError, Grasp, filter_stable, sample_candidates, with_base
from .rl.agent import ActorCritic
from .rl.checkpoint import config_hash
from .scoring import Strategy, candidate_pairs, default_base_grid, initial_observations, score_candidates, select

log = logging.getLogger(__name__)

REPORT_COLUMNS = ("shape", "strategy", "n_trials", "success_rate", "success_rate_improvement_vs_ALL",
                  "dropped_pct", "avg_time_to_goal_s")
CORRELATION_COLUMNS = ("bin", "mean_v_s", "success_rate", "count")
EVAL_STREAM = 0x5EED_E7A1  # keeps evaluation draws apart from training streams
ACTION_STREAM = 0xAC71_0000
ACTION_MODES = ("sample", "mean")


class CorrelationUndefinedError(ValueError):
    pass


@dataclass
class RolloutOutcome:
    success: np.ndarray
    dropped: np.ndarray
    time_to_goal: np.ndarray   # seconds, NaN unless successful
    steps: np.ndarray


@dataclass
class StrategyRow:
    shape: str
    strategy: str
    n_trials: int
    success_rate: float
    improvement: float         # percentage points against ALL
    dropped_pct: float
    avg_time_to_goal_s: float


@dataclass
class CorrelationSection:
    bins: list                 # (mean_v_s, success_rate, count)
    pearson_r: float
    n_pairs: int
    binning: str = "v_s quantiles"


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    correlation: CorrelationSection | None = None
    config_hash: str = ""
    seeds: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def row(self, strategy: Strategy | str, shape: str = "all") -> StrategyRow:
        name = strategy.value if isinstance(strategy, Strategy) else strategy
        for r in self.rows:
            if r.strategy == name and r.shape == shape:
                return r
        raise KeyError((name, shape))


# -- rollouts ---------------------------------------------------------------
def _action_noise(seeds, n_steps: int, act_dim: int) -> np.ndarray:
    """Per-episode standard normal draws, one row per step, keyed by the episode seed."""
    return np.stack([np.random.default_rng([ACTION_STREAM, int(s)]).standard_normal((n_steps, act_dim))
                     for s in seeds])


def _rollout_chunk(agent: ActorCritic, env: PlanarHandEnv, grasps, goals, seeds, mode: str) -> RolloutOutcome:
    state = env.reset_batch(grasps, goals, seeds)
    n = len(grasps)
    noise = _action_noise(seeds, env.config.max_steps, env.config.action_dim) if mode == "sample" else None
    success = np.zeros(n, dtype=bool)
    dropped = np.zeros(n, dtype=bool)
    ttg = np.full(n, np.nan)
    steps = np.zeros(n, dtype=np.int64)
    active = np.ones(n, dtype=bool)
    while active.any():
        idx = np.flatnonzero(active)
        sub = state.take(idx)
        action = agent.policy(agent.normalize(env.observe(sub).vector())).action
        if noise is not None:
            action = action + np.exp(agent.log_std) * noise[idx, steps[idx]]
        res = env.step(sub, action)
        state.replace_rows(idx, res.next_state)
        success[idx] |= res.success
        dropped[idx] |= res.dropped
        ttg[idx] = np.where(res.success & np.isnan(ttg[idx]), res.time_to_goal, ttg[idx])
        steps[idx] += 1
        active[idx] = ~res.done
    return RolloutOutcome(success, dropped, ttg, steps)


def _chunk_worker(args):
    return _rollout_chunk(*args)


def rollout(agent: ActorCritic, env: PlanarHandEnv, grasps: Sequence[Grasp], goals, seeds,
            chunk: int = 2048, workers: int = 1, mode: str = "sample") -> RolloutOutcome:
    """Policy episodes, one per grasp, run in vectorized chunks.

    ``mode="sample"`` draws actions from the policy with noise keyed by each
    episode's seed; ``"mean"`` uses the mean action. Every episode's result
    depends only on its own grasp, goal and seed, so chunking and worker count
    never change the outcome.
    """
    if mode not in ACTION_MODES:
        raise ValueError(f"action mode must be one of {ACTION_MODES}")
    n = len(grasps)
    goals = np.broadcast_to(np.asarray(goals, dtype=np.float64), (n,))
    jobs = [(agent, env, list(grasps[i:i + chunk]), goals[i:i + chunk], list(seeds[i:i + chunk]), mode)
            for i in range(0, n, chunk)]
    if workers > 1 and len(jobs) > 1:
        import multiprocessing as mp
        with mp.get_context("fork").Pool(workers) as pool:
            parts = pool.map(_chunk_worker, jobs)
    else:
        parts = [_chunk_worker(j) for j in jobs]
    if not parts:
        return RolloutOutcome(np.zeros(0, bool), np.zeros(0, bool), np.zeros(0), np.zeros(0, np.int64))
    return RolloutOutcome(*(np.concatenate([getattr(p, f.name) for p in parts])
                            for f in dataclasses.fields(RolloutOutcome)))


# -- statistics -------------------------------------------------------------
def pearson(xs, ys, weights=None) -> float:
    """Weighted Pearson correlation."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    w = np.ones_like(x) if weights is None else np.asarray(weights, dtype=np.float64)
    if x.shape != y.shape or x.shape != w.shape:
        raise ValueError("xs, ys and weights must have the same length")
    if len(x) < 2:
        raise CorrelationUndefinedError("need at least 2 points")
    w = w / w.sum()
    dx = x - np.sum(w * x)
    dy = y - np.sum(w * y)
    vx, vy = np.sum(w * dx * dx), np.sum(w * dy * dy)
    scale = max(np.max(np.abs(x)), np.max(np.abs(y)), 1e-300)
    if vx <= (1e-12 * scale) ** 2 or vy <= (1e-12 * scale) ** 2:
        raise CorrelationUndefinedError("zero variance")
    return float(np.clip(np.sum(w * dx * dy) / np.sqrt(vx * vy), -1.0, 1.0))


def binned_correlation(v_s, success, n_bins: int = 20) -> CorrelationSection:
    """Group samples into v_s-quantile bins and correlate bin mean v_s with bin success rate."""
    v = np.asarray(v_s, dtype=np.float64)
    s = np.asarray(success, dtype=np.float64)
    edges = np.unique(np.quantile(v, np.linspace(0, 1, n_bins + 1))) if len(v) else np.zeros(0)
    bins = []
    if len(edges) >= 2:
        idx = np.clip(np.searchsorted(edges, v, side="right") - 1, 0, len(edges) - 2)
        for b in range(len(edges) - 1):
            m = idx == b
            if m.any():
                bins.append((float(v[m].mean()), float(s[m].mean()), int(m.sum())))
    if len(bins) < 3:
        raise CorrelationUndefinedError(f"only {len(bins)} non-empty v_s bins; need 3")
    arr = np.array(bins)
    r = pearson(arr[:, 0], arr[:, 1], arr[:, 2])
    return CorrelationSection(bins, r, len(v))


# -- experiments ------------------------------------------------------------
def _trial_draws(seed: int, shape_idx: int, trial: int):
    rng = np.random.default_rng([EVAL_STREAM, seed, shape_idx, trial])
    phi, goal = rng.uniform(-np.pi, np.pi, size=2)
    cand_seed, env_seed = (int(x) for x in rng.integers(0, 2**63 - 1, size=2))
    return float(phi), float(goal), cand_seed, env_seed, rng


def run_strategy_eval(agent: ActorCritic, env: PlanarHandEnv, shapes: Sequence[ObjectShape],
                      strategies: Sequence[Strategy], n_trials: int, seed: int, k: int = 32,
                      base_angles: Sequence[float] | None = None, all_mode: str = "mean",
                      workers: int = 1, cfg_hash: str = "", action_mode: str = "sample") -> EvalReport:
    """Compare selection strategies on shared trials.

    ``n_trials`` trials per strategy are dealt round-robin over ``shapes``.
    Each trial draws an object angle, goal and candidate set once; every
    strategy picks from that same set and its episode uses the same
    randomization seed. With ``all_mode="mean"`` the ALL row averages every
    stable candidate of the trial; ``"sample"`` rolls out one uniform pick.
    ``action_mode`` is passed to :func:`rollout`.
    """
    if all_mode not in ("mean", "sample"):
        raise ValueError("all_mode must be 'mean' or 'sample'")
    strategies = list(strategies)
    grid = list(default_base_grid() if base_angles is None else base_angles)
    if 0.0 not in grid:
        grid.append(0.0)
    report = EvalReport(config_hash=cfg_hash,
                        seeds={"eval": seed, "k": k, "all_mode": all_mode, "base_grid": len(grid),
                               "actions": action_mode})
    names = [s.name for s in shapes]
    # jobs[j] = (grasp with base, goal, env seed); picks[(strategy, trial)] = list of job ids
    jobs: list = []
    job_index: dict = {}
    picks: dict = {}
    trial_shape: dict = {}

    def job(t, g, base, goal, env_seed):
        key = (t, g.id, base)
        if key not in job_index:
            job_index[key] = len(jobs)
            jobs.append((with_base(g, base), goal, env_seed))
        return job_index[key]

    for t in range(n_trials):
        si = t % len(shapes)
        shape = shapes[si]
        phi, goal, cand_seed, env_seed, rng = _trial_draws(seed, si, t)
        try:
            cands = filter_stable(sample_candidates(shape, phi, k, cand_seed, env.config))
        except EmptyCandidateSetError:
            report.notes.append(f"trial {t} ({shape.name}): no stable candidates, skipped")
            continue
        trial_shape[t] = shape.name
        scored0 = score_candidates(agent, env, candidate_pairs(cands), goal)
        by_id = {g.id: g for g in cands}
        for strat in strategies:
            if strat is Strategy.ALL and all_mode == "mean":
                picks[(strat, t)] = [job(t, g, 0.0, goal, env_seed) for g in cands]
                continue
            if strat.moves_base:
                scored = score_candidates(agent, env, candidate_pairs(cands, grid), goal)
            else:
                scored = scored0
            c = select(strat, scored, rng)
            picks[(strat, t)] = [job(t, by_id[c.grasp_id], c.base_angle, goal, env_seed)]

    out = rollout(agent, env, [j[0] for j in jobs], np.array([j[1] for j in jobs]),
                  [j[2] for j in jobs], workers=workers, mode=action_mode)

    def aggregate(shape_name: str | None):
        rows = {}
        for strat in strategies:
            ts = [t for t in trial_shape if shape_name is None or trial_shape[t] == shape_name]
            succ, drop, ttg = [], [], []
            for t in ts:
                ids = picks[(strat, t)]
                succ.append(out.success[ids].mean())
                drop.append(out.dropped[ids].mean())
                ttg.extend(out.time_to_goal[ids][out.success[ids]])
            n = len(ts)
            rows[strat] = StrategyRow(shape_name or "all", strat.value, n,
                                      float(np.mean(succ)) if n else float("nan"), float("nan"),
                                      100.0 * float(np.mean(drop)) if n else float("nan"),
                                      float(np.mean(ttg)) if ttg else float("nan"))
        base = rows.get(Strategy.ALL)
        for r in rows.values():
            if base is not None and r.n_trials:
                r.improvement = 0.0 if r is base else 100.0 * (r.success_rate - base.success_rate)
        return list(rows.values())

    for name in names:
        report.rows.extend(aggregate(name))
    report.rows.extend(aggregate(None))
    return report


def run_correlation_eval(agent: ActorCritic, env: PlanarHandEnv, shapes: Sequence[ObjectShape], n_pairs: int,
                         seed: int, n_bins: int = 20, k: int = 8, workers: int = 1,
                         outcome_fn: Callable[[np.ndarray], np.ndarray] | None = None,
                         action_mode: str = "sample") -> CorrelationSection:
    """Score one random stable grasp for each of ``n_pairs`` (object angle, goal) pairs, roll out, correlate.

    ``outcome_fn`` maps the v_s array to success flags in place of rollouts;
    it exists so the statistics can be checked on constructed data.
    """
    grasps, goals, seeds = [], [], []
    # draws without a stable candidate are replaced, up to a bounded number of extra draws
    for j in range(10 * n_pairs + 10):
        if len(grasps) == n_pairs:
            break
        si = j % len(shapes)
        phi, goal, cand_seed, env_seed, rng = _trial_draws(seed + 1, si, j)
        try:
            cands = filter_stable(sample_candidates(shapes[si], phi, k, cand_seed, env.config))
        except EmptyCandidateSetError:
            continue
        grasps.append(cands[int(rng.integers(len(cands)))])
        goals.append(goal)
        seeds.append(env_seed)
    goals = np.array(goals)
    if not grasps:
        raise CorrelationUndefinedError("no stable pairs")
    v_s = agent.critic_eval(initial_observations(env, grasps, np.zeros(len(grasps)), goals)).v_s
    if outcome_fn is not None:
        success = np.asarray(outcome_fn(v_s), dtype=bool)
    else:
        success = rollout(agent, env, grasps, goals, seeds, workers=workers, mode=action_mode).success
    return binned_correlation(v_s, success, n_bins)


# -- output -----------------------------------------------------------------
def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def write_report_csv(path, report: EvalReport) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={report.config_hash}\n")
        fh.write("# seeds=" + ",".join(f"{k}:{v}" for k, v in sorted(report.seeds.items())) + "\n")
        for note in report.notes:
            fh.write(f"# note: {note}\n")
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for r in report.rows:
            w.writerow([r.shape, r.strategy, r.n_trials, _fmt(r.success_rate), _fmt(r.improvement),
                        _fmt(r.dropped_pct), _fmt(r.avg_time_to_goal_s)])


def write_correlation_csv(path, section: CorrelationSection, cfg_hash: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={cfg_hash}\n")
        fh.write(f"# binning={section.binning}; grouping by initial angle is not applied\n")
        fh.write(f"# pearson_r={section.pearson_r!r} n_pairs={section.n_pairs}\n")
        w = csv.writer(fh)
        w.writerow(CORRELATION_COLUMNS)
        for i, (m, s, c) in enumerate(section.bins):
            w.writerow([i, _fmt(m), _fmt(s), c])


def read_csv_hash(path) -> str | None:
    with open(path) as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            if line.startswith("# config_hash="):
                return line.strip().split("=", 1)[1]
    return None


def eval_hash(checkpoint_hash: str, params: dict) -> str:
    return config_hash({"checkpoint": checkpoint_hash, "eval": params})
