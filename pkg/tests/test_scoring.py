import dataclasses
import time

import numpy as np
import pytest

from graspcritic.env import EnvConfig, PlanarHandEnv
from graspcritic.geometry import default_shapes_path, load_shapes, wrap_angle
from graspcritic.graspgen import EmptyCandidateSetError, base_grid, filter_stable, sample_candidates
from graspcritic.rl import ActorCritic
from graspcritic.scoring import (ScoredCandidate, Strategy, build_initial_obs, candidate_pairs,
                                 default_base_grid, initial_observations, score_candidates, select,
                                 write_scored_csv)


@pytest.fixture(scope="module")
def shapes():
    return load_shapes(default_shapes_path())


@pytest.fixture(scope="module")
def env(shapes):
    return PlanarHandEnv(EnvConfig(), shapes)


@pytest.fixture(scope="module")
def agent(env):
    a = ActorCritic(env.config.obs_dim, env.config.action_dim).init(np.random.default_rng(0))
    a.norm.update(np.random.default_rng(1).standard_normal((500, env.config.obs_dim)) * 0.3)
    return a


@pytest.fixture(scope="module")
def grasps(env, shapes):
    return filter_stable(sample_candidates(shapes[0], 0.7, 40, 3, env.config))


def sc(i, v_s=0.0, base=0.0, eps=0.1):
    return ScoredCandidate(i, base, v_s, 0.0, eps)


def test_initial_obs_matches_reset_bitwise(env, shapes, grasps):
    for g in grasps[:5]:
        _, obs = env.reset(g, 2.0, 17)
        built = build_initial_obs(g, 2.0, shapes[0], env.config)
        assert np.array_equal(built.vector(), obs.vector())


def test_base_rotation_only_changes_goal_frame(env, grasps):
    g = grasps[0]
    goal = 1.3
    absorb = float(wrap_angle(goal - g.initial_object_angle))
    obs = initial_observations(env, [g, g], [0.0, absorb], goal)
    w = env.config.window_len * 2 * env.config.n_fingers
    assert np.array_equal(obs[0, :w], obs[1, :w]) and np.array_equal(obs[0, w + 2:], obs[1, w + 2:])
    assert obs[1, w:w + 2] == pytest.approx([1.0, 0.0], abs=1e-12)


def test_goal_encoding_continuous_across_wrap(env, grasps):
    g = grasps[0]
    goals = g.initial_object_angle + np.pi + np.array([-1e-9, 1e-9])
    obs = initial_observations(env, [g, g], [0.0, 0.0], goals)
    w = env.config.window_len * 2 * env.config.n_fingers
    assert np.allclose(obs[0, w:w + 2], obs[1, w:w + 2], atol=1e-8)


def test_build_initial_obs_rejects_other_shape(env, shapes, grasps):
    with pytest.raises(ValueError):
        build_initial_obs(grasps[0], 0.0, shapes[1], env.config)


def test_scoring_batch_is_consistent(agent, env, grasps):
    pairs = candidate_pairs(grasps[:10], default_base_grid())
    scored = score_candidates(agent, env, pairs, 0.5)
    assert len(scored) == len(pairs)
    assert [(c.grasp_id, c.base_angle) for c in scored] == [(g.id, b) for g, b in pairs]
    again = score_candidates(agent, env, pairs, 0.5)
    assert scored == again
    # single-candidate calls agree with the batch exactly
    for i in (0, 7, len(pairs) - 1):
        assert score_candidates(agent, env, [pairs[i]], 0.5)[0] == scored[i]


def test_duplicates_score_identically(agent, env, grasps):
    g = grasps[2]
    copy = dataclasses.replace(g)
    scored = score_candidates(agent, env, [(g, 0.2), (copy, 0.2), (g, 0.2)], -1.0)
    assert scored[0] == scored[1] == scored[2]


def test_scores_invariant_to_permutation(agent, env, grasps):
    pairs = candidate_pairs(grasps[:8], [-0.4, 0.0, 0.4])
    scored = score_candidates(agent, env, pairs, 2.5)
    perm = np.random.default_rng(0).permutation(len(pairs))
    shuffled = score_candidates(agent, env, [pairs[i] for i in perm], 2.5)
    assert sorted(scored, key=lambda c: (c.grasp_id, c.base_angle)) == \
        sorted(shuffled, key=lambda c: (c.grasp_id, c.base_angle))


def test_empty_candidates_raise(agent, env):
    with pytest.raises(EmptyCandidateSetError):
        score_candidates(agent, env, [], 0.0)
    with pytest.raises(EmptyCandidateSetError):
        select(Strategy.HIGHEST_SCORING, [])


def test_select_rules():
    eps = [sc(0, eps=0.1), sc(1, eps=0.4), sc(2, eps=0.2)]
    assert select(Strategy.MOST_ROBUST, eps).grasp_id == 1
    tied = [sc(5, 0.3, 0.2), sc(2, 0.3, -0.4), sc(2, 0.3, 0.1), sc(9, 0.3)]
    for s in (Strategy.HIGHEST_SCORING, Strategy.HIGHEST_SCORING_MOVE_BASE, Strategy.LOWEST_SCORING):
        best = select(s, tied)
        assert (best.grasp_id, best.base_angle) == (2, 0.1)
    mixed = [sc(0, 0.1), sc(1, 0.9), sc(2, -0.5), sc(3, 0.9)]
    assert select(Strategy.HIGHEST_SCORING, mixed).grasp_id == 1
    assert select(Strategy.LOWEST_SCORING, mixed).grasp_id == 2


def test_argmax_invariant_to_monotone_transform():
    rng = np.random.default_rng(4)
    scored = [sc(i, float(v)) for i, v in enumerate(rng.normal(size=50))]
    warped = [dataclasses.replace(c, v_s=float(np.exp(3 * c.v_s) + 7)) for c in scored]
    assert select(Strategy.HIGHEST_SCORING, scored).grasp_id == select(Strategy.HIGHEST_SCORING, warped).grasp_id
    assert select(Strategy.HIGHEST_SCORING, scored).v_s >= select(Strategy.LOWEST_SCORING, scored).v_s


def test_all_strategy_uses_rng():
    scored = [sc(i) for i in range(20)]
    with pytest.raises(ValueError):
        select(Strategy.ALL, scored)
    a = [select(Strategy.ALL, scored, np.random.default_rng(3)).grasp_id for _ in range(3)]
    assert len(set(a)) == 1
    picks = {select(Strategy.ALL, scored, np.random.default_rng(s)).grasp_id for s in range(200)}
    assert len(picks) == 20


def test_strategy_parse():
    assert Strategy.parse("highest-scoring-move-base") is Strategy.HIGHEST_SCORING_MOVE_BASE
    assert Strategy.parse("ALL") is Strategy.ALL
    with pytest.raises(ValueError):
        Strategy.parse("best")


def test_move_base_prefers_absorbing_base_when_goal_is_start(agent, env, grasps):
    # a critic that only rewards zero remaining rotation
    g = grasps[0]
    w = env.config.window_len * 2 * env.config.n_fingers
    zero = ActorCritic(env.config.obs_dim, env.config.action_dim, (4,), (4,)).init(np.random.default_rng(0),
                                                                                   zero_critic_head=True)
    zero.norm.count = 1.0
    zero.params["critic.0.weight"][:] = 0
    zero.params["critic.0.weight"][w, :] = 1.0  # cos(goal_delta)
    zero.params["critic.1.weight"][:, 1] = 1.0
    grid = default_base_grid()
    scored = score_candidates(zero, env, candidate_pairs([g], grid), g.initial_object_angle)
    assert select(Strategy.HIGHEST_SCORING_MOVE_BASE, scored).base_angle == 0.0


def test_scoring_18000_candidates_is_fast(agent, env, shapes):
    cands = filter_stable(sample_candidates(shapes[1], 0.0, 200, 0, env.config), epsilon_min=0.0)
    pairs = candidate_pairs(cands, base_grid(90))
    assert len(pairs) == 18000
    t0 = time.perf_counter()
    scored = score_candidates(agent, env, pairs, 1.0)
    assert time.perf_counter() - t0 < 1.0
    assert len(scored) == 18000


def test_scored_csv(tmp_path):
    p = tmp_path / "s.csv"
    write_scored_csv(p, [sc(0, 0.5), sc(1, 0.25)], "hh")
    lines = p.read_text().splitlines()
    assert lines[0] == "# config_hash=hh"
    assert lines[1] == "grasp_id,base_angle,epsilon,v_d,v_s"
    assert len(lines) == 4
