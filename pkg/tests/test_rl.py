import numpy as np
import pytest

from graspcritic.env import EnvConfig
from graspcritic.geometry import default_shapes_path, load_shapes
from graspcritic.rl import (ActorCritic, CheckpointError, PPOConfig, RolloutBatch, TrainConfig, Trainer, gae,
                            load_checkpoint, save_checkpoint)
from graspcritic.rl.agent import gaussian_log_prob
from graspcritic.rl.mlp import Adam, Mlp, matmul_rows
from graspcritic.rl.ppo import NonFiniteLossError, losses_and_grads, ppo_update
from graspcritic.rl.toy import GeometricSuccessMDP, closed_form_value


def small_agent(seed=0, obs_dim=5, act_dim=2, hidden=(4, 3), dtype=np.float64):
    agent = ActorCritic(obs_dim, act_dim, hidden, hidden, dtype=dtype).init(np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 100)
    for k, v in agent.params.items():
        v += (0.3 * rng.standard_normal(v.shape)).astype(v.dtype)  # nonzero heads and biases
    return agent


def one_episode_batch(rewards, values, gamma_last=0.0):
    t = len(rewards)
    r = np.array(rewards, dtype=float).reshape(t, 1)
    v = np.zeros((t, 1, 2))
    v[:, 0, 0] = values
    v[:, 0, 1] = values
    term = np.zeros((t, 1), dtype=bool)
    term[-1] = True
    return RolloutBatch(np.zeros((t, 1, 1)), np.zeros((t, 1, 1)), np.zeros((t, 1)), r, r, v, term,
                        np.full((1, 2), gamma_last))


# -- networks ---------------------------------------------------------------

@pytest.mark.parametrize("shape", [(54, 256), (256, 256), (256, 2), (256, 6), (5, 4)])
def test_matmul_rows_is_batch_independent(shape):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3000, shape[0])).astype(np.float32)
    w = rng.standard_normal(shape).astype(np.float32)
    full = matmul_rows(x, w)
    for m in (1, 2, 3, 5, 8, 17, 64, 999):
        assert np.array_equal(matmul_rows(x[7:7 + m], w), full[7:7 + m])


def test_two_layer_forward_matches_hand_computation():
    params = {"n.0.weight": np.array([[0.5, -1.0], [0.25, 2.0]]), "n.0.bias": np.array([0.1, -0.2]),
              "n.1.weight": np.array([[1.5], [-0.5]]), "n.1.bias": np.array([0.3])}
    net = Mlp("n", (2, 2, 1), params)
    x = np.array([[1.0, -2.0]])
    h = np.tanh([0.5 * 1 + 0.25 * -2 + 0.1, -1.0 * 1 + 2.0 * -2 - 0.2])
    expected = 1.5 * h[0] - 0.5 * h[1] + 0.3
    assert net.forward(x)[0, 0] == pytest.approx(expected, abs=1e-6)


def test_zero_critic_head_gives_zero_values():
    agent = ActorCritic(54, 6).init(np.random.default_rng(0), zero_critic_head=True)
    out = agent.critic_eval(np.random.default_rng(1).standard_normal((10, 54)))
    assert np.all(out.v_d == 0) and np.all(out.v_s == 0)


def test_critic_batch_of_18000_matches_single_rows():
    agent = ActorCritic(54, 6).init(np.random.default_rng(0))
    obs = np.random.default_rng(2).standard_normal((18000, 54))
    full = agent.critic_eval(obs)
    for i in (0, 1, 4321, 17999):
        single = agent.critic_eval(obs[i])
        assert single.v_s == full.v_s[i] and single.v_d == full.v_d[i]


def test_critic_rejects_wrong_dim():
    agent = ActorCritic(54, 6).init(np.random.default_rng(0))
    with pytest.raises(ValueError):
        agent.critic_eval(np.zeros(53))


def test_log_prob_consistent_and_normalized():
    from scipy.stats import norm
    agent = small_agent(act_dim=1, dtype=np.float64)
    x = np.random.default_rng(3).standard_normal((4, 5))
    po = agent.policy(x, np.random.default_rng(4))
    ref = norm.logpdf(po.action[:, 0], po.mean[:, 0], np.exp(po.log_std[0]))
    assert np.all(np.isfinite(po.log_prob))
    assert np.allclose(po.log_prob, ref, atol=1e-6)
    # a very small log_std is clamped; the density still integrates to at most one
    agent.params["log_std"][:] = -50.0
    grid = np.linspace(-5, 5, 200001)[:, None]
    mean = np.zeros((len(grid), 1))
    dens = np.exp(gaussian_log_prob(grid, mean, agent.log_std))
    assert np.all(np.isfinite(dens))
    assert np.sum(dens) * (grid[1, 0] - grid[0, 0]) <= 1.0 + 1e-6


# -- gradients --------------------------------------------------------------

def _flat_loss(agent, data, cfg):
    return losses_and_grads(agent, *data, cfg)[0]


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_ppo_loss_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    agent = small_agent(seed)
    n = 6
    obs = rng.standard_normal((n, 5))
    po = agent.policy(obs, rng)
    # keep ratios inside the clip band so the loss is smooth around the evaluation point
    old = po.log_prob + rng.uniform(-0.05, 0.05, n)
    adv = rng.standard_normal(n)
    ret = rng.standard_normal((n, 2))
    cfg = PPOConfig()
    data = (obs, po.action, old, adv, ret)
    _, grads, _ = losses_and_grads(agent, *data, cfg)
    h = 1e-4
    worst = 0.0
    for k, p in agent.params.items():
        for idx in np.ndindex(p.shape):
            keep = p[idx]
            p[idx] = keep + h
            up = _flat_loss(agent, data, cfg)
            p[idx] = keep - h
            down = _flat_loss(agent, data, cfg)
            p[idx] = keep
            fd = (up - down) / (2 * h)
            an = grads[k][idx]
            worst = max(worst, abs(an - fd) / max(abs(an), abs(fd), 1e-6))
    assert worst < 1e-4


def test_zero_advantage_single_transition_has_no_surrogate_gradient():
    agent = small_agent()
    obs = np.ones((1, 5))
    po = agent.policy(obs, np.random.default_rng(0))
    cfg = PPOConfig(entropy_coef=0.0)
    _, grads, _ = losses_and_grads(agent, obs, po.action, po.log_prob, np.zeros(1), np.zeros((1, 2)), cfg)
    for k, g in grads.items():
        if k.startswith("actor") or k == "log_std":
            assert np.all(g == 0)


def test_lr_zero_update_leaves_params_bitwise():
    agent = small_agent(dtype=np.float32)
    before = {k: v.copy() for k, v in agent.params.items()}
    rng = np.random.default_rng(0)
    obs = rng.standard_normal((64, 5)).astype(np.float32)
    po = agent.policy(obs, rng)
    stats = ppo_update(agent, Adam(0.0), obs, po.action, po.log_prob, rng.standard_normal(64),
                       rng.standard_normal((64, 2)), PPOConfig(lr=0.0, minibatch=16), rng)
    for k in before:
        assert np.array_equal(before[k], agent.params[k])
    assert np.isfinite(stats["grad_norm"]) and np.isfinite(stats["kl"])


def test_non_finite_loss_aborts_and_restores():
    agent = small_agent(dtype=np.float32)
    before = {k: v.copy() for k, v in agent.params.items()}
    rng = np.random.default_rng(0)
    obs = rng.standard_normal((8, 5)).astype(np.float32)
    po = agent.policy(obs, rng)
    ret = np.full((8, 2), np.nan)
    with pytest.raises(NonFiniteLossError):
        ppo_update(agent, Adam(1e-3), obs, po.action, po.log_prob, np.ones(8), ret, PPOConfig(), rng)
    for k in before:
        assert np.array_equal(before[k], agent.params[k])


# -- advantage estimation ---------------------------------------------------

def test_gae_three_step_fixture():
    adv, ret = gae(one_episode_batch([0, 0, 1], [0.5, 0.6, 0.8]), 0.99, 0.95, "sparse")
    assert adv[:, 0] == pytest.approx([0.45148405, 0.3801, 0.2], abs=1e-6)
    assert ret[:, 0] == pytest.approx(adv[:, 0] + [0.5, 0.6, 0.8], abs=1e-12)


def test_gae_lambda_zero_is_one_step_td():
    r, v = [0.3, -0.1, 0.7, 0.2], [0.5, 0.4, 0.1, 0.9]
    b = one_episode_batch(r, v)
    b.terminals[-1] = False
    b.last_values[:] = 0.25
    adv, _ = gae(b, 0.9, 0.0, "dense")
    nxt = v[1:] + [0.25]
    assert adv[:, 0] == pytest.approx([r[t] + 0.9 * nxt[t] - v[t] for t in range(4)], abs=1e-12)


def test_gae_unit_gamma_lambda_is_reward_to_go_minus_value():
    # dyadic values keep every sum exact in floating point
    r, v = [0.25, -0.125, 0.75, 0.5], [0.5, 0.375, 0.125, 0.875]
    adv, _ = gae(one_episode_batch(r, v), 1.0, 1.0, "dense")
    togo = np.cumsum(r[::-1])[::-1]
    assert np.array_equal(adv[:, 0], togo - np.array(v))


def test_gae_zero_inputs_and_validation():
    adv, _ = gae(one_episode_batch([0, 0, 0], [0, 0, 0]), 0.99, 0.95, "dense")
    assert np.all(adv == 0)
    with pytest.raises(ValueError):
        gae(one_episode_batch([0], [0]), 1.1, 0.95, "dense")


# -- closed-form MDP ---------------------------------------------------------

@pytest.mark.parametrize("p", [0.25, 0.5, 0.9])
def test_closed_form_value_matches_monte_carlo(p):
    tau, gamma = 5, 0.9
    mdp = GeometricSuccessMDP(p, tau)
    rng = np.random.default_rng(0)
    n = 200_000
    phase = np.zeros(n, dtype=int)
    live = np.ones(n, dtype=bool)
    total = np.zeros(n)
    disc = 1.0
    for _ in range(400):
        phase, r, term = mdp.step(phase, rng)
        total += disc * r * live
        live &= ~term
        disc *= gamma
    assert total.mean() == pytest.approx(closed_form_value(p, tau, gamma), abs=4 * total.std() / np.sqrt(n))


# -- checkpoints ---------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    agent = ActorCritic(54, 6, (16, 8), (12,)).init(np.random.default_rng(0))
    agent.norm.update(np.random.default_rng(1).standard_normal((100, 54)))
    p = tmp_path / "a.gcp"
    save_checkpoint(p, agent, {"note": "x"}, "abc123")
    loaded, meta, h = load_checkpoint(p)
    assert meta == {"note": "x"} and h == "abc123"
    for k, v in agent.params.items():
        assert np.array_equal(v, loaded.params[k])
    obs = np.random.default_rng(2).standard_normal((5, 54))
    a, b = agent.critic_eval(obs), loaded.critic_eval(obs)
    assert np.array_equal(a.v_s, b.v_s) and np.array_equal(a.v_d, b.v_d)
    # saving again gives the same bytes
    q = tmp_path / "b.gcp"
    save_checkpoint(q, loaded, meta, h)
    assert p.read_bytes() == q.read_bytes()


def test_checkpoint_errors(tmp_path):
    agent = ActorCritic(4, 2, (3,), (3,)).init(np.random.default_rng(0))
    p = tmp_path / "a.gcp"
    save_checkpoint(p, agent, {}, "h")
    data = p.read_bytes()
    bad = tmp_path / "bad.gcp"
    bad.write_bytes(data.replace(b"graspcritic-checkpoint 1", b"graspcritic-checkpoint 9", 1))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(bad)
    bad.write_bytes(data[:-4])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(bad)
    bad.write_bytes(b"hello\nend_header\n")
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    bad.write_bytes(b"no header at all")
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)


# -- training loop ---------------------------------------------------------------

@pytest.fixture(scope="module")
def disc():
    return [s for s in load_shapes(default_shapes_path()) if s.name == "disc32"]


def tiny_cfg(**kw):
    base = dict(n_envs=8, rollout_len=32, grasp_angles=4, grasps_per_angle=8, actor_hidden=(32, 32),
                critic_hidden=(32, 32), ppo=PPOConfig(minibatch=64, epochs=2))
    base.update(kw)
    return TrainConfig(**base)


def test_train_config_round_trip():
    cfg = tiny_cfg()
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"bogus": 1})


def test_zero_steps_checkpoint_equals_initialization(tmp_path, disc):
    a = Trainer(EnvConfig(), disc, tiny_cfg())
    a.train(total_steps=0)
    assert a.iteration == 0
    b = Trainer(EnvConfig(), disc, tiny_cfg())
    a.save_checkpoint(tmp_path / "a.gcp")
    b.save_checkpoint(tmp_path / "b.gcp")
    assert (tmp_path / "a.gcp").read_bytes() == (tmp_path / "b.gcp").read_bytes()


def test_resume_reproduces_next_iteration(tmp_path, disc):
    straight = Trainer(EnvConfig(), disc, tiny_cfg())
    straight.train_iteration()
    want = straight.train_iteration()
    first = Trainer(EnvConfig(), disc, tiny_cfg())
    first.train_iteration()
    first.save_state(tmp_path / "state.pkl")
    resumed = Trainer.load_state(tmp_path / "state.pkl")
    got = resumed.train_iteration()
    assert got == want
    for k, v in straight.agent.params.items():
        assert np.array_equal(v, resumed.agent.params[k])


def test_training_log_csv(tmp_path, disc):
    tr = Trainer(EnvConfig(), disc, tiny_cfg())
    tr.train(total_steps=2 * 8 * 32)
    tr.write_log(tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == f"# config_hash={tr.config_hash()}"
    assert lines[1].startswith("iteration,env_steps") and len(lines) == 4


def test_smoke_training_on_disc_improves(disc):
    cfg = TrainConfig(n_envs=16, rollout_len=128, grasp_angles=16, grasps_per_angle=8)
    tr = Trainer(EnvConfig(), disc, cfg)
    tr.train(total_steps=50_000)
    rates = np.array([r["success_rate"] for r in tr.log_rows])
    q = len(rates) // 4
    assert len(rates) >= 8
    assert np.nanmean(rates[-q:]) > np.nanmean(rates[:q])
