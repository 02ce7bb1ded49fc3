import numpy as np
import pytest

from qfold.dqn_agent import (
    QNetwork,
    ReplayBuffer,
    TrainConfig,
    _Optimizer,
    conv_output_size,
    greedy_rollout,
    q_backward,
    q_reference,
    q_targets,
    select_action,
    sync_target,
    train_self_play,
)
from qfold.environment import LineAlignmentEnv
from qfold.errors import NetworkShapeError

TOY_CONFIG = dict(
    total_steps=4000,
    batch_size=32,
    gamma=0.9,
    learning_rate=1e-3,
    epsilon_decay=0.9985,
    decay_per_step=True,
    target_sync_interval=250,
    hidden=32,
    momentum=0.9,
)


def randomize(net, rng, scale=0.3):
    for k in net.params:
        net.params[k] = rng.normal(scale=scale, size=net.params[k].shape)
    return net


def reference_forward(net, image):
    """Plain-loop forward pass used as an oracle (single image)."""
    x = np.asarray(image, dtype=float)[:, :, None]
    for i, k in enumerate(net.kernels):
        w, b = net.params[f"conv{i}.w"], net.params[f"conv{i}.b"]
        pad = k // 2
        h, wd, c = x.shape
        xp = np.zeros((h + 2 * pad, wd + 2 * pad, c))
        xp[pad : pad + h, pad : pad + wd] = x
        ho, wo = conv_output_size(h, k), conv_output_size(wd, k)
        out = np.zeros((ho, wo, w.shape[0]))
        for r in range(ho):
            for s in range(wo):
                patch = xp[2 * r : 2 * r + k, 2 * s : 2 * s + k, :]
                for f in range(w.shape[0]):
                    acc = b[f]
                    for ch in range(c):
                        acc += np.sum(patch[:, :, ch] * w[f, ch])
                    out[r, s, f] = max(acc, 0.0)
        x = out
    flat = x.reshape(-1)  # (h, w, c) order
    hidden = np.maximum(net.params["fc0.w"] @ flat + net.params["fc0.b"], 0.0)
    return net.params["fc1.w"] @ hidden + net.params["fc1.b"]


# ---------------------------------------------------------------- network


def test_output_shape_and_single_image_batching():
    net = QNetwork(16, 12, seed=0, hidden=32)
    assert net.forward(np.zeros((5, 16, 16))).shape == (5, 12)
    assert net.forward(np.zeros((16, 16))).shape == (1, 12)
    with pytest.raises(NetworkShapeError):
        net.forward(np.zeros((3, 8, 8)))


def test_forward_matches_reference():
    rng = np.random.default_rng(0)
    for size in (8, 13):
        net = randomize(QNetwork(size, 4, seed=1, hidden=10, channels=(3, 4, 5)), rng, 0.2)
        obs = rng.uniform(size=(3, size, size))
        ours = net.forward(obs)
        ref = np.stack([reference_forward(net, o) for o in obs])
        np.testing.assert_allclose(ours, ref, atol=1e-6, rtol=0)


def test_default_architecture_matches_reference():
    rng = np.random.default_rng(1)
    net = randomize(QNetwork(8, 12, seed=2), rng, 0.05)
    obs = rng.uniform(size=(8, 8))
    np.testing.assert_allclose(net.forward(obs)[0], reference_forward(net, obs), atol=1e-6, rtol=0)


def test_initialisation_is_seeded():
    a, b, c = QNetwork(8, 3, seed=4), QNetwork(8, 3, seed=4), QNetwork(8, 3, seed=5)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert not np.array_equal(a.params["fc0.w"], c.params["fc0.w"])
    assert all(not np.any(a.params[k]) for k in a.params if k.endswith(".b"))


def test_scalar_loss_and_gradient_by_hand():
    net = QNetwork(8, 1, seed=0, hidden=4, channels=(2, 2, 2))
    net.params["fc1.w"][:] = 0.0
    net.params["fc1.b"][:] = 2.0
    grads, loss = q_backward(net, np.zeros((1, 8, 8)), [0], [5.0])
    assert loss == 9.0
    assert grads["fc1.b"][0] == -6.0


def relative_error(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    net = randomize(QNetwork(8, 3, seed=0, hidden=12, channels=(4, 5, 6)), rng, 0.4)
    obs = rng.uniform(size=(4, 8, 8))
    actions = np.array([0, 2, 1, 2])
    targets = rng.normal(size=4)
    grads, _ = q_backward(net, obs, actions, targets)
    h = 1e-6
    for name, value in net.params.items():
        picks = [np.unravel_index(k, value.shape) for k in rng.choice(value.size, size=min(12, value.size), replace=False)]
        numeric, analytic = [], []
        for idx in picks:
            old = value[idx]
            value[idx] = old + h
            _, lp = q_backward(net, obs, actions, targets)
            value[idx] = old - h
            _, lm = q_backward(net, obs, actions, targets)
            value[idx] = old
            numeric.append((lp - lm) / (2 * h))
            analytic.append(grads[name][idx])
        assert relative_error(np.array(analytic), np.array(numeric)) <= 1e-3, name


def test_checkpoint_round_trip(tmp_path):
    net = QNetwork(8, 5, seed=7, hidden=16)
    path = tmp_path / "net.qnet"
    net.save(path)
    back = QNetwork.load(path)
    obs = np.random.default_rng(0).uniform(size=(3, 8, 8))
    np.testing.assert_array_equal(back.forward(obs), net.forward(obs))
    assert path.read_bytes()[:4] == b"QNET"


def test_checkpoint_errors(tmp_path):
    path = tmp_path / "bad.qnet"
    path.write_bytes(b"NOPE" + bytes(16))
    with pytest.raises(NetworkShapeError):
        QNetwork.load(path)
    QNetwork(8, 2, seed=0, hidden=8).save(path)
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(NetworkShapeError):
        QNetwork.load(path)


# ---------------------------------------------------------------- DQN pieces


def test_bellman_target_by_hand():
    net = QNetwork(8, 3, seed=0, hidden=4, channels=(2, 2, 2))
    net.params["fc1.w"][:] = 0.0
    net.params["fc1.b"][:] = [0.5, 1.5, -1.0]
    assert q_reference(2.0, np.zeros((8, 8)), False, net, 0.9) == pytest.approx(3.35, abs=1e-12)
    assert q_reference(2.0, np.zeros((8, 8)), True, net, 0.9) == 2.0
    np.testing.assert_allclose(q_targets(net, [1.0, 0.0], np.zeros((2, 8, 8)), [False, True], 0.5), [1.75, 0.0])


def test_uniform_exploration():
    net = QNetwork(8, 6, seed=0, hidden=4, channels=(2, 2, 2))
    rng = np.random.default_rng(0)
    n = 100_000
    counts = np.bincount([select_action(net, None, 1.0, rng) for _ in range(n)], minlength=6)
    p = 1 / 6
    sigma = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) <= 5 * sigma)


def test_greedy_ties_pick_lowest_index():
    net = QNetwork(8, 4, seed=0, hidden=4, channels=(2, 2, 2))
    net.params["fc1.w"][:] = 0.0
    net.params["fc1.b"][:] = [0.0, 1.0, 1.0, 0.5]
    assert select_action(net, np.zeros((8, 8)), 0.0, np.random.default_rng(0)) == 1


def test_target_network_contract():
    rng = np.random.default_rng(0)
    net = QNetwork(8, 3, seed=1, hidden=16)
    target = QNetwork(8, 3, seed=2, hidden=16)
    obs = rng.uniform(size=(100, 8, 8))
    sync_target(net, target)
    assert np.array_equal(net.forward(obs), target.forward(obs))
    frozen = target.forward(obs)
    opt = _Optimizer(net, 1e-2, 0.0, None)
    for _ in range(5):
        grads, _ = q_backward(net, obs[:8], rng.integers(3, size=8), rng.normal(size=8))
        opt.apply(net, grads)
    assert np.array_equal(target.forward(obs), frozen)
    assert not np.array_equal(net.forward(obs), frozen)
    with pytest.raises(NetworkShapeError):
        sync_target(net, QNetwork(8, 4, seed=0, hidden=16))


def test_replay_buffer_fifo_and_sampling():
    buf = ReplayBuffer(3, 8)
    for k in range(5):
        buf.push(np.full((8, 8), k / 10), k, float(k), np.zeros((8, 8)), k == 4)
    assert len(buf) == 3
    assert list(buf.actions[buf.ordered_indices()]) == [2, 3, 4]
    s, a, r, s2, d = buf.sample(64, np.random.default_rng(0))
    assert s.shape == (64, 8, 8) and set(a) <= {2, 3, 4}
    np.testing.assert_allclose(r, a.astype(float))
    with pytest.raises(ValueError):
        ReplayBuffer(3, 8).sample(1, np.random.default_rng(0))


def test_train_config_validation_and_round_trip():
    cfg = TrainConfig(total_steps=10, gamma=0.5)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        TrainConfig(gamma=0.0)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"bogus": 1})


# ---------------------------------------------------------------- training


def value_iteration_policy(env, gamma):
    positions = list(env.positions)
    values = {p: 0.0 for p in positions}
    for _ in range(500):
        new = {}
        for p in positions:
            if p == 0:
                new[p] = 0.0
                continue
            new[p] = max(
                env.energy_at(p) - env.energy_at(q) + gamma * values[q]
                for q in (env.next_position(p, a) for a in range(2))
            )
        values = new
    policy = {}
    for p in positions:
        if p != 0:
            scores = [
                env.energy_at(p) - env.energy_at(q) + gamma * values[q]
                for q in (env.next_position(p, a) for a in range(2))
            ]
            policy[p] = int(np.argmax(scores))
    return policy


@pytest.fixture(scope="module")
def toy_run():
    env = LineAlignmentEnv()
    return env, train_self_play(env, TrainConfig(seed=0, **TOY_CONFIG))


def test_value_iteration_oracle_moves_toward_zero():
    env = LineAlignmentEnv(limit=10)
    policy = value_iteration_policy(env, 0.9)
    assert all(policy[p] == (0 if p < 0 else 1) for p in policy)


def test_toy_policy_matches_value_iteration(toy_run):
    env, result = toy_run
    policy = value_iteration_policy(env, TOY_CONFIG["gamma"])
    agree = [int(np.argmax(result.network.forward(env.observe(p))[0])) == a for p, a in policy.items()]
    assert np.mean(agree) >= 0.95


def test_trained_toy_net_reaches_zero_energy(toy_run):
    env, result = toy_run
    best, trajectory = greedy_rollout(result.network, env, seed=123)
    assert best.energy == 0.0
    assert len(trajectory) == abs(env.reset(123).position)


def test_training_log_and_determinism(toy_run, tmp_path):
    env, result = toy_run
    assert result.steps == TOY_CONFIG["total_steps"]
    assert sum(r.steps for r in result.log) == result.steps
    for r in result.log:
        assert r.total_reward == pytest.approx(r.initial_energy - r.final_energy, abs=1e-9)
    short = dict(TOY_CONFIG, total_steps=300)
    a = train_self_play(env, TrainConfig(seed=1, **short), log_path=tmp_path / "a.jsonl")
    b = train_self_play(env, TrainConfig(seed=1, **short), log_path=tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert all(np.array_equal(a.network.params[k], b.network.params[k]) for k in a.network.params)


def test_episode_reward_settles():
    # a tight step budget makes exploratory episodes stop short of the target
    env = LineAlignmentEnv(limit=20, max_steps=30)
    cfg = TrainConfig(seed=0, fixed_start=True, **dict(TOY_CONFIG, total_steps=3000, epsilon_decay=0.998))
    rewards = np.array([r.total_reward for r in train_self_play(env, cfg).log])
    q = len(rewards) // 4
    assert q >= 5
    assert np.var(rewards[-q:]) < np.var(rewards[:q])


def test_network_environment_mismatch():
    env = LineAlignmentEnv()
    with pytest.raises(NetworkShapeError):
        train_self_play(env, TrainConfig(total_steps=10), network=QNetwork(8, 3, seed=0))
