import numpy as np
import pytest

from conftest import make_field, make_flat_grid
from uavplace.env import Action, EpisodeConfig, Observation, PlacementEnv, Transition
from uavplace.qnet import TINY_ARCH, init_params, save_checkpoint
from uavplace.rl import (
    ReplayBuffer,
    TrainerConfig,
    epsilon_at,
    learning_rate_at,
    select_action,
    td_targets,
    train,
    write_learning_curve,
)


def flat_obs(n=9, sinr=50.0):
    return Observation(topo=np.zeros((n, n)), sinr=np.full((n, n), sinr))


def make_transition(reward=1.0, terminal=False, mask=(True, True, True, True), action=0):
    return Transition(
        obs=flat_obs(),
        action=action,
        reward=reward,
        next_obs=flat_obs(),
        terminal=terminal,
        newly_visited=True,
        next_legal_mask=np.array(mask),
    )


def zeroed_net(adv_b, value_b=0.0):
    p = init_params(0, TINY_ARCH)
    for name, arr in p.trainable_items():
        p.set_(name, np.zeros_like(arr))
    p.adv_b = np.array(adv_b, dtype=np.float64)
    p.value_b = np.array([value_b], dtype=np.float64)
    return p


EP9 = EpisodeConfig(obs_cells=9, t_max=10, rotation_quarter_turns=0)


class TestReplayBuffer:
    def test_fifo_eviction(self):
        buf = ReplayBuffer(capacity=3)
        ts = [make_transition(reward=float(i)) for i in range(4)]
        for t in ts:
            buf.push(t)
        assert len(buf) == 3
        assert [t.reward for t in buf.items()] == [1.0, 2.0, 3.0]

    def test_contents_are_last_min_n_capacity(self):
        buf = ReplayBuffer(capacity=5)
        ts = [make_transition(reward=float(i)) for i in range(12)]
        for i, t in enumerate(ts):
            buf.push(t)
            expect = [x.reward for x in ts[max(0, i - 4) : i + 1]]
            assert [x.reward for x in buf.items()] == expect

    def test_sample_seeded_and_without_replacement(self):
        buf = ReplayBuffer(capacity=100)
        for i in range(50):
            buf.push(make_transition(reward=float(i)))
        a = buf.sample(20, np.random.default_rng(3))
        b = buf.sample(20, np.random.default_rng(3))
        assert [t.reward for t in a] == [t.reward for t in b]
        assert len({t.reward for t in a}) == 20  # no repeats within a batch

    def test_underfilled_sample_rejected(self):
        buf = ReplayBuffer(capacity=10)
        buf.push(make_transition())
        with pytest.raises(ValueError, match="cannot sample"):
            buf.sample(2, 0)

    def test_default_capacity_matches_training_setup(self):
        assert ReplayBuffer().capacity == 500_000
        assert TrainerConfig(total_env_steps=10).batch_size == 20


class TestSchedules:
    def test_epsilon_linear_to_zero_at_80_percent(self):
        cfg = TrainerConfig(total_env_steps=1000)
        assert epsilon_at(0, cfg) == 1.0
        assert epsilon_at(400, cfg) == pytest.approx(0.5)
        assert epsilon_at(800, cfg) == 0.0
        assert epsilon_at(999, cfg) == 0.0
        eps = [epsilon_at(s, cfg) for s in range(1000)]
        assert all(a >= b for a, b in zip(eps, eps[1:]))

    def test_epsilon_override(self):
        cfg = TrainerConfig(total_env_steps=1000, epsilon_override=1.0)
        assert epsilon_at(999, cfg) == 1.0

    def test_learning_rate_halves(self):
        cfg = TrainerConfig(total_env_steps=200_000, lr_init=1e-4, lr_halve_every=50_000)
        assert learning_rate_at(0, cfg) == 1e-4
        assert learning_rate_at(49_999, cfg) == 1e-4
        assert learning_rate_at(50_000, cfg) == 5e-5
        assert learning_rate_at(150_000, cfg) == 1.25e-5


class TestTdTargets:
    def test_gamma_zero_returns_rewards(self):
        online = zeroed_net([1.0, 0.0, 0.0, 0.0])
        target = zeroed_net([7.0, 9.0, 0.0, 0.0], value_b=4.0)
        batch = [make_transition(reward=r) for r in (0.5, -2.0, 3.25)]
        y = td_targets(batch, online, target, 0.0, EP9)
        assert np.array_equal(y, [0.5, -2.0, 3.25])

    def test_terminal_ignores_next_state(self):
        online = zeroed_net([1.0, 0.0, 0.0, 0.0])
        target = zeroed_net([7.0, 9.0, 0.0, 0.0], value_b=4.0)
        batch = [make_transition(reward=1.0, terminal=True)]
        assert np.array_equal(td_targets(batch, online, target, 0.99, EP9), [1.0])

    def test_double_q_hand_computed(self):
        # online prefers action 0; target values action 0 at 7 but its own
        # argmax is action 1 (worth 9): double-Q must yield 1 + 0.5*7 = 4.5
        online = zeroed_net([1.0, 0.0, 0.0, 0.0])
        target = zeroed_net([7.0, 9.0, 0.0, 0.0], value_b=4.0)
        batch = [make_transition(reward=1.0)]
        y = td_targets(batch, online, target, 0.5, EP9)
        assert y[0] == 4.5
        vanilla = 1.0 + 0.5 * 9.0  # max over target's own Q-values
        assert y[0] != vanilla

    def test_illegal_next_actions_masked_from_argmax(self):
        online = zeroed_net([1.0, 0.0, 0.0, 0.0])
        target = zeroed_net([7.0, 9.0, 0.0, 0.0], value_b=4.0)
        batch = [make_transition(reward=1.0, mask=(False, True, True, True))]
        y = td_targets(batch, online, target, 0.5, EP9)
        # online tie among legal actions resolves to action 1 -> target 9
        assert y[0] == 1.0 + 0.5 * 9.0

    def test_no_legal_next_action_bootstraps_zero(self):
        online = zeroed_net([1.0, 0.0, 0.0, 0.0])
        target = zeroed_net([7.0, 9.0, 0.0, 0.0], value_b=4.0)
        batch = [make_transition(reward=2.0, mask=(False, False, False, False))]
        assert np.array_equal(td_targets(batch, online, target, 0.5, EP9), [2.0])


class TestSelectAction:
    def setup_method(self):
        grid = make_flat_grid(9)
        self.env = PlacementEnv(grid, make_field(grid, np.zeros((9, 9))), EP9)
        self.state, self.obs = self.env.reset(0)

    def test_greedy_when_epsilon_zero(self):
        net = zeroed_net([0.0, 0.0, 3.0, 1.0])
        rng = np.random.default_rng(0)
        state = self._center_state()
        for _ in range(20):
            assert select_action(self.env, state, self.obs, net, 0.0, None, rng) == Action.PLUS_Y

    def test_greedy_ties_break_by_action_order(self):
        net = zeroed_net([0.0, 0.0, 0.0, 0.0])
        state = self._center_state()
        a = select_action(self.env, state, self.obs, net, 0.0, None, np.random.default_rng(0))
        assert a == Action.PLUS_X

    def test_best_illegal_falls_to_next_best_legal(self):
        net = zeroed_net([10.0, 3.0, 5.0, 4.0])
        edge = self._state_at((0, 8))  # +x leaves the map, +y leaves the map
        a = select_action(self.env, edge, self.obs, net, 0.0, None, np.random.default_rng(0))
        assert a == Action.MINUS_Y  # legal are -x (3.0) and -y (4.0)

    def test_steered_branch_frequencies(self):
        net = zeroed_net([0.0, 0.0, 0.0, 0.0])
        state = self._center_state()
        rng = np.random.default_rng(7)
        n = 30_000
        prev = Action.MINUS_X
        counts = np.zeros(4)
        for _ in range(n):
            counts[select_action(self.env, state, self.obs, net, 1.0, prev, rng)] += 1
        freqs = counts / n
        other_mean = (freqs[Action.PLUS_X] + freqs[Action.PLUS_Y] + freqs[Action.MINUS_Y]) / 3
        repeat_freq = freqs[Action.MINUS_X] - other_mean
        assert repeat_freq == pytest.approx(0.4, abs=0.02)
        assert 4 * other_mean == pytest.approx(0.6, abs=0.02)

    def test_illegal_prev_action_falls_through_to_uniform(self):
        net = zeroed_net([0.0, 0.0, 0.0, 0.0])
        edge = self._state_at((0, 8))
        rng = np.random.default_rng(1)
        picks = {select_action(self.env, edge, self.obs, net, 1.0, Action.PLUS_X, rng) for _ in range(200)}
        assert picks == {Action.MINUS_X, Action.MINUS_Y}

    def _center_state(self):
        return self._state_at((4, 4))

    def _state_at(self, cell):
        from uavplace.env import EnvState

        return EnvState(
            uav_cell=cell, t=0, visited={cell: 0.0}, done=False, done_reason="none", rotation=0
        )


def _training_world():
    # column gradient: SINR rises eastward to a qualifying strip
    n = 16
    grid = make_flat_grid(n)
    values = np.tile(np.linspace(-30.0, 8.0, n), (n, 1))
    return grid, make_field(grid, values, user_cell=(8, 15))


class TestTrain:
    def test_training_is_bit_reproducible(self, tmp_path):
        grid, field = _training_world()
        env_cfg = EpisodeConfig(obs_cells=9, t_max=40, rotation_quarter_turns=None)
        cfg = TrainerConfig(
            total_env_steps=400, learn_start=50, replay_capacity=1000, target_sync_steps=20
        )
        results = []
        for run in range(2):
            res = train([(grid, field)], TINY_ARCH, env_cfg, cfg, seed=123)
            path = tmp_path / f"run{run}.uavq"
            save_checkpoint(res.best_params, path)
            results.append((res, path.read_bytes()))
        a, b = results
        assert a[1] == b[1]  # identical checkpoint bytes
        assert len(a[0].curve) == len(b[0].curve)
        for ra, rb in zip(a[0].curve, b[0].curve):
            assert ra == rb
        assert a[0].best_trailing_mean == b[0].best_trailing_mean

    def test_curve_rows_and_csv(self, tmp_path):
        grid, field = _training_world()
        env_cfg = EpisodeConfig(obs_cells=9, t_max=40, rotation_quarter_turns=None)
        cfg = TrainerConfig(total_env_steps=150, learn_start=30, replay_capacity=500)
        res = train([(grid, field)], TINY_ARCH, env_cfg, cfg, seed=5)
        assert len(res.curve) >= 1
        assert res.curve[0].episode == 1
        trailing = [r.trailing_mean_increase for r in res.curve]
        assert res.best_trailing_mean == pytest.approx(max(trailing))
        path = tmp_path / "curve.csv"
        write_learning_curve(res.curve, path)
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "episode,start_sinr_db,end_sinr_db,steps,reached_target,trailing100_mean_increase"
        assert len(lines) == len(res.curve) + 1

    def test_needs_worlds(self):
        with pytest.raises(ValueError):
            train([], TINY_ARCH, EpisodeConfig(obs_cells=9), TrainerConfig(total_env_steps=10), 0)
