"""Training machinery: experience replay, double-Q targets, steered
epsilon-greedy exploration, and the main loop with target-network syncs.

Target values select the best next action with the online network but score
it with the target network, restricted to actions that were legal in the
successor state. The whole loop is deterministic for a fixed seed: every
random stream is derived from one seed sequence, so reruns produce
bit-identical checkpoints and learning curves.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field as dc_field
from typing import Callable, Sequence

import numpy as np

from .env import Action, EnvState, EpisodeConfig, Observation, PlacementEnv, Transition
from .gridmap import HeightGrid
from .propagation import SinrField
from .qnet import ArchSpec, QNetworkParams, encode_batch, encode_observation, forward, init_params, loss_and_grads

__all__ = [
    "ReplayBuffer",
    "TrainerConfig",
    "EpisodeRecord",
    "TrainResult",
    "epsilon_at",
    "learning_rate_at",
    "td_targets",
    "select_action",
    "train",
    "write_learning_curve",
]

REPEAT_SHARE = 0.4  # of epsilon: repeat the previous action; the rest is uniform


class ReplayBuffer:
    """FIFO ring of transitions with uniform without-replacement sampling."""

    def __init__(self, capacity: int = 500_000):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._items: list[Transition] = []
        self._cursor = 0

    def __len__(self) -> int:
        return len(self._items)

    def push(self, transition: Transition) -> None:
        if len(self._items) < self.capacity:
            self._items.append(transition)
        else:
            self._items[self._cursor] = transition
        self._cursor = (self._cursor + 1) % self.capacity

    def items(self) -> list[Transition]:
        """Stored transitions, oldest first."""
        if len(self._items) < self.capacity:
            return list(self._items)
        return self._items[self._cursor :] + self._items[: self._cursor]

    def sample(self, batch_size: int, rng: np.random.Generator | int) -> list[Transition]:
        if batch_size > len(self._items):
            raise ValueError(
                f"buffer holds {len(self._items)} transitions, cannot sample {batch_size}"
            )
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        idx = rng.choice(len(self._items), size=batch_size, replace=False)
        return [self._items[i] for i in idx]


@dataclass(frozen=True)
class TrainerConfig:
    total_env_steps: int
    gamma: float = 0.99
    batch_size: int = 20
    train_interval: int = 3
    target_sync_steps: int = 2000
    epsilon_end_frac: float = 0.8  # epsilon hits 0 at this fraction of the budget
    epsilon_override: float | None = None  # pin epsilon for control runs
    lr_init: float = 1e-4
    lr_halve_every: int = 50_000  # in env steps
    grad_clip_norm: float = 10.0
    replay_capacity: int = 500_000
    learn_start: int = 1_000  # buffer size required before updates begin
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    bn_momentum: float = 0.1

    def __post_init__(self):
        if not (0.0 <= self.gamma < 1.0):
            raise ValueError(f"gamma must be in [0,1), got {self.gamma}")
        if self.batch_size < 1 or self.train_interval < 1:
            raise ValueError("batch_size and train_interval must be >= 1")
        if self.total_env_steps < 1:
            raise ValueError("total_env_steps must be >= 1")
        if not (0.0 < self.epsilon_end_frac <= 1.0):
            raise ValueError("epsilon_end_frac must be in (0,1]")


def epsilon_at(env_step: int, config: TrainerConfig) -> float:
    if config.epsilon_override is not None:
        return config.epsilon_override
    horizon = config.epsilon_end_frac * config.total_env_steps
    return max(0.0, 1.0 - env_step / horizon)


def learning_rate_at(env_step: int, config: TrainerConfig) -> float:
    return config.lr_init * 0.5 ** (env_step // config.lr_halve_every)


def td_targets(
    batch: Sequence[Transition],
    online: QNetworkParams,
    target: QNetworkParams,
    gamma: float,
    config: EpisodeConfig,
) -> np.ndarray:
    """Double-Q regression targets, one per transition.

    Non-terminal: y = r + gamma * targetQ(s', argmax_a onlineQ(s', a)) with
    the argmax restricted to the recorded legal actions. Terminal: y = r.
    """
    rewards = np.array([t.reward for t in batch], dtype=np.float64)
    terminal = np.array([t.terminal for t in batch], dtype=bool)
    y = rewards.copy()
    live = ~terminal
    if live.any():
        live_idx = np.flatnonzero(live)
        x_next = encode_batch([batch[i].next_obs for i in live_idx], config)
        masks = np.stack([batch[i].next_legal_mask for i in live_idx])
        q_online = forward(online, x_next, mode="infer")
        q_online = np.where(masks, q_online, -np.inf)
        has_legal = masks.any(axis=1)
        best = np.argmax(q_online, axis=1)
        q_target = forward(target, x_next, mode="infer")
        boot = q_target[np.arange(len(live_idx)), best]
        boot = np.where(has_legal, boot, 0.0)
        y[live_idx] = rewards[live_idx] + gamma * boot
    return y


def select_action(
    env: PlacementEnv,
    state: EnvState,
    obs: Observation,
    online: QNetworkParams,
    epsilon: float,
    prev_action: Action | None,
    rng: np.random.Generator,
) -> Action:
    """Steered epsilon-greedy over legal actions.

    With probability REPEAT_SHARE*epsilon the previous action is repeated if
    still legal (otherwise a uniform legal action is taken); with the
    remaining epsilon share a uniform legal action is taken; otherwise the
    legal action with the highest Q-value, ties going to the lowest index.
    """
    legal = env.legal_actions(state)
    if not legal:
        raise ValueError(f"no legal action at {state.uav_cell}")
    u = rng.random()
    if u < REPEAT_SHARE * epsilon:
        if prev_action is not None and prev_action in legal:
            return Action(prev_action)
        return legal[int(rng.integers(len(legal)))]
    if u < epsilon:
        return legal[int(rng.integers(len(legal)))]
    x = encode_observation(obs, env.config.p_low_db, env.config.p_high_db)[None]
    q = forward(online, x, mode="infer")[0]
    mask = env.legal_mask(state)
    q = np.where(mask, q, -np.inf)
    return Action(int(np.argmax(q)))


# -- optimizer ----------------------------------------------------------------


class _Adam:
    def __init__(self, params: QNetworkParams, config: TrainerConfig):
        self.cfg = config
        self.t = 0
        self.m = {name: np.zeros_like(a) for name, a in params.trainable_items()}
        self.v = {name: np.zeros_like(a) for name, a in params.trainable_items()}

    def apply(self, params: QNetworkParams, grads: dict[str, np.ndarray], lr: float) -> None:
        cfg = self.cfg
        if cfg.grad_clip_norm > 0:
            total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if total > cfg.grad_clip_norm:
                scale = cfg.grad_clip_norm / total
                grads = {k: g * scale for k, g in grads.items()}
        self.t += 1
        b1, b2 = cfg.adam_beta1, cfg.adam_beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for name, arr in params.trainable_items():
            g = grads[name]
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            step = lr * (self.m[name] / bias1) / (np.sqrt(self.v[name] / bias2) + cfg.adam_eps)
            new = (arr - step).astype(np.float32).astype(np.float64)
            params.set_(name, new)


def _update_running_stats(params: QNetworkParams, stats, momentum: float) -> None:
    for stage, (mu, var) in zip(params.conv, stats):
        stage.bn_mean = ((1 - momentum) * stage.bn_mean + momentum * mu).astype(np.float32).astype(np.float64)
        stage.bn_var = ((1 - momentum) * stage.bn_var + momentum * var).astype(np.float32).astype(np.float64)


# -- training loop -------------------------------------------------------------


@dataclass
class EpisodeRecord:
    episode: int
    start_sinr_db: float
    end_sinr_db: float
    steps: int
    reached_target: bool
    trailing_mean_increase: float


@dataclass
class TrainResult:
    best_params: QNetworkParams
    final_params: QNetworkParams
    curve: list[EpisodeRecord]
    best_trailing_mean: float


def train(
    worlds: Sequence[tuple[HeightGrid, SinrField]],
    arch: ArchSpec,
    env_config: EpisodeConfig,
    config: TrainerConfig,
    seed: int,
    observation_fn: Callable[[PlacementEnv, EnvState], Observation] | None = None,
    progress: Callable[[int, int, float], None] | None = None,
) -> TrainResult:
    """Run the full training loop and keep the best checkpoint.

    Each episode draws a random world, a random rotation and a dead-zone-safe
    start. One gradient step runs every `train_interval` env steps once the
    buffer has warmed up; the target network is refreshed every
    `target_sync_steps` gradient steps. The retained checkpoint is the one
    with the highest mean SINR increase over the trailing 100 episodes.

    `observation_fn` swaps the observation builder (the blind agent passes
    its own); `progress(env_step, total, trailing_mean)` is called once per
    episode when given.
    """
    if not worlds:
        raise ValueError("need at least one (grid, field) world to train on")
    ss = np.random.SeedSequence(seed)
    init_seed, ep_seed, act_seed, replay_seed, drop_seed = ss.spawn(5)
    ep_rng = np.random.default_rng(ep_seed)
    act_rng = np.random.default_rng(act_seed)
    replay_rng = np.random.default_rng(replay_seed)
    drop_base = int(drop_seed.generate_state(1)[0])

    online = init_params(int(init_seed.generate_state(1)[0]), arch)
    target = online.copy()
    optimizer = _Adam(online, config)
    buffer = ReplayBuffer(config.replay_capacity)
    obs_fn = observation_fn or (lambda env, state: env.build_observation(state))

    env_step = 0
    train_step = 0
    episode = 0
    increases: list[float] = []
    curve: list[EpisodeRecord] = []
    best_mean = -np.inf
    best_params = online.copy()
    warmup = max(config.batch_size, config.learn_start)
    idle_episodes = 0

    while env_step < config.total_env_steps:
        grid, sinr_field = worlds[int(ep_rng.integers(len(worlds)))]
        env = PlacementEnv(grid, sinr_field, env_config)
        state, _ = env.reset(int(ep_rng.integers(2**63)))
        obs = obs_fn(env, state)
        start_sinr = state.current_sinr
        prev_action: Action | None = None
        steps_this_episode = 0

        while not state.done and env_step < config.total_env_steps:
            if not env.legal_actions(state):
                break  # boxed in by dead zones; end the episode where it stands
            eps = epsilon_at(env_step, config)
            action = select_action(env, state, obs, online, eps, prev_action, act_rng)
            new_state, _, reward, done, _ = env.step(state, action)
            next_obs = obs_fn(env, new_state)
            buffer.push(
                Transition(
                    obs=_compact(obs),
                    action=int(action),
                    reward=reward,
                    next_obs=_compact(next_obs),
                    terminal=done,
                    newly_visited=new_state.uav_cell not in state.visited,
                    next_legal_mask=env.legal_mask(new_state),
                )
            )
            env_step += 1
            steps_this_episode += 1
            if env_step % config.train_interval == 0 and len(buffer) >= warmup:
                batch = buffer.sample(config.batch_size, replay_rng)
                y = td_targets(batch, online, target, config.gamma, env_config)
                x = encode_batch([t.obs for t in batch], env_config)
                acts = np.array([t.action for t in batch])
                _, grads, stats = loss_and_grads(
                    online,
                    x,
                    acts,
                    y,
                    bn_mode="batch",
                    dropout_seed=drop_base + train_step,
                    return_bn_stats=True,
                )
                optimizer.apply(online, grads, learning_rate_at(env_step, config))
                _update_running_stats(online, stats, config.bn_momentum)
                train_step += 1
                if train_step % config.target_sync_steps == 0:
                    target = online.copy()
            state, obs, prev_action = new_state, next_obs, action

        episode += 1
        idle_episodes = idle_episodes + 1 if steps_this_episode == 0 else 0
        if idle_episodes > 100_000:
            raise RuntimeError("training stalled: episodes terminate at reset")
        increases.append(state.current_sinr - start_sinr)
        trailing = float(np.mean(increases[-100:]))
        curve.append(
            EpisodeRecord(
                episode=episode,
                start_sinr_db=start_sinr,
                end_sinr_db=state.current_sinr,
                steps=steps_this_episode,
                reached_target=state.done_reason == "target_reached",
                trailing_mean_increase=trailing,
            )
        )
        if trailing > best_mean:
            best_mean = trailing
            best_params = online.copy()
        if progress is not None:
            progress(env_step, config.total_env_steps, trailing)

    return TrainResult(
        best_params=best_params,
        final_params=online,
        curve=curve,
        best_trailing_mean=float(best_mean),
    )


def _compact(obs: Observation) -> Observation:
    """Store replay observations in float32 to halve buffer memory."""
    return Observation(
        topo=obs.topo.astype(np.float32), sinr=obs.sinr.astype(np.float32)
    )


def write_learning_curve(curve: Sequence[EpisodeRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "episode",
                "start_sinr_db",
                "end_sinr_db",
                "steps",
                "reached_target",
                "trailing100_mean_increase",
            ]
        )
        for rec in curve:
            writer.writerow(
                [
                    rec.episode,
                    repr(rec.start_sinr_db),
                    repr(rec.end_sinr_db),
                    rec.steps,
                    int(rec.reached_target),
                    repr(rec.trailing_mean_increase),
                ]
            )
