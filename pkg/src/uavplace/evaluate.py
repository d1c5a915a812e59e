"""Test-time episode runner and convergence metrics.

Episodes are paired by seed: the world choice and start cell for episode i
depend only on (seed, i), so different policies evaluated with the same seed
face identical start conditions and can be compared with reduced variance.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .baselines import genie_shortest, random_walk_policy
from .env import Action, EpisodeConfig, PlacementEnv
from .gridmap import HeightGrid
from .propagation import SinrField
from .qnet import QNetworkParams, encode_observation, forward

__all__ = [
    "EvalConfig",
    "EpisodeResult",
    "EvalMetrics",
    "run_eval",
    "aggregate_metrics",
    "steps_cdf",
    "write_metrics_csv",
    "write_cdf_csv",
]

POLICIES = ("trained", "blind", "random")


@dataclass(frozen=True)
class EvalConfig:
    n_episodes: int = 1000
    t_max: int = 500
    target_sinr_db: float = 5.0
    test_random_prob: float = 0.096
    seed: int = 0
    obs_cells: int = 61

    def __post_init__(self):
        if not (0.0 <= self.test_random_prob <= 1.0):
            raise ValueError("test_random_prob must be in [0,1]")
        if self.n_episodes < 1 or self.t_max < 1:
            raise ValueError("n_episodes and t_max must be >= 1")


@dataclass(frozen=True)
class EpisodeResult:
    episode: int
    field_id: int
    start: tuple[int, int]
    steps: int
    reached: bool
    start_sinr_db: float
    end_sinr_db: float
    genie_steps: int | None
    genie_reachable: bool


@dataclass
class EvalMetrics:
    records: list[EpisodeResult]
    success_rate: float
    median_steps: float | None  # over successful episodes only
    cdf: np.ndarray  # cumulative success fraction at 0..t_max steps

    @property
    def n_episodes(self) -> int:
        return len(self.records)


def _episode_config(config: EvalConfig) -> EpisodeConfig:
    return EpisodeConfig(
        obs_cells=config.obs_cells,
        target_sinr_db=config.target_sinr_db,
        t_max=config.t_max,
        rotation_quarter_turns=0,
    )


def run_eval(
    policy: str,
    params: QNetworkParams | None,
    worlds: Sequence[tuple[HeightGrid, SinrField]],
    config: EvalConfig,
    observation_fn=None,
) -> EvalMetrics:
    """Run `n_episodes` episodes of the given policy and aggregate metrics.

    `policy` is one of trained | blind | random; the first two need `params`.
    The blind policy builds its observations through `observation_fn` (pass
    :func:`uavplace.baselines.blind_observer`). Genie steps are recorded per
    episode for comparison.
    """
    if policy not in POLICIES:
        raise ValueError(f"policy must be one of {POLICIES}, got {policy!r}")
    if policy != "random" and params is None:
        raise ValueError(f"policy {policy!r} requires a checkpoint")
    if not worlds:
        raise ValueError("need at least one (grid, field) world")
    ep_config = _episode_config(config)
    envs = [PlacementEnv(grid, field, ep_config) for grid, field in worlds]
    obs_fn = observation_fn or (lambda env, state: env.build_observation(state))

    records: list[EpisodeResult] = []
    for i in range(config.n_episodes):
        rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(i,)))
        field_id = int(rng.integers(len(envs)))
        env = envs[field_id]
        state, obs = env.reset(int(rng.integers(2**63)))
        if policy == "blind":
            obs = obs_fn(env, state)
        start = state.uav_cell
        start_sinr = state.current_sinr
        genie = genie_shortest(env.grid, env.field, start, config.target_sinr_db)
        steps = 0
        while not state.done:
            legal = env.legal_actions(state)
            if not legal:
                break
            if policy == "random" or rng.random() < config.test_random_prob:
                action = random_walk_policy(env, state, rng)
            else:
                x = encode_observation(obs, ep_config.p_low_db, ep_config.p_high_db)[None]
                q = forward(params, x, mode="infer")[0]
                q = np.where(env.legal_mask(state), q, -np.inf)
                action = Action(int(np.argmax(q)))
            state, obs, _, _, _ = env.step(state, action)
            if policy == "blind":
                obs = obs_fn(env, state)
            steps += 1
        records.append(
            EpisodeResult(
                episode=i,
                field_id=field_id,
                start=start,
                steps=steps,
                reached=state.done_reason == "target_reached",
                start_sinr_db=start_sinr,
                end_sinr_db=state.current_sinr,
                genie_steps=genie.steps,
                genie_reachable=genie.reachable,
            )
        )
    return aggregate_metrics(records, config.t_max)


def aggregate_metrics(records: list[EpisodeResult], t_max: int) -> EvalMetrics:
    n = len(records)
    success_steps = sorted(r.steps for r in records if r.reached)
    success_rate = len(success_steps) / n
    median = float(np.median(success_steps)) if success_steps else None
    cdf = np.zeros(t_max + 1)
    counts = np.bincount(success_steps, minlength=t_max + 1) if success_steps else np.zeros(t_max + 1)
    cdf = np.cumsum(counts[: t_max + 1]) / n
    return EvalMetrics(records=records, success_rate=success_rate, median_steps=median, cdf=cdf)


def steps_cdf(metrics: EvalMetrics) -> list[tuple[int, float]]:
    """(steps, cumulative fraction of all episodes done within that many
    steps); failed episodes are never counted."""
    return [(k, float(v)) for k, v in enumerate(metrics.cdf)]


def write_metrics_csv(metrics: EvalMetrics, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "episode",
                "field_id",
                "start_row",
                "start_col",
                "steps",
                "reached",
                "start_sinr_db",
                "end_sinr_db",
                "genie_steps",
            ]
        )
        for r in metrics.records:
            writer.writerow(
                [
                    r.episode,
                    r.field_id,
                    r.start[0],
                    r.start[1],
                    r.steps,
                    int(r.reached),
                    repr(r.start_sinr_db),
                    repr(r.end_sinr_db),
                    r.genie_steps if r.genie_reachable else "",
                ]
            )


def write_cdf_csv(metrics: EvalMetrics, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["steps", "cum_fraction"])
        for k, v in steps_cdf(metrics):
            writer.writerow([k, repr(v)])
