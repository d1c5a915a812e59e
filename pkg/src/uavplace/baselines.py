"""Reference policies and bounds the learned agent is judged against.

The genie plans with full knowledge of the field; on the unweighted motion
lattice its dynamic program reduces to breadth-first search, which yields the
identical shortest-step table. The blind observation variant strips the
topology channel and hides blockage, and the random walk is the no-learning
control.
"""
from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .env import Action, EnvState, EpisodeConfig, Observation, PlacementEnv
from .gridmap import HeightGrid
from .propagation import SinrField

__all__ = [
    "GenieResult",
    "genie_shortest",
    "blind_observation",
    "blind_observer",
    "random_walk_policy",
    "upper_bound",
    "write_genie_csv",
]

# Fixed expansion order keeps parents, and therefore paths, deterministic.
_NEIGHBOR_STEPS = ((-1, 0), (0, -1), (0, 1), (1, 0))


@dataclass(frozen=True)
class GenieResult:
    reachable: bool
    steps: int | None
    path: tuple[tuple[int, int], ...] | None


def genie_shortest(
    grid: HeightGrid,
    field: SinrField,
    start: tuple[int, int],
    target_sinr_db: float = 5.0,
) -> GenieResult:
    """Fewest lattice steps from `start` to any cell with sufficient SINR.

    Expands only over permissible cells. Among nearest qualifying cells the
    one first in (row, col) order wins, and path reconstruction prefers the
    same order, so results are fully deterministic.
    """
    sr, sc = start
    if not grid.in_bounds(start) or not field.valid[sr, sc]:
        raise ValueError(f"start {start} is not a permissible UAV cell")
    qualifies = field.valid & (np.nan_to_num(field.values, nan=-np.inf) >= target_sinr_db)
    if qualifies[sr, sc]:
        return GenieResult(reachable=True, steps=0, path=((sr, sc),))

    nrows, ncols = field.shape
    dist = np.full((nrows, ncols), -1, dtype=np.int64)
    dist[sr, sc] = 0
    queue = deque([(sr, sc)])
    while queue:
        r, c = queue.popleft()
        for dr, dc in _NEIGHBOR_STEPS:
            nr, nc = r + dr, c + dc
            if 0 <= nr < nrows and 0 <= nc < ncols and dist[nr, nc] < 0 and field.valid[nr, nc]:
                dist[nr, nc] = dist[r, c] + 1
                queue.append((nr, nc))

    reached = qualifies & (dist >= 0)
    if not reached.any():
        return GenieResult(reachable=False, steps=None, path=None)
    cells = np.argwhere(reached)
    order = np.lexsort((cells[:, 1], cells[:, 0], dist[cells[:, 0], cells[:, 1]]))
    goal = tuple(int(v) for v in cells[order[0]])

    path = [goal]
    r, c = goal
    while dist[r, c] > 0:
        for dr, dc in _NEIGHBOR_STEPS:
            nr, nc = r + dr, c + dc
            if 0 <= nr < nrows and 0 <= nc < ncols and dist[nr, nc] == dist[r, c] - 1:
                r, c = nr, nc
                break
        path.append((r, c))
    path.reverse()
    return GenieResult(reachable=True, steps=int(dist[goal]), path=tuple(path))


def blind_observation(
    state: EnvState, grid: HeightGrid, field: SinrField, config: EpisodeConfig
) -> Observation:
    """SINR-only observation: topo zeroed, unreachable cells left at the high
    sentinel so they cannot be told apart from unvisited ones."""
    env = PlacementEnv(grid, field, config)
    topo, sinr = env._observation_channels(state, blind=True)
    return Observation(topo=topo, sinr=sinr)


def blind_observer(env: PlacementEnv, state: EnvState) -> Observation:
    """Observation hook for training/evaluating the blind agent."""
    topo, sinr = env._observation_channels(state, blind=True)
    return Observation(topo=topo, sinr=sinr)


def random_walk_policy(env: PlacementEnv, state: EnvState, rng: np.random.Generator) -> Action:
    """Uniform over currently legal actions."""
    legal = env.legal_actions(state)
    if not legal:
        raise ValueError(f"no legal action at {state.uav_cell}")
    return legal[int(rng.integers(len(legal)))]


def upper_bound(fields: Sequence[SinrField], target_sinr_db: float = 5.0) -> float:
    """Mean of (target - start SINR) pooled over every permissible start of
    every field; no episode-average SINR increase can beat it in expectation."""
    total = 0.0
    count = 0
    for field in fields:
        starts = field.values[field.valid]
        if starts.size == 0:
            raise ValueError("field has no permissible start cell")
        total += float(np.sum(target_sinr_db - starts))
        count += starts.size
    return total / count


def write_genie_csv(rows: Sequence[tuple[int, tuple[int, int], GenieResult]], path) -> None:
    """Rows of (field_id, start, result) to `field_id,start_row,start_col,reachable,steps`."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["field_id", "start_row", "start_col", "reachable", "steps"])
        for field_id, (r, c), res in rows:
            writer.writerow([field_id, r, c, int(res.reachable), res.steps if res.reachable else ""])
