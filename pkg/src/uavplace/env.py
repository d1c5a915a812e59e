"""Grid PO-MDP for horizontal UAV motion over a measured SINR field.

The agent moves one lattice step at a time in four directions, observes a
square local window of relative building heights plus sentinel-encoded SINR
measurements, and is rewarded by the SINR change with a bonus for visiting
new cells. Episode frames may be rotated by quarter turns; the rotation is a
pure observation/action transform, the world is untouched.
"""
from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from enum import IntEnum

import numpy as np

from .gridmap import HeightGrid
from .propagation import SinrField

__all__ = [
    "Action",
    "ACTION_DISPLACEMENTS",
    "EpisodeConfig",
    "EnvState",
    "Observation",
    "Transition",
    "PlacementEnv",
]

OUT_OF_MAP_RELIEF_M = 50.0  # off-map topo entries read as obstacles this far above altitude


class Action(IntEnum):
    """Agent-frame moves; the listed order is also the argmax tie-break order."""

    PLUS_X = 0
    MINUS_X = 1
    PLUS_Y = 2
    MINUS_Y = 3


# (drow, dcol) per action in the agent frame; +y points north (row decreases).
ACTION_DISPLACEMENTS = {
    Action.PLUS_X: (0, 1),
    Action.MINUS_X: (0, -1),
    Action.PLUS_Y: (-1, 0),
    Action.MINUS_Y: (1, 0),
}


def _rotate_disp(disp: tuple[int, int], quarter_turns: int) -> tuple[int, int]:
    """Map an agent-frame displacement to the world frame.

    One turn sends (dr, dc) to (dc, -dr), matching np.rot90 applied to the
    observation window, so 'what the agent sees at an offset' and 'where the
    matching action moves it' stay consistent.
    """
    dr, dc = disp
    for _ in range(quarter_turns % 4):
        dr, dc = dc, -dr
    return dr, dc


@dataclass(frozen=True)
class EpisodeConfig:
    obs_cells: int = 61
    step_cells: int = 1
    explore_reward: float = 1.2
    target_sinr_db: float = 5.0
    t_max: int = 800
    p_high_db: float = 50.0
    p_low_db: float = -150.0
    # Fixed frame rotation for the episode; None draws one uniformly at
    # reset, which is the training-time augmentation.
    rotation_quarter_turns: int | None = 0

    def __post_init__(self):
        if self.obs_cells < 1 or self.obs_cells % 2 == 0:
            raise ValueError(f"obs_cells must be odd and positive, got {self.obs_cells}")
        if self.step_cells < 1:
            raise ValueError("step_cells must be >= 1")
        if self.t_max < 1:
            raise ValueError("t_max must be >= 1")
        if not (self.p_low_db < self.p_high_db):
            raise ValueError("p_low_db must be below p_high_db")
        if self.rotation_quarter_turns is not None and not (0 <= self.rotation_quarter_turns <= 3):
            raise ValueError("rotation_quarter_turns must be in 0..3 or None")


@dataclass(frozen=True)
class Observation:
    """Two square windows centered on the UAV, in the episode's rotated frame."""

    topo: np.ndarray  # meters relative to altitude
    sinr: np.ndarray  # dB with sentinel codes


@dataclass
class EnvState:
    uav_cell: tuple[int, int]
    t: int
    visited: dict[tuple[int, int], float]
    done: bool
    done_reason: str  # none | target_reached | timeout
    rotation: int

    @property
    def current_sinr(self) -> float:
        return self.visited[self.uav_cell]


@dataclass(frozen=True)
class Transition:
    """Replay-buffer element. `next_legal_mask` records which actions were
    legal in the successor state so target computation can mask the argmax."""

    obs: Observation
    action: int
    reward: float
    next_obs: Observation
    terminal: bool
    newly_visited: bool
    next_legal_mask: np.ndarray = dc_field(default_factory=lambda: np.ones(4, dtype=bool))


class PlacementEnv:
    """One immutable world (grid + field) plus episode mechanics.

    Instances are cheap; training builds one per episode. State is carried
    explicitly through reset/step so snapshots stay trivially copyable.
    """

    def __init__(self, grid: HeightGrid, field: SinrField, config: EpisodeConfig):
        if (grid.nrows, grid.ncols) != field.shape:
            raise ValueError(
                f"grid {grid.nrows}x{grid.ncols} does not match field {field.nrows}x{field.ncols}"
            )
        lo = np.nanmin(field.values[field.valid]) if field.valid.any() else None
        if lo is not None:
            hi = np.nanmax(field.values[field.valid])
            if not (config.p_low_db < lo and hi < config.p_high_db):
                raise ValueError(
                    f"field values [{lo}, {hi}] not strictly inside sentinels "
                    f"({config.p_low_db}, {config.p_high_db})"
                )
        self.grid = grid
        self.field = field
        self.config = config
        self.altitude_m = field.altitude_m
        self._rel_heights = grid.heights - field.altitude_m
        self._start_cells = np.argwhere(field.valid)

    # -- episode control -------------------------------------------------

    def reset(self, seed: int) -> tuple[EnvState, Observation]:
        if len(self._start_cells) == 0:
            raise RuntimeError("no permissible start cell: every cell is blocked or a dead zone")
        rng = np.random.default_rng(seed)
        idx = int(rng.integers(len(self._start_cells)))
        start = (int(self._start_cells[idx][0]), int(self._start_cells[idx][1]))
        if self.config.rotation_quarter_turns is None:
            rotation = int(rng.integers(4))
        else:
            rotation = self.config.rotation_quarter_turns
        sinr0 = float(self.field.values[start])
        done = sinr0 >= self.config.target_sinr_db
        state = EnvState(
            uav_cell=start,
            t=0,
            visited={start: sinr0},
            done=done,
            done_reason="target_reached" if done else "none",
            rotation=rotation,
        )
        return state, self.build_observation(state)

    def legal_actions(self, state: EnvState) -> list[Action]:
        """Actions that keep the UAV on-map, off buildings, and out of dead zones."""
        out = []
        for action in Action:
            if self._target_cell_ok(state, action):
                out.append(action)
        return out

    def legal_mask(self, state: EnvState) -> np.ndarray:
        return np.array([self._target_cell_ok(state, a) for a in Action], dtype=bool)

    def _target_cell_ok(self, state: EnvState, action: Action) -> bool:
        r, c = self._target_cell(state, action)
        if not (0 <= r < self.grid.nrows and 0 <= c < self.grid.ncols):
            return False
        return bool(self.field.valid[r, c])

    def _target_cell(self, state: EnvState, action: Action) -> tuple[int, int]:
        dr, dc = ACTION_DISPLACEMENTS[Action(action)]
        dr, dc = dr * self.config.step_cells, dc * self.config.step_cells
        dr, dc = _rotate_disp((dr, dc), state.rotation)
        return state.uav_cell[0] + dr, state.uav_cell[1] + dc

    def step(self, state: EnvState, action: Action) -> tuple[EnvState, Observation, float, bool, str]:
        if state.done:
            raise ValueError("cannot step a finished episode")
        if not self._target_cell_ok(state, action):
            raise ValueError(f"illegal action {Action(action).name} at {state.uav_cell}; callers must mask")
        new_cell = self._target_cell(state, action)
        old_sinr = state.current_sinr
        new_sinr = float(self.field.values[new_cell])
        newly = new_cell not in state.visited
        reward = new_sinr - old_sinr + (self.config.explore_reward if newly else 0.0)
        visited = dict(state.visited)
        visited[new_cell] = new_sinr
        t = state.t + 1
        if new_sinr >= self.config.target_sinr_db:
            done, reason = True, "target_reached"
        elif t >= self.config.t_max:
            done, reason = True, "timeout"
        else:
            done, reason = False, "none"
        new_state = EnvState(
            uav_cell=new_cell,
            t=t,
            visited=visited,
            done=done,
            done_reason=reason,
            rotation=state.rotation,
        )
        return new_state, self.build_observation(new_state), reward, done, reason

    # -- observations -----------------------------------------------------

    def build_observation(self, state: EnvState) -> Observation:
        topo, sinr = self._observation_channels(state, blind=False)
        return Observation(topo=topo, sinr=sinr)

    def _observation_channels(self, state: EnvState, blind: bool) -> tuple[np.ndarray, np.ndarray]:
        """World-aligned windows rotated into the agent frame.

        Full observation: unknown cells read the high sentinel, cells that can
        never be measured (blocked, dead zone, off-map) read the low sentinel.
        Blind variant: the topo channel is zeroed and unreachable cells are
        left at the high sentinel, indistinguishable from unvisited ones.
        """
        cfg = self.config
        n = cfg.obs_cells
        half = n // 2
        r0 = state.uav_cell[0] - half
        c0 = state.uav_cell[1] - half

        topo = np.full((n, n), OUT_OF_MAP_RELIEF_M, dtype=np.float64)
        sinr = np.full((n, n), cfg.p_low_db if not blind else cfg.p_high_db, dtype=np.float64)

        gr0, gr1 = max(r0, 0), min(r0 + n, self.grid.nrows)
        gc0, gc1 = max(c0, 0), min(c0 + n, self.grid.ncols)
        if gr0 < gr1 and gc0 < gc1:
            wr0, wc0 = gr0 - r0, gc0 - c0
            wr1, wc1 = wr0 + (gr1 - gr0), wc0 + (gc1 - gc0)
            topo[wr0:wr1, wc0:wc1] = self._rel_heights[gr0:gr1, gc0:gc1]
            in_map_valid = self.field.valid[gr0:gr1, gc0:gc1]
            window_sinr = np.where(in_map_valid, cfg.p_high_db, cfg.p_low_db if not blind else cfg.p_high_db)
            sinr[wr0:wr1, wc0:wc1] = window_sinr

        if state.visited:
            cells = np.array(list(state.visited.keys()), dtype=np.intp)
            vals = np.fromiter(state.visited.values(), dtype=np.float64, count=len(state.visited))
            wr = cells[:, 0] - r0
            wc = cells[:, 1] - c0
            inside = (wr >= 0) & (wr < n) & (wc >= 0) & (wc < n)
            sinr[wr[inside], wc[inside]] = vals[inside]

        if blind:
            topo = np.zeros((n, n), dtype=np.float64)
        k = state.rotation % 4
        if k:
            topo = np.ascontiguousarray(np.rot90(topo, k))
            sinr = np.ascontiguousarray(np.rot90(sinr, k))
        return topo, sinr
