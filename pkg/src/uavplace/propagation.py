"""Deterministic SINR fields at flight altitude for a ground transmitter.

The channel model composes free-space path loss, a fixed per-wall penetration
loss for buildings cutting the direct ray, and a smooth seeded shadowing term,
all referenced to a constant noise-plus-interference floor. It stands in for
externally ray-traced data, which can be ingested through the same file
format via :func:`load_field`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .gridmap import HeightGrid, blocked_mask

__all__ = [
    "FieldParseError",
    "RadioParams",
    "SinrField",
    "line_of_sight",
    "sinr_value",
    "shadowing_db",
    "compute_sinr_field",
    "dead_zone_mask",
    "save_field",
    "load_field",
]

USER_ANTENNA_M = 1.5  # ground "user equipment" antenna height

# Value-noise lattice pitch for shadowing, in grid cells.
_SHADOW_PITCH_CELLS = 16


class FieldParseError(ValueError):
    """Malformed SINR-field file; the message names the offending line."""


@dataclass(frozen=True)
class RadioParams:
    tx_power_dbm: float = 20.0
    freq_mhz: float = 800.0
    noise_plus_interference_dbm: float = -104.0
    blockage_loss_db_per_wall: float = 15.0
    deadzone_floor_db: float = -90.0
    sinr_clamp_db: tuple[float, float] = (-140.0, 45.0)
    shadow_db_max: float = 10.0

    def __post_init__(self):
        lo, hi = self.sinr_clamp_db
        if not (lo < self.deadzone_floor_db < hi):
            raise ValueError(
                f"deadzone floor {self.deadzone_floor_db} must lie strictly inside clamp {self.sinr_clamp_db}"
            )
        if self.blockage_loss_db_per_wall < 0:
            raise ValueError("blockage loss must be non-negative")
        if self.freq_mhz <= 0:
            raise ValueError("freq_mhz must be positive")
        if self.shadow_db_max < 0:
            raise ValueError("shadow_db_max must be non-negative")


@dataclass(frozen=True, eq=False)
class SinrField:
    """Per-cell SINR in dB at flight altitude for one user location.

    `values` holds NaN at blocked cells (no measurement exists there) and the
    clamped SINR elsewhere; `valid` is False at blocked cells and at cells
    below the dead-zone floor. Two fields compare equal when they agree on
    geometry, the valid mask, and the values of valid cells.
    """

    ncols: int
    nrows: int
    spacing_m: float
    user_cell: tuple[int, int]
    altitude_m: float
    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64)
        mask = np.array(self.valid, dtype=bool)
        if vals.shape != (self.nrows, self.ncols) or mask.shape != vals.shape:
            raise ValueError("values/valid shape does not match declared dimensions")
        ur, uc = self.user_cell
        if not (0 <= ur < self.nrows and 0 <= uc < self.ncols):
            raise ValueError(f"user cell {self.user_cell} outside {self.nrows}x{self.ncols} grid")
        if np.any(~np.isfinite(vals[mask])):
            raise ValueError("valid cells must hold finite SINR values")
        vals.flags.writeable = False
        mask.flags.writeable = False
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "valid", mask)
        object.__setattr__(self, "user_cell", (int(ur), int(uc)))

    @property
    def shape(self) -> tuple[int, int]:
        return self.nrows, self.ncols

    def __eq__(self, other) -> bool:
        if not isinstance(other, SinrField):
            return NotImplemented
        return (
            self.shape == other.shape
            and self.spacing_m == other.spacing_m
            and self.user_cell == other.user_cell
            and self.altitude_m == other.altitude_m
            and np.array_equal(self.valid, other.valid)
            and np.array_equal(self.values[self.valid], other.values[other.valid])
        )

    def __hash__(self):
        return hash((self.shape, self.user_cell, self.altitude_m))


def _segment_samples(n: int) -> np.ndarray:
    """Interpolation weights 0..1, symmetric under reversal by construction."""
    i = np.arange(n, dtype=np.float64)
    return i / (n - 1)


def line_of_sight(
    grid: HeightGrid,
    a: tuple[int, int],
    b: tuple[int, int],
    alt_a: float,
    alt_b: float,
) -> int:
    """Count distinct obstructions on the straight segment between cell centers.

    The segment runs at linearly interpolated altitude; each maximal run of
    samples whose cell height strictly exceeds the segment altitude counts as
    one wall. 0 means the path is unobstructed.
    """
    for cell in (a, b):
        if not grid.in_bounds(cell):
            raise IndexError(f"cell {cell} out of bounds for {grid.nrows}x{grid.ncols} grid")
    ar, ac = a
    br, bc = b
    dist_cells = math.hypot(br - ar, bc - ac)
    n = max(2, int(math.ceil(dist_cells * 4)) + 1)
    t = _segment_samples(n)
    # (1-t)*a + t*b written with integer-weight symmetry so that swapping the
    # endpoints yields bitwise-identical sample points.
    w = np.arange(n, dtype=np.float64)
    wr = n - 1 - w
    denom = float(n - 1)
    rows = (wr * ar + w * br) / denom
    cols = (wr * ac + w * bc) / denom
    alts = (wr * alt_a + w * alt_b) / denom
    ri = np.rint(rows).astype(np.intp)
    ci = np.rint(cols).astype(np.intp)
    obstructed = grid.heights[ri, ci] > alts
    starts = obstructed & ~np.concatenate(([False], obstructed[:-1]))
    return int(np.count_nonzero(starts))


def _wall_counts(grid: HeightGrid, user_cell: tuple[int, int], altitude_m: float) -> np.ndarray:
    """Vectorized line_of_sight from the user to every cell.

    Cells are grouped by sample count so each group reproduces the scalar
    routine exactly.
    """
    ur, uc = user_cell
    rows, cols = np.meshgrid(np.arange(grid.nrows), np.arange(grid.ncols), indexing="ij")
    rows = rows.ravel()
    cols = cols.ravel()
    dist = np.hypot(rows - ur, cols - uc)
    ns = np.maximum(2, np.ceil(dist * 4).astype(np.intp) + 1)
    walls = np.zeros(rows.shape[0], dtype=np.intp)
    heights = grid.heights
    for n in np.unique(ns):
        sel = ns == n
        rr = rows[sel].astype(np.float64)
        cc = cols[sel].astype(np.float64)
        w = np.arange(n, dtype=np.float64)
        wr = n - 1 - w
        denom = float(n - 1)
        pr = (wr[:, None] * ur + w[:, None] * rr[None, :]) / denom
        pc = (wr[:, None] * uc + w[:, None] * cc[None, :]) / denom
        alts = (wr[:, None] * USER_ANTENNA_M + w[:, None] * altitude_m) / denom
        ri = np.rint(pr).astype(np.intp)
        ci = np.rint(pc).astype(np.intp)
        obstructed = heights[ri, ci] > alts
        starts = obstructed & ~np.vstack([np.zeros((1, obstructed.shape[1]), dtype=bool), obstructed[:-1]])
        walls[sel] = starts.sum(axis=0)
    return walls.reshape(grid.nrows, grid.ncols)


def _hash01(seed: int, i: np.ndarray, j: np.ndarray) -> np.ndarray:
    """Deterministic uniform [0,1) lattice values from (seed, i, j).

    Splitmix-style finalizer; uint64 arithmetic wraps by design.
    """
    with np.errstate(over="ignore"):
        z = (
            np.uint64(seed & 0xFFFFFFFFFFFFFFFF) * np.uint64(0x9E3779B97F4A7C15)
            + i.astype(np.uint64) * np.uint64(0xBF58476D1CE4E5B9)
            + j.astype(np.uint64) * np.uint64(0x94D049BB133111EB)
        )
        z = z + np.uint64(0x9E3779B97F4A7C15)
        z ^= z >> np.uint64(30)
        z *= np.uint64(0xBF58476D1CE4E5B9)
        z ^= z >> np.uint64(27)
        z *= np.uint64(0x94D049BB133111EB)
        z ^= z >> np.uint64(31)
    return z.astype(np.float64) / float(2**64)


def shadowing_db(seed: int, rows: np.ndarray, cols: np.ndarray, max_db: float = 10.0) -> np.ndarray:
    """Smooth value-noise shadowing in [0, max_db], pure in (seed, cell).

    Bilinear interpolation of a hashed coarse lattice with smoothstep easing;
    independent of grid dimensions so fields of different sizes agree where
    cells coincide.
    """
    u = np.asarray(rows, dtype=np.float64) / _SHADOW_PITCH_CELLS
    v = np.asarray(cols, dtype=np.float64) / _SHADOW_PITCH_CELLS
    i0 = np.floor(u).astype(np.int64)
    j0 = np.floor(v).astype(np.int64)
    fu = u - i0
    fv = v - j0
    su = fu * fu * (3.0 - 2.0 * fu)
    sv = fv * fv * (3.0 - 2.0 * fv)
    v00 = _hash01(seed, i0, j0)
    v01 = _hash01(seed, i0, j0 + 1)
    v10 = _hash01(seed, i0 + 1, j0)
    v11 = _hash01(seed, i0 + 1, j0 + 1)
    top = v00 + (v01 - v00) * sv
    bot = v10 + (v11 - v10) * sv
    return (top + (bot - top) * su) * max_db


def free_space_path_loss_db(d3d_m: float | np.ndarray, freq_mhz: float) -> float | np.ndarray:
    d_km = np.maximum(np.asarray(d3d_m, dtype=np.float64), 1.0) / 1000.0
    return 32.44 + 20.0 * np.log10(d_km) + 20.0 * np.log10(freq_mhz)


def sinr_value(
    d3d_m: float | np.ndarray,
    walls: int | np.ndarray,
    shadow_db: float | np.ndarray,
    params: RadioParams,
) -> float | np.ndarray:
    """SINR in dB before validity masking; clamped to params.sinr_clamp_db."""
    raw = (
        params.tx_power_dbm
        - free_space_path_loss_db(d3d_m, params.freq_mhz)
        - np.asarray(walls) * params.blockage_loss_db_per_wall
        - shadow_db
        - params.noise_plus_interference_dbm
    )
    lo, hi = params.sinr_clamp_db
    out = np.clip(raw, lo, hi)
    return float(out) if np.isscalar(d3d_m) or np.ndim(out) == 0 else out


def compute_sinr_field(
    grid: HeightGrid,
    user_cell: tuple[int, int],
    params: RadioParams = RadioParams(),
    altitude_m: float = 10.0,
    seed: int = 0,
) -> SinrField:
    """Deterministic SINR field at `altitude_m` for a user at `user_cell`.

    Blocked cells carry no measurement (NaN, invalid); open cells below the
    dead-zone floor keep their value but are marked invalid.
    """
    ur, uc = user_cell
    if not grid.in_bounds(user_cell):
        raise ValueError(f"user cell {user_cell} outside {grid.nrows}x{grid.ncols} grid")
    if grid.heights[ur, uc] > USER_ANTENNA_M:
        raise ValueError(
            f"user cell {user_cell} lies inside a building of height {grid.heights[ur, uc]:.3f} m"
        )
    rows, cols = np.meshgrid(np.arange(grid.nrows), np.arange(grid.ncols), indexing="ij")
    horiz = np.hypot(rows - ur, cols - uc) * grid.spacing_m
    d3d = np.hypot(horiz, altitude_m - USER_ANTENNA_M)
    walls = _wall_counts(grid, (ur, uc), altitude_m)
    shadow = shadowing_db(seed, rows, cols, params.shadow_db_max)
    values = sinr_value(d3d, walls, shadow, params)
    blocked = blocked_mask(grid, altitude_m)
    valid = ~blocked & (values >= params.deadzone_floor_db)
    values = np.where(blocked, np.nan, values)
    return SinrField(
        ncols=grid.ncols,
        nrows=grid.nrows,
        spacing_m=grid.spacing_m,
        user_cell=(ur, uc),
        altitude_m=altitude_m,
        values=values,
        valid=valid,
    )


def dead_zone_mask(field: SinrField) -> np.ndarray:
    """True where a UAV must not start (blocked or no usable reception)."""
    return ~field.valid


def save_field(field: SinrField, path) -> None:
    """Write the text format: `SINR v1 <ncols> <nrows> <spacing_m> <user_row>
    <user_col> <altitude_m>` header, then rows of dB values with `NA` marking
    invalid cells."""
    ur, uc = field.user_cell
    lines = [
        f"SINR v1 {field.ncols} {field.nrows} {field.spacing_m!r} {ur} {uc} {field.altitude_m!r}"
    ]
    for r in range(field.nrows):
        tokens = [
            repr(float(field.values[r, c])) if field.valid[r, c] else "NA"
            for c in range(field.ncols)
        ]
        lines.append(" ".join(tokens))
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_field(path) -> SinrField:
    """Parse a SINR-field file; accepts externally produced files too.

    Valid values must fall within the default clamp range so that sentinel
    codes stay unambiguous.
    """
    with open(path) as fh:
        text = fh.read()
    lines = text.split("\n")
    header = lines[0].split()
    if len(header) != 8 or header[0] != "SINR" or header[1] != "v1":
        raise FieldParseError(
            "line 1: expected header 'SINR v1 <ncols> <nrows> <spacing_m> <user_row> <user_col> <altitude_m>'"
        )
    try:
        ncols, nrows = int(header[2]), int(header[3])
        spacing = float(header[4])
        ur, uc = int(header[5]), int(header[6])
        altitude = float(header[7])
    except ValueError:
        raise FieldParseError("line 1: malformed header fields") from None
    if ncols < 1 or nrows < 1 or not (spacing > 0):
        raise FieldParseError("line 1: dimensions must be positive")
    if not (0 <= ur < nrows and 0 <= uc < ncols):
        raise FieldParseError(f"line 1: user cell ({ur}, {uc}) outside {nrows}x{ncols} grid")
    clamp_lo, clamp_hi = RadioParams().sinr_clamp_db
    values = np.full((nrows, ncols), np.nan)
    valid = np.zeros((nrows, ncols), dtype=bool)
    for i in range(nrows):
        lineno = i + 2
        if i + 1 >= len(lines):
            raise FieldParseError(f"line {lineno}: missing data row {i + 1} of {nrows}")
        tokens = lines[i + 1].split()
        if len(tokens) != ncols:
            raise FieldParseError(f"line {lineno}: expected {ncols} tokens, got {len(tokens)}")
        for j, tok in enumerate(tokens):
            if tok == "NA":
                continue
            try:
                v = float(tok)
            except ValueError:
                raise FieldParseError(f"line {lineno}: invalid SINR token {tok!r}") from None
            if not np.isfinite(v):
                raise FieldParseError(f"line {lineno}: SINR {tok!r} is not finite")
            if not (clamp_lo <= v <= clamp_hi):
                raise FieldParseError(
                    f"line {lineno}: SINR {tok!r} outside representable range [{clamp_lo}, {clamp_hi}]"
                )
            values[i, j] = v
            valid[i, j] = True
    for extra, line in enumerate(lines[nrows + 1 :]):
        if line.strip():
            raise FieldParseError(f"line {nrows + 2 + extra}: trailing garbage after {nrows} data rows")
    return SinrField(
        ncols=ncols,
        nrows=nrows,
        spacing_m=spacing,
        user_cell=(ur, uc),
        altitude_m=altitude,
        values=values,
        valid=valid,
    )
