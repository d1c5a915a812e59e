"""Rasterized urban height maps: procedural generation, queries, text I/O.

A height grid samples building/terrain height at the center of each cell of
a uniform lattice (default 4 m spacing). Row 0 is the northernmost row.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "MapParseError",
    "HeightGrid",
    "CityGenParams",
    "generate_city",
    "relative_heights",
    "is_blocked",
    "blocked_mask",
    "save_grid",
    "load_grid",
]

# Target building-block side in meters before streets are carved between blocks.
_BLOCK_M = 36.0


class MapParseError(ValueError):
    """Malformed height-grid file; the message names the offending line."""


@dataclass(frozen=True, eq=False)
class HeightGrid:
    """Immutable raster of heights in meters above ground.

    Safe to share across threads: the backing array is marked read-only.
    """

    ncols: int
    nrows: int
    spacing_m: float
    heights: np.ndarray

    def __post_init__(self):
        if self.ncols < 1 or self.nrows < 1:
            raise ValueError(f"grid must be at least 1x1, got {self.nrows}x{self.ncols}")
        if not (self.spacing_m > 0):
            raise ValueError(f"spacing_m must be positive, got {self.spacing_m}")
        h = np.array(self.heights, dtype=np.float64)
        if h.shape != (self.nrows, self.ncols):
            raise ValueError(f"heights shape {h.shape} does not match {self.nrows}x{self.ncols}")
        if not np.all(np.isfinite(h)):
            raise ValueError("heights must be finite")
        if np.any(h < 0):
            raise ValueError("heights must be non-negative")
        h.flags.writeable = False
        object.__setattr__(self, "heights", h)

    @property
    def shape(self) -> tuple[int, int]:
        return self.nrows, self.ncols

    def in_bounds(self, cell: tuple[int, int]) -> bool:
        r, c = cell
        return 0 <= r < self.nrows and 0 <= c < self.ncols

    def __eq__(self, other) -> bool:
        if not isinstance(other, HeightGrid):
            return NotImplemented
        return (
            self.ncols == other.ncols
            and self.nrows == other.nrows
            and self.spacing_m == other.spacing_m
            and np.array_equal(self.heights, other.heights)
        )

    def __hash__(self):
        return hash((self.ncols, self.nrows, self.spacing_m, self.heights.tobytes()))


@dataclass(frozen=True)
class CityGenParams:
    """Knobs for the procedural city generator."""

    seed: int
    extent_m: tuple[float, float] = (256.0, 256.0)
    building_density: float = 0.25
    height_range_m: tuple[float, float] = (6.0, 30.0)
    street_width_m: float = 12.0

    def __post_init__(self):
        if not (0.0 <= self.building_density <= 1.0):
            raise ValueError(f"building_density must be in [0,1], got {self.building_density}")
        lo, hi = self.height_range_m
        if lo > hi:
            raise ValueError(f"height_range_m min {lo} exceeds max {hi}")
        if lo < 0:
            raise ValueError("building heights must be non-negative")
        if self.extent_m[0] <= 0 or self.extent_m[1] <= 0:
            raise ValueError(f"extent_m must be positive, got {self.extent_m}")
        if self.street_width_m <= 0:
            raise ValueError("street_width_m must be positive")


def _block_spans(n: int, street_cells: int, block_cells: int) -> list[tuple[int, int]]:
    """Half-open index spans of buildable blocks along one axis."""
    pitch = street_cells + block_cells
    spans = []
    start = street_cells
    while start < n:
        stop = min(start + block_cells, n)
        spans.append((start, stop))
        start += pitch
    return spans


def _free_space_connected(free: np.ndarray) -> bool:
    """True when all True cells of `free` form one 4-connected component."""
    total = int(free.sum())
    if total == 0:
        return True
    seen = np.zeros_like(free)
    r0, c0 = np.argwhere(free)[0]
    seen[r0, c0] = True
    while True:
        grown = seen.copy()
        grown[1:, :] |= seen[:-1, :]
        grown[:-1, :] |= seen[1:, :]
        grown[:, 1:] |= seen[:, :-1]
        grown[:, :-1] |= seen[:, 1:]
        grown &= free
        if np.array_equal(grown, seen):
            break
        seen = grown
    return int(seen.sum()) == total


def generate_city(params: CityGenParams, spacing_m: float = 4.0) -> HeightGrid:
    """Generate a deterministic city raster from `params`.

    Rectangular buildings are placed inside blocks of a street lattice, one
    building per block at most, until the covered area reaches the requested
    density (street area caps what is achievable). Layouts whose free space
    is not 4-connected are rejected and regenerated from the next substream,
    so episodes can always reach every open cell.
    """
    ncols = int(round(params.extent_m[0] / spacing_m))
    nrows = int(round(params.extent_m[1] / spacing_m))
    if ncols < 1 or nrows < 1:
        raise ValueError(f"extent {params.extent_m} smaller than one {spacing_m} m cell")

    street_cells = max(1, int(round(params.street_width_m / spacing_m)))
    block_cells = max(2, int(round(_BLOCK_M / spacing_m)))
    row_spans = _block_spans(nrows, street_cells, block_cells)
    col_spans = _block_spans(ncols, street_cells, block_cells)
    blocks = [(rs, cs) for rs in row_spans for cs in col_spans]
    target_cells = params.building_density * nrows * ncols
    h_lo, h_hi = params.height_range_m

    for attempt in range(64):
        rng = np.random.default_rng(np.random.SeedSequence(params.seed, spawn_key=(attempt,)))
        heights = np.zeros((nrows, ncols), dtype=np.float64)
        covered = 0.0
        for bi in rng.permutation(len(blocks)):
            if covered >= target_cells:
                break
            (r0, r1), (c0, c1) = blocks[bi]
            bh, bw = r1 - r0, c1 - c0
            fh = int(rng.integers(max(1, (bh + 1) // 2), bh + 1))
            fw = int(rng.integers(max(1, (bw + 1) // 2), bw + 1))
            orow = r0 + int(rng.integers(0, bh - fh + 1))
            ocol = c0 + int(rng.integers(0, bw - fw + 1))
            height = round(float(rng.uniform(h_lo, h_hi)), 3)
            if height <= 0:
                continue
            heights[orow : orow + fh, ocol : ocol + fw] = height
            covered += fh * fw
        if _free_space_connected(heights == 0):
            return HeightGrid(ncols=ncols, nrows=nrows, spacing_m=spacing_m, heights=heights)
    raise RuntimeError("could not generate a connected layout after 64 attempts")


def relative_heights(grid: HeightGrid, altitude_m: float) -> np.ndarray:
    """Heights relative to the flight altitude (positive means above)."""
    if not (altitude_m > 0):
        raise ValueError(f"altitude_m must be positive, got {altitude_m}")
    return grid.heights - altitude_m


def is_blocked(grid: HeightGrid, cell: tuple[int, int], altitude_m: float) -> bool:
    """A cell blocks flight when its height reaches the altitude exactly."""
    if not grid.in_bounds(cell):
        raise IndexError(f"cell {cell} out of bounds for {grid.nrows}x{grid.ncols} grid")
    return bool(grid.heights[cell] >= altitude_m)


def blocked_mask(grid: HeightGrid, altitude_m: float) -> np.ndarray:
    """Boolean mask of cells a UAV at `altitude_m` cannot occupy."""
    return grid.heights >= altitude_m


def save_grid(grid: HeightGrid, path) -> None:
    """Write the text format: `HGRID v1 <ncols> <nrows> <spacing_m>` header,
    then nrows lines of ncols heights with 3 decimals, row 0 northernmost."""
    lines = [f"HGRID v1 {grid.ncols} {grid.nrows} {grid.spacing_m!r}"]
    for row in grid.heights:
        lines.append(" ".join(f"{v:.3f}" for v in row))
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _parse_positive_int(token: str, what: str) -> int:
    try:
        value = int(token)
    except ValueError:
        raise MapParseError(f"line 1: {what} {token!r} is not an integer") from None
    if value < 1:
        raise MapParseError(f"line 1: {what} must be >= 1, got {value}")
    return value


def load_grid(path) -> HeightGrid:
    """Parse a height-grid file, rejecting malformed rows and trailing garbage."""
    with open(path) as fh:
        text = fh.read()
    lines = text.split("\n")
    header = lines[0].split()
    if len(header) != 5 or header[0] != "HGRID" or header[1] != "v1":
        raise MapParseError("line 1: expected header 'HGRID v1 <ncols> <nrows> <spacing_m>'")
    ncols = _parse_positive_int(header[2], "ncols")
    nrows = _parse_positive_int(header[3], "nrows")
    try:
        spacing = float(header[4])
    except ValueError:
        raise MapParseError(f"line 1: spacing {header[4]!r} is not a number") from None
    if not (spacing > 0 and np.isfinite(spacing)):
        raise MapParseError(f"line 1: spacing must be positive and finite, got {header[4]}")

    heights = np.zeros((nrows, ncols), dtype=np.float64)
    for i in range(nrows):
        lineno = i + 2
        if i + 1 >= len(lines):
            raise MapParseError(f"line {lineno}: missing data row {i + 1} of {nrows}")
        tokens = lines[i + 1].split()
        if len(tokens) != ncols:
            raise MapParseError(f"line {lineno}: expected {ncols} values, got {len(tokens)}")
        for j, tok in enumerate(tokens):
            try:
                v = float(tok)
            except ValueError:
                raise MapParseError(f"line {lineno}: invalid height {tok!r}") from None
            if not np.isfinite(v):
                raise MapParseError(f"line {lineno}: height {tok!r} is not finite")
            if v < 0:
                raise MapParseError(f"line {lineno}: negative height {tok!r}")
            heights[i, j] = v
    for extra, line in enumerate(lines[nrows + 1 :]):
        if line.strip():
            raise MapParseError(f"line {nrows + 2 + extra}: trailing garbage after {nrows} data rows")
    return HeightGrid(ncols=ncols, nrows=nrows, spacing_m=spacing, heights=heights)
