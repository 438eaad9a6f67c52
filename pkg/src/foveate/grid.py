"""Geometry of the 7x7 fixation grid over the 28x28 stimulus.

Grid coordinates are continuous (gx, gy) with one unit per cell; cell
(row r, col c) has index r * 7 + c and center (c, r). Pixel coordinates
map through 4 px per cell with the cell center at pixel offset 1.5. The
decision location (index 49) sits off the stimulus below the grid.
"""

from __future__ import annotations

import numpy as np

GRID = 7
CELL_PX = 4.0
DECISION_XY = np.array([3.0, 9.0])  # off-image staging point


def cell_center(cell: int) -> np.ndarray:
    """Grid-unit (gx, gy) center of a cell index; 49 is the decision spot."""
    if cell == GRID * GRID:
        return DECISION_XY.copy()
    if not 0 <= cell < GRID * GRID:
        raise ValueError(f"cell index {cell} out of range")
    r, c = divmod(cell, GRID)
    return np.array([float(c), float(r)])


def nearest_cell(xy: np.ndarray) -> int:
    """Grid cell whose center is closest to a grid-unit position."""
    c = int(np.clip(round(float(xy[0])), 0, GRID - 1))
    r = int(np.clip(round(float(xy[1])), 0, GRID - 1))
    return r * GRID + c


def grid_to_pixel(xy: np.ndarray) -> np.ndarray:
    """Grid-unit position -> continuous pixel (px, py)."""
    return np.asarray(xy, dtype=np.float64) * CELL_PX + 1.5


def cell_footprint(cell: int, size: int = 8, image_hw: int = 28):
    """Integer pixel (row, col) pairs of the 8x8 fovea at a cell center."""
    if cell >= GRID * GRID:
        return set()
    px, py = grid_to_pixel(cell_center(cell))
    offs = np.arange(size) - (size - 1) / 2.0
    rows = np.round(py + offs).astype(int)
    cols = np.round(px + offs).astype(int)
    out = set()
    for r in rows:
        for c in cols:
            if 0 <= r < image_hw and 0 <= c < image_hw:
                out.add((int(r), int(c)))
    return out
