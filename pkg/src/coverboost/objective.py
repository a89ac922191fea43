"""Coverage objectives: global, per-agent local and neighborhood values.

Evaluation happens on the shared mission grid.  An AgentSnapshot caches the
masked detection values of one agent for a round so every objective and
gradient consumer can reuse them instead of re-deriving p-hat per call.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .field import DensityField, SensingModel
from .geometry import Grid, VisibilityRegion


class AgentSnapshot:
    """One agent's cached detection state on the grid for a single round."""

    def __init__(self, aid: int, model: SensingModel,
                 region: VisibilityRegion):
        self.id = aid
        self.model = model
        self.region = region
        self.s = region.s
        grid = region.grid
        idx = region.cells
        X = grid.centers[idx]
        self.r = np.linalg.norm(X - self.s, axis=1)
        self.p = model.p(self.r)
        # polynomial decay blows up at the origin, keep D one cell away
        r_safe = np.maximum(self.r, grid.cell) if model.kind == "polynomial" \
            else self.r
        self.dp = model.dp_dD(r_safe)
        self.phat = self.p * region.weights
        flat = np.zeros(grid.n)
        flat[idx] = self.phat
        self.phat_flat = flat

    def phat_at_points(self, pts: np.ndarray) -> np.ndarray:
        """p-hat at arbitrary points, with the same ramped mask as the cells.

        Boundary quadrature has to see the identical field the cell sums use,
        otherwise gradient flux terms pick up a mask-width bias wherever a
        boundary piece crosses a neighbor's smoothing band.
        """
        w = self.region.weight_many(pts)
        r = np.linalg.norm(pts - self.s, axis=1)
        return self.model.p(r) * w


def density_on_grid(density: DensityField, grid: Grid) -> np.ndarray:
    return density.R(grid.centers)


def miss_product(idx: np.ndarray, snaps) -> np.ndarray:
    """prod(1 - p_hat_j) over the given snapshots at the listed cells."""
    out = np.ones(len(idx))
    for snap in snaps:
        out *= 1.0 - snap.phat_flat[idx]
    return out


def phi_at_points(pts: np.ndarray, snaps) -> np.ndarray:
    out = np.ones(len(pts))
    for snap in snaps:
        out *= 1.0 - snap.phat_at_points(pts)
    return out


def _union_cells(snaps) -> np.ndarray:
    if not snaps:
        return np.empty(0, dtype=np.intp)
    return np.unique(np.concatenate([s.region.cells for s in snaps]))


def global_H(grid: Grid, R_flat: np.ndarray, snaps) -> float:
    """Expected covered density under joint detection by all listed agents."""
    idx = _union_cells(snaps)
    if len(idx) == 0:
        return 0.0
    joint = 1.0 - miss_product(idx, snaps)
    return float((R_flat[idx] * joint).sum() * grid.cell ** 2)


def local_H(grid: Grid, R_flat: np.ndarray, snap: AgentSnapshot,
            neighbor_snaps) -> float:
    """Agent's own expected contribution given its neighbors' coverage."""
    idx = snap.region.cells
    if len(idx) == 0:
        return 0.0
    phi = miss_product(idx, neighbor_snaps)
    vals = R_flat[idx] * phi * snap.phat
    return float(vals.sum() * grid.cell ** 2)


def neighborhood_Hbar(grid: Grid, R_flat: np.ndarray, closed_snaps) -> float:
    """Joint coverage of a closed neighborhood over its union footprint."""
    return global_H(grid, R_flat, closed_snaps)


@dataclass
class ObjectiveReport:
    H: float
    H_i: dict[int, float]
    Hbar_i: dict[int, float]
    Htilde_i: dict[int, float]


def build_report(grid: Grid, R_flat: np.ndarray, snaps: dict,
                 neighbors: dict[int, list[int]]) -> ObjectiveReport:
    """Evaluate every objective on one round's snapshots.

    neighbors maps agent id to its open neighborhood (ids with overlapping
    visible sets).  Htilde_i sums the local values over the closed
    neighborhood, the quantity the step-size scheme reasons about.
    """
    ids = sorted(snaps)
    H = global_H(grid, R_flat, [snaps[i] for i in ids])
    H_i = {}
    Hbar_i = {}
    for i in ids:
        nb = [snaps[j] for j in neighbors.get(i, [])]
        H_i[i] = local_H(grid, R_flat, snaps[i], nb)
        Hbar_i[i] = neighborhood_Hbar(grid, R_flat, [snaps[i]] + nb)
    Htilde_i = {
        i: H_i[i] + sum(H_i[j] for j in neighbors.get(i, []))
        for i in ids
    }
    return ObjectiveReport(H=H, H_i=H_i, Hbar_i=Hbar_i, Htilde_i=Htilde_i)
