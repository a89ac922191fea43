"""Local coverage gradient, cross-gradients and a curvature bound.

The gradient of an agent's local objective splits into an interior term (the
sensing decay pulling towards uncovered mass) and flux terms along the parts
of the region boundary that move with the agent: radial shadow segments and
range arcs.  Wall pieces are pinned and contribute nothing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .field import DensityField
from .geometry import Grid
from .objective import AgentSnapshot, miss_product, phi_at_points
from .quadrature import QuadratureConfig, arc_nodes, segment_nodes

Array = np.ndarray


class DegenerateObjectiveError(RuntimeError):
    """Raised when every curvature bound in a neighborhood is zero."""


def _unit(rel: Array, r: Array) -> Array:
    safe = np.maximum(r, 1e-300)
    out = rel / safe[:, None]
    out[r < 1e-12] = 0.0
    return out


def interior_term(grid: Grid, R_flat: Array, snap: AgentSnapshot,
                  neighbor_snaps, alpha: Array | None = None) -> Array:
    """Integral of the sensing-decay pull over the visible set.

    alpha, when given, is a per-cell multiplier on the interior weight (the
    boosting transforms use it; None means the plain gradient).
    """
    idx = snap.region.cells
    if len(idx) == 0:
        return np.zeros(2)
    X = grid.centers[idx]
    rel = X - snap.s
    unit = _unit(rel, snap.r)
    phi = miss_product(idx, neighbor_snaps)
    w1 = R_flat[idx] * phi * (-snap.dp)
    if alpha is not None:
        w1 = w1 * alpha
    coeff = w1 * snap.region.weights
    return (coeff[:, None] * unit).sum(axis=0) * grid.cell ** 2


def _boundary_weight(pts: Array, density: DensityField, snap: AgentSnapshot,
                     neighbor_snaps) -> Array:
    """R * phi * p_i evaluated on boundary points."""
    r = np.linalg.norm(pts - snap.s, axis=1)
    return (density.R(pts) * phi_at_points(pts, neighbor_snaps)
            * snap.model.p(r))


def gamma_term(seg, density: DensityField, snap: AgentSnapshot,
               neighbor_snaps, cfg: QuadratureConfig) -> Array:
    """Flux through one shadow segment as the shadow line sweeps."""
    r, h = segment_nodes(seg, cfg, unit=snap.model.delta)
    if len(r) == 0:
        return np.zeros(2)
    u = np.array([np.cos(seg.theta), np.sin(seg.theta)])
    pts = seg.v[None, :] + r[:, None] * u[None, :]
    w2 = _boundary_weight(pts, density, snap, neighbor_snaps)
    integral = float((w2 * r).sum() * h)
    dist = np.linalg.norm(seg.v - snap.s)
    if dist < 1e-12:
        return np.zeros(2)
    return seg.n * (integral / dist)


def theta_term(arc, density: DensityField, snap: AgentSnapshot,
               neighbor_snaps, cfg: QuadratureConfig) -> Array:
    """Flux through one range arc as the circle translates."""
    th, h = arc_nodes(arc, cfg)
    if len(th) == 0:
        return np.zeros(2)
    dirs = np.column_stack([np.cos(th), np.sin(th)])
    pts = snap.s[None, :] + snap.model.delta * dirs
    w3 = _boundary_weight(pts, density, snap, neighbor_snaps)
    return snap.model.delta * h * (w3[:, None] * dirs).sum(axis=0)


def boundary_field(grid: Grid, R_flat: Array, snap: AgentSnapshot,
                   neighbor_snaps) -> Array:
    """R * phi * p_i on the region's own cells (the flux integrand)."""
    idx = snap.region.cells
    return R_flat[idx] * miss_product(idx, neighbor_snaps) * snap.p


def band_flux(grid: Grid, R_flat: Array, snap: AgentSnapshot,
              neighbor_snaps, disk_extra: Array | None = None) -> Array:
    """Boundary flux taken as the exact mask-weight derivative.

    Summing the flux integrand against d(weight)/ds differentiates the masked
    objective itself, so it agrees with central differences of the cell sums
    to roundoff instead of to the band-sampling error of a line quadrature.
    disk_extra, when given, is an additive per-cell offset applied to the
    range-circle integrand only (arc boosting injects its constant force
    through it).
    """
    reg = snap.region
    if len(reg.cells) == 0:
        return np.zeros(2)
    f = boundary_field(grid, R_flat, snap, neighbor_snaps)
    fd = f if disk_extra is None else f + disk_extra
    out = (fd[:, None] * reg.grad_disk).sum(axis=0)
    for gmat in reg.grad_gamma:
        out = out + (f[:, None] * gmat).sum(axis=0)
    return out * grid.cell ** 2


def local_gradient(grid: Grid, R_flat: Array, density: DensityField,
                   snap: AgentSnapshot, neighbor_snaps,
                   cfg: QuadratureConfig | None = None,
                   flux: str = "band") -> Array:
    """Gradient of the agent's local objective with respect to its position.

    flux picks how the moving-boundary terms are evaluated: "band" sums the
    integrand against the exact mask-weight derivatives, "line" uses the
    continuum quadrature along the shadow segments and range arcs.  Both
    agree to the band-sampling error; "band" matches the masked objective
    exactly and is the default everywhere.
    """
    cfg = cfg or QuadratureConfig()
    d = interior_term(grid, R_flat, snap, neighbor_snaps)
    if flux == "band":
        return d + band_flux(grid, R_flat, snap, neighbor_snaps)
    if flux != "line":
        raise ValueError("flux must be 'band' or 'line'")
    for seg in snap.region.gamma_segments():
        d = d + gamma_term(seg, density, snap, neighbor_snaps, cfg)
    for arc in snap.region.theta_arcs():
        d = d + theta_term(arc, density, snap, neighbor_snaps, cfg)
    return d


def cross_gradient(grid: Grid, R_flat: Array, snap_a: AgentSnapshot,
                   snap_b: AgentSnapshot, common_snaps,
                   boundary: bool = True) -> Array:
    """Sensitivity of agent b's local objective to agent a's position.

    common_snaps are the agents neighboring both a and b.  The overlap
    integral captures the sensing-decay coupling; with boundary=True the
    motion of agent a's own region edge through b's covered mass is added
    as well (it scales with the sensing probability at the range limit, so
    it is small but not negligible at the default decay rates).
    """
    idx_all = snap_a.region.cells
    if len(idx_all) == 0:
        return np.zeros(2)
    wb_all = snap_b.phat_flat[idx_all]
    sel = wb_all > 0.0
    out = np.zeros(2)
    if sel.any():
        idx = idx_all[sel]
        X = grid.centers[idx]
        unit = _unit(snap_a.s - X, snap_a.r[sel])
        coeff = (-R_flat[idx] * wb_all[sel] * miss_product(idx, common_snaps)
                 * snap_a.dp[sel] * snap_a.region.weights[sel])
        out = (coeff[:, None] * unit).sum(axis=0) * grid.cell ** 2
    if boundary:
        reg = snap_a.region
        f = (R_flat[idx_all] * wb_all * miss_product(idx_all, common_snaps)
             * snap_a.p)
        g = reg.grad_disk.copy()
        for gmat in reg.grad_gamma:
            g = g + gmat
        out = out - (f[:, None] * g).sum(axis=0) * grid.cell ** 2
    return out


def _pair_block(grid: Grid, R_flat: Array, snap_i: AgentSnapshot,
                snap_j: AgentSnapshot, others) -> Array:
    """2x2 block of second-derivative integrals for one neighbor."""
    idx = snap_i.region.cells
    if len(idx) == 0:
        return np.zeros((2, 2))
    if snap_j is snap_i:
        sel = np.ones(len(idx), dtype=bool)
        w_pair = snap_i.region.weights
        dp_j = snap_i.dp
        unit_j = _unit(grid.centers[idx] - snap_i.s, snap_i.r)
    else:
        wj = snap_j.region.w_flat[idx]
        sel = wj > 0.0
        if not sel.any():
            return np.zeros((2, 2))
        w_pair = snap_i.region.weights[sel] * wj[sel]
        X = grid.centers[idx[sel]]
        rel_j = X - snap_j.s
        r_j = np.linalg.norm(rel_j, axis=1)
        r_safe = np.maximum(r_j, grid.cell) \
            if snap_j.model.kind == "polynomial" else r_j
        dp_j = snap_j.model.dp_dD(r_safe)
        unit_j = _unit(rel_j, r_j)
    idx_s = idx[sel]
    X = grid.centers[idx_s]
    unit_i = _unit(X - snap_i.s, snap_i.r[sel])
    coeff = R_flat[idx_s] * miss_product(idx_s, others) * \
        snap_i.dp[sel] * dp_j * w_pair
    block = np.einsum("n,na,nb->ab", coeff, unit_i, unit_j)
    return block * grid.cell ** 2


def lipschitz_estimate(grid: Grid, R_flat: Array, snap_i: AgentSnapshot,
                       neighbor_snaps) -> float:
    """Row-sum bound on the gradient's variation over the neighborhood.

    Accumulates the absolute second-derivative integrals of the local
    objective with respect to the own and each neighbor position, takes the
    larger coordinate row, and adds a curvature bound for the moving-mask
    flux part of the gradient.  The flux curvature concentrates where the
    agent's own smoothing bands cross the fixed wall band, a neighbor's
    band, or each other; away from such contacts the added term vanishes,
    which keeps the estimate close to the plain integral bound.
    """
    rows = np.zeros(2)
    block = _pair_block(grid, R_flat, snap_i, snap_i, neighbor_snaps)
    rows += np.abs(block).sum(axis=1)
    for snap_j in neighbor_snaps:
        others = [s for s in neighbor_snaps if s is not snap_j]
        block = _pair_block(grid, R_flat, snap_i, snap_j, others)
        rows += np.abs(block).sum(axis=1)

    reg = snap_i.region
    idx = reg.cells
    if len(idx):
        mats = [np.abs(reg.grad_disk)] + [np.abs(g) for g in reg.grad_gamma]
        G = np.zeros_like(mats[0])
        for m in mats:
            G += m
        pair = np.zeros_like(G)
        for a in range(len(mats)):
            for b in range(a + 1, len(mats)):
                pair += mats[a] * mats[b]
        f = boundary_field(grid, R_flat, snap_i, neighbor_snaps)
        base = R_flat[idx] * snap_i.p
        X = grid.centers[idx]
        nb_slope = np.zeros(len(idx))
        for sj in neighbor_snaps:
            wj = sj.region.w_flat[idx]
            live = wj > 0.0
            slj = sj.region.slope_flat[idx]
            rj = np.linalg.norm(X - sj.s, axis=1)
            r_safe = np.maximum(rj, grid.cell) \
                if sj.model.kind == "polynomial" else rj
            pj = np.where(live | (slj > 0), sj.model.p(rj), 0.0)
            nb_slope += np.abs(sj.model.dp_dD(r_safe)) * wj + pj * slj
        steep = f * grid.wall_slope[idx] + base * nb_slope
        extra = (2.0 * steep[:, None] * G + 2.0 * f[:, None] * pair) \
            .sum(axis=0) * grid.cell ** 2
        rows = rows + extra
    return float(rows.max())


@dataclass
class GradientBundle:
    """Everything agent i needs for stepping: own gradient, the sensitivities
    of every closed-neighborhood objective to its position, and the curvature
    bound of its own objective."""
    d: Array
    cross: dict[int, Array] = field(default_factory=dict)
    K1: float = 0.0


def build_bundle(grid: Grid, R_flat: Array, density: DensityField,
                 snaps: dict[int, AgentSnapshot], neighbors: dict[int, list[int]],
                 i: int, cfg: QuadratureConfig | None = None) -> GradientBundle:
    """Assemble the gradient bundle of one agent from round snapshots."""
    cfg = cfg or QuadratureConfig()
    nb_ids = neighbors.get(i, [])
    nb = [snaps[j] for j in nb_ids]
    d = local_gradient(grid, R_flat, density, snaps[i], nb, cfg)
    cross = {i: d}
    for j in nb_ids:
        common = [snaps[l] for l in nb_ids
                  if l != j and l in set(neighbors.get(j, []))]
        cross[j] = cross_gradient(grid, R_flat, snaps[i], snaps[j], common)
    K1 = lipschitz_estimate(grid, R_flat, snaps[i], nb)
    return GradientBundle(d=d, cross=cross, K1=K1)
