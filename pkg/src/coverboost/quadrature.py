"""Midpoint quadrature over masked areas, shadow segments and range arcs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import GammaSegment, ThetaArc, VisibilityRegion


@dataclass
class QuadratureConfig:
    """Resolution knobs shared by all integrals.

    cell: area-grid cell size (None means mission width / 200).
    line_pts: radial samples per one sensing-radius of segment length.
    arc_pts: angular samples per radian of arc.
    """

    cell: float | None = None
    line_pts: int = 64
    arc_pts: int = 64

    def __post_init__(self):
        if self.cell is not None and self.cell <= 0:
            raise ValueError("cell size must be positive")
        if self.line_pts < 1 or self.arc_pts < 1:
            raise ValueError("sample counts must be positive")


def integrate_area(region: VisibilityRegion, f,
                   cfg: QuadratureConfig | None = None) -> float:
    """Masked cell-sum of f over the visible set."""
    if len(region.cells) == 0:
        return 0.0
    vals = np.asarray(f(region.grid.centers[region.cells]), dtype=float)
    return float((vals * region.weights).sum() * region.grid.cell ** 2)


def segment_nodes(seg: GammaSegment, cfg: QuadratureConfig,
                  unit: float | None = None):
    """Midpoint radii and weight for a shadow segment."""
    unit = seg.Z if unit is None else unit
    if unit <= 0 or seg.Z <= 0:
        return np.empty(0), 0.0
    n = max(8, int(np.ceil(cfg.line_pts * seg.Z / unit)))
    h = seg.Z / n
    r = (np.arange(n) + 0.5) * h
    return r, h


def integrate_segment(seg: GammaSegment, g, cfg: QuadratureConfig | None = None,
                      unit: float | None = None) -> float:
    """Integral of g(r) along the segment parameter r in [0, Z]."""
    cfg = cfg or QuadratureConfig()
    r, h = segment_nodes(seg, cfg, unit)
    if len(r) == 0:
        return 0.0
    return float(np.sum(np.asarray(g(r), dtype=float)) * h)


def arc_nodes(arc: ThetaArc, cfg: QuadratureConfig):
    """Midpoint angles and weight for a range arc."""
    span = arc.theta2 - arc.theta1
    if span <= 0:
        return np.empty(0), 0.0
    n = max(8, int(np.ceil(cfg.arc_pts * span)))
    h = span / n
    th = arc.theta1 + (np.arange(n) + 0.5) * h
    return th, h


def integrate_arc(arc: ThetaArc, g, cfg: QuadratureConfig | None = None) -> float:
    """Integral of g(theta) over the arc's angular span."""
    cfg = cfg or QuadratureConfig()
    th, h = arc_nodes(arc, cfg)
    if len(th) == 0:
        return 0.0
    return float(np.sum(np.asarray(g(th), dtype=float)) * h)
