"""Sensing probability models and event-density fields."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

Array = np.ndarray


@dataclass
class SensingModel:
    """Distance-decaying detection probability with a hard range cutoff.

    kind 'exponential' gives p0*exp(-lam*D); 'polynomial' gives p0*D**-lam
    capped at p0 (so it is flat wherever D <= 1).  delta is the sensing
    radius beyond which an agent cannot see at all.
    """

    kind: str = "exponential"
    p0: float = 0.9
    lam: float = 6.0
    delta: float = 0.3

    def __post_init__(self):
        if self.kind not in ("exponential", "polynomial"):
            raise ValueError(f"unknown sensing kind {self.kind!r}")
        if not (0.0 < self.p0 <= 1.0):
            raise ValueError("p0 must lie in (0, 1]")
        if self.lam < 0 or self.delta <= 0:
            raise ValueError("lam must be >= 0 and delta > 0")

    def p(self, D):
        D = np.asarray(D, dtype=float)
        if self.kind == "exponential":
            out = self.p0 * np.exp(-self.lam * D)
        else:
            with np.errstate(divide="ignore"):
                out = np.where(D <= 1.0, self.p0,
                               self.p0 * D ** (-self.lam))
        return out if out.shape else float(out)

    def dp_dD(self, D):
        D = np.asarray(D, dtype=float)
        if self.kind == "exponential":
            out = -self.lam * self.p0 * np.exp(-self.lam * D)
        else:
            # the cap makes p flat up to D = 1
            with np.errstate(divide="ignore"):
                out = np.where(D <= 1.0, 0.0,
                               -self.lam * self.p0 * D ** (-self.lam - 1.0))
        return out if out.shape else float(out)


@dataclass
class DensityField:
    """Event density R(x): uniform value or a bilinear rectangular raster."""

    kind: str = "uniform"
    value: float = 1.0
    array: Array | None = None
    extent: tuple[float, float, float, float] | None = None

    def __post_init__(self):
        if self.kind not in ("uniform", "grid"):
            raise ValueError(f"unknown density kind {self.kind!r}")
        if self.kind == "grid":
            if self.array is None or self.extent is None:
                raise ValueError("grid density needs array and extent")
            self.array = np.asarray(self.array, dtype=float)
            if self.array.ndim != 2:
                raise ValueError("density raster must be 2-D")
            if np.any(self.array < 0):
                raise ValueError("density must be non-negative")
        elif self.value < 0:
            raise ValueError("density must be non-negative")

    def R(self, pts: Array) -> Array:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        if self.kind == "uniform":
            return np.full(len(pts), self.value)
        x0, y0, x1, y1 = self.extent
        ny, nx = self.array.shape
        # cell-centred bilinear sample, zero outside the extent
        fx = (pts[:, 0] - x0) / (x1 - x0) * nx - 0.5
        fy = (pts[:, 1] - y0) / (y1 - y0) * ny - 0.5
        inside = (pts[:, 0] >= x0) & (pts[:, 0] <= x1) & \
                 (pts[:, 1] >= y0) & (pts[:, 1] <= y1)
        fx = np.clip(fx, 0.0, nx - 1.0)
        fy = np.clip(fy, 0.0, ny - 1.0)
        ix = np.clip(np.floor(fx).astype(int), 0, nx - 2) if nx > 1 else \
            np.zeros(len(pts), dtype=int)
        iy = np.clip(np.floor(fy).astype(int), 0, ny - 2) if ny > 1 else \
            np.zeros(len(pts), dtype=int)
        tx = fx - ix if nx > 1 else np.zeros(len(pts))
        ty = fy - iy if ny > 1 else np.zeros(len(pts))
        ix1 = np.minimum(ix + 1, nx - 1)
        iy1 = np.minimum(iy + 1, ny - 1)
        v = (self.array[iy, ix] * (1 - tx) * (1 - ty)
             + self.array[iy, ix1] * tx * (1 - ty)
             + self.array[iy1, ix] * (1 - tx) * ty
             + self.array[iy1, ix1] * tx * ty)
        return np.where(inside, v, 0.0)


def detection_prob(model: SensingModel, region, x) -> float:
    """p-hat: detection probability of a point, zero outside the visible set."""
    x = np.asarray(x, dtype=float)
    if not region.contains(x):
        return 0.0
    return float(model.p(np.linalg.norm(x - region.s)))


def joint_detection(pairs, x) -> float:
    """1 - prod(1 - p_hat) over (model, region) pairs."""
    miss = 1.0
    for model, region in pairs:
        miss *= 1.0 - detection_prob(model, region, x)
    return 1.0 - miss


def phi(neighbor_pairs, x) -> float:
    """Escape probability from the listed neighbors at a point."""
    miss = 1.0
    for model, region in neighbor_pairs:
        miss *= 1.0 - detection_prob(model, region, x)
    return miss
