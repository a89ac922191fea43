"""Boosted gradients that steer agents off local optima.

Each family reshapes the gradient integrands (or adds point masses) so the
boosted direction stays informative where the plain gradient has flattened
out: scaling the interior pull by missed coverage, repelling from covered
neighbors, pulling along shadow segments into occluded pockets, or pushing
across the range boundary toward poorly covered arcs.  Gains default to the
values used in the simulation studies.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field as dfield

import numpy as np

from .field import DensityField
from .geometry import Grid
from .gradient import band_flux, interior_term
from .objective import AgentSnapshot, miss_product
from .quadrature import QuadratureConfig, arc_nodes

Array = np.ndarray

log = logging.getLogger(__name__)

FAMILIES = ("Phi", "P", "Neighbor", "V", "Arc", "RandomPerturb",
            "GenericNeighborCombo")

# default (kappa, gamma) per family
_GAINS = {
    "Phi": (4.0, 2.0),
    "P": (1.0, 1.0),
    "Neighbor": (10000.0, 1.0),
    "V": (1.0, 1.0),            # unused; V carries its own four gains
    "Arc": (1.0, 1.0),
    "RandomPerturb": (5.0, 1.0),
    "GenericNeighborCombo": (1.0, 1.0),
}


class BoostingConfigError(ValueError):
    """Raised for inconsistent boosting settings."""


@dataclass
class BoostingConfig:
    """Family selection and gains for the boosted gradient."""

    family: str = "Phi"
    kappa: float | None = None
    gamma: float | None = None
    # V family gains
    kappa1: float = 10.0
    kappa2: float = 5.0
    gamma1: float = 1.0
    gamma2: float = 1.0
    # Arc family history depth and the dwell count consumed by the scheme
    K: int = 50
    T_D: int = 5
    rng_seed: int = 0
    # joint detection clamp for the P family (P can be exactly zero at
    # uncovered points, which the negative power cannot take)
    p_floor: float = 1e-3
    # generic two-term combination d_hat = alpha*d_i + eta*d_ji
    alpha: float = 1.0
    eta: float = -1.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise BoostingConfigError(f"unknown family {self.family!r}")
        dk, dg = _GAINS[self.family]
        if self.kappa is None:
            self.kappa = dk
        if self.gamma is None:
            self.gamma = dg
        for name in ("kappa", "gamma", "kappa1", "kappa2", "gamma1",
                     "gamma2"):
            if getattr(self, name) <= 0:
                raise BoostingConfigError(f"{name} must be positive")
        if self.K < 1:
            raise BoostingConfigError("history depth K must be >= 1")
        if self.T_D < 0:
            raise BoostingConfigError("dwell count T_D must be >= 0")
        if not 0 < self.p_floor < 1:
            raise BoostingConfigError("p_floor must lie in (0, 1)")

    def force_constant(self) -> float:
        """Constant arc force F_c = kappa * e^gamma."""
        return self.kappa * float(np.exp(self.gamma))


@dataclass
class ArcClassification:
    """Partition of the range arcs by their mean joint coverage."""

    scores: Array
    repulsive: list[int] = dfield(default_factory=list)
    attractive: list[int] = dfield(default_factory=list)
    neutral: list[int] = dfield(default_factory=list)
    fallback: bool = False


def _arc_contains(arc, ang: float) -> bool:
    span = arc.theta2 - arc.theta1
    return float(np.mod(ang - arc.theta1, 2 * np.pi)) <= span


def _history_direction(snap: AgentSnapshot, history) -> Array | None:
    """Unit vector from the agent toward its oldest recorded position."""
    if history is None or len(history) == 0:
        return None
    old = np.asarray(history[0], dtype=float)
    rel = old - snap.s
    n = np.linalg.norm(rel)
    if n < 1e-12:
        return None
    return rel / n


def classify_arcs(snap: AgentSnapshot, closed_snaps, history=None,
                  quad: QuadratureConfig | None = None) -> ArcClassification:
    """Score each range arc by mean joint coverage and pick the extremes.

    The best covered arc becomes repulsive, the worst covered attractive,
    the rest neutral.  With indistinguishable scores the tie is broken by a
    recent past position: the arc the agent came from is repulsive and the
    most opposite arc attractive, so the boost carries it onward instead of
    back.
    """
    quad = quad or QuadratureConfig()
    arcs = snap.region.theta_arcs()
    if not arcs:
        raise BoostingConfigError("arc boosting needs at least one range arc")
    scores = np.zeros(len(arcs))
    for k, arc in enumerate(arcs):
        th, _ = arc_nodes(arc, quad)
        dirs = np.column_stack([np.cos(th), np.sin(th)])
        pts = snap.s[None, :] + snap.model.delta * dirs
        miss = np.ones(len(pts))
        for other in closed_snaps:
            miss *= 1.0 - other.phat_at_points(pts)
        scores[k] = float(np.mean(1.0 - miss))

    cls = ArcClassification(scores=scores)
    hist_dir = _history_direction(snap, history)
    hist_ang = float(np.arctan2(hist_dir[1], hist_dir[0])) \
        if hist_dir is not None else 0.0

    if len(arcs) == 1:
        if hist_dir is not None and _arc_contains(arcs[0], hist_ang):
            cls.repulsive = [0]
        else:
            cls.attractive = [0]
        cls.fallback = True
        return cls

    if scores.max() - scores.min() > 1e-12:
        rep = int(np.argmax(scores))
        att = int(np.argmin(scores))
        cls.repulsive = [rep]
        cls.attractive = [att]
        cls.neutral = [k for k in range(len(arcs)) if k not in (rep, att)]
        return cls

    # all-equal scores: fall back to the movement history
    cls.fallback = True
    rep = next((k for k, a in enumerate(arcs) if _arc_contains(a, hist_ang)),
               0)
    mids = []
    for arc in arcs:
        mid = 0.5 * (arc.theta1 + arc.theta2)
        mids.append([np.cos(mid), np.sin(mid)])
    mids = np.asarray(mids)
    ref = np.array([np.cos(hist_ang), np.sin(hist_ang)])
    align = mids @ ref
    align[rep] = np.inf  # exclude the repulsive arc from the minimum
    att = int(np.argmin(align))
    cls.repulsive = [rep]
    cls.attractive = [att]
    cls.neutral = [k for k in range(len(arcs)) if k not in (rep, att)]
    return cls


def _alpha_interior(grid: Grid, R_flat: Array, snap: AgentSnapshot,
                    neighbor_snaps, alpha: Array) -> Array:
    return interior_term(grid, R_flat, snap, neighbor_snaps, alpha=alpha)


def boosted_gradient(grid: Grid, R_flat: Array, density: DensityField,
                     snap: AgentSnapshot, neighbor_snaps, d: Array,
                     config: BoostingConfig, history=None,
                     rng: np.random.Generator | None = None,
                     quad: QuadratureConfig | None = None,
                     neighbor_cross: dict[int, Array] | None = None) -> Array:
    """Boosted direction d-hat for one agent from the round snapshot.

    d is the agent's plain gradient; history a sequence of past positions
    (oldest first) for the arc family; neighbor_cross maps a neighbor id to
    d_ji (the sensitivity of this agent's objective to that neighbor's
    position) for the generic two-term family.
    """
    quad = quad or QuadratureConfig()
    fam = config.family
    idx = snap.region.cells

    if fam == "RandomPerturb":
        if rng is None:
            rng = np.random.default_rng(config.rng_seed)
        zeta = rng.uniform(-1.0, 1.0, size=2)
        return d + config.kappa * zeta

    if fam == "Neighbor":
        out = d.copy()
        for other in neighbor_snaps:
            if not snap.region.contains(other.s):
                continue
            rel = snap.s - other.s
            dist = float(np.linalg.norm(rel))
            if dist < 1e-12:
                continue
            out = out + config.kappa * rel / dist ** (config.gamma + 1.0)
        return out

    if fam == "GenericNeighborCombo":
        out = config.alpha * d
        if neighbor_snaps and neighbor_cross:
            dists = {o.id: float(np.linalg.norm(o.s - snap.s))
                     for o in neighbor_snaps if o.id in neighbor_cross}
            if dists:
                j = min(dists, key=lambda a: (dists[a], a))
                out = out + config.eta * neighbor_cross[j]
        return out

    if fam == "Phi":
        phi = miss_product(idx, neighbor_snaps)
        alpha = config.kappa * phi ** config.gamma
        return (_alpha_interior(grid, R_flat, snap, neighbor_snaps, alpha)
                + band_flux(grid, R_flat, snap, neighbor_snaps))

    if fam == "P":
        miss = (1.0 - snap.phat) * miss_product(idx, neighbor_snaps)
        P = np.maximum(1.0 - miss, config.p_floor)
        alpha = config.kappa * P ** (-config.gamma)
        return (_alpha_interior(grid, R_flat, snap, neighbor_snaps, alpha)
                + band_flux(grid, R_flat, snap, neighbor_snaps))

    if fam == "V":
        phi = miss_product(idx, neighbor_snaps)
        alpha = config.kappa1 * phi ** config.gamma1 * (1.0 - snap.p)
        out = (_alpha_interior(grid, R_flat, snap, neighbor_snaps, alpha)
               + band_flux(grid, R_flat, snap, neighbor_snaps))
        for seg in snap.region.gamma_segments():
            dist = float(np.linalg.norm(seg.v - snap.s))
            if dist < 1e-12:
                continue
            far = dist + seg.Z  # the segment endpoint lies on the ray from s
            out = out + seg.n * (config.kappa2 * far ** config.gamma2
                                 * seg.Z / dist)
        return out

    if fam == "Arc":
        closed = [snap] + list(neighbor_snaps)
        cls = classify_arcs(snap, closed, history, quad)
        arcs = snap.region.theta_arcs()
        Fc = config.force_constant()
        extra = np.zeros(len(idx))
        if len(idx):
            X = grid.centers[idx]
            ang = np.arctan2(X[:, 1] - snap.s[1], X[:, 0] - snap.s[0])
            for k in cls.repulsive + cls.attractive:
                arc = arcs[k]
                span = arc.theta2 - arc.theta1
                inside = np.mod(ang - arc.theta1, 2 * np.pi) <= span
                sign = -1.0 if k in cls.repulsive else 1.0
                extra = np.where(inside, extra + sign * Fc, extra)
        return (interior_term(grid, R_flat, snap, neighbor_snaps)
                + band_flux(grid, R_flat, snap, neighbor_snaps,
                            disk_extra=extra))

    raise BoostingConfigError(f"unknown family {config.family!r}")


def magnitude_guard(dhat: Array, past_gradient_norms) -> float | None:
    """Warn when the boosted magnitude leaves the useful band.

    Compares |d-hat| against the median of recent plain-gradient norms; far
    outside [0.1, 10] the boost either barely moves the agent or overshoots
    the curvature bound's trust region.  Returns the ratio (None when there
    is no history to compare against).
    """
    norms = [n for n in past_gradient_norms if n > 0.0]
    if not norms:
        return None
    med = float(np.median(norms))
    ratio = float(np.linalg.norm(dhat)) / med
    if not 0.1 <= ratio <= 10.0:
        log.warning("boosted gradient magnitude ratio %.3g outside [0.1, 10]",
                    ratio)
    return ratio
