"""Planar mission-space geometry.

The world is a polygon with polygonal holes (obstacle interiors).  Agents see a
range-limited, line-of-sight visibility region whose boundary decomposes into
wall pieces, radial shadow segments and range arcs.  The decomposition drives
both the quadrature masks and the boundary terms of the coverage gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Array = np.ndarray

# relative tolerances, scaled by mission width where used
VERTEX_TOL = 1e-9      # degenerate-placement nudge
JUMP_TOL = 1e-7        # minimum radial jump that counts as a shadow segment
PROJECT_MARGIN = 1e-6  # boundary margin left by project_step
ANG_TOL = 1e-12        # duplicate critical angles


def smooth_ramp(t, c: float):
    """Cell-averaged boundary ramp: 0 below -c, 1 above +c, C1 in between.

    This is the exact mean of a one-cell linear ramp over a cell-sized
    interval, so summing it across a grid line reproduces the underlying
    area fraction without per-cell quantization noise.
    """
    t = np.asarray(t, dtype=float)
    x = np.clip(t / c, -1.0, 1.0)
    return np.where(x <= 0.0, 0.5 * (x + 1.0) ** 2,
                    1.0 - 0.5 * (1.0 - x) ** 2)


def smooth_ramp_deriv(t, c: float):
    """Derivative of smooth_ramp with respect to t (a tent of width 2c)."""
    t = np.asarray(t, dtype=float)
    x = t / c
    return np.where(np.abs(x) < 1.0, (1.0 - np.abs(x)) / c, 0.0)


def polygon_area(poly: Array) -> float:
    """Signed shoelace area (positive for counter-clockwise order)."""
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def points_in_polygon(pts: Array, poly: Array) -> Array:
    """Even-odd crossing test for an array of points (boundary unspecified)."""
    x = pts[:, 0][:, None]
    y = pts[:, 1][:, None]
    x1, y1 = poly[:, 0][None, :], poly[:, 1][None, :]
    x2 = np.roll(poly[:, 0], -1)[None, :]
    y2 = np.roll(poly[:, 1], -1)[None, :]
    straddle = (y1 <= y) != (y2 <= y)
    with np.errstate(divide="ignore", invalid="ignore"):
        xint = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
    hits = straddle & (x < xint)
    return hits.sum(axis=1) % 2 == 1


def point_segment_distance(pts: Array, a: Array, b: Array) -> Array:
    """Distances from points (n,2) to segments (m,2)->(m,2), result (n,m)."""
    pts = np.atleast_2d(pts)
    v = b - a                                    # (m,2)
    vv = np.maximum((v * v).sum(axis=1), 1e-300)
    w = pts[:, None, :] - a[None, :, :]          # (n,m,2)
    t = np.clip((w * v[None]).sum(axis=2) / vv[None], 0.0, 1.0)
    proj = a[None] + t[..., None] * v[None]
    return np.linalg.norm(pts[:, None, :] - proj, axis=2)


def _orient(ax, ay, bx, by, cx, cy):
    return (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)


def _proper_cross(p1: Array, p2: Array, q1: Array, q2: Array) -> bool:
    d1 = _orient(q1[0], q1[1], q2[0], q2[1], p1[0], p1[1])
    d2 = _orient(q1[0], q1[1], q2[0], q2[1], p2[0], p2[1])
    d3 = _orient(p1[0], p1[1], p2[0], p2[1], q1[0], q1[1])
    d4 = _orient(p1[0], p1[1], p2[0], p2[1], q2[0], q2[1])
    return d1 * d2 < 0 and d3 * d4 < 0


class MissionSpace:
    """Feasible region: outer polygon minus open obstacle interiors."""

    def __init__(self, outer, obstacles=()):
        outer = np.asarray(outer, dtype=float)
        if outer.ndim != 2 or outer.shape[0] < 3 or outer.shape[1] != 2:
            raise ValueError("outer polygon needs at least 3 planar vertices")
        if polygon_area(outer) < 0:
            outer = outer[::-1].copy()
        obs = []
        for o in obstacles:
            o = np.asarray(o, dtype=float)
            if o.ndim != 2 or o.shape[0] < 3 or o.shape[1] != 2:
                raise ValueError("obstacle needs at least 3 planar vertices")
            if polygon_area(o) < 0:
                o = o[::-1].copy()
            obs.append(o)
        self.outer = outer
        self.obstacles = obs
        self._validate()
        segs = [np.hstack([p, np.roll(p, -1, axis=0)])
                for p in [outer] + obs]
        self.edges = np.vstack(segs)
        self.vertices = np.vstack([outer] + obs) if obs else outer.copy()
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        self.bbox = (float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1]))
        self.width = float(max(hi[0] - lo[0], hi[1] - lo[1]))
        self.bbox_center = 0.5 * (lo + hi)

    def _validate(self):
        polys = [self.outer] + self.obstacles
        for p in polys:
            self._check_simple(p)
        for o in self.obstacles:
            inside = points_in_polygon(o, self.outer)
            on_edge = point_segment_distance(
                o, self.outer, np.roll(self.outer, -1, axis=0)
            ).min(axis=1) < 1e-12
            if not np.all(inside | on_edge):
                raise ValueError("obstacle vertex outside the mission polygon")
            for i in range(len(o)):
                q1, q2 = o[i], o[(i + 1) % len(o)]
                for j in range(len(self.outer)):
                    p1 = self.outer[j]
                    p2 = self.outer[(j + 1) % len(self.outer)]
                    if _proper_cross(p1, p2, q1, q2):
                        raise ValueError("obstacle crosses the mission boundary")

    @staticmethod
    def _check_simple(poly: Array):
        n = len(poly)
        for i in range(n):
            p1, p2 = poly[i], poly[(i + 1) % n]
            for j in range(i + 1, n):
                if j == i or (j + 1) % n == i or (i + 1) % n == j:
                    continue
                q1, q2 = poly[j], poly[(j + 1) % n]
                if _proper_cross(p1, p2, q1, q2):
                    raise ValueError("self-intersecting polygon")

    def feasible_many(self, pts: Array) -> Array:
        """Boundary-inclusive membership test for an (n,2) array."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        btol = 1e-9 * self.width
        a = self.edges[:, :2]
        b = self.edges[:, 2:]
        near_edge = point_segment_distance(pts, a, b).min(axis=1) <= btol
        inside = points_in_polygon(pts, self.outer)
        for o in self.obstacles:
            inside &= ~points_in_polygon(pts, o)
        return inside | near_edge

    def feasible(self, x) -> bool:
        return bool(self.feasible_many(np.asarray(x, dtype=float)[None, :])[0])


class Grid:
    """Uniform cell grid over the mission bounding box.

    Cell weights near the fixed walls are fractional (signed-distance ramp one
    cell wide) so that masked sums behave like area integrals to second order.
    """

    def __init__(self, space: MissionSpace, cell: float | None = None):
        if cell is None:
            cell = space.width / 200.0
        if cell <= 0:
            raise ValueError("cell size must be positive")
        self.space = space
        self.cell = float(cell)
        x0, y0, x1, y1 = space.bbox
        self.origin = np.array([x0, y0])
        self.nx = max(1, int(np.ceil((x1 - x0) / cell - 1e-9)))
        self.ny = max(1, int(np.ceil((y1 - y0) / cell - 1e-9)))
        self.n = self.nx * self.ny
        xs = x0 + (np.arange(self.nx) + 0.5) * cell
        ys = y0 + (np.arange(self.ny) + 0.5) * cell
        gx, gy = np.meshgrid(xs, ys)
        self.centers = np.column_stack([gx.ravel(), gy.ravel()])
        inside = points_in_polygon(self.centers, space.outer)
        for o in space.obstacles:
            inside &= ~points_in_polygon(self.centers, o)
        dist = point_segment_distance(
            self.centers, space.edges[:, :2], space.edges[:, 2:]
        ).min(axis=1)
        signed = np.where(inside, dist, -dist)
        self.wall_weight = smooth_ramp(signed, cell)
        self.wall_slope = smooth_ramp_deriv(signed, cell)
        self.feas = self.wall_weight > 0.0

    def window(self, center: Array, radius: float) -> Array:
        """Flat indices of cells whose centers may fall within radius."""
        lo = np.floor((center - radius - self.cell - self.origin) / self.cell)
        hi = np.ceil((center + radius + self.cell - self.origin) / self.cell)
        i0 = int(max(0, lo[0]))
        i1 = int(min(self.nx, hi[0]))
        j0 = int(max(0, lo[1]))
        j1 = int(min(self.ny, hi[1]))
        if i0 >= i1 or j0 >= j1:
            return np.empty(0, dtype=np.intp)
        cols = np.arange(i0, i1)
        rows = np.arange(j0, j1)
        return (rows[:, None] * self.nx + cols[None, :]).ravel()


@dataclass
class WallEdge:
    """Portion of a wall or obstacle face on the region boundary."""
    p1: Array
    p2: Array


@dataclass
class GammaSegment:
    """Radial shadow segment cast past a blocking vertex.

    v is the anchor vertex, Z the length of the segment beyond it, theta the
    polar angle of the ray through v, and n the unit normal pointing into the
    visible side.
    """
    v: Array
    Z: float
    theta: float
    n: Array


@dataclass
class ThetaArc:
    """Range-limit arc, theta1 < theta2 <= theta1 + 2*pi."""
    theta1: float
    theta2: float


def _ray_hits(s: Array, u: Array, a: Array, b: Array, tmin: float) -> Array:
    """Ray-segment intersection parameters, inf where the ray misses."""
    v = b - a
    w = a - s
    denom = u[0] * v[:, 1] - u[1] * v[:, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (w[:, 0] * v[:, 1] - w[:, 1] * v[:, 0]) / denom
        m = (w[:, 0] * u[1] - w[:, 1] * u[0]) / denom
    ok = (np.abs(denom) > 1e-15) & (m >= -1e-9) & (m <= 1 + 1e-9) & (t > tmin)
    return np.where(ok, t, np.inf)


def _segments_clear(s: Array, targets: Array, edges: Array) -> Array:
    """True where the open segment from s to the target crosses no edge."""
    if len(edges) == 0 or len(targets) == 0:
        return np.ones(len(targets), dtype=bool)
    ax, ay = edges[:, 0][None, :], edges[:, 1][None, :]
    bx, by = edges[:, 2][None, :], edges[:, 3][None, :]
    x = targets[:, 0][:, None]
    y = targets[:, 1][:, None]
    d1 = _orient(s[0], s[1], x, y, ax, ay)
    d2 = _orient(s[0], s[1], x, y, bx, by)
    d3 = _orient(ax, ay, bx, by, s[0], s[1])
    d4 = _orient(ax, ay, bx, by, x, y)
    cross = (d1 * d2 < 0) & (d3 * d4 < 0)
    return ~cross.any(axis=1)


class VisibilityRegion:
    """Star-shaped visible set around a viewpoint with its boundary pieces."""

    def __init__(self, space, grid, s, delta, boundary, blockers,
                 cells, weights, grad_disk, grad_gamma, slope):
        self.space = space
        self.grid = grid
        self.s = s
        self.delta = delta
        self.boundary = boundary
        self.blockers = blockers
        self.cells = cells
        self.weights = weights
        # exact d(weight)/ds per cell, split by the moving boundary feature
        self.grad_disk = grad_disk
        self.grad_gamma = grad_gamma
        # bound on the spatial steepness |grad_x weight| of the moving mask
        # factors, used by the curvature estimate where smoothing bands meet
        self.slope = slope
        w = np.zeros(grid.n)
        w[cells] = weights
        self.w_flat = w
        sl = np.zeros(grid.n)
        sl[cells] = slope
        self.slope_flat = sl

    def area(self) -> float:
        return float(self.weights.sum()) * self.grid.cell ** 2

    def contains(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(self.contains_many(x[None, :])[0])

    def contains_many(self, pts: Array) -> Array:
        """Vectorized range, feasibility and line-of-sight membership test."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        gtol = VERTEX_TOL * self.space.width
        ok = np.linalg.norm(pts - self.s, axis=1) <= self.delta + gtol
        if ok.any():
            ok[ok] = self.space.feasible_many(pts[ok])
        if ok.any():
            ok[ok.copy()] &= _segments_clear(self.s, pts[ok], self.blockers)
        return ok

    def weight_many(self, pts: Array) -> Array:
        """Smoothed membership weight at arbitrary points.

        Evaluates the same ramped formula the cell mask uses, so boundary
        quadrature sees the identical field as the masked cell sums.
        """
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        space = self.space
        c = self.grid.cell
        inside = points_in_polygon(pts, space.outer)
        for o in space.obstacles:
            inside &= ~points_in_polygon(pts, o)
        dist = point_segment_distance(
            pts, space.edges[:, :2], space.edges[:, 2:]).min(axis=1)
        w = smooth_ramp(np.where(inside, dist, -dist), c)
        r = np.linalg.norm(pts - self.s, axis=1)
        w *= smooth_ramp(self.delta - r, c)
        live = w > 0.0
        if not live.any():
            return w
        X = pts[live]
        vis = _segments_clear(self.s, X, self.blockers)
        w_shadow = np.ones(len(X))
        w_invis = np.zeros(len(X))
        for g in self.gamma_segments():
            u = np.array([np.cos(g.theta), np.sin(g.theta)])
            rel = X - g.v
            proj = rel @ u
            sd = rel @ g.n
            band = (proj >= -c) & (proj <= g.Z + c) & (np.abs(sd) < c)
            if not band.any():
                continue
            ramp = smooth_ramp(sd, c)
            w_shadow = np.where(band, w_shadow * ramp, w_shadow)
            w_invis = np.where(band & ~vis, np.maximum(w_invis, ramp), w_invis)
        w[live] *= np.where(vis, w_shadow, w_invis)
        return w

    def gamma_segments(self):
        return [e for e in self.boundary if isinstance(e, GammaSegment)]

    def theta_arcs(self):
        return [e for e in self.boundary if isinstance(e, ThetaArc)]

    def wall_edges(self):
        return [e for e in self.boundary if isinstance(e, WallEdge)]

    def boundary_vertices(self) -> Array:
        pts = []
        for e in self.boundary:
            if isinstance(e, WallEdge):
                pts.extend([e.p1, e.p2])
            elif isinstance(e, GammaSegment):
                u = np.array([np.cos(e.theta), np.sin(e.theta)])
                pts.extend([e.v, e.v + e.Z * u])
            else:
                for th in (e.theta1, e.theta2):
                    pts.append(self.s + self.delta *
                               np.array([np.cos(th), np.sin(th)]))
        return np.array(pts) if pts else np.empty((0, 2))


def _critical_angles(s, delta, edges, vertices, gtol):
    angs = []
    dv = vertices - s
    rv = np.linalg.norm(dv, axis=1)
    keep = (rv <= delta + gtol) & (rv > gtol)
    angs.extend(np.arctan2(dv[keep, 1], dv[keep, 0]))
    # circle crossings of each edge
    for e in edges:
        a, b = e[:2], e[2:]
        u = b - a
        q = a - s
        A = u @ u
        B = 2.0 * (q @ u)
        C = q @ q - delta * delta
        disc = B * B - 4 * A * C
        if disc <= 0 or A < 1e-300:
            continue
        sq = np.sqrt(disc)
        for w in ((-B - sq) / (2 * A), (-B + sq) / (2 * A)):
            if -1e-12 <= w <= 1 + 1e-12:
                p = a + w * u - s
                angs.append(np.arctan2(p[1], p[0]))
    if not angs:
        return np.empty(0)
    angs = np.mod(np.asarray(angs), 2 * np.pi)
    angs = np.sort(angs)
    keep = np.ones(len(angs), dtype=bool)
    keep[1:] = np.diff(angs) > ANG_TOL
    angs = angs[keep]
    if len(angs) > 1 and (angs[0] + 2 * np.pi - angs[-1]) <= ANG_TOL:
        angs = angs[:-1]
    return angs


def _ray_line_radius(s, theta, a, b, fallback):
    u = np.array([np.cos(theta), np.sin(theta)])
    v = b - a
    w = a - s
    denom = u[0] * v[1] - u[1] * v[0]
    if abs(denom) < 1e-14:
        return fallback
    t = (w[0] * v[1] - w[1] * v[0]) / denom
    return t if t > 0 else fallback


def visibility_region(space: MissionSpace, s, delta: float,
                      grid: Grid | None = None) -> VisibilityRegion:
    """Range-and-sight visible set around s, with boundary decomposition."""
    if delta <= 0:
        raise ValueError("sensing radius must be positive")
    if grid is None:
        grid = Grid(space)
    s = np.asarray(s, dtype=float).copy()
    if not space.feasible(s):
        raise ValueError("viewpoint lies outside the feasible space")
    gtol = VERTEX_TOL * space.width
    d2v = np.linalg.norm(space.vertices - s, axis=1)
    if d2v.min() < gtol:
        # nudge off a coincident vertex so the sweep sees a generic viewpoint
        away = space.bbox_center - s
        nv = np.linalg.norm(away)
        away = away / nv if nv > gtol else np.array([1.0, 0.0])
        cand = s + 2.0 * gtol * away
        if space.feasible(cand):
            s = cand

    a_all = space.edges[:, :2]
    b_all = space.edges[:, 2:]
    near = point_segment_distance(s[None, :], a_all, b_all)[0] <= delta + gtol
    blockers = space.edges[near]

    if len(blockers) == 0:
        boundary = [ThetaArc(0.0, 2 * np.pi)]
        mask = _build_mask(space, grid, s, delta, blockers, [])
        return VisibilityRegion(space, grid, s, delta, boundary, blockers,
                                *mask)

    angs = _critical_angles(s, delta, blockers, space.vertices, gtol)
    if len(angs) == 0:
        boundary = [ThetaArc(0.0, 2 * np.pi)]
        mask = _build_mask(space, grid, s, delta, blockers, [])
        return VisibilityRegion(space, grid, s, delta, boundary, blockers,
                                *mask)

    av = blockers[:, :2]
    bv = blockers[:, 2:]
    sectors = []
    for i in range(len(angs)):
        t1 = angs[i]
        t2 = angs[(i + 1) % len(angs)]
        if i == len(angs) - 1:
            t2 += 2 * np.pi
        mid = 0.5 * (t1 + t2)
        u = np.array([np.cos(mid), np.sin(mid)])
        hits = _ray_hits(s, u, av, bv, gtol)
        k = int(np.argmin(hits))
        tmin = hits[k]
        if tmin >= delta - 1e-12 * max(1.0, delta):
            sectors.append({"kind": "arc", "t1": t1, "t2": t2,
                            "r1": delta, "r2": delta, "edge": -1})
        else:
            r1 = min(_ray_line_radius(s, t1, av[k], bv[k], tmin), delta)
            r2 = min(_ray_line_radius(s, t2, av[k], bv[k], tmin), delta)
            sectors.append({"kind": "wall", "t1": t1, "t2": t2,
                            "r1": r1, "r2": r2, "edge": k})

    # merge consecutive sectors carried by the same boundary feature
    runs = []
    for sec in sectors:
        if runs and runs[-1]["kind"] == sec["kind"] and \
                runs[-1]["edge"] == sec["edge"]:
            runs[-1]["t2"] = sec["t2"]
            runs[-1]["r2"] = sec["r2"]
        else:
            runs.append(dict(sec))
    if len(runs) > 1 and runs[0]["kind"] == runs[-1]["kind"] and \
            runs[0]["edge"] == runs[-1]["edge"]:
        first = runs.pop(0)
        runs[-1]["t2"] = first["t2"] + 2 * np.pi
        runs[-1]["r2"] = first["r2"]

    jtol = JUMP_TOL * space.width
    boundary = []
    gammas = []
    for idx, run in enumerate(runs):
        if run["kind"] == "arc":
            boundary.append(ThetaArc(run["t1"], run["t2"]))
        else:
            th1, th2 = run["t1"], run["t2"]
            u1 = np.array([np.cos(th1), np.sin(th1)])
            u2 = np.array([np.cos(th2), np.sin(th2)])
            boundary.append(WallEdge(s + run["r1"] * u1, s + run["r2"] * u2))
        nxt = runs[(idx + 1) % len(runs)]
        r_before = run["r2"]
        r_after = nxt["r1"]
        if abs(r_after - r_before) > jtol:
            theta = np.mod(run["t2"], 2 * np.pi)
            u = np.array([np.cos(theta), np.sin(theta)])
            r_near = min(r_before, r_after)
            v = s + r_near * u
            dvert = np.linalg.norm(space.vertices - v, axis=1)
            jv = int(np.argmin(dvert))
            if dvert[jv] <= 10 * gtol + 1e-9:
                v = space.vertices[jv].copy()
            if r_before > r_after:
                n = np.array([np.sin(theta), -np.cos(theta)])
            else:
                n = np.array([-np.sin(theta), np.cos(theta)])
            g = GammaSegment(v=v, Z=abs(r_after - r_before), theta=theta, n=n)
            gammas.append(g)
            boundary.append(g)

    mask = _build_mask(space, grid, s, delta, blockers, gammas)
    return VisibilityRegion(space, grid, s, delta, boundary, blockers,
                            *mask)


def _build_mask(space, grid, s, delta, blockers, gammas):
    """Fractional cell weights for the visible set, plus their s-gradients.

    The range circle and the shadow segments move with the viewpoint, so both
    get one-cell-wide linear ramps; wall cuts reuse the grid's fixed fractional
    wall weights.  The smoothing makes masked sums differentiable in s.  The
    returned gradients are exact derivatives of the weights, split into the
    range-circle part and one part per shadow segment, which is what the
    boundary terms of the coverage gradient consume.
    """
    empty = (np.empty(0, dtype=np.intp), np.empty(0),
             np.empty((0, 2)), [np.empty((0, 2)) for _ in gammas],
             np.empty(0))
    idx = grid.window(s, delta)
    if len(idx) == 0:
        return empty
    wwall = grid.wall_weight[idx]
    keep = wwall > 0.0
    idx = idx[keep]
    wwall = wwall[keep]
    X = grid.centers[idx]
    c = grid.cell
    r = np.linalg.norm(X - s, axis=1)
    keep = r <= delta + c
    idx, wwall, X, r = idx[keep], wwall[keep], X[keep], r[keep]
    m = len(idx)
    if m == 0:
        return empty
    w_disk = smooth_ramp(delta - r, c)
    # d(delta - r)/ds = (x - s)/r, nonzero only inside the circle band
    dw_disk = (smooth_ramp_deriv(delta - r, c) / np.maximum(r, 1e-300))[
        :, None] * (X - s)

    vis = _segments_clear(s, X, blockers)
    ramps = []      # per segment: ramp factor where banded, else 1
    dramps = []     # per segment: d(ramp)/ds, zero off band
    banded = []
    for g in gammas:
        u = np.array([np.cos(g.theta), np.sin(g.theta)])
        w_vs = g.v - s
        rel = X - g.v
        proj = rel @ u
        sd = rel @ g.n  # positive on the visible side
        band = (proj >= -c) & (proj <= g.Z + c) & (np.abs(sd) < c)
        ramp = np.where(band, smooth_ramp(sd, c), 1.0)
        # the shadow line pivots about the anchor as the viewpoint moves:
        # d(sd)/ds = (rel . rot90(n)) d(theta)/ds with
        # d(theta)/ds = (w_y, -w_x)/|w|^2 for w = v - s
        dth = np.array([w_vs[1], -w_vs[0]]) / max(w_vs @ w_vs, 1e-300)
        lever = rel @ np.array([-g.n[1], g.n[0]])
        dsd = lever[:, None] * dth[None, :]
        dramp = np.where(band, smooth_ramp_deriv(sd, c), 0.0)[:, None] * dsd
        ramps.append(ramp)
        dramps.append(dramp)
        banded.append(band)

    w_shadow = np.ones(m)
    for ramp in ramps:
        w_shadow = w_shadow * ramp
    w_invis = np.zeros(m)
    invis_arg = np.full(m, -1)
    for k, (ramp, band) in enumerate(zip(ramps, banded)):
        take = band & ~vis & (np.where(band, ramp, 0.0) > w_invis)
        w_invis = np.where(take, ramp, w_invis)
        invis_arg = np.where(take, k, invis_arg)
    w_los = np.where(vis, w_shadow, w_invis)

    weights = wwall * w_disk * w_los
    grad_disk = (wwall * w_los)[:, None] * dw_disk
    grad_gamma = []
    for k, (ramp, dramp) in enumerate(zip(ramps, dramps)):
        other = w_shadow / np.where(ramp > 0.0, ramp, 1.0)
        other = np.where(ramp > 0.0, other, 0.0)
        part = np.where(vis, other, np.where(invis_arg == k, 1.0, 0.0))
        grad_gamma.append((wwall * w_disk * part)[:, None] * dramp)

    slope = smooth_ramp_deriv(delta - r, c)
    for band in banded:
        slope = slope + np.where(band, 1.0 / c, 0.0)

    keep = weights > 0.0
    # keep cells where the weight is zero but its gradient is not (deep in a
    # shadow band the ramp vanishes while its derivative does not)
    for gmat in [grad_disk] + grad_gamma:
        keep |= (gmat != 0.0).any(axis=1)
    return (idx[keep], weights[keep], grad_disk[keep],
            [gmat[keep] for gmat in grad_gamma], slope[keep])


def project_step(space: MissionSpace, s, step) -> Array:
    """Clip a motion so the whole travelled sub-segment stays feasible.

    Returns s + t*step for the largest t in [0, 1] that keeps the path inside
    the feasible set, shaved by a small boundary margin.  t may be zero, in
    which case the agent stays pinned where it is.
    """
    s = np.asarray(s, dtype=float)
    step = np.asarray(step, dtype=float)
    L = float(np.linalg.norm(step))
    if L == 0.0:
        return s.copy()
    margin = PROJECT_MARGIN * space.width
    a = space.edges[:, :2]
    b = space.edges[:, 2:]
    v = b - a
    w = a - s
    denom = step[0] * v[:, 1] - step[1] * v[:, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (w[:, 0] * v[:, 1] - w[:, 1] * v[:, 0]) / denom
        m = (w[:, 0] * step[1] - w[:, 1] * step[0]) / denom
    ok = (np.abs(denom) > 1e-15) & (m >= -1e-9) & (m <= 1 + 1e-9) & \
        (t > 1e-12) & (t <= 1.0)
    t_hit = float(t[ok].min()) if ok.any() else np.inf

    if np.isinf(t_hit):
        cand = s + step
        if space.feasible(cand):
            return cand
        t_hit = 1.0
    t_ok = max(0.0, min(1.0, t_hit) - margin / L)
    cand = s + t_ok * step
    for _ in range(60):
        if t_ok <= 0.0 or space.feasible(cand):
            break
        t_ok = max(0.0, t_ok * 0.5 - margin / L)
        cand = s + t_ok * step
    if t_ok <= 0.0 or not space.feasible(cand):
        return s.copy()
    return cand
