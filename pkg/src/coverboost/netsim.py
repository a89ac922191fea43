"""Synchronous-round multi-agent simulation.

Each round rebuilds the overlap graph, hands every agent an immutable
snapshot of its neighborhood, lets the mode machines pick directions, sizes
the steps, projects the moves, and logs one trace row per agent.  Identical
config and seed give byte-identical traces.
"""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field as dc_field

import numpy as np

from .boosting import BoostingConfig, boosted_gradient, magnitude_guard
from .field import DensityField, SensingModel
from .geometry import Grid, MissionSpace, project_step, visibility_region
from .gradient import GradientBundle, build_bundle
from .objective import AgentSnapshot, density_on_grid, global_H, \
    neighborhood_Hbar
from .quadrature import QuadratureConfig
from .scheme import FOLLOW_BOOSTED, FOLLOW_NORMAL, HOLD, AgentSchemeState, \
    CbsController, dbs_tick, equilibrium_thresholds, finish_all, \
    global_termination, on_neighborhood_change
from .stepping import FALLBACK_EXIT_ALIGNMENT, QLedger, StepPlan, \
    fixed_step, optimal_step, projection_condition_check, q_round

TRACE_COLUMNS = ("k", "agent", "mode", "x", "y", "d_norm", "dhat_norm",
                 "beta", "delta_tilde", "Q", "T_i", "H", "Hbar_i")

SCHEMES = ("none", "dbs", "cbs")


@dataclass
class AgentInit:
    """Initial description of one agent; position None means default layout."""

    id: int
    sensing: SensingModel
    position: np.ndarray | None = None


@dataclass
class AgentRuntime:
    """Mutable per-agent state carried across rounds."""

    id: int
    position: np.ndarray
    sensing: SensingModel
    boosting: BoostingConfig
    rng: np.random.Generator
    scheme: AgentSchemeState | None = None
    # newest first; oldest surviving entry is the look-back anchor
    history: deque = dc_field(default_factory=deque)
    past_d_norms: list = dc_field(default_factory=list)
    # latched when the step sizing hits its orthogonal pathological case
    fallback_on: bool = False


@dataclass
class SimConfig:
    space: MissionSpace
    density: DensityField
    agents: list[AgentInit]
    cell: float | None = None
    scheme: str = "none"
    boosting: BoostingConfig | None = None
    step_mode: str = "variable"          # variable | fixed
    fallback: str = "weight_zeroing"
    budget: int = 2000
    seed: int = 0
    eps1: float | None = None
    eps2: float | None = None
    record_trace: bool = True
    quad: QuadratureConfig | None = None

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")
        if self.step_mode not in ("variable", "fixed"):
            raise ValueError("step_mode must be 'variable' or 'fixed'")
        ids = [a.id for a in self.agents]
        if len(set(ids)) != len(ids):
            raise ValueError("agent ids must be unique")
        if not ids:
            raise ValueError("need at least one agent")
        if self.budget < 1:
            raise ValueError("budget must be positive")


@dataclass
class RunResult:
    positions: dict[int, np.ndarray]
    H: float
    rounds: int
    converged: bool
    trace: list[dict]
    events: list[dict]
    scheme_states: dict[int, AgentSchemeState] | None
    eps1: float
    eps2: float
    H_history: list[float]
    cbs: CbsController | None = None

    def summary(self) -> dict:
        out = {"H": self.H, "rounds": self.rounds,
               "converged": self.converged,
               "eps1": self.eps1, "eps2": self.eps2}
        if self.scheme_states is not None:
            out["B_IT"] = {a: st.B_IT
                           for a, st in sorted(self.scheme_states.items())}
        finite_T = [r["T_i"] for r in self.trace
                    if r["T_i"] is not None and r["T_i"] >= 1]
        out["max_T_i"] = max(finite_T) if finite_T else None
        return out


def default_positions(space: MissionSpace, ids, seed: int) -> dict:
    """Cluster near the top-left corner with small deterministic jitter."""
    xmin, ymin, xmax, ymax = space.bbox
    w, h = xmax - xmin, ymax - ymin
    base = np.array([xmin + 0.1 * w, ymax - 0.1 * h])
    out = {}
    for aid in sorted(ids):
        rng = np.random.default_rng([seed, 7, aid])
        for _ in range(500):
            cand = base + rng.uniform(-0.07, 0.07, 2) * np.array([w, h])
            if space.feasible(cand):
                out[aid] = cand
                break
        else:
            raise ValueError(
                "could not place an agent near the top-left corner; "
                "supply explicit positions for this geometry")
    return out


def neighbor_graph(snaps: dict[int, AgentSnapshot]) -> dict[int, list[int]]:
    """Edge iff the two visibility masks share at least one grid cell."""
    ids = sorted(snaps)
    nb = {i: [] for i in ids}
    for a in range(len(ids)):
        i = ids[a]
        ci = snaps[i].region.cells
        for b in range(a + 1, len(ids)):
            j = ids[b]
            if np.intersect1d(ci, snaps[j].region.cells,
                              assume_unique=True).size:
                nb[i].append(j)
                nb[j].append(i)
    return nb


def _closed(nb: dict[int, list[int]], i: int) -> list[int]:
    return sorted(nb.get(i, []) + [i])


def _fixed_plan(g: np.ndarray, cross: dict, K1s: dict, mode: str) -> StepPlan:
    beta = fixed_step(K1s)
    gsq = float(g @ g)
    num = float(sum(g @ v for v in cross.values()))
    dt = beta * num - 0.5 * beta * beta * gsq * float(sum(K1s.values()))
    return StepPlan(beta=beta, delta_tilde=dt, mode_used=mode)


def run(config: SimConfig) -> RunResult:
    space, density = config.space, config.density
    cell = config.cell if config.cell is not None else space.width / 100.0
    grid = Grid(space, cell)
    R_flat = density_on_grid(density, grid)
    quad = config.quad or QuadratureConfig()
    boost = config.boosting or BoostingConfig()

    ids = sorted(a.id for a in config.agents)
    defaults = None
    if any(a.position is None for a in config.agents):
        defaults = default_positions(space, ids, config.seed)
    runtimes: dict[int, AgentRuntime] = {}
    for a in sorted(config.agents, key=lambda a: a.id):
        pos = defaults[a.id] if a.position is None \
            else np.asarray(a.position, dtype=float).copy()
        if not space.feasible(pos):
            raise ValueError(f"agent {a.id} starts outside the feasible set")
        rt = AgentRuntime(id=a.id, position=pos, sensing=a.sensing,
                          boosting=boost,
                          rng=np.random.default_rng([config.seed, a.id]),
                          history=deque(maxlen=boost.K + 1))
        rt.history.appendleft(pos.copy())
        runtimes[a.id] = rt

    states: dict[int, AgentSchemeState] | None = None
    cbs: CbsController | None = None
    eps1 = config.eps1
    eps2 = config.eps2
    ledger = QLedger()
    trace: list[dict] = []
    events: list[dict] = []
    H_hist: list[float] = []
    converged = False
    prev_snaps: dict[int, AgentSnapshot] | None = None
    prev_nb: dict[int, list[int]] | None = None
    k = 0

    for k in range(config.budget):
        snaps = {i: AgentSnapshot(i, runtimes[i].sensing,
                                  visibility_region(space,
                                                    runtimes[i].position,
                                                    runtimes[i].sensing.delta,
                                                    grid))
                 for i in ids}
        nb = neighbor_graph(snaps)

        # react to membership changes before anything else this round
        if config.scheme == "dbs" and prev_nb is not None:
            for i in ids:
                if nb[i] != prev_nb[i]:
                    closed_now = [snaps[j] for j in _closed(nb, i)]
                    closed_prev = [prev_snaps[j] for j in _closed(nb, i)]
                    on_neighborhood_change(
                        runtimes[i].scheme,
                        neighborhood_Hbar(grid, R_flat, closed_prev),
                        lambda cs=closed_now: neighborhood_Hbar(grid, R_flat,
                                                                cs),
                        events, k, i)

        bundles = {i: build_bundle(grid, R_flat, density, snaps, nb, i, quad)
                   for i in ids}
        d_norms = {i: float(np.linalg.norm(bundles[i].d)) for i in ids}
        K1s = {i: bundles[i].K1 for i in ids}

        if eps1 is None:
            eps1 = equilibrium_thresholds(d_norms.values())
        if eps2 is None:
            eps2 = eps1
        if config.scheme == "dbs" and states is None:
            states = {i: AgentSchemeState(eps1=eps1, eps2=eps2,
                                          T_D=boost.T_D) for i in ids}
            for i in ids:
                runtimes[i].scheme = states[i]
        if config.scheme == "cbs" and cbs is None:
            cbs = CbsController(eps1=eps1, eps2=eps2)

        def boosted_dir(i: int) -> np.ndarray:
            rt = runtimes[i]
            open_nb = [snaps[j] for j in nb[i]]
            ncross = {j: bundles[j].cross[i] for j in nb[i]
                      if i in bundles[j].cross}
            dhat = boosted_gradient(grid, R_flat, density, snaps[i], open_nb,
                                    bundles[i].d, rt.boosting,
                                    history=tuple(reversed(rt.history)),
                                    rng=rt.rng, quad=quad,
                                    neighbor_cross=ncross)
            magnitude_guard(dhat, rt.past_d_norms[-50:])
            return dhat

        dhats: dict[int, np.ndarray] = {}
        directives: dict[int, str] = {}
        if config.scheme == "none":
            directives = {i: FOLLOW_NORMAL for i in ids}
        elif config.scheme == "dbs":
            for i in ids:
                if states[i].mode == "BM":
                    dhats[i] = boosted_dir(i)
            for i in ids:
                closed_now = [snaps[j] for j in _closed(nb, i)]
                dn = d_norms[i]
                dh = float(np.linalg.norm(dhats[i])) if i in dhats else None
                directives[i] = dbs_tick(
                    states[i], dn, dh,
                    lambda cs=closed_now: neighborhood_Hbar(grid, R_flat, cs),
                    events, k, i)
            if global_termination(states, d_norms):
                finish_all(states)
                directives = {i: HOLD for i in ids}
                converged = True
        else:  # cbs
            if cbs.phase == "B":
                for i in ids:
                    dhats[i] = boosted_dir(i)
            H_now = global_H(grid, R_flat, list(snaps.values()))
            dh_norms = {i: float(np.linalg.norm(dhats[i]))
                        for i in dhats} if dhats else None
            verdict = cbs.tick(d_norms, dh_norms, H_now,
                               {i: runtimes[i].position for i in ids})
            directives = {i: verdict for i in ids}
            if verdict == HOLD:
                converged = True

        for i in ids:
            if directives[i] == FOLLOW_BOOSTED and i not in dhats:
                dhats[i] = boosted_dir(i)

        plans: dict[int, StepPlan] = {}
        gvecs: dict[int, np.ndarray] = {}
        for i in ids:
            direc = directives[i]
            if direc == HOLD:
                gvecs[i] = np.zeros(2)
                plans[i] = StepPlan(beta=0.0, delta_tilde=0.0)
                continue
            mode = "boosted" if direc == FOLLOW_BOOSTED else "normal"
            g = dhats[i] if direc == FOLLOW_BOOSTED else bundles[i].d
            gvecs[i] = g
            nb_K1 = {j: K1s[j] for j in _closed(nb, i)}
            if config.step_mode == "variable":
                rt = runtimes[i]
                plans[i] = optimal_step(g, bundles[i].cross, nb_K1,
                                        mode=mode, fallback=config.fallback,
                                        force_fallback=rt.fallback_on)
                if rt.fallback_on:
                    rt.fallback_on = \
                        plans[i].alignment <= FALLBACK_EXIT_ALIGNMENT
                else:
                    rt.fallback_on = plans[i].fallback_used != "none"
            else:
                plans[i] = _fixed_plan(g, bundles[i].cross, nb_K1, mode)

        new_pos: dict[int, np.ndarray] = {}
        for i in ids:
            step = plans[i].beta * gvecs[i]
            moved = project_step(space, runtimes[i].position, step)
            if np.linalg.norm(moved - runtimes[i].position - step) \
                    > 1e-12 * max(1.0, float(np.linalg.norm(step))):
                open_sum = sum((bundles[i].cross[j] for j in nb[i]
                                if j in bundles[i].cross),
                               start=np.zeros(2))
                ok = projection_condition_check(
                    plans[i].mode_used, bundles[i].d, dhats.get(i), open_sum)
                events.append({"kind": "projection_clip", "k": k, "agent": i,
                               "condition_ok": bool(ok)})
            new_pos[i] = moved

        betas = {i: plans[i].beta for i in ids}
        crosses = {i: bundles[i].cross for i in ids}
        qs = {i: q_round(i, nb, betas, gvecs, crosses, K1s) for i in ids}
        for i in ids:
            ledger.push(i, qs[i])

        H_val = global_H(grid, R_flat, list(snaps.values()))
        H_hist.append(H_val)
        if config.record_trace:
            for i in ids:
                if config.scheme == "dbs":
                    mode_lbl = states[i].mode
                elif config.scheme == "cbs":
                    mode_lbl = cbs.phase
                else:
                    mode_lbl = "GA"
                closed_now = [snaps[j] for j in _closed(nb, i)]
                trace.append({
                    "k": k, "agent": i, "mode": mode_lbl,
                    "x": float(runtimes[i].position[0]),
                    "y": float(runtimes[i].position[1]),
                    "d_norm": d_norms[i],
                    "dhat_norm": float(np.linalg.norm(dhats[i]))
                    if i in dhats else None,
                    "beta": plans[i].beta,
                    "delta_tilde": plans[i].delta_tilde,
                    "Q": qs[i], "T_i": ledger.window_length(i),
                    "H": H_val,
                    "Hbar_i": neighborhood_Hbar(grid, R_flat, closed_now),
                })

        if config.scheme == "none" and all(d_norms[i] <= eps1 for i in ids):
            converged = True
        if converged:
            break

        for i in ids:
            runtimes[i].position = new_pos[i]
            runtimes[i].history.appendleft(new_pos[i].copy())
            runtimes[i].past_d_norms.append(d_norms[i])
        prev_snaps, prev_nb = snaps, nb

    if config.scheme == "cbs" and cbs is not None and cbs.best_positions:
        if converged:
            for i in ids:
                runtimes[i].position = cbs.best_positions[i].copy()

    final_snaps = {i: AgentSnapshot(i, runtimes[i].sensing,
                                    visibility_region(space,
                                                      runtimes[i].position,
                                                      runtimes[i].sensing.delta,
                                                      grid))
                   for i in ids}
    H_final = global_H(grid, R_flat, list(final_snaps.values()))
    return RunResult(positions={i: runtimes[i].position.copy() for i in ids},
                     H=H_final, rounds=k + 1, converged=converged,
                     trace=trace, events=events, scheme_states=states,
                     eps1=float(eps1 if eps1 is not None else 0.0),
                     eps2=float(eps2 if eps2 is not None else 0.0),
                     H_history=H_hist, cbs=cbs)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return format(v, ".12g")
    return str(v)


def write_trace_csv(path, trace) -> None:
    """Fixed float formatting so identical runs give identical bytes."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for row in trace:
            w.writerow([_fmt(row[c]) for c in TRACE_COLUMNS])
