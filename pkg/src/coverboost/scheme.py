"""Mode state machines deciding when agents follow boosted gradients.

The distributed scheme runs one small state machine per agent: converge
normally, measure the neighborhood coverage, boost until the boosted
direction dies out, re-converge, and keep the loop going while the measured
coverage keeps improving.  A delay stage absorbs the transients that
neighbors inject when they boost.  The centralized variant synchronizes all
agents through the same phases and restores the best visited configuration
when boosting stops paying.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MODES = ("NM0", "BM", "NM1", "NM2", "NM3", "END")

# directives an agent can receive for the current round
FOLLOW_NORMAL = "follow_normal"
FOLLOW_BOOSTED = "follow_boosted"
HOLD = "hold"

# legal transitions, audited by tests against recorded traces
LEGAL_EDGES = {
    ("NM0", "BM"), ("NM0", "NM3"),
    ("BM", "NM1"), ("BM", "BM"),
    ("NM1", "BM"), ("NM1", "NM2"),
    ("NM2", "BM"), ("NM2", "NM3"),
    ("NM3", "END"),
}


@dataclass
class AgentSchemeState:
    """Bookkeeping of one agent's boosting loop."""

    eps1: float
    eps2: float
    T_D: int = 5
    mode: str = "NM0"
    H1: float = 0.0
    H2: float = 0.0
    B_IT: int = 0
    dwell: int = 0


def _boost_entry(state: AgentSchemeState, events, k, aid) -> None:
    if events is not None:
        events.append({"kind": "boost_iter", "k": k, "agent": aid,
                       "H1_old": state.H1, "H1_new": state.H2,
                       "B_IT": state.B_IT + 1})
    state.H1 = state.H2
    state.B_IT += 1
    state.mode = "BM"


def dbs_tick(state: AgentSchemeState, d_norm: float, dhat_norm: float | None,
             hbar_fn, events=None, k: int = 0, aid: int = 0) -> str:
    """Advance one agent's state machine by one round, returning a directive.

    hbar_fn is called only at equilibrium instants and must return the
    neighborhood coverage at the current positions.  dhat_norm may be None
    outside boosting mode.
    """
    m = state.mode
    if m == "END":
        return HOLD

    if m == "NM0":
        if d_norm > state.eps1:
            return FOLLOW_NORMAL
        state.H2 = float(hbar_fn())
        if state.H1 < state.H2:
            _boost_entry(state, events, k, aid)
            return FOLLOW_BOOSTED
        state.mode = "NM3"
        return FOLLOW_NORMAL

    if m == "BM":
        if dhat_norm is None or dhat_norm > state.eps2:
            return FOLLOW_BOOSTED
        state.mode = "NM1"
        return FOLLOW_NORMAL

    if m == "NM1":
        if d_norm > state.eps1:
            return FOLLOW_NORMAL
        state.H2 = float(hbar_fn())
        if state.H1 < state.H2:
            _boost_entry(state, events, k, aid)
            return FOLLOW_BOOSTED
        state.mode = "NM2"
        state.dwell = 0
        return FOLLOW_NORMAL

    if m == "NM2":
        if d_norm > 10.0 * state.eps1:
            state.dwell = 0
            return FOLLOW_NORMAL
        if d_norm > state.eps1:
            # mild reactivation: hold the count rather than reset it
            return FOLLOW_NORMAL
        if state.dwell < state.T_D:
            state.dwell += 1
            return FOLLOW_NORMAL
        state.H2 = float(hbar_fn())
        if state.H1 < state.H2:
            _boost_entry(state, events, k, aid)
            return FOLLOW_BOOSTED
        state.mode = "NM3"
        return FOLLOW_NORMAL

    if m == "NM3":
        return FOLLOW_NORMAL

    raise ValueError(f"unknown mode {m!r}")


def on_neighborhood_change(state: AgentSchemeState, hbar_prev: float,
                           hbar_now_fn, events=None, k: int = 0,
                           aid: int = 0) -> None:
    """React to a changed neighbor set.

    hbar_prev is the neighborhood coverage of the new member set evaluated
    at the previous round's positions; hbar_now_fn measures it at the
    current ones.  The reference value is re-based so the improvement test
    compares like with like; no mode is reset, only BM can drop to NM1.
    """
    state.H2 = float(hbar_prev)
    if state.mode == "BM":
        improved = state.H1 < state.H2
        old = state.H1
        state.H1 = float(hbar_now_fn())
        if not improved:
            state.mode = "NM1"
        if events is not None:
            events.append({"kind": "neighborhood_change", "k": k,
                           "agent": aid, "H1_old": old, "H1_new": state.H1,
                           "mode": state.mode})
    elif state.mode in ("NM1", "NM2"):
        old = state.H1
        state.H1 = float(hbar_now_fn())
        if events is not None:
            events.append({"kind": "neighborhood_change", "k": k,
                           "agent": aid, "H1_old": old, "H1_new": state.H1,
                           "mode": state.mode})
    # NM0 / NM3 / END keep their stored values apart from the H2 re-base


def global_termination(states: dict[int, AgentSchemeState],
                       d_norms: dict[int, float]) -> bool:
    """All agents settled in the final normal mode at equilibrium."""
    for aid, st in states.items():
        if st.mode != "NM3" or d_norms[aid] > st.eps1:
            return False
    return True


def finish_all(states: dict[int, AgentSchemeState]) -> None:
    for st in states.values():
        st.mode = "END"


@dataclass
class CbsController:
    """Globally synchronized boosting: one phase shared by every agent."""

    eps1: float
    eps2: float
    phase: str = "N"                      # N | B | DONE
    H_ref: float | None = None
    best_H: float = -np.inf
    best_positions: dict[int, np.ndarray] = field(default_factory=dict)

    def tick(self, d_norms: dict[int, float],
             dhat_norms: dict[int, float] | None, H_now: float,
             positions: dict[int, np.ndarray]) -> str:
        """Returns the directive every agent follows this round."""
        if self.phase == "DONE":
            return HOLD
        if self.phase == "N":
            if any(v > self.eps1 for v in d_norms.values()):
                return FOLLOW_NORMAL
            if self.H_ref is None or H_now > self.H_ref:
                self.H_ref = H_now
                self.best_H = H_now
                self.best_positions = {a: p.copy()
                                       for a, p in positions.items()}
                self.phase = "B"
                return FOLLOW_BOOSTED
            self.phase = "DONE"
            return HOLD
        # boosting phase
        if dhat_norms is None or any(v > self.eps2
                                     for v in dhat_norms.values()):
            return FOLLOW_BOOSTED
        self.phase = "N"
        return FOLLOW_NORMAL


def equilibrium_thresholds(d_norms, scale: float = 1e-3,
                           floor: float = 1e-9) -> float:
    """Threshold standing in for an exact zero-gradient test."""
    med = float(np.median([float(v) for v in d_norms]))
    return max(floor, scale * med)
