"""Variable step sizes, predicted gains and round diagnostics.

Each agent maximizes the predicted gain of its neighborhood objective over
the step size, using the cross-sensitivities and curvature bounds shared by
its neighbors.  The same machinery evaluates the uncontrolled contribution
arriving from the extended neighborhood (Q) and the window statistics that
certify it stays nonnegative on average.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gradient import DegenerateObjectiveError

Array = np.ndarray


@dataclass
class StepPlan:
    """One agent's chosen step size and its predicted neighborhood gain."""

    beta: float
    delta_tilde: float
    mode_used: str = "normal"            # or "boosted"
    fallback_used: str = "none"          # "weight_zeroing" | "reduced_neighborhood"
    alignment: float = 0.0               # full gain numerator / its norm scale


@dataclass
class StepDiagnostics:
    """Per-round bookkeeping of the uncontrolled gain terms."""

    Q: float
    Q_tilde: float
    T_i: int                              # window length, -1 when none worked
    proj_condition_ok: bool | None = None


def delta_contribution(beta_j: float, g_j: Array, d_ji: Array,
                       K1_i: float) -> float:
    """Predicted effect of agent j's step on objective i.

    g_j is the direction j actually followed (plain or boosted); d_ji the
    sensitivity of objective i to j's position; K1_i the curvature bound of
    objective i.
    """
    g_j = np.asarray(g_j, dtype=float)
    d_ji = np.asarray(d_ji, dtype=float)
    return float(beta_j * g_j @ d_ji
                 - 0.5 * K1_i * beta_j ** 2 * g_j @ g_j)


# relative alignment below which the gain numerator counts as zero, and the
# much larger alignment a caller should see before leaving the fallback
# again (the gap is what prevents chattering around the orthogonal surface)
ORTHOGONAL_TOL = 1e-3
FALLBACK_EXIT_ALIGNMENT = 0.1


def _beta_of(num: float, gsq: float, K_sum: float) -> float:
    return num / (K_sum * gsq)


def _gain(beta: float, num: float, gsq: float, K_sum: float) -> float:
    return beta * num - 0.5 * K_sum * beta ** 2 * gsq


def optimal_step(g: Array, cross: dict[int, Array], K1s: dict[int, float],
                 mode: str = "normal",
                 fallback: str = "weight_zeroing",
                 force_fallback: bool = False) -> StepPlan:
    """Gain-maximizing step size for one agent.

    g is the followed direction (the plain gradient in normal mode, the
    boosted one otherwise); cross maps every closed-neighborhood member j to
    d_ij (with the self entry being the plain gradient); K1s maps the same
    members to their curvature bounds.  When the aligned sum is orthogonal
    to g the chosen fallback drops the misaligned members and recomputes,
    which restores a positive step whenever any aligned member remains.

    Orthogonality is judged against ORTHOGONAL_TOL rather than exact zero:
    the closed-loop dynamics approach the orthogonal surface smoothly, so
    the step size decays geometrically toward zero without ever reaching it
    and the agent would otherwise freeze with a nonzero gradient.  Callers
    stepping a closed loop should hold force_fallback high until the
    reported alignment clears FALLBACK_EXIT_ALIGNMENT, otherwise the
    switching itself settles into a limit cycle short of equilibrium.
    """
    if fallback not in ("weight_zeroing", "reduced_neighborhood"):
        raise ValueError("unknown fallback policy " + repr(fallback))
    g = np.asarray(g, dtype=float)
    gsq = float(g @ g)
    if gsq == 0.0:
        return StepPlan(beta=0.0, delta_tilde=0.0, mode_used=mode)
    K_sum = float(sum(K1s.values()))
    if K_sum <= 0.0:
        raise DegenerateObjectiveError(
            "every curvature bound in the neighborhood is zero")
    num = float(sum(g @ d for d in cross.values()))
    scale = float(np.sqrt(gsq)) * float(sum(np.linalg.norm(d)
                                            for d in cross.values()))
    align = num / scale if scale > 0.0 else 0.0
    if not force_fallback and abs(num) > ORTHOGONAL_TOL * scale:
        beta = _beta_of(num, gsq, K_sum)
        return StepPlan(beta=beta, delta_tilde=_gain(beta, num, gsq, K_sum),
                        mode_used=mode, alignment=align)

    # pathological case: the summed sensitivities are orthogonal to g
    if fallback == "weight_zeroing":
        keep = [j for j, d in cross.items() if float(g @ d) >= 0.0]
    else:
        keep = [j for j, d in cross.items() if float(g @ d) > 0.0]
    num_red = float(sum(g @ cross[j] for j in keep))
    K_red = float(sum(K1s[j] for j in keep))
    red_scale = float(np.sqrt(gsq)) * float(sum(np.linalg.norm(cross[j])
                                                for j in keep))
    if K_red <= 0.0 or num_red <= ORTHOGONAL_TOL * red_scale:
        return StepPlan(beta=0.0, delta_tilde=0.0, mode_used=mode,
                        fallback_used=fallback, alignment=align)
    beta = _beta_of(num_red, gsq, K_red)
    return StepPlan(beta=beta,
                    delta_tilde=_gain(beta, num_red, gsq, K_red),
                    mode_used=mode, fallback_used=fallback, alignment=align)


def fixed_step(K1s: dict[int, float]) -> float:
    """Baseline constant step 1 over the summed curvature bounds."""
    K_sum = float(sum(K1s.values()))
    if K_sum <= 0.0:
        raise DegenerateObjectiveError(
            "every curvature bound in the neighborhood is zero")
    return 1.0 / K_sum


def projection_condition_check(mode: str, d: Array, dhat: Array | None,
                               cross_open_sum: Array) -> bool:
    """Convergence condition under projected updates (convex feasible set).

    cross_open_sum is the sum of d_ij over the open neighborhood (self
    excluded).  Strict inequality per the lemma.
    """
    d = np.asarray(d, dtype=float)
    cross_open_sum = np.asarray(cross_open_sum, dtype=float)
    if mode == "normal":
        return bool(abs(d @ cross_open_sum) < d @ d)
    if mode != "boosted":
        raise ValueError("mode must be 'normal' or 'boosted'")
    dhat = np.asarray(dhat, dtype=float)
    return bool(abs(dhat @ (cross_open_sum + (d - dhat))) < dhat @ dhat)


def q_round(i: int, neighbors: dict[int, list[int]],
            betas: dict[int, float], gvecs: dict[int, Array],
            crosses: dict[int, dict[int, Array]],
            K1s: dict[int, float]) -> float:
    """Uncontrolled gain arriving at agent i from its extended neighborhood.

    gvecs holds the direction each agent followed this round, so the mixed
    normal/boosted form comes out of the same expression.
    """
    zero = np.zeros(2)
    total = 0.0
    for j in neighbors.get(i, []):
        bj = betas.get(j, 0.0)
        gj = gvecs[j]
        cj = crosses.get(j, {})
        total += delta_contribution(bj, gj, cj.get(j, zero), K1s[j])
        total += delta_contribution(bj, gj, cj.get(i, zero), K1s[i])
        for l in neighbors.get(j, []):
            if l == i:
                continue
            total += delta_contribution(betas.get(l, 0.0), gvecs[l],
                                        crosses.get(l, {}).get(j, zero),
                                        K1s[j])
    return total


class QLedger:
    """Per-agent running record of Q values with window statistics.

    The window length T is the smallest number of most recent rounds whose Q
    values sum to a nonnegative total; -1 flags that no window reaching back
    to the start works yet.
    """

    def __init__(self):
        self._cum: dict[int, list[float]] = {}

    def push(self, aid: int, q: float) -> None:
        cum = self._cum.setdefault(aid, [0.0])
        cum.append(cum[-1] + q)

    def history_length(self, aid: int) -> int:
        return len(self._cum.get(aid, [0.0])) - 1

    def window_length(self, aid: int) -> int:
        cum = self._cum.get(aid)
        if cum is None or len(cum) < 2:
            return -1
        last = cum[-1]
        for j in range(len(cum) - 2, -1, -1):
            if cum[j] <= last + 1e-12 * max(1.0, abs(last)):
                return len(cum) - 1 - j
        return -1

    def q_tilde(self, aid: int, length: int | None = None) -> float:
        cum = self._cum.get(aid)
        if cum is None or len(cum) < 2:
            return 0.0
        if length is None:
            length = self.window_length(aid)
            if length < 0:
                length = len(cum) - 1
        length = min(length, len(cum) - 1)
        return cum[-1] - cum[-1 - length]
