"""Realtime incentive design for type-2 crowdsourcees.

The natural formulation prices an additional reward lam_a on top of the
nodal price and is bilinear in (lam_a, u).  Substituting y = lam_a * u turns
it into an LP over (u, y, s), with s the epigraph of |u - u_eq|:

    min  sum_i  eta_i (lam_i u_i + y_i) + zeta_i s_i
    s.t. s_i >= +-(u_i - u_eq_i)
         b_min <= sum y_i <= b_max
         sum u_i >= d_t
         u_i in [u_min_i, u_max_i]
         y_floor <= y_i <= lam_a_max u_i + y_floor

The strict positivity of the reward is implemented as the configurable
floor ``y_floor`` (default 0.01 $/h).  The price cap keeps recovered
rewards bounded; the ``+ y_floor`` allowance keeps u_i = 0 feasible, in
which case the participant keeps the floor token and the recovered price
is zero by the epsilon rule.  ``brute_force_oracle`` searches the original
bilinear problem directly and is the independent check on all of this.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import linprog

EPS_QUANTITY = 1e-9  # MW; below this a participant is treated as not supplying
_ZOOM = 20.0  # per-stage grid refinement factor in the oracle


class IncentiveError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


@dataclass(frozen=True)
class CrowdsourceeProfile:
    """Preference weights and offer bounds for one type-2 crowdsourcee."""

    id: str
    eta: float = 1.0  # willingness weight on the payment term
    zeta: float = 1.0  # $/MWh weight on deviation from the equilibrium
    u_min: float = 0.0
    u_max: float = 1.0
    acceptance_stats: float = 0.5
    eta_base: float | None = None  # reference weight for the history update

    def __post_init__(self):
        if self.eta < 0 or self.zeta < 0:
            raise IncentiveError("bad-profile", f"{self.id}: negative weight")
        if self.u_min < 0 or self.u_min > self.u_max:
            raise IncentiveError("bad-profile", f"{self.id}: bad offer bounds")


@dataclass(frozen=True)
class Participant:
    profile: CrowdsourceeProfile
    lam: float  # nodal price at the bus, $/MWh
    u_eq: float  # equilibrium setpoint, MW


@dataclass(frozen=True)
class IncentiveRound:
    t: int
    d_t: float  # demand shortage, MW
    b_min: float
    b_max: float
    participants: tuple[Participant, ...]

    def __post_init__(self):
        if not (0 <= self.b_min <= self.b_max):
            raise IncentiveError("bad-round", f"budget range [{self.b_min}, {self.b_max}]")
        if self.d_t > 0 and not self.participants:
            raise IncentiveError("no-participants", "positive shortage with nobody to ask")


@dataclass
class IncentiveLp:
    round: IncentiveRound
    c: np.ndarray
    a_ub: np.ndarray
    b_ub: np.ndarray
    bounds: list[tuple[float, float | None]]
    y_floor: float
    lam_a_max: float


@dataclass
class IncentiveSolution:
    status: str  # optimal | infeasible
    u: np.ndarray
    y: np.ndarray
    lam_a: np.ndarray
    deviation: np.ndarray
    objective: float

    @property
    def premium_total(self) -> float:
        return float(self.y.sum())

    def to_json(self) -> dict:
        return {
            "status": self.status,
            "objective": self.objective,
            "u": self.u.tolist(),
            "y": self.y.tolist(),
            "lam_a": self.lam_a.tolist(),
            "deviation": self.deviation.tolist(),
        }


def default_lam_a_max(round_: IncentiveRound) -> float:
    """Reward cap: 10x the largest nodal price in the round (floor 1 $/MWh)."""
    top = max((p.lam for p in round_.participants), default=0.0)
    return max(10.0 * top, 1.0)


def build_incentive_lp(round_: IncentiveRound, *, y_floor: float = 0.01,
                       lam_a_max: float | None = None) -> IncentiveLp:
    """Assemble the linearized program for one realtime round."""
    n = len(round_.participants)
    if n == 0:
        raise IncentiveError("no-participants", "round has no participants")
    lam_a_max = default_lam_a_max(round_) if lam_a_max is None else lam_a_max
    u_max_total = sum(p.profile.u_max for p in round_.participants)
    if round_.d_t > u_max_total + 1e-12:
        raise IncentiveError("demand-unsatisfiable",
                             f"d_t={round_.d_t} exceeds total offerable {u_max_total}")
    if round_.b_min > lam_a_max * u_max_total + n * y_floor + 1e-12:
        raise IncentiveError("budget-floor-unreachable",
                             f"b_min={round_.b_min} cannot be paid at the reward cap")

    eta = np.array([p.profile.eta for p in round_.participants])
    zeta = np.array([p.profile.zeta for p in round_.participants])
    lam = np.array([p.lam for p in round_.participants])
    u_eq = np.array([p.u_eq for p in round_.participants])

    c = np.concatenate([eta * lam, eta, zeta])
    rows, rhs = [], []
    for i in range(n):
        row = np.zeros(3 * n)
        row[i], row[2 * n + i] = 1.0, -1.0
        rows.append(row)
        rhs.append(u_eq[i])
        row = np.zeros(3 * n)
        row[i], row[2 * n + i] = -1.0, -1.0
        rows.append(row)
        rhs.append(-u_eq[i])
    row = np.zeros(3 * n)
    row[n:2 * n] = 1.0
    rows.append(row)
    rhs.append(round_.b_max)
    rows.append(-row)
    rhs.append(-round_.b_min)
    row = np.zeros(3 * n)
    row[:n] = -1.0
    rows.append(row)
    rhs.append(-round_.d_t)
    for i in range(n):
        row = np.zeros(3 * n)
        row[n + i], row[i] = 1.0, -lam_a_max
        rows.append(row)
        rhs.append(y_floor)

    bounds = [(p.profile.u_min, p.profile.u_max) for p in round_.participants]
    bounds += [(y_floor, None)] * n
    bounds += [(0.0, None)] * n
    return IncentiveLp(round=round_, c=c, a_ub=np.array(rows), b_ub=np.array(rhs),
                       bounds=bounds, y_floor=y_floor, lam_a_max=lam_a_max)


def solve_incentive_lp(lp: IncentiveLp, tol: float = 1e-9) -> IncentiveSolution:
    res = linprog(lp.c, A_ub=lp.a_ub, b_ub=lp.b_ub, bounds=lp.bounds, method="highs")
    n = len(lp.round.participants)
    if res.status == 2:
        return IncentiveSolution(status="infeasible", u=np.zeros(n), y=np.zeros(n),
                                 lam_a=np.zeros(n), deviation=np.zeros(n),
                                 objective=float("nan"))
    if res.status != 0:
        raise IncentiveError("solver-failure", f"linprog status {res.status}: {res.message}")
    u = res.x[:n].copy()
    y = res.x[n:2 * n].copy()
    u_eq = np.array([p.u_eq for p in lp.round.participants])
    lam_a = recover_prices(y, u)
    return IncentiveSolution(status="optimal", u=u, y=y, lam_a=lam_a,
                             deviation=np.abs(u - u_eq), objective=float(res.fun))


def recover_prices(y: np.ndarray, u: np.ndarray, eps: float = EPS_QUANTITY) -> np.ndarray:
    """Per-participant reward lam_a = y/u when u > eps, else 0."""
    y = np.asarray(y, dtype=float)
    u = np.asarray(u, dtype=float)
    out = np.zeros_like(y)
    mask = u > eps
    out[mask] = y[mask] / u[mask]
    return out


# ---------------------------------------------------------------------------
# independent oracle on the original bilinear problem


@dataclass
class OracleResult:
    feasible: bool
    objective: float = float("inf")
    u: np.ndarray | None = None
    y: np.ndarray | None = None


def brute_force_oracle(round_: IncentiveRound, grid_step: float = 0.01, *,
                       y_floor: float = 0.01, lam_a_max: float | None = None,
                       max_participants: int = 3, zoom_stages: int = 5) -> OracleResult:
    """Exhaustive search of the bilinear reward problem on a u-grid.

    For a fixed u the reward cost is minimized exactly (cheapest-eta fill of
    the budget floor over the reward box), so only u is gridded.  The grid
    starts at ``grid_step`` and is then zoomed around the incumbent; the
    reduced objective is convex in u, so the refinement cannot get trapped.
    Axes are augmented with bounds, setpoints, and demand-completion points,
    which lets vertex optima be hit exactly.  Guarded to three participants.
    """
    n = len(round_.participants)
    if n > max_participants:
        raise IncentiveError("complexity-guard", f"{n} participants > {max_participants}")
    if n == 0:
        return OracleResult(feasible=round_.d_t <= 0 and round_.b_min <= 0,
                            objective=0.0, u=np.zeros(0), y=np.zeros(0))
    lam_a_max = default_lam_a_max(round_) if lam_a_max is None else lam_a_max
    eta = np.array([p.profile.eta for p in round_.participants])
    zeta = np.array([p.profile.zeta for p in round_.participants])
    lam = np.array([p.lam for p in round_.participants])
    u_eq = np.array([p.u_eq for p in round_.participants])
    lo = np.array([p.profile.u_min for p in round_.participants])
    hi = np.array([p.profile.u_max for p in round_.participants])
    order = np.argsort(eta, kind="stable")  # cheapest recipients first

    def evaluate(U: np.ndarray):
        feas = U.sum(axis=1) >= round_.d_t - 1e-9
        base = (eta * lam * U).sum(axis=1) + (zeta * np.abs(U - u_eq)).sum(axis=1)
        y_cost, y_val, ok = _reward_fill(U, eta, order, lam_a_max, y_floor,
                                         round_.b_min, round_.b_max)
        return np.where(feas & ok, base + y_cost, np.inf), y_val

    def axis_points(i: int, step: float, center: np.ndarray | None, extra=()) -> np.ndarray:
        if center is None:
            left, right = lo[i], hi[i]
        else:
            left = max(lo[i], center[i] - 2.0 * step * _ZOOM)
            right = min(hi[i], center[i] + 2.0 * step * _ZOOM)
        pts = list(np.arange(left, right + step / 2, step))
        pts += [lo[i], hi[i], float(np.clip(u_eq[i], lo[i], hi[i]))]
        if center is not None:
            pts.append(center[i])
        pts += [float(np.clip(v, lo[i], hi[i])) for v in extra]
        return np.unique(np.clip(np.asarray(pts), lo[i], hi[i]))

    def consider(U: np.ndarray, best: OracleResult) -> OracleResult:
        total, y_val = evaluate(U)
        j = int(np.argmin(total))
        if total[j] < best.objective:
            return OracleResult(feasible=True, objective=float(total[j]),
                                u=U[j].copy(), y=y_val[j].copy())
        return best

    best = OracleResult(feasible=False)
    step = grid_step
    center = None
    for _ in range(zoom_stages):
        if n == 1:
            best = consider(axis_points(0, step, center, extra=[round_.d_t]).reshape(-1, 1), best)
        else:
            # the trailing two axes are evaluated as a vectorized mesh; any
            # remaining lead axes are looped.  Demand-completion candidates
            # (points where the demand row holds with equality) are injected
            # for both trailing coordinates.
            lead_axes = [axis_points(i, step, center) for i in range(n - 2)]
            for combo in itertools.product(*lead_axes) if n > 2 else [()]:
                lead = np.array(combo)
                a_pts = axis_points(n - 2, step, center)
                b_pts = axis_points(n - 1, step, center)
                A, B = np.meshgrid(a_pts, b_pts, indexing="ij")
                b_comp = np.clip(round_.d_t - lead.sum() - a_pts, lo[n - 1], hi[n - 1])
                a_comp = np.clip(round_.d_t - lead.sum() - b_pts, lo[n - 2], hi[n - 2])
                tail = np.concatenate([
                    np.column_stack([A.ravel(), B.ravel()]),
                    np.column_stack([a_pts, b_comp]),
                    np.column_stack([a_comp, b_pts]),
                ])
                U = np.hstack([np.tile(lead, (len(tail), 1)), tail]) if n > 2 else tail
                best = consider(U, best)
        if not best.feasible:
            break
        center = best.u
        step /= _ZOOM
    return best


def _reward_fill(U: np.ndarray, eta: np.ndarray, order: np.ndarray,
                 lam_a_max: float, y_floor: float, b_min: float, b_max: float):
    """Exact minimum of sum(eta_i y_i) over the reward box for each u row."""
    m, n = U.shape
    y = np.full((m, n), y_floor)
    total = np.full(m, n * y_floor)
    ok = total <= b_max + 1e-12
    lift_needed = np.maximum(0.0, b_min - total)
    for i in order:
        head = lam_a_max * U[:, i]  # headroom above the floor
        take = np.minimum(lift_needed, head)
        y[:, i] += take
        lift_needed -= take
    ok &= lift_needed <= 1e-9
    cost = (eta * y).sum(axis=1)
    return cost, y, ok


# ---------------------------------------------------------------------------
# escalation and preference updates


@dataclass(frozen=True)
class EscalationPolicy:
    gamma: float = 1.5
    max_rounds: int = 2


def escalate(lam_a: float, policy: EscalationPolicy, round_index: int,
             lam_a_cap: float) -> float | None:
    """Raise a rejected reward by gamma, capped so the budget holds.

    Returns the new reward, or None when escalation is exhausted (round
    limit hit, or the reward is already at the cap).
    """
    if round_index >= policy.max_rounds:
        return None
    if lam_a >= lam_a_cap - 1e-12:
        return None
    return min(policy.gamma * lam_a, lam_a_cap)


def update_profile(profile: CrowdsourceeProfile, accepted: bool, *,
                   alpha: float = 0.2, eps_h: float = 0.1) -> CrowdsourceeProfile:
    """Exponential acceptance tracking; reluctance raises the effective
    cost weight eta = eta_base / (stats + eps_h)."""
    stats = (1.0 - alpha) * profile.acceptance_stats + alpha * (1.0 if accepted else 0.0)
    base = profile.eta_base if profile.eta_base is not None else profile.eta
    return replace(profile, acceptance_stats=stats, eta=base / (stats + eps_h), eta_base=base)
