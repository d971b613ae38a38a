"""Multi-period market-equilibrium OPF over the SOCP-relaxed branch flow model.

The program minimizes total dispatch cost over a radial feeder, subject to
per-device operating constraints and, for every line (i, j) and period t:

    P_ij - r_ij l_ij = sum_k P_jk + p_j^load - p_j^gen        (real balance)
    Q_ij - x_ij l_ij = sum_k Q_jk + q_j^load - q_j^gen        (reactive)
    v_j = v_i - 2 (r_ij P_ij + x_ij Q_ij) + (r_ij^2 + x_ij^2) l_ij
    P_ij^2 + Q_ij^2 <= l_ij v_i                               (cone relaxation)

Quadratic generation costs enter through solver-side epigraph cones, so the
whole program is a pure SOCP.  Nodal prices are the duals of the real-power
balance rows, converted from per-unit to $/MWh with the MVA base and the
period length.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import cvxpy as cp
import numpy as np

from .network import (
    Battery,
    Generator,
    Scenario,
    ShapableLoad,
    SolarPanel,
    UncontrollableLoad,
    check_scenario,
)

V_ROOT = 1.0  # squared substation voltage, p.u.^2


class OpfError(Exception):
    pass


@dataclass
class OpfProgram:
    """A built conic program plus the handles needed to read the solution."""

    scenario: Scenario
    periods: list[int]
    problem: cp.Problem
    balance_p: cp.Constraint
    vars: dict
    bus_ids: list[int]
    line_keys: list[tuple[int, int]]
    frm_idx: np.ndarray
    to_idx: np.ndarray
    r: np.ndarray
    x: np.ndarray
    exclude: set = field(default_factory=set)
    net_fixed_p: np.ndarray | None = None  # fixed real injection incl. extra load
    net_fixed_q: np.ndarray | None = None

    @property
    def n_cones(self) -> int:
        return len(self.periods) * len(self.line_keys)


@dataclass
class OpfSolution:
    status: str
    objective: float
    bus_ids: list[int]
    line_keys: list[tuple[int, int]]
    periods: list[int]
    base_mva: float
    dt: float
    # branch flow state, arrays shaped (T, n_bus) / (T, n_line)
    v: np.ndarray | None = None
    P: np.ndarray | None = None
    Q: np.ndarray | None = None
    l: np.ndarray | None = None
    p_inj: np.ndarray | None = None
    q_inj: np.ndarray | None = None
    # per-device schedules keyed "pg:<id>", "pb:<id>", ... arrays shaped (T,)
    schedules: dict = field(default_factory=dict)
    battery_energy: dict = field(default_factory=dict)
    balance_duals_pu: np.ndarray | None = None  # (T, n_bus)
    residuals: dict = field(default_factory=dict)

    def bus_index(self, bus_id: int) -> int:
        return self.bus_ids.index(bus_id)

    def to_json(self) -> dict:
        out = {
            "status": self.status,
            "objective": self.objective,
            "bus_ids": self.bus_ids,
            "line_keys": [list(k) for k in self.line_keys],
            "periods": self.periods,
            "base_mva": self.base_mva,
            "dt": self.dt,
            "residuals": {k: float(v) for k, v in self.residuals.items()},
            "schedules": {k: [float(f"{x:.12g}") for x in v] for k, v in self.schedules.items()},
            "battery_energy": {k: [float(f"{x:.12g}") for x in v]
                               for k, v in self.battery_energy.items()},
        }
        for name in ("v", "P", "Q", "l", "p_inj", "q_inj", "balance_duals_pu"):
            arr = getattr(self, name)
            out[name] = arr.tolist() if arr is not None else None
        return out


def _stack(cols: list, T: int):
    # list of (T,) expressions -> (T, len(cols)) expression
    return cp.vstack(cols).T if len(cols) > 1 else cp.reshape(cols[0], (T, 1), order="C")


def build_opf(
    scenario: Scenario,
    *,
    periods: list[int] | None = None,
    extra_load: dict[int, np.ndarray | float] | None = None,
    fixed_injection: dict[int, np.ndarray | float] | None = None,
    exclude_devices: set[str] | None = None,
) -> OpfProgram:
    """Assemble the conic program for ``scenario``.

    ``periods`` restricts the horizon (used for single-period redispatch);
    ``extra_load`` adds fixed real load per bus; ``fixed_injection`` adds a
    fixed real injection per bus; ``exclude_devices`` removes devices from
    the program (their effect, if any, must be supplied via
    ``fixed_injection``).
    """
    problems = check_scenario(scenario)
    if problems:
        raise OpfError("invalid scenario: " + "; ".join(problems))
    net = scenario.network
    periods = list(range(scenario.horizon)) if periods is None else list(periods)
    T = len(periods)
    full_horizon = periods == list(range(scenario.horizon))
    exclude = set(exclude_devices or ())
    dt = scenario.dt
    S = net.base_mva

    bus_ids = [b.id for b in net.buses]
    pos = {b: i for i, b in enumerate(bus_ids)}
    N = len(bus_ids)
    line_keys = [(ln.frm, ln.to) for ln in net.lines]
    E = len(line_keys)
    frm_idx = np.array([pos[ln.frm] for ln in net.lines], dtype=int)
    to_idx = np.array([pos[ln.to] for ln in net.lines], dtype=int)
    r = np.array([ln.r for ln in net.lines])
    x = np.array([ln.x for ln in net.lines])
    s_max = np.array([ln.s_max for ln in net.lines])

    v = cp.Variable((T, N), name="v")
    P = cp.Variable((T, E), name="P") if E else None
    Q = cp.Variable((T, E), name="Q") if E else None
    l = cp.Variable((T, E), name="l", nonneg=True) if E else None

    cons: list[cp.Constraint] = []
    vmin = np.array([b.v_min for b in net.buses])
    vmax = np.array([b.v_max for b in net.buses])
    cons += [v >= np.tile(vmin, (T, 1)), v <= np.tile(vmax, (T, 1))]
    cons.append(v[:, pos[net.root]] == V_ROOT)

    # fixed net injection per bus (loads negative), then variable device stacks
    net_fixed_p = np.zeros((T, N))
    net_fixed_q = np.zeros((T, N))
    cost_terms = []
    vars_out: dict = {"v": v, "P": P, "Q": Q, "l": l, "gen_p": {}, "gen_q": {},
                      "battery": {}, "battery_E": {}, "solar": {}, "shapable": {}}
    stacks: dict[str, tuple[list, list[int], float]] = {
        "gen_p": ([], [], +1.0), "solar": ([], [], +1.0),
        "battery": ([], [], -1.0), "shapable": ([], [], -1.0),
    }
    gen_q_cols: list = []
    gen_q_buses: list[int] = []

    for d in net.devices:
        if d.id in exclude:
            continue
        col = pos[d.bus]
        if isinstance(d, UncontrollableLoad):
            net_fixed_p[:, col] -= [d.profile_p[t] for t in periods]
            net_fixed_q[:, col] -= [d.q_at(t) for t in periods]
        elif isinstance(d, Generator):
            pg = cp.Variable(T, name=f"pg[{d.id}]")
            qg = cp.Variable(T, name=f"qg[{d.id}]")
            qlo, qhi = d.q_bounds()
            cons += [pg >= d.p_min, pg <= d.p_max, qg >= qlo, qg <= qhi]
            vars_out["gen_p"][d.id] = pg
            vars_out["gen_q"][d.id] = qg
            stacks["gen_p"][0].append(pg)
            stacks["gen_p"][1].append(col)
            gen_q_cols.append(qg)
            gen_q_buses.append(col)
            b_t = (np.array([d.b_profile[t] for t in periods])
                   if d.b_profile else np.full(T, d.b))
            term = dt * (S * (b_t @ pg) + d.c * T)
            if d.a:
                term = term + dt * d.a * S * S * cp.sum_squares(pg)
            cost_terms.append(term)
        elif isinstance(d, SolarPanel):
            prof = np.array([d.profile[t] for t in periods])
            if d.owner_class == "type1":
                net_fixed_p[:, col] += prof  # fixed injection
            else:
                pr = cp.Variable(T, name=f"pr[{d.id}]")
                cons += [pr >= 0, pr <= prof]
                vars_out["solar"][d.id] = pr
                stacks["solar"][0].append(pr)
                stacks["solar"][1].append(col)
        elif isinstance(d, Battery):
            pb = cp.Variable(T, name=f"pb[{d.id}]")
            cons += [pb >= -d.p_cap, pb <= d.p_cap]
            vars_out["battery"][d.id] = pb
            stacks["battery"][0].append(pb)
            stacks["battery"][1].append(col)
            if full_horizon:
                Ebat = cp.Variable(T + 1, name=f"E[{d.id}]")
                cons += [Ebat[0] == d.e0, Ebat[T] == d.e0,
                         Ebat[1:] == Ebat[:-1] + dt * pb,
                         Ebat >= 0, Ebat <= d.e_cap]
                vars_out["battery_E"][d.id] = Ebat
            else:
                traj = d.e0 + dt * cp.cumsum(pb)
                cons += [traj >= 0, traj <= d.e_cap]
            if d.cost_a:
                cost_terms.append(dt * d.cost_a * S * S * cp.sum_squares(pb))
        elif isinstance(d, ShapableLoad):
            ps = cp.Variable(T, name=f"ps[{d.id}]")
            mask = np.array([1.0 if d.window[0] <= t < d.window[1] else 0.0 for t in periods])
            cons += [ps >= 0, ps <= d.p_max * mask]
            if full_horizon:
                cons.append(dt * cp.sum(ps) == d.energy_demand)
            vars_out["shapable"][d.id] = ps
            stacks["shapable"][0].append(ps)
            stacks["shapable"][1].append(col)
            if d.cost_a:
                cost_terms.append(dt * d.cost_a * S * S * cp.sum_squares(ps))

    for bus, arr in (extra_load or {}).items():
        net_fixed_p[:, pos[bus]] -= np.broadcast_to(np.asarray(arr, dtype=float), (T,))
    for bus, arr in (fixed_injection or {}).items():
        net_fixed_p[:, pos[bus]] += np.broadcast_to(np.asarray(arr, dtype=float), (T,))

    p_inj = cp.Constant(net_fixed_p)
    for cols, buses, sign in stacks.values():
        if not cols:
            continue
        gather = np.zeros((len(cols), N))
        for row, col in enumerate(buses):
            gather[row, col] = sign
        p_inj = p_inj + _stack(cols, T) @ gather
    q_inj = cp.Constant(net_fixed_q)
    if gen_q_cols:
        gather = np.zeros((len(gen_q_cols), N))
        for row, col in enumerate(gen_q_buses):
            gather[row, col] = 1.0
        q_inj = q_inj + _stack(gen_q_cols, T) @ gather

    if E:
        A_to = np.zeros((N, E))
        A_frm = np.zeros((N, E))
        for e in range(E):
            A_to[to_idx[e], e] = 1.0
            A_frm[frm_idx[e], e] = 1.0
        flow_p = (P - cp.multiply(l, r[None, :])) @ A_to.T - P @ A_frm.T
        flow_q = (Q - cp.multiply(l, x[None, :])) @ A_to.T - Q @ A_frm.T
    else:
        flow_p = np.zeros((T, N))
        flow_q = np.zeros((T, N))
    balance_p = flow_p + p_inj == 0
    balance_q = flow_q + q_inj == 0
    cons += [balance_p, balance_q]

    if E:
        v_frm = v[:, list(frm_idx)]
        cons.append(v[:, list(to_idx)] == v_frm
                    - 2 * (cp.multiply(P, r[None, :]) + cp.multiply(Q, x[None, :]))
                    + cp.multiply(l, (r * r + x * x)[None, :]))
        # P^2 + Q^2 <= l v_frm  as  ||(2P, 2Q, l - v_frm)|| <= l + v_frm
        cone_t = cp.vec(l + v_frm, order="C")
        cone_x = cp.vstack([cp.vec(2 * P, order="C"), cp.vec(2 * Q, order="C"),
                            cp.vec(l - v_frm, order="C")])
        cons.append(cp.SOC(cone_t, cone_x, axis=0))
        # sending-end thermal limit
        therm_x = cp.vstack([cp.vec(P, order="C"), cp.vec(Q, order="C")])
        cons.append(cp.SOC(cp.Constant(np.tile(s_max, T)), therm_x, axis=0))

    objective = cp.Minimize(cp.sum(cost_terms) if cost_terms else cp.Constant(0.0))
    return OpfProgram(scenario=scenario, periods=periods,
                      problem=cp.Problem(objective, cons),
                      balance_p=balance_p, vars=vars_out, bus_ids=bus_ids,
                      line_keys=line_keys, frm_idx=frm_idx, to_idx=to_idx, r=r, x=x,
                      exclude=exclude, net_fixed_p=net_fixed_p, net_fixed_q=net_fixed_q)


def solve_opf(program: OpfProgram, tol: float = 1e-8, solver: str = "CLARABEL") -> OpfSolution:
    """Solve the program and return the primal-dual solution with residuals.

    Status is reported honestly: ``optimal`` only when the solver converged
    and the independently recomputed feasibility residuals are small.
    """
    prob = program.problem
    try:
        if solver == "CLARABEL":
            prob.solve(solver=cp.CLARABEL, tol_gap_abs=tol, tol_gap_rel=tol, tol_feas=tol)
        else:
            prob.solve(solver=solver)
    except cp.error.SolverError as exc:
        raise OpfError(f"solver failure: {exc}") from exc

    scn = program.scenario
    status = {
        "optimal": "optimal",
        "optimal_inaccurate": "optimal",
        "infeasible": "infeasible",
        "infeasible_inaccurate": "infeasible",
        "unbounded": "infeasible",
    }.get(prob.status, "max-iter")
    sol = OpfSolution(status=status,
                      objective=float(prob.value) if prob.value is not None else float("nan"),
                      bus_ids=program.bus_ids, line_keys=program.line_keys,
                      periods=program.periods, base_mva=scn.network.base_mva, dt=scn.dt)
    if status != "optimal":
        return sol

    V = program.vars
    T = len(program.periods)
    sol.v = np.asarray(V["v"].value).reshape(T, -1)
    if program.line_keys:
        sol.P = np.asarray(V["P"].value).reshape(T, -1)
        sol.Q = np.asarray(V["Q"].value).reshape(T, -1)
        sol.l = np.asarray(V["l"].value).reshape(T, -1)
        # Snap squared currents onto the cone boundary when the correction is
        # below solver rounding (1e-8 p.u.); near-zero-flow lines otherwise
        # show amplified relative gaps.  Residuals are recomputed afterwards,
        # so a macroscopic relaxation gap still surfaces.
        v_frm = sol.v[:, program.frm_idx]
        l_exact = (sol.P**2 + sol.Q**2) / np.maximum(v_frm, 1e-6)
        sol.l = np.where(np.abs(sol.l - l_exact) <= 1e-8, l_exact, sol.l)
    for kind, prefix in (("gen_p", "pg"), ("gen_q", "qg"), ("battery", "pb"),
                         ("solar", "pr"), ("shapable", "ps")):
        for dev_id, var in V[kind].items():
            sol.schedules[f"{prefix}:{dev_id}"] = np.asarray(var.value).reshape(-1)
    for dev_id, var in V["battery_E"].items():
        sol.battery_energy[dev_id] = np.asarray(var.value).reshape(-1)

    # Duals of the real balance rows.  With the row written as
    # flow + injection == 0, an extra unit of load enters with -1, so the
    # marginal cost of serving it is minus the raw equality dual; the sign is
    # pinned by the lossless two-bus case (lambda == 2 a p > 0).
    duals = np.asarray(program.balance_p.dual_value).reshape(T, -1)
    sol.balance_duals_pu = -duals

    sol.residuals = _residuals(program, sol)
    sol.residuals["solver_tol"] = tol
    feas = max(sol.residuals["power_balance_inf_norm"], sol.residuals["voltage_drop_inf_norm"])
    if feas > max(1e3 * tol, 1e-6):
        sol.status = "max-iter"
    return sol


def _residuals(program: OpfProgram, sol: OpfSolution) -> dict:
    """Recompute feasibility residuals from the raw solution arrays."""
    scn = program.scenario
    net = scn.network
    T = len(program.periods)
    pos = {b: i for i, b in enumerate(program.bus_ids)}
    N = len(program.bus_ids)
    p_inj = program.net_fixed_p.copy()
    for key, arr in sol.schedules.items():
        prefix, dev_id = key.split(":", 1)
        dev = next(dd for dd in net.devices if dd.id == dev_id)
        col = pos[dev.bus]
        if prefix in ("pg", "pr"):
            p_inj[:, col] += arr
        elif prefix in ("pb", "ps"):
            p_inj[:, col] -= arr

    res: dict = {}
    if program.line_keys:
        r, x = program.r, program.x
        E = len(r)
        A_to = np.zeros((N, E))
        A_frm = np.zeros((N, E))
        for e in range(E):
            A_to[program.to_idx[e], e] = 1.0
            A_frm[program.frm_idx[e], e] = 1.0
        bal = (sol.P - sol.l * r[None, :]) @ A_to.T - sol.P @ A_frm.T + p_inj
        res["power_balance_inf_norm"] = float(np.abs(bal).max())
        v_frm = sol.v[:, program.frm_idx]
        vd = sol.v[:, program.to_idx] - v_frm \
            + 2 * (sol.P * r[None, :] + sol.Q * x[None, :]) \
            - sol.l * (r * r + x * x)[None, :]
        res["voltage_drop_inf_norm"] = float(np.abs(vd).max())
        lv = sol.l * v_frm
        gap = (lv - sol.P**2 - sol.Q**2) / np.maximum(lv, 1e-9)
        res["cone_gap_max"] = float(np.abs(gap).max())
    else:
        res["power_balance_inf_norm"] = float(np.abs(p_inj).max())
        res["voltage_drop_inf_norm"] = 0.0
        res["cone_gap_max"] = 0.0
    sol.p_inj = p_inj

    per_max = 0.0
    for dev_id, En in sol.battery_energy.items():
        dev = next(dd for dd in net.devices if dd.id == dev_id)
        per_max = max(per_max, abs(En[-1] - dev.e0))
    energy_max = 0.0
    if program.periods == list(range(scn.horizon)):
        for key, arr in sol.schedules.items():
            if key.startswith("ps:"):
                dev = next(dd for dd in net.devices if dd.id == key[3:])
                energy_max = max(energy_max, abs(scn.dt * arr.sum() - dev.energy_demand))
    res["battery_periodicity_max"] = per_max
    res["shapable_energy_max"] = energy_max
    res["dual_gap"] = _duality_gap(program)
    return res


def _duality_gap(program: OpfProgram) -> float:
    """Certified duality gap from complementary slackness: the sum of
    <slack, dual> over every inequality and cone constraint."""
    gap = 0.0
    for con in program.problem.constraints:
        dv = con.dual_value
        if dv is None:
            return float("nan")
        if isinstance(con, cp.constraints.SOC):
            t_val = np.asarray(con.args[0].value).reshape(-1)
            x_val = np.asarray(con.args[1].value)
            t_dual = np.asarray(dv[0]).reshape(-1)
            x_dual = np.asarray(dv[1])
            gap += float(t_dual @ t_val + np.sum(x_dual * x_val))
        elif isinstance(con, cp.constraints.Inequality):
            slack = -np.asarray(con.expr.value)
            gap += float(np.sum(np.asarray(dv) * slack))
    return abs(gap)


def extract_dlmp(solution: OpfSolution) -> np.ndarray:
    """Nodal real-power prices in $/MWh, shaped (T, n_bus).

    The price at a bus is the marginal cost of serving one more unit of load
    there for one period.
    """
    if solution.status != "optimal":
        raise OpfError(f"cannot extract prices from a {solution.status} solution")
    return solution.balance_duals_pu / (solution.base_mva * solution.dt)


def check_exactness(solution: OpfSolution) -> float:
    """Max relative cone gap (l v - P^2 - Q^2) / max(l v, eps) over lines/periods."""
    if solution.l is None or not solution.line_keys:
        return 0.0
    frm_cols = [solution.bus_ids.index(k[0]) for k in solution.line_keys]
    lv = solution.l * solution.v[:, frm_cols]
    gap = (lv - solution.P**2 - solution.Q**2) / np.maximum(lv, 1e-9)
    return float(np.abs(gap).max())


@dataclass
class EquilibriumSetpoints:
    """Per type-2 bus: the offerable net injection and any net withdrawal."""

    offers: dict[int, np.ndarray]
    withdrawals: dict[int, np.ndarray]


def equilibrium_setpoints(solution: OpfSolution, scenario: Scenario) -> EquilibriumSetpoints:
    """Scheduled net injection per type-2 crowdsourcee bus (p.u.), clamped at
    zero; the withdrawal side is reported separately.

    Components: type-2 solar output, battery discharge (charging counts
    against), and deferrable-load reduction below its flat in-window baseline.
    """
    if solution.status != "optimal":
        raise OpfError("equilibrium setpoints require an optimal solution")
    T = len(solution.periods)
    net: dict[int, np.ndarray] = {}
    for d in scenario.network.devices:
        if d.owner_class != "type2":
            continue
        acc = net.setdefault(d.bus, np.zeros(T))
        if isinstance(d, SolarPanel):
            acc += solution.schedules.get(f"pr:{d.id}", np.zeros(T))
        elif isinstance(d, Battery):
            acc -= solution.schedules.get(f"pb:{d.id}", np.zeros(T))
        elif isinstance(d, ShapableLoad):
            ps = solution.schedules.get(f"ps:{d.id}")
            if ps is not None:
                lo, hi = d.window
                baseline = np.array([
                    d.energy_demand / ((hi - lo) * scenario.dt) if lo <= t < hi else 0.0
                    for t in solution.periods])
                acc += baseline - ps
    offers = {b: np.maximum(a, 0.0) for b, a in net.items()}
    withdrawals = {b: np.maximum(-a, 0.0) for b, a in net.items()}
    return EquilibriumSetpoints(offers=offers, withdrawals=withdrawals)


# ---------------------------------------------------------------------------
# exports


def schedules_csv(solution: OpfSolution, scenario: Scenario) -> str:
    """Per-bus per-period generation/load stack (the data behind the usual
    stacked dispatch plot)."""
    net = scenario.network
    pos = {b: i for i, b in enumerate(solution.bus_ids)}
    rows = ["bus,period,load_p,shapable_p,solar_p,battery_p,gen_p,dlmp_per_mwh"]
    dlmp = extract_dlmp(solution)
    T = len(solution.periods)
    per_bus = {b: {"load": np.zeros(T), "shape": np.zeros(T), "solar": np.zeros(T),
                   "bat": np.zeros(T), "gen": np.zeros(T)} for b in solution.bus_ids}
    for d in net.devices:
        slot = per_bus[d.bus]
        if isinstance(d, UncontrollableLoad):
            slot["load"] += [d.profile_p[t] for t in solution.periods]
        elif isinstance(d, SolarPanel):
            if d.owner_class == "type1":
                slot["solar"] += [d.profile[t] for t in solution.periods]
            else:
                slot["solar"] += solution.schedules.get(f"pr:{d.id}", np.zeros(T))
        elif isinstance(d, Battery):
            slot["bat"] += solution.schedules.get(f"pb:{d.id}", np.zeros(T))
        elif isinstance(d, ShapableLoad):
            slot["shape"] += solution.schedules.get(f"ps:{d.id}", np.zeros(T))
        elif isinstance(d, Generator):
            slot["gen"] += solution.schedules.get(f"pg:{d.id}", np.zeros(T))
    for b in solution.bus_ids:
        s = per_bus[b]
        for i, t in enumerate(solution.periods):
            rows.append(f"{b},{t},{s['load'][i]:.6f},{s['shape'][i]:.6f},{s['solar'][i]:.6f},"
                        f"{s['bat'][i]:.6f},{s['gen'][i]:.6f},{dlmp[i, pos[b]]:.6f}")
    return "\n".join(rows) + "\n"


def dlmp_csv(solution: OpfSolution) -> str:
    dlmp = extract_dlmp(solution)
    rows = ["period," + ",".join(f"bus_{b}" for b in solution.bus_ids)]
    for i, t in enumerate(solution.periods):
        rows.append(f"{t}," + ",".join(f"{dlmp[i, j]:.6f}" for j in range(len(solution.bus_ids))))
    return "\n".join(rows) + "\n"
