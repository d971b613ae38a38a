"""Market session control loop.

Day-ahead: solve the horizon OPF, pin setpoint contracts for generators and
type-1 members on the ledger, and extract nodal prices plus type-2
equilibrium setpoints.  Realtime, per period: compute the shortage, solve
the incentive LP, issue offers, collect responses (simulated agents or API
clients), escalate rejections up to the round limit, cover the residual
from generators, and meter deliveries.  At horizon end, settle every party
double-entry on the ledger.

Everything is deterministic under a fixed seed: keypairs derive from the
seed, timestamps are logical, and the ordering fabric is seeded per block.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import consensus, opf
from .agents import AgentPolicy, from_config as agent_from_config
from .identity import Keypair
from .incentives import (
    CrowdsourceeProfile,
    EscalationPolicy,
    IncentiveError,
    IncentiveRound,
    Participant,
    build_incentive_lp,
    escalate,
    solve_incentive_lp,
    update_profile,
)
from .ledger import (
    OPERATOR,
    ZERO32,
    Block,
    Enrollment,
    Funding,
    IncentiveOffer,
    Ledger,
    LedgerError,
    MeterReading,
    Notice,
    OfferResponse,
    PreferenceUpdate,
    SetpointContract,
    Settlement,
    make_block,
    make_tx,
)
from .network import Battery, Generator, Scenario, ShapableLoad, SolarPanel


class SessionError(Exception):
    pass


@dataclass
class SessionConfig:
    seed: int = 42
    b_min: float = 0.0
    b_max: float = 50.0  # per-period incentive budget, $/h
    y_floor: float = 0.01
    gamma: float = 1.5
    max_rounds: int = 2
    resolve_fraction: float = 0.5  # re-solve the LP when more than this share rejects
    response_window: int = 60  # logical ticks an offer stays open
    ordering_nodes: int = 4
    ordering_behaviors: dict = field(default_factory=dict)  # node id -> behavior
    block_max_txs: int = 10
    operator_funds_cents: int = 1_000_000_00
    default_agent: str = "always_accept"
    demand: list | None = None  # explicit d_t (MW) per period, overrides factors
    agent_params: dict = field(default_factory=dict)

    @classmethod
    def from_market(cls, market: dict, **overrides) -> "SessionConfig":
        known = {f for f in cls.__dataclass_fields__}
        merged = {k: v for k, v in market.items() if k in known}
        merged.update({k: v for k, v in overrides.items() if v is not None and k in known})
        cfg = cls(**merged)
        # JSON object keys arrive as strings
        cfg.ordering_behaviors = {int(k): v for k, v in cfg.ordering_behaviors.items()}
        return cfg


def _party_seed(seed: int, party: str) -> bytes:
    return hashlib.sha256(f"cg-key:{seed}:{party}".encode()).digest()


class OrderingService:
    """Cuts pending transactions into blocks and runs a BFT round per block."""

    def __init__(self, cfg: SessionConfig):
        self.cfg = cfg
        self.pending = []
        self.stats = {"blocks": 0, "view_changes": 0, "equivocations": 0}

    def submit(self, tx):
        self.pending.append(tx)

    def flush(self, led: Ledger, clock: int) -> list[dict]:
        """Order every pending tx into blocks of at most block_max_txs."""
        events = []
        while self.pending:
            batch = tuple(self.pending[: self.cfg.block_max_txs])
            del self.pending[: len(batch)]
            block = make_block(len(led.blocks), led.tip_hash, clock, batch)
            sealed = self._order(block, len(led.blocks))
            events.extend(led.append_block(sealed))
        return events

    def _order(self, block: Block, height: int) -> Block:
        n = self.cfg.ordering_nodes
        behaviors = [self.cfg.ordering_behaviors.get(i, "honest") for i in range(n)]
        nodes = [consensus.OrdererNode(i, n, behaviors[i]) for i in range(n)]
        net = consensus.NetworkSim(n_nodes=n, seed=self.cfg.seed * 1_000_003 + height)
        result = consensus.run(net, nodes, [(block, block.block_hash.hex())])
        self.stats["blocks"] += 1
        self.stats["view_changes"] += result.view_changes
        self.stats["equivocations"] += result.equivocations
        if result.stalled:
            raise SessionError(f"ordering stalled at height {height} "
                               f"(behaviors {behaviors})")
        digests = {result.committed[nd.id][1] for nd in nodes if nd.behavior != "crash"}
        payload = result.payloads[digests.pop()]
        return payload if isinstance(payload, Block) else block


@dataclass
class RoundOutcome:
    period: int
    d_t: float
    offered: list = field(default_factory=list)
    accepted_quantity: float = 0.0
    accepted_premium: float = 0.0  # committed sum of y over accepted offers, $/h
    fallback: float = 0.0
    shortfall: float = 0.0
    escalation_rounds: int = 0
    resolves: int = 0

    def to_json(self) -> dict:
        return {"period": self.period, "d_t": self.d_t, "offered": self.offered,
                "accepted_quantity": self.accepted_quantity,
                "accepted_premium": self.accepted_premium,
                "fallback": self.fallback, "shortfall": self.shortfall,
                "escalation_rounds": self.escalation_rounds, "resolves": self.resolves}


class MarketSession:
    def __init__(self, scenario: Scenario, config: SessionConfig | None = None):
        self.scenario = scenario
        self.cfg = config or SessionConfig()
        self.clock = 0
        self.ledger = Ledger()
        self.ordering = OrderingService(self.cfg)
        self.events: list[dict] = []
        self.keys: dict[str, Keypair] = {}
        self.profiles: dict[str, CrowdsourceeProfile] = {}
        self.agents: dict[str, AgentPolicy] = {}
        self.day_ahead: opf.OpfSolution | None = None
        self.dlmp = None  # (T, n_bus) $/MWh
        self.setpoints: opf.EquilibriumSetpoints | None = None
        self.outcomes: dict[int, RoundOutcome] = {}
        self.current_period = -1
        self.open_offers: dict[str, dict] = {}  # offer_id -> bookkeeping
        self.inbox: list[tuple[str, str, str]] = []  # (offer_id, party, decision)
        self._closed = set()
        self._genesis()

    # -- plumbing ----------------------------------------------------------

    def tick(self) -> int:
        self.clock += 1
        return self.clock

    def key_for(self, party: str) -> Keypair:
        if party not in self.keys:
            self.keys[party] = Keypair.from_seed(_party_seed(self.cfg.seed, party))
        return self.keys[party]

    def submit(self, tx):
        self.ordering.submit(tx)

    def flush(self) -> list[dict]:
        evs = self.ordering.flush(self.ledger, self.tick())
        for ev in evs:
            ev["event_id"] = len(self.events)
            self.events.append(ev)
        return evs

    def _genesis(self):
        op = self.key_for(OPERATOR)
        self.submit(make_tx(Enrollment, OPERATOR, self.clock, op,
                            participant=OPERATOR, public_key=op.public))
        self.submit(make_tx(Funding, OPERATOR, self.clock, op,
                            party=OPERATOR, amount_cents=self.cfg.operator_funds_cents))
        self.flush()

    # -- participants ------------------------------------------------------

    def parties(self) -> dict[str, dict]:
        """party id -> {kind, bus}; crowdsourcee buses plus generator owners."""
        out = {OPERATOR: {"kind": "operator", "bus": None}}
        for d in self.scenario.network.devices:
            if isinstance(d, Generator):
                out[d.id] = {"kind": "generator", "bus": d.bus}
            elif d.owner_class in ("type1", "type2"):
                party = f"bus-{d.bus}"
                out.setdefault(party, {"kind": d.owner_class, "bus": d.bus})
        return out

    def type2_parties(self) -> list[str]:
        return [p for p, meta in self.parties().items() if meta["kind"] == "type2"]

    def enroll_all(self):
        for party in self.parties():
            if self.ledger.state.public_key(party) is None:
                kp = self.key_for(party)
                self.submit(make_tx(Enrollment, party, self.clock, kp,
                                    participant=party, public_key=kp.public))
        self.flush()

    def agent_for(self, party: str) -> AgentPolicy | None:
        if party in self.agents:
            return self.agents[party]
        bus = self.parties()[party]["bus"]
        cfg = self.scenario.agents.get(bus)
        if cfg is None:
            if self.cfg.default_agent == "none":
                return None  # externally driven (API client)
            cfg = dict(self.cfg.agent_params, type=self.cfg.default_agent)
        cfg = dict(cfg)
        cfg.setdefault("seed", self.cfg.seed * 7919 + (bus or 0))
        self.agents[party] = agent_from_config(cfg)
        return self.agents[party]

    def profile_for(self, party: str, headroom: float) -> CrowdsourceeProfile:
        if party not in self.profiles:
            self.profiles[party] = CrowdsourceeProfile(
                id=party, eta=1.0, zeta=1.0, u_min=0.0, u_max=headroom, eta_base=1.0)
        return replace(self.profiles[party], u_max=headroom)

    # -- day-ahead ---------------------------------------------------------

    def run_day_ahead(self) -> opf.OpfSolution:
        program = opf.build_opf(self.scenario)
        solution = opf.solve_opf(program)
        if solution.status != "optimal":
            raise SessionError(f"day-ahead OPF is {solution.status}; session aborted")
        self.day_ahead = solution
        self.dlmp = opf.extract_dlmp(solution)
        self.setpoints = opf.equilibrium_setpoints(solution, self.scenario)
        self.enroll_all()
        self._submit_preferences()
        self._submit_contracts(solution)
        self.flush()
        return solution

    def _submit_preferences(self):
        for party in self.type2_parties():
            bus = self.parties()[party]["bus"]
            payload = {"devices": [d.id for d in self.scenario.network.devices_at(bus)
                                   if d.owner_class == "type2"]}
            self.submit(make_tx(PreferenceUpdate, party, self.clock, self.key_for(party),
                                owner=party,
                                payload_json=json.dumps(payload, sort_keys=True)))

    def _submit_contracts(self, solution: opf.OpfSolution):
        """One setpoint contract per generator and per type-1 member."""
        S = self.scenario.network.base_mva
        dt = self.scenario.dt
        periods = tuple(solution.periods)
        op = self.key_for(OPERATOR)
        t1_net: dict[str, np.ndarray] = {}
        for d in self.scenario.network.devices:
            if isinstance(d, Generator):
                sched = solution.schedules[f"pg:{d.id}"] * S
                col = solution.bus_index(d.bus)
                prices = tuple(float(x) for x in self.dlmp[:, col])
                self.submit(make_tx(
                    SetpointContract, OPERATOR, self.clock, op, party=d.id,
                    periods=periods,
                    setpoints=tuple(float(x) for x in sched),
                    energies=tuple(float(x * dt) for x in sched),
                    prices=prices))
            elif d.owner_class == "type1":
                acc = t1_net.setdefault(f"bus-{d.bus}", np.zeros(len(periods)))
                if isinstance(d, SolarPanel):
                    acc += np.array([d.profile[t] for t in solution.periods]) * S
                elif isinstance(d, Battery):
                    acc -= solution.schedules.get(f"pb:{d.id}", np.zeros(len(periods))) * S
                elif isinstance(d, ShapableLoad):
                    acc -= solution.schedules.get(f"ps:{d.id}", np.zeros(len(periods))) * S
        for party, net_inj in sorted(t1_net.items()):
            bus = self.parties()[party]["bus"]
            col = self.day_ahead.bus_index(bus)
            setp = np.maximum(net_inj, 0.0)  # paid for delivery, not consumption
            self.submit(make_tx(
                SetpointContract, OPERATOR, self.clock, op, party=party,
                periods=periods,
                setpoints=tuple(float(x) for x in setp),
                energies=tuple(float(x * dt) for x in setp),
                prices=tuple(float(x) for x in self.dlmp[:, col])))

    # -- realtime ----------------------------------------------------------

    def demand_shortage(self, t: int) -> float:
        """Realized minus forecast uncontrollable load at the feeder head,
        floored at zero (MW)."""
        if self.cfg.demand is not None:
            return max(0.0, float(self.cfg.demand[t])) if t < len(self.cfg.demand) else 0.0
        S = self.scenario.network.base_mva
        short = 0.0
        for d in self.scenario.network.devices:
            if d.type == "load":
                factors = self.scenario.realized_factors.get(d.bus)
                if factors:
                    short += d.profile_p[t] * (factors[t] - 1.0) * S
        return max(0.0, short)

    def _headroom(self, bus: int, t: int) -> float:
        """Offerable MW at the bus: battery discharge + available solar +
        deferrable-load reduction, for type-2 devices."""
        S = self.scenario.network.base_mva
        head = 0.0
        for d in self.scenario.network.devices_at(bus):
            if d.owner_class != "type2":
                continue
            if isinstance(d, Battery):
                head += d.p_cap
            elif isinstance(d, SolarPanel):
                head += d.profile[t]
            elif isinstance(d, ShapableLoad):
                lo, hi = d.window
                if lo <= t < hi:
                    head += d.energy_demand / ((hi - lo) * self.scenario.dt)
        return head * S

    def open_period(self, t: int, d_t: float | None = None) -> RoundOutcome:
        """Start the round for period t: solve the incentive LP and put the
        offers on the ledger."""
        if self.day_ahead is None:
            raise SessionError("day-ahead must run before realtime rounds")
        if t in self.outcomes:
            raise SessionError(f"period {t} already opened")
        if self.current_period >= 0 and self.current_period not in self._closed:
            raise SessionError(f"period {self.current_period} still open")
        self.current_period = t
        d_t = self.demand_shortage(t) if d_t is None else max(0.0, d_t)
        outcome = RoundOutcome(period=t, d_t=d_t)
        self.outcomes[t] = outcome
        if d_t <= 0:
            self._closed.add(t)
            return outcome
        participants = self._build_participants(t)
        if not participants:
            self._declare_shortfall(t, d_t, "no type-2 participants")
            outcome.shortfall = 0.0  # fallback still to come at close
            outcome.fallback = self._fallback(t, d_t, {})
            self._closed.add(t)
            return outcome
        sol, rnd = self._solve_round(t, d_t, participants)
        if sol is None:
            outcome.fallback = self._fallback(t, d_t, {})
            self._closed.add(t)
            return outcome
        self._issue_offers(t, rnd, sol, outcome, escalation=0)
        return outcome

    def _build_participants(self, t: int, exclude: set[str] = frozenset()) -> list[Participant]:
        out = []
        for party in self.type2_parties():
            if party in exclude:
                continue
            bus = self.parties()[party]["bus"]
            head = self._headroom(bus, t)
            if head <= 1e-9:
                continue
            col = self.day_ahead.bus_index(bus)
            lam = float(self.dlmp[t, col])
            u_eq = float(self.setpoints.offers.get(bus, np.zeros(self.scenario.horizon))[t]) \
                * self.scenario.network.base_mva
            out.append(Participant(self.profile_for(party, head), lam=lam, u_eq=u_eq))
        return out

    def _solve_round(self, t, d_t, participants):
        demand = min(d_t, sum(p.profile.u_max for p in participants))
        rnd = IncentiveRound(t=t, d_t=demand, b_min=self.cfg.b_min,
                             b_max=self.cfg.b_max, participants=tuple(participants))
        try:
            sol = solve_incentive_lp(build_incentive_lp(rnd, y_floor=self.cfg.y_floor))
        except IncentiveError as exc:
            self._declare_shortfall(t, d_t, f"incentive program: {exc.code}")
            return None, rnd
        if sol.status != "optimal":
            self._declare_shortfall(t, d_t, "incentive program infeasible")
            return None, rnd
        return sol, rnd

    def _issue_offers(self, t: int, rnd: IncentiveRound, sol, outcome: RoundOutcome,
                      escalation: int):
        op = self.key_for(OPERATOR)
        dt = self.scenario.dt
        for i, part in enumerate(rnd.participants):
            qty = float(sol.u[i])
            if qty <= 1e-9:
                continue
            lam_a = float(sol.lam_a[i])
            offer_id = f"t{t:02d}e{escalation}-{part.profile.id}"
            self.submit(make_tx(
                IncentiveOffer, OPERATOR, self.clock, op, offer_id=offer_id,
                crowdsourcee=part.profile.id, period=t, quantity=qty,
                energy=qty * dt, price=part.lam + lam_a, premium=lam_a,
                expiry=self.clock + self.cfg.response_window))
            self.open_offers[offer_id] = {
                "party": part.profile.id, "period": t, "quantity": qty,
                "lam": part.lam, "lam_a": lam_a, "y": float(sol.y[i]),
                "escalation": escalation, "status": "open"}
            outcome.offered.append({"offer_id": offer_id, "party": part.profile.id,
                                    "quantity": qty, "lam": part.lam, "lam_a": lam_a,
                                    "escalation": escalation})
        self.flush()

    def respond(self, offer_id: str, party: str, decision: str):
        """Queue an external (API) response; applied at close."""
        self.inbox.append((offer_id, party, decision))

    def _collect_responses(self, t: int) -> dict[str, bool | None]:
        """Committed API responses win; agent-backed offers answer their
        policy; silence (None) counts as rejection but puts nothing on
        the ledger."""
        decisions: dict[str, bool | None] = {}
        for offer_id, entry in sorted(self.open_offers.items()):
            if entry["period"] != t or entry["status"] != "open":
                continue
            onchain = self.ledger.state.offer(offer_id)
            if onchain is not None and onchain["status"] in ("accepted", "rejected"):
                decisions[offer_id] = onchain["status"] == "accepted"
                entry["responded_onchain"] = True
                continue
            agent = self.agent_for(entry["party"])
            if agent is None:
                decisions[offer_id] = None  # silence
            else:
                decisions[offer_id] = agent.respond(entry["lam"] + entry["lam_a"],
                                                    entry["quantity"])
        return decisions

    def _apply_responses(self, t: int, decisions: dict[str, bool | None],
                         outcome: RoundOutcome):
        for offer_id, accept in sorted(decisions.items()):
            entry = self.open_offers[offer_id]
            party = entry["party"]
            onchain = self.ledger.state.offer(offer_id)
            if accept is not None and onchain is not None and onchain["status"] == "open":
                self.submit(make_tx(OfferResponse, party, self.clock, self.key_for(party),
                                    offer_id=offer_id,
                                    decision="accept" if accept else "reject"))
            entry["status"] = "accepted" if accept else "rejected"
            self.profiles[party] = update_profile(self.profiles[party], bool(accept))
            if accept:
                outcome.accepted_quantity += entry["quantity"]
                outcome.accepted_premium += entry["y"]
        self.flush()

    def close_period(self, t: int) -> RoundOutcome:
        """Collect responses, escalate rejections, dispatch the fallback,
        meter deliveries."""
        outcome = self.outcomes.get(t)
        if outcome is None:
            raise SessionError(f"period {t} was never opened")
        if t in self._closed:
            return outcome
        decisions = self._collect_responses(t)
        self._apply_responses(t, decisions, outcome)
        policy = EscalationPolicy(gamma=self.cfg.gamma, max_rounds=self.cfg.max_rounds)

        escalation = 0
        while outcome.accepted_quantity < outcome.d_t - 1e-9:
            rejected = [oid for oid, e in sorted(self.open_offers.items())
                        if e["period"] == t and e["status"] == "rejected"
                        and e["escalation"] == escalation]
            if not rejected or escalation >= policy.max_rounds:
                break
            escalation += 1
            outcome.escalation_rounds = escalation
            round_participants = [e for e in (self.open_offers[o] for o in rejected)]
            if len(rejected) > self.cfg.resolve_fraction * max(1, len(outcome.offered)):
                # majority rejected: let the optimizer redo the split with the
                # updated willingness weights; parties already committed at
                # this period are left out
                outcome.resolves += 1
                committed = {e["party"] for e in self.open_offers.values()
                             if e["period"] == t and e["status"] in ("accepted", "open")}
                participants = self._build_participants(t, exclude=committed)
                residual = outcome.d_t - outcome.accepted_quantity
                sol, rnd = (None, None)
                if participants:
                    sol, rnd = self._solve_round(t, residual, participants)
                if sol is not None:
                    self._issue_offers(t, rnd, sol, outcome, escalation)
            else:
                for entry in round_participants:
                    budget_left = self.cfg.b_max - self._premium_committed(t)
                    cap = max(0.0, budget_left) / max(entry["quantity"], 1e-9)
                    new_lam_a = escalate(entry["lam_a"], policy, escalation - 1, cap)
                    if new_lam_a is None:
                        continue
                    source = dict(entry)
                    source["lam_a"] = new_lam_a
                    self._reoffer(t, source, escalation)
            decisions = self._collect_responses(t)
            self._apply_responses(t, decisions, outcome)

        residual = max(0.0, outcome.d_t - outcome.accepted_quantity)
        if residual > 1e-9:
            outcome.fallback = self._fallback(t, residual, self._accepted_by_bus(t))
        self._meter_period(t)
        self._closed.add(t)
        return outcome

    def _premium_committed(self, t: int) -> float:
        return sum(e["y"] for e in self.open_offers.values()
                   if e["period"] == t and e["status"] in ("open", "accepted"))

    def _reoffer(self, t: int, entry: dict, escalation: int):
        op = self.key_for(OPERATOR)
        party = entry["party"]
        offer_id = f"t{t:02d}e{escalation}-{party}"
        if offer_id in self.open_offers:
            return
        qty = entry["quantity"]
        self.submit(make_tx(
            IncentiveOffer, OPERATOR, self.clock, op, offer_id=offer_id,
            crowdsourcee=party, period=t, quantity=qty, energy=qty * self.scenario.dt,
            price=entry["lam"] + entry["lam_a"], premium=entry["lam_a"],
            expiry=self.clock + self.cfg.response_window))
        self.open_offers[offer_id] = dict(entry, lam_a=entry["lam_a"],
                                          y=entry["lam_a"] * qty,
                                          escalation=escalation, status="open")
        self.outcomes[t].offered.append({
            "offer_id": offer_id, "party": party, "quantity": qty,
            "lam": entry["lam"], "lam_a": entry["lam_a"], "escalation": escalation})
        self.flush()

    def _accepted_by_bus(self, t: int) -> dict[int, float]:
        out: dict[int, float] = {}
        for entry in self.open_offers.values():
            if entry["period"] == t and entry["status"] == "accepted":
                bus = self.parties()[entry["party"]]["bus"]
                out[bus] = out.get(bus, 0.0) + entry["quantity"]
        return out

    def _fallback(self, t: int, residual: float, accepted_by_bus: dict[int, float]) -> float:
        """Cover the residual from generators via a single-period redispatch."""
        adjust = fallback_dispatch(self, t, residual, accepted_by_bus)
        if adjust is None:
            self._declare_shortfall(t, residual, "fallback redispatch infeasible")
            self.outcomes[t].shortfall = residual
            return 0.0
        return residual

    def _declare_shortfall(self, t: int, mw: float, why: str):
        self.submit(make_tx(Notice, OPERATOR, self.clock, self.key_for(OPERATOR),
                            topic="shortfall", period=t, detail=f"{mw:.6f} MW: {why}"))
        self.flush()

    def _meter_period(self, t: int):
        """Meter accepted offers (full delivery at desk scale) and contracted
        day-ahead parties."""
        op = self.key_for(OPERATOR)
        dt = self.scenario.dt
        metered: dict[str, float] = {}
        for entry in self.open_offers.values():
            if entry["period"] == t and entry["status"] == "accepted":
                metered[entry["party"]] = metered.get(entry["party"], 0.0) \
                    + entry["quantity"] * dt
        for party, energy in sorted(metered.items()):
            self.submit(make_tx(MeterReading, OPERATOR, self.clock, op,
                                party=party, period=t, delivered=energy))
        for party in sorted(self.parties()):
            contract = self.ledger.state.kv.get(f"contract/{party}/{t}")
            if contract is not None and party not in metered:
                self.submit(make_tx(MeterReading, OPERATOR, self.clock, op,
                                    party=party, period=t,
                                    delivered=contract["energy"]))
        self.flush()

    def run_realtime_period(self, t: int, d_t: float | None = None) -> RoundOutcome:
        self.open_period(t, d_t)
        return self.close_period(t)

    # -- settlement --------------------------------------------------------

    def reconcile(self) -> list[str]:
        """One settlement per party covering delivered energy; returns the
        settled party ids."""
        from .ledger import to_cents

        op = self.key_for(OPERATOR)
        settled = []
        state = self.ledger.state
        for party in sorted(self.parties()):
            if party == OPERATOR:
                continue
            offer_ids, periods, amount = [], set(), 0
            for offer_id, entry in sorted(self.open_offers.items()):
                if entry["party"] != party:
                    continue
                onchain = state.offer(offer_id)
                if onchain is None or onchain["status"] != "accepted":
                    continue
                metered = state.kv.get(f"meter/{party}/{entry['period']}")
                if metered is None:
                    continue  # settlement deferred until the meter lands
                offer_ids.append(offer_id)
                periods.add(entry["period"])
                amount += to_cents(onchain["price"], min(metered, onchain["energy"]))
            contract_periods = []
            for t in range(self.scenario.horizon):
                contract = state.kv.get(f"contract/{party}/{t}")
                if contract is None or contract.get("settled"):
                    continue
                metered = state.kv.get(f"meter/{party}/{t}")
                if metered is None:
                    continue
                contract_periods.append(t)
                periods.add(t)
                amount += to_cents(contract["price"], min(metered, contract["energy"]))
            if not offer_ids and not contract_periods:
                continue
            self.submit(make_tx(
                Settlement, OPERATOR, self.clock, op, party=party,
                amount_cents=amount, periods=tuple(sorted(periods)),
                offer_ids=tuple(offer_ids), contract_periods=tuple(contract_periods),
                kind="incentive" if offer_ids else "contract"))
            settled.append(party)
        self.flush()
        return settled

    # -- full run and reporting --------------------------------------------

    def run(self) -> dict:
        self.run_day_ahead()
        for t in range(self.scenario.horizon):
            self.run_realtime_period(t)
        self.reconcile()
        return self.report()

    def report(self) -> dict:
        da = self.day_ahead
        kv = self.ledger.state.kv
        incentive_paid = 0
        contract_paid = 0
        for key, offer in kv.items():
            if key.startswith("offer/") and offer["status"] == "settled":
                metered = kv.get(f"meter/{offer['crowdsourcee']}/{offer['period']}", 0.0)
                from .ledger import to_cents

                incentive_paid += to_cents(offer["price"], min(metered, offer["energy"]))
        for key, contract in kv.items():
            if key.startswith("contract/") and isinstance(contract, dict) \
                    and contract.get("settled"):
                party, period = key.split("/")[1:]
                metered = kv.get(f"meter/{party}/{period}", 0.0)
                from .ledger import to_cents

                contract_paid += to_cents(contract["price"],
                                          min(metered, contract["energy"]))
        return {
            "seed": self.cfg.seed,
            "horizon": self.scenario.horizon,
            "objective": da.objective if da else None,
            "residuals": {k: float(v) for k, v in (da.residuals if da else {}).items()},
            "rounds": [self.outcomes[t].to_json() for t in sorted(self.outcomes)],
            "ordering": dict(self.ordering.stats),
            "ledger_height": self.ledger.height,
            "state_hash": self.ledger.state_hash().hex(),
            "costs": {"day_ahead_objective": da.objective if da else None,
                      "incentive_paid_cents": incentive_paid,
                      "contract_paid_cents": contract_paid},
            "balances": {k.split("/", 1)[1]: v for k, v in
                         sorted(self.ledger.state.kv.items())
                         if k.startswith("balance/")},
        }

    def verify_conservation(self) -> bool:
        """Double entry: every settled cent left the operator's account."""
        total = sum(v for k, v in self.ledger.state.kv.items() if k.startswith("balance/"))
        return total == self.cfg.operator_funds_cents

    def incentives_csv(self) -> str:
        rows = ["period,offer_id,party,quantity_mw,lam_per_mwh,lam_a_per_mwh,escalation,status"]
        for offer_id, e in sorted(self.open_offers.items()):
            onchain = self.ledger.state.offer(offer_id)
            status = onchain["status"] if onchain else e["status"]
            rows.append(f"{e['period']},{offer_id},{e['party']},{e['quantity']:.6f},"
                        f"{e['lam']:.6f},{e['lam_a']:.6f},{e['escalation']},{status}")
        return "\n".join(rows) + "\n"


def fallback_dispatch(session: MarketSession, t: int, residual: float,
                      accepted_by_bus: dict[int, float] | None = None) -> dict[str, float] | None:
    """Supplement the residual shortage from generators.

    Re-solves period t with every non-generator device pinned at its
    day-ahead schedule (accepted type-2 quantities already net out of the
    residual) and the residual added as load at the feeder head.  Returns
    generator adjustments in MW relative to day-ahead, or None when the
    redispatch is infeasible.
    """
    scn = session.scenario
    S = scn.network.base_mva
    da = session.day_ahead
    gens = [d for d in scn.network.devices if isinstance(d, Generator)]
    if residual <= 1e-12:
        return {d.id: 0.0 for d in gens}
    # day-ahead net injection per bus minus the generator share
    pos = {b: i for i, b in enumerate(da.bus_ids)}
    fixed = da.p_inj[t].copy()
    for d in gens:
        fixed[pos[d.bus]] -= float(da.schedules[f"pg:{d.id}"][t])
    exclude = {d.id for d in scn.network.devices if not isinstance(d, Generator)}
    try:
        program = opf.build_opf(
            scn, periods=[t], exclude_devices=exclude,
            fixed_injection={b: fixed[pos[b]] for b in da.bus_ids},
            extra_load={scn.network.root: residual / S})
        sol = opf.solve_opf(program)
    except opf.OpfError:
        return None
    if sol.status != "optimal":
        return None
    out = {}
    for d in gens:
        new = float(sol.schedules[f"pg:{d.id}"][0]) * S
        old = float(da.schedules[f"pg:{d.id}"][t]) * S
        out[d.id] = new - old
    return out
