"""Radial distribution feeder model: buses, lines, device fleet, scenarios.

All powers are per-unit on ``base_mva``; voltages are squared magnitudes in
p.u.^2.  Networks are immutable after loading and safe to share across
threads; construction and validation are single-threaded.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

ROOT = "root"
BUS_KINDS = ("root", "generator", "crowdsourcee", "load")
OWNER_CLASSES = ("utility", "type1", "type2")

_KIND_ALIASES = {"substation-root": "root", "substation": "root"}


class FeederError(Exception):
    """Raised on malformed feeder/scenario input. ``code`` is machine-readable."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


@dataclass(frozen=True)
class Bus:
    id: int
    kind: str = "load"
    v_min: float = 0.95**2
    v_max: float = 1.05**2


@dataclass(frozen=True)
class Line:
    frm: int  # parent bus
    to: int  # child bus
    r: float
    x: float
    s_max: float = 10.0


@dataclass(frozen=True)
class Generator:
    """Dispatchable generator with quadratic cost a*p^2 + b*p + c ($/h, p in MW)."""

    id: str
    bus: int
    a: float
    b: float
    c: float = 0.0
    p_min: float = 0.0
    p_max: float = 10.0
    q_min: float | None = None  # defaults to -p_max
    q_max: float | None = None  # defaults to +p_max
    b_profile: tuple[float, ...] | None = None  # per-period $/MWh overriding b
    owner_class: str = "utility"
    type = "generator"

    def q_bounds(self) -> tuple[float, float]:
        lo = -self.p_max if self.q_min is None else self.q_min
        hi = self.p_max if self.q_max is None else self.q_max
        return lo, hi


@dataclass(frozen=True)
class SolarPanel:
    """Rooftop solar. Type-1 owners inject the full profile; type-2 output is
    curtailable between zero and the profile."""

    id: str
    bus: int
    profile: tuple[float, ...]
    owner_class: str = "type2"
    type = "solar"


@dataclass(frozen=True)
class Battery:
    """Stationary battery; sign convention: p > 0 charges."""

    id: str
    bus: int
    p_cap: float
    e_cap: float
    e0: float = 0.0
    cost_a: float = 0.0  # optional quadratic use cost $/MWh^2
    owner_class: str = "type2"
    type = "battery"


@dataclass(frozen=True)
class ShapableLoad:
    """Deferrable load: fixed total energy, flexible power inside a window."""

    id: str
    bus: int
    energy_demand: float  # p.u.-hours over the horizon
    p_max: float
    window: tuple[int, int] = (0, 24)  # [start, end) periods
    cost_a: float = 0.0
    owner_class: str = "type2"
    type = "shapable"


@dataclass(frozen=True)
class UncontrollableLoad:
    id: str
    bus: int
    profile_p: tuple[float, ...]
    profile_q: tuple[float, ...] = ()
    owner_class: str = "utility"
    type = "load"

    def q_at(self, t: int) -> float:
        return self.profile_q[t] if self.profile_q else 0.0


Device = Generator | SolarPanel | Battery | ShapableLoad | UncontrollableLoad

_DEVICE_TYPES = {
    "generator": Generator,
    "solar": SolarPanel,
    "battery": Battery,
    "shapable": ShapableLoad,
    "load": UncontrollableLoad,
}


@dataclass(frozen=True)
class FeederNetwork:
    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    devices: tuple[Device, ...] = ()
    base_mva: float = 1.0
    base_kv: float = 12.0

    @property
    def root(self) -> int:
        for b in self.buses:
            if b.kind == ROOT:
                return b.id
        raise FeederError("missing-root", "network has no substation-root bus")

    def bus(self, bus_id: int) -> Bus:
        for b in self.buses:
            if b.id == bus_id:
                return b
        raise KeyError(bus_id)

    def parent_line(self, bus_id: int) -> Line | None:
        for ln in self.lines:
            if ln.to == bus_id:
                return ln
        return None

    def children(self, bus_id: int) -> list[int]:
        return [ln.to for ln in self.lines if ln.frm == bus_id]

    def devices_at(self, bus_id: int) -> list[Device]:
        return [d for d in self.devices if d.bus == bus_id]

    def dfs_order(self) -> list[int]:
        """Depth-first bus order from the root; visits each bus exactly once
        on a valid tree."""
        order, stack, seen = [], [self.root], set()
        while stack:
            b = stack.pop()
            if b in seen:
                continue
            seen.add(b)
            order.append(b)
            stack.extend(sorted(self.children(b), reverse=True))
        return order


@dataclass(frozen=True)
class Scenario:
    """A network plus the 24-period (or T-period) market horizon.

    ``agents`` maps bus id -> response-policy config for type-2 owners;
    ``market`` carries session knobs (budget range, escalation, ordering)
    consumed by the orchestrator; ``realized_factors`` scales uncontrollable
    load per period to create a realtime shortage against the forecast.
    """

    network: FeederNetwork
    horizon: int = 24
    dt: float = 1.0
    agents: dict = field(default_factory=dict)
    market: dict = field(default_factory=dict)
    realized_factors: dict = field(default_factory=dict)

    def type2_buses(self) -> list[int]:
        out = []
        for d in self.network.devices:
            if d.owner_class == "type2" and d.bus not in out:
                out.append(d.bus)
        return sorted(out)


# ---------------------------------------------------------------------------
# validation


def validate(network: FeederNetwork) -> list[str]:
    """Return every invariant violation (empty list means the network is ok)."""
    out: list[str] = []
    ids = [b.id for b in network.buses]
    if len(ids) != len(set(ids)):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        out.append(f"duplicate bus id(s): {dupes}")
    roots = [b.id for b in network.buses if b.kind == ROOT]
    if not roots:
        out.append("no substation-root bus")
    elif len(roots) > 1:
        out.append(f"multiple substation-root buses: {roots}")
    for b in network.buses:
        if b.kind not in BUS_KINDS:
            out.append(f"bus {b.id}: unknown kind {b.kind!r}")
        if b.v_min > b.v_max:
            out.append(f"bus {b.id}: v_min > v_max")
    id_set = set(ids)
    for ln in network.lines:
        if ln.r < 0:
            out.append(f"line {ln.frm}-{ln.to}: negative resistance")
        if ln.x < 0:
            out.append(f"line {ln.frm}-{ln.to}: negative reactance")
        if ln.s_max <= 0:
            out.append(f"line {ln.frm}-{ln.to}: nonpositive thermal limit")
        if ln.frm not in id_set or ln.to not in id_set:
            out.append(f"line {ln.frm}-{ln.to}: unknown endpoint")
    if len(roots) == 1 and all(ln.frm in id_set and ln.to in id_set for ln in network.lines):
        out.extend(_tree_violations(network, roots[0]))
    dev_ids = [d.id for d in network.devices]
    if len(dev_ids) != len(set(dev_ids)):
        out.append("duplicate device id(s)")
    for d in network.devices:
        if d.bus not in id_set:
            out.append(f"device {d.id}: unknown bus {d.bus}")
        if d.owner_class not in OWNER_CLASSES:
            out.append(f"device {d.id}: unknown owner_class {d.owner_class!r}")
        out.extend(_device_violations(d))
    return out


def _tree_violations(network: FeederNetwork, root: int) -> list[str]:
    out = []
    n, e = len(network.buses), len(network.lines)
    if e != n - 1:
        out.append(f"edge count {e} != bus count - 1 ({n - 1})")
    parents: dict[int, int] = {}
    for ln in network.lines:
        if ln.to in parents:
            out.append(f"bus {ln.to}: multiple parent lines (cycle or reconvergence)")
        parents[ln.to] = ln.frm
    if root in parents:
        out.append("root bus has a parent line")
    seen = set()
    stack = [root]
    while stack:
        b = stack.pop()
        if b in seen:
            out.append(f"cycle detected at bus {b}")
            return out
        seen.add(b)
        stack.extend(c for c in (ln.to for ln in network.lines if ln.frm == b))
    unreachable = sorted(b.id for b in network.buses if b.id not in seen)
    if unreachable:
        out.append(f"cycle or disconnected component: buses {unreachable} unreachable from root")
    return out


def _device_violations(d: Device) -> list[str]:
    out = []
    if isinstance(d, Generator):
        if d.p_min > d.p_max:
            out.append(f"generator {d.id}: p_min > p_max")
        if d.a < 0:
            out.append(f"generator {d.id}: negative quadratic cost")
    elif isinstance(d, Battery):
        if d.p_cap < 0 or d.e_cap < 0:
            out.append(f"battery {d.id}: negative capacity")
        if d.e0 > d.e_cap or d.e0 < 0:
            out.append(f"battery {d.id}: e0 outside [0, e_cap]")
    elif isinstance(d, ShapableLoad):
        lo, hi = d.window
        if not (0 <= lo < hi):
            out.append(f"shapable {d.id}: bad window {d.window}")
        if d.p_max < 0 or d.energy_demand < 0:
            out.append(f"shapable {d.id}: negative capacity")
        if d.energy_demand > d.p_max * (hi - lo) + 1e-12:
            out.append(f"shapable {d.id}: energy demand unreachable inside window")
    elif isinstance(d, SolarPanel):
        if any(p < 0 for p in d.profile):
            out.append(f"solar {d.id}: negative profile entry")
    elif isinstance(d, UncontrollableLoad):
        if d.profile_q and len(d.profile_q) != len(d.profile_p):
            out.append(f"load {d.id}: p/q profile length mismatch")
    return out


def check_scenario(scn: Scenario) -> list[str]:
    out = list(validate(scn.network))
    if scn.horizon < 1:
        out.append("horizon must be >= 1")
    if scn.dt <= 0:
        out.append("dt must be positive")
    T = scn.horizon
    for d in scn.network.devices:
        if isinstance(d, SolarPanel) and len(d.profile) != T:
            out.append(f"solar {d.id}: profile length {len(d.profile)} != horizon {T}")
        if isinstance(d, UncontrollableLoad) and len(d.profile_p) != T:
            out.append(f"load {d.id}: profile length {len(d.profile_p)} != horizon {T}")
        if isinstance(d, ShapableLoad) and d.window[1] > T:
            out.append(f"shapable {d.id}: window {d.window} outside horizon {T}")
    return out


# ---------------------------------------------------------------------------
# JSON serialization


def _bus_to_json(b: Bus) -> dict:
    return {"id": b.id, "kind": b.kind, "v_min": b.v_min, "v_max": b.v_max}


def _line_to_json(ln: Line) -> dict:
    return {"from": ln.frm, "to": ln.to, "r": ln.r, "x": ln.x, "s_max": ln.s_max}


def _device_to_json(d: Device) -> dict:
    out = {"id": d.id, "bus": d.bus, "type": d.type, "owner_class": d.owner_class}
    if isinstance(d, Generator):
        out.update(a=d.a, b=d.b, c=d.c, p_min=d.p_min, p_max=d.p_max)
        if d.q_min is not None:
            out["q_min"] = d.q_min
        if d.q_max is not None:
            out["q_max"] = d.q_max
        if d.b_profile is not None:
            out["b_profile"] = list(d.b_profile)
    elif isinstance(d, SolarPanel):
        out["profile"] = list(d.profile)
    elif isinstance(d, Battery):
        out.update(p_cap=d.p_cap, e_cap=d.e_cap, e0=d.e0)
        if d.cost_a:
            out["cost_a"] = d.cost_a
    elif isinstance(d, ShapableLoad):
        out.update(energy_demand=d.energy_demand, p_max=d.p_max, window=list(d.window))
        if d.cost_a:
            out["cost_a"] = d.cost_a
    elif isinstance(d, UncontrollableLoad):
        out["profile"] = list(d.profile_p)
        if d.profile_q:
            out["profile_q"] = list(d.profile_q)
    return out


def network_to_json(network: FeederNetwork) -> dict:
    return {
        "base_mva": network.base_mva,
        "base_kv": network.base_kv,
        "buses": [_bus_to_json(b) for b in network.buses],
        "lines": [_line_to_json(ln) for ln in network.lines],
        "devices": [_device_to_json(d) for d in network.devices],
    }


def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise FeederError("parse-error", f"{where}: missing field {key!r}")
    return obj[key]


def _device_from_json(obj: dict, idx: int) -> Device:
    where = f"devices[{idx}]"
    dtype = _require(obj, "type", where)
    bus = _require(obj, "bus", where)
    owner = obj.get("owner_class", "utility")
    dev_id = obj.get("id", f"{dtype}-{bus}")
    try:
        if dtype == "generator":
            b_prof = obj.get("b_profile")
            return Generator(
                id=dev_id, bus=bus, a=_require(obj, "a", where), b=_require(obj, "b", where),
                c=obj.get("c", 0.0), p_min=obj.get("p_min", 0.0), p_max=obj.get("p_max", 10.0),
                q_min=obj.get("q_min"), q_max=obj.get("q_max"),
                b_profile=tuple(b_prof) if b_prof else None, owner_class=owner)
        if dtype == "solar":
            return SolarPanel(id=dev_id, bus=bus, profile=tuple(_require(obj, "profile", where)),
                              owner_class=owner)
        if dtype == "battery":
            return Battery(id=dev_id, bus=bus, p_cap=_require(obj, "p_cap", where),
                           e_cap=_require(obj, "e_cap", where), e0=obj.get("e0", 0.0),
                           cost_a=obj.get("cost_a", 0.0), owner_class=owner)
        if dtype == "shapable":
            return ShapableLoad(id=dev_id, bus=bus,
                                energy_demand=_require(obj, "energy_demand", where),
                                p_max=_require(obj, "p_max", where),
                                window=tuple(obj.get("window", (0, 24))),
                                cost_a=obj.get("cost_a", 0.0), owner_class=owner)
        if dtype == "load":
            return UncontrollableLoad(id=dev_id, bus=bus,
                                      profile_p=tuple(_require(obj, "profile", where)),
                                      profile_q=tuple(obj.get("profile_q", ())),
                                      owner_class=owner)
    except TypeError as exc:
        raise FeederError("parse-error", f"{where}: {exc}") from exc
    raise FeederError("parse-error", f"{where}: unknown device type {dtype!r}")


def network_from_json(obj: dict) -> FeederNetwork:
    buses = []
    for i, b in enumerate(obj.get("buses", [])):
        kind = b.get("kind", "load")
        kind = _KIND_ALIASES.get(kind, kind)
        buses.append(Bus(id=_require(b, "id", f"buses[{i}]"), kind=kind,
                         v_min=b.get("v_min", 0.95**2), v_max=b.get("v_max", 1.05**2)))
    lines = []
    for i, ln in enumerate(obj.get("lines", [])):
        lines.append(Line(frm=_require(ln, "from", f"lines[{i}]"),
                          to=_require(ln, "to", f"lines[{i}]"),
                          r=_require(ln, "r", f"lines[{i}]"),
                          x=_require(ln, "x", f"lines[{i}]"),
                          s_max=ln.get("s_max", 10.0)))
    devices = tuple(_device_from_json(d, i) for i, d in enumerate(obj.get("devices", [])))
    network = FeederNetwork(buses=tuple(buses), lines=tuple(lines), devices=devices,
                            base_mva=obj.get("base_mva", 1.0), base_kv=obj.get("base_kv", 12.0))
    problems = validate(network)
    if problems:
        code = "invalid-network"
        joined = "; ".join(problems)
        if any("cycle" in p or "unreachable" in p for p in problems):
            code = "cycle-detected"
        elif any("duplicate" in p for p in problems):
            code = "duplicate-id"
        elif any("multiple substation-root" in p for p in problems):
            code = "duplicate-root"
        elif any("root" in p for p in problems):
            code = "missing-root"
        raise FeederError(code, joined)
    return network


def load_feeder(path: str | Path) -> FeederNetwork:
    """Load and validate a feeder JSON file."""
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FeederError("parse-error", f"{path}: line {exc.lineno} col {exc.colno}: {exc.msg}") from exc
    if not isinstance(obj, dict):
        raise FeederError("parse-error", f"{path}: top level must be an object")
    return network_from_json(obj)


def save_feeder(network: FeederNetwork, path: str | Path):
    Path(path).write_text(json.dumps(network_to_json(network), indent=1, sort_keys=True))


def scenario_to_json(scn: Scenario) -> dict:
    return {
        "horizon": scn.horizon,
        "dt": scn.dt,
        "network": network_to_json(scn.network),
        "agents": scn.agents,
        "market": scn.market,
        "realized_factors": scn.realized_factors,
    }


def scenario_from_json(obj: dict) -> Scenario:
    return Scenario(
        network=network_from_json(_require(obj, "network", "scenario")),
        horizon=obj.get("horizon", 24),
        dt=obj.get("dt", 1.0),
        agents={int(k): v for k, v in obj.get("agents", {}).items()},
        market=obj.get("market", {}),
        realized_factors={int(k): v for k, v in obj.get("realized_factors", {}).items()},
    )


def load_scenario(path: str | Path, feeder: FeederNetwork | None = None) -> Scenario:
    """Load a scenario JSON file.

    Two layouts are accepted: a self-contained file with an embedded
    ``network``, or a profile file ``{horizon, dt, profiles, ...}`` to be
    combined with ``feeder`` via the peak-load sizing rules.
    """
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FeederError("parse-error", f"{path}: line {exc.lineno} col {exc.colno}: {exc.msg}") from exc
    if "network" in obj:
        return scenario_from_json(obj)
    if feeder is None:
        raise FeederError("parse-error", f"{path}: no embedded network and no feeder supplied")
    profiles = {int(k): v for k, v in _require(obj, "profiles", "scenario").items()}
    scn = derive_scenario(feeder, profiles, horizon=obj.get("horizon", 24),
                          dt=obj.get("dt", 1.0), **obj.get("rules", {}))
    return replace(scn,
                   agents={int(k): v for k, v in obj.get("agents", {}).items()},
                   market=obj.get("market", {}),
                   realized_factors={int(k): v for k, v in obj.get("realized_factors", {}).items()})


# ---------------------------------------------------------------------------
# scenario derivation from peak-load sizing rules


def derive_scenario(
    network: FeederNetwork,
    uncontrollable_profiles: dict[int, list | dict],
    *,
    horizon: int = 24,
    dt: float = 1.0,
    battery_power_ratio: float = 0.8,
    battery_hours: float = 4.0,
    solar_peak_ratio: float = 1.5,
    shapable_energy_ratio: float = 5.0,
    shapable_duration_hours: float = 7.0,
    shapable_window: tuple[int, int] = (9, 24),
    load_power_factor: float = 0.95,
    solar_shape: list[float] | None = None,
    owner_cycle: tuple[str, ...] = ("type1", "type2"),
) -> Scenario:
    """Build a full DER fleet from per-bus uncontrollable load profiles.

    Sizing rules, per bus: battery power = ``battery_power_ratio`` x peak
    load with ``battery_hours`` of storage; solar peak = ``solar_peak_ratio``
    x peak load; deferrable energy = ``shapable_energy_ratio`` x peak load x
    1 h, schedulable inside ``shapable_window`` and completable in
    ``shapable_duration_hours`` at full power.  DER ownership alternates
    through ``owner_cycle`` in bus-id order so both commitment types appear.
    """
    devices: list[Device] = [d for d in network.devices]
    shape = solar_shape or _default_solar_shape(horizon)
    if len(shape) != horizon:
        raise FeederError("parse-error", f"solar shape length != horizon {horizon}")
    shape_peak = max(shape)  # zero when the horizon misses daylight: no solar added
    tan_phi = math.tan(math.acos(load_power_factor)) if load_power_factor < 1.0 else 0.0
    der_buses = sorted(uncontrollable_profiles)
    for pos, bus_id in enumerate(der_buses):
        prof = uncontrollable_profiles[bus_id]
        if isinstance(prof, dict):
            p_prof = [float(v) for v in prof["p"]]
            q_prof = [float(v) for v in prof.get("q", [])]
        else:
            p_prof = [float(v) for v in prof]
            q_prof = [v * tan_phi for v in p_prof]
        if len(p_prof) != horizon:
            raise FeederError("profile-length", f"bus {bus_id}: profile length {len(p_prof)} != {horizon}")
        peak = max(p_prof)
        if peak <= 0:
            raise FeederError("nonpositive-peak", f"bus {bus_id}: peak uncontrollable load must be positive")
        owner = owner_cycle[pos % len(owner_cycle)]
        p_cap = battery_power_ratio * peak
        energy = shapable_energy_ratio * peak * 1.0
        devices.append(UncontrollableLoad(
            id=f"load-{bus_id}", bus=bus_id, profile_p=tuple(p_prof), profile_q=tuple(q_prof)))
        devices.append(Battery(
            id=f"battery-{bus_id}", bus=bus_id, p_cap=p_cap, e_cap=battery_hours * p_cap,
            e0=0.5 * battery_hours * p_cap, owner_class=owner))
        if shape_peak > 0:
            solar_scale = solar_peak_ratio * peak / shape_peak
            devices.append(SolarPanel(
                id=f"solar-{bus_id}", bus=bus_id,
                profile=tuple(solar_scale * s for s in shape), owner_class=owner))
        devices.append(ShapableLoad(
            id=f"shapable-{bus_id}", bus=bus_id, energy_demand=energy,
            p_max=energy / shapable_duration_hours, window=shapable_window,
            owner_class=owner))
    out = Scenario(network=replace(network, devices=tuple(devices)), horizon=horizon, dt=dt)
    problems = check_scenario(out)
    if problems:
        raise FeederError("invalid-scenario", "; ".join(problems))
    return out


def _default_solar_shape(horizon: int) -> list[float]:
    # Clear-sky bell centered on hour 12, zero before 6 and after 19.
    out = []
    for t in range(horizon):
        h = t % 24
        out.append(max(0.0, math.sin(math.pi * (h - 6) / 13)) if 6 <= h <= 19 else 0.0)
    return out
