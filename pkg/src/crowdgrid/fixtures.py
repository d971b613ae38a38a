"""Deterministic test feeders and demo scenarios.

The 6-bus feeder is the canonical small fixture; ``synthetic_feeder`` grows
a reproducible radial network of any size (the bundled 56-bus case is built
with seed 7).  Real line data for utility feeders is not shipped; impedances
here are representative per-unit values for a ~12 kV distribution feeder on
a 1 MVA base (see README for the conversion note).
"""

from __future__ import annotations

import math

import numpy as np

from .network import (
    Bus,
    FeederNetwork,
    Generator,
    Line,
    Scenario,
    derive_scenario,
)


def residential_profile(peak: float, phase: float = 0.0, horizon: int = 24) -> list[float]:
    """Double-hump daily load: small morning peak, larger evening peak."""
    out = []
    for t in range(horizon):
        h = (t + phase) % 24
        morning = 0.35 * math.exp(-((h - 8.0) ** 2) / 8.0)
        evening = 1.0 * math.exp(-((h - 20.0) ** 2) / 10.0)
        out.append(peak * (0.30 + morning + evening) / 1.30)
    return out


def price_profile(base: float = 30.0, swing: float = 25.0, peak_hour: float = 13.0,
                  horizon: int = 24) -> list[float]:
    """Bulk energy price in $/MWh peaking near midday."""
    return [base + swing * math.exp(-((t - peak_hour) ** 2) / 18.0) for t in range(horizon)]


def feeder6() -> FeederNetwork:
    """Six buses: substation root plus a five-bus tree, generator at the root
    and a small pricier unit downstream."""
    buses = (
        Bus(0, kind="root"),
        Bus(1, kind="crowdsourcee"),
        Bus(2, kind="crowdsourcee"),
        Bus(3, kind="load"),
        Bus(4, kind="crowdsourcee"),
        Bus(5, kind="load"),
    )
    lines = (
        Line(0, 1, r=0.010, x=0.012, s_max=5.0),
        Line(1, 2, r=0.008, x=0.010, s_max=3.0),
        Line(2, 3, r=0.012, x=0.012, s_max=2.0),
        Line(1, 4, r=0.009, x=0.011, s_max=3.0),
        Line(4, 5, r=0.011, x=0.013, s_max=2.0),
    )
    devices = (
        Generator(id="gen-root", bus=0, a=12.0, b=28.0, p_min=0.0, p_max=6.0,
                  q_min=-4.0, q_max=4.0),
        Generator(id="gen-3", bus=3, a=40.0, b=55.0, p_min=0.0, p_max=0.5,
                  q_min=-0.3, q_max=0.3),
    )
    return FeederNetwork(buses=buses, lines=lines, devices=devices, base_mva=1.0, base_kv=12.0)


def synthetic_feeder(n_buses: int, seed: int = 7, peak_range=(0.02, 0.06)) -> FeederNetwork:
    """Reproducible radial feeder with a substation generator at the root.

    The tree prefers long laterals (max 3 children per bus) so depth grows
    roughly like a real feeder's.
    """
    rng = np.random.default_rng(seed)
    buses = [Bus(0, kind="root")]
    lines = []
    child_count = {0: 0}
    kinds = ("crowdsourcee", "load")
    attachable = [0]
    for i in range(1, n_buses):
        parent = int(attachable[rng.integers(len(attachable))])
        child_count[parent] += 1
        if child_count[parent] >= 3:
            attachable.remove(parent)
        child_count[i] = 0
        attachable.append(i)
        # bias toward deep chains: newest bus is attach-preferred
        if rng.random() < 0.6:
            attachable = [b for b in attachable if b != i] + [i, i]
        buses.append(Bus(i, kind=kinds[int(rng.integers(2))]))
        r = float(rng.uniform(0.002, 0.006))
        lines.append(Line(parent, i, r=r, x=r * float(rng.uniform(1.0, 1.4)), s_max=6.0))
    peak_total = n_buses * np.mean(peak_range)
    devices = (
        Generator(id="gen-root", bus=0, a=8.0, b=30.0, p_min=0.0,
                  p_max=4.0 * peak_total, q_min=-3.0 * peak_total, q_max=3.0 * peak_total),
    )
    return FeederNetwork(buses=tuple(buses), lines=tuple(lines), devices=devices,
                         base_mva=1.0, base_kv=12.0)


def demo_profiles(network: FeederNetwork, seed: int = 7, peak_range=(0.02, 0.06),
                  horizon: int = 24) -> dict[int, list[float]]:
    """Per-bus uncontrollable load profiles for every non-root bus."""
    rng = np.random.default_rng(seed + 1)
    out = {}
    for b in network.buses:
        if b.kind == "root":
            continue
        peak = float(rng.uniform(*peak_range))
        phase = float(rng.uniform(-1.5, 1.5))
        out[b.id] = residential_profile(peak, phase, horizon)
    return out


def _window_rules(horizon: int) -> dict:
    """Clamp the deferrable-load window/duration for short test horizons."""
    if horizon >= 24:
        return {}
    lo = max(0, horizon * 3 // 8)
    return {"shapable_window": (lo, horizon),
            "shapable_duration_hours": min(7.0, float(horizon - lo))}


def scenario6(horizon: int = 24) -> Scenario:
    """Canonical 6-bus scenario with the full DER fleet and midday prices."""
    net = feeder6()
    profiles = {
        1: residential_profile(0.20, 0.0, horizon),
        2: residential_profile(0.15, 0.5, horizon),
        3: residential_profile(0.25, -0.5, horizon),
        4: residential_profile(0.18, 1.0, horizon),
        5: residential_profile(0.12, -1.0, horizon),
    }
    net = _with_midday_prices(net, horizon)
    return derive_scenario(net, profiles, horizon=horizon, **_window_rules(horizon))


def scenario56(horizon: int = 24, seed: int = 7) -> Scenario:
    """56-bus scenario built by the per-bus peak sizing rules."""
    net = synthetic_feeder(56, seed=seed)
    net = _with_midday_prices(net, horizon)
    return derive_scenario(net, demo_profiles(net, seed=seed), horizon=horizon,
                           **_window_rules(horizon))


def _with_midday_prices(net: FeederNetwork, horizon: int) -> FeederNetwork:
    prices = tuple(price_profile(horizon=horizon))
    devices = tuple(
        d if d.type != "generator" else
        Generator(id=d.id, bus=d.bus, a=d.a, b=d.b, c=d.c, p_min=d.p_min, p_max=d.p_max,
                  q_min=d.q_min, q_max=d.q_max, b_profile=prices, owner_class=d.owner_class)
        for d in net.devices)
    return FeederNetwork(buses=net.buses, lines=net.lines, devices=devices,
                         base_mva=net.base_mva, base_kv=net.base_kv)


def two_bus_scenario(r: float = 0.01, x: float = 0.01, load: float = 1.0,
                     q_load: float = 0.0) -> Scenario:
    """Minimal two-bus case: quadratic-cost generator at the root, one load."""
    from .network import UncontrollableLoad

    buses = (Bus(0, kind="root", v_min=0.5, v_max=1.5),
             Bus(1, kind="load", v_min=0.5, v_max=1.5))
    lines = (Line(0, 1, r=r, x=x, s_max=10.0),)
    devices = (
        Generator(id="g0", bus=0, a=1.0, b=0.0, p_min=-10.0, p_max=10.0,
                  q_min=-10.0, q_max=10.0),
        UncontrollableLoad(id="d1", bus=1, profile_p=(load,), profile_q=(q_load,)),
    )
    net = FeederNetwork(buses=buses, lines=lines, devices=devices, base_mva=1.0)
    return Scenario(network=net, horizon=1, dt=1.0)
