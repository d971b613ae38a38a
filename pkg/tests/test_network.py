import json
from dataclasses import replace

import pytest

from crowdgrid import fixtures
from crowdgrid.network import (
    Battery,
    Bus,
    FeederError,
    FeederNetwork,
    Line,
    SolarPanel,
    UncontrollableLoad,
    derive_scenario,
    load_feeder,
    network_from_json,
    network_to_json,
    validate,
)


def test_feeder6_valid():
    net = fixtures.feeder6()
    assert validate(net) == []
    assert len(net.buses) == 6 and len(net.lines) == 5


def test_feeder56_tree_arithmetic():
    net = fixtures.synthetic_feeder(56)
    assert validate(net) == []
    assert len(net.buses) == 56
    assert len(net.lines) == 55  # |E| = |N| - 1


def test_dfs_visits_every_bus_once():
    net = fixtures.synthetic_feeder(30, seed=3)
    order = net.dfs_order()
    assert sorted(order) == sorted(b.id for b in net.buses)


def test_roundtrip_serialization(tmp_path):
    scn = fixtures.scenario6(horizon=4)
    obj = network_to_json(scn.network)
    path = tmp_path / "f.json"
    path.write_text(json.dumps(obj))
    back = load_feeder(path)
    assert back == scn.network


def test_cycle_detected():
    obj = {
        "buses": [{"id": 0, "kind": "root"}, {"id": 1}, {"id": 2}],
        "lines": [{"from": 0, "to": 1, "r": 0.01, "x": 0.01},
                  {"from": 1, "to": 2, "r": 0.01, "x": 0.01},
                  {"from": 2, "to": 1, "r": 0.01, "x": 0.01}],
    }
    with pytest.raises(FeederError) as err:
        network_from_json(obj)
    assert err.value.code == "cycle-detected"


def test_duplicate_root_rejected():
    obj = {
        "buses": [{"id": 0, "kind": "root"}, {"id": 1, "kind": "substation-root"}],
        "lines": [{"from": 0, "to": 1, "r": 0.01, "x": 0.01}],
    }
    with pytest.raises(FeederError) as err:
        network_from_json(obj)
    assert err.value.code == "duplicate-root"


def test_missing_root_rejected():
    obj = {"buses": [{"id": 0}, {"id": 1}],
           "lines": [{"from": 0, "to": 1, "r": 0.01, "x": 0.01}]}
    with pytest.raises(FeederError) as err:
        network_from_json(obj)
    assert err.value.code == "missing-root"


def test_parse_error_reports_location(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{\n  broken\n}")
    with pytest.raises(FeederError) as err:
        load_feeder(path)
    assert err.value.code == "parse-error"
    assert "line 2" in str(err.value)


def test_validate_reports_every_violation():
    net = FeederNetwork(
        buses=(Bus(0, kind="root"), Bus(1)),
        lines=(Line(0, 1, r=-0.01, x=0.01),),
        devices=(Battery(id="b", bus=1, p_cap=1.0, e_cap=1.0, e0=2.0),),
    )
    problems = validate(net)
    assert any("negative resistance" in p for p in problems)
    assert any("e0" in p for p in problems)
    assert len(problems) == 2


def test_derive_rules_battery_and_solar():
    # peak 100 kW -> battery 80 kW / 320 kWh, solar peak 150 kW
    net = FeederNetwork(buses=(Bus(0, kind="root"), Bus(1, kind="crowdsourcee")),
                        lines=(Line(0, 1, r=0.01, x=0.01),))
    profile = [0.05] * 24
    profile[18] = 0.100  # peak 100 kW on a 1 MVA base
    scn = derive_scenario(net, {1: profile})
    bat = next(d for d in scn.network.devices if isinstance(d, Battery))
    assert bat.p_cap == pytest.approx(0.080)
    assert bat.e_cap == pytest.approx(0.320)
    solar = next(d for d in scn.network.devices if isinstance(d, SolarPanel))
    assert max(solar.profile) == pytest.approx(0.150)
    shp = next(d for d in scn.network.devices if d.type == "shapable")
    assert shp.energy_demand == pytest.approx(0.5)  # 5x peak x 1 h
    assert shp.window == (9, 24)


def test_derive_rejects_flat_zero_profile():
    net = FeederNetwork(buses=(Bus(0, kind="root"), Bus(1)),
                        lines=(Line(0, 1, r=0.01, x=0.01),))
    with pytest.raises(FeederError) as err:
        derive_scenario(net, {1: [0.0] * 24})
    assert err.value.code == "nonpositive-peak"


def test_derive_is_idempotent():
    net = fixtures.feeder6()
    profiles = {b: fixtures.residential_profile(0.1, b) for b in (1, 2, 3, 4, 5)}
    a = derive_scenario(net, profiles)
    b = derive_scenario(net, profiles)
    assert a.network == b.network and a.horizon == b.horizon


def test_scenario_checks_profile_lengths():
    scn = fixtures.scenario6(horizon=6)
    dev = next(d for d in scn.network.devices if isinstance(d, UncontrollableLoad))
    short = replace(dev, profile_p=dev.profile_p[:3], profile_q=dev.profile_q[:3])
    broken = replace(scn, network=replace(
        scn.network,
        devices=tuple(short if d.id == dev.id else d for d in scn.network.devices)))
    from crowdgrid.network import check_scenario

    assert any("profile length" in p for p in check_scenario(broken))
