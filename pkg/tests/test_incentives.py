import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crowdgrid.incentives import (
    CrowdsourceeProfile,
    EscalationPolicy,
    IncentiveError,
    IncentiveRound,
    Participant,
    brute_force_oracle,
    build_incentive_lp,
    escalate,
    recover_prices,
    solve_incentive_lp,
    update_profile,
)


def one(eta=1.0, zeta=100.0, u=(0.0, 10.0), lam=10.0, u_eq=5.0):
    prof = CrowdsourceeProfile(id="p", eta=eta, zeta=zeta, u_min=u[0], u_max=u[1])
    return Participant(prof, lam=lam, u_eq=u_eq)


def test_hand_instance_budget_floor_slack():
    rnd = IncentiveRound(t=0, d_t=5.0, b_min=0.0, b_max=100.0, participants=(one(),))
    sol = solve_incentive_lp(build_incentive_lp(rnd))
    assert sol.status == "optimal"
    assert sol.u[0] == pytest.approx(5.0)
    assert sol.y[0] == pytest.approx(0.01)
    assert sol.lam_a[0] == pytest.approx(0.002)
    assert sol.objective == pytest.approx(50.01)


def test_hand_instance_budget_floor_binding():
    rnd = IncentiveRound(t=0, d_t=5.0, b_min=20.0, b_max=100.0, participants=(one(),))
    sol = solve_incentive_lp(build_incentive_lp(rnd))
    assert sol.u[0] == pytest.approx(5.0)
    assert sol.y[0] == pytest.approx(20.0)
    assert sol.lam_a[0] == pytest.approx(4.0)
    assert sol.objective == pytest.approx(70.0)
    orc = brute_force_oracle(rnd)
    assert orc.feasible and orc.objective == pytest.approx(70.0, abs=1e-9)


def test_cheaper_participant_serves_demand():
    p1 = CrowdsourceeProfile(id="a", eta=1.0, zeta=0.0, u_min=0.0, u_max=10.0)
    p2 = CrowdsourceeProfile(id="b", eta=1.0, zeta=0.0, u_min=0.0, u_max=10.0)
    rnd = IncentiveRound(t=0, d_t=8.0, b_min=0.0, b_max=100.0,
                         participants=(Participant(p1, 10.0, 5.0),
                                       Participant(p2, 20.0, 5.0)))
    sol = solve_incentive_lp(build_incentive_lp(rnd))
    assert sol.u[0] == pytest.approx(8.0, abs=1e-9)
    assert sol.u[1] == pytest.approx(0.0, abs=1e-9)
    assert sol.lam_a[1] == 0.0  # epsilon rule for the zero participant
    orc = brute_force_oracle(rnd)
    assert abs(sol.objective - orc.objective) <= 0.01 + 1e-6


def test_structure_counts():
    lp = build_incentive_lp(IncentiveRound(t=0, d_t=5.0, b_min=0.0, b_max=100.0,
                                           participants=(one(),)))
    # 3 variables; rows: 2 epigraph + 2 budget + 1 demand + 1 price cap
    assert lp.c.shape == (3,)
    assert lp.a_ub.shape == (6, 3)


def test_demand_unsatisfiable_detected_at_build():
    rnd = IncentiveRound(t=0, d_t=25.0, b_min=0.0, b_max=100.0,
                         participants=(one(), one()))
    with pytest.raises(IncentiveError) as err:
        build_incentive_lp(rnd)
    assert err.value.code == "demand-unsatisfiable"


def test_budget_floor_unreachable():
    rnd = IncentiveRound(t=0, d_t=0.5, b_min=20.0, b_max=30.0,
                         participants=(one(u=(0.0, 1.0)),))
    with pytest.raises(IncentiveError) as err:
        build_incentive_lp(rnd, lam_a_max=10.0)
    assert err.value.code == "budget-floor-unreachable"


def test_no_participants_with_demand():
    with pytest.raises(IncentiveError) as err:
        IncentiveRound(t=0, d_t=5.0, b_min=0.0, b_max=10.0, participants=())
    assert err.value.code == "no-participants"


def test_degenerate_zero_budget_infeasible():
    rnd = IncentiveRound(t=0, d_t=1.0, b_min=0.0, b_max=0.0,
                         participants=(one(zeta=0.0),))
    sol = solve_incentive_lp(build_incentive_lp(rnd))
    assert sol.status == "infeasible"
    assert not brute_force_oracle(rnd).feasible


def test_budget_and_demand_hold_exactly():
    rng = np.random.default_rng(3)
    for _ in range(10):
        parts = tuple(
            Participant(CrowdsourceeProfile(
                id=f"p{i}", eta=float(rng.uniform(0.5, 2)),
                zeta=float(rng.uniform(0, 30)),
                u_min=0.0, u_max=float(rng.uniform(1, 4))),
                lam=float(rng.uniform(5, 40)), u_eq=float(rng.uniform(0, 2)))
            for i in range(3))
        b_min = float(rng.uniform(0, 3))
        rnd = IncentiveRound(t=0, d_t=float(rng.uniform(0, 2.5)), b_min=b_min,
                             b_max=b_min + 40.0, participants=parts)
        sol = solve_incentive_lp(build_incentive_lp(rnd))
        assert sol.status == "optimal"
        assert rnd.b_min - 1e-9 <= sol.premium_total <= rnd.b_max + 1e-9
        assert sol.u.sum() >= rnd.d_t - 1e-9
        assert (sol.y >= 0.01 - 1e-12).all()


def test_lp_matches_oracle_on_random_instances():
    rng = np.random.default_rng(11)
    for _ in range(6):
        n = int(rng.integers(1, 4))
        parts = []
        for i in range(n):
            u_min = float(rng.uniform(0.05, 0.3))
            parts.append(Participant(
                CrowdsourceeProfile(id=f"p{i}", eta=float(rng.uniform(0.5, 2)),
                                    zeta=float(rng.uniform(0, 20)),
                                    u_min=u_min, u_max=u_min + float(rng.uniform(0.5, 2))),
                lam=float(rng.uniform(5, 30)),
                u_eq=float(rng.uniform(u_min, u_min + 0.5))))
        b_min = float(rng.uniform(0, 2))
        rnd = IncentiveRound(t=0, d_t=float(rng.uniform(0, 0.9 * sum(
            p.profile.u_max for p in parts))), b_min=b_min,
            b_max=b_min + float(rng.uniform(5, 50)), participants=tuple(parts))
        sol = solve_incentive_lp(build_incentive_lp(rnd))
        orc = brute_force_oracle(rnd, grid_step=0.01)
        assert sol.status == "optimal" and orc.feasible
        assert abs(sol.objective - orc.objective) <= 0.01 + 1e-6


def test_zero_deviation_attraction():
    prof = CrowdsourceeProfile(id="p", eta=1.0, zeta=1e6, u_min=0.5, u_max=10.0)
    rnd = IncentiveRound(t=0, d_t=1.0, b_min=0.0, b_max=100.0,
                         participants=(Participant(prof, 10.0, 3.7),))
    sol = solve_incentive_lp(build_incentive_lp(rnd))
    assert abs(sol.u[0] - 3.7) <= 1e-6


def test_oracle_complexity_guard():
    parts = tuple(one() for _ in range(4))
    rnd = IncentiveRound(t=0, d_t=1.0, b_min=0.0, b_max=10.0, participants=parts)
    with pytest.raises(IncentiveError) as err:
        brute_force_oracle(rnd)
    assert err.value.code == "complexity-guard"


def test_recover_prices_rules():
    lam = recover_prices(np.array([20.0, 0.01]), np.array([5.0, 1e-12]))
    assert lam[0] == pytest.approx(4.0)
    assert lam[1] == 0.0


@given(st.floats(0.001, 1e3), st.floats(1e-6, 1e3))
def test_recover_prices_positive_when_supplying(y, u):
    lam = recover_prices(np.array([y]), np.array([u]))
    assert lam[0] > 0


def test_escalation_steps():
    pol = EscalationPolicy(gamma=1.5, max_rounds=3)
    assert escalate(2.0, pol, 0, lam_a_cap=100.0) == pytest.approx(3.0)
    assert escalate(4.0, pol, 0, lam_a_cap=5.0) == pytest.approx(5.0)  # capped
    assert escalate(5.0, pol, 1, lam_a_cap=5.0) is None  # already at cap
    assert escalate(2.0, pol, 3, lam_a_cap=100.0) is None  # rounds exhausted


@given(st.floats(0.01, 100), st.integers(0, 5))
@settings(max_examples=50)
def test_escalation_never_decreases(lam_a, k):
    pol = EscalationPolicy(gamma=1.5, max_rounds=10)
    new = escalate(lam_a, pol, k, lam_a_cap=1e6)
    assert new is None or new >= lam_a


def test_update_profile_arithmetic():
    prof = CrowdsourceeProfile(id="p", eta=1.0, zeta=1.0, acceptance_stats=0.5,
                               eta_base=1.0)
    up = update_profile(prof, True)
    assert up.acceptance_stats == pytest.approx(0.6)
    down = update_profile(prof, False)
    assert down.acceptance_stats == pytest.approx(0.4)
    cold = CrowdsourceeProfile(id="q", eta=1.0, zeta=1.0, acceptance_stats=0.0,
                               eta_base=1.0)
    assert cold.eta_base / (cold.acceptance_stats + 0.1) == pytest.approx(10.0)
    # reluctance raises the effective weight
    assert update_profile(down, False).eta > update_profile(up, True).eta


def test_bad_profile_rejected():
    with pytest.raises(IncentiveError):
        CrowdsourceeProfile(id="p", eta=-1.0)
    with pytest.raises(IncentiveError):
        CrowdsourceeProfile(id="p", u_min=2.0, u_max=1.0)
