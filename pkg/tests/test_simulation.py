import math

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from crossfire.config import ConfigError, ScenarioConfig
from crossfire.simulation import (
    ATTACK, BACKGROUND, DatasetError, FlowSpec, assign_bots, connection_impairment, drop_probability,
    generate_flow_schedule, make_vehicles, read_dataset, run_scenario, simulate, write_dataset,
)
from crossfire.topology import build_topology
from oracles import check_sample_invariants, oracle_link_totals

SMALL = dict(duration=120.0, attack_window=(30.0, 90.0))


def link_id(topo, a, b):
    for lk in topo.links:
        if set(lk.endpoints) == {a, b}:
            return lk.id
    raise KeyError((a, b))


# -- bots and schedule -----------------------------------------------------

def test_assign_bots_edges():
    cfg = ScenarioConfig(n_vehicles=30, n_bots=0)
    topo = build_topology(cfg)
    vs = make_vehicles(cfg)
    assert not any(v.is_bot for v in assign_bots(topo, vs, 0, 1))
    assert all(v.is_bot for v in assign_bots(topo, vs, 30, 1))
    first = [v.id for v in assign_bots(topo, vs, 5, 9) if v.is_bot]
    assert len(first) == 5
    assert first == [v.id for v in assign_bots(topo, vs, 5, 9) if v.is_bot]
    with pytest.raises(ValueError):
        assign_bots(topo, vs, 31, 1)


def test_vehicle_speeds_within_range():
    cfg = ScenarioConfig(n_vehicles=200, speed_range=(20.0, 30.0))
    assert all(20.0 <= v.speed <= 30.0 for v in make_vehicles(cfg))


def test_schedule_without_attack_window_is_background_only():
    sim = simulate(ScenarioConfig(attack_window=None, duration=60.0))
    assert sim.flows and all(f.kind == BACKGROUND for f in sim.flows)


def test_six_bots_three_groups_alternate_in_ten_minute_slots():
    cfg = ScenarioConfig(n_vehicles=12, n_bots=6, bot_groups=3)
    sim = simulate(cfg)
    attack = [f for f in sim.flows if f.kind == ATTACK]
    bots = sorted(v.id for v in sim.vehicles if v.is_bot)
    slots = sorted({(f.start, f.end) for f in attack})
    assert slots == [(900.0, 1500.0), (1500.0, 2100.0), (2100.0, 2700.0)]
    groups = [sorted(f.src for f in attack if (f.start, f.end) == s) for s in slots]
    assert [len(g) for g in groups] == [2, 2, 2]
    assert sorted(sum(groups, [])) == bots
    assert groups == [bots[g::3] for g in range(3)]
    for f in attack:
        assert f.dst in sim.topology.decoys


def test_background_flows_follow_rate_and_victim_rules():
    sim = simulate(ScenarioConfig(n_vehicles=40, n_bots=4))
    full = [f for f in sim.flows if f.kind == BACKGROUND and f.start == 0.0 and f.end == 3600.0]
    assert sorted(f.src for f in full) == list(range(40))
    for f in full:
        assert f.dst in sim.topology.victims
    for f in sim.flows:
        if f.kind == BACKGROUND:
            assert 600.0 <= f.rate_start == f.rate_end <= 1700.0


def test_attack_ramp_is_linear_and_confined():
    sim = simulate(ScenarioConfig(n_bots=4, n_vehicles=10))
    a0, a1 = sim.config.attack_window
    for f in (f for f in sim.flows if f.kind == ATTACK):
        assert f.rate(f.start) == pytest.approx(40.0) and f.rate(f.end) == pytest.approx(300.0)
        grid = np.linspace(f.start, f.end, 50)
        rates = [f.rate(t) for t in grid]
        assert all(40.0 <= r <= 300.0 for r in rates)
        assert np.all(np.diff(rates) >= -1e-12)
        assert a0 <= f.start < f.end <= a1


def test_zero_bot_groups_rejected_when_bots_attack():
    cfg = ScenarioConfig(bot_groups=0)
    with pytest.raises(ConfigError):
        generate_flow_schedule(cfg, assign_bots(build_topology(cfg), make_vehicles(cfg), 2, 0), build_topology(cfg))


def test_flow_volume_matches_quadrature():
    f = FlowSpec(0, "d0", 10.0, 70.0, 40.0, 300.0, ATTACK)
    t = np.linspace(20.0, 35.0, 100001)
    r = np.array([f.rate(x) for x in t])
    assert f.volume(20.0, 35.0) == pytest.approx(np.trapezoid(r, t), rel=1e-9)


# -- impairment --------------------------------------------------------------

def test_impairment_stationary_and_clamped():
    rng = np.random.default_rng(0)
    out = connection_impairment(0.0, 0.004, rng)
    assert not out.dropped and out.delay_jitter == 0.0
    assert all(connection_impairment(300.0, 0.004, rng).dropped for _ in range(100))
    with pytest.raises(ValueError):
        connection_impairment(-1.0, 0.004, rng)


def test_impairment_monte_carlo_drop_rate():
    rng = np.random.default_rng(1234)
    speed = 0.2 / 0.004
    outcomes = [connection_impairment(speed, 0.004, rng, sample_interval=0.5) for _ in range(10_000)]
    rate = np.mean([o.dropped for o in outcomes])
    assert abs(rate - 0.2) <= 0.02
    jitters = [o.delay_jitter for o in outcomes if not o.dropped]
    assert 0.0 <= min(jitters) and max(jitters) <= 0.004 * speed * 0.5


@given(st.floats(0, 500), st.floats(0, 500), st.floats(0, 0.05))
def test_drop_probability_monotone(s1, s2, coef):
    lo, hi = sorted((s1, s2))
    assert drop_probability(lo, coef) <= drop_probability(hi, coef) <= 1.0


# -- scenario runs -------------------------------------------------------------

def test_default_run_has_full_scale():
    samples = run_scenario(ScenarioConfig())
    assert len(samples) == 7200
    assert all(len(s.per_link) == 25 for s in samples[:10])
    assert sum(s.label for s in samples) == 3600


def test_zero_vehicles_gives_silent_normal_stream():
    samples = run_scenario(ScenarioConfig(n_vehicles=0, n_bots=0, duration=60.0, attack_window=(10.0, 20.0)))
    assert len(samples) == 120
    assert all(s.flows.sum() == 0 and s.sizes.sum() == 0 and s.label == 0 for s in samples)


def test_single_background_flow_matches_hand_oracle():
    cfg = ScenarioConfig(n_vehicles=1, n_bots=0, speed_range=(0.0, 0.0), duration=30.0,
                         attack_window=None, decoy_session_rate=0.0)
    sim = simulate(cfg)
    (flow,) = sim.flows
    topo = sim.topology
    cell = int(sim.vehicles[0].position // cfg.cell_length)
    rsu = f"r{cell}"
    path = {link_id(topo, rsu, "s0"), link_id(topo, "s0", "s2"), link_id(topo, "s2", flow.dst)}
    for s in sim.samples:
        for j, lid in enumerate(topo.monitored):
            if lid in path:
                assert s.flows[j] == 1
                assert s.sizes[j] == flow.rate_start * cfg.sample_interval
            else:
                assert s.flows[j] == 0 and s.sizes[j] == 0.0


@pytest.mark.parametrize("seed,speed", [(0, (0.0, 10.0)), (1, (20.0, 30.0)), (2, (5.0, 15.0))])
def test_conservation_without_impairment(seed, speed):
    cfg = ScenarioConfig(seed=seed, speed_range=speed, impairment_coefficient=0.0, n_vehicles=6,
                         n_bots=3, **SMALL)
    sim = simulate(cfg)
    got = np.sum([s.sizes for s in sim.samples], axis=0)
    np.testing.assert_allclose(got, oracle_link_totals(sim), rtol=1e-9, atol=1e-9)


def test_runs_are_bit_identical_per_seed():
    cfg = ScenarioConfig(seed=7, **SMALL)
    a, b = run_scenario(cfg), run_scenario(cfg)
    assert all(x.timestamp == y.timestamp and x.label == y.label
               and np.array_equal(x.flows, y.flows) and x.sizes.tobytes() == y.sizes.tobytes()
               for x, y in zip(a, b))
    c = run_scenario(cfg.replace(seed=8))
    assert any(x.sizes.tobytes() != y.sizes.tobytes() for x, y in zip(a, c))


def test_traffic_seed_keeps_structure_and_redraws_traffic():
    cfg = ScenarioConfig(seed=3, **SMALL)
    a, b = simulate(cfg), simulate(cfg.replace(traffic_seed=99))
    assert [v.speed for v in a.vehicles] == [v.speed for v in b.vehicles]
    assert [v.is_bot for v in a.vehicles] == [v.is_bot for v in b.vehicles]
    assert [f for f in a.flows if f.kind == ATTACK] == [f for f in b.flows if f.kind == ATTACK]
    assert [v.position for v in a.vehicles] != [v.position for v in b.vehicles]


def test_attack_is_additive_during_window():
    attacked = ScenarioConfig(seed=5, n_bots=3, **SMALL)
    normal = attacked.replace(attack_window=None)
    a, n = run_scenario(attacked), run_scenario(normal)
    a0, a1 = attacked.attack_window
    for x, y in zip(a, n):
        if x.timestamp + attacked.sample_interval > a0 and x.timestamp < a1:
            assert np.all(x.sizes >= y.sizes - 1e-9)


configs = st.builds(
    lambda nv, frac, lo, width, coef, seed, l, groups, window: ScenarioConfig(
        n_vehicles=nv, n_bots=int(nv * frac), speed_range=(lo, lo + width), duration=60.0,
        attack_window=window, impairment_coefficient=coef, seed=seed, n_monitored_links=l,
        bot_groups=groups),
    st.integers(0, 12), st.floats(0, 1), st.floats(0, 30), st.floats(0, 10), st.sampled_from([0.0, 0.004, 0.02]),
    st.integers(0, 2**32 - 1), st.integers(1, 25), st.integers(1, 4),
    st.one_of(st.none(), st.tuples(st.floats(0, 29), st.floats(31, 60))),
)


@settings(max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(configs)
def test_randomized_config_invariants(cfg):
    samples = run_scenario(cfg)
    check_sample_invariants(cfg, samples)
    again = run_scenario(cfg)
    assert all(x.sizes.tobytes() == y.sizes.tobytes() and np.array_equal(x.flows, y.flows)
               for x, y in zip(samples, again))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 8))
def test_randomized_conservation(seed, nv):
    cfg = ScenarioConfig(seed=seed, n_vehicles=nv, n_bots=nv // 2, impairment_coefficient=0.0,
                         duration=40.0, attack_window=(10.0, 30.0), speed_range=(0.0, 30.0))
    sim = simulate(cfg)
    got = np.sum([s.sizes for s in sim.samples], axis=0)
    np.testing.assert_allclose(got, oracle_link_totals(sim), rtol=1e-9, atol=1e-9)


def test_impairment_only_removes_or_delays_traffic():
    base = ScenarioConfig(seed=2, speed_range=(20.0, 30.0), impairment_coefficient=0.0, **SMALL)
    clean = np.sum([s.sizes for s in run_scenario(base)], axis=0)
    lossy = np.sum([s.sizes for s in run_scenario(base.replace(impairment_coefficient=0.004))], axis=0)
    assert np.all(lossy <= clean + 1e-9)
    assert lossy.sum() < clean.sum()


# -- dataset files -------------------------------------------------------------

def test_dataset_round_trip(tmp_path):
    samples = run_scenario(ScenarioConfig(seed=4, **SMALL))
    path = tmp_path / "d.csv"
    write_dataset(samples, path)
    raw = path.read_bytes()
    assert b"\r" not in raw
    lines = raw.decode().splitlines()
    assert len(lines) == 1 + len(samples)
    assert lines[0].startswith("t,link0_flows,link0_size,link1_flows")
    assert lines[0].endswith("link24_size,label")
    assert lines[1].split(",")[0] == "0.000"
    back = read_dataset(path)
    for x, y in zip(samples, back):
        assert x.timestamp == y.timestamp and x.label == y.label
        assert np.array_equal(x.flows, y.flows) and np.array_equal(x.sizes, y.sizes)


@pytest.mark.parametrize("mutate,where", [
    (lambda ls: ls[:1] + [ls[1] + ",9"] + ls[2:], ":2:"),
    (lambda ls: ls[:2] + [ls[2].rsplit(",", 1)[0] + ",7"] + ls[3:], ":3:"),
    (lambda ls: ls[:3] + [ls[3].replace(",", ",x", 1)] + ls[4:], ":4:"),
    (lambda ls: ["bogus"] + ls[1:], "header"),
])
def test_dataset_errors_name_the_line(tmp_path, mutate, where):
    path = tmp_path / "d.csv"
    write_dataset(run_scenario(ScenarioConfig(duration=5.0, attack_window=None)), path)
    path.write_text("\n".join(mutate(path.read_text().splitlines())) + "\n")
    with pytest.raises(DatasetError, match=where):
        read_dataset(path)


def test_invalid_configs_rejected():
    for bad in [dict(n_bots=11), dict(attack_window=(100.0, 4000.0)), dict(sample_interval=0.7),
                dict(n_monitored_links=0), dict(speed_range=(5.0, 1.0))]:
        with pytest.raises(ConfigError):
            ScenarioConfig(**bad)
    assert math.isclose(ScenarioConfig().n_samples, 7200)
