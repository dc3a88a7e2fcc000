import json
import math
from dataclasses import replace

import numpy as np
import pytest

from gridsplit.decomp import RelaxationDivergence, subsystem_views
from gridsplit.engine import (Event, ScenarioError, ScenarioSpec, SteadyStateError, band_entry_time,
                              bundled, check_steady_state, compare_to_benchmark, csv_header,
                              initialize, load_scenario, parse_scenario, run, summary, write_csv,
                              write_summary)
from gridsplit.netcore import build_admittance, stamp_branches
from gridsplit.devices import machine_power

from conftest import CASE9_SUBDOMAIN_CUTS, CASE9_SUBSYSTEM_CUTS


@pytest.fixture
def quiet(case9_path):
    return ScenarioSpec(str(case9_path), horizon=1.0, subsystem_cuts=CASE9_SUBSYSTEM_CUTS,
                        subdomain_cuts=CASE9_SUBDOMAIN_CUTS)


@pytest.fixture(scope="module")
def fault_run():
    spec = load_scenario("fault_bus2")
    return spec, *run(spec)


class TestScenarioParsing:
    def test_bundled_files(self):
        for name in ("fault_bus2", "line6_change", "load_step_075"):
            spec = load_scenario(name)
            assert spec.name == name and spec.horizon == 5.0
            assert spec.subsystem_cuts == ((1, 4),)
            assert spec.subdomain_cuts == ((6, 7), (9, 4))

    def test_fault_events(self):
        spec = load_scenario(bundled("fault_bus2"))
        assert [(e.time, e.kind, e.target) for e in spec.events] == [
            (1.2, "bus_fault_apply", "2"), (1.4, "bus_fault_clear", "2")]

    def test_keys(self):
        spec = parse_scenario("case = case9\nh_fast = 0.002\nh_slow = 0.02\nfast_window = 0.3\n"
                              "integrator = rkf45\nbenchmark = no\nevent = 0.5 load_step 5 0.1\n"
                              "horizon = 1\n")
        assert spec.schedule.h_fast == 0.002 and spec.schedule.fast_window == 0.3
        assert spec.integrator.value == "rkf45" and not spec.benchmark
        assert spec.events[0].payload == 0.1

    @pytest.mark.parametrize("text,match", [
        ("case = case9\nbogus = 1\n", "bogus"),
        ("case = case9\nevent = 1.0 explode 2\n", "explode"),
        ("case = case9\nhorizon = 1\nevent = 2.0 load_step 5 1\n", "horizon"),
        ("horizon = 1\n", "case"),
    ])
    def test_errors(self, text, match):
        with pytest.raises(ScenarioError, match=match):
            parse_scenario(text)

    def test_file_order_is_sorted(self):
        spec = parse_scenario("case = case9\nevent = 2.0 load_step 5 1\nevent = 1.0 load_step 5 1\n")
        assert [e.time for e in spec.events] == [1.0, 2.0]

    def test_unsorted_spec(self, case9_path):
        with pytest.raises(ScenarioError, match="sorted"):
            ScenarioSpec(str(case9_path), events=(Event(2.0, "load_step", "5"),
                                                  Event(1.0, "load_step", "5")))

    def test_missing(self):
        with pytest.raises(FileNotFoundError):
            load_scenario("no_such_scenario")

    def test_negative_event_time(self):
        with pytest.raises(ScenarioError):
            Event(-1.0, "load_step", "5")


class TestInitialize:
    def test_equilibrium(self, quiet):
        st = initialize(quiet)
        d = st.decomposed.devices
        rhs = d.bank.rhs(d.xm, st.V0[d.machine_bus])
        assert np.abs(rhs).max() < 1e-8
        assert np.all(d.xg == 0)
        check_steady_state(d, st.V0)

    def test_decomposed_matches_monolithic(self, quiet):
        st = initialize(quiet)
        assert np.abs(st.decomposed.V - st.V0).max() < 1e-10

    def test_perturbed_reference(self, quiet, tmp_path, case9_path):
        pm = initialize(quiet).decomposed.devices.xm[0, 2]
        text = case9_path.read_text()
        assert "[machine sm2]" in text
        path = tmp_path / "bad.txt"
        path.write_text(text.replace("[machine sm2]", f"[machine sm2]\nP_ref = {float(pm) + 0.1!r}", 1))
        with pytest.raises(SteadyStateError, match="not at equilibrium"):
            initialize(replace(quiet, case_path=str(path)))


class TestEvents:
    def test_fault_apply_clear_restores_y(self, quiet):
        st = initialize(replace(quiet, benchmark=False))
        tr = st.decomposed
        before = build_admittance(tr.dynamic_case()).toarray()
        tr.apply(Event(0.1, "bus_fault_apply", "2"))
        assert build_admittance(tr.dynamic_case()).toarray()[1, 1] != before[1, 1]
        tr.apply(Event(0.2, "bus_fault_clear", "2"))
        assert np.array_equal(build_admittance(tr.dynamic_case()).toarray(), before)

    def test_zero_line_change(self, quiet):
        st = initialize(replace(quiet, benchmark=False))
        tr = st.decomposed
        before = list(tr.branches)
        tr.apply(Event(0.1, "line_change", "6", 0j))
        assert tr.branches == before

    def test_line_change_by_endpoints(self, quiet):
        st = initialize(replace(quiet, benchmark=False))
        tr = st.decomposed
        k = 5
        a, b = tr.base.buses[tr.branches[k].from_bus].label, tr.base.buses[tr.branches[k].to_bus].label
        y0 = tr.branches[k].series_y
        tr.apply(Event(0.1, "line_change", f"{a}-{b}", 1 - 1j))
        assert tr.branches[k].series_y == y0 + (1 - 1j)

    def test_unknown_targets(self, quiet):
        st = initialize(replace(quiet, benchmark=False))
        with pytest.raises(ScenarioError):
            st.decomposed.apply(Event(0.1, "bus_fault_apply", "42"))
        with pytest.raises(ScenarioError):
            st.decomposed.apply(Event(0.1, "line_change", "1-2"))

    def test_load_step_power(self, quiet):
        st = initialize(replace(quiet, benchmark=False))
        tr = st.decomposed
        k = tr.base.index_of(5)
        V = tr.V[k]
        p0 = (abs(V) ** 2 * np.conj(tr.load_y[k])).real
        tr.apply(Event(0.1, "load_step", "5", 0.75))
        p1 = (abs(V) ** 2 * np.conj(tr.load_y[k])).real
        assert p1 - p0 == pytest.approx(0.75, rel=1e-12)

    def test_event_conservation(self, quiet):
        st = initialize(replace(quiet, benchmark=False))
        tr = st.decomposed
        cut = [k for k in st.plan.cut_edges]
        for e in [Event(0.1, "bus_fault_apply", "2"), Event(0.2, "line_change", "6", 0.5 - 3j),
                  Event(0.3, "load_step", "5", 0.75), Event(0.4, "bus_fault_clear", "2")]:
            tr.apply(e)
            case = tr.dynamic_case()
            Y = build_admittance(case).toarray()
            total = stamp_branches(case.n, [case.branches[k] for k in cut]).toarray()
            for v in subsystem_views(case, st.plan):
                total[np.ix_(v.buses, v.buses)] += v.Y.toarray()
            np.testing.assert_allclose(total, Y, rtol=1e-14, atol=1e-13)


class TestRun:
    def test_quiescent(self, quiet):
        res, log = run(quiet)
        V = np.array(res.bus_V)
        assert np.abs(V - V[0]).max() < 1e-8
        assert all(k == 1 for k in res.iterations[1:])
        assert compare_to_benchmark(res).max_deviation < 1e-10
        assert res.times[-1] == quiet.horizon

    def test_fault_drops_every_bus(self, fault_run):
        _, res, _ = fault_run
        t = np.array(res.times)
        pre, post = np.flatnonzero(t == 1.2)[:2]
        Vm = np.abs(np.array(res.bus_V))
        assert np.all(Vm[post] < Vm[pre])
        assert Vm[post, 1] < 1e-3

    def test_fault_matches_benchmark(self, fault_run):
        _, res, log = fault_run
        assert compare_to_benchmark(res).max_deviation <= 1e-6
        assert max(res.iterations) <= 5
        assert all(m[-1] <= 1e-8 for m in log.mismatch if m)

    def test_steps_land_on_events(self, fault_run):
        _, res, _ = fault_run
        t = np.array(res.times)
        assert np.sum(t == 1.2) == 2 and np.sum(t == 1.4) == 2
        assert np.all(np.diff(t) >= 0)
        dt = np.diff(t)
        window = (t[:-1] >= 1.2) & (t[:-1] < 1.69)
        assert np.all(dt[window & (dt > 0)] <= 0.01 + 1e-12)

    def test_sigma_monotone(self):
        spec = load_scenario("line6_change")
        spec = replace(spec, horizon=2.0, boundary_g="cut", max_iter=500)
        devs = [compare_to_benchmark(run(replace(spec, sigma=s))[0]).max_deviation
                for s in (1e-4, 1e-6, 1e-8)]
        assert devs[1] <= devs[0] and devs[2] <= devs[1]

    def test_deterministic_across_workers(self):
        spec = replace(load_scenario("line6_change"), horizon=2.0)
        a, _ = run(spec, workers=1)
        b, _ = run(spec, workers=4)
        assert np.array_equal(np.array(a.bus_V), np.array(b.bus_V))
        assert np.array_equal(np.array(a.gfm_x), np.array(b.gfm_x))

    def test_divergence_reports_time(self):
        spec = replace(load_scenario("fault_bus2"), sigma=1e-30, max_iter=5)
        with pytest.raises(RelaxationDivergence) as info:
            run(spec)
        assert math.isfinite(info.value.sim_time)


class TestReporting:
    def test_header(self, fault_run):
        _, res, _ = fault_run
        head = csv_header(res)
        assert head[:2] == ["t", "iter"]
        assert head[2:11] == [f"V_mag_bus{k}" for k in range(1, 10)]
        assert head[11:20] == [f"V_ang_bus{k}" for k in range(1, 10)]
        assert head[20:22] == ["delta_g2", "delta_g3"]
        assert head[22:24] == ["omega_g2", "omega_g3"]
        assert head[24:37] == [f"gfm_x{k}" for k in range(1, 14)]
        assert head[37:] == [f"bench_V_mag_bus{k}" for k in range(1, 10)]

    def test_csv_and_summary(self, fault_run, tmp_path):
        spec, res, log = fault_run
        write_csv(res, tmp_path / "a.csv")
        rows = (tmp_path / "a.csv").read_text().splitlines()
        assert len(rows) == len(res.times) + 1
        assert len(rows[1].split(",")) == len(csv_header(res))
        data = summary(spec, res, log)
        write_summary(data, tmp_path / "s.json")
        back = json.loads((tmp_path / "s.json").read_text())
        assert back["steps"] == len(res.times) and back["max_deviation"] <= 1e-6
        assert set(back["wall_clock_s"]) >= {"devices", "decomposed_network"}

    def test_band_entry(self):
        t = np.arange(6.0)
        assert band_entry_time(t, [5, 3, 1.0, 1.0, 1.0, 1.0], rel=1e-3) == 2.0
        assert band_entry_time(t, np.ones(6), start=1.5) == 1.5
