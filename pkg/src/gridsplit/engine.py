"""Time-domain co-simulation of devices and network.

Every step advances the device ODEs against the last network solution, then
re-solves the network with the new injections: either through the two-stage
decomposition or, for the benchmark, a single sparse LU solve. Both paths
run in lockstep on the same time grid when ``benchmark`` is enabled.
"""
from __future__ import annotations

import csv
import json
import math
import time
from collections import deque
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import devices as dev
from .decomp import DecomposedSolver, PartitionPlan, make_partition
from .integrate import IntegratorKind, LinearPropagator, StepSchedule, step, step_size_at
from .netcore import (LUFactor, PowerFlowCase, bus_injections, build_admittance, load_case,
                      solve_power_flow)

EVENT_KINDS = ("bus_fault_apply", "bus_fault_clear", "line_change", "load_step")
DEFAULT_FAULT_SHUNT = 1e6 + 0j
STEADY_TOL = 1e-8


class ScenarioError(ValueError):
    pass


class SteadyStateError(ArithmeticError):
    pass


@dataclass(frozen=True)
class Event:
    time: float
    kind: str
    target: str  # bus number, branch row number, or "a-b" bus pair
    payload: complex | None = None

    def __post_init__(self):
        if self.time < 0:
            raise ScenarioError("event time must be non-negative")
        if self.kind not in EVENT_KINDS:
            raise ScenarioError(f"unknown event kind '{self.kind}'")


@dataclass(frozen=True)
class ScenarioSpec:
    case_path: str
    horizon: float = 5.0
    subsystem_cuts: tuple[tuple[int, int], ...] = ()
    subdomain_cuts: tuple[tuple[int, int], ...] = ()
    events: tuple[Event, ...] = ()
    sigma: float = 1e-8
    schedule: StepSchedule = StepSchedule()
    integrator: IntegratorKind = IntegratorKind.MODIFIED_EULER
    benchmark: bool = True
    boundary_g: str = "norton"
    max_iter: int = 50
    device_substep: float = 1e-5
    name: str = "scenario"

    def __post_init__(self):
        times = [e.time for e in self.events]
        if times != sorted(times):
            raise ScenarioError("events must be sorted by time")
        if times and not self.horizon > times[-1]:
            raise ScenarioError("horizon must exceed the last event time")
        if not self.sigma > 0:
            raise ScenarioError("sigma must be positive")


def bundled(name: str) -> Path:
    """Path of a bundled case (``case9``) or scenario (``fault_bus2``)."""
    root = resources.files("gridsplit") / "data"
    for cand in (root / f"{name}.txt", root / "scenarios" / f"{name}.txt"):
        if cand.is_file():
            return Path(str(cand))
    raise FileNotFoundError(f"no bundled case or scenario named '{name}'")


def _resolve(value: str, base: Path) -> str:
    p = Path(value)
    if not p.is_absolute() and (base / p).exists():
        return str(base / p)
    if p.exists():
        return str(p)
    try:
        return str(bundled(value))
    except FileNotFoundError:
        raise ScenarioError(f"case file not found: {value}") from None


def _pair(text: str) -> tuple[int, int]:
    a, sep, b = text.partition("-")
    if not sep:
        raise ScenarioError(f"expected '<from>-<to>', got {text!r}")
    return int(a), int(b)


_BOOL = {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}


def parse_scenario(text: str, base: Path = Path("."), name: str = "scenario") -> ScenarioSpec:
    kw: dict = {"name": name}
    sched: dict = {}
    cuts1, cuts2, events = [], [], []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (s.strip() for s in line.partition("="))
        if not sep:
            raise ScenarioError(f"line {lineno}: expected key = value")
        try:
            if key == "case":
                kw["case_path"] = _resolve(value, base)
            elif key == "subsystem_cut":
                cuts1.append(_pair(value))
            elif key == "subdomain_cut":
                cuts2.append(_pair(value))
            elif key == "event":
                parts = value.split()
                if len(parts) not in (3, 4):
                    raise ScenarioError("event needs: <time> <kind> <target> [payload]")
                payload = complex(parts[3]) if len(parts) == 4 else None
                events.append(Event(float(parts[0]), parts[1], parts[2], payload))
            elif key in ("h_fast", "h_slow", "fast_window"):
                sched[key] = float(value)
            elif key in ("horizon", "sigma", "device_substep"):
                kw[key] = float(value)
            elif key == "max_iter":
                kw["max_iter"] = int(value)
            elif key == "integrator":
                kw["integrator"] = IntegratorKind(value)
            elif key == "benchmark":
                kw["benchmark"] = _BOOL[value.lower()]
            elif key == "boundary_G":
                kw["boundary_g"] = value
            elif key == "name":
                kw["name"] = value
            else:
                raise ScenarioError(f"unknown key '{key}'")
        except (ValueError, KeyError) as exc:
            if isinstance(exc, ScenarioError) and str(exc).startswith("line "):
                raise
            raise ScenarioError(f"line {lineno}: {exc}") from None
    if "case_path" not in kw:
        raise ScenarioError("scenario does not name a case")
    events.sort(key=lambda e: e.time)
    return ScenarioSpec(subsystem_cuts=tuple(cuts1), subdomain_cuts=tuple(cuts2),
                        events=tuple(events), schedule=StepSchedule(**sched), **kw)


def load_scenario(path: str | Path) -> ScenarioSpec:
    path = Path(path)
    if not path.exists():
        try:
            path = bundled(str(path))
        except FileNotFoundError:
            raise FileNotFoundError(f"scenario file not found: {path}") from None
    return parse_scenario(path.read_text(encoding="utf-8"), path.parent, path.stem)


# ------------------------------------------------------------------ state ---

class MonolithicSolver:
    iterations = 1
    history: list[float] = []

    def __init__(self, case: PowerFlowCase):
        self.rebuild(case)

    def rebuild(self, case: PowerFlowCase) -> None:
        self.case = case
        self._lu = LUFactor(build_admittance(case))

    def solve(self, I_inj: np.ndarray) -> np.ndarray:
        return self._lu.solve(I_inj)

    def close(self):
        pass


@dataclass
class Devices:
    """Dynamic state of all devices on one trajectory."""
    machine_bus: np.ndarray
    bank: dev.MachineBank
    xm: np.ndarray  # (k, 3)
    gfm_bus: np.ndarray
    gfm_ss: list[dev.GfmStateSpace]
    gfm_prop: list[LinearPropagator]
    xg: np.ndarray  # (g, 13)
    theta_ref: np.ndarray  # (g,)
    system_base: float
    kind: IntegratorKind = IntegratorKind.MODIFIED_EULER
    substep: float = 1e-5
    Z_th: np.ndarray = None  # network driving-point impedance at each GFM bus
    E_th: np.ndarray = None

    def copy(self) -> "Devices":
        return replace(self, xm=self.xm.copy(), xg=self.xg.copy(), theta_ref=self.theta_ref.copy(),
                       gfm_prop=list(self.gfm_prop),
                       Z_th=None if self.Z_th is None else self.Z_th.copy(),
                       E_th=None if self.E_th is None else self.E_th.copy())

    def couple(self, lu: LUFactor) -> None:
        """Refresh the Thevenin impedance each GFM sees after a network change."""
        n = lu.n
        Z = np.zeros(len(self.gfm_bus), dtype=complex)
        props = []
        for k, (b, ss) in enumerate(zip(self.gfm_bus, self.gfm_ss)):
            e = np.zeros(n, dtype=complex)
            e[b] = 1.0
            Z[k] = lu.solve(e)[b]
            A = dev.gfm_thevenin_system(ss, Z[k], self.system_base)
            props.append(LinearPropagator(A, ss.B, self.kind, self.substep))
        self.Z_th = Z
        self.gfm_prop = props

    def observe(self, V: np.ndarray) -> None:
        """Split each GFM bus voltage into its own contribution and the held remainder."""
        E = np.zeros(len(self.gfm_bus), dtype=complex)
        for k, (b, ss) in enumerate(zip(self.gfm_bus, self.gfm_ss)):
            I = dev.gfm_network_interface(ss, self.xg[k], self.theta_ref[k], self.system_base)[0]
            E[k] = V[b] - self.Z_th[k] * I
        self.E_th = E

    def injections(self, n: int) -> np.ndarray:
        I = np.zeros(n, dtype=complex)
        np.add.at(I, self.machine_bus, self.bank.norton_current(self.xm))
        for k, ss in enumerate(self.gfm_ss):
            I[self.gfm_bus[k]] += dev.gfm_network_interface(
                ss, self.xg[k], self.theta_ref[k], self.system_base)[0]
        return I

    def gfm_inputs(self, V: np.ndarray) -> list[np.ndarray]:
        out = []
        for k, ss in enumerate(self.gfm_ss):
            dv = dev.gfm_grid_input(ss, V[self.gfm_bus[k]], self.theta_ref[k])
            out.append(np.concatenate([dv, [0.0, 0.0]]))
        return out

    def advance(self, kind: IntegratorKind, V: np.ndarray, t: float, h: float):
        """One step with bus voltages held; returns (clamped, rkf error estimate)."""
        Vm = V[self.machine_bus]
        err = 0.0
        if len(self.machine_bus):
            self.xm, e = step(kind, lambda _t, x: self.bank.rhs(x, Vm), self.xm, t, h)
            if e is not None:
                err = float(np.max(np.abs(e)))
        clamped = False
        hk = round(h, 12)
        for k, ss in enumerate(self.gfm_ss):
            dv = dev.gfm_thevenin_input(ss, self.E_th[k], self.theta_ref[k], self.Z_th[k],
                                        self.system_base)
            u = np.concatenate([dv, [0.0, 0.0]])
            x = self.gfm_prop[k].advance(self.xg[k], u, hk)
            x, hit = dev.gfm_clamp_references(ss, x)
            x, dtheta = dev.gfm_reanchor(ss, x)
            self.xg[k] = x
            self.theta_ref[k] += dtheta
            clamped |= hit
        return clamped, err

    def gfm_frequency(self) -> np.ndarray:
        return np.array([dev.gfm_frequency(ss, x) for ss, x in zip(self.gfm_ss, self.xg)])


@dataclass
class Trajectory:
    """Network modifications, devices and the linear solver of one simulation path."""
    base: PowerFlowCase
    machine_y: np.ndarray
    load_y: np.ndarray
    branches: list
    faults: dict[int, complex]
    devices: Devices
    solver: object
    V: np.ndarray = None

    def dynamic_case(self) -> PowerFlowCase:
        return dynamic_case(self.base, self.machine_y, self.load_y, self.faults, self.branches)

    def solve(self) -> np.ndarray:
        self.V = self.solver.solve(self.devices.injections(self.base.n))
        self.devices.observe(self.V)
        return self.V

    def apply(self, e: Event) -> None:
        apply_event(self, e)
        case = self.dynamic_case()
        self.solver.rebuild(case)
        self.devices.couple(LUFactor(build_admittance(case)))


def dynamic_case(base, machine_y, load_y, faults, branches) -> PowerFlowCase:
    """Network seen by the dynamic solve: loads as impedances, machines as Norton shunts."""
    buses = tuple(replace(b, shunt=b.shunt + load_y[b.id] + machine_y[b.id] + faults.get(b.id, 0j))
                  for b in base.buses)
    return replace(base, buses=buses, branches=tuple(branches))


def _target_bus(case: PowerFlowCase, target: str) -> int:
    try:
        return case.index_of(int(target))
    except (KeyError, ValueError):
        raise ScenarioError(f"unknown bus '{target}'") from None


def _target_branch(case: PowerFlowCase, target: str) -> int:
    try:
        if "-" in target:
            a, b = _pair(target)
            return case.branch_between(case.index_of(a), case.index_of(b))
        k = int(target) - 1
        if not 0 <= k < len(case.branches):
            raise KeyError(target)
        return k
    except (KeyError, ValueError):
        raise ScenarioError(f"unknown branch '{target}'") from None


def apply_event(traj: Trajectory, e: Event) -> None:
    """Mutate the network description of ``traj``; the caller refreshes solvers."""
    case = traj.base
    if e.kind == "bus_fault_apply":
        bus = _target_bus(case, e.target)
        traj.faults[bus] = DEFAULT_FAULT_SHUNT if e.payload is None else complex(e.payload)
    elif e.kind == "bus_fault_clear":
        traj.faults.pop(_target_bus(case, e.target), None)
    elif e.kind == "line_change":
        k = _target_branch(case, e.target)
        if e.payload:
            br = traj.branches[k]
            traj.branches[k] = replace(br, series_y=br.series_y + complex(e.payload))
    elif e.kind == "load_step":
        bus = _target_bus(case, e.target)
        dp = 0.0 if e.payload is None else complex(e.payload).real
        v = abs(traj.V[bus]) if traj.V is not None else 1.0
        traj.load_y[bus] = traj.load_y[bus] + dp / v**2


# ------------------------------------------------------------ initialize ---

@dataclass
class SystemState:
    spec: ScenarioSpec
    case: PowerFlowCase
    plan: PartitionPlan
    decomposed: Trajectory
    benchmark: Trajectory | None
    V0: np.ndarray


def _build_devices(case: PowerFlowCase, V: np.ndarray, spec: ScenarioSpec):
    S = bus_injections(case, V)
    machines = [g for g in case.generators if g.kind == "machine"]
    gfms = [g for g in case.generators if g.kind == "gfm"]
    w_s = 2 * math.pi * case.frequency
    mp = [dev.MachineParams.from_block(case.blocks[g.block], w_s) for g in machines]
    mbus = np.array([g.bus for g in machines], dtype=int)
    xd = np.array([m.xd_p for m in mp])
    machine_y = np.zeros(case.n, dtype=complex)
    np.add.at(machine_y, mbus, 1 / (1j * xd))
    Ig = np.conj(S[mbus] / V[mbus])
    Eph = V[mbus] + 1j * xd * Ig
    xm = np.column_stack([np.angle(Eph), np.full(len(mbus), w_s), np.zeros(len(mbus))])

    gbus = np.array([g.bus for g in gfms], dtype=int)
    ss_list, theta = [], []
    for g in gfms:
        p = dev.GfmParams.from_block(case.blocks[g.block])
        s_mod = S[g.bus] * case.base_mva * 1e6 / p.n_modules
        vmag = abs(V[g.bus])
        if abs(s_mod) < 1e-6 * p.S_r:
            op = dev.GfmOperatingPoint.zero_power(p, vmag)
        else:
            op = dev.GfmOperatingPoint.from_power(p, s_mod, vmag)
        ss = dev.gfm_build_state_space(p, op)
        ss_list.append(ss)
        theta.append(float(np.angle(V[g.bus])))
    load_y = np.array([np.conj(b.load) / abs(V[b.id]) ** 2 for b in case.buses])
    bank = dev.MachineBank(mp, np.abs(Eph), np.zeros(len(mbus)))
    devices = Devices(mbus, bank, xm, gbus, ss_list, [], np.zeros((len(gfms), 13)),
                      np.array(theta), case.base_mva * 1e6, spec.integrator, spec.device_substep)
    return devices, machine_y, load_y


def check_steady_state(devices: Devices, V: np.ndarray, tol: float = STEADY_TOL) -> None:
    if len(devices.machine_bus):
        d = np.abs(devices.bank.rhs(devices.xm, V[devices.machine_bus]))
        for k in range(d.shape[0]):
            if d[k].max() >= tol:
                raise SteadyStateError(
                    f"machine at bus index {devices.machine_bus[k]} is not at equilibrium "
                    f"(|derivative| = {d[k].max():.3e})")
    for k, (ss, u) in enumerate(zip(devices.gfm_ss, devices.gfm_inputs(V))):
        d = np.abs(dev.gfm_derivative(ss, devices.xg[k], u)) / dev.state_bases(ss.params)
        if d.max() >= tol:
            raise SteadyStateError(f"GFM at bus index {devices.gfm_bus[k]} is not at equilibrium "
                                   f"(per-unit |derivative| = {d.max():.3e})")


def initialize(spec: ScenarioSpec, workers: int = 1) -> SystemState:
    case = load_case(spec.case_path)
    plan = make_partition(case, spec.subsystem_cuts, spec.subdomain_cuts)
    V_pf = solve_power_flow(case)
    devices, machine_y, load_y = _build_devices(case, V_pf, spec)

    proto = Trajectory(case, machine_y, load_y, list(case.branches), {}, devices, None)
    mono = MonolithicSolver(proto.dynamic_case())
    devices.couple(mono._lu)
    V0 = mono.solve(devices.injections(case.n))
    devices.observe(V0)
    # close the loop on the mechanical power so the start is an exact equilibrium
    from .devices import machine_power
    pm = machine_power(devices.bank.E, devices.xm[:, 0], V0[devices.machine_bus], devices.bank.xd)
    devices.xm[:, 2] = pm
    devices.bank.P_ref = np.array([pm[k] if m.P_m_ref is None else m.P_m_ref
                                   for k, m in enumerate(devices.bank.params)])
    check_steady_state(devices, V0)

    dec = DecomposedSolver(proto.dynamic_case(), plan, spec.sigma, spec.max_iter,
                           spec.boundary_g, workers)
    dec.seed(V0)
    decomposed = replace(proto, load_y=load_y.copy(), branches=list(case.branches), faults={},
                         devices=devices.copy(), solver=dec)
    try:
        decomposed.solve()
    except ArithmeticError as exc:
        exc.sim_time = 0.0
        raise
    bench = None
    if spec.benchmark:
        bench = replace(proto, load_y=load_y.copy(), branches=list(case.branches), faults={},
                        devices=devices.copy(), solver=mono, V=V0.copy())
    return SystemState(spec, case, plan, decomposed, bench, V0)


# ------------------------------------------------------------------- run ---

@dataclass
class TimeSeriesResult:
    bus_labels: list[int]
    machine_labels: list[int]
    gfm_labels: list[int]
    times: list[float] = field(default_factory=list)
    bus_V: list[np.ndarray] = field(default_factory=list)
    machine_x: list[np.ndarray] = field(default_factory=list)
    gfm_x: list[np.ndarray] = field(default_factory=list)
    gfm_freq: list[np.ndarray] = field(default_factory=list)
    iterations: list[int] = field(default_factory=list)
    clamped: list[bool] = field(default_factory=list)
    benchmark_V: list[np.ndarray] | None = None
    benchmark_machine_x: list[np.ndarray] | None = None

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"t": np.array(self.times), "V": np.array(self.bus_V),
               "machine": np.array(self.machine_x), "gfm": np.array(self.gfm_x),
               "gfm_freq": np.array(self.gfm_freq), "iter": np.array(self.iterations)}
        if self.benchmark_V is not None:
            out["bench_V"] = np.array(self.benchmark_V)
            out["bench_machine"] = np.array(self.benchmark_machine_x)
        return out


@dataclass
class ConvergenceLog:
    iterations: list[int] = field(default_factory=list)
    mismatch: list[list[float]] = field(default_factory=list)
    rkf_error: list[float] = field(default_factory=list)
    wall: dict[str, float] = field(default_factory=lambda: {
        "devices": 0.0, "decomposed_network": 0.0, "benchmark_network": 0.0, "events": 0.0})
    failed_at: float | None = None


def _record(res: TimeSeriesResult, log: ConvergenceLog, st: SystemState, t: float,
            clamped: bool = False, err: float = 0.0) -> None:
    d = st.decomposed
    res.times.append(t)
    res.bus_V.append(d.V.copy())
    res.machine_x.append(d.devices.xm.copy())
    res.gfm_x.append(d.devices.xg.copy())
    res.gfm_freq.append(d.devices.gfm_frequency())
    res.iterations.append(d.solver.iterations)
    res.clamped.append(clamped)
    log.iterations.append(d.solver.iterations)
    log.mismatch.append(list(d.solver.history))
    log.rkf_error.append(err)
    if st.benchmark is not None:
        res.benchmark_V.append(st.benchmark.V.copy())
        res.benchmark_machine_x.append(st.benchmark.devices.xm.copy())


def run(spec: ScenarioSpec, workers: int = 1,
        state: SystemState | None = None) -> tuple[TimeSeriesResult, ConvergenceLog]:
    st = state if state is not None else initialize(spec, workers)
    case = st.case
    res = TimeSeriesResult([b.label for b in case.buses],
                           [case.buses[i].label for i in st.decomposed.devices.machine_bus],
                           [case.buses[i].label for i in st.decomposed.devices.gfm_bus])
    if st.benchmark is not None:
        res.benchmark_V, res.benchmark_machine_x = [], []
    log = ConvergenceLog()
    trajs = [tr for tr in (st.decomposed, st.benchmark) if tr is not None]
    wall_key = {id(st.decomposed): "decomposed_network"}
    if st.benchmark is not None:
        wall_key[id(st.benchmark)] = "benchmark_network"

    pending = deque(spec.events)
    t = 0.0
    last = -math.inf
    _record(res, log, st, t)

    active = [0.0]  # time whose network solve is in progress, for error reports

    def fire(now: float) -> None:
        active[0] = now
        t0 = time.perf_counter()
        while pending and pending[0].time <= now + 1e-12:
            e = pending.popleft()
            for tr in trajs:
                tr.apply(e)
        for tr in trajs:
            tr.solve()
        log.wall["events"] += time.perf_counter() - t0
        _record(res, log, st, now)

    try:
        if pending and pending[0].time <= 0.0:
            fire(0.0)
            last = 0.0
        while t < spec.horizon - 1e-12:
            target = min(pending[0].time if pending else spec.horizon, spec.horizon)
            h = step_size_at(spec.schedule, t, last, target)
            if target - (t + h) < 1e-9:
                t_new = target
                h = target - t
            else:
                t_new = t + h
            active[0] = t_new
            t0 = time.perf_counter()
            clamped, err = False, 0.0
            for tr in trajs:
                c, e = tr.devices.advance(spec.integrator, tr.V, t, h)
                if tr is st.decomposed:
                    clamped, err = c, e
            log.wall["devices"] += time.perf_counter() - t0
            for tr in trajs:
                t0 = time.perf_counter()
                tr.solve()
                log.wall[wall_key[id(tr)]] += time.perf_counter() - t0
            t = t_new
            _record(res, log, st, t, clamped, err)
            if pending and pending[0].time <= t + 1e-12:
                fire(t)
                last = t
    except ArithmeticError as exc:
        log.failed_at = active[0]
        exc.sim_time = active[0]
        raise
    finally:
        for tr in trajs:
            tr.solver.close()
    return res, log


# -------------------------------------------------------------- reporting ---

@dataclass(frozen=True)
class DeviationReport:
    per_bus: dict[int, float]
    max_deviation: float
    worst_time: float
    worst_bus: int


def compare_to_benchmark(result: TimeSeriesResult) -> DeviationReport:
    if not result.benchmark_V:
        raise ValueError("result carries no benchmark trace")
    V = np.array(result.bus_V)
    B = np.array(result.benchmark_V)
    dev_ = np.abs(V - B)
    per_bus = {lab: float(dev_[:, k].max()) for k, lab in enumerate(result.bus_labels)}
    t_idx, b_idx = np.unravel_index(np.argmax(dev_), dev_.shape)
    return DeviationReport(per_bus, float(dev_.max()), result.times[t_idx],
                           result.bus_labels[b_idx])


def csv_header(result: TimeSeriesResult) -> list[str]:
    cols = ["t", "iter"]
    cols += [f"V_mag_bus{b}" for b in result.bus_labels]
    cols += [f"V_ang_bus{b}" for b in result.bus_labels]
    cols += [f"delta_g{g}" for g in result.machine_labels]
    cols += [f"omega_g{g}" for g in result.machine_labels]
    if len(result.gfm_labels) == 1:
        cols += [f"gfm_x{k}" for k in range(1, 14)]
    else:
        cols += [f"gfm{g}_x{k}" for g in result.gfm_labels for k in range(1, 14)]
    if result.benchmark_V is not None:
        cols += [f"bench_V_mag_bus{b}" for b in result.bus_labels]
    return cols


def write_csv(result: TimeSeriesResult, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(csv_header(result))
        for k, t in enumerate(result.times):
            V = result.bus_V[k]
            xm = result.machine_x[k]
            row = [t, result.iterations[k], *np.abs(V), *np.angle(V), *xm[:, 0], *xm[:, 1],
                   *result.gfm_x[k].ravel()]
            if result.benchmark_V is not None:
                row += list(np.abs(result.benchmark_V[k]))
            w.writerow([repr(float(v)) if not isinstance(v, int) else v for v in row])


def summary(spec: ScenarioSpec, result: TimeSeriesResult, log: ConvergenceLog) -> dict:
    out = {
        "scenario": spec.name,
        "steps": len(result.times),
        "total_iterations": int(sum(log.iterations)),
        "max_iterations": int(max(log.iterations)),
        "median_iterations": float(np.median(log.iterations)),
        "clamped_steps": int(sum(result.clamped)),
        "wall_clock_s": {k: round(v, 6) for k, v in log.wall.items()},
    }
    if result.benchmark_V:
        rep = compare_to_benchmark(result)
        out["max_deviation"] = rep.max_deviation
        out["worst_time"] = rep.worst_time
        out["worst_bus"] = rep.worst_bus
    return out


def write_summary(data: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(data, indent=2) + "\n", encoding="utf-8")


def band_entry_time(times, values, rel: float = 1e-3, start: float = 0.0) -> float:
    """Earliest time at or after ``start`` from which ``values`` stay within ``rel``
    of their final value. A trace that never leaves the band enters it at ``start``."""
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    final = values[-1]
    mask = times >= start
    t, v = times[mask], values[mask]
    outside = np.flatnonzero(np.abs(v - final) > rel * abs(final))
    if outside.size == 0:
        return float(start)
    k = outside[-1] + 1
    return float(t[k]) if k < len(t) else math.inf
