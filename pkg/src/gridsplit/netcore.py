"""Network data model, case-file ingestion, admittance assembly and the
monolithic sparse-LU solve used as the reference path.

Case files are plain text with three whitespace-delimited tables (``BUS``,
``BRANCH``, ``GEN``) laid out like MATPOWER, followed by named parameter
blocks for the dynamic devices::

    base_mva = 100
    BUS
    # id type Pd Qd Gs Bs baseKV
    1  3  0  0  0  0  16.5
    ...
    [machine g2]
    H = 3.7

Powers are given in MW/MVAr and converted to per-unit on ``base_mva``.
Branch impedances are already per-unit.
"""
from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

PIVOT_TOL = 1e-12


class CaseParseError(ValueError):
    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


class CaseValidationError(ValueError):
    pass


class SingularMatrixError(ArithmeticError):
    def __init__(self, message: str, index: int | None = None):
        self.index = index
        super().__init__(message)


class BusKind(enum.Enum):
    PQ = 1
    PV = 2
    SLACK = 3


@dataclass(frozen=True)
class Bus:
    id: int  # contiguous internal index
    label: int  # bus number as written in the case file
    kind: BusKind
    base_kv: float
    shunt: complex = 0j  # pu admittance at 1 pu voltage
    load: complex = 0j  # pu power


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    series_y: complex
    charging: float = 0.0
    in_service: bool = True

    @property
    def endpoints(self) -> frozenset[int]:
        return frozenset((self.from_bus, self.to_bus))


@dataclass(frozen=True)
class Generator:
    bus: int
    kind: str  # "machine" or "gfm"
    block: str
    p: float = 0.0  # pu
    q: float = 0.0  # pu
    v_set: float = 1.0


@dataclass(frozen=True)
class PowerFlowCase:
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...]
    base_mva: float = 100.0
    frequency: float = 60.0
    blocks: dict[str, dict[str, float]] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.buses)

    def index_of(self, label: int) -> int:
        for bus in self.buses:
            if bus.label == label:
                return bus.id
        raise KeyError(f"no bus numbered {label}")

    def branch_between(self, a: int, b: int) -> int:
        """Index of the in-service branch joining internal buses ``a`` and ``b``."""
        want = frozenset((a, b))
        for k, br in enumerate(self.branches):
            if br.in_service and br.endpoints == want:
                return k
        raise KeyError(f"no in-service branch between buses {a} and {b}")

    def validate(self) -> None:
        if not self.base_mva > 0:
            raise CaseValidationError("base_mva must be positive")
        ids = [b.id for b in self.buses]
        if ids != list(range(len(ids))):
            raise CaseValidationError("bus ids must be contiguous from 0")
        labels = [b.label for b in self.buses]
        if len(set(labels)) != len(labels):
            dup = sorted({x for x in labels if labels.count(x) > 1})
            raise CaseValidationError(f"duplicate bus id {dup[0]}")
        n_slack = sum(b.kind is BusKind.SLACK for b in self.buses)
        if n_slack != 1:
            raise CaseValidationError(f"exactly one slack bus required, found {n_slack}")
        for k, br in enumerate(self.branches):
            for end in (br.from_bus, br.to_bus):
                if not 0 <= end < self.n:
                    raise CaseValidationError(f"branch {k + 1} references unknown bus")
            if br.from_bus == br.to_bus:
                raise CaseValidationError(f"branch {k + 1} has from == to")
            if br.in_service and (br.series_y == 0 or not np.isfinite(br.series_y)):
                raise CaseValidationError(f"branch {k + 1} has zero or non-finite admittance")
        for g in self.generators:
            if not 0 <= g.bus < self.n:
                raise CaseValidationError(f"generator references unknown bus")
            if g.block not in self.blocks:
                raise CaseValidationError(f"generator at bus {self.buses[g.bus].label} "
                                          f"references missing block '{g.block}'")


_KIND_CODES = {1: BusKind.PQ, 2: BusKind.PV, 3: BusKind.SLACK}
_SECTION = re.compile(r"^\[\s*(\w+)\s+([\w.-]+)\s*\]$")


def _floats(tokens: list[str], lineno: int, path: str, count: int) -> list[float]:
    if len(tokens) != count:
        raise CaseParseError(f"expected {count} columns, got {len(tokens)}", lineno, path)
    try:
        return [float(t) for t in tokens]
    except ValueError as exc:
        raise CaseParseError(str(exc), lineno, path) from None


def parse_case(text: str, path: str = "<string>") -> PowerFlowCase:
    base_mva = 100.0
    frequency = 60.0
    table = None
    block_name = None
    raw_buses: list[tuple[int, list[float]]] = []
    raw_branches: list[tuple[int, list[float]]] = []
    raw_gens: list[tuple[int, list[str]]] = []
    blocks: dict[str, dict[str, float]] = {}

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.upper() in ("BUS", "BRANCH", "GEN"):
            table, block_name = line.upper(), None
            continue
        m = _SECTION.match(line)
        if m:
            kind, name = m.groups()
            if kind not in ("gfm", "machine"):
                raise CaseParseError(f"unknown block kind '{kind}'", lineno, path)
            if name in blocks:
                raise CaseParseError(f"duplicate block '{name}'", lineno, path)
            table, block_name = None, name
            blocks[name] = {}
            continue
        if "=" in line:
            key, _, value = (s.strip() for s in line.partition("="))
            try:
                number = float(value)
            except ValueError:
                raise CaseParseError(f"bad value for '{key}': {value!r}", lineno, path) from None
            if block_name is not None:
                blocks[block_name][key] = number
            elif key == "base_mva":
                base_mva = number
            elif key == "frequency":
                frequency = number
            else:
                raise CaseParseError(f"unknown key '{key}'", lineno, path)
            continue
        tokens = line.split()
        if table == "BUS":
            raw_buses.append((lineno, _floats(tokens, lineno, path, 7)))
        elif table == "BRANCH":
            raw_branches.append((lineno, _floats(tokens, lineno, path, 6)))
        elif table == "GEN":
            if len(tokens) not in (3, 6):
                raise CaseParseError(f"expected 3 or 6 columns, got {len(tokens)}", lineno, path)
            raw_gens.append((lineno, tokens))
        else:
            raise CaseParseError(f"data outside of a table: {line!r}", lineno, path)

    if not raw_buses:
        raise CaseParseError("no BUS table", None, path)

    buses = []
    label_to_id: dict[int, int] = {}
    for idx, (lineno, (num, kind, pd, qd, gs, bs, kv)) in enumerate(raw_buses):
        if int(kind) not in _KIND_CODES:
            raise CaseParseError(f"bad bus type {kind}", lineno, path)
        label = int(num)
        if label in label_to_id:
            raise CaseValidationError(f"duplicate bus id {label} (line {lineno})")
        label_to_id[label] = idx
        buses.append(Bus(id=idx, label=label, kind=_KIND_CODES[int(kind)], base_kv=kv,
                         shunt=complex(gs, bs) / base_mva, load=complex(pd, qd) / base_mva))

    def resolve(label: float, lineno: int) -> int:
        try:
            return label_to_id[int(label)]
        except KeyError:
            raise CaseValidationError(f"unknown bus {int(label)} (line {lineno})") from None

    branches = []
    for lineno, (f, t, r, x, b, status) in raw_branches:
        if r == 0 and x == 0:
            raise CaseValidationError(f"branch on line {lineno} has zero impedance")
        branches.append(Branch(resolve(f, lineno), resolve(t, lineno), 1 / complex(r, x), b,
                               bool(status)))

    gens = []
    for lineno, tokens in raw_gens:
        bus = resolve(float(tokens[0]), lineno)
        if tokens[1] not in ("machine", "gfm"):
            raise CaseParseError(f"unknown generator kind '{tokens[1]}'", lineno, path)
        p = q = 0.0
        v = 1.0
        if len(tokens) == 6:
            p, q, v = _floats(tokens[3:], lineno, path, 3)
            p, q = p / base_mva, q / base_mva
        gens.append(Generator(bus, tokens[1], tokens[2], p, q, v))

    case = PowerFlowCase(tuple(buses), tuple(branches), tuple(gens), base_mva, frequency, blocks)
    case.validate()
    return case


def load_case(path: str | Path) -> PowerFlowCase:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"case file not found: {path}")
    return parse_case(path.read_text(encoding="utf-8"), str(path))


def dump_case(case: PowerFlowCase) -> str:
    """Serialize ``case`` in the format read by :func:`parse_case`."""
    s = case.base_mva
    out = [f"base_mva = {s!r}", f"frequency = {case.frequency!r}", "BUS",
           "# id type Pd Qd Gs Bs baseKV"]
    for b in case.buses:
        out.append(f"{b.label} {b.kind.value} {b.load.real * s!r} {b.load.imag * s!r} "
                   f"{b.shunt.real * s!r} {b.shunt.imag * s!r} {b.base_kv!r}")
    out += ["BRANCH", "# fbus tbus r x b status"]
    for br in case.branches:
        z = 1 / br.series_y
        out.append(f"{case.buses[br.from_bus].label} {case.buses[br.to_bus].label} "
                   f"{z.real!r} {z.imag!r} {br.charging!r} {int(br.in_service)}")
    out += ["GEN", "# bus kind block Pg Qg Vg"]
    for g in case.generators:
        out.append(f"{case.buses[g.bus].label} {g.kind} {g.block} {g.p * s!r} {g.q * s!r} "
                   f"{g.v_set!r}")
    kinds = {g.block: g.kind for g in case.generators}
    for name, params in case.blocks.items():
        out.append(f"[{kinds.get(name, 'machine')} {name}]")
        out += [f"{k} = {v!r}" for k, v in params.items()]
    return "\n".join(out) + "\n"


@dataclass(frozen=True)
class AdmittanceMatrix:
    matrix: sp.csc_matrix

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()

    def __matmul__(self, v):
        return self.matrix @ v


def stamp_branches(n: int, branches, shunts=None) -> sp.csc_matrix:
    diag = np.zeros(n, dtype=complex)
    rows, cols, vals = [], [], []
    for br in branches:
        if not br.in_service:
            continue
        i, j, y = br.from_bus, br.to_bus, br.series_y
        half = 0.5j * br.charging
        diag[i] += y + half
        diag[j] += y + half
        # off-diagonals accumulate on the upper triangle and are mirrored, so
        # parallel branches give an exactly symmetric matrix
        rows.append(min(i, j))
        cols.append(max(i, j))
        vals.append(-y)
    if shunts is not None:
        diag += np.asarray(shunts, dtype=complex)
    upper = sp.csc_matrix((np.asarray(vals, dtype=complex), (rows, cols)), shape=(n, n))
    upper.sum_duplicates()
    return (upper + upper.T + sp.diags(diag, format="csc")).tocsc()


def build_admittance(case: PowerFlowCase) -> AdmittanceMatrix:
    """Standard nodal stamping: series admittance, half charging at each end, bus shunts."""
    return AdmittanceMatrix(stamp_branches(case.n, case.branches, [b.shunt for b in case.buses]))


class LUFactor:
    """Sparse LU of a complex admittance matrix with a pivot-magnitude guard."""

    def __init__(self, Y: AdmittanceMatrix | sp.spmatrix | np.ndarray):
        M = Y.matrix if isinstance(Y, AdmittanceMatrix) else Y
        M = sp.csc_matrix(M, dtype=complex)
        self.n = M.shape[0]
        self._M = M
        empty = np.flatnonzero(np.diff(M.indptr) == 0)
        if empty.size:
            raise SingularMatrixError(f"structurally singular: column {empty[0]} is empty",
                                      int(empty[0]))
        try:
            self._lu = spla.splu(M)
        except RuntimeError as exc:
            raise SingularMatrixError(f"LU factorization failed: {exc}") from None
        diag = np.abs(self._lu.U.diagonal())
        k = int(np.argmin(diag))
        if diag[k] < PIVOT_TOL:
            raise SingularMatrixError(f"pivot {k} has magnitude {diag[k]:.3e}", k)

    def solve(self, rhs: np.ndarray, check: bool = False) -> np.ndarray:
        rhs = np.asarray(rhs, dtype=complex)
        if rhs.shape[0] != self.n:
            raise ValueError(f"rhs has length {rhs.shape[0]}, expected {self.n}")
        v = self._lu.solve(rhs)
        if check:
            scale = max(np.max(np.abs(rhs), initial=0.0), np.finfo(float).tiny)
            resid = np.max(np.abs(self._M @ v - rhs), initial=0.0)
            if resid > 1e-10 * scale:
                raise ArithmeticError(f"residual {resid:.3e} exceeds 1e-10 relative")
        return v


def monolithic_solve(Y: AdmittanceMatrix, I: np.ndarray, check: bool = False) -> np.ndarray:
    return LUFactor(Y).solve(I, check=check)


def solve_power_flow(case: PowerFlowCase, tol: float = 1e-12, max_iter: int = 30) -> np.ndarray:
    """Newton-Raphson in polar form; returns complex bus voltages.

    Only used to produce the pre-disturbance operating point.
    """
    Y = build_admittance(case).toarray()
    n = case.n
    s_spec = -np.array([b.load for b in case.buses])
    vm = np.ones(n)
    for g in case.generators:
        s_spec[g.bus] += complex(g.p, g.q)
        if case.buses[g.bus].kind is not BusKind.PQ:
            vm[g.bus] = g.v_set
    va = np.zeros(n)
    kinds = [b.kind for b in case.buses]
    pvpq = [i for i in range(n) if kinds[i] is not BusKind.SLACK]
    pq = [i for i in range(n) if kinds[i] is BusKind.PQ]

    for _ in range(max_iter):
        V = vm * np.exp(1j * va)
        mis = V * np.conj(Y @ V) - s_spec
        F = np.concatenate([mis.real[pvpq], mis.imag[pq]])
        if np.max(np.abs(F), initial=0.0) < tol:
            return V
        Ibus = Y @ V
        dS_dVa = 1j * np.diag(V) @ np.conj(np.diag(Ibus) - Y @ np.diag(V))
        dS_dVm = np.diag(V) @ np.conj(Y @ np.diag(V / vm)) + np.diag(V / vm) @ np.conj(np.diag(Ibus))
        J = np.block([
            [dS_dVa.real[np.ix_(pvpq, pvpq)], dS_dVm.real[np.ix_(pvpq, pq)]],
            [dS_dVa.imag[np.ix_(pq, pvpq)], dS_dVm.imag[np.ix_(pq, pq)]],
        ])
        dx = np.linalg.solve(J, -F)
        va[pvpq] += dx[:len(pvpq)]
        vm[pq] += dx[len(pvpq):]
    raise ArithmeticError(f"power flow did not converge in {max_iter} iterations")


def bus_injections(case: PowerFlowCase, V: np.ndarray) -> np.ndarray:
    """Complex power injected by generation at every bus (loads added back)."""
    Y = build_admittance(case).matrix
    return V * np.conj(Y @ V) + np.array([b.load for b in case.buses])
