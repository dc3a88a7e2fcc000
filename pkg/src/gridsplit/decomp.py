"""Two-stage network decomposition.

Stage 1 splits the network into subsystems at cut branches. Each cut is
replaced on both sides by a fictitious boundary bus that carries the relaxed
peer voltage, and the subsystems are reconciled by Jacobi iteration on the
boundary injections until the port currents on every cut sum to zero.

Stage 2 splits each subsystem into subdomains and solves it by Schur
complement: interior unknowns of each subdomain are eliminated onto the
interface buses, the reduced interface system is solved, and the interiors
are recovered by independent back-substitution.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .netcore import PIVOT_TOL, PowerFlowCase, SingularMatrixError, stamp_branches


class PartitionError(ValueError):
    pass


class RelaxationDivergence(ArithmeticError):
    def __init__(self, message: str, iterations: int, mismatch: float):
        self.iterations = iterations
        self.mismatch = mismatch
        super().__init__(message)


@dataclass(frozen=True)
class PartitionPlan:
    subsystem_of: np.ndarray  # bus -> subsystem
    cut_edges: tuple[int, ...]  # branch indices cut between subsystems
    subdomain_of: np.ndarray  # bus -> subdomain index within its subsystem
    subdomain_cuts: tuple[int, ...]

    @property
    def n_subsystems(self) -> int:
        return int(self.subsystem_of.max()) + 1

    def buses_of(self, s: int) -> np.ndarray:
        return np.flatnonzero(self.subsystem_of == s)

    def n_subdomains(self, s: int) -> int:
        return int(self.subdomain_of[self.buses_of(s)].max()) + 1

    def balance(self) -> int:
        """Spread (max - min) of bus counts over all subdomains."""
        counts = [np.count_nonzero(self.subdomain_of[self.buses_of(s)] == d)
                  for s in range(self.n_subsystems) for d in range(self.n_subdomains(s))]
        return max(counts) - min(counts)


def _components(n: int, edges: Iterable[tuple[int, int]], nodes: np.ndarray | None = None):
    if nodes is None:
        nodes = np.arange(n)
    local = {b: k for k, b in enumerate(nodes)}
    rows, cols = [], []
    for a, b in edges:
        if a in local and b in local:
            rows.append(local[a])
            cols.append(local[b])
    g = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(nodes), len(nodes)))
    _, labels = connected_components(g, directed=False)
    return labels


def _resolve_cuts(case: PowerFlowCase, cuts) -> list[int]:
    out = []
    for a, b in cuts:
        try:
            out.append(case.branch_between(case.index_of(a), case.index_of(b)))
        except KeyError as exc:
            raise PartitionError(f"invalid cut {a}-{b}: {exc.args[0]}") from None
    if len(set(out)) != len(out):
        raise PartitionError("a branch is listed twice in the cut lists")
    return out


def make_partition(case: PowerFlowCase, subsystem_cuts: Sequence[tuple[int, int]] = (),
                   subdomain_cuts: Sequence[tuple[int, int]] = ()) -> PartitionPlan:
    """Partition ``case`` at the given cuts (pairs of bus numbers as in the case file)."""
    n = case.n
    live = [(k, br.from_bus, br.to_bus) for k, br in enumerate(case.branches) if br.in_service]
    if n > 1 and _components(n, [(a, b) for _, a, b in live]).max() > 0:
        raise PartitionError("network is disconnected before cutting")

    c1 = _resolve_cuts(case, subsystem_cuts)
    c2 = _resolve_cuts(case, subdomain_cuts)
    if set(c1) & set(c2):
        raise PartitionError("a branch cannot be both a subsystem and a subdomain cut")

    keep = [(a, b) for k, a, b in live if k not in c1]
    subsystem_of = _components(n, keep)
    for k in c1:
        br = case.branches[k]
        if subsystem_of[br.from_bus] == subsystem_of[br.to_bus]:
            raise PartitionError(f"subsystem cut on branch {k + 1} does not separate the network")

    subdomain_of = np.zeros(n, dtype=int)
    keep2 = [(a, b) for k, a, b in live if k not in c1 and k not in c2]
    for s in range(subsystem_of.max() + 1):
        nodes = np.flatnonzero(subsystem_of == s)
        subdomain_of[nodes] = _components(n, keep2, nodes)
    for k in c2:
        br = case.branches[k]
        if subsystem_of[br.from_bus] != subsystem_of[br.to_bus]:
            raise PartitionError(f"subdomain cut on branch {k + 1} crosses subsystems")
        if subdomain_of[br.from_bus] == subdomain_of[br.to_bus]:
            raise PartitionError(f"subdomain cut on branch {k + 1} does not separate its subsystem")
    return PartitionPlan(subsystem_of, tuple(c1), subdomain_of, tuple(c2))


@dataclass(frozen=True)
class BoundaryPort:
    subsystem: int
    local_bus: int  # global id of the interior bus j the port hangs off
    cut_y: complex
    G: complex
    peer: int  # index of the matching port on the other side of the cut
    branch: int
    V_d: complex = 0j
    S: complex = 0j
    I: complex = 0j  # current from the boundary bus into the local bus
    V_local: complex = 0j


def make_ports(case: PowerFlowCase, plan: PartitionPlan) -> list[BoundaryPort]:
    ports = []
    for k in plan.cut_edges:
        br = case.branches[k]
        base = len(ports)
        for end, other, peer in ((br.from_bus, br.to_bus, base + 1),
                                 (br.to_bus, br.from_bus, base)):
            ports.append(BoundaryPort(int(plan.subsystem_of[end]), end, br.series_y,
                                      br.series_y, peer, k))
    return ports


@dataclass(frozen=True)
class SubsystemView:
    index: int
    buses: np.ndarray  # global ids, ascending
    Y: sp.csc_matrix  # interior admittance with cut branches removed


def subsystem_views(case: PowerFlowCase, plan: PartitionPlan,
                    shunts: np.ndarray | None = None) -> list[SubsystemView]:
    if shunts is None:
        shunts = np.array([b.shunt for b in case.buses])
    views = []
    cut = set(plan.cut_edges)
    for s in range(plan.n_subsystems):
        buses = plan.buses_of(s)
        local = {b: k for k, b in enumerate(buses)}
        brs = [replace(br, from_bus=local[br.from_bus], to_bus=local[br.to_bus])
               for k, br in enumerate(case.branches)
               if k not in cut and br.from_bus in local and br.to_bus in local]
        views.append(SubsystemView(s, buses, stamp_branches(len(buses), brs, shunts[buses])))
    return views


@dataclass(frozen=True)
class AugmentedSubsystem:
    Y_mod: sp.csc_matrix
    buses: np.ndarray
    port_rows: dict[int, int]  # port index -> row of its boundary bus
    local_rows: dict[int, int]  # port index -> row of its interior bus

    @property
    def n(self) -> int:
        return self.Y_mod.shape[0]


def build_augmented(sub: SubsystemView, ports: Sequence[BoundaryPort],
                    port_ids: Sequence[int] | None = None) -> AugmentedSubsystem:
    """Append one boundary bus per port to the subsystem admittance.

    With the port current eliminated, each boundary bus j sees
    ``(G + y) V_d - y V_j = S`` and the interior bus j gains ``+y`` on its
    diagonal and ``-y`` towards the boundary bus, i.e. the cut branch is
    re-attached to a fictitious bus that is shunted by ``G``.
    """
    if port_ids is None:
        port_ids = list(range(len(ports)))
    n0 = len(sub.buses)
    local = {b: k for k, b in enumerate(sub.buses)}
    rows, cols, vals = [], [], []
    port_rows, local_rows = {}, {}
    for r, pid in enumerate(port_ids, start=n0):
        p = ports[pid]
        if p.cut_y == 0:
            raise ValueError(f"port {pid} has zero cut admittance")
        if p.local_bus not in local:
            raise ValueError(f"port {pid} references bus {p.local_bus} outside subsystem")
        j = local[p.local_bus]
        y = p.cut_y
        rows += [r, j, r, j]
        cols += [r, j, j, r]
        vals += [p.G + y, y, -y, -y]
        port_rows[pid] = r
        local_rows[pid] = j
    n = n0 + len(port_ids)
    extra = sp.csc_matrix((np.asarray(vals, dtype=complex), (rows, cols)), shape=(n, n))
    Y = sp.block_diag([sub.Y, sp.csc_matrix((n - n0, n - n0), dtype=complex)], format="csc")
    return AugmentedSubsystem((Y + extra).tocsc(), sub.buses, port_rows, local_rows)


def relax_boundary(ports: Sequence[BoundaryPort]) -> list[BoundaryPort]:
    """Jacobi update: every port takes its peer's values from the same snapshot."""
    out = []
    for p in ports:
        q = ports[p.peer]
        out.append(replace(p, V_d=q.V_local, I=-q.I, S=p.G * q.V_local - q.I))
    return out


@dataclass(frozen=True)
class ConvergenceReport:
    converged: bool
    max_mismatch: float
    mismatch: tuple[float, ...]  # one entry per port


def check_convergence(ports: Sequence[BoundaryPort], sigma: float) -> ConvergenceReport:
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    # current balance alone can be met with a stale boundary voltage when a port
    # sees an open circuit (G = 0); the voltage gap is scaled into current units
    mis = tuple(max(abs(p.I + ports[p.peer].I),
                    abs(p.cut_y) * abs(p.V_d - ports[p.peer].V_local)) for p in ports)
    worst = max(mis, default=0.0)
    return ConvergenceReport(worst <= sigma, worst, mis)


def kron_admittance(Y: sp.spmatrix, k: int) -> complex:
    """Driving-point admittance at local bus ``k`` with all other buses eliminated."""
    Y = sp.csc_matrix(Y).toarray()
    rest = [i for i in range(Y.shape[0]) if i != k]
    if not rest:
        return complex(Y[k, k])
    corr = Y[k, rest] @ np.linalg.solve(Y[np.ix_(rest, rest)], Y[rest, k])
    return complex(Y[k, k] - corr)


# ---------------------------------------------------------------- Schur ---

def _factor(M: np.ndarray, what: str, index: int | None = None):
    if M.shape[0] == 0:
        return None
    lu, piv = la.lu_factor(M, check_finite=True)
    d = np.abs(np.diag(lu))
    if d.min() < PIVOT_TOL:
        raise SingularMatrixError(f"{what} is singular (pivot {int(d.argmin())})", index)
    return lu, piv


def _lu_solve(f, rhs):
    if f is None:
        return np.zeros(rhs.shape, dtype=complex)
    return la.lu_solve(f, rhs)


@dataclass
class SchurBlocks:
    interior: list[np.ndarray]  # row indices of each subdomain's interior
    interface: np.ndarray
    S: list[np.ndarray]  # local interior blocks
    B: list[np.ndarray]  # interior_i -> interface coupling
    C: list[np.ndarray]  # interface -> interior_i coupling
    D4: np.ndarray
    reduced: np.ndarray = field(repr=False, default=None)
    _local_lu: list = field(repr=False, default_factory=list)
    _reduced_lu: object = field(repr=False, default=None)

    @property
    def n(self) -> int:
        return sum(len(i) for i in self.interior) + len(self.interface)

    @property
    def D1(self) -> np.ndarray:
        return la.block_diag(*self.S) if self.S else np.zeros((0, 0), complex)

    @property
    def D2(self) -> np.ndarray:
        return np.vstack(self.B) if self.B else np.zeros((0, len(self.interface)), complex)

    @property
    def D3(self) -> np.ndarray:
        return np.hstack(self.C) if self.C else np.zeros((len(self.interface), 0), complex)

    def assemble(self) -> tuple[np.ndarray, np.ndarray]:
        """Dense block matrix and the permutation it is expressed in."""
        perm = np.concatenate(self.interior + [self.interface]).astype(int)
        top = np.hstack([self.D1, self.D2])
        bottom = np.hstack([self.D3, self.D4])
        return np.vstack([top, bottom]), perm


def build_schur_blocks(M, subdomain_of: np.ndarray, interface: np.ndarray,
                       mapper: Callable = map) -> SchurBlocks:
    """Split ``M`` into per-subdomain interior blocks and the shared interface.

    ``subdomain_of[i]`` labels row i; rows flagged in ``interface`` form the
    interface set regardless of label.
    """
    M = M.toarray() if sp.issparse(M) else np.asarray(M, dtype=complex)
    interface = np.asarray(interface, dtype=bool)
    iface = np.flatnonzero(interface)
    labels = np.asarray(subdomain_of)
    nsub = int(labels.max()) + 1 if labels.size else 0
    interior = [np.flatnonzero((labels == d) & ~interface) for d in range(nsub)]
    for a in range(nsub):
        for b in range(nsub):
            if a != b and np.any(M[np.ix_(interior[a], interior[b])]):
                raise ValueError(f"interiors of subdomains {a} and {b} are coupled directly")
    S = [M[np.ix_(r, r)] for r in interior]
    B = [M[np.ix_(r, iface)] for r in interior]
    C = [M[np.ix_(iface, r)] for r in interior]
    D4 = M[np.ix_(iface, iface)]

    local_lu = list(mapper(lambda k: _factor(S[k], f"local block of subdomain {k}", k),
                           range(nsub)))
    # D4 - sum_i C_i S_i^-1 B_i, accumulated in subdomain order
    terms = list(mapper(lambda k: C[k] @ _lu_solve(local_lu[k], B[k]), range(nsub)))
    reduced = D4.copy()
    for t in terms:
        reduced = reduced - t
    red_lu = _factor(reduced, "reduced interface matrix")
    return SchurBlocks(interior, iface, S, B, C, D4, reduced, local_lu, red_lu)


def schur_solve(blocks: SchurBlocks, rhs: np.ndarray,
                mapper: Callable = map) -> tuple[list[np.ndarray], np.ndarray]:
    """Solve the partitioned system; returns interior solutions and the interface solution."""
    rhs = np.asarray(rhs, dtype=complex)
    nsub = len(blocks.interior)
    f = [rhs[r] for r in blocks.interior]
    g = rhs[blocks.interface]
    y = list(mapper(lambda k: _lu_solve(blocks._local_lu[k], f[k]), range(nsub)))
    g_red = g.copy()
    for k in range(nsub):
        g_red = g_red - blocks.C[k] @ y[k]
    x_ext = _lu_solve(blocks._reduced_lu, g_red) if len(g_red) else g_red
    x_int = list(mapper(lambda k: _lu_solve(blocks._local_lu[k], f[k] - blocks.B[k] @ x_ext),
                        range(nsub)))
    return x_int, x_ext


def scatter(blocks: SchurBlocks, x_int: list[np.ndarray], x_ext: np.ndarray) -> np.ndarray:
    out = np.empty(blocks.n, dtype=complex)
    for r, x in zip(blocks.interior, x_int):
        out[r] = x
    out[blocks.interface] = x_ext
    return out


# ------------------------------------------------------ full network solve ---

G_MODES = ("cut", "norton")


class DecomposedSolver:
    """Network solve through boundary relaxation between Schur-solved subsystems.

    One call to :meth:`solve` is a sequence of barrier-synchronized supersteps:
    all subsystems solve against the same port snapshot, then ports are
    checked and relaxed once on the calling thread.
    """

    def __init__(self, case: PowerFlowCase, plan: PartitionPlan, sigma: float = 1e-8,
                 max_iter: int = 50, g_mode: str = "norton", workers: int = 1):
        if g_mode not in G_MODES:
            raise ValueError(f"g_mode must be one of {G_MODES}")
        self.plan = plan
        self.sigma = sigma
        self.max_iter = max_iter
        self.g_mode = g_mode
        self.workers = workers
        self._outer = ThreadPoolExecutor(workers) if workers > 1 else None
        self._inner = ThreadPoolExecutor(workers) if workers > 1 else None
        self.ports = make_ports(case, plan)
        self.history: list[float] = []
        self.iterations = 0
        self.rebuild(case)

    def close(self):
        for pool in (self._outer, self._inner):
            if pool is not None:
                pool.shutdown()

    def _map(self, pool):
        return map if pool is None else pool.map

    def rebuild(self, case: PowerFlowCase) -> None:
        """Refresh every subsystem representation after the network changed."""
        self.case = case
        self.views = subsystem_views(case, self.plan)
        ports = []
        for p in self.ports:
            y = case.branches[p.branch].series_y
            if self.g_mode == "cut":
                G = y
            else:
                q = self.ports[p.peer]
                view = self.views[q.subsystem]
                G = kron_admittance(view.Y, int(np.searchsorted(view.buses, q.local_bus)))
            ports.append(replace(p, cut_y=y, G=G, S=G * p.V_d + p.I))
        self.ports = ports
        self.aug = []
        self.blocks = []
        cut2 = [case.branches[k] for k in self.plan.subdomain_cuts]
        for view in self.views:
            ids = [k for k, p in enumerate(self.ports) if p.subsystem == view.index]
            aug = build_augmented(view, self.ports, ids)
            labels = np.empty(aug.n, dtype=int)
            labels[:len(view.buses)] = self.plan.subdomain_of[view.buses]
            for pid, r in aug.port_rows.items():
                labels[r] = labels[aug.local_rows[pid]]
            iface = np.zeros(aug.n, dtype=bool)
            local = {b: k for k, b in enumerate(view.buses)}
            for br in cut2:
                for end in (br.from_bus, br.to_bus):
                    if end in local:
                        iface[local[end]] = True
            self.aug.append(aug)
            self.blocks.append(build_schur_blocks(aug.Y_mod, labels, iface,
                                                  self._map(self._inner)))

    def seed(self, V: np.ndarray) -> None:
        """Set every port to the values implied by a full-network voltage vector."""
        ports = []
        for p in self.ports:
            q = self.ports[p.peer]
            V_d = V[q.local_bus]
            I = p.cut_y * (V_d - V[p.local_bus])
            ports.append(replace(p, V_d=V_d, I=I, S=p.G * V_d + I, V_local=V[p.local_bus]))
        self.ports = ports

    def _solve_subsystem(self, s: int, I_inj: np.ndarray, ports) -> np.ndarray:
        aug = self.aug[s]
        rhs = np.zeros(aug.n, dtype=complex)
        rhs[:len(aug.buses)] = I_inj[aug.buses]
        for pid, r in aug.port_rows.items():
            rhs[r] = ports[pid].S
        x_int, x_ext = schur_solve(self.blocks[s], rhs, self._map(self._inner))
        return scatter(self.blocks[s], x_int, x_ext)

    def solve(self, I_inj: np.ndarray) -> np.ndarray:
        I_inj = np.asarray(I_inj, dtype=complex)
        self.history = []
        V = np.empty(self.case.n, dtype=complex)
        for it in range(1, self.max_iter + 1):
            snapshot = tuple(self.ports)
            sols = list(self._map(self._outer)(
                lambda s: self._solve_subsystem(s, I_inj, snapshot), range(len(self.aug))))
            ports = list(snapshot)
            for s, (aug, x) in enumerate(zip(self.aug, sols)):
                V[aug.buses] = x[:len(aug.buses)]
                for pid, r in aug.port_rows.items():
                    v_d, v_j = x[r], x[aug.local_rows[pid]]
                    ports[pid] = replace(ports[pid], V_d=v_d, V_local=v_j,
                                         I=ports[pid].cut_y * (v_d - v_j))
            report = check_convergence(ports, self.sigma)
            self.history.append(report.max_mismatch)
            if report.converged:
                self.ports = ports
                self.iterations = it
                return V.copy()
            self.ports = relax_boundary(ports)
        raise RelaxationDivergence(
            f"boundary relaxation did not converge in {self.max_iter} iterations "
            f"(mismatch {self.history[-1]:.3e} > sigma {self.sigma:.1e})",
            self.max_iter, self.history[-1])
