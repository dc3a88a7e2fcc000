"""Dynamic device models.

* grid-forming inverter with virtual-admittance control, 13-state small-signal
  model in the grid d-q frame (SI units, single module);
* classical synchronous machine with a first-order droop governor;
* aggregation of n identical converter modules.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace

import numpy as np

W60 = 2 * math.pi * 60

STATE_NAMES = ("i_gd", "i_gq", "v_Cd", "v_Cq", "i_Ld", "i_Lq", "Int_id", "Int_iq",
               "i_Ld_ref", "i_Lq_ref", "P_lpf", "theta_ps", "Q_lpf")
INPUT_NAMES = ("v_gd", "v_gq", "P_ref", "Q_ref")
IX = {name: k for k, name in enumerate(STATE_NAMES)}
IU = {name: k for k, name in enumerate(INPUT_NAMES)}


@dataclass(frozen=True)
class GfmParams:
    R_f: float = 0.001
    L_f: float = 5e-3
    C_f: float = 10e-6
    R_g: float = 0.057
    L_g: float = 15e-3
    R_v: float = 0.2 * W60 * 30e-3
    L_v: float = 30e-3
    Kp_id: float = 5.0
    Ki_id: float = 5000.0
    Kp_iq: float = 0.0
    Ki_iq: float = 0.0
    w_lpf: float = 300.0
    m_p: float = 0.25 * W60 / 100e6
    n_q: float = 0.25 * 230e3 / 100e6
    w1: float = W60
    n_modules: int = 200
    S_r: float = 500e3  # VA per module
    V_r: float = 5300.0  # rated line-line rms voltage of a module
    I_max: float = 1.1  # pu of module rated current

    def __post_init__(self):
        for name in ("L_f", "C_f", "L_g", "L_v", "w_lpf", "w1", "S_r", "V_r"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.n_modules < 1:
            raise ValueError("n_modules must be >= 1")

    @classmethod
    def from_block(cls, block: dict[str, float]) -> "GfmParams":
        kw = dict(block)
        alias = {"n": "n_modules"}
        for old, new in alias.items():
            if old in kw:
                kw[new] = kw.pop(old)
        ratio = kw.pop("Rv_over_Xv", None)
        known = {f.name for f in fields(cls)}
        unknown = set(kw) - known
        if unknown:
            raise ValueError(f"unknown gfm parameter(s): {', '.join(sorted(unknown))}")
        if "n_modules" in kw:
            kw["n_modules"] = int(kw["n_modules"])
        p = cls(**kw)
        if ratio is not None:
            p = replace(p, R_v=ratio * p.w1 * p.L_v)
        return p

    @property
    def v_peak(self) -> float:
        """Peak phase voltage; the d-q amplitude of rated voltage."""
        return math.sqrt(2 / 3) * self.V_r

    @property
    def i_base(self) -> float:
        return self.S_r / (1.5 * self.v_peak)

    @property
    def rating(self) -> float:
        return self.n_modules * self.S_r


@dataclass(frozen=True)
class GfmOperatingPoint:
    i_gd0: float = 0.0
    i_gq0: float = 0.0
    v_Cd0: float = 0.0
    v_Cq0: float = 0.0
    i_Ld0: float = 0.0
    i_Lq0: float = 0.0
    v_cd0: float = 0.0
    v_cq0: float = 0.0
    v_gd0: float = 0.0
    v_gq0: float = 0.0

    @classmethod
    def zero_power(cls, p: GfmParams, v_mag: float = 1.0) -> "GfmOperatingPoint":
        """All currents zero, capacitor, converter and grid voltages on the d axis."""
        v = v_mag * p.v_peak
        return cls(v_Cd0=v, v_cd0=v, v_gd0=v)

    @classmethod
    def from_power(cls, p: GfmParams, s: complex, v_mag: float = 1.0) -> "GfmOperatingPoint":
        """Steady state of the filter delivering ``s`` (VA, one module) into a d-axis grid."""
        vg = v_mag * p.v_peak
        ig = np.conj(s / (1.5 * vg))
        vC = vg + complex(p.R_g, p.w1 * p.L_g) * ig
        iL = ig + 1j * p.w1 * p.C_f * vC
        vc = vC + complex(p.R_f, p.w1 * p.L_f) * iL
        return cls(ig.real, ig.imag, vC.real, vC.imag, iL.real, iL.imag, vc.real, vc.imag, vg, 0.0)


@dataclass(frozen=True)
class GfmStateSpace:
    A: np.ndarray
    B: np.ndarray
    params: GfmParams
    op: GfmOperatingPoint

    def __post_init__(self):
        if self.A.shape != (13, 13) or self.B.shape != (13, 4):
            raise ValueError("GFM state space must be 13x13 / 13x4")


def gfm_build_state_space(p: GfmParams, op: GfmOperatingPoint | None = None) -> GfmStateSpace:
    if op is None:
        op = GfmOperatingPoint.zero_power(p)
    w = p.w1
    A = np.zeros((13, 13))
    B = np.zeros((13, 4))
    igd, igq, vCd, vCq, iLd, iLq, Intd, Intq, isd, isq, P, th, Q = range(13)

    # L_g branch, grid frame
    A[igd, igd] = -p.R_g / p.L_g
    A[igd, igq] = w
    A[igd, vCd] = 1 / p.L_g
    B[igd, 0] = -1 / p.L_g
    A[igq, igq] = -p.R_g / p.L_g
    A[igq, igd] = -w
    A[igq, vCq] = 1 / p.L_g
    B[igq, 1] = -1 / p.L_g

    # C_f
    A[vCd, iLd] = 1 / p.C_f
    A[vCd, igd] = -1 / p.C_f
    A[vCd, vCq] = w
    A[vCq, iLq] = 1 / p.C_f
    A[vCq, igq] = -1 / p.C_f
    A[vCq, vCd] = -w

    # L_f driven by the current-loop output. The d-axis decoupling term cancels
    # the filter cross-coupling; the q-axis term as written adds to it.
    A[iLd, iLd] = -(p.Kp_id + p.R_f) / p.L_f
    A[iLd, vCd] = -1 / p.L_f
    A[iLd, Intd] = p.Ki_id / p.L_f
    A[iLd, isd] = p.Kp_id / p.L_f
    A[iLd, th] = (-p.Kp_id * op.i_Lq0 + w * p.L_f * op.i_Ld0 - op.v_cq0) / p.L_f
    A[iLq, iLq] = -(p.Kp_iq + p.R_f) / p.L_f
    A[iLq, iLd] = -2 * w
    A[iLq, vCq] = -1 / p.L_f
    A[iLq, Intq] = p.Ki_iq / p.L_f
    A[iLq, isq] = p.Kp_iq / p.L_f
    A[iLq, th] = (p.Kp_iq * op.i_Ld0 - w * p.L_f * op.i_Lq0 + op.v_cd0) / p.L_f

    # current-loop integrators act on control-frame errors
    A[Intd, isd] = 1
    A[Intd, iLd] = -1
    A[Intd, th] = -op.i_Lq0
    A[Intq, isq] = 1
    A[Intq, iLq] = -1
    A[Intq, th] = op.i_Ld0

    # low-pass filtered P and Q; the angle terms of P cancel exactly
    k = 1.5 * p.w_lpf
    A[P, vCd] = k * op.i_gd0
    A[P, vCq] = k * op.i_gq0
    A[P, igd] = k * op.v_Cd0
    A[P, igq] = k * op.v_Cq0
    A[P, P] = -p.w_lpf
    A[Q, vCd] = -k * op.i_gq0
    A[Q, vCq] = k * op.i_gd0
    A[Q, igd] = k * op.v_Cq0
    A[Q, igq] = k * op.v_Cd0
    A[Q, th] = -2 * k * op.i_gd0 * op.v_Cd0
    A[Q, Q] = -p.w_lpf

    # P-droop
    A[th, P] = -p.m_p
    B[th, 2] = p.m_p

    # virtual admittance with the Q-droop voltage substituted in
    A[isd, isd] = -p.R_v / p.L_v
    A[isd, isq] = w
    A[isd, vCd] = -1 / p.L_v
    A[isd, th] = -op.v_Cq0 / p.L_v
    A[isd, Q] = -p.n_q / p.L_v
    B[isd, 3] = p.n_q / p.L_v
    A[isq, isq] = -p.R_v / p.L_v
    A[isq, isd] = -w
    A[isq, vCq] = -1 / p.L_v
    A[isq, th] = op.v_Cd0 / p.L_v

    return GfmStateSpace(A, B, p, op)


def gfm_derivative(ss: GfmStateSpace, x, u) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape[0] != 13 or u.shape[0] != 4:
        raise ValueError(f"expected 13 states and 4 inputs, got {x.shape} and {u.shape}")
    return ss.A @ x + ss.B @ u


def gfm_eigen_stability(ss: GfmStateSpace | np.ndarray) -> tuple[np.ndarray, bool]:
    A = ss.A if isinstance(ss, GfmStateSpace) else np.asarray(ss)
    if not np.all(np.isfinite(A)):
        raise ValueError("A contains non-finite entries")
    eig = np.linalg.eigvals(A)  # raises LinAlgError on non-convergence
    return eig, bool(np.all(eig.real < 0))


def inert_states(A: np.ndarray) -> list[int]:
    """States whose column of ``A`` is identically zero.

    Such a state feeds nothing back, so it contributes an exact zero eigenvalue
    regardless of how the rest of the loop is tuned.
    """
    return [k for k in range(A.shape[1]) if not np.any(A[:, k])]


def state_bases(p: GfmParams) -> np.ndarray:
    i, v, s = p.i_base, p.v_peak, p.S_r
    return np.array([i, i, v, v, i, i, i, i, i, i, s, 1.0, s])


def input_bases(p: GfmParams) -> np.ndarray:
    return np.array([p.v_peak, p.v_peak, p.S_r, p.S_r])


def per_unit(ss: GfmStateSpace) -> tuple[np.ndarray, np.ndarray]:
    bx = state_bases(ss.params)
    bu = input_bases(ss.params)
    return ss.A * bx[None, :] / bx[:, None], ss.B * bu[None, :] / bx[:, None]


@dataclass(frozen=True)
class AggregateSpec:
    n_modules: int
    module_rating: float
    system_base: float = 100e6
    transformer_count: int = 100

    def __post_init__(self):
        if self.n_modules < 1:
            raise ValueError("n_modules must be >= 1")

    @property
    def rating(self) -> float:
        return self.n_modules * self.module_rating


def aggregate(spec: AggregateSpec, module: GfmParams) -> GfmParams:
    """Single equivalent of ``spec.n_modules`` identical modules in parallel.

    Series impedances and controller gains with impedance units divide by n,
    capacitance and rating multiply by n, droop gains (per W / per VAr) divide
    by n. Per-unit dynamics on the aggregate base are unchanged.
    """
    n = spec.n_modules
    return replace(
        module,
        R_f=module.R_f / n, L_f=module.L_f / n, C_f=module.C_f * n,
        R_g=module.R_g / n, L_g=module.L_g / n,
        R_v=module.R_v / n, L_v=module.L_v / n,
        Kp_id=module.Kp_id / n, Ki_id=module.Ki_id / n,
        Kp_iq=module.Kp_iq / n, Ki_iq=module.Ki_iq / n,
        m_p=module.m_p / n, n_q=module.n_q / n,
        S_r=module.S_r * n, n_modules=1,
    )


def gfm_network_interface(ss: GfmStateSpace, x, theta_ref: float,
                          system_base: float) -> tuple[complex, complex]:
    """Norton injection (current, shunt) of the whole converter plant, system pu.

    The grid current is a state of the filter model, so the plant behaves as an
    ideal current source over one network solve and the shunt is zero.
    """
    p, op = ss.params, ss.op
    i_g = complex(op.i_gd0 + x[0], op.i_gq0 + x[1])
    scale = p.rating / system_base / p.i_base
    return i_g * scale * complex(math.cos(theta_ref), math.sin(theta_ref)), 0j


def gfm_grid_input(ss: GfmStateSpace, V: complex, theta_ref: float) -> np.ndarray:
    """Grid-voltage deviation (Δv_gd, Δv_gq) seen by a module for bus voltage ``V`` (pu)."""
    p, op = ss.params, ss.op
    v = V * complex(math.cos(theta_ref), -math.sin(theta_ref)) * p.v_peak
    return np.array([v.real - op.v_gd0, v.imag - op.v_gq0])


def gfm_grid_coupling(ss: GfmStateSpace, Z_pu: complex, system_base: float) -> complex:
    """Module grid-voltage change (V) per module grid current (A) through ``Z_pu``."""
    p = ss.params
    return complex(Z_pu) * p.v_peak * p.rating / (system_base * p.i_base)


def gfm_thevenin_system(ss: GfmStateSpace, Z_pu: complex, system_base: float) -> np.ndarray:
    """State matrix with the grid voltage closed through a Thevenin impedance.

    With ``v_g = E_th + Z_th i_g`` the grid-side inductor current and the bus
    voltage are solved together, so only ``E_th`` has to be held over a step.
    """
    z = gfm_grid_coupling(ss, Z_pu, system_base)
    M = np.array([[z.real, -z.imag], [z.imag, z.real]])
    A = ss.A.copy()
    A[:, 0:2] += ss.B[:, 0:2] @ M
    return A


def gfm_thevenin_input(ss: GfmStateSpace, E_th: complex, theta_ref: float, Z_pu: complex,
                       system_base: float) -> np.ndarray:
    """Held part of (Δv_gd, Δv_gq) for :func:`gfm_thevenin_system`."""
    op = ss.op
    z = gfm_grid_coupling(ss, Z_pu, system_base)
    v = gfm_grid_input(ss, E_th, theta_ref) + np.array([op.v_gd0, op.v_gq0])
    off = z * complex(op.i_gd0, op.i_gq0)
    return np.array([v[0] - op.v_gd0 + off.real, v[1] - op.v_gq0 + off.imag])


def gfm_reanchor(ss: GfmStateSpace, x: np.ndarray) -> tuple[np.ndarray, float]:
    """Move the grid reference frame onto the current control frame.

    Grid-frame vectors are rotated exactly by -Δθ_ps and Δθ_ps is reset to zero;
    the returned angle is added to the network reference angle. Control-frame
    states are untouched. To first order this is the identity, so it only
    removes the small-angle error that builds up while the frequency drifts.
    """
    op = ss.op
    theta = float(x[11])
    if theta == 0.0:
        return x, 0.0
    rot = complex(math.cos(theta), -math.sin(theta))
    y = x.copy()
    for (a, b), (ra, rb) in (((0, 1), (op.i_gd0, op.i_gq0)),
                             ((2, 3), (op.v_Cd0, op.v_Cq0)),
                             ((4, 5), (op.i_Ld0, op.i_Lq0))):
        z = complex(ra + x[a], rb + x[b]) * rot
        y[a], y[b] = z.real - ra, z.imag - rb
    y[11] = 0.0
    return y, theta


def gfm_clamp_references(ss: GfmStateSpace, x: np.ndarray) -> tuple[np.ndarray, bool]:
    """Limit the current-reference magnitude to ``I_max`` (AC-side stand-in for dc limits)."""
    p, op = ss.params, ss.op
    limit = p.I_max * p.i_base
    ref = complex(op.i_Ld0 + x[8], op.i_Lq0 + x[9])
    if abs(ref) <= limit:
        return x, False
    ref *= limit / abs(ref)
    y = x.copy()
    y[8], y[9] = ref.real - op.i_Ld0, ref.imag - op.i_Lq0
    return y, True


def gfm_frequency(ss: GfmStateSpace, x, P_ref: float = 0.0) -> float:
    """Control-frame angular frequency, rad/s."""
    return ss.params.w1 + ss.params.m_p * (P_ref - x[10])


@dataclass(frozen=True)
class MachineParams:
    H: float = 3.7
    D: float = 0.0
    tau_g: float = 5.0
    dp: float = 0.01
    xd_p: float = 0.2
    w_s: float = W60
    P_m_ref: float | None = None

    def __post_init__(self):
        for name in ("H", "tau_g", "dp"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @classmethod
    def from_block(cls, block: dict[str, float], w_s: float = W60) -> "MachineParams":
        kw = dict(block)
        if "P_ref" in kw:
            kw["P_m_ref"] = kw.pop("P_ref")
        unknown = set(kw) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown machine parameter(s): {', '.join(sorted(unknown))}")
        kw.setdefault("w_s", w_s)
        return cls(**kw)


@dataclass(frozen=True)
class MachineState:
    delta: float
    omega: float
    P_m: float
    E: float = 1.0


def swing_derivative(m: MachineParams, s: MachineState, P_e: float) -> tuple[float, float, float]:
    P_ref = s.P_m if m.P_m_ref is None else m.P_m_ref
    slip = s.omega - m.w_s
    d_delta = slip
    d_omega = m.w_s / (2 * m.H) * (s.P_m - P_e - m.D * slip)
    d_pm = (P_ref - s.P_m - slip / (m.dp * m.w_s)) / m.tau_g
    return d_delta, d_omega, d_pm


def machine_power(E: np.ndarray, delta: np.ndarray, V: np.ndarray, xd_p: np.ndarray) -> np.ndarray:
    """Air-gap power of classical machines behind transient reactance."""
    e = E * np.exp(1j * delta)
    return (e * np.conj((e - V) / (1j * xd_p))).real


class MachineBank:
    """Vectorized swing + governor right-hand side for several machines.

    State layout is ``(k, 3)``: rotor angle, speed, mechanical power.
    """

    def __init__(self, params: list[MachineParams], E: np.ndarray, P_ref: np.ndarray):
        self.params = params
        self.H = np.array([m.H for m in params])
        self.D = np.array([m.D for m in params])
        self.tau = np.array([m.tau_g for m in params])
        self.dp = np.array([m.dp for m in params])
        self.xd = np.array([m.xd_p for m in params])
        self.w_s = np.array([m.w_s for m in params])
        self.E = np.asarray(E, dtype=float)
        self.P_ref = np.asarray(P_ref, dtype=float)

    def rhs(self, x: np.ndarray, V: np.ndarray) -> np.ndarray:
        delta, omega, pm = x[:, 0], x[:, 1], x[:, 2]
        pe = machine_power(self.E, delta, V, self.xd)
        slip = omega - self.w_s
        out = np.empty_like(x)
        out[:, 0] = slip
        out[:, 1] = self.w_s / (2 * self.H) * (pm - pe - self.D * slip)
        out[:, 2] = (self.P_ref - pm - slip / (self.dp * self.w_s)) / self.tau
        return out

    def norton_current(self, x: np.ndarray) -> np.ndarray:
        return self.E * np.exp(1j * x[:, 0]) / (1j * self.xd)
