"""Converter case studies: ideal boost and three-phase LCL inverter.

Both builders return exactly-discretized switched models (matrix exponential
of the continuous modes over one sample interval) together with the stage
cost and the desired-state map used by the value function.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import (
    AffineMode,
    GuardedMode,
    StageCost,
    SwitchedModel,
    discretize_affine,
    matrix_exponential,
)
from .errors import ModelError
from .fitting import EnergyPrior


@dataclass(frozen=True)
class BoostParams:
    """Ideal boost converter parameters (SI units)."""

    V_dc: float = 10.0
    L: float = 450e-6
    R_L: float = 0.3
    C: float = 220e-6
    R_load: float = 73.0
    v_des: float = 30.0
    timestep_s: float = 15e-6
    # Which continuous matrix the switch-on mode uses.  "standard" is the
    # usual ideal-boost topology: the diode path couples inductor and
    # capacitor while the switch is open, and the on mode charges the
    # inductor with the capacitor decoupled.  "as_printed" swaps the two
    # assignments (coupled dynamics on the on mode); it reproduces one
    # published description of this converter but leaves the conduction-mode
    # guard on the decoupled branch, where it never engages, so closed loops
    # can drive the inductor current negative.  The DCM guard always sits on
    # the off mode.
    topology: str = "standard"

    def __post_init__(self):
        for name in ("V_dc", "L", "R_L", "C", "R_load", "v_des", "timestep_s"):
            if getattr(self, name) <= 0:
                raise ModelError(f"boost parameter {name} must be positive")
        if self.topology not in ("as_printed", "standard"):
            raise ModelError(f"unknown boost topology {self.topology!r}")


def boost_continuous_modes(p: BoostParams):
    """Continuous-time (A, b) triples: coupled, decoupled, and DCM blocks.

    State is (inductor current A, capacitor voltage V).  The coupled block has
    the energy-transfer connection (-1/L, 1/C); the decoupled block charges
    the inductor from the source while the capacitor discharges into the load;
    the DCM block freezes the inductor current and lets the capacitor decay
    with time constant R_load*C.
    """
    a_ind = -p.R_L / p.L
    a_cap = -1.0 / (p.R_load * p.C)
    drive = p.V_dc / p.L
    coupled = (np.array([[a_ind, -1.0 / p.L], [1.0 / p.C, a_cap]]), np.array([drive, 0.0]))
    decoupled = (np.array([[a_ind, 0.0], [0.0, a_cap]]), np.array([drive, 0.0]))
    dcm = (np.array([[0.0, 0.0], [0.0, a_cap]]), np.zeros(2))
    return coupled, decoupled, dcm


@dataclass(frozen=True, eq=False)
class BoostBuild:
    model: SwitchedModel
    stage: StageCost
    x_des: np.ndarray
    params: BoostParams


def build_boost(p: BoostParams = BoostParams()) -> BoostBuild:
    """Two-input boost model: switch on (input 1), switch off (input 2).

    The off mode is guarded between continuous and discontinuous conduction:
    the guard row/offset are taken from the discrete off/CCM map so that
    ``guard_row @ x >= offset`` is exactly "the inductor current predicted one
    step ahead stays nonnegative".  Stage cost is ``|v - v_des|`` and the
    constant desired state is ``(v_des / R_load, v_des)``, the load current at
    the regulated output.
    """
    coupled, decoupled, dcm = boost_continuous_modes(p)
    if p.topology == "as_printed":
        on_c, off_c = coupled, decoupled
    else:
        on_c, off_c = decoupled, coupled
    h = p.timestep_s
    on = discretize_affine(on_c[0], on_c[1], h)
    off_ccm = discretize_affine(off_c[0], off_c[1], h)
    off_dcm = discretize_affine(dcm[0], dcm[1], h)
    guard_row = off_ccm.A[0].copy()
    guard_offset = -off_ccm.b[0]
    off = GuardedMode(guard_row, guard_offset, off_ccm, off_dcm)
    model = SwitchedModel((on, off))
    x_des = np.array([p.v_des / p.R_load, p.v_des])
    stage = StageCost.weighted_l1([0.0, 1.0], x_des=x_des)
    return BoostBuild(model=model, stage=stage, x_des=x_des, params=p)


@dataclass(frozen=True)
class InverterParams:
    """Three-phase LCL inverter parameters (SI units).

    The fundamental frequency and sample period are not part of the original
    case-study description; the defaults give 800 control decisions per 50 Hz
    fundamental period.
    """

    V_dc: float = 700.0
    L1: float = 6.5e-6
    L2: float = 1.5e-6
    C: float = 15e-6
    V_load: float = 300.0
    I_des: float = 10.0
    omega: float = 2.0 * math.pi * 50.0
    timestep_s: float = 25e-6

    def __post_init__(self):
        for name in ("V_dc", "L1", "L2", "C", "V_load", "I_des", "omega", "timestep_s"):
            if getattr(self, name) <= 0:
                raise ModelError(f"inverter parameter {name} must be positive")


# Bridge voltage combinations available each epoch (per unit of V_dc); the
# all-legs-high configuration is not among them.
_BRIDGE_LEVELS = (
    (0, 0, 0),
    (1, 0, 0),
    (0, 1, 0),
    (0, 0, 1),
    (1, 1, 0),
    (1, 0, 1),
    (0, 1, 1),
)

_STATE_NAMES_INVERTER = (
    "i1", "i2", "i3", "v1", "v2", "v3", "i4", "i5", "i6", "sin_wt", "cos_wt",
)


def inverter_continuous(p: InverterParams):
    """Raw DAE matrices and their projected versions.

    Returns ``(A, B_in, B_load, F_dae, M, A_p, B_in_p, B_load_p)`` where M is
    the projector onto the range of F_dae; subtracting ``M @ (.)`` from each
    matrix eliminates the floating-node constraint ``F_dae^T x = 0``.
    """
    L1, L2, C = p.L1, p.L2, p.C
    A = np.zeros((9, 9))
    for i in range(3):
        A[i, 3 + i] = -1.0 / L1          # converter-side inductors see -v_cap
        A[3 + i, i] = 1.0 / C            # capacitor charged by converter current
        A[3 + i, 6 + i] = -1.0 / C       # and discharged by the load current
        A[6 + i, 3 + i] = -1.0 / L2      # load-side inductors
    B_in = np.zeros((9, 3))
    B_in[:3, :] = np.eye(3) / L1
    B_load = np.zeros((9, 3))
    B_load[6:, :] = -np.eye(3) / L2
    F = np.zeros((9, 2))
    F[:3, 0] = -1.0 / L1
    F[:3, 1] = -1.0 / L1
    F[6:, 1] = -1.0 / L2
    FtF = F.T @ F
    if np.linalg.matrix_rank(FtF) < 2:
        raise ModelError("floating-node incidence matrix is singular")
    M = F @ np.linalg.solve(FtF, F.T)
    return A, B_in, B_load, F, M, A - M @ A, B_in - M @ B_in, B_load - M @ B_load


def _load_phase_angles():
    return (0.0, 2.0 * math.pi / 3.0, 4.0 * math.pi / 3.0)


def _reference_phase_angles():
    return (0.0, -2.0 * math.pi / 3.0, -4.0 * math.pi / 3.0)


def _sin_cos_coeffs(angles):
    """Rows (cos phi, sin phi): coefficients of sin(wt+phi) on (sin wt, cos wt)."""
    return np.array([[math.cos(a), math.sin(a)] for a in angles])


def _desired_state_map(p: InverterParams, A_p, B_in_p, B_load_p):
    """Affine map x_des = C_des x (+0) from single-frequency phasor balance.

    Each sinusoid ``a sin(wt) + b cos(wt)`` is represented by the phasor
    ``a + jb`` (differentiation is multiplication by ``j*omega``).  The load
    currents are pinned to the reference amplitudes; the remaining state
    phasors and the bridge-voltage phasors are solved from the projected
    continuous dynamics.  The result is affine in the oscillator states, so
    ``C_des`` has nonzero columns only for (sin, cos) plus identity rows that
    make the oscillator components cost-free.
    """
    w = p.omega
    v_load_ph = p.V_load * np.exp(1j * np.array(_load_phase_angles()))
    i_ref_ph = p.I_des * np.exp(1j * np.array(_reference_phase_angles()))
    lhs = 1j * w * np.eye(9) - A_p
    # unknowns: state phasors 0..5, bridge phasors (3); load currents pinned
    Mmat = np.hstack([lhs[:, :6], -B_in_p]).astype(complex)
    rhs = B_load_p @ v_load_ph - lhs[:, 6:9] @ i_ref_ph
    sol, residual, _, _ = np.linalg.lstsq(Mmat, rhs, rcond=None)
    check = Mmat @ sol - rhs
    scale = max(1.0, float(np.abs(rhs).max()))
    if np.abs(check).max() > 1e-6 * scale:
        raise ModelError("no single-frequency steady state for the desired currents")
    state_ph = np.concatenate([sol[:6], i_ref_ph])
    C_des = np.zeros((11, 11))
    C_des[:9, 9] = state_ph.real   # sin coefficients
    C_des[:9, 10] = state_ph.imag  # cos coefficients
    C_des[9, 9] = 1.0              # oscillator states track themselves
    C_des[10, 10] = 1.0
    return C_des, np.zeros(11)


@dataclass(frozen=True, eq=False)
class InverterBuild:
    model: SwitchedModel
    stage: StageCost
    C_des: np.ndarray
    d_des: np.ndarray
    params: InverterParams
    # construction intermediates, kept for structural verification
    F_dae: np.ndarray = field(repr=False, default=None)
    projector: np.ndarray = field(repr=False, default=None)
    A_proj: np.ndarray = field(repr=False, default=None)
    B_in_proj: np.ndarray = field(repr=False, default=None)
    B_load_proj: np.ndarray = field(repr=False, default=None)
    A_aug: np.ndarray = field(repr=False, default=None)
    B_in_aug: np.ndarray = field(repr=False, default=None)
    input_vectors: np.ndarray = field(repr=False, default=None)
    state_names: tuple = _STATE_NAMES_INVERTER


def build_inverter(p: InverterParams = InverterParams()) -> InverterBuild:
    """Seven-input, eleven-state inverter model.

    Pipeline: assemble the circuit DAE, project out the floating-node
    constraint, append the (sin wt, cos wt) oscillator pair that generates the
    load voltages, discretize the augmented system exactly, and map the seven
    admissible bridge-voltage vectors through the discrete input matrix.
    Stage cost is the L1 deviation of the three load currents from the
    three-phase reference expressed through the oscillator states.
    """
    A, B_in, B_load, F, M, A_p, B_in_p, B_load_p = inverter_continuous(p)
    w = p.omega
    load_map = p.V_load * _sin_cos_coeffs(_load_phase_angles())  # (3, 2)
    A_aug = np.zeros((11, 11))
    A_aug[:9, :9] = A_p
    A_aug[:9, 9:] = B_load_p @ load_map
    A_aug[9:, 9:] = np.array([[0.0, -w], [w, 0.0]])
    B_in_aug = np.zeros((11, 3))
    B_in_aug[:9] = B_in_p

    big = np.zeros((14, 14))
    big[:11, :11] = A_aug
    big[:11, 11:] = B_in_aug
    E = matrix_exponential(p.timestep_s * big)
    A_d = E[:11, :11]
    B_d = E[:11, 11:]

    v_in = p.V_dc * np.array(_BRIDGE_LEVELS, dtype=float)
    modes = tuple(AffineMode(A_d, B_d @ v) for v in v_in)
    model = SwitchedModel(modes)

    C_des, d_des = _desired_state_map(p, A_p, B_in_p, B_load_p)
    ref_rows = p.I_des * _sin_cos_coeffs(_reference_phase_angles())
    C_des = C_des.copy()
    C_des[6:9, 9:11] = ref_rows  # load-current targets: exactly the reference
    weights = np.zeros(11)
    weights[6:9] = 1.0
    stage = StageCost.weighted_l1(weights, C_des=C_des, d_des=d_des)
    return InverterBuild(
        model=model,
        stage=stage,
        C_des=C_des,
        d_des=d_des,
        params=p,
        F_dae=F,
        projector=M,
        A_proj=A_p,
        B_in_proj=B_in_p,
        B_load_proj=B_load_p,
        A_aug=A_aug,
        B_in_aug=B_in_aug,
        input_vectors=v_in,
    )


def build_energy_prior(model_kind: str, params) -> EnergyPrior:
    """Stored-energy quadratic form for a converter kind.

    The oscillator states of the inverter carry no physical energy, so their
    rows and columns are zero.
    """
    if model_kind == "boost":
        E = np.diag([params.L / 2.0, params.C / 2.0])
    elif model_kind == "inverter":
        diag = [params.L1 / 2.0] * 3 + [params.C / 2.0] * 3 + [params.L2 / 2.0] * 3
        diag += [0.0, 0.0]
        E = np.diag(diag)
    else:
        raise ModelError(f"unknown converter kind {model_kind!r}")
    return EnergyPrior(E)


def boost_state_names():
    return ("i_L", "v_C")


def inverter_state_names():
    return _STATE_NAMES_INVERTER
