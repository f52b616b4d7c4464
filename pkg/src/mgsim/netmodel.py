"""Electrical models of bus-connected DC microgrids.

Covers the averaged small-signal state-space models of boost and buck
source converters, linearisation of constant-power loads (CPLs) about an
operating point, the bus-voltage algebra, and the Kron mapping from the
physical bus-connected star topology to the load-connected form in which
each DGU sees its neighbours through equivalent line resistances and the
bus loads as local current draws.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

# Relative tolerance for the duty-cycle / voltage consistency checks.
_DUTY_RTOL = 1e-9


class ConverterKind(str, Enum):
    """Switching topology of a DGU's source-side converter."""

    BOOST = "boost"
    BUCK = "buck"


class Topology(str, Enum):
    """Network arrangement of DGUs and loads."""

    BUS_CONNECTED = "bus_connected"
    LOAD_CONNECTED = "load_connected"


@dataclass(frozen=True)
class ConverterSpec:
    """Circuit parameters of one DGU converter and its bus tie line.

    Attributes:
        kind: converter topology (boost or buck).
        V_in: source-side input voltage [V].
        R_t: filter parasitic resistance [ohm].
        L_t: filter inductance [H].
        C_t: output capacitance [F].
        R_line: line resistance from the converter output to the bus [ohm].
    """

    kind: ConverterKind
    V_in: float
    R_t: float
    L_t: float
    C_t: float
    R_line: float

    def __post_init__(self) -> None:
        if self.L_t <= 0.0 or self.C_t <= 0.0:
            raise ValueError("L_t and C_t must be positive")
        if self.R_t < 0.0:
            raise ValueError("R_t must be non-negative")
        if self.R_line <= 0.0:
            raise ValueError("R_line must be positive")
        if self.V_in <= 0.0:
            raise ValueError("V_in must be positive")


@dataclass(frozen=True)
class OperatingPoint:
    """Steady-state operating point of one converter.

    Attributes:
        D: duty cycle, dimensionless, in [0, 1).
        V_dc: output voltage setpoint [V].
        I_dc: inductor current [A].
        P_cpl: effective local constant-power load [W], zero allowed.
    """

    D: float
    V_dc: float
    I_dc: float
    P_cpl: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.D < 1.0:
            raise ValueError("duty cycle must lie in [0, 1)")
        if self.V_dc <= 0.0:
            raise ValueError("V_dc must be positive")
        if self.P_cpl < 0.0:
            raise ValueError("P_cpl must be non-negative")


def operating_point_for(spec: ConverterSpec, V_dc: float, I_dc: float,
                        P_cpl: float = 0.0) -> OperatingPoint:
    """Build the operating point whose duty cycle matches a voltage target.

    Boost converters satisfy V_dc * (1 - D) = V_in, bucks V_dc = D * V_in.
    """
    if spec.kind is ConverterKind.BOOST:
        if V_dc < spec.V_in:
            raise ValueError("boost output must not be below V_in")
        D = 1.0 - spec.V_in / V_dc
    else:
        if V_dc >= spec.V_in:
            raise ValueError("buck output must be below V_in")
        D = V_dc / spec.V_in
    return OperatingPoint(D=D, V_dc=V_dc, I_dc=I_dc, P_cpl=P_cpl)


def check_duty_consistency(spec: ConverterSpec, op: OperatingPoint) -> None:
    """Reject operating points whose duty cycle contradicts the voltages."""
    if spec.kind is ConverterKind.BOOST:
        err = abs(op.V_dc * (1.0 - op.D) - spec.V_in)
    else:
        err = abs(op.V_dc - op.D * spec.V_in)
    if err > _DUTY_RTOL * spec.V_in:
        raise ValueError(
            f"duty cycle {op.D} inconsistent with V_in={spec.V_in} V and "
            f"V_dc={op.V_dc} V for a {spec.kind.value} converter")


@dataclass(frozen=True)
class DguModel:
    """Small-signal model of one DGU in load-connected coordinates.

    State is (inductor current, output voltage). The output row C_i is
    always [0, 1]: the regulated quantity is the output voltage.
    """

    A_ii: np.ndarray                      # 2x2 local state matrix [1/s]
    A_ij_coupling: dict[int, np.ndarray]  # neighbor id -> 2x2 coupling
    B_i: np.ndarray                       # input map, 2-vector
    E_i: np.ndarray                       # exogenous load-current map, 2-vector
    C_i: np.ndarray                       # output row, 1x2
    neighbor_line_R: dict[int, float]     # neighbor id -> R_ij [ohm]


@dataclass(frozen=True)
class UncertaintyBox:
    """Axis-aligned box bound on the matched uncertainty vector theta."""

    lo: np.ndarray  # 3-vector of lower bounds
    hi: np.ndarray  # 3-vector of upper bounds

    def __post_init__(self) -> None:
        lo = np.asarray(self.lo, dtype=float)
        hi = np.asarray(self.hi, dtype=float)
        if lo.shape != (3,) or hi.shape != (3,):
            raise ValueError("uncertainty bounds must be 3-vectors")
        if np.any(hi < lo):
            raise ValueError("upper bounds must not be below lower bounds")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    def contains(self, theta: np.ndarray, slack: float = 0.0) -> bool:
        theta = np.asarray(theta, dtype=float)
        return bool(np.all(theta >= self.lo - slack)
                    and np.all(theta <= self.hi + slack))

    def vertices(self) -> np.ndarray:
        """All 8 corner vectors, one per row."""
        corners = np.array(np.meshgrid(*zip(self.lo, self.hi)))
        return corners.reshape(3, -1).T

    def max_l1(self) -> float:
        """Largest 1-norm over the box (attained at a corner)."""
        return float(np.sum(np.maximum(np.abs(self.lo), np.abs(self.hi))))


@dataclass(frozen=True)
class AugmentedPlant:
    """Integrator-augmented 3-state model used for controller design.

    The third state integrates the tracking error, xi_dot = y_ref - y.
    """

    A_bar: np.ndarray        # 3x3
    B_bar: np.ndarray        # 3-vector
    F: np.ndarray            # 3-vector, [0, 0, 1]
    C_bar: np.ndarray        # 1x3
    theta_set: UncertaintyBox


@dataclass(frozen=True)
class LoadConverterSpec:
    """Tightly regulated load-side buck converter realising a CPL.

    Attributes:
        R_t: filter parasitic resistance [ohm].
        L_t: filter inductance [H].
        C_t: output capacitance [F].
        D: duty cycle at the operating point.
        R_load: equivalent output load resistance [ohm].
        k_p: proportional gain of the load voltage loop.
        k_i: integral gain of the load voltage loop [1/s].
    """

    R_t: float
    L_t: float
    C_t: float
    D: float
    R_load: float
    k_p: float
    k_i: float


def tightly_regulated_load(P_W: float, v_bus: float = 380.0, D: float = 0.5,
                           f_equiv_hz: float = 4800.0) -> LoadConverterSpec:
    """Load converter preset whose voltage loop tracks fast enough to act
    as a constant-power load well past the source dynamics.

    The integral bandwidth is set to one tenth of the switching-equivalent
    frequency; the output stage is fixed at 20 mH / 5 uF.

    Args:
        P_W: drawn power [W].
        v_bus: bus voltage feeding the converter [V].
        D: duty cycle.
        f_equiv_hz: switching-equivalent frequency [Hz].
    """
    if P_W <= 0.0:
        raise ValueError("load power must be positive")
    omega_reg = 2.0 * math.pi * f_equiv_hz / 10.0
    R_load = (D * v_bus) ** 2 / P_W
    return LoadConverterSpec(R_t=0.01, L_t=0.02, C_t=5e-6, D=D,
                             R_load=R_load, k_p=1.0, k_i=omega_reg)


@dataclass(frozen=True)
class CplLoad:
    """One bus-connected load drawing constant power.

    Attributes:
        power_W: drawn power [W].
        R_line: line resistance from the bus to the load [ohm].
        converter: optional model of the regulating load converter.
    """

    power_W: float
    R_line: float
    converter: LoadConverterSpec | None = None

    def __post_init__(self) -> None:
        if self.power_W < 0.0:
            raise ValueError("load power must be non-negative")
        if self.R_line <= 0.0:
            raise ValueError("load line resistance must be positive")


@dataclass(frozen=True)
class BusNetwork:
    """A star network of DGUs and loads tied to one common bus."""

    dgus: tuple[tuple[ConverterSpec, OperatingPoint], ...]
    loads: tuple[CplLoad, ...] = ()
    topology: Topology = Topology.BUS_CONNECTED

    def __post_init__(self) -> None:
        if len(self.dgus) == 0:
            raise ValueError("network needs at least one DGU")


def cpl_incremental_resistance(P_L: float, I_bus: float) -> float:
    """Incremental resistance -P/I^2 a CPL presents at its terminals.

    Args:
        P_L: load power [W].
        I_bus: bus current drawn by the load [A], nonzero.

    Returns:
        The (non-positive) small-signal resistance [ohm].
    """
    if I_bus == 0.0:
        raise ValueError("incremental resistance undefined at zero current")
    return -P_L / I_bus ** 2


def build_dgu_model(spec: ConverterSpec, op: OperatingPoint,
                    neighbor_lines: dict[int, float]) -> DguModel:
    """Assemble the 2-state averaged model of one DGU.

    Args:
        spec: converter circuit parameters.
        op: operating point; its duty cycle must be consistent with the
            converter voltages.
        neighbor_lines: map of neighbor id to equivalent line resistance
            R_ij [ohm] in the load-connected topology.

    Returns:
        The DguModel with the CPL conductance -P_cpl/V_dc^2 folded into
        the voltage-row damping term.
    """
    check_duty_consistency(spec, op)
    g_lines = sum(1.0 / R for R in neighbor_lines.values())
    a22 = -(g_lines - op.P_cpl / op.V_dc ** 2) / spec.C_t
    if spec.kind is ConverterKind.BOOST:
        k = 1.0 - op.D
        A_ii = np.array([[-spec.R_t / spec.L_t, -k / spec.L_t],
                         [k / spec.C_t, a22]])
        B_i = np.array([op.V_dc / spec.L_t, -op.I_dc / spec.C_t])
    else:
        A_ii = np.array([[-spec.R_t / spec.L_t, -1.0 / spec.L_t],
                         [1.0 / spec.C_t, a22]])
        B_i = np.array([1.0 / spec.L_t, 0.0])
    E_i = np.array([0.0, -1.0 / spec.C_t])
    C_i = np.array([[0.0, 1.0]])
    coupling = {}
    for j, R_ij in neighbor_lines.items():
        A_ij = np.zeros((2, 2))
        A_ij[1, 1] = 1.0 / (R_ij * spec.C_t)
        coupling[j] = A_ij
    return DguModel(A_ii=A_ii, A_ij_coupling=coupling, B_i=B_i, E_i=E_i,
                    C_i=C_i, neighbor_line_R=dict(neighbor_lines))


def augment_with_integrator(model: DguModel,
                            uncertainty: UncertaintyBox) -> AugmentedPlant:
    """Append the tracking-error integrator state to a DGU model."""
    A_bar = np.zeros((3, 3))
    A_bar[:2, :2] = model.A_ii
    A_bar[2, :2] = -model.C_i[0]
    B_bar = np.array([model.B_i[0], model.B_i[1], 0.0])
    F = np.array([0.0, 0.0, 1.0])
    C_bar = np.array([[model.C_i[0, 0], model.C_i[0, 1], 0.0]])
    return AugmentedPlant(A_bar=A_bar, B_bar=B_bar, F=F, C_bar=C_bar,
                          theta_set=uncertainty)


def solve_bus_voltage(v_dc: np.ndarray, R_i: np.ndarray,
                      P_total: float) -> float:
    """Voltage of the common bus fed by n DGUs and loaded with P_total.

    Bus KCL sum((v_dc - v)/R_i) = P_total/v gives the quadratic
    G*v^2 - S*v + P_total = 0 with S = sum(v_dc/R_i) and G = sum(1/R_i);
    returns the root closest to the mean of v_dc (the stable branch).
    A negative discriminant means the draw exceeds what the lines can
    transfer at these source voltages.

    Args:
        v_dc: DGU output voltages [V].
        R_i: DGU line resistances [ohm].
        P_total: total constant-power draw at the bus [W].

    Returns:
        Bus voltage [V].
    """
    v_dc = np.asarray(v_dc, dtype=float)
    R_i = np.asarray(R_i, dtype=float)
    G = float(np.sum(1.0 / R_i))
    if G <= 0.0:
        raise ValueError("total line conductance must be positive")
    S = float(np.sum(v_dc / R_i))
    disc = S * S - 4.0 * P_total * G
    if disc < 0.0:
        raise ValueError(
            f"bus voltage infeasible, quadratic discriminant {disc:.6g} < 0")
    root = np.sqrt(disc)
    candidates = np.array([(S + root) / (2.0 * G), (S - root) / (2.0 * G)])
    target = float(np.mean(v_dc))
    return float(candidates[np.argmin(np.abs(candidates - target))])


def kron_reduce(net: BusNetwork) -> tuple[dict[tuple[int, int], float],
                                          np.ndarray]:
    """Map a bus-connected star to its load-connected equivalent.

    Eliminating the bus node turns the star of DGU tie lines into a mesh,
    R_ij = R_i * R_j * sum_q (1/R_q) over the DGU lines, and splits the
    total bus load current across DGUs in proportion to line conductance,
    i_cpl_i = I_load / (R_i * sum_q (1/R_q)). Steady-state DGU output
    currents of the reduced model match a nodal solve of the original
    circuit exactly.

    Args:
        net: bus-connected network.

    Returns:
        (couplings, i_cpl): map (i, j) -> R_ij for i != j, and the local
        load current [A] seen by each DGU.
    """
    if net.topology is not Topology.BUS_CONNECTED:
        raise ValueError("Kron mapping starts from the bus-connected form")
    R = np.array([spec.R_line for spec, _ in net.dgus])
    v = np.array([op.V_dc for _, op in net.dgus])
    G = float(np.sum(1.0 / R))
    n = len(R)
    couplings: dict[tuple[int, int], float] = {}
    for i in range(n):
        for j in range(n):
            if i != j:
                couplings[(i, j)] = R[i] * R[j] * G
    P_total = float(sum(load.power_W for load in net.loads))
    if P_total > 0.0:
        v_bus = solve_bus_voltage(v, R, P_total)
        I_load = P_total / v_bus
    else:
        I_load = 0.0
    i_cpl = I_load / (R * G)
    return couplings, i_cpl


def effective_cpl_power(net: BusNetwork, dgu_index: int) -> float:
    """Constant-power rating DGU dgu_index sees after the Kron mapping.

    Closed form in terms of the total CPL incremental conductance at the
    bus operating point, the line conductances, and the voltage profile:

        P_i = (g_cpl + G) * P_total / ((1/R_i) * (sum_j V_j / V_i) * R_i * G)

    with g_cpl = -P_total/v_bus^2 and G = sum_q 1/R_q over DGU lines.

    Args:
        net: bus-connected network.
        dgu_index: which DGU's effective load to evaluate.

    Returns:
        Effective local CPL power [W]; zero when the network has no loads.
    """
    P_total = float(sum(load.power_W for load in net.loads))
    if P_total == 0.0:
        return 0.0
    R = np.array([spec.R_line for spec, _ in net.dgus])
    v = np.array([op.V_dc for _, op in net.dgus])
    G = float(np.sum(1.0 / R))
    v_bus = solve_bus_voltage(v, R, P_total)
    if v_bus == 0.0:
        raise ValueError("bus voltage collapsed to zero")
    g_cpl = -P_total / v_bus ** 2
    v_i = v[dgu_index]
    R_i = R[dgu_index]
    voltage_factor = float(np.sum(v)) / v_i
    denom = (1.0 / R_i) * voltage_factor * (R_i * G)
    if denom == 0.0:
        raise ValueError("degenerate network, zero denominator")
    return (g_cpl + G) * P_total / denom
