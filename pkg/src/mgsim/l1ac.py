"""Decentralised L1 adaptive primary voltage controller for one DGU.

The controller fuses a state-feedback term with a low-pass-filtered
adaptive compensation signal. A state predictor running the desired
closed-loop dynamics produces the prediction error that drives a
projection-bounded adaptive law; a second-order Butterworth filter
decouples the adaptation rate from the control bandwidth.

Sign conventions: the prediction error is x_tilde = x_hat - x_bar
(predictor minus plant) and the predictor's adaptive regressor is the
measured plant state. With the adaptive law below this makes the
Lyapunov function V = x_tilde' P x_tilde + theta_tilde' theta_tilde / Gamma
decrease exactly along trajectories.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg

from .netmodel import (
    AugmentedPlant,
    ConverterKind,
    ConverterSpec,
    OperatingPoint,
    UncertaintyBox,
    build_dgu_model,
)

# Width of the smooth projection transition band.
PROJECTION_EPS = 0.1

_F = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class FilterSpec:
    """Second-order Butterworth low-pass filter C(s) for the adaptive channel.

    C(s) = omega_c^2 / (s^2 + sqrt(2) omega_c s + omega_c^2). Unity DC
    gain holds by construction and the relative degree is two, at least
    the relative degree of the plant seen from the control input.
    """

    omega_c: float      # cutoff [rad/s]
    num: np.ndarray     # numerator coefficients, descending powers
    den: np.ndarray     # denominator coefficients, descending powers

    def __post_init__(self) -> None:
        if self.omega_c <= 0.0:
            raise ValueError("filter cutoff must be positive")
        object.__setattr__(self, "num", np.asarray(self.num, dtype=float))
        object.__setattr__(self, "den", np.asarray(self.den, dtype=float))

    def dc_gain(self) -> float:
        return self.num[-1] / self.den[-1]

    def ss(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, float]:
        """Controllable-canonical (A, B, C, D) realisation, 2 states."""
        wc = self.omega_c
        A = np.array([[0.0, 1.0],
                      [-wc * wc, -math.sqrt(2.0) * wc]])
        B = np.array([0.0, 1.0])
        C = np.array([wc * wc, 0.0])
        return A, B, C, 0.0


def butterworth_filter(omega_c: float) -> FilterSpec:
    """Build the standard second-order Butterworth filter at omega_c."""
    wc2 = omega_c * omega_c
    return FilterSpec(omega_c=omega_c,
                      num=np.array([wc2]),
                      den=np.array([1.0, math.sqrt(2.0) * omega_c, wc2]))


def filter_derivative(filt: FilterSpec, w: np.ndarray,
                      v: float) -> np.ndarray:
    """State rate of the filter with internal state w and input v."""
    wc = filt.omega_c
    return np.array([w[1], -wc * wc * w[0] - math.sqrt(2.0) * wc * w[1] + v])


def filter_output(filt: FilterSpec, w: np.ndarray) -> float:
    """Instantaneous filter output C_f w (strictly proper, D = 0)."""
    return filt.omega_c * filt.omega_c * w[0]


def _require_hurwitz(A: np.ndarray, context: str) -> np.ndarray:
    eigs = np.linalg.eigvals(A)
    worst = eigs[np.argmax(eigs.real)]
    if worst.real >= 0.0:
        raise ValueError(
            f"{context} is not Hurwitz, eigenvalue {worst:.6g} has "
            f"non-negative real part")
    return eigs


@dataclass(frozen=True)
class ControllerGains:
    """State-feedback gains K = [K_i, K_v, K_xi] and the closed loop they set.

    A_m_hat = A_bar_nominal - B_bar K must be Hurwitz; construction
    rejects gains that fail this.
    """

    K: np.ndarray
    A_m_hat: np.ndarray

    def __post_init__(self) -> None:
        K = np.asarray(self.K, dtype=float)
        A = np.asarray(self.A_m_hat, dtype=float)
        if K.shape != (3,) or A.shape != (3, 3):
            raise ValueError("gains are a 3-vector with a 3x3 closed loop")
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "A_m_hat", A)
        _require_hurwitz(A, "desired dynamics matrix")

    @classmethod
    def design(cls, plant: AugmentedPlant, K: np.ndarray) -> "ControllerGains":
        K = np.asarray(K, dtype=float)
        A_m_hat = plant.A_bar - np.outer(plant.B_bar, K)
        return cls(K=K, A_m_hat=A_m_hat)


def design_lqr_gains(plant: AugmentedPlant,
                     state_weights: tuple[float, float, float] = (
                         1.0, 1.0, 2.5e5),
                     control_weight: float = 1.0) -> ControllerGains:
    """LQR synthesis of stabilising feedback gains for one DGU.

    The integral state carries the largest default weight so the voltage
    loop recovers references within a few hundred milliseconds.
    """
    Q = np.diag(state_weights).astype(float)
    R = np.array([[float(control_weight)]])
    B = plant.B_bar.reshape(3, 1)
    P = scipy.linalg.solve_continuous_are(plant.A_bar, B, Q, R)
    K = (B.T @ P / R[0, 0])[0]
    return ControllerGains.design(plant, K)


def lyapunov_solve(A_m_hat: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """Solve A_m_hat' P + P A_m_hat = -Q for symmetric positive definite P.

    Args:
        A_m_hat: Hurwitz 3x3 matrix.
        Q: symmetric positive definite weight.

    Returns:
        P, symmetric positive definite, residual below 1e-9.
    """
    A = np.asarray(A_m_hat, dtype=float)
    Q = np.asarray(Q, dtype=float)
    if not np.allclose(Q, Q.T, atol=1e-12):
        raise ValueError("Q must be symmetric")
    if np.min(np.linalg.eigvalsh(Q)) <= 0.0:
        raise ValueError("Q must be positive definite")
    _require_hurwitz(A, "Lyapunov equation matrix")
    P = scipy.linalg.solve_continuous_lyapunov(A.T, -Q)
    P = 0.5 * (P + P.T)
    # iterative refinement reaches the 1e-9 residual gate even for the
    # badly scaled closed loops that converter dynamics produce
    tol = 1e-9 * max(1.0, np.linalg.norm(Q))
    for _ in range(5):
        R = A.T @ P + P @ A + Q
        if np.linalg.norm(R) <= 0.1 * tol:
            break
        dP = scipy.linalg.solve_continuous_lyapunov(A.T, -R)
        P = P + 0.5 * (dP + dP.T)
    residual = np.linalg.norm(A.T @ P + P @ A + Q)
    if residual > tol:
        raise RuntimeError(f"Lyapunov residual {residual:.3g} too large")
    return P


@dataclass(frozen=True)
class DesiredDynamics:
    """Desired closed-loop dynamics with a verified Lyapunov certificate."""

    A_m_hat: np.ndarray  # 3x3 Hurwitz
    B_m_hat: np.ndarray  # 3-vector input map
    P: np.ndarray        # Lyapunov solution, symmetric positive definite
    Q: np.ndarray        # decay weight, symmetric positive definite

    def __post_init__(self) -> None:
        for name in ("A_m_hat", "B_m_hat", "P", "Q"):
            object.__setattr__(self, name,
                               np.asarray(getattr(self, name), dtype=float))
        if np.min(np.linalg.eigvalsh(self.Q)) <= 0.0:
            raise ValueError("Q must be positive definite")
        if np.min(np.linalg.eigvalsh(self.P)) <= 0.0:
            raise ValueError("P must be positive definite")
        M = self.A_m_hat.T @ self.P + self.P @ self.A_m_hat + self.Q
        if np.max(np.linalg.eigvalsh(M)) > 1e-9:
            raise ValueError("P does not certify the Lyapunov inequality")


def make_desired_dynamics(plant: AugmentedPlant, gains: ControllerGains,
                          Q: np.ndarray | None = None) -> DesiredDynamics:
    """Bundle the closed loop with its Lyapunov pair (P, Q)."""
    if Q is None:
        Q = np.eye(3)
    P = lyapunov_solve(gains.A_m_hat, Q)
    return DesiredDynamics(A_m_hat=gains.A_m_hat, B_m_hat=plant.B_bar,
                           P=P, Q=Q)


@dataclass
class AdaptiveState:
    """Evolving controller state of one DGU."""

    x_hat: np.ndarray        # predictor state, 3-vector
    theta_hat: np.ndarray    # uncertainty estimate, 3-vector
    Gamma: float             # adaptive gain, positive
    filter_state: np.ndarray  # filter internal state, 2-vector

    def __post_init__(self) -> None:
        if self.Gamma <= 0.0:
            raise ValueError("adaptive gain must be positive")


@dataclass(frozen=True)
class GainReport:
    """Outcome of checking feedback gains against the stability conditions.

    ``ok`` is the authoritative verdict: the full Routh-Hurwitz test on
    A_m_hat (equivalent to every eigenvalue in the open left half plane).
    ``margins`` carries the slack of each published per-topology gain
    inequality (positive means satisfied); these are informational, as is
    the trace/det sign pair.
    """

    ok: bool
    margins: dict[str, float]
    trace: float
    det: float
    eigenvalues: np.ndarray
    routh: dict[str, float]


def validate_gains(K: np.ndarray, spec: ConverterSpec, op: OperatingPoint,
                   neighbor_lines: dict[int, float]) -> GainReport:
    """Evaluate gain inequalities and the eigenvalue test for one DGU.

    Args:
        K: feedback gains [K_i, K_v, K_xi].
        spec: converter parameters.
        op: operating point (P_cpl shifts the feasible region).
        neighbor_lines: equivalent line resistances to neighbours.

    Returns:
        GainReport; no exception is raised for failing gains.
    """
    K = np.asarray(K, dtype=float)
    model = build_dgu_model(spec, op, neighbor_lines)
    g = sum(1.0 / R for R in neighbor_lines.values()) \
        - op.P_cpl / op.V_dc ** 2
    if spec.kind is ConverterKind.BOOST:
        V, I = op.V_dc, op.I_dc
        rhs_i = -(I * spec.R_t + V * (1.0 - op.D)) / (2.0 * I * V)
        rhs_v = (g - (spec.C_t / spec.L_t) * (spec.R_t + K[0] * V)) / I
    else:
        rhs_i = g / spec.C_t - spec.R_t / spec.L_t
        rhs_v = -(spec.R_t + K[0]) * g - 1.0
    margins = {
        "K_i_upper": rhs_i - K[0],
        "K_v_upper": rhs_v - K[1],
        "K_xi_positive": K[2],
    }
    A_bar = np.zeros((3, 3))
    A_bar[:2, :2] = model.A_ii
    A_bar[2, :2] = -model.C_i[0]
    B_bar = np.array([model.B_i[0], model.B_i[1], 0.0])
    A_m = A_bar - np.outer(B_bar, K)
    eigs = np.linalg.eigvals(A_m)
    coeffs = np.poly(A_m)  # [1, c2, c1, c0]
    c2, c1, c0 = coeffs[1], coeffs[2], coeffs[3]
    routh = {"c2": c2, "c1": c1, "c0": c0, "c2c1_minus_c0": c2 * c1 - c0}
    ok = bool(c2 > 0.0 and c1 > 0.0 and c0 > 0.0 and c2 * c1 - c0 > 0.0)
    return GainReport(ok=ok, margins=margins, trace=float(np.trace(A_m)),
                      det=float(np.linalg.det(A_m)), eigenvalues=eigs,
                      routh=routh)


def control_law(gains: ControllerGains, filt: FilterSpec, x_bar: np.ndarray,
                theta_hat: np.ndarray, filter_state: np.ndarray) -> float:
    """Control input u = -(K x_bar + C(p)[theta_hat' x_bar]).

    The filter is strictly proper, so the adaptive component is read off
    the filter state; theta_hat' x_bar is the signal feeding the filter
    (see filter_derivative).
    """
    del theta_hat  # enters through the filter state dynamics only
    return -(float(gains.K @ x_bar) + filter_output(filt, filter_state))


def predictor_step(dd: DesiredDynamics, state: AdaptiveState, u_L1: float,
                   y_ref: float, x_bar: np.ndarray,
                   dt: float) -> AdaptiveState:
    """Advance the state predictor one RK4 step.

    Integrates x_hat_dot = A_m_hat x_hat + B_m_hat (u_L1 + theta_hat' x_bar)
    + F y_ref, where u_L1 is the filtered adaptive channel and the state
    feedback is already inside A_m_hat.
    """
    from .sim import rk4_step

    forcing = dd.B_m_hat * (u_L1 + float(state.theta_hat @ x_bar)) \
        + _F * y_ref

    def f(_t: float, x_hat: np.ndarray) -> np.ndarray:
        return dd.A_m_hat @ x_hat + forcing

    return replace(state, x_hat=rk4_step(f, state.x_hat, 0.0, dt))


def smooth_projection(theta: np.ndarray, y: np.ndarray, theta_b: float,
                      eps: float = PROJECTION_EPS) -> np.ndarray:
    """Smoothly remove the outward component of y at the bound's edge.

    Uses the convex indicator f(theta) = (|theta|^2 - theta_b^2) /
    (eps theta_b^2): below f = 0 the drive passes through, across the
    band 0 < f < 1 the outward component fades, at f = 1 it is gone.
    """
    f = (float(theta @ theta) - theta_b * theta_b) / (eps * theta_b * theta_b)
    if f <= 0.0:
        return y
    grad = 2.0 * theta / (eps * theta_b * theta_b)
    gy = float(grad @ y)
    if gy <= 0.0:
        return y
    return y - grad * (gy * f / float(grad @ grad))


def adaptive_update(state: AdaptiveState, x_tilde: np.ndarray,
                    x_bar: np.ndarray, dd: DesiredDynamics,
                    box: UncertaintyBox, dt: float) -> np.ndarray:
    """One Euler step of the projected adaptive law.

    theta_hat_dot = Gamma Proj(theta_hat, -x_bar (x_tilde' P B_m_hat)),
    with x_tilde = x_hat - x_bar. The projection ball radius is the
    largest 1-norm over the uncertainty box, so the estimate stays inside
    the box inflated by the transition band.
    """
    theta_b = box.max_l1()
    if theta_b == 0.0:
        return state.theta_hat.copy()
    drive = -x_bar * float(x_tilde @ dd.P @ dd.B_m_hat)
    theta_dot = state.Gamma * smooth_projection(state.theta_hat, drive,
                                                theta_b)
    theta = state.theta_hat + dt * theta_dot
    # a finite step can overshoot the transition band; clip back to the
    # ball edge (non-expansive, so the Lyapunov decrease is preserved)
    r2 = theta_b * theta_b * (1.0 + PROJECTION_EPS)
    n2 = float(theta @ theta)
    if n2 > r2:
        theta *= math.sqrt(r2 / n2)
    return theta


def reference_model_ss(dd: DesiredDynamics, theta_star: np.ndarray,
                       filt: FilterSpec) -> tuple[np.ndarray, np.ndarray]:
    """State-space composition of the LTI reference model.

    Realises x_ref_dot = A_m_hat x_ref + B (1 - C(p)) theta_star' x_ref
    + F y_ref by stacking the plant with the filter fed by
    theta_star' x_ref; returns (A, B) with state [x_ref, filter_state].
    """
    theta_star = np.asarray(theta_star, dtype=float)
    A_f, B_f, C_f, _ = filt.ss()
    A = np.zeros((5, 5))
    A[:3, :3] = dd.A_m_hat + np.outer(dd.B_m_hat, theta_star)
    A[:3, 3:] = -np.outer(dd.B_m_hat, C_f)
    A[3:, :3] = np.outer(B_f, theta_star)
    A[3:, 3:] = A_f
    B = np.zeros(5)
    B[2] = 1.0
    return A, B


def reference_model_step(dd: DesiredDynamics, theta_star: np.ndarray,
                         filt: FilterSpec, ref_state: np.ndarray,
                         y_ref: float, dt: float) -> np.ndarray:
    """Advance the 5-state reference model (plant + filter) one RK4 step."""
    from .sim import rk4_step

    A, B = reference_model_ss(dd, theta_star, filt)
    forcing = B * y_ref

    def f(_t: float, z: np.ndarray) -> np.ndarray:
        return A @ z + forcing

    return rk4_step(f, np.asarray(ref_state, dtype=float), 0.0, dt)
