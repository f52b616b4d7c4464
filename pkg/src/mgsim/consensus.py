"""Distributed secondary control over a communication graph.

Dynamic consensus estimators track the network averages of the DGU output
voltages and currents using only neighbor exchanges; per-node PI terms turn
the estimation errors into corrections of the primary voltage reference.
The unit-gain closed loop replaces the primary layer with an identity so
the secondary gains can be tuned and checked on their own.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np



@dataclass(frozen=True)
class CommGraph:
    """Undirected communication graph on node indices 0..n-1."""

    n: int
    edges: frozenset[tuple[int, int]]

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("graph needs at least one node")
        canon = set()
        for e in self.edges:
            i, j = e
            if i == j:
                raise ValueError(f"self-loop on node {i}")
            if not (0 <= i < self.n and 0 <= j < self.n):
                raise ValueError(f"edge {e} outside 0..{self.n - 1}")
            canon.add((min(i, j), max(i, j)))
        object.__setattr__(self, "edges", frozenset(canon))

    @classmethod
    def from_edges(cls, n: int, edges) -> "CommGraph":
        return cls(n=n, edges=frozenset(tuple(e) for e in edges))

    def adjacency(self) -> np.ndarray:
        A = np.zeros((self.n, self.n))
        for i, j in self.edges:
            A[i, j] = 1.0
            A[j, i] = 1.0
        return A

    def with_edges(self, add=(), remove=()) -> "CommGraph":
        """New graph with the given edges added and removed, in that order."""
        def canon(e):
            return (min(e), max(e))
        edges = {canon(e) for e in self.edges}
        edges |= {canon(e) for e in add}
        edges -= {canon(e) for e in remove}
        return CommGraph(n=self.n, edges=frozenset(edges))

    def is_connected(self) -> bool:
        seen = {0}
        frontier = [0]
        adj = {i: [] for i in range(self.n)}
        for i, j in self.edges:
            adj[i].append(j)
            adj[j].append(i)
        while frontier:
            k = frontier.pop()
            for q in adj[k]:
                if q not in seen:
                    seen.add(q)
                    frontier.append(q)
        return len(seen) == self.n


def laplacian(graph: CommGraph) -> np.ndarray:
    """Graph Laplacian: degree on the diagonal, -1 for adjacent pairs."""
    A = graph.adjacency()
    return np.diag(A.sum(axis=1)) - A


def algebraic_connectivity(graph: CommGraph) -> float:
    """Second-smallest Laplacian eigenvalue; positive iff connected."""
    ev = np.linalg.eigvalsh(laplacian(graph))
    return float(ev[1]) if graph.n > 1 else float("inf")


@dataclass(frozen=True)
class SecondaryState:
    """Per-node estimator and PI integrator states."""

    v_hat_bus: np.ndarray            # published average-voltage estimate
    v_consensus_integral: np.ndarray
    i_consensus_integral: np.ndarray
    pi_v_integral: np.ndarray
    pi_i_integral: np.ndarray
    i_ref_out: np.ndarray            # published average-current estimate

    def __post_init__(self):
        n = len(self.v_hat_bus)
        for name in ("v_consensus_integral", "i_consensus_integral",
                     "pi_v_integral", "pi_i_integral", "i_ref_out"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (n,):
                raise ValueError(f"{name} must have shape ({n},)")
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "v_hat_bus",
                           np.asarray(self.v_hat_bus, dtype=float))
        if not all(np.all(np.isfinite(getattr(self, f))) for f in
                   ("v_hat_bus", "v_consensus_integral",
                    "i_consensus_integral", "pi_v_integral",
                    "pi_i_integral", "i_ref_out")):
            raise ValueError("secondary state must be finite")


def initial_secondary_state(n: int) -> SecondaryState:
    """All-zero integrals; estimates fill in on the first step."""
    z = np.zeros(n)
    return SecondaryState(v_hat_bus=z.copy(), v_consensus_integral=z.copy(),
                          i_consensus_integral=z.copy(),
                          pi_v_integral=z.copy(), pi_i_integral=z.copy(),
                          i_ref_out=z.copy())


@dataclass(frozen=True)
class SecondaryGains:
    """PI and sharing parameters of the secondary layer, per node."""

    k_P_v: np.ndarray
    k_I_v: np.ndarray
    k_P_i: np.ndarray
    k_I_i: np.ndarray
    m: np.ndarray                # load-sharing coefficients, m_i > 0
    consensus_rate: float = 1.0  # estimator integral gain [1/s]

    def __post_init__(self):
        for name in ("k_P_v", "k_I_v", "k_P_i", "k_I_i", "m"):
            arr = np.atleast_1d(np.asarray(getattr(self, name), dtype=float))
            if np.any(arr <= 0.0):
                raise ValueError(f"{name} entries must be positive")
            object.__setattr__(self, name, arr)
        if self.consensus_rate <= 0.0:
            raise ValueError("consensus_rate must be positive")

    @classmethod
    def equal_sharing(cls, n: int, k_P_v: float, k_I_v: float,
                      k_P_i: float, k_I_i: float,
                      consensus_rate: float = 1.0) -> "SecondaryGains":
        ones = np.ones(n)
        return cls(k_P_v=k_P_v * ones, k_I_v=k_I_v * ones,
                   k_P_i=k_P_i * ones, k_I_i=k_I_i * ones, m=ones,
                   consensus_rate=consensus_rate)


def consensus_voltage_step(state: SecondaryState, v_dc: np.ndarray,
                           graph: CommGraph, dt: float,
                           rate: float = 1.0) -> SecondaryState:
    """Advance the average-voltage estimator, v_hat = v_dc - integral.

    The integral of the neighbor disagreement is the actual state; the
    published estimate follows the measurement directly, so a step in
    v_dc appears in v_hat immediately. Row sums of the Laplacian vanish,
    hence sum(v_hat - v_dc) stays at zero (up to rounding) under any
    quadrature and the estimator average tracks the input average.
    """
    if dt <= 0.0:
        raise ValueError("step size must be positive")
    from .sim import rk4_step

    L = laplacian(graph)
    v_dc = np.asarray(v_dc, dtype=float)
    s = rk4_step(lambda _t, z: rate * (L @ (v_dc - z)),
                 state.v_consensus_integral, 0.0, dt)
    return replace(state, v_consensus_integral=s, v_hat_bus=v_dc - s)


def consensus_current_step(state: SecondaryState, i_out: np.ndarray,
                           graph: CommGraph, dt: float,
                           rate: float = 1.0) -> SecondaryState:
    """Advance the average-current estimator; i_ref_out is its output."""
    if dt <= 0.0:
        raise ValueError("step size must be positive")
    from .sim import rk4_step

    L = laplacian(graph)
    i_out = np.asarray(i_out, dtype=float)
    s = rk4_step(lambda _t, z: rate * (L @ (i_out - z)),
                 state.i_consensus_integral, 0.0, dt)
    return replace(state, i_consensus_integral=s, i_ref_out=i_out - s)


def pi_corrections(state: SecondaryState, gains: SecondaryGains,
                   v_bus_ref: float, i_out: np.ndarray, dt: float
                   ) -> tuple[np.ndarray, np.ndarray, SecondaryState]:
    """PI correction terms from the estimation errors.

    delta_v acts on v_bus_ref - v_hat, delta_i on i_ref - i_out/m; the
    integrals advance first so a zero error freezes both outputs at their
    integral values.
    """
    if dt <= 0.0:
        raise ValueError("step size must be positive")
    i_out = np.asarray(i_out, dtype=float)
    e_v = v_bus_ref - state.v_hat_bus
    e_i = state.i_ref_out - i_out / gains.m
    q_v = state.pi_v_integral + dt * e_v
    q_i = state.pi_i_integral + dt * e_i
    delta_v = gains.k_P_v * e_v + gains.k_I_v * q_v
    delta_i = gains.k_P_i * e_i + gains.k_I_i * q_i
    return delta_v, delta_i, replace(state, pi_v_integral=q_v,
                                     pi_i_integral=q_i)


def compose_reference(v_bus_ref: float, delta_v: np.ndarray,
                      delta_i: np.ndarray) -> np.ndarray:
    """Per-node primary voltage reference, v_bus_ref + delta_v + delta_i."""
    return v_bus_ref + np.asarray(delta_v, dtype=float) \
        + np.asarray(delta_i, dtype=float)


@dataclass(frozen=True)
class ConsensusTrace:
    """Sampled unit-gain closed-loop run of the secondary layer."""

    t: np.ndarray
    v: np.ndarray        # node voltages, shape (T, n)
    v_bus: np.ndarray    # physical bus voltage, shape (T,)
    i_out: np.ndarray    # injected currents, shape (T, n)
    v_hat: np.ndarray
    i_ref: np.ndarray
    e_v: np.ndarray
    e_i: np.ndarray
    v_bus_ref: float


def unit_gain_closed_loop(gains: SecondaryGains, graph: CommGraph,
                          v_bus_ref: float, horizon: float, *,
                          dt: float = 1e-3,
                          line_R: float | np.ndarray = 0.2,
                          load_R: float | None = None,
                          primary_tau: float = 0.0) -> ConsensusTrace:
    """Simulate the secondary layer with the primary replaced by identity.

    Nodes hold V = v_bus_ref + delta_v + delta_i exactly (or through a
    first-order lag when primary_tau > 0) and inject current into a star
    bus with per-node line resistances and a resistive bus load. With the
    identity primary the node voltages satisfy a linear algebraic relation
    in the integrator states, solved exactly at every stage evaluation.

    Args:
        gains: secondary gains; m sets the sharing ratios.
        graph: communication topology, must be connected.
        v_bus_ref: bus voltage setpoint [V].
        horizon: simulated time span [s].
        dt: fixed step [s].
        line_R: per-node line resistance to the bus [ohm].
        load_R: bus load resistance [ohm]; defaults to the value drawing
            5 A per node at the setpoint.
        primary_tau: optional first-order lag of the identity primary [s].

    Returns:
        ConsensusTrace sampled at every step.
    """
    n = graph.n
    if not graph.is_connected():
        raise ValueError("unit-gain loop requires a connected graph")
    if horizon <= 0.0 or dt <= 0.0:
        raise ValueError("horizon and dt must be positive")
    g = np.broadcast_to(1.0 / np.asarray(line_R, dtype=float), (n,)).copy()
    if load_R is None:
        load_R = v_bus_ref / (5.0 * n)
    g_L = 1.0 / float(load_R)
    S = g_L + g.sum()
    # i_out = T V for the star bus with a resistive load
    T_map = np.diag(g) - np.outer(g, g) / S
    L = laplacian(graph)
    K_Pv = np.diag(gains.k_P_v)
    K_Iv = np.diag(gains.k_I_v)
    K_Pi = np.diag(gains.k_P_i)
    K_Ii = np.diag(gains.k_I_i)
    inv_m = 1.0 / gains.m
    rate = gains.consensus_rate
    ones = np.ones(n)

    lagged = primary_tau > 0.0
    # A_alg V = (I + K_Pv) v_ref + K_Pv s_v + K_Iv q_v - K_Pi s_i + K_Ii q_i
    A_alg = np.eye(n) + K_Pv - K_Pi @ ((np.eye(n) - np.diag(inv_m)) @ T_map)
    A_fac = np.linalg.inv(A_alg)

    def node_voltage(z):
        s_v, s_i, q_v, q_i, v_lag = np.split(z, 5)
        if lagged:
            return v_lag
        rhs = (np.eye(n) + K_Pv) @ (v_bus_ref * ones) + K_Pv @ s_v \
            + K_Iv @ q_v - K_Pi @ s_i + K_Ii @ q_i
        return A_fac @ rhs

    def outputs(z):
        s_v, s_i, q_v, q_i, v_lag = np.split(z, 5)
        V = node_voltage(z)
        i_out = T_map @ V
        v_hat = V - s_v
        i_hat = i_out - s_i
        e_v = v_bus_ref - v_hat
        e_i = i_hat - i_out * inv_m
        return V, i_out, v_hat, i_hat, e_v, e_i

    def f(_t, z):
        s_v, s_i, q_v, q_i, v_lag = np.split(z, 5)
        V, i_out, v_hat, i_hat, e_v, e_i = outputs(z)
        dz = [rate * (L @ v_hat), rate * (L @ i_hat), e_v, e_i]
        if lagged:
            delta_v = gains.k_P_v * e_v + gains.k_I_v * q_v
            delta_i = gains.k_P_i * e_i + gains.k_I_i * q_i
            v_cmd = compose_reference(v_bus_ref, delta_v, delta_i)
            dz.append((v_cmd - v_lag) / primary_tau)
        else:
            dz.append(np.zeros(n))
        return np.concatenate(dz)

    steps = int(round(horizon / dt))
    from .sim import rk4_step

    z = np.zeros(5 * n)
    if lagged:
        z[4 * n:] = v_bus_ref
    t = np.empty(steps + 1)
    V = np.empty((steps + 1, n))
    v_bus = np.empty(steps + 1)
    i_out = np.empty((steps + 1, n))
    v_hat = np.empty((steps + 1, n))
    i_ref = np.empty((steps + 1, n))
    e_v = np.empty((steps + 1, n))
    e_i = np.empty((steps + 1, n))
    for k in range(steps + 1):
        Vk, ik, vh, ih, ev, ei = outputs(z)
        t[k] = k * dt
        V[k] = Vk
        v_bus[k] = float(g @ Vk) / S
        i_out[k] = ik
        v_hat[k] = vh
        i_ref[k] = ih
        e_v[k] = ev
        e_i[k] = ei
        if k < steps:
            z = rk4_step(f, z, t[k], dt)
    return ConsensusTrace(t=t, v=V, v_bus=v_bus, i_out=i_out, v_hat=v_hat,
                          i_ref=i_ref, e_v=e_v, e_i=e_i,
                          v_bus_ref=v_bus_ref)


@dataclass(frozen=True)
class SecondaryStabilityReport:
    """Trace-based evaluation of the secondary Lyapunov candidates."""

    laplacian_psd: bool
    lambda_2: float
    v_v_final: float
    v_i_final: float
    v_v_eventually_decreasing: bool
    v_i_eventually_decreasing: bool
    note: str


def _eventually_decreasing(series: np.ndarray) -> bool:
    # non-increasing over the last half, up to rounding on the peak scale
    tail = series[len(series) // 2:]
    tol = 1e-9 * max(1.0, float(np.max(series)))
    return bool(np.all(np.diff(tail) <= tol))


def secondary_lyapunov_check(gains: SecondaryGains, graph: CommGraph,
                             trace: ConsensusTrace,
                             P_I: np.ndarray | None = None,
                             P_V: np.ndarray | None = None
                             ) -> SecondaryStabilityReport:
    """Evaluate V_V = e_v' P_V e_v / 2 and V_I = e_i' P_I e_i / 2 on a trace.

    Reports whether both candidates are eventually non-increasing and end
    near zero, plus the Laplacian eigenvalue facts: the all-ones vector
    always gives zero, so the implementable property is positive
    semidefiniteness together with connectivity.
    """
    n = graph.n
    if P_I is None:
        P_I = np.eye(n)
    if P_V is None:
        P_V = np.eye(n)
    V_V = 0.5 * np.einsum("ti,ij,tj->t", trace.e_v, P_V, trace.e_v)
    V_I = 0.5 * np.einsum("ti,ij,tj->t", trace.e_i, P_I, trace.e_i)
    ev = np.linalg.eigvalsh(laplacian(graph))
    lam2 = float(ev[1]) if n > 1 else float("inf")
    note = ("Laplacian eigenvalues are nonnegative with a zero at the "
            "all-ones vector; definiteness holds only orthogonal to it "
            f"(algebraic connectivity {lam2:.6g})")
    return SecondaryStabilityReport(
        laplacian_psd=bool(ev[0] >= -1e-12),
        lambda_2=lam2,
        v_v_final=float(V_V[-1]),
        v_i_final=float(V_I[-1]),
        v_v_eventually_decreasing=_eventually_decreasing(V_V),
        v_i_eventually_decreasing=_eventually_decreasing(V_I),
        note=note)
