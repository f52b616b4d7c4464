"""Tests for the communication graph and secondary control layer."""

import numpy as np
import pytest
import scipy.integrate

from mgsim.consensus import (
    CommGraph,
    SecondaryGains,
    SecondaryState,
    algebraic_connectivity,
    compose_reference,
    consensus_current_step,
    consensus_voltage_step,
    initial_secondary_state,
    laplacian,
    pi_corrections,
    secondary_lyapunov_check,
    unit_gain_closed_loop,
)

# shipped experiment topologies: five nodes, the six-node expansion after
# the new unit joins, and the post-failure graph with (0,1), (0,2) gone
EDGES_5 = [(0, 1), (0, 2), (1, 3), (2, 3), (3, 4)]
EDGES_6 = EDGES_5 + [(0, 5), (4, 5)]
EDGES_6_FAIL = [(1, 3), (2, 3), (3, 4), (0, 5), (4, 5)]

L_5 = np.array([
    [2, -1, -1, 0, 0],
    [-1, 2, 0, -1, 0],
    [-1, 0, 2, -1, 0],
    [0, -1, -1, 3, -1],
    [0, 0, 0, -1, 1],
], dtype=float)

L_6 = np.array([
    [3, -1, -1, 0, 0, -1],
    [-1, 2, 0, -1, 0, 0],
    [-1, 0, 2, -1, 0, 0],
    [0, -1, -1, 3, -1, 0],
    [0, 0, 0, -1, 2, -1],
    [-1, 0, 0, 0, -1, 2],
], dtype=float)


def graph5():
    return CommGraph.from_edges(5, EDGES_5)


def graph6():
    return CommGraph.from_edges(6, EDGES_6)


class TestCommGraph:
    def test_five_node_laplacian_matches_reference_matrix(self):
        assert np.array_equal(laplacian(graph5()), L_5)

    def test_six_node_laplacian_matches_reference_matrix(self):
        assert np.array_equal(laplacian(graph6()), L_6)

    def test_post_failure_laplacian_regenerates_from_edges(self):
        g = graph6().with_edges(remove=[(0, 1), (0, 2)])
        assert g.edges == CommGraph.from_edges(6, EDGES_6_FAIL).edges
        L = laplacian(g)
        assert np.array_equal(L, L.T)
        assert np.allclose(L.sum(axis=1), 0.0)
        assert g.is_connected()

    def test_rows_sum_to_zero_and_symmetric(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            n = int(rng.integers(2, 9))
            pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
            take = rng.random(len(pairs)) < 0.4
            g = CommGraph.from_edges(n, [p for p, t in zip(pairs, take) if t])
            L = laplacian(g)
            assert np.array_equal(L, L.T)
            assert np.allclose(L.sum(axis=1), 0.0)
            assert np.min(np.linalg.eigvalsh(L)) >= -1e-12

    def test_complete_triangle(self):
        g = CommGraph.from_edges(3, [(0, 1), (0, 2), (1, 2)])
        assert np.array_equal(laplacian(g),
                              np.array([[2, -1, -1],
                                        [-1, 2, -1],
                                        [-1, -1, 2]], dtype=float))

    def test_self_loop_rejected(self):
        with pytest.raises(ValueError, match="self-loop"):
            CommGraph.from_edges(3, [(1, 1)])

    def test_out_of_range_edge_rejected(self):
        with pytest.raises(ValueError, match="outside"):
            CommGraph.from_edges(3, [(0, 3)])

    def test_connectivity(self):
        assert graph5().is_connected()
        split = CommGraph.from_edges(4, [(0, 1), (2, 3)])
        assert not split.is_connected()
        assert algebraic_connectivity(split) < 1e-12
        assert algebraic_connectivity(graph5()) > 0.5

    def test_with_edges_add_then_remove(self):
        g = graph5()
        grown = g.with_edges(add=[(0, 4)])
        assert (0, 4) in grown.edges
        shrunk = grown.with_edges(remove=[(4, 0)])
        assert shrunk.edges == g.edges


class TestVoltageConsensus:
    def test_identical_inputs_are_a_fixed_point(self):
        state = initial_secondary_state(5)
        v = np.full(5, 381.7)
        for _ in range(50):
            state = consensus_voltage_step(state, v, graph5(), 1e-2)
        # degree-3 rows leave rounding residue, nothing systematic
        assert np.max(np.abs(state.v_consensus_integral)) < 1e-11
        assert np.max(np.abs(state.v_hat_bus - v)) < 1e-11

    def test_disconnected_node_keeps_own_measurement(self):
        g = CommGraph.from_edges(3, [(1, 2)])
        state = initial_secondary_state(3)
        v = np.array([400.0, 370.0, 390.0])
        for _ in range(200):
            state = consensus_voltage_step(state, v, g, 1e-2)
        assert state.v_hat_bus[0] == 400.0
        assert abs(state.v_hat_bus[1] - 380.0) < 1.0

    def test_static_input_converges_to_average(self):
        g = graph5()
        lam2 = algebraic_connectivity(g)
        v = np.array([384.0, 377.0, 381.5, 379.0, 378.5])
        horizon = 20.0 / lam2
        dt = 1e-2
        state = initial_secondary_state(5)
        for _ in range(int(round(horizon / dt))):
            state = consensus_voltage_step(state, v, g, dt)
        avg = v.mean()
        assert np.max(np.abs(state.v_hat_bus - avg)) / avg < 1e-3

        # direct ODE oracle on the integral state
        L = laplacian(g)
        sol = scipy.integrate.solve_ivp(
            lambda t, s: L @ (v - s), (0.0, horizon), np.zeros(5),
            rtol=1e-10, atol=1e-12)
        v_hat_ref = v - sol.y[:, -1]
        assert np.max(np.abs(state.v_hat_bus - v_hat_ref)) < 1e-6

    def test_estimator_average_tracks_input_average_exactly(self):
        # symmetric Laplacian makes the disagreement integrals sum to zero
        rng = np.random.default_rng(11)
        g = graph5()
        state = initial_secondary_state(5)
        v = 380.0 + rng.normal(size=5)
        for _ in range(300):
            v = v + 0.1 * rng.normal(size=5)
            state = consensus_voltage_step(state, v, g, 1e-2)
            assert abs(np.sum(state.v_hat_bus - v)) < 1e-9 * np.abs(v).sum()

    def test_faster_rate_converges_faster(self):
        g = graph5()
        v = np.array([384.0, 377.0, 381.5, 379.0, 378.5])
        errs = []
        for rate in (1.0, 20.0):
            state = initial_secondary_state(5)
            for _ in range(100):
                state = consensus_voltage_step(state, v, g, 1e-2, rate=rate)
            errs.append(np.max(np.abs(state.v_hat_bus - v.mean())))
        assert errs[1] < 0.05 * errs[0]

    def test_nonpositive_dt_rejected(self):
        with pytest.raises(ValueError, match="step size"):
            consensus_voltage_step(initial_secondary_state(5),
                                   np.zeros(5), graph5(), 0.0)


class TestCurrentConsensus:
    def test_equal_injections_pass_through(self):
        state = initial_secondary_state(5)
        i = np.full(5, 7.5)
        for _ in range(50):
            state = consensus_current_step(state, i, graph5(), 1e-2)
        assert np.array_equal(state.i_ref_out, i)

    def test_static_input_converges_to_average(self):
        g = graph5()
        i = np.array([4.0, 9.0, 6.5, 5.0, 8.0])
        state = initial_secondary_state(5)
        horizon = 20.0 / algebraic_connectivity(g)
        dt = 1e-2
        for _ in range(int(round(horizon / dt))):
            state = consensus_current_step(state, i, g, dt)
        assert np.max(np.abs(state.i_ref_out - i.mean())) / i.mean() < 1e-3

    def test_isolated_node_ignores_other_component(self):
        g = CommGraph.from_edges(3, [(1, 2)])
        state = initial_secondary_state(3)
        i = np.array([5.0, 9.0, 1.0])
        for _ in range(200):
            state = consensus_current_step(state, i, g, 1e-2)
        assert state.i_ref_out[0] == 5.0
        assert abs(state.i_ref_out[1] - 5.0) < 0.1  # average of {9, 1}


class TestPiCorrections:
    def gains(self, n=3):
        return SecondaryGains.equal_sharing(n, k_P_v=1.0, k_I_v=6.0,
                                            k_P_i=0.5, k_I_i=8.0)

    def test_zero_error_freezes_outputs_at_integral_values(self):
        n = 3
        state = initial_secondary_state(n)
        state = SecondaryState(
            v_hat_bus=np.full(n, 380.0),
            v_consensus_integral=np.zeros(n),
            i_consensus_integral=np.zeros(n),
            pi_v_integral=np.array([0.3, -0.1, 0.2]),
            pi_i_integral=np.array([1.0, 0.5, -0.4]),
            i_ref_out=np.full(n, 6.0))
        g = self.gains()
        dv1, di1, state1 = pi_corrections(state, g, 380.0, np.full(n, 6.0),
                                          1e-3)
        dv2, di2, state2 = pi_corrections(state1, g, 380.0, np.full(n, 6.0),
                                          1e-3)
        assert np.array_equal(dv1, g.k_I_v * state.pi_v_integral)
        assert np.array_equal(di1, g.k_I_i * state.pi_i_integral)
        assert np.array_equal(dv1, dv2)
        assert np.array_equal(state1.pi_v_integral, state2.pi_v_integral)

    def test_proportional_and_integral_terms_exact(self):
        n = 2
        state = initial_secondary_state(n)
        state = SecondaryState(
            v_hat_bus=np.array([379.0, 381.0]),
            v_consensus_integral=np.zeros(n),
            i_consensus_integral=np.zeros(n),
            pi_v_integral=np.zeros(n),
            pi_i_integral=np.zeros(n),
            i_ref_out=np.array([5.0, 5.0]))
        g = self.gains(n)
        i_out = np.array([4.0, 6.0])
        dt = 1e-3
        dv, di, state1 = pi_corrections(state, g, 380.0, i_out, dt)
        e_v = 380.0 - state.v_hat_bus
        e_i = state.i_ref_out - i_out / g.m
        assert np.allclose(dv, g.k_P_v * e_v + g.k_I_v * dt * e_v, rtol=1e-14)
        assert np.allclose(di, g.k_P_i * e_i + g.k_I_i * dt * e_i, rtol=1e-14)
        assert np.allclose(state1.pi_v_integral, dt * e_v)

    def test_compose_reference_arithmetic(self):
        out = compose_reference(380.0, np.array([1.0]), np.array([-0.5]))
        assert out[0] == 380.5
        flat = compose_reference(380.0, np.zeros(4), np.zeros(4))
        assert np.array_equal(flat, np.full(4, 380.0))


class TestUnitGainClosedLoop:
    LINES_5 = np.array([0.12, 0.2, 0.28, 0.35, 0.18])

    def gains(self, n, rate=40.0):
        return SecondaryGains.equal_sharing(n, k_P_v=1.0, k_I_v=6.0,
                                            k_P_i=0.5, k_I_i=8.0,
                                            consensus_rate=rate)

    def test_single_node_pi_step_response(self):
        g = CommGraph.from_edges(1, [])
        tr = unit_gain_closed_loop(self.gains(1), g, 380.0, 2.0,
                                   dt=1e-3, line_R=0.2, primary_tau=0.05)
        assert abs(tr.v[0, 0] - 380.0) < 1e-9  # lag starts at the setpoint
        assert abs(tr.v[-1, 0] - 380.0) < 1e-6
        assert np.all(np.isfinite(tr.v))

    def test_five_node_restoration_and_sharing(self):
        g = graph5()
        tr = unit_gain_closed_loop(self.gains(5), g, 380.0, 4.0,
                                   dt=1e-3, line_R=self.LINES_5)
        avg = tr.v.mean(axis=1)
        assert np.max(np.abs(avg - 380.0)) < 1e-9  # mean channel is exact
        share = np.abs(tr.i_out - tr.i_out.mean(axis=1, keepdims=True)) \
            / np.abs(tr.i_out.mean(axis=1, keepdims=True))
        assert share[0].max() > 0.2      # heterogeneous lines start unequal
        assert share[-1].max() < 1e-4
        settled = np.where(share.max(axis=1) > 0.01)[0]
        t_settle = tr.t[settled[-1] + 1]
        assert 0.05 < t_settle < 1.5

    def test_sharing_coefficients_set_current_ratio(self):
        g = CommGraph.from_edges(2, [(0, 1)])
        gains = SecondaryGains(k_P_v=np.ones(2), k_I_v=6.0 * np.ones(2),
                               k_P_i=0.5 * np.ones(2),
                               k_I_i=8.0 * np.ones(2),
                               m=np.array([1.0, 2.0]), consensus_rate=40.0)
        tr = unit_gain_closed_loop(gains, g, 380.0, 6.0, dt=1e-3,
                                   line_R=0.2)
        ratio = tr.i_out[-1, 1] / tr.i_out[-1, 0]
        assert abs(ratio - 2.0) < 2e-3

    def test_disconnected_graph_rejected(self):
        g = CommGraph.from_edges(2, [])
        with pytest.raises(ValueError, match="connected"):
            unit_gain_closed_loop(self.gains(2), g, 380.0, 1.0)


class TestSecondaryLyapunovCheck:
    def test_consensus_reached_start_stays_at_zero(self):
        g = graph5()
        gains = SecondaryGains.equal_sharing(5, 1.0, 6.0, 0.5, 8.0,
                                             consensus_rate=40.0)
        # homogeneous lines put the loop at its fixed point from t = 0
        tr = unit_gain_closed_loop(gains, g, 380.0, 1.0, dt=1e-3, line_R=0.2)
        report = secondary_lyapunov_check(gains, g, tr)
        assert report.v_i_final < 1e-20
        assert report.v_v_final < 1e-20
        assert report.v_v_eventually_decreasing
        assert report.v_i_eventually_decreasing

    def test_five_node_graph_eigen_facts(self):
        g = graph5()
        gains = SecondaryGains.equal_sharing(5, 1.0, 6.0, 0.5, 8.0)
        tr = unit_gain_closed_loop(gains, g, 380.0, 0.2, dt=1e-3)
        report = secondary_lyapunov_check(gains, g, tr)
        assert report.laplacian_psd
        assert report.lambda_2 > 0.5
        assert "orthogonal" in report.note

    def test_six_node_transient_decreases(self):
        g = graph6()
        gains = SecondaryGains.equal_sharing(6, 1.0, 6.0, 0.5, 8.0,
                                             consensus_rate=40.0)
        lines = np.array([0.12, 0.2, 0.28, 0.35, 0.18, 0.25])
        tr = unit_gain_closed_loop(gains, g, 380.0, 4.0, dt=1e-3,
                                   line_R=lines)
        report = secondary_lyapunov_check(gains, g, tr)
        assert report.v_v_eventually_decreasing
        assert report.v_i_eventually_decreasing
        assert report.v_i_final < 1e-8
