import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from racer.dynamics import NX, VehicleParams, VehicleState
from racer.objectives import (
    ContouringObjective,
    ContouringWeights,
    GateProgressObjective,
    GateProgressWeights,
    GateTargetAssignment,
    TrackingWeights,
    assign_gate_targets,
    contouring_cost,
    exit_point,
    gate_progress_cost,
    lag_contour_errors,
    tracking_cost,
)
from racer.track import ReferenceTrajectory, build_arc_path, circle_track, figure8_track, splits_track

import fixtures
import oracles

# keep away from underflow so a non-zero error always yields a positive cost
unit_or_zero = st.floats(-1, 1).filter(lambda v: v == 0 or abs(v) > 1e-6)
positions = arrays(np.float64, st.tuples(st.integers(2, 30), st.just(3)), elements=st.floats(-10, 10))


def reference_from(X, dt=0.03):
    return ReferenceTrajectory(np.arange(len(X)) * dt, X[:, :13])


def hover_rows(K, position=(0.0, 0.0, 1.0)):
    x = VehicleState.hover(position, VehicleParams()).to_array()
    return np.tile(x, (K + 1, 1))


class TestTracking:
    def test_perfect_tracking_costs_nothing(self):
        rng = np.random.default_rng(0)
        X = hover_rows(5)
        X[:, 0:6] += rng.normal(size=(6, 6))
        assert tracking_cost(X, np.zeros((5, 4)), reference_from(X), 0.0, TrackingWeights()) == 0.0

    def test_single_step_position_error(self):
        X = hover_rows(1)
        ref = reference_from(X.copy())
        X[0, 0] += 1.0
        w = TrackingWeights(np.r_[np.ones(3), np.zeros(9)], np.zeros(4), np.zeros(12))
        assert tracking_cost(X, np.zeros((1, 4)), ref, 0.0, w) == pytest.approx(1.0, abs=1e-12)

    def test_homogeneous_in_weights(self):
        rng = np.random.default_rng(1)
        X = hover_rows(8)
        ref = reference_from(X.copy())
        X[:, 0:13] += rng.normal(size=(9, 13)) * 0.1
        U = rng.normal(size=(8, 4))
        w = TrackingWeights()
        assert tracking_cost(X, U, ref, 0.0, w.scaled(2.0)) == pytest.approx(2 * tracking_cost(X, U, ref, 0.0, w), rel=1e-12)

    def test_reference_held_past_its_end(self):
        X = hover_rows(4)
        ref = ReferenceTrajectory(np.array([0.0, 0.01]), X[:2, :13])
        assert tracking_cost(X, np.zeros((4, 4)), ref, 10.0, TrackingWeights()) == 0.0

    @given(arrays(np.float64, (5, 13), elements=unit_or_zero), arrays(np.float64, (4, 4), elements=unit_or_zero))
    def test_non_negative_and_zero_only_at_zero_error(self, noise, U):
        X = hover_rows(4)
        ref = reference_from(X.copy())
        X[:, 0:6] += noise[:, 0:6]
        X[:, 10:13] += noise[:, 10:13]
        c = tracking_cost(X, U, ref, 0.0, TrackingWeights())
        assert c >= 0
        if c == 0:
            assert not noise[:, 0:6].any() and not noise[:, 10:13].any() and not U.any()


class TestLagContour:
    straight = build_arc_path(np.array([[0.0, 0, 0], [4.0, 0, 0]]))

    def test_on_path(self):
        el, ec = lag_contour_errors(self.straight.position(1.3), 1.3, self.straight)
        assert np.allclose(el, 0) and np.allclose(ec, 0)

    def test_straight_segment_projection(self):
        el, ec = lag_contour_errors([1.0, 0.5, 0.0], 0.8, self.straight)
        np.testing.assert_allclose(el, [0.2, 0, 0], atol=1e-12)
        np.testing.assert_allclose(ec, [0, 0.5, 0], atol=1e-12)

    def test_out_of_range_progress_clamped_with_warning(self):
        with pytest.warns(UserWarning, match="clamped"):
            el, _ = lag_contour_errors([5.0, 0, 0], 5.0, self.straight)
        np.testing.assert_allclose(el, [1.0, 0, 0], atol=1e-9)

    @pytest.mark.parametrize("make", [circle_track, figure8_track, splits_track])
    def test_orthogonal_and_pythagorean_on_fixtures(self, make):
        from racer.sim import contouring_path_for

        path = contouring_path_for(make())
        rng = np.random.default_rng(2)
        for _ in range(300):
            th = rng.uniform(0, path.length)
            p = path.position(th) + rng.normal(size=3) * 2
            el, ec = lag_contour_errors(p, th, path)
            r = p - path.position(th)
            assert abs(el @ ec) < 1e-9
            assert abs(el @ el + ec @ ec - r @ r) < 1e-9


def contouring_oracle(X, U, path, w: ContouringWeights):
    total = 0.0
    for k in range(len(U)):
        c, t = path.position(X[k, 17]), path.tangent(X[k, 17])
        r = X[k, 0:3] - c
        el = (r @ t) * t
        ec = r - el
        total += w.lag * el @ el + w.contour * ec @ ec + X[k, 10:13] ** 2 @ w.rates
        total += w.progress_accel * U[k, 4] ** 2 + (X[k + 1, 13:17] - X[k, 13:17]) ** 2 @ w.thrust_change
        total -= w.progress_reward * X[k, 18]
    return total


class TestContouring:
    path = build_arc_path(np.array([[0.0, 0, 1], [10.0, 0, 1]]))

    def rows(self, K, theta=2.0, rate=0.0):
        X = np.zeros((K + 1, NX + 2))
        X[:, :NX] = hover_rows(K, (theta, 0, 1))
        X[:, 17] = theta
        X[:, 18] = rate
        return X

    def test_rest_on_path_costs_nothing(self):
        assert contouring_cost(self.rows(5), np.zeros((5, 5)), self.path, ContouringWeights()) == 0.0

    def test_progress_reward_monotone(self):
        X = self.rows(5, rate=1.0)
        U = np.zeros((5, 5))
        low = contouring_cost(X, U, self.path, ContouringWeights(progress_reward=1.0))
        high = contouring_cost(X, U, self.path, ContouringWeights(progress_reward=2.0))
        assert high < low

    def test_two_step_term_by_term(self):
        X = self.rows(2)
        X[:, 0:3] += [[0.1, 0.2, -0.1], [0.3, -0.1, 0.2], [0.0, 0.4, 0.1]]
        X[:, 10:13] = [[0.5, -0.2, 0.1], [0.0, 0.3, -0.4], [1.0, 1.0, 1.0]]
        X[:, 13:17] += [[0, 0, 0, 0], [0.1, -0.2, 0.3, 0], [0.2, 0.1, 0, -0.3]]
        X[:, 17] = [2.0, 2.1, 2.25]
        X[:, 18] = [3.0, 4.0, 5.0]
        U = np.array([[1, 2, 3, 4, 5.0], [-1, 0, 1, 0, -2.0]])
        w = ContouringWeights()
        assert contouring_cost(X, U, self.path, w) == pytest.approx(contouring_oracle(X, U, self.path, w), abs=1e-9)

    def test_objective_starts_progress_at_projection(self):
        obj = ContouringObjective(self.path)
        x = VehicleState.hover([3.0, 0.2, 1.0], VehicleParams()).to_array()
        x[3:6] = [2.0, 1.0, 0.0]
        x0 = obj.begin(x, 0.0)
        assert x0[17] == pytest.approx(2.0, abs=0.011)  # window search from theta=0 is capped at 2 m
        assert x0[18] == pytest.approx(2.0)
        x0 = obj.begin(x, 0.0)
        assert x0[17] == pytest.approx(3.0, abs=0.011)

    @pytest.mark.parametrize("kwargs", [dict(lag=-1), dict(max_progress_rate=0), dict(rates=-1)])
    def test_invalid_weights(self, kwargs):
        with pytest.raises(ValueError):
            ContouringWeights(**kwargs)


class TestAssignment:
    track = fixtures.gate_track()

    def test_all_in_front_keeps_gate(self):
        P = np.tile(self.track.gates[0].center - [5, 0, 0], (21, 1)) + np.linspace(0, 1, 21)[:, None] * [1, 0, 0]
        a = assign_gate_targets(P, self.track)
        assert not a.targets.any() and a.in_front.all() and a.crossing_index() is None

    def test_switch_at_first_behind_index(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            P, _ = fixtures.straddling_path(rng, self.track)
            g = self.track.gates[0]
            j = oracles.first_crossing(P, g.center, g.normal, g.half_extent)
            prev = GateTargetAssignment(np.zeros(20, dtype=np.int64), np.ones(20, dtype=bool))
            a = assign_gate_targets(P, self.track, prev)
            assert a.crossing_index() == j
            assert np.all(a.targets[:j] == 0) and np.all(a.targets[j:] == 1)

    def test_missed_gate_is_not_switched(self):
        rng = np.random.default_rng(4)
        P, _ = fixtures.straddling_path(rng, self.track, offset=(3 * 1.5, 0.0), bend=0.0)
        assert assign_gate_targets(P, self.track).crossing_index() is None

    def test_backwards_crossing_is_not_a_pass(self):
        rng = np.random.default_rng(5)
        P, _ = fixtures.straddling_path(rng, self.track)
        assert assign_gate_targets(P[::-1], self.track).crossing_index() is None

    def test_temporal_check_blocks_crossing_the_previous_plan_already_passed(self):
        P = fixtures.with_arrival(self.track, 10.5)
        prev = GateTargetAssignment(np.r_[np.zeros(5), np.ones(15)].astype(np.int64), np.ones(20, dtype=bool))
        assert assign_gate_targets(P, self.track, prev).crossing_index() is None
        assert assign_gate_targets(P, self.track, prev, temporal=False).crossing_index() == 11

    def test_terminal_hold(self):
        track = fixtures.gate_track(extra_gates=0)
        P = fixtures.with_arrival(track, 5.5)
        a = assign_gate_targets(P, track)
        assert np.all(a.targets == 0) and a.finish_index == 6

    def test_prev_length_must_match(self):
        prev = GateTargetAssignment(np.zeros(3, dtype=np.int64), np.ones(3, dtype=bool))
        with pytest.raises(ValueError, match="horizon"):
            assign_gate_targets(np.zeros((21, 3)), self.track, prev)

    @given(st.integers(0, 10_000))
    def test_indices_non_decreasing_and_in_bounds(self, seed):
        rng = np.random.default_rng(seed)
        track = circle_track(laps=2)
        P = rng.normal(size=(21, 3)) * 4 + [0, 0, 1.5]
        g0 = int(rng.integers(0, track.total_gates))
        a = assign_gate_targets(P, track, gate_index=g0)
        assert np.all(np.diff(a.targets) >= 0)
        assert a.targets.min() >= g0 and a.targets.max() < track.total_gates

    def test_crossing_is_a_fixed_point_under_reclassification(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            P, _ = fixtures.straddling_path(rng, self.track)
            a = assign_gate_targets(P, self.track)
            j = a.crossing_index()
            steps = 0
            while j is not None and j > 1:
                P = fixtures.advance(P)
                a = assign_gate_targets(P, self.track, a.shifted())
                assert a.crossing_index() == j - 1
                j -= 1
                steps += 1
            assert steps > 0


class TestShift:
    a = GateTargetAssignment(np.array([0, 0, 1, 1, 2]), np.array([True, False, True, False, True]))

    def test_one_step(self):
        s = self.a.shifted()
        assert s.targets.tolist() == [0, 1, 1, 2, 2]
        assert s.in_front.tolist() == [False, True, False, True, True]

    def test_fractional_step_maps_to_earlier_instant(self):
        s = self.a.shifted(2 / 3)
        assert s.targets.tolist() == [0, 0, 1, 1, 2]

    def test_zero_step_is_identity(self):
        assert self.a.shifted(0.0).targets.tolist() == self.a.targets.tolist()


class TestGateProgress:
    track = fixtures.gate_track(center=(2.0, 0.0, 0.0))
    w0 = GateProgressWeights(near_weight=0.0)

    def assignment(self, targets):
        t = np.asarray(targets, dtype=np.int64)
        return GateTargetAssignment(t, np.ones(len(t), dtype=bool))

    def test_static_far_field(self):
        P = np.tile([-20.0, 3, 1], (11, 1))
        assert gate_progress_cost(P, self.assignment([0] * 10), self.track, GateProgressWeights()) == 0.0

    def test_single_step_value(self):
        P = np.array([[0.0, 0, 0], [1.0, 0, 0]])
        assert gate_progress_cost(P, self.assignment([0]), self.track, self.w0) == pytest.approx(-3.0, abs=1e-12)

    @given(positions)
    def test_telescopes_for_a_fixed_target(self, P):
        g = self.track.gates[0].center
        K = len(P) - 1
        c = gate_progress_cost(P, self.assignment([0] * K), self.track, self.w0)
        assert c == pytest.approx(np.sum((P[-1] - g) ** 2) - np.sum((P[0] - g) ** 2), abs=1e-9)

    @given(positions, st.floats(0.1, 5), st.floats(0.2, 3), st.data())
    def test_matches_oracle_with_switching(self, P, q, r, data):
        K = len(P) - 1
        j = data.draw(st.integers(1, K))
        targets = np.r_[np.zeros(j), np.ones(K - j)].astype(np.int64)
        w = GateProgressWeights(q, r)
        centers = self.track.gate_arrays()[0]
        expected = oracles.gate_progress(P, targets, centers, q, r)
        assert gate_progress_cost(P, self.assignment(targets), self.track, w) == pytest.approx(expected, abs=1e-9)

    def test_progress_past_final_gate_measured_to_exit_point(self):
        track = fixtures.gate_track(extra_gates=0)
        P = fixtures.with_arrival(track, 5.5)
        a = assign_gate_targets(P, track)
        ex = exit_point(track)
        c = track.gates[0].center
        expected = np.sum((P[6] - c) ** 2) - np.sum((P[0] - c) ** 2) + np.sum((P[-1] - ex) ** 2) - np.sum((P[6] - ex) ** 2)
        assert gate_progress_cost(P, a, track, self.w0) == pytest.approx(expected, abs=1e-9)

    def test_near_term_applies_to_previous_gate_just_behind_it(self):
        P = np.array([[1.9, 0, 0], [2.1, 0, 0], [2.3, 0, 0]])
        w = GateProgressWeights(near_weight=10.0, near_radius=1.0)
        a = self.assignment([0, 1])
        far = gate_progress_cost(P, a, self.track, self.w0)
        near = gate_progress_cost(P, a, self.track, w)
        assert near - far == pytest.approx(10.0 * (0.1**2 + 0.1**2), abs=1e-12)

    @pytest.mark.parametrize("kwargs", [dict(near_weight=-1), dict(near_radius=0)])
    def test_invalid_weights(self, kwargs):
        with pytest.raises(ValueError):
            GateProgressWeights(**kwargs)

    def test_batch_matches_single_trajectory_cost(self, real_params):
        from racer.mppi import MppiConfig, MppiController, rollout

        track = circle_track()
        obj = GateProgressObjective(track, GateProgressWeights(1.0, 1.5))
        ctrl = MppiController(obj, real_params, MppiConfig(samples=16))
        x = VehicleState.hover(track.start_position, real_params).to_array()
        for k in range(3):
            ctrl.control_step(x, 0.02 * k)
        x0 = obj.begin(x, 0.06)
        U = np.random.default_rng(7).normal(size=(16, 20, 4)) * 5
        batch = obj.batch_costs(x0, U, 0.03, ctrl._prm, ctrl._limits)
        single = [rollout(x0, u, obj, real_params, ctrl.config).cost for u in U]
        np.testing.assert_allclose(batch, single, rtol=1e-12)


class TestPurity:
    def test_repeated_evaluation_is_bit_identical(self):
        rng = np.random.default_rng(8)
        X = hover_rows(10)
        X[:, 0:6] += rng.normal(size=(11, 6))
        U = rng.normal(size=(10, 5))
        ref = reference_from(hover_rows(10))
        track = circle_track()
        path = build_arc_path(X[:, 0:3] + [0, 0.1, 0])
        Xa = np.column_stack([X, np.linspace(0, 1, 11), np.ones(11)])
        for _ in range(2):
            results = (
                tracking_cost(X, U[:, :4], ref, 0.0, TrackingWeights()),
                contouring_cost(Xa, U, path, ContouringWeights()),
                gate_progress_cost(X, assign_gate_targets(X, track), track, GateProgressWeights()),
            )
            if _ == 0:
                first = results
        assert results == first
