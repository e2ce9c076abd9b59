import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pyreid.scheduler import (P_FLOOR, Phase, SchedulerState, combined_objective,
                              focal_weight, loss_reduction_prob, select_phase,
                              update_ema)


class TestEma:
    def test_direct_arithmetic(self):
        assert update_ema(2.0, 1.0, 0.25) == pytest.approx(1.75)

    def test_alpha_zero_keeps_previous(self):
        assert update_ema(2.0, 99.0, 0.0) == 2.0

    def test_alpha_one_is_memoryless(self):
        assert update_ema(2.0, 99.0, 1.0) == 99.0

    def test_alpha_out_of_range(self):
        with pytest.raises(ValueError, match="alpha"):
            update_ema(1.0, 1.0, 1.5)

    @given(st.floats(0.0, 1.0), st.floats(0.0, 100.0), st.floats(0.001, 100.0))
    @settings(max_examples=200, deadline=None)
    def test_bracketing(self, alpha, loss, k_prev):
        k = update_ema(k_prev, loss, alpha)
        assert min(loss, k_prev) - 1e-9 <= k <= max(loss, k_prev) + 1e-9


class TestLossReductionProb:
    def test_continuation_of_ema_example(self):
        assert loss_reduction_prob(1.75, 2.0) == pytest.approx(0.875)

    def test_increase_normalizes_to_one(self):
        assert loss_reduction_prob(2.2, 2.0) == 1.0

    def test_no_change_is_one(self):
        assert loss_reduction_prob(3.0, 3.0) == 1.0

    def test_clamped_below(self):
        assert loss_reduction_prob(0.0, 1.0) == P_FLOOR

    def test_nonpositive_k_prev_rejected(self):
        with pytest.raises(ValueError, match="positive"):
            loss_reduction_prob(1.0, 0.0)


class TestFocalWeight:
    def test_zero_at_one_exactly(self):
        assert focal_weight(1.0, 2.0) == 0.0

    def test_direct_values(self):
        assert focal_weight(0.875, 2.0) == pytest.approx(0.002086, abs=1e-6)
        assert focal_weight(0.5, 2.0) == pytest.approx(0.25 * math.log(2), rel=1e-9)
        assert focal_weight(0.5, 2.0) == pytest.approx(0.17329, abs=1e-5)

    def test_monotone_decreasing_on_unit_interval(self):
        ps = np.linspace(1e-6, 1.0, 10_000)
        vals = [focal_weight(float(p), 2.0) for p in ps]
        assert all(a >= b - 1e-15 for a, b in zip(vals, vals[1:]))
        assert vals[-1] == 0.0

    def test_floor_is_large_but_finite(self):
        v = focal_weight(0.0, 2.0)  # stored as the clamp floor
        assert np.isfinite(v)
        assert v > 20.0

    def test_negative_gamma_rejected(self):
        with pytest.raises(ValueError, match="gamma"):
            focal_weight(0.5, -1.0)


class TestSelectPhase:
    def test_initialization_forces_id_only(self):
        fl_id = focal_weight(P_FLOOR, 2.0)  # p_id = 0 at init, stored clamped
        fl_tp = focal_weight(1.0, 2.0)
        assert select_phase(fl_id, fl_tp, 0.16, Phase.COMBINED) is Phase.ID_ONLY

    def test_equal_weights_go_combined(self):
        assert select_phase(0.3, 0.3, 0.16, Phase.ID_ONLY) is Phase.COMBINED

    def test_zero_id_weight_with_triplet_pressure(self):
        assert select_phase(0.0, 0.1, 0.16, Phase.ID_ONLY) is Phase.COMBINED

    def test_both_zero_retains_previous(self):
        assert select_phase(0.0, 0.0, 0.16, Phase.ID_ONLY) is Phase.ID_ONLY
        assert select_phase(0.0, 0.0, 0.16, Phase.COMBINED) is Phase.COMBINED

    def test_strictly_less_boundary(self):
        # ratio exactly delta is not "< delta": combined
        assert select_phase(1.0, 0.16, 0.16, Phase.ID_ONLY) is Phase.COMBINED
        assert select_phase(1.0, 0.159, 0.16, Phase.ID_ONLY) is Phase.ID_ONLY

    def test_scale_invariance(self, rng):
        for _ in range(100):
            fl_id = float(rng.uniform(1e-6, 10))
            fl_tp = float(rng.uniform(0, 10))
            base = select_phase(fl_id, fl_tp, 0.16, Phase.ID_ONLY)
            for c in (1e-3, 0.5, 7.0, 1e4):
                assert select_phase(c * fl_id, c * fl_tp, 0.16, Phase.ID_ONLY) is base

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            select_phase(-0.1, 0.0, 0.16, Phase.ID_ONLY)


class TestCombinedObjective:
    def test_zero_triplet_weight_reduces_to_id(self):
        assert combined_objective(3.0, 99.0, 0.5, 0.0) == pytest.approx(1.5)

    def test_arithmetic(self):
        assert combined_objective(2.0, 4.0, 0.5, 0.25) == pytest.approx(2.0)

    def test_both_zero_weights_give_zero(self):
        assert combined_objective(5.0, 7.0, 0.0, 0.0) == 0.0

    def test_tensor_form_keeps_graph(self):
        import pyreid.autograd as ag
        from pyreid.autograd import Tensor, backward
        x = Tensor(np.array([2.0]), requires_grad=True)
        loss = combined_objective(ag.reduce_sum(x), ag.reduce_sum(ag.mul(x, x)),
                                  0.5, 0.25)
        backward(loss)
        assert x.grad[0] == pytest.approx(0.5 + 0.25 * 2 * 2.0)


class TestSchedulerState:
    def test_first_iteration_is_id_only(self):
        state = SchedulerState()
        assert state.begin_iteration() is Phase.ID_ONLY
        assert state.tau == 1

    def test_second_iteration_still_id_only(self):
        # after one observation both probabilities are exactly 1, both focal
        # weights are 0, and the previous phase is retained
        state = SchedulerState()
        state.begin_iteration()
        state.observe("id", 10.0)
        state.observe("tp", 1.0)
        assert state.begin_iteration() is Phase.ID_ONLY

    def test_first_observation_seeds_k_with_l0(self):
        state = SchedulerState(alpha=0.25)
        state.observe("id", 8.0)
        assert state.id_stats.k_prev == 8.0
        assert state.id_stats.k == 8.0
        assert state.id_stats.p == 1.0

    def test_ema_example_trajectory(self):
        state = SchedulerState(alpha=0.25)
        state.observe("id", 2.0)
        state.observe("id", 1.0)
        assert state.id_stats.k == pytest.approx(1.75)
        assert state.id_stats.p == pytest.approx(0.875)

    def test_zero_loss_pins_probability_to_one(self):
        # an exactly-zero loss cannot reduce further; without the pin the EMA
        # decays geometrically and p sticks at 1 - alpha forever
        state = SchedulerState(alpha=0.25)
        state.observe("tp", 0.5)
        for _ in range(5):
            state.observe("tp", 0.0)
        assert state.tp_stats.p == 1.0

    def test_deterministic_trajectories(self, rng):
        losses = rng.uniform(0.1, 5.0, size=50)
        runs = []
        for _ in range(2):
            state = SchedulerState()
            log = []
            for v in losses:
                state.begin_iteration()
                state.observe("id", float(v))
                state.observe("tp", float(v) * 0.5)
                log.append((state.phase, state.id_stats.k, state.id_stats.p,
                            state.fl_id, state.fl_tp))
            runs.append(log)
        assert runs[0] == runs[1]

    def test_scalar_roundtrip(self):
        state = SchedulerState(alpha=0.3, gamma=1.5, switch_ratio=0.2)
        state.begin_iteration()
        state.observe("id", 4.0)
        state.begin_iteration()
        state.observe("id", 3.0)
        state.observe("tp", 1.0)
        back = SchedulerState.from_scalars(state.to_scalars())
        assert back == state
