import pytest

from rulstm import TimelineSpec


class TestDefaults:
    def test_paper_settings(self):
        spec = TimelineSpec()
        assert spec.alpha == 0.25
        assert spec.s_enc == 6
        assert spec.s_ant == 8
        assert spec.total_steps == 14

    def test_unroll_counts(self):
        spec = TimelineSpec()
        assert spec.unroll_count(11) == 4
        assert spec.anticipation_time(11) == pytest.approx(1.0)
        assert spec.unroll_count(7) == 8
        assert spec.anticipation_time(7) == pytest.approx(2.0)
        assert spec.unroll_count(14) == 1
        assert spec.anticipation_time(14) == pytest.approx(0.25)

    def test_anticipation_times_ladder(self):
        assert TimelineSpec().anticipation_times() == pytest.approx(
            [2.0, 1.75, 1.5, 1.25, 1.0, 0.75, 0.5, 0.25])

    def test_unroll_outside_stage(self):
        spec = TimelineSpec()
        with pytest.raises(ValueError):
            spec.unroll_count(6)
        with pytest.raises(ValueError):
            spec.unroll_count(15)


class TestStepTime:
    def test_last_step_lands_alpha_before_start(self):
        spec = TimelineSpec()
        assert spec.step_time(10.0, 14) == pytest.approx(10.0 - 0.25)

    def test_one_second_step(self):
        spec = TimelineSpec()
        assert spec.step_time(10.0, 11) == pytest.approx(9.0)
        # effective observation time at that step
        assert spec.alpha * 11 == pytest.approx(2.75)

    def test_arbitrary_alpha_last_step(self):
        spec = TimelineSpec(alpha=0.4, s_enc=2, s_ant=3)
        assert spec.step_time(5.0, spec.total_steps) == pytest.approx(5.0 - 0.4)

    def test_step_out_of_range(self):
        with pytest.raises(ValueError):
            TimelineSpec().step_time(1.0, 0)
        with pytest.raises(ValueError):
            TimelineSpec().step_time(1.0, 15)


class TestObservationRatios:
    def test_eight_rates(self):
        spec = TimelineSpec(s_enc=0, s_ant=8)
        assert spec.observation_ratios() == pytest.approx(
            [0.125, 0.25, 0.375, 0.5, 0.625, 0.75, 0.875, 1.0])


class TestValidation:
    def test_invalid_fields(self):
        with pytest.raises(ValueError):
            TimelineSpec(alpha=0.0)
        with pytest.raises(ValueError):
            TimelineSpec(s_enc=-1)
        with pytest.raises(ValueError):
            TimelineSpec(s_ant=0)
