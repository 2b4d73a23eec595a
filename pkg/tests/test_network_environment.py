import numpy as np
import pytest

from channel_model import ChannelSimulator, GainMatrix
from network_environment import (
    DelayLine,
    HetNetEnvironment,
    LocalState,
    build_aux_info,
    build_local_state,
    compute_rate,
    compute_sinr,
    feature_map,
    make_slot_record,
    preprocess_features,
    records_to_frame,
    sum_rate,
    write_records_csv,
)
from simulation_errors import ContractViolation, DomainError, ShapeError
from tests.helpers import small_scenario

TWO_LINK = np.array([[3.0, 0.7], [0.5, 2.0]])


def test_sinr_worked_example():
    assert compute_sinr([2.0, 4.0], TWO_LINK, 1.0, 0) == pytest.approx(2.0)


def test_sinr_without_interference():
    g = np.array([[2.0, 0.0], [0.0, 1.0]])
    assert compute_sinr([1.5, 1.0], g, 1.0, 0) == pytest.approx(3.0)
    assert compute_sinr([0.0, 1.0], g, 1.0, 0) == 0.0


def test_rate_examples():
    assert compute_rate(1.0, 1e6) == pytest.approx(1e6)
    assert compute_rate(0.0, 10e6) == 0.0
    with pytest.raises(DomainError):
        compute_rate(-0.1, 1.0)


def test_sum_rate_strong_interference_pair():
    g = np.array([[1.0, 10.0], [10.0, 1.0]])
    assert sum_rate([1.0, 0.0], g, 1.0, 1.0) == pytest.approx(1.0)
    assert sum_rate([1.0, 1.0], g, 1.0, 1.0) == pytest.approx(2 * np.log2(12 / 11))


def test_sinr_shape_mismatch():
    with pytest.raises(ShapeError):
        compute_sinr([1.0, 2.0, 3.0], TWO_LINK, 1.0, 0)


def worked_record():
    return make_slot_record(4, [2.0, 4.0], GainMatrix(TWO_LINK), 1.0, 1.0)


def test_local_state_worked_example():
    g_now = np.array([[1.5, 0.2], [0.25, 0.8]])
    state = build_local_state(worked_record(), g_now, 0)
    expected = [3.0, 2.0, 2.0, 2.0, np.log2(3.0), 1.5, 4.0 * 0.25]
    np.testing.assert_allclose(state.as_vector(), expected, rtol=1e-12)


def test_local_state_fields_are_consistent():
    state = build_local_state(worked_record(), TWO_LINK, 1)
    sinr = state.p_prev * state.g_own_prev / (state.interf_prev + 1.0)
    assert sinr == pytest.approx(state.sinr_prev, rel=1e-9)
    assert state.rate_prev == pytest.approx(np.log2(1 + state.sinr_prev), rel=1e-12)


def test_aux_info_lists_every_interferer():
    g_now = np.array([[1.0, 0.3, 0.1], [0.2, 1.0, 0.4], [0.5, 0.6, 1.0]])
    aux = build_aux_info([1.0, 2.0, 4.0], g_now, 1)
    assert aux.receiver == 1
    assert aux.received == pytest.approx({0: 0.3, 2: 2.4})
    assert aux.total() == pytest.approx(2.7)


def test_single_ap_has_no_interference():
    record = make_slot_record(0, [1.0], GainMatrix(np.array([[2.0]])), 1.0, 1.0)
    state = build_local_state(record, np.array([[3.0]]), 0)
    assert state.interf_prev == 0.0 and state.interf_now == 0.0
    assert build_aux_info([1.0], np.array([[3.0]]), 0).received == {}


def test_feature_map_values():
    assert feature_map(0.0) == 0.0
    assert feature_map(9.0) == pytest.approx(10.0)
    with pytest.raises(DomainError):
        feature_map(-1.0)


def test_preprocess_keeps_rate_raw():
    state = LocalState(9.0, 9.0, 9.0, 9.0, 2.5, 99.0, 0.0)
    np.testing.assert_allclose(preprocess_features(state), [10, 10, 10, 10, 2.5, 20, 0])
    flat = preprocess_features(GainMatrix(np.array([[9.0, 0.0], [99.0, 0.0]])))
    np.testing.assert_allclose(flat, [10.0, 0.0, 20.0, 0.0])


def test_delay_line_releases_exactly_after_delay():
    line = DelayLine(3)
    assert line.push("a", 5) == 8
    line.push("b", 6)
    assert line.pop_released(7) == []
    assert line.pop_released(8) == ["a"]
    assert line.pop_released(9) == ["b"]
    assert len(line) == 0


def test_delay_line_zero_delay_and_order_guard():
    line = DelayLine(0)
    line.push("now", 2)
    assert line.pop_released(2) == ["now"]
    line.push("late", 5)
    with pytest.raises(ContractViolation):
        line.push("early", 4)
    with pytest.raises(ContractViolation):
        DelayLine(-1)


def fixed_gains(matrix, count):
    return [GainMatrix(np.asarray(matrix, dtype=float)) for _ in range(count)]


def test_environment_slot_bookkeeping():
    config = small_scenario()
    raw = ChannelSimulator(config, np.random.default_rng(0)).generate_trace(6)
    env = HetNetEnvironment(config, raw)
    states, aux = env.reset(config.p_max)
    assert env.current_slot == 1 and len(states) == 2 and len(aux) == 2
    normalized = [g.normalized(config.noise_power_watts).g for g in raw]
    record, states, aux = env.advance(config.p_max / 2)
    assert record.slot == 1
    np.testing.assert_allclose(record.gains.g, normalized[1])
    assert states[0].p_prev == pytest.approx(config.p_max[0] / 2)
    assert states[0].g_own_now == pytest.approx(normalized[2][0, 0])
    assert record.sum_rate == pytest.approx(np.sum(record.rates))
    assert record.sum_rate == pytest.approx(config.bandwidth_hz * record.sum_spectral_efficiency)


def test_environment_rejects_out_of_range_actions():
    config = small_scenario()
    env = HetNetEnvironment(config, fixed_gains(np.eye(2), 5))
    env.reset(config.p_max)
    with pytest.raises(ContractViolation):
        env.advance([2.0, 0.1])
    with pytest.raises(ContractViolation):
        env.advance([0.0, 0.1])
    with pytest.raises(ShapeError):
        env.advance([0.5])


def test_environment_requires_reset_and_enough_gains():
    config = small_scenario()
    env = HetNetEnvironment(config, fixed_gains(np.eye(2), 2))
    with pytest.raises(ContractViolation):
        env.advance(config.p_max)
    env.reset(config.p_max)
    with pytest.raises(ContractViolation):
        env.advance(config.p_max)


def test_static_channel_and_fixed_actions_repeat_records():
    config = small_scenario()
    env = HetNetEnvironment(config, fixed_gains([[1e-10, 1e-12], [2e-12, 1e-11]], 6))
    env.reset(config.p_max)
    first, _, _ = env.advance(config.p_max)
    second, _, _ = env.advance(config.p_max)
    assert (first.slot, second.slot) == (1, 2)
    np.testing.assert_array_equal(first.rates, second.rates)
    assert first.sum_rate == second.sum_rate


def test_records_csv(tmp_path):
    records = [worked_record()]
    frame = records_to_frame(records)
    assert list(frame.columns) == ["slot", "p_1", "p_2", "r_1", "r_2", "R"]
    path = write_records_csv(records, tmp_path / "out" / "records.csv")
    assert path.read_text().splitlines()[0] == "slot,p_1,p_2,r_1,r_2,R"
