#!/usr/bin/env python3
"""
Tests for the (s, b) adaptation controller: RTT prediction, selection,
channel estimation and the per-frame loop
"""

import json
import math

import numpy as np
import pytest

from adaptation_controller import (AdaptationController, ChannelEstimate, ConfigPoint, FrameOutcome, Observation,
                                   PerfEntry, PerfTable, config_space, control_loop, load_desk_table,
                                   leg_delay, load_measured_table, predict_rtt, select_config, update_estimate)
from split_errors import ConfigError, ControllerError, SessionClosedError

RESULT_BYTES = 85
HEADER_BYTES = 42


@pytest.fixture(scope='module')
def measured_table():
    return load_measured_table()


def _single_entry_table(encode_ms=30.0, decode_ms=60.0, payload=192):
    return PerfTable({ConfigPoint(1, 1): PerfEntry(encode_ms, decode_ms, payload, 14.5)})


def _random_table(rng):
    payloads = {b: int(rng.integers(100, 2000)) for b in range(1, 5)}
    return PerfTable({cfg: PerfEntry(float(rng.uniform(20, 300)), float(rng.uniform(10, 100)), payloads[cfg.b],
                                     float(np.round(rng.uniform(10, 40), 0)))
                      for cfg in config_space()})


def test_config_space_has_sixteen_points():
    points = config_space()
    assert len(points) == len(set(points)) == 16
    assert str(ConfigPoint(2, 3)) == "(s=2, b=3)"


def test_predict_rtt_worked_example():
    est = ChannelEstimate(80000, 20)
    assert predict_rtt(ConfigPoint(1, 1), _single_entry_table(), est, result_bytes=64) == pytest.approx(133.2)


def test_predict_rtt_limits_and_linearity():
    cfg = ConfigPoint(1, 1)
    fast = ChannelEstimate(1e18, 0.0)
    assert predict_rtt(cfg, _single_entry_table(), fast) == pytest.approx(90.0)
    est = ChannelEstimate(80000, 20)
    small = predict_rtt(cfg, _single_entry_table(payload=192), est)
    large = predict_rtt(cfg, _single_entry_table(payload=384), est)
    assert large - small == pytest.approx(192 / 80000 * 1000)


def test_predict_rtt_errors():
    with pytest.raises(ControllerError):
        predict_rtt(ConfigPoint(2, 2), _single_entry_table(), ChannelEstimate(1000))
    with pytest.raises(ControllerError):
        predict_rtt(ConfigPoint(1, 1), _single_entry_table(), ChannelEstimate())


@pytest.mark.parametrize("deadline, expected", [(300, ConfigPoint(1, 3)), (600, ConfigPoint(4, 4)),
                                                (100, ConfigPoint(1, 1)), (math.inf, ConfigPoint(4, 4))])
def test_selection_over_measured_table(measured_table, deadline, expected):
    rtt = lambda cfg: measured_table[cfg].encode_ms  # noqa: E731
    assert select_config(measured_table, ChannelEstimate(1.0), deadline, rtt_fn=rtt) == expected


def test_select_config_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(200):
        table = _random_table(rng)
        est = ChannelEstimate(float(rng.uniform(1000, 200000)), float(rng.uniform(0, 30)))
        deadline = float(rng.uniform(50, 600))
        rtts = {cfg: predict_rtt(cfg, table, est) for cfg in config_space()}
        feasible = [cfg for cfg in config_space() if rtts[cfg] <= deadline]
        if feasible:
            best = sorted(feasible, key=lambda c: (-table[c].metric, rtts[c], c.s, c.b))[0]
        else:
            best = sorted(config_space(), key=lambda c: (rtts[c], c.s, c.b))[0]
        assert select_config(table, est, deadline) == best


def test_selection_ignores_metric_scale():
    rng = np.random.default_rng(1)
    for _ in range(50):
        table = _random_table(rng)
        est = ChannelEstimate(float(rng.uniform(1000, 200000)), 10.0)
        deadline = float(rng.uniform(50, 600))
        factor = float(rng.uniform(0.1, 10))
        assert select_config(table, est, deadline) == select_config(table.scaled_metric(factor), est, deadline)


def test_switch_penalty_favours_current():
    table = PerfTable({ConfigPoint(1, 1): PerfEntry(10, 0, 100, 10.0),
                       ConfigPoint(1, 2): PerfEntry(10, 0, 200, 10.0)})
    est = ChannelEstimate(1e6, 0.0)
    assert select_config(table, est, 100) == ConfigPoint(1, 1)
    assert select_config(table, est, 100, current=ConfigPoint(1, 2), switch_penalty_ms=5) == ConfigPoint(1, 2)


def test_empty_table_rejected():
    with pytest.raises(ControllerError):
        select_config(PerfTable(), ChannelEstimate(1000), 100)


def test_rate_sweep_switches_bits_more_than_ensemble():
    """Monotone 200 -> 80 kB/s sweep at desk scale, deadline 400 ms"""
    table = load_desk_table()
    chosen = []
    for rate in np.linspace(200000, 80000, 121):
        est = ChannelEstimate(rate / 36, 10.0)
        chosen.append(select_config(table, est, 400, result_bytes=RESULT_BYTES, overhead_bytes=HEADER_BYTES))
    b_changes = sum(1 for a, b in zip(chosen, chosen[1:]) if a.b != b.b)
    s_changes = sum(1 for a, b in zip(chosen, chosen[1:]) if a.s != b.s)
    assert chosen[0] == ConfigPoint(2, 4)
    assert chosen[-1] == ConfigPoint(1, 2)
    assert b_changes >= s_changes >= 1


def test_first_observation_initializes():
    est = update_estimate(ChannelEstimate(), Observation(1000, 10.0, delay_ms=0.0))
    assert est.rate_Bps == 100000
    assert est.observations == 1


def test_alpha_one_tracks_latest():
    est = ChannelEstimate(alpha=1.0)
    for nbytes in (1000, 5000, 2000):
        est = update_estimate(est, Observation(nbytes, 10.0, delay_ms=0.0))
        assert est.rate_Bps == pytest.approx(nbytes * 100)


def test_ewma_stays_between_alternating_rates():
    est = ChannelEstimate(alpha=0.2)
    for step in range(100):
        rate = 80000 if step % 2 == 0 else 120000
        est = update_estimate(est, Observation(rate / 100, 10.0, delay_ms=0.0))
        assert 80000 - 1e-6 <= est.rate_Bps <= 120000 + 1e-6
    assert 90000 < est.rate_Bps < 110000


def test_round_trip_observation_removes_both_delays():
    est = ChannelEstimate(1000, 10.0)
    est = update_estimate(est, Observation(2000, 1020.0, legs=2))
    assert est.rate_Bps == pytest.approx(2000.0)
    assert est.delay_ms == 10.0


def test_stale_delay_keeps_rate_finite():
    est = update_estimate(ChannelEstimate(1000, 50.0), Observation(100, 20.0))
    assert math.isfinite(est.rate_Bps) and est.rate_Bps > 0


def test_estimate_validation():
    with pytest.raises(ControllerError):
        update_estimate(ChannelEstimate(), Observation(100, 0.0))
    with pytest.raises(ConfigError):
        ChannelEstimate(alpha=0.0)


def test_table_validation_and_csv(tmp_path, measured_table):
    assert len(measured_table) == 16
    assert measured_table.max_size == 4
    broken = PerfTable({ConfigPoint(1, 1): PerfEntry(1, 1, 10, 1.0), ConfigPoint(2, 1): PerfEntry(1, 1, 11, 1.0)})
    with pytest.raises(ControllerError):
        broken.validate()
    with pytest.raises(ControllerError):
        PerfTable({ConfigPoint(1, 1): PerfEntry(1, 1, 10, math.nan)}).validate()

    path = str(tmp_path / 'perf.csv')
    measured_table.save_csv(path)
    reloaded = PerfTable.load_csv(path)
    assert reloaded.points() == measured_table.points()
    assert reloaded[ConfigPoint(4, 4)].metric == 36.8
    with pytest.raises(ConfigError):
        PerfTable.load_csv(str(tmp_path / 'missing.csv'))


def test_perf_report_overrides_decode_times():
    table = load_desk_table()
    table.update_decode_times({(1, 1): 42.0, (9, 9): 1.0})
    assert table[ConfigPoint(1, 1)].decode_ms == 42.0
    assert table[ConfigPoint(1, 2)].decode_ms == 60.0
    assert ConfigPoint(9, 9) not in table


class ConstantChannelEdge:
    """Stand-in edge whose network time follows a fixed rate and delay"""

    def __init__(self, table, rate_Bps, delay_ms, fail_at=None, timed_legs=False):
        self.table, self.rate, self.delay = table, rate_Bps, delay_ms
        self.fail_at = fail_at
        self.timed_legs = timed_legs
        self.seq = 0

    def run_frame(self, cfg):
        if self.fail_at is not None and self.seq == self.fail_at:
            raise SessionClosedError("peer went away", self.seq - 1)
        entry = self.table[cfg]
        nbytes = entry.payload_bytes + HEADER_BYTES + RESULT_BYTES
        network = nbytes / self.rate * 1000 + 2 * self.delay
        outcome = FrameOutcome(self.seq, entry.encode_ms + entry.decode_ms + network, network, nbytes)
        if self.timed_legs:
            outcome.uplink_bytes = entry.payload_bytes + HEADER_BYTES
            outcome.uplink_ms = outcome.uplink_bytes / self.rate * 1000 + self.delay
        self.seq += 1
        return outcome


def _controller(table, deadline, rate):
    return AdaptationController(table, deadline_ms=deadline, prior_rate_Bps=rate, prior_delay_ms=10.0,
                                result_bytes=RESULT_BYTES, overhead_bytes=HEADER_BYTES)


def test_constant_channel_gives_constant_choice():
    table = load_desk_table()
    controller = _controller(table, 400, 150000 / 36)
    decisions = [record for record, _ in control_loop(ConstantChannelEdge(table, 150000 / 36, 10.0), controller, 50)]
    assert len({(r.s, r.b) for r in decisions}) == 1
    assert all(r.measured_rtt_ms <= 400 for r in decisions)
    assert decisions[-1].rate_est_Bps == pytest.approx(150000 / 36)


def test_unbounded_deadline_picks_best_metric():
    table = load_desk_table()
    controller = _controller(table, math.inf, 1000.0)
    decisions = [record for record, _ in control_loop(ConstantChannelEdge(table, 1000.0, 10.0), controller, 5)]
    assert {(r.s, r.b) for r in decisions} == {(4, 4)}


def test_session_loss_ends_loop_and_saves_state(tmp_path):
    table = load_desk_table()
    controller = _controller(table, 400, 5000.0)
    state_path = str(tmp_path / 'state.json')
    edge = ConstantChannelEdge(table, 5000.0, 10.0, fail_at=2)
    assert len(list(control_loop(edge, controller, 10, state_path))) == 2
    with open(state_path) as f:
        state = json.load(f)
    assert state['decisions'] == 2
    assert state['current'] is not None


def test_decide_needs_a_rate():
    with pytest.raises(ControllerError):
        AdaptationController(load_desk_table()).decide()


def test_decision_log_is_jsonl(tmp_path):
    table = load_desk_table()
    controller = _controller(table, 400, 5000.0)
    list(control_loop(ConstantChannelEdge(table, 5000.0, 10.0), controller, 3))
    path = str(tmp_path / 'decisions.jsonl')
    controller.write_decision_log(path)
    with open(path) as f:
        rows = [json.loads(line) for line in f]
    assert [r['seq'] for r in rows] == [0, 1, 2]
    assert set(rows[0]) == {'seq', 's', 'b', 'predicted_rtt_ms', 'measured_rtt_ms', 'rate_est_Bps', 'deadline_ms'}


def test_leg_delay_worked_example():
    # 1000 B/s, 40 ms each way: 234 B up in 274 ms, 85 B down in 125 ms
    assert leg_delay(319, 399.0, 234, 274.0) == pytest.approx(40.0)
    assert leg_delay(319, 399.0, 85, 125.0) == pytest.approx(40.0)


def test_leg_delay_needs_distinct_leg_sizes():
    assert leg_delay(170, 250.0, 90, 130.0) is None
    assert leg_delay(319, 399.0, 319, 399.0) is None
    assert leg_delay(319, 399.0, 234, 100.0) is None


def test_delay_estimate_converges_to_the_channel():
    """Timed legs move the delay estimate off a wrong prior"""
    table = load_desk_table()
    rate = 150000 / 36
    controller = AdaptationController(table, deadline_ms=400, prior_rate_Bps=rate, prior_delay_ms=0.0,
                                      result_bytes=RESULT_BYTES, overhead_bytes=HEADER_BYTES)
    edge = ConstantChannelEdge(table, rate, 35.0, timed_legs=True)
    for _ in control_loop(edge, controller, 20):
        pass
    assert controller.estimate.delay_ms == pytest.approx(35.0)
    assert controller.estimate.rate_Bps == pytest.approx(rate)


def test_untimed_legs_keep_the_prior_delay():
    table = load_desk_table()
    controller = _controller(table, 400, 150000 / 36)
    for _ in control_loop(ConstantChannelEdge(table, 150000 / 36, 35.0), controller, 5):
        pass
    assert controller.estimate.delay_ms == 10.0


def test_one_straddling_frame_does_not_move_the_delay():
    """A frame whose legs saw different rates is outvoted by its neighbours"""
    controller = _controller(load_desk_table(), 400, 1000.0)
    cfg = ConfigPoint(1, 1)
    for seq in range(3):
        controller.observe(FrameOutcome(seq, 450.0, 399.0, 319, uplink_ms=274.0, uplink_bytes=234), cfg, 450.0)
    assert controller.estimate.delay_ms == pytest.approx(40.0)
    assert leg_delay(319, 399.0, 234, 350.0) == 0.0
    controller.observe(FrameOutcome(3, 450.0, 399.0, 319, uplink_ms=350.0, uplink_bytes=234), cfg, 450.0)
    assert controller.estimate.delay_ms == pytest.approx(40.0)
