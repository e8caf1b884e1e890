#!/usr/bin/env python3
"""
Tests for the simulated link: transfer times, traces, walk profiles and the
virtual-clock transport
"""

import pytest

from link_simulator import (ChannelModel, SimulatedLink, VirtualClock, bytes_deliverable,
                            distance_to_rate, load_trace_csv, load_walk_csv, serialization_ms,
                            transfer_time, walk_profile, write_trace_csv, write_walk_csv)
from split_config import repo_path
from split_errors import ConfigError


def test_constant_rate_transfer_times():
    assert transfer_time(6912, ChannelModel.constant(80000, 20)) == pytest.approx(106.4)
    assert transfer_time(27648, ChannelModel.constant(200000, 20)) == pytest.approx(158.24)


def test_zero_bytes_costs_only_the_delay():
    assert transfer_time(0, ChannelModel.constant(80000, 20)) == 20.0


def test_negative_bytes_rejected():
    with pytest.raises(ValueError):
        serialization_ms(-1, ChannelModel.constant(1000), 0.0)


def test_transfer_straddling_a_breakpoint():
    channel = ChannelModel.from_trace([(0, 1000), (1000, 500)])
    assert serialization_ms(1500, channel, 0.0) == pytest.approx(2000.0)
    assert serialization_ms(500, channel, 1000.0) == pytest.approx(1000.0)
    assert bytes_deliverable(channel, 0, 2000) == pytest.approx(1500.0)
    assert bytes_deliverable(channel, 5, 5) == 0.0


def test_rate_at_holds_ends_of_trace():
    channel = ChannelModel.from_trace([(100, 1000), (200, 500)])
    assert channel.rate_at(0) == 1000
    assert channel.rate_at(150) == 1000
    assert channel.rate_at(200) == 500
    assert channel.rate_at(10 ** 6) == 500


def test_rate_scale_applies_everywhere():
    channel = ChannelModel.constant(36000, 0, rate_scale=1 / 36)
    assert channel.rate_at(0) == pytest.approx(1000.0)
    assert transfer_time(1000, channel) == pytest.approx(1000.0)


def test_channel_validation():
    with pytest.raises(ConfigError):
        ChannelModel.constant(0)
    with pytest.raises(ConfigError):
        ChannelModel.constant(1000, -1)
    with pytest.raises(ConfigError):
        ChannelModel.from_trace([(0, 1000), (0, 500)])
    with pytest.raises(ConfigError):
        ChannelModel.from_trace([])
    with pytest.raises(ConfigError):
        ChannelModel.from_dict({'rate_Bps': 1000, 'bandwidth': 5})


def test_distance_to_rate_interpolates_anchors():
    assert distance_to_rate(1) == 200000
    assert distance_to_rate(2) == pytest.approx(175000)
    assert distance_to_rate(9) == 80000
    assert distance_to_rate(20) == 80000
    with pytest.raises(ConfigError):
        distance_to_rate(-1)


def test_walk_profile_endpoints():
    channel = walk_profile([(0, 1), (8000, 9)])
    assert channel.rate_at(0) == 200000
    assert channel.rate_at(2000) == pytest.approx(150000)
    assert channel.rate_at(8000) == 80000
    assert channel.delay_ms == 10.0
    rates = [rate for _, rate in channel.trace]
    assert rates == sorted(rates, reverse=True)


def test_walk_profile_rejects_bad_schedules():
    with pytest.raises(ConfigError):
        walk_profile([])
    with pytest.raises(ConfigError):
        walk_profile([(0, 1), (0, 3)])
    with pytest.raises(ConfigError):
        walk_profile([(0, -1), (10, 3)])


def test_trace_and_walk_csv_files(tmp_path):
    trace_path = str(tmp_path / 'trace.csv')
    write_trace_csv(trace_path, ChannelModel.from_trace([(0, 200000), (5000, 80000)]))
    loaded = load_trace_csv(trace_path, delay_ms=5)
    assert loaded.trace == [(0.0, 200000.0), (5000.0, 80000.0)]
    assert loaded.delay_ms == 5

    walk_path = str(tmp_path / 'walk.csv')
    write_walk_csv(walk_path, [(0, 1), (1000, 9)])
    assert load_walk_csv(walk_path) == [(0.0, 1.0), (1000.0, 9.0)]
    with pytest.raises(ConfigError):
        load_trace_csv(walk_path)
    with pytest.raises(ConfigError):
        load_walk_csv(str(tmp_path / 'missing.csv'))


def test_shipped_walk_scenario_loads():
    schedule = load_walk_csv(repo_path('scenarios/walk_1_to_9m.csv'))
    assert schedule[0][1] == 1.0
    assert max(d for _, d in schedule) == 9.0


def test_virtual_clock_only_moves_forward():
    clock = VirtualClock(5.0)
    clock.advance(2.5)
    assert clock.now_ms() == 7.5
    assert clock.now_us() == 7500
    clock.advance_to(3.0)
    assert clock.now_ms() == 7.5
    with pytest.raises(ValueError):
        clock.advance(-1)


def test_simulated_link_timing():
    link = SimulatedLink(ChannelModel.constant(80000, 20), VirtualClock())
    link.edge_end.send(b'x' * 6912)
    link.edge_end.send(b'y' * 6912)
    first, second = link.transfers
    assert first.arrival_ms == pytest.approx(106.4)
    assert second.start_ms == pytest.approx(86.4)
    assert second.arrival_ms == pytest.approx(192.8)

    assert link.server_end.recv() == b'x' * 6912
    assert link.clock.now_ms() == pytest.approx(106.4)


def test_directions_do_not_block_each_other():
    link = SimulatedLink(ChannelModel.constant(1000, 0), VirtualClock())
    link.edge_end.send(b'a' * 1000)
    link.server_end.send(b'b' * 1000)
    up, down = link.transfers
    assert up.start_ms == down.start_ms == 0.0
    assert link.edge_end.last_transfer.duration_ms == pytest.approx(1000.0)


def test_jitter_is_seeded_and_bounded():
    def durations(seed):
        link = SimulatedLink(ChannelModel.constant(1000, 0, seed=seed, jitter_pct=10), VirtualClock())
        for _ in range(20):
            link.edge_end.send(b'z' * 100)
        return [t.duration_ms for t in link.transfers]

    assert durations(3) == durations(3)
    assert durations(3) != durations(4)
    assert all(90.0 <= d <= 110.0 for d in durations(3))


def test_transfer_history_is_bounded():
    """Long sessions keep only the most recent transfers"""
    link = SimulatedLink(ChannelModel.constant(1000000, 0), VirtualClock(), history=8)
    for i in range(50):
        link.edge_end.send(bytes([i]) * 10)
    assert len(link.transfers) == 8
    assert link.transfers[-1] is link.edge_end.last_transfer
    assert link.transfers[0].start_ms == pytest.approx(42 * 0.01)
