#!/usr/bin/env python3
"""
Tests for the edge/server runtime: pipelines, RTT breakdowns on the
simulated link, adaptation under a rate step and a real TCP session
"""

import csv
import os
import threading
import time
from dataclasses import asdict

import numpy as np
import pytest

import split_runtime
from adaptation_controller import ConfigPoint, config_space, leg_delay, load_desk_table
from eval_harness import run_dynamic
from link_simulator import ChannelModel, VirtualClock
from slimmable_model import SplitModel
from split_errors import ConfigError, ProtocolError
from split_runtime import (BREAKDOWN_COLUMNS, EdgeClient, FrameSource, LoopbackSimulation, ModeledTimer,
                           RunConfig, SplitServer, edge_pipeline, fit_table_to_model, link_scale,
                           result_frame_bytes, run_simulation, server_pipeline, write_breakdown_csv)
from toy_dataset import make_datasets
from wire_protocol import (STATUS_BAD_PAYLOAD, STATUS_INVARIANT, STATUS_OK, LoopbackTransport, ResultMessage,
                           SocketTransport, StreamSession, data_header)

SLOW = os.environ.get('SLIMSPLIT_SLOW_TESTS') == '1'


@pytest.fixture(scope='module')
def model():
    return SplitModel.build(max_size=4, seed=3, input_size=32)


@pytest.fixture(scope='module')
def table(model):
    return fit_table_to_model(model, load_desk_table())


@pytest.fixture(scope='module')
def images():
    return list(make_datasets(0, 4, 32, seed=9)[1].images)


def _scaled_channel(model, rate=200000.0, delay=10.0):
    return ChannelModel.constant(rate, delay, rate_scale=link_scale(int(np.prod(model.bottleneck_shape()))))


def test_link_scale_and_result_size():
    assert link_scale(1536) == pytest.approx(1 / 36)
    assert link_scale(55296) == 1.0
    assert result_frame_bytes(4) == 85


def test_table_is_fitted_to_the_bottleneck(model, table):
    assert table[ConfigPoint(1, 1)].payload_bytes == 48
    assert table[ConfigPoint(3, 4)].payload_bytes == 192
    assert table[ConfigPoint(2, 2)].encode_ms == 156.0
    with pytest.raises(ConfigError):
        fit_table_to_model(SplitModel.build(max_size=2, input_size=32), load_desk_table())


def test_payload_sizes_at_desk_resolution():
    big = SplitModel.build(max_size=1, input_size=64)
    x = make_datasets(0, 1, 64)[1].images[0]
    assert len(edge_pipeline(big, x, ConfigPoint(1, 1)).payload) == 192
    assert len(edge_pipeline(big, x, ConfigPoint(1, 4)).payload) == 768


def test_edge_pipeline_builds_a_valid_data_frame(model, images):
    encoded = edge_pipeline(model, images[0], ConfigPoint(2, 3), seq=4)
    header = encoded.header
    assert (header.seq, header.s, header.b) == (4, 2, 3)
    assert header.dims == (6, 8, 8)
    assert header.payload_len == len(encoded.payload) == 144
    assert header.sigma == float(np.float32(header.sigma))


def test_server_pipeline_matches_in_process_inference(model, images):
    for cfg in (ConfigPoint(1, 1), ConfigPoint(4, 4)):
        encoded = edge_pipeline(model, images[1], cfg)
        result = server_pipeline(model, encoded.header, encoded.payload)
        assert result.status == STATUS_OK
        assert result.decoder_time_us >= 1
        wire = np.array(result.result, dtype=np.float32).astype(np.float64)
        assert np.allclose(wire, model.infer(images[1], cfg.s, cfg.b), atol=1e-9)


def test_server_pipeline_reports_bad_frames(model):
    zeros = b'\x00' * 96
    too_big = data_header(0, 5, 2, (6, 8, 8), 1.0)
    assert server_pipeline(model, too_big, zeros).status == STATUS_INVARIANT
    wrong_channels = data_header(1, 1, 2, (4, 8, 8), 1.0)
    assert server_pipeline(model, wrong_channels, b'\x00' * 64).status == STATUS_INVARIANT
    short = data_header(2, 1, 2, (6, 8, 8), 1.0)
    result = server_pipeline(model, short, zeros[:5])
    assert result.status == STATUS_BAD_PAYLOAD
    assert result.result == ()
    assert server_pipeline(model, short, zeros).status == STATUS_OK


def test_modeled_timer_splits_encode_time(table):
    clock = VirtualClock()
    timer = ModeledTimer(table, clock, quantize_pack_ms=1.0)
    cfg = ConfigPoint(1, 1)
    assert timer.modeled_ms("encode", cfg) == 77.0
    assert timer.modeled_ms("quantize_pack", cfg) == 1.0
    assert timer.modeled_ms("decode", cfg) == 60.0
    value, ms = timer.run("encode", cfg, lambda: "done")
    assert (value, ms, clock.now_ms()) == ("done", 77.0, 77.0)
    with pytest.raises(ValueError):
        timer.modeled_ms("upload", cfg)


def test_breakdown_components_add_up(model, table, images):
    with LoopbackSimulation(model, table, _scaled_channel(model), FrameSource(images)) as sim:
        for _ in range(3):
            sim.edge.run_frame(ConfigPoint(1, 2))
        assert sim.server.sessions[0]['frames'] == 3
    for row in sim.edge.breakdowns:
        assert row.encode_ms == 77.0
        assert row.quantize_pack_ms == 1.0
        assert row.decode_ms == 60.0
        assert row.uplink_ms == pytest.approx(109.36)
        assert row.downlink_ms == pytest.approx(71.2)
        assert row.total_ms == pytest.approx(318.76)
        assert abs(row.component_sum - row.total_ms) < 1e-6
        assert row.metric == 27.7


def test_loopback_results_match_in_process_inference(model, table, images):
    cfg = ConfigPoint(3, 2)
    with LoopbackSimulation(model, table, _scaled_channel(model), FrameSource(images)) as sim:
        sim.edge.run_frame(cfg)
    result = sim.edge.results[0]
    assert result.status == STATUS_OK
    assert np.allclose(result.result, model.infer(images[0], cfg.s, cfg.b), atol=1e-9)


def test_breakdown_csv_columns(tmp_path, model, table, images):
    with LoopbackSimulation(model, table, _scaled_channel(model), FrameSource(images)) as sim:
        sim.edge.run_frame(ConfigPoint(1, 1))
    path = str(tmp_path / 'breakdown.csv')
    write_breakdown_csv(path, sim.edge.breakdowns)
    with open(path, newline='') as f:
        rows = list(csv.reader(f))
    assert tuple(rows[0]) == BREAKDOWN_COLUMNS
    assert rows[1][:3] == ['0', '1', '1']


def test_simulation_is_deterministic(model, table):
    run = RunConfig(frames=6, warmup_frames=0)
    channel = ChannelModel.constant(150000, 10)
    first, _, _ = run_simulation(model, run, channel, table, verbose=False)
    second, _, _ = run_simulation(model, run, channel, table, verbose=False)
    assert [asdict(r) for r in first] == [asdict(r) for r in second]
    assert len(first) == 6


def test_rate_step_triggers_a_quick_switch(model, table):
    run = RunConfig(frames=30, warmup_frames=0, deadline_ms=400)
    channel = ChannelModel.from_trace([(0, 200000), (6000, 80000)], delay_ms=10)
    result = run_dynamic(model, run, table=table, channel=channel, verbose=False)
    assert result.chosen[0] == ConfigPoint(1, 4)
    assert result.oracle[-1] == ConfigPoint(1, 1)
    lags = result.switch_lags()
    assert lags and max(lags) <= 3
    b_changes, s_changes = result.switch_counts()
    assert b_changes >= 1 and s_changes == 0
    assert result.chosen[-1] == ConfigPoint(1, 1)


def test_run_config_defaults_and_validation():
    run = RunConfig.from_dict()
    assert run.frames == 200
    assert run.channel['rate_Bps'] == 200000.0
    assert run.channel_model(1536).rate_at(0) == pytest.approx(200000 / 36)
    assert RunConfig.from_dict({'full_scale_link': False}).channel_model(1536).rate_scale == 1.0
    with pytest.raises(ConfigError):
        RunConfig.from_dict({'frame': 3})
    with pytest.raises(ConfigError):
        RunConfig(role='client')
    with pytest.raises(ConfigError):
        RunConfig(timing='sampled')


def test_frame_source_cycles(images):
    source = FrameSource(images[:2])
    picked = [source.next() for _ in range(3)]
    assert picked[2] is images[0]
    with pytest.raises(ConfigError):
        FrameSource([])
    assert len(FrameSource.from_run(RunConfig(), 32, count=5).images) == 5


def test_server_perf_report_covers_table(model, table):
    report = SplitServer(model, table, verbose=False).perf_report()
    assert len(report.entries) == 16
    assert report.entries[0] == (1, 1, 60000)


def test_unreachable_server_is_a_protocol_error():
    with pytest.raises(ProtocolError):
        EdgeClient.fetch_health("http://127.0.0.1:9", timeout=0.5)


def test_fetch_health_reads_the_status_api(monkeypatch):
    calls = []

    class FakeResponse:
        def raise_for_status(self):
            pass

        def json(self):
            return {'status': 'healthy', 'max_size': 4}

    def fake_get(url, timeout):
        calls.append((url, timeout))
        return FakeResponse()

    monkeypatch.setattr(split_runtime.requests, 'get', fake_get)
    assert EdgeClient.fetch_health("http://server:8080/", timeout=2.0)['max_size'] == 4
    assert calls == [("http://server:8080/api/health", 2.0)]


def test_tcp_session_end_to_end(model, table, images):
    server = SplitServer(model, table, verbose=False)
    thread = threading.Thread(target=server.serve_tcp, args=("127.0.0.1", 0, 1), daemon=True)
    thread.start()
    deadline = time.monotonic() + 5
    while server._listener is None and time.monotonic() < deadline:
        time.sleep(0.01)
    port = server._listener.getsockname()[1]

    session = StreamSession(SocketTransport.connect("127.0.0.1", port, timeout=10), "edge", model.max_size)
    edge = EdgeClient(model, session, FrameSource(images), fit_table_to_model(model, load_desk_table()))
    report = edge.fetch_perf_report()
    assert len(report.entries) == 16
    outcome = edge.run_frame(ConfigPoint(2, 3))
    edge.close()
    thread.join(timeout=10)

    assert outcome.seq == 0
    assert edge.results[0].status == STATUS_OK
    assert np.allclose(edge.results[0].result, model.infer(images[0], 2, 3), atol=1e-9)
    assert server.sessions[0]['frames'] == 1
    assert server.sessions[0]['last_config'] == [2, 3]
    assert not server.sessions[0]['open']


def test_simulated_outcomes_carry_timed_legs(model, table, images):
    """The uplink leg timing recovers the channel delay"""
    with LoopbackSimulation(model, table, _scaled_channel(model, delay=40.0), FrameSource(images)) as sim:
        outcome = sim.edge.run_frame(ConfigPoint(1, 4))
    assert outcome.uplink_bytes == 234
    assert outcome.network_bytes == 234 + 85
    assert leg_delay(outcome.network_bytes, outcome.network_ms, outcome.uplink_bytes,
                     outcome.uplink_ms) == pytest.approx(40.0)


def _serve_loopback(model, table):
    server = SplitServer(model, table, verbose=False)
    edge_t, server_t = LoopbackTransport.pair()
    thread = threading.Thread(target=server.handle_session,
                              args=(StreamSession(server_t, "server", model.max_size),), daemon=True)
    thread.start()
    return server, StreamSession(edge_t, "edge", model.max_size), thread


def test_perf_request_refreshes_edge_decode_times(model, table, images):
    """A PERF_REQUEST mid-session brings the edge table back to the server's decoder times"""
    server, session, thread = _serve_loopback(model, table)
    edge_table = fit_table_to_model(model, load_desk_table())
    edge = EdgeClient(model, session, FrameSource(images), edge_table)
    edge.fetch_perf_report()
    edge.run_frame(ConfigPoint(1, 1))
    edge_table.update_decode_times({(1, 1): 5.0, (4, 4): 5.0})
    report = edge.request_perf_report()
    outcome = edge.run_frame(ConfigPoint(2, 2))
    edge.close()
    thread.join(timeout=10)

    assert len(report.entries) == 16
    assert edge_table[ConfigPoint(1, 1)].decode_ms == 60.0
    assert edge_table[ConfigPoint(4, 4)].decode_ms == table[ConfigPoint(4, 4)].decode_ms
    assert outcome.seq == 2
    assert server.sessions[0]['perf_requests'] == 1
    assert server.sessions[0]['frames'] == 2


def test_server_drops_a_session_on_unexpected_messages(model, table):
    server, session, thread = _serve_loopback(model, table)
    session.recv()
    session.send_result(ResultMessage(0, 0, 0, 1, (0.0,)))
    thread.join(timeout=10)
    assert not server.sessions[0]['open']
    assert server.sessions[0]['frames'] == 0


@pytest.mark.parametrize("rounds", [2, pytest.param(100, marks=pytest.mark.skipif(not SLOW, reason="set SLIMSPLIT_SLOW_TESTS=1"))])
def test_every_configuration_matches_in_process_inference(model, table, images, rounds):
    """Edge plus server over the link agree with local inference for all 16 (s, b) over repeated frames"""
    configs = config_space(4, 4)
    with LoopbackSimulation(model, table, _scaled_channel(model), FrameSource(images)) as sim:
        for _ in range(rounds):
            for cfg in configs:
                sim.edge.run_frame(cfg)
    assert len(sim.edge.results) == 16 * rounds
    for k, result in enumerate(sim.edge.results):
        cfg = configs[k % 16]
        assert result.status == STATUS_OK
        expected = model.infer(images[k % len(images)], cfg.s, cfg.b)
        assert np.allclose(result.result, expected, atol=1e-9), (k, cfg)
