#!/usr/bin/env python3
"""
Tests for the server status API
"""

import pytest

from adaptation_controller import ConfigPoint, load_desk_table
from backend_api import create_app
from link_simulator import ChannelModel
from slimmable_model import SplitModel
from split_runtime import FrameSource, LoopbackSimulation, fit_table_to_model
from toy_dataset import make_datasets


@pytest.fixture(scope='module')
def served():
    model = SplitModel.build(max_size=4, seed=3, input_size=32)
    table = fit_table_to_model(model, load_desk_table())
    frames = FrameSource(make_datasets(0, 2, 32)[1].images)
    with LoopbackSimulation(model, table, ChannelModel.constant(200000, 10), frames) as sim:
        sim.edge.run_frame(ConfigPoint(1, 2))
        sim.edge.run_frame(ConfigPoint(2, 2))
    return sim.server


@pytest.fixture
def client(served):
    app = create_app(served)
    app.config['TESTING'] = True
    return app.test_client()


def test_health(client):
    data = client.get('/api/health').get_json()
    assert data['status'] == 'healthy'
    assert data['max_size'] == 4
    assert data['bottleneck_shape'] == [6, 8, 8]
    assert data['trained'] is False
    assert data['sigma_mode'] == 'side_info'


def test_perf_table(client):
    data = client.get('/api/perf').get_json()
    assert data['success']
    assert data['totalConfigs'] == 16
    first = data['entries'][0]
    assert (first['s'], first['b'], first['payload_bytes']) == (1, 1, 48)


def test_perf_entry(client):
    response = client.get('/api/perf/2/3')
    assert response.status_code == 200
    data = response.get_json()
    assert data['encode_ms'] == 156.0
    assert data['payload_bytes'] == 144


def test_missing_perf_entry_is_404(client):
    response = client.get('/api/perf/9/9')
    assert response.status_code == 404
    assert response.get_json()['success'] is False


def test_sessions(client):
    data = client.get('/api/sessions').get_json()
    assert data['openSessions'] == 0
    assert data['totalFrames'] == 2
    assert data['sessions'][0]['last_config'] == [2, 2]


def test_unknown_route_returns_json(client):
    response = client.get('/api/nothing')
    assert response.status_code == 404
    assert response.get_json() == {'error': 'Endpoint not found', 'success': False}
