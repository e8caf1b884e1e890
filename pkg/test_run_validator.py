#!/usr/bin/env python3
"""
Tests for dynamic-run scoring
"""

import json
import math

import pytest

from run_validator import AdaptationRunValidator, validate_summary_file
from split_errors import ConfigError

GOOD = {
    'frames': 100, 'warmup_frames': 10, 'deadline_ms': 400.0, 'miss_fraction': 0.02,
    'switch_lags': [1, 2], 'b_changes': 5, 's_changes': 1, 'metric_near': 34.0, 'metric_far': 25.0,
}


def test_empty_summary_scores_zero():
    report = AdaptationRunValidator().validate_run({})
    assert report['overall_score'] == 0
    assert not report['passed']
    assert report['errors']


def test_good_run_passes():
    report = AdaptationRunValidator().validate_run(GOOD, 'walk')
    assert report['overall_score'] == pytest.approx(99.2)
    assert report['passed']
    assert all(c['passed'] for c in report['criteria_scores'].values())
    assert report['recommendations'][0].startswith('✅')


def test_failing_criteria_get_recommendations():
    bad = dict(GOOD, miss_fraction=0.5, switch_lags=[5, 1], b_changes=1, s_changes=4, metric_near=math.nan)
    report = AdaptationRunValidator().validate_run(bad)
    assert report['overall_score'] == pytest.approx(37.5)
    assert not report['passed']
    assert len(report['recommendations']) == 4
    assert report['criteria_scores']['switch_responsiveness']['details']['max_lag'] == 5


def test_lag_budget_is_configurable():
    summary = dict(GOOD, switch_lags=[4, 4])
    assert not AdaptationRunValidator().validate_run(summary)['criteria_scores']['switch_responsiveness']['passed']
    relaxed = AdaptationRunValidator(max_switch_lag_frames=4)
    assert relaxed.validate_run(summary)['criteria_scores']['switch_responsiveness']['score'] == 100


def test_no_oracle_changes_counts_as_responsive():
    report = AdaptationRunValidator().validate_run(dict(GOOD, switch_lags=[]))
    assert report['criteria_scores']['switch_responsiveness']['score'] == 100


def test_validate_summary_file(tmp_path, capsys):
    path = tmp_path / 'walk_summary.json'
    path.write_text(json.dumps({'timestamp': 'now', 'results': GOOD}))
    validator = AdaptationRunValidator()
    report = validate_summary_file(str(path), validator)
    assert report['passed']
    assert report['scenario'] == 'walk_summary.json'
    validator.print_report(report)
    assert 'ADAPTATION RUN REPORT' in capsys.readouterr().out

    broken = tmp_path / 'broken.json'
    broken.write_text('{not json')
    with pytest.raises(ConfigError):
        validate_summary_file(str(broken))
    with pytest.raises(ConfigError):
        validate_summary_file(str(tmp_path / 'missing.json'))
