#!/usr/bin/env python3
"""
Adaptive Run Validation
Scores a dynamic run summary against weighted quality criteria
"""

import json
import math
import os
from datetime import datetime
from typing import Dict, List, Tuple

from split_errors import ConfigError


class AdaptationRunValidator:
    def __init__(self, max_switch_lag_frames: int = 3, pass_score: float = 75):
        self.max_switch_lag_frames = max_switch_lag_frames
        self.pass_score = pass_score
        self.criteria = {
            'deadline_compliance': {
                'weight': 40,
                'min_threshold': 90,  # % of post-warmup frames within the deadline
                'description': 'Percentage of frames whose measured RTT met the deadline'
            },
            'switch_responsiveness': {
                'weight': 25,
                'min_threshold': 50,  # % of oracle changes followed quickly by a switch
                'description': 'Percentage of channel-driven changes answered within the lag budget'
            },
            'bandwidth_first': {
                'weight': 20,
                'min_threshold': 100,
                'description': 'Bit-depth changes at least as frequent as ensemble-size changes'
            },
            'metric_vs_distance': {
                'weight': 15,
                'min_threshold': 100,
                'description': 'Average chosen metric near the server exceeds the far average'
            }
        }

    def validate_run(self, summary: Dict, scenario: str = "") -> Dict:
        """Validate a dynamic-run summary (as written by the harness)"""

        if not summary or not summary.get('frames'):
            return {
                'overall_score': 0,
                'passed': False,
                'frames': 0,
                'errors': ['No frames to validate']
            }

        report = {
            'scenario': scenario,
            'timestamp': datetime.now().isoformat(),
            'frames': summary['frames'],
            'criteria_scores': {},
            'overall_score': 0,
            'passed': False,
            'recommendations': []
        }

        total_weighted_score = 0
        total_weight = 0
        for criterion, config in self.criteria.items():
            score, details = self._evaluate_criterion(criterion, summary)
            report['criteria_scores'][criterion] = {
                'score': score,
                'threshold': config['min_threshold'],
                'weight': config['weight'],
                'passed': score >= config['min_threshold'],
                'details': details
            }
            total_weighted_score += score * config['weight']
            total_weight += config['weight']

        report['overall_score'] = total_weighted_score / total_weight if total_weight > 0 else 0
        report['passed'] = report['overall_score'] >= self.pass_score
        report['recommendations'] = self._generate_recommendations(report)
        return report

    def _evaluate_criterion(self, criterion: str, summary: Dict) -> Tuple[float, Dict]:
        if criterion == 'deadline_compliance':
            miss = summary.get('miss_fraction', 1.0)
            score = (1.0 - miss) * 100
            details = {
                'miss_fraction': miss,
                'deadline_ms': summary.get('deadline_ms'),
                'warmup_frames': summary.get('warmup_frames', 0)
            }

        elif criterion == 'switch_responsiveness':
            lags = summary.get('switch_lags', [])
            quick = sum(1 for lag in lags if lag <= self.max_switch_lag_frames)
            # nothing to react to counts as responsive
            score = (quick / len(lags)) * 100 if lags else 100
            details = {
                'oracle_changes': len(lags),
                'within_budget': quick,
                'max_lag': max(lags) if lags else 0,
                'lag_budget': self.max_switch_lag_frames
            }

        elif criterion == 'bandwidth_first':
            b_changes, s_changes = summary.get('b_changes', 0), summary.get('s_changes', 0)
            score = 100 if b_changes >= s_changes else (b_changes / s_changes) * 100
            details = {'b_changes': b_changes, 's_changes': s_changes}

        elif criterion == 'metric_vs_distance':
            near, far = summary.get('metric_near', math.nan), summary.get('metric_far', math.nan)
            if math.isnan(near) or math.isnan(far):
                score = 0
            else:
                score = 100 if near > far else 0
            details = {'metric_near': near, 'metric_far': far}

        else:
            score = 0
            details = {'error': f'Unknown criterion: {criterion}'}

        return score, details

    def _generate_recommendations(self, report: Dict) -> List[str]:
        recommendations = []

        for criterion, results in report['criteria_scores'].items():
            if results['passed']:
                continue
            details = results['details']
            if criterion == 'deadline_compliance':
                recommendations.append(
                    f"❌ Deadline misses on {details['miss_fraction']:.1%} of frames. "
                    f"Raise the feasibility margin or the EWMA alpha so the estimate tracks the channel faster."
                )
            elif criterion == 'switch_responsiveness':
                recommendations.append(
                    f"❌ Slow reaction: {details['within_budget']}/{details['oracle_changes']} channel changes "
                    f"answered within {details['lag_budget']} frames (worst {details['max_lag']})."
                )
            elif criterion == 'bandwidth_first':
                recommendations.append(
                    f"⚠️  Ensemble size changed {details['s_changes']} times but bit depth only "
                    f"{details['b_changes']} times. Check the performance table's encode times."
                )
            elif criterion == 'metric_vs_distance':
                recommendations.append(
                    "⚠️  Chosen metric does not fall with distance; the walk may not span enough of the rate range."
                )

        if not recommendations:
            recommendations.append("✅ All quality criteria passed! Adaptation is working well.")
        return recommendations

    def print_report(self, report: Dict):
        print("\n" + "=" * 60)
        print("🔍 ADAPTATION RUN REPORT")
        print("=" * 60)
        print(f"Scenario: {report.get('scenario', '')}")
        print(f"Frames: {report['frames']}")
        print(f"Overall Score: {report['overall_score']:.1f}/100")
        print(f"Status: {'✅ PASSED' if report['passed'] else '❌ FAILED'}")
        print()

        if report.get('criteria_scores'):
            print("📊 CRITERIA BREAKDOWN:")
            for criterion, results in report['criteria_scores'].items():
                status = "✅" if results['passed'] else "❌"
                print(f"  {status} {criterion}: {results['score']:.1f}% (need {results['threshold']}%)")
            print()

        if report.get('recommendations'):
            print("💡 RECOMMENDATIONS:")
            for rec in report['recommendations']:
                print(f"  {rec}")
        print("=" * 60)


def validate_summary_file(filepath: str, validator: AdaptationRunValidator = None) -> Dict:
    """Validate the summary JSON written next to a dynamic run's logs"""
    validator = validator or AdaptationRunValidator()
    try:
        with open(filepath, 'r') as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read run summary {filepath}: {e}")
    return validator.validate_run(data.get('results', {}), os.path.basename(filepath))
