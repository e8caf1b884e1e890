#!/usr/bin/env python3
"""
Split Server - Status API
Flask API exposing server health, the decoder performance table and live sessions
"""

from dataclasses import asdict
from datetime import datetime

from flask import Flask, jsonify
from flask_cors import CORS

from adaptation_controller import ConfigPoint
from split_errors import ControllerError


def create_app(server) -> Flask:
    """Status API bound to a running SplitServer"""
    app = Flask(__name__)
    CORS(app)

    @app.route('/api/health', methods=['GET'])
    def health_check():
        """Health check endpoint"""
        model = server.model
        return jsonify({
            'status': 'healthy',
            'timestamp': datetime.now().isoformat(),
            'max_size': model.max_size,
            'input_size': model.meta.input_size,
            'bottleneck_shape': list(model.bottleneck_shape()),
            'trained': bool(model.meta.trained),
            'sigma_mode': server.sigma_mode,
            'uptime_s': round(datetime.now().timestamp() - server.started_at, 3)
        })

    @app.route('/api/perf', methods=['GET'])
    def get_perf_table():
        """Per-configuration timings the edge uses for its decisions"""
        entries = [dict(s=cfg.s, b=cfg.b, **asdict(server.table[cfg])) for cfg in server.table.points()]
        return jsonify({
            'success': True,
            'totalConfigs': len(entries),
            'entries': entries
        })

    @app.route('/api/perf/<int:s>/<int:b>', methods=['GET'])
    def get_perf_entry(s, b):
        """One performance table row"""
        try:
            entry = server.table[ConfigPoint(s, b)]
        except ControllerError as e:
            return jsonify({'error': str(e), 'success': False}), 404
        return jsonify({'success': True, 's': s, 'b': b, **asdict(entry)})

    @app.route('/api/sessions', methods=['GET'])
    def get_sessions():
        """Sessions served so far, open ones first"""
        sessions = sorted((dict(info) for info in list(server.sessions.values())),
                          key=lambda info: (not info['open'], info['id']))
        return jsonify({
            'success': True,
            'openSessions': sum(1 for info in sessions if info['open']),
            'totalFrames': sum(info['frames'] for info in sessions),
            'sessions': sessions
        })

    @app.errorhandler(404)
    def not_found(error):
        """Handle 404 errors"""
        return jsonify({'error': 'Endpoint not found', 'success': False}), 404

    @app.errorhandler(500)
    def internal_error(error):
        """Handle 500 errors"""
        return jsonify({'error': 'Internal server error', 'success': False}), 500

    return app
