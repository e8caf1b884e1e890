#!/usr/bin/env python3
"""
Tests for ensemble slimmable training: sandwich sampling, the noise
regularizer, Adam, the learning-rate schedule and small end-to-end runs
"""

import json
import math
import os

import numpy as np
import pytest

from model_checkpoint import save_checkpoint
from quant_codec import quantize_roundtrip
from slimmable_training import (AdamOptimizer, TrainConfig, adam_update, build_model, evaluate_distillation,
                                evaluate_task_metric, init_state, lr_schedule, mse_loss, regularize_noise,
                                sample_sizes, straight_through, train, train_step)
from split_errors import ConfigError, NonFiniteLossError, ShapeError
from tensor_ops import Graph, Tensor, add, mean
from toy_dataset import make_datasets

SLOW = os.environ.get('SLIMSPLIT_SLOW_TESTS') == '1'


def _tiny_config(**overrides):
    settings = dict(max_size=2, sizes_per_step=2, epochs=1, batch_size=2, num_samples=4, val_samples=2,
                    input_size=32, seed=2, learning_rate=0.005)
    settings.update(overrides)
    return TrainConfig(**settings)


def test_sandwich_always_includes_both_ends():
    rng = np.random.default_rng(0)
    for _ in range(50):
        sizes = sample_sizes(4, 4, rng)
        assert sizes[:2] == [1, 4]
        assert len(sizes) == 4
        assert all(1 <= s <= 4 for s in sizes)
    assert sample_sizes(3, 2, rng) == [1, 3]
    with pytest.raises(ConfigError):
        sample_sizes(4, 1, rng)


def test_noise_width_halves_with_ensemble_size():
    z = Tensor(np.zeros((6, 8, 8)))
    rng = np.random.default_rng(1)
    for s in (1, 2, 3, 4):
        noise = regularize_noise(z, s, rng).data
        assert np.abs(noise).max() <= 2.0 ** -s
        assert np.abs(noise).max() > 0.5 * 2.0 ** -s
    with pytest.raises(ConfigError):
        regularize_noise(z, 0, rng)


def test_straight_through_forward_quantizes_backward_passes():
    rng = np.random.default_rng(2)
    z = Tensor(rng.normal(size=(2, 6, 4, 4)), requires_grad=True)
    with Graph() as graph:
        out = straight_through(z, 2)
        loss = mean(out)
    assert np.allclose(out.data[1], quantize_roundtrip(z.data[1], 2))
    assert np.allclose(graph.backward(loss)[z], 1.0 / z.size)


def test_adam_first_step_moves_by_learning_rate():
    params = [np.array([1.0, -2.0])]
    grads = [np.array([0.5, -3.0])]
    moments = ([np.zeros(2)], [np.zeros(2)])
    new_params, (first, second) = adam_update(params, grads, moments, 1, 0.1)
    assert np.allclose(new_params[0], [0.9, -1.9], atol=1e-6)
    assert np.allclose(first[0], [0.05, -0.3])
    assert np.allclose(second[0], [0.00025, 0.009])
    with pytest.raises(ValueError):
        adam_update(params, grads, moments, 0, 0.1)


def test_optimizer_treats_missing_gradients_as_zero():
    a = Tensor(np.ones(3), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)
    optimizer = AdamOptimizer([a, b])
    optimizer.step([np.ones(3), None], 0.1)
    assert np.allclose(a.data, 0.9, atol=1e-6)
    assert np.array_equal(b.data, np.ones(3))
    assert optimizer.t == 1


def test_lr_halves_every_period():
    config = TrainConfig(learning_rate=0.05, lr_halving_period_epochs=5)
    assert [lr_schedule(e, config) for e in (0, 4, 5, 10)] == [0.05, 0.05, 0.025, 0.0125]
    flat = TrainConfig(learning_rate=0.05, lr_halving_period_epochs=math.inf)
    assert lr_schedule(100, flat) == 0.05


def test_config_validation_and_defaults():
    assert TrainConfig.from_dict({'epochs': 2}).epochs == 2
    assert TrainConfig.from_dict().max_size == 4
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({'epoch': 2})
    with pytest.raises(ConfigError):
        TrainConfig(sizes_per_step=1)
    with pytest.raises(ConfigError):
        TrainConfig(input_size=48)
    with pytest.raises(ConfigError):
        TrainConfig(ste_bits=9)


def test_mse_loss_needs_matching_points():
    maps = [Tensor(np.ones((2, 2)))]
    assert mse_loss(maps, [Tensor(np.zeros((2, 2)))]).item() == 1.0
    with pytest.raises(ShapeError):
        mse_loss(maps, maps + maps)


def test_train_step_updates_every_weight():
    config = _tiny_config(regularize=False)
    model = build_model(config)
    state = init_state(model, config)
    before = [p.data.copy() for p in model.trainable_parameters()]
    images = make_datasets(2, 0, 32, seed=5)[0].images
    loss = train_step(state, images, config)
    assert math.isfinite(loss) and loss > 0
    assert state.step == 1
    assert state.last_sizes == [1, 2]
    changed = {p.name for b, p in zip(before, model.trainable_parameters()) if not np.array_equal(b, p.data)}
    weights = {p.name for p in model.trainable_parameters() if p.name.endswith(".weight")}
    assert weights <= changed


def test_non_finite_loss_is_reported():
    config = _tiny_config()
    model = build_model(config)
    model.reconstructor.parameters()[0].data[:] = np.nan
    images = make_datasets(2, 0, 32, seed=5)[0].images
    with np.errstate(invalid='ignore'):
        with pytest.raises(NonFiniteLossError) as info:
            train_step(init_state(model, config), images, config)
    assert info.value.size == 1


def test_tiny_training_run_writes_step_log(tmp_path):
    log_path = str(tmp_path / 'train.jsonl')
    model, history = train(_tiny_config(log_path=log_path), verbose=False)
    assert model.meta.trained == 1
    assert len(history['epochs']) == 1
    assert 0.0 <= history['task_head_train_accuracy'] <= 1.0
    with open(log_path) as f:
        records = [json.loads(line) for line in f]
    assert [r['step'] for r in records] == [1, 2]
    assert all(r['sampled_sizes'] == [1, 2] for r in records)
    _, val = make_datasets(4, 2, 32, seed=2)
    assert 0.0 <= evaluate_task_metric(model, val, 2, 3) <= 1.0


@pytest.mark.skipif(not SLOW, reason="set SLIMSPLIT_SLOW_TESTS=1")
def test_repeated_steps_halve_distillation_loss():
    config = _tiny_config(regularize=False, max_size=1)
    model = build_model(config)
    state = init_state(model, config)
    images = make_datasets(4, 0, 32, seed=6)[0].images
    before = evaluate_distillation(model, images, 1)
    for _ in range(200):
        train_step(state, images, config)
    assert evaluate_distillation(model, images, 1) < 0.5 * before


def test_train_step_runs_each_member_once(monkeypatch):
    """Sampled sizes share one forward pass per member"""
    config = _tiny_config(max_size=3, sizes_per_step=4)
    model = build_model(config)
    calls = []
    for i, member in enumerate(model.encoder.members):
        def counted(x, taps=None, _forward=member.forward, _i=i):
            calls.append(_i)
            return _forward(x, taps)
        monkeypatch.setattr(member, 'forward', counted)
    state = init_state(model, config)
    train_step(state, make_datasets(2, 0, 32, seed=5)[0].images, config)
    assert len(state.last_sizes) == 4
    assert sorted(calls) == [0, 1, 2]


def test_shared_member_gradients_match_one_graph(monkeypatch):
    """The gradient handed to Adam equals that of the summed loss over fresh encodes"""
    config = _tiny_config(regularize=False)
    model = build_model(config)
    state = init_state(model, config)
    images = make_datasets(2, 0, 32, seed=5)[0].images
    params = model.trainable_parameters()

    x = Tensor(images)
    targets = model.teacher.forward(x)
    with Graph() as graph:
        total = None
        for s in (1, 2):
            loss = mse_loss(model.decode(model.encode(x, s)), targets)
            total = loss if total is None else add(total, loss)
    reference = graph.backward(total)
    expected = [reference[p].copy() for p in params]
    for p in params:
        p.zero_grad()

    captured = []
    monkeypatch.setattr(state.optimizer, 'step', lambda grads, lr: captured.append(grads))
    train_step(state, images, config)
    assert len(captured) == 1
    for p, want, got in zip(params, expected, captured[0]):
        assert got is not None, p.name
        assert np.allclose(got, want, atol=1e-10), p.name


def test_train_step_leaves_the_teacher_untouched():
    config = _tiny_config()
    model = build_model(config)
    before = [p.data.tobytes() for p in model.teacher.parameters()]
    train_step(init_state(model, config), make_datasets(2, 0, 32, seed=5)[0].images, config)
    assert [p.data.tobytes() for p in model.teacher.parameters()] == before


def test_zero_learning_rate_changes_nothing():
    config = _tiny_config()
    model = build_model(config)
    before = [p.data.copy() for p in model.trainable_parameters()]
    train_step(init_state(model, config), make_datasets(2, 0, 32, seed=5)[0].images, config, lr=0.0)
    assert all(np.array_equal(b, p.data) for b, p in zip(before, model.trainable_parameters()))


def test_middle_sizes_are_uniform():
    """Chi-square over the random draws stays under the 0.1% critical value for 3 dof"""
    rng = np.random.default_rng(21)
    draws = np.concatenate([sample_sizes(4, 4, rng)[2:] for _ in range(4000)])
    counts = np.bincount(draws, minlength=5)[1:]
    expected = len(draws) / 4
    assert ((counts - expected) ** 2 / expected).sum() < 16.27


def test_noise_has_uniform_moments():
    z = Tensor(np.zeros((200, 1000)))
    for s in (1, 3):
        noise = regularize_noise(z, s, np.random.default_rng(s)).data
        bound = 2.0 ** -s
        assert abs(noise.mean()) < 0.01 * bound
        assert noise.var() == pytest.approx(bound ** 2 / 3, rel=0.02)


def test_same_seed_gives_identical_checkpoints(tmp_path):
    """Two runs with one seed write byte-identical checkpoint files"""
    paths = []
    for name in ('a.ckpt', 'b.ckpt'):
        model, _ = train(_tiny_config(seed=1), verbose=False)
        path = str(tmp_path / name)
        save_checkpoint(model, path)
        paths.append(path)
    with open(paths[0], 'rb') as f, open(paths[1], 'rb') as g:
        assert f.read() == g.read()
