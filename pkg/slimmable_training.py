#!/usr/bin/env python3
"""
Ensemble slimmable training

Each step distills the student at several ensemble sizes against the frozen
teacher: always the smallest (1) and the largest (N), plus S-2 random sizes
(the sandwich rule). Quantization is replaced during training by uniform
noise whose width shrinks with the ensemble size. Losses of all sampled
sizes are summed and one Adam step is taken per batch.
"""

import json
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from quant_codec import quantize_roundtrip
from slimmable_model import SplitModel, TaskHead
from split_config import check_keys, section
from split_errors import ConfigError, NonFiniteLossError, ShapeError
from tensor_ops import Graph, Tensor, add, add_constant, mse
from toy_dataset import ToyDataset, make_datasets

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    sizes_per_step: int = 4
    max_size: int = 4
    epochs: int = 5
    learning_rate: float = 0.05
    lr_halving_period_epochs: float = 5
    batch_size: int = 16
    seed: int = 1
    regularize: bool = True
    ste_bits: int = 0
    num_samples: int = 2000
    val_samples: int = 200
    input_size: int = 64
    num_classes: int = 4
    log_path: Optional[str] = None

    def __post_init__(self):
        if self.sizes_per_step < 2:
            raise ConfigError(f"sizes_per_step must be at least 2 (sandwich rule), got {self.sizes_per_step}")
        if self.max_size < 1:
            raise ConfigError(f"max_size must be positive, got {self.max_size}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be positive and epochs non-negative")
        if self.input_size % 32:
            raise ConfigError(f"input_size must be a multiple of 32, got {self.input_size}")
        if not 0 <= self.ste_bits <= 8:
            raise ConfigError(f"ste_bits must be in [0, 8], got {self.ste_bits}")

    @classmethod
    def from_dict(cls, data: Optional[Dict] = None) -> 'TrainConfig':
        merged = dict(section('training'))
        if data:
            check_keys(data, [f.name for f in fields(cls)], "training")
            merged.update(data)
        return cls(**merged)


@dataclass
class TrainState:
    model: SplitModel
    optimizer: 'AdamOptimizer'
    rng: np.random.Generator
    step: int = 0
    epoch: int = 0
    last_sizes: List[int] = field(default_factory=list)


def mse_loss(r: Sequence[Tensor], r_prime: Sequence[Tensor]) -> Tensor:
    """Sum over distillation points of the per-element mean squared error"""
    if len(r) != len(r_prime) or not r:
        raise ShapeError("distillation point count mismatch", len(r_prime), len(r))
    total = None
    for student, teacher in zip(r, r_prime):
        term = mse(student, teacher)
        total = term if total is None else add(total, term)
    return total


def sample_sizes(n: int, s: int, rng: np.random.Generator) -> List[int]:
    """Sandwich rule: [1, N] plus S-2 uniform draws from 1..N"""
    if s < 2:
        raise ConfigError(f"need at least 2 sizes per step, got {s}")
    if n < 1:
        raise ConfigError(f"max ensemble size must be positive, got {n}")
    return [1, n] + [int(v) for v in rng.integers(1, n + 1, size=s - 2)]


def regularize_noise(z: Tensor, s: int, rng: np.random.Generator) -> Tensor:
    """z + U(-2^-s, 2^-s), the training stand-in for quantize/dequantize"""
    if s < 1:
        raise ConfigError(f"ensemble size must be at least 1, got {s}")
    bound = 2.0 ** -s
    return add_constant(z, rng.uniform(-bound, bound, size=z.shape))


def straight_through(z: Tensor, bits: int) -> Tensor:
    """Hard quantization forward, identity gradient; σ is per sample as on the wire"""
    values = z.data
    if values.ndim == 4:
        rounded = np.stack([quantize_roundtrip(sample, bits) for sample in values])
    else:
        rounded = quantize_roundtrip(values, bits)
    return add_constant(z, rounded - values)


def adam_update(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
                moments: Tuple[Sequence[np.ndarray], Sequence[np.ndarray]], t: int, lr: float,
                beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2, eps: float = ADAM_EPS):
    """One bias-corrected Adam step; returns (new params, (m, v))"""
    if t < 1:
        raise ValueError(f"Adam step counter starts at 1, got {t}")
    first, second = moments
    new_params, new_first, new_second = [], [], []
    for p, g, m, v in zip(params, grads, first, second):
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        new_params.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
        new_first.append(m)
        new_second.append(v)
    return new_params, (new_first, new_second)


class AdamOptimizer:
    def __init__(self, params: Sequence[Tensor], beta1: float = ADAM_BETA1,
                 beta2: float = ADAM_BETA2, eps: float = ADAM_EPS):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.first = [np.zeros_like(p.data) for p in self.params]
        self.second = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads: Sequence[Optional[np.ndarray]], lr: float):
        """Apply one update; a None gradient counts as zero"""
        self.t += 1
        grads = [np.zeros_like(p.data) if g is None else g for p, g in zip(self.params, grads)]
        new_params, (self.first, self.second) = adam_update(
            [p.data for p in self.params], grads, (self.first, self.second), self.t, lr,
            self.beta1, self.beta2, self.eps)
        for tensor, value in zip(self.params, new_params):
            tensor.data = value
            tensor.zero_grad()


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    """lr0 · 0.5^floor(epoch / period); a non-finite or non-positive period keeps lr0"""
    period = config.lr_halving_period_epochs
    if period is None or not math.isfinite(period) or period <= 0:
        return config.learning_rate
    return config.learning_rate * 0.5 ** math.floor(epoch / period)


def _training_bottleneck(z: Tensor, s: int, config: TrainConfig, rng) -> Tensor:
    if config.regularize:
        return regularize_noise(z, s, rng)
    if config.ste_bits:
        return straight_through(z, config.ste_bits)
    return z


def train_step(state: TrainState, images: np.ndarray, config: TrainConfig, lr: Optional[float] = None) -> float:
    """Distill at the sampled sizes, sum the losses, take one Adam step; returns the summed loss.

    The members run once per step and every sampled size combines a prefix
    of their outputs. Each size gets its own recorded decoder graph, so only
    one decoder pass is held in memory at a time; gradients reaching the
    member outputs are summed over sizes and then pushed through the members.
    """
    model = state.model
    lr = lr_schedule(state.epoch, config) if lr is None else lr
    x = Tensor(images)
    targets = model.teacher.forward(x)
    params = model.trainable_parameters()
    sizes = sample_sizes(model.max_size, config.sizes_per_step, state.rng)

    with Graph() as encoder_graph:
        members = model.encoder.member_outputs(x, max(sizes))
    shared = [Tensor(out.data, requires_grad=True) for out in members]
    member_grads: List[Optional[np.ndarray]] = [None] * len(shared)

    accumulated: Dict[int, np.ndarray] = {}

    def collect(grads):
        for p in params:
            if p in grads:
                key = id(p)
                accumulated[key] = grads[p] if key not in accumulated else accumulated[key] + grads[p]

    total = 0.0
    for s in sizes:
        with Graph() as graph:
            z = model.encoder.combine(shared[:s])
            loss = mse_loss(model.decode(_training_bottleneck(z, s, config, state.rng)), targets)
        value = loss.item()
        if not math.isfinite(value):
            raise NonFiniteLossError(s, value)
        total += value
        grads = graph.backward(loss)
        collect(grads)
        for i, leaf in enumerate(shared[:s]):
            member_grads[i] = grads[leaf] if member_grads[i] is None else member_grads[i] + grads[leaf]

    for out, grad in zip(members, member_grads):
        if grad is not None:
            collect(encoder_graph.backward(out, grad))

    state.optimizer.step([accumulated.get(id(p)) for p in params], lr)
    state.step += 1
    state.last_sizes = sizes
    return total


def _feature_batches(images: np.ndarray, batch_size: int):
    for start in range(0, len(images), batch_size):
        yield Tensor(images[start:start + batch_size])


def _bottleneck_eval(model: SplitModel, x: Tensor, s: int, bits: Optional[int]) -> Tensor:
    z = model.encode(x, s)
    if not bits:
        return z
    return Tensor(np.stack([quantize_roundtrip(sample, bits) for sample in z.data]))


def evaluate_distillation(model: SplitModel, images: np.ndarray, s: int,
                          bits: Optional[int] = None, batch_size: int = 16) -> float:
    """Validation distillation loss at size s, optionally hard-quantized per frame"""
    total, count = 0.0, 0
    for x in _feature_batches(images, batch_size):
        targets = model.teacher.forward(x)
        loss = mse_loss(model.decode(_bottleneck_eval(model, x, s, bits)), targets).item()
        total += loss * x.shape[0]
        count += x.shape[0]
    return total / count


def fit_task_head(model: SplitModel, dataset: ToyDataset, epochs: Optional[int] = None,
                  lr: Optional[float] = None, batch_size: int = 16) -> float:
    """Train the classifier head on teacher features; returns its training accuracy"""
    settings = section('model')
    epochs = settings['task_head_epochs'] if epochs is None else epochs
    lr = settings['task_head_lr'] if lr is None else lr
    features = np.concatenate([TaskHead.features(model.teacher.forward(x))
                               for x in _feature_batches(dataset.images, batch_size)])
    return model.task_head.fit(features, dataset.labels, epochs, lr)


def evaluate_task_metric(model: SplitModel, dataset: ToyDataset, s: int, bits: Optional[int],
                         batch_size: int = 16) -> float:
    """Task head accuracy on student features decoded from a (s, b) bottleneck"""
    features = np.concatenate([
        TaskHead.features(model.decode(_bottleneck_eval(model, x, s, bits)))
        for x in _feature_batches(dataset.images, batch_size)])
    return model.task_head.accuracy(features, dataset.labels)


def build_model(config: TrainConfig) -> SplitModel:
    settings = section('model')
    return SplitModel.build(max_size=config.max_size, seed=config.seed, input_size=config.input_size,
                            num_classes=config.num_classes, teacher_width=settings['teacher_width'],
                            teacher_stem_width=settings['teacher_stem_width'])


def init_state(model: SplitModel, config: TrainConfig) -> TrainState:
    return TrainState(model, AdamOptimizer(model.trainable_parameters()), np.random.default_rng([config.seed, 11]))


def train(config: TrainConfig, datasets: Optional[Tuple[ToyDataset, ToyDataset]] = None,
          verbose: bool = True) -> Tuple[SplitModel, Dict]:
    """Full training run; returns the trained model and a history record"""
    train_set, val_set = datasets or make_datasets(config.num_samples, config.val_samples,
                                                   config.input_size, config.num_classes, config.seed)
    model = build_model(config)
    state = init_state(model, config)
    shuffle_rng = np.random.default_rng([config.seed, 13])

    history = {"config": asdict(config), "initial_val_loss": evaluate_distillation(model, val_set.images, model.max_size),
               "epochs": []}
    if verbose:
        print(f"🚀 Training N={config.max_size} S={config.sizes_per_step} on {len(train_set)} samples "
              f"({config.epochs} epochs, regularize={config.regularize})")
        print(f"📊 Initial validation loss: {history['initial_val_loss']:.4f}")

    log = open(config.log_path, 'w') if config.log_path else None
    try:
        for epoch in range(config.epochs):
            state.epoch = epoch
            lr = lr_schedule(epoch, config)
            for images, _ in train_set.batches(config.batch_size, shuffle_rng):
                loss = train_step(state, images, config, lr)
                if log:
                    record = {"step": state.step, "epoch": epoch, "lr": lr,
                              "sampled_sizes": state.last_sizes, "loss": loss}
                    log.write(json.dumps(record) + "\n")
            val_loss = evaluate_distillation(model, val_set.images, model.max_size)
            history["epochs"].append({"epoch": epoch, "lr": lr, "val_loss": val_loss})
            if verbose:
                print(f"✅ Epoch {epoch + 1}/{config.epochs}: lr={lr:g} val_loss={val_loss:.4f}")
    finally:
        if log:
            log.close()

    history["task_head_train_accuracy"] = fit_task_head(model, train_set, batch_size=config.batch_size)
    model.meta.trained = 1
    if verbose:
        print(f"📊 Task head training accuracy: {history['task_head_train_accuracy']:.3f}")
    return model, history
