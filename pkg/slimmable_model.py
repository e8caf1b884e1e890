#!/usr/bin/env python3
"""
Slimmable ensemble encoder, reconstructor and the frozen teacher

The edge runs the first s of N identical encoders and sums their outputs
with weights 1, 1/2, 1/4, ... The server expands the bottleneck back with a
much larger reconstructor and a student head whose three outputs are
matched against the teacher's feature maps at strides 8, 16 and 32.
"""

import hashlib
import json
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from quant_codec import dequantize, quantize, SIDE_INFO
from split_errors import ModelError, ModelSpecError, ShapeError
from tensor_ops import (LayerParams, Tensor, add, conv2d, instance_norm, scale,
                        silu, transpose_conv2d)

CONV2D = "Conv2D"
FUSED_MBCONV = "Fused-MBConv"
FUSED_MBCONVT = "Fused-MBConvT"
OPERATORS = (CONV2D, FUSED_MBCONV, FUSED_MBCONVT)


@dataclass(frozen=True)
class BlockSpec:
    operator: str
    channels: int
    stride: int = 1
    kernel: int = 3
    skip: bool = False
    expansion: int = 1

    def validate(self, in_channels: int, where: str = "block"):
        if self.operator not in OPERATORS:
            raise ModelSpecError(f"{where}: unknown operator {self.operator!r}")
        if min(self.channels, self.stride, self.kernel, self.expansion) < 1:
            raise ModelSpecError(f"{where}: channels, stride, kernel and expansion must be positive")
        if self.skip:
            if self.operator == CONV2D:
                raise ModelSpecError(f"{where}: a plain Conv2D stage has no residual path")
            if self.stride != 1 or in_channels != self.channels:
                raise ModelSpecError(
                    f"{where}: skip needs stride 1 and matching channels "
                    f"(stride {self.stride}, {in_channels} -> {self.channels})")


# Encoder stages: stem, two SR1 blocks, three SR6 blocks. Residuals are kept
# only where the block preserves shape.
ENCODER_SPEC = (
    BlockSpec(CONV2D, 6, stride=2, kernel=3),
    BlockSpec(FUSED_MBCONV, 4, stride=1, kernel=3, skip=False, expansion=1),
    BlockSpec(FUSED_MBCONV, 4, stride=1, kernel=3, skip=True, expansion=1),
    BlockSpec(FUSED_MBCONV, 6, stride=2, kernel=3, skip=False, expansion=6),
    BlockSpec(FUSED_MBCONV, 6, stride=1, kernel=3, skip=True, expansion=6),
    BlockSpec(FUSED_MBCONV, 6, stride=1, kernel=3, skip=False, expansion=6),
)

RECONSTRUCTOR_SPEC = (
    BlockSpec(FUSED_MBCONV, 48, stride=1, kernel=1, skip=False, expansion=6),
    BlockSpec(FUSED_MBCONV, 48, stride=1, kernel=3, skip=True, expansion=6),
    BlockSpec(FUSED_MBCONVT, 48, stride=2, kernel=3, skip=False, expansion=6),
    BlockSpec(FUSED_MBCONV, 48, stride=1, kernel=3, skip=True, expansion=6),
    BlockSpec(FUSED_MBCONV, 24, stride=1, kernel=3, skip=False, expansion=6),
)

# Reconstructor output sits at stride 2; four stride-2 blocks reach 8/16/32
STUDENT_HEAD_SPEC = (
    BlockSpec(FUSED_MBCONV, 32, stride=2, kernel=3),
    BlockSpec(FUSED_MBCONV, 32, stride=2, kernel=3),
    BlockSpec(FUSED_MBCONV, 32, stride=2, kernel=3),
    BlockSpec(FUSED_MBCONV, 32, stride=2, kernel=3),
)
STUDENT_TAPS = (1, 2, 3)

TEACHER_STRIDES = (8, 16, 32)


def ensemble_weights(n: int) -> np.ndarray:
    """1, 1/2, 1/4, ... for members 1..n"""
    return np.array([0.5 ** i for i in range(n)])


def _conv_params(rng, out_channels, in_channels, kernel, stride, name, trainable=True,
                 transposed=False) -> LayerParams:
    std = np.sqrt(2.0 / (in_channels * kernel * kernel))
    shape = (in_channels, out_channels, kernel, kernel) if transposed else (out_channels, in_channels, kernel, kernel)
    weights = Tensor(rng.normal(0.0, std, size=shape), requires_grad=trainable, name=f"{name}.weight")
    bias = Tensor(np.zeros(out_channels), requires_grad=trainable, name=f"{name}.bias")
    return LayerParams(weights, bias, stride=stride, kernel=kernel, padding=kernel // 2,
                       output_padding=stride - 1 if transposed else 0, transposed=transposed)


class ConvStage:
    """conv -> instance norm -> SiLU"""

    def __init__(self, spec: BlockSpec, in_channels: int, rng, name: str, trainable: bool = True):
        self.spec = spec
        self.conv = _conv_params(rng, spec.channels, in_channels, spec.kernel, spec.stride, f"{name}.conv", trainable)

    def __call__(self, x: Tensor) -> Tensor:
        return silu(instance_norm(conv2d(x, self.conv)))

    def parameters(self) -> List[Tensor]:
        return self.conv.tensors()


class FusedMBConv:
    """K×K expand conv (transposed for the T variant) -> SiLU -> 1×1 project -> instance norm [+ x]"""

    def __init__(self, spec: BlockSpec, in_channels: int, rng, name: str, trainable: bool = True):
        self.spec = spec
        hidden = spec.expansion * in_channels
        self.transposed = spec.operator == FUSED_MBCONVT
        self.expand = _conv_params(rng, hidden, in_channels, spec.kernel, spec.stride, f"{name}.expand",
                                   trainable, transposed=self.transposed)
        self.project = _conv_params(rng, spec.channels, hidden, 1, 1, f"{name}.project", trainable)

    def __call__(self, x: Tensor) -> Tensor:
        expand = transpose_conv2d if self.transposed else conv2d
        y = instance_norm(conv2d(silu(expand(x, self.expand)), self.project))
        return add(y, x) if self.spec.skip else y

    def parameters(self) -> List[Tensor]:
        return self.expand.tensors() + self.project.tensors()


class Network:
    """Sequential stack of blocks built from a BlockSpec list"""

    def __init__(self, spec: Sequence[BlockSpec], in_channels: int, seed, name: str, trainable: bool = True):
        if not spec:
            raise ModelSpecError(f"{name}: empty block spec")
        rng = np.random.default_rng(seed)
        self.spec = tuple(spec)
        self.name = name
        self.in_channels = in_channels
        self.blocks = []
        channels = in_channels
        self.scale = 1.0
        for i, block_spec in enumerate(self.spec):
            where = f"{name}.stage{i + 1}"
            block_spec.validate(channels, where)
            block_cls = ConvStage if block_spec.operator == CONV2D else FusedMBConv
            self.blocks.append(block_cls(block_spec, channels, rng, where, trainable))
            channels = block_spec.channels
            if block_spec.operator == FUSED_MBCONVT:
                self.scale *= block_spec.stride
            else:
                self.scale /= block_spec.stride
        self.out_channels = channels

    def __call__(self, x: Tensor, taps: Optional[Sequence[int]] = None):
        return self.forward(x, taps)

    def forward(self, x: Tensor, taps: Optional[Sequence[int]] = None):
        """Output of the last block, or of the blocks listed in `taps`"""
        channels = x.shape[-3] if len(x.shape) >= 3 else None
        if channels != self.in_channels:
            raise ShapeError(f"{self.name} input has wrong channel count", self.in_channels, x.shape)
        tapped = []
        for i, block in enumerate(self.blocks):
            x = block(x)
            if taps is not None and i in taps:
                tapped.append(x)
        return tapped if taps is not None else x

    def parameters(self) -> List[Tensor]:
        return [t for block in self.blocks for t in block.parameters()]

    @property
    def param_count(self) -> int:
        return sum(t.size for t in self.parameters())

    @property
    def stride(self) -> float:
        return 1.0 / self.scale


def build_encoder(spec: Sequence[BlockSpec] = ENCODER_SPEC, seed=0, in_channels: int = 3,
                  name: str = "encoder") -> Network:
    return Network(spec, in_channels, seed, name)


def build_reconstructor(spec: Sequence[BlockSpec] = RECONSTRUCTOR_SPEC, seed=0, in_channels: int = 6,
                        name: str = "reconstructor") -> Network:
    return Network(spec, in_channels, seed, name)


class EnsembleEncoder:
    """N encoders of identical architecture; size s activates the first s"""

    def __init__(self, members: Sequence):
        if not members:
            raise ModelSpecError("ensemble needs at least one member")
        self.members = list(members)
        self.weights = ensemble_weights(len(self.members))

    @classmethod
    def build(cls, n: int, seed: int = 0, spec: Sequence[BlockSpec] = ENCODER_SPEC) -> 'EnsembleEncoder':
        return cls([build_encoder(spec, seed=[seed, i], name=f"encoder.{i}") for i in range(n)])

    @property
    def size(self) -> int:
        return len(self.members)

    def check_size(self, s: int):
        if not isinstance(s, (int, np.integer)) or not 1 <= s <= self.size:
            raise ModelError(f"ensemble size s={s} outside [1, {self.size}]")

    def member_outputs(self, x: Tensor, s: int) -> List[Tensor]:
        self.check_size(s)
        return [member.forward(x) for member in self.members[:s]]

    def combine(self, outputs: Sequence[Tensor]) -> Tensor:
        """Σ 2^-(i-1) · f_i, built left to right so f_s = f_{s-1} + 2^-(s-1) f_s"""
        total = outputs[0]
        for i, out in enumerate(outputs[1:], start=1):
            total = add(total, scale(out, float(self.weights[i])))
        return total

    def forward(self, x: Tensor, s: int) -> Tensor:
        return self.combine(self.member_outputs(x, s))

    def parameters(self) -> List[Tensor]:
        return [t for member in self.members for t in member.parameters()]

    @property
    def member_param_count(self) -> int:
        return self.members[0].param_count


def ensemble_forward(enc: EnsembleEncoder, x: Tensor, s: int) -> Tensor:
    return enc.forward(x, s)


class Teacher:
    """Frozen, seeded random-weight CNN standing in for the detector backbone.

    Stem of two stride-2 conv/IN/SiLU stages, then three stride-2 conv/IN
    stages whose outputs are the distillation points (strides 8, 16, 32).
    """

    def __init__(self, seed: int = 0, width: int = 32, stem_width: int = 16, in_channels: int = 3):
        rng = np.random.default_rng([seed, 200])
        self.seed = seed
        self.width = width
        self.in_channels = in_channels
        self.stem = [
            _conv_params(rng, stem_width, in_channels, 3, 2, "teacher.stem1", trainable=False),
            _conv_params(rng, width, stem_width, 3, 2, "teacher.stem2", trainable=False),
        ]
        self.stages = [_conv_params(rng, width, width, 3, 2, f"teacher.p{i + 3}", trainable=False)
                       for i in range(3)]

    def forward(self, x: Tensor) -> List[Tensor]:
        height, width = x.shape[-2:]
        if x.shape[-3] != self.in_channels or height % 32 or width % 32:
            raise ShapeError("teacher input must have 3 channels and sides divisible by 32",
                             f"({self.in_channels}, 32k, 32k)", x.shape)
        for params in self.stem:
            x = silu(instance_norm(conv2d(x, params)))
        maps = []
        for i, params in enumerate(self.stages):
            if i:
                x = silu(x)
            x = instance_norm(conv2d(x, params))
            maps.append(x)
        return maps

    def parameters(self) -> List[Tensor]:
        return [t for p in self.stem + self.stages for t in p.tensors()]


def teacher_forward(t: Teacher, x: Tensor) -> List[Tensor]:
    return t.forward(x)


def build_student_head(seed=0, in_channels: int = 24, spec: Sequence[BlockSpec] = STUDENT_HEAD_SPEC) -> Network:
    return Network(spec, in_channels, seed, "head")


def student_decode(rec: Network, head: Network, z_tilde: Tensor) -> List[Tensor]:
    """Reconstructor then student head; three maps shaped like the teacher's"""
    if z_tilde.shape[-3] != rec.in_channels:
        raise ShapeError("bottleneck channel count does not match reconstructor", rec.in_channels, z_tilde.shape)
    return head.forward(rec.forward(z_tilde), taps=STUDENT_TAPS)


class TaskHead:
    """Softmax regression over per-channel means of the three feature maps"""

    def __init__(self, in_features: int = 96, num_classes: int = 4):
        self.weights = np.zeros((num_classes, in_features))
        self.bias = np.zeros(num_classes)
        self.feature_mean = np.zeros(in_features)
        self.feature_std = np.ones(in_features)

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    @staticmethod
    def features(maps: Sequence[Tensor]) -> np.ndarray:
        pooled = [m.data.mean(axis=(-2, -1)) for m in maps]
        return np.concatenate(pooled, axis=-1)

    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        logits = ((features - self.feature_mean) / self.feature_std) @ self.weights.T + self.bias
        logits = logits - logits.max(axis=-1, keepdims=True)
        exp = np.exp(logits)
        return exp / exp.sum(axis=-1, keepdims=True)

    def fit(self, features: np.ndarray, labels: np.ndarray, epochs: int = 300, lr: float = 0.5) -> float:
        """Full-batch gradient descent on cross-entropy; returns final training accuracy"""
        self.feature_mean = features.mean(axis=0)
        self.feature_std = features.std(axis=0) + 1e-8
        onehot = np.eye(self.num_classes)[labels]
        normalized = (features - self.feature_mean) / self.feature_std
        for _ in range(epochs):
            probs = self.predict_proba(features)
            delta = (probs - onehot) / len(labels)
            self.weights -= lr * delta.T @ normalized
            self.bias -= lr * delta.sum(axis=0)
        return self.accuracy(features, labels)

    def accuracy(self, features: np.ndarray, labels: np.ndarray) -> float:
        return float((self.predict_proba(features).argmax(axis=-1) == labels).mean())

    def state(self) -> Dict[str, np.ndarray]:
        return {"task.weight": self.weights, "task.bias": self.bias,
                "task.feature_mean": self.feature_mean, "task.feature_std": self.feature_std}

    def load_state(self, state: Dict[str, np.ndarray]):
        self.weights = np.array(state["task.weight"])
        self.bias = np.array(state["task.bias"])
        self.feature_mean = np.array(state["task.feature_mean"])
        self.feature_std = np.array(state["task.feature_std"])


@dataclass
class ModelMeta:
    max_size: int = 4
    seed: int = 1
    input_size: int = 64
    num_classes: int = 4
    teacher_width: int = 32
    teacher_stem_width: int = 16
    trained: int = 0


class SplitModel:
    """Everything on both sides of the split, plus the teacher it was distilled from"""

    def __init__(self, meta: ModelMeta):
        self.meta = meta
        seed = meta.seed
        self.encoder = EnsembleEncoder.build(meta.max_size, seed)
        self.reconstructor = build_reconstructor(seed=[seed, 100], in_channels=ENCODER_SPEC[-1].channels)
        self.head = build_student_head(seed=[seed, 101], in_channels=RECONSTRUCTOR_SPEC[-1].channels)
        self.teacher = Teacher(seed, meta.teacher_width, meta.teacher_stem_width)
        self.task_head = TaskHead(3 * STUDENT_HEAD_SPEC[-1].channels, meta.num_classes)

    @classmethod
    def build(cls, **kwargs) -> 'SplitModel':
        return cls(ModelMeta(**kwargs))

    @property
    def max_size(self) -> int:
        return self.meta.max_size

    def bottleneck_shape(self, input_size: Optional[int] = None) -> Tuple[int, int, int]:
        side = (input_size or self.meta.input_size) // 4
        return (ENCODER_SPEC[-1].channels, side, side)

    def trainable_parameters(self) -> List[Tensor]:
        return self.encoder.parameters() + self.reconstructor.parameters() + self.head.parameters()

    def named_parameters(self) -> Dict[str, Tensor]:
        return {t.name: t for t in self.trainable_parameters()}

    def spec_digest(self) -> bytes:
        layout = {
            "N": self.meta.max_size,
            "encoder": [asdict(b) for b in ENCODER_SPEC],
            "reconstructor": [asdict(b) for b in RECONSTRUCTOR_SPEC],
            "head": [asdict(b) for b in STUDENT_HEAD_SPEC],
        }
        return hashlib.sha256(json.dumps(layout, sort_keys=True).encode()).digest()

    def encode(self, x: Tensor, s: int) -> Tensor:
        return self.encoder.forward(x, s)

    def decode(self, z_tilde: Tensor) -> List[Tensor]:
        return student_decode(self.reconstructor, self.head, z_tilde)

    def classify(self, maps: Sequence[Tensor]) -> np.ndarray:
        return self.task_head.predict_proba(TaskHead.features(maps))

    def infer(self, x: np.ndarray, s: int, b: int, sigma_mode: str = SIDE_INFO) -> np.ndarray:
        """In-process reference for one image: class probabilities as sent on the wire (float32)"""
        z = self.encode(Tensor(x), s)
        z_tilde = dequantize(quantize(z, b, sigma_mode=sigma_mode))
        probs = self.classify(self.decode(z_tilde))
        return probs.astype(np.float32).astype(np.float64)
