#!/usr/bin/env python3
"""
Procedural image data: colored geometric shapes on noisy backgrounds

Labels are the shape kind. Images are generated as 8-bit RGB (the same raw
format frames are read from disk in) and converted to channel-major float
arrays centered on zero.
"""

import os
import struct
from dataclasses import dataclass
from typing import Iterator, List, Optional, Tuple

import numpy as np

from split_errors import ConfigError

SHAPES = ("circle", "square", "triangle", "cross")

RAW_MAGIC = b"RGB8"
RAW_HEADER = struct.Struct('<4sHH')


@dataclass
class ToyDataset:
    images: np.ndarray  # (n, 3, H, W) float64
    labels: np.ndarray  # (n,) int

    def __len__(self):
        return len(self.labels)

    def batches(self, batch_size: int, rng: Optional[np.random.Generator] = None) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        """Shuffled mini-batches when an rng is given, in order otherwise"""
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            yield self.images[idx], self.labels[idx]

    def subset(self, count: int) -> 'ToyDataset':
        return ToyDataset(self.images[:count], self.labels[:count])


def _shape_mask(kind: int, size: int, cy: float, cx: float, radius: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    if SHAPES[kind] == "circle":
        return dy * dy + dx * dx <= radius * radius
    if SHAPES[kind] == "square":
        return (np.abs(dy) <= radius) & (np.abs(dx) <= radius)
    if SHAPES[kind] == "triangle":
        # apex up, base at cy + radius
        return (dy <= radius) & (dy >= -radius) & (np.abs(dx) <= (dy + radius) / 2.0)
    arm = max(radius / 3.0, 1.0)
    return ((np.abs(dy) <= radius) & (np.abs(dx) <= arm)) | ((np.abs(dx) <= radius) & (np.abs(dy) <= arm))


def generate_images(count: int, size: int, rng: np.random.Generator,
                    num_classes: int = len(SHAPES)) -> Tuple[np.ndarray, np.ndarray]:
    """(count, H, W, 3) uint8 images and their shape labels"""
    if not 1 <= num_classes <= len(SHAPES):
        raise ConfigError(f"num_classes must be in [1, {len(SHAPES)}], got {num_classes}")
    images = np.empty((count, size, size, 3), dtype=np.uint8)
    labels = rng.integers(0, num_classes, size=count)
    for i in range(count):
        background = rng.uniform(0.05, 0.35, size=3)
        canvas = background + rng.normal(0.0, 0.08, size=(size, size, 3))
        radius = rng.uniform(size / 7.0, size / 3.5)
        cy, cx = rng.uniform(radius, size - radius, size=2)
        color = rng.uniform(0.55, 1.0, size=3)
        canvas[_shape_mask(int(labels[i]), size, cy, cx, radius)] = color
        images[i] = np.clip(np.round(canvas * 255.0), 0, 255).astype(np.uint8)
    return images, labels


def to_model_layout(images: np.ndarray) -> np.ndarray:
    """uint8 (..., H, W, 3) -> float (..., 3, H, W) in [-0.5, 0.5]"""
    return np.moveaxis(images.astype(np.float64) / 255.0 - 0.5, -1, -3)


def make_datasets(num_samples: int, val_samples: int, input_size: int,
                  num_classes: int = len(SHAPES), seed: int = 1) -> Tuple[ToyDataset, ToyDataset]:
    """Train and validation splits drawn from one seeded stream, so they never overlap"""
    rng = np.random.default_rng([seed, 7])
    raw, labels = generate_images(num_samples + val_samples, input_size, rng, num_classes)
    images = to_model_layout(raw)
    return (ToyDataset(images[:num_samples], labels[:num_samples]),
            ToyDataset(images[num_samples:], labels[num_samples:]))


def write_raw_image(path: str, image: np.ndarray):
    """Raw frame file: magic "RGB8", H u16, W u16, then interleaved 8-bit RGB"""
    height, width, _ = image.shape
    with open(path, 'wb') as f:
        f.write(RAW_HEADER.pack(RAW_MAGIC, height, width))
        f.write(np.ascontiguousarray(image, dtype=np.uint8).tobytes())


def read_raw_image(path: str) -> np.ndarray:
    with open(path, 'rb') as f:
        data = f.read()
    if len(data) < RAW_HEADER.size:
        raise ConfigError(f"{path}: too short for a raw image header")
    magic, height, width = RAW_HEADER.unpack_from(data)
    if magic != RAW_MAGIC:
        raise ConfigError(f"{path}: not a raw RGB8 image")
    expected = RAW_HEADER.size + height * width * 3
    if len(data) != expected:
        raise ConfigError(f"{path}: {len(data)} bytes, expected {expected}")
    return np.frombuffer(data[RAW_HEADER.size:], dtype=np.uint8).reshape(height, width, 3)


def load_image_dir(directory: str) -> List[np.ndarray]:
    """All *.rgb8 frames in name order, in model layout"""
    names = sorted(n for n in os.listdir(directory) if n.endswith('.rgb8'))
    if not names:
        raise ConfigError(f"no .rgb8 frames in {directory}")
    return [to_model_layout(read_raw_image(os.path.join(directory, n))) for n in names]
