#!/usr/bin/env python3
"""
SLIM checkpoint files and the on-disk cache of trained models

Layout (little-endian):
    magic "SLIM" | version u16 | N u8 | spec digest (32 bytes, SHA-256) | count u32
    then `count` tensors: name_len u16 | name | rank u8 | dims u32 × rank | f64 × numel

Model metadata is stored as rank-0 tensors named meta.*.
"""

import hashlib
import json
import os
import random
import struct
import time
from collections import OrderedDict
from dataclasses import asdict, fields
from typing import Dict, Optional, Tuple

import numpy as np

from slimmable_model import ModelMeta, SplitModel
from split_errors import CheckpointError

MAGIC = b"SLIM"
VERSION = 1
HEADER = struct.Struct('<4sHB32sI')


def _pack_tensor(name: str, values: np.ndarray) -> bytes:
    encoded = name.encode('utf-8')
    values = np.asarray(values, dtype='<f8')
    head = struct.pack('<H', len(encoded)) + encoded + struct.pack('<B', values.ndim)
    head += struct.pack(f'<{values.ndim}I', *values.shape)
    return head + values.tobytes(order='C')


def model_tensors(model: SplitModel) -> "OrderedDict[str, np.ndarray]":
    tensors = OrderedDict()
    for field in fields(ModelMeta):
        tensors[f"meta.{field.name}"] = np.asarray(float(getattr(model.meta, field.name)))
    for name, tensor in model.named_parameters().items():
        tensors[name] = tensor.data
    for name, values in model.task_head.state().items():
        tensors[name] = values
    return tensors


def checkpoint_bytes(model: SplitModel) -> bytes:
    tensors = model_tensors(model)
    body = b"".join(_pack_tensor(name, values) for name, values in tensors.items())
    return HEADER.pack(MAGIC, VERSION, model.max_size, model.spec_digest(), len(tensors)) + body


def save_checkpoint(model: SplitModel, path: str) -> str:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    tmp_path = f"{path}.tmp"
    with open(tmp_path, 'wb') as f:
        f.write(checkpoint_bytes(model))
    os.replace(tmp_path, path)
    return path


def read_checkpoint(path: str) -> Tuple[Dict, "OrderedDict[str, np.ndarray]"]:
    """Parse a checkpoint into its header fields and named arrays"""
    try:
        with open(path, 'rb') as f:
            data = f.read()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}")

    if len(data) < HEADER.size:
        raise CheckpointError(f"{path}: file too short for a checkpoint header")
    magic, version, max_size, digest, count = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")

    tensors = OrderedDict()
    offset = HEADER.size
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from('<H', data, offset)
            offset += 2
            name = data[offset:offset + name_len].decode('utf-8')
            offset += name_len
            rank = data[offset]
            offset += 1
            dims = struct.unpack_from(f'<{rank}I', data, offset)
            offset += 4 * rank
            numel = int(np.prod(dims)) if rank else 1
            end = offset + 8 * numel
            if end > len(data):
                raise CheckpointError(f"{path}: tensor {name} runs past end of file")
            tensors[name] = np.frombuffer(data[offset:end], dtype='<f8').reshape(dims).astype(np.float64)
            offset = end
    except (struct.error, IndexError, UnicodeDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt tensor table ({e})")
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes")

    header = {"version": version, "max_size": max_size, "digest": digest, "count": count}
    return header, tensors


def load_checkpoint(path: str) -> SplitModel:
    header, tensors = read_checkpoint(path)
    meta_values = {}
    for field in fields(ModelMeta):
        key = f"meta.{field.name}"
        if key not in tensors:
            raise CheckpointError(f"{path}: missing {key}")
        meta_values[field.name] = int(tensors[key])

    model = SplitModel(ModelMeta(**meta_values))
    if model.max_size != header["max_size"]:
        raise CheckpointError(f"{path}: header N={header['max_size']} but meta N={model.max_size}")
    if model.spec_digest() != header["digest"]:
        raise CheckpointError(f"{path}: architecture digest does not match this build")

    for name, tensor in model.named_parameters().items():
        if name not in tensors:
            raise CheckpointError(f"{path}: missing parameter {name}")
        if tensors[name].shape != tensor.shape:
            raise CheckpointError(f"{path}: {name} has shape {tensors[name].shape}, expected {tensor.shape}")
        tensor.data = tensors[name].copy()

    task_state = {k: v for k, v in tensors.items() if k.startswith("task.")}
    if len(task_state) != len(model.task_head.state()):
        raise CheckpointError(f"{path}: incomplete task head state")
    model.task_head.load_state(task_state)
    return model


class CheckpointCache:
    """Trained checkpoints keyed by an MD5 of the training configuration"""

    def __init__(self, cache_dir: str = "model_cache", max_age_hours: Optional[float] = None, verbose: bool = True):
        self.cache_dir = cache_dir
        self.max_age = max_age_hours * 3600 if max_age_hours else None
        self.verbose = verbose
        self.ensure_cache_dir()

    def ensure_cache_dir(self):
        if not os.path.exists(self.cache_dir):
            os.makedirs(self.cache_dir)

    def get_cache_key(self, train_config) -> str:
        """Generate unique cache key for a training configuration"""
        payload = asdict(train_config) if hasattr(train_config, '__dataclass_fields__') else dict(train_config)
        payload.pop('log_path', None)
        return hashlib.md5(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()

    def get_cache_path(self, cache_key: str) -> str:
        return os.path.join(self.cache_dir, f"{cache_key}.ckpt")

    def is_cache_valid(self, cache_path: str) -> bool:
        if not os.path.exists(cache_path):
            return False
        if self.max_age is None:
            return True
        return (time.time() - os.path.getmtime(cache_path)) < self.max_age

    def cleanup_old_files(self, max_age_hours: float = 24 * 7) -> int:
        """Remove checkpoints older than max_age_hours"""
        cutoff = time.time() - max_age_hours * 3600
        cleaned = 0
        for filename in os.listdir(self.cache_dir):
            if not filename.endswith('.ckpt'):
                continue
            filepath = os.path.join(self.cache_dir, filename)
            if os.path.getmtime(filepath) < cutoff:
                os.remove(filepath)
                cleaned += 1
        if cleaned and self.verbose:
            print(f"🧹 Cleaned {cleaned} cached checkpoints older than {max_age_hours} hours")
        return cleaned

    def load(self, train_config) -> Optional[SplitModel]:
        # occasional cleanup
        if random.random() < 0.1:
            self.cleanup_old_files()
        cache_path = self.get_cache_path(self.get_cache_key(train_config))
        if not self.is_cache_valid(cache_path):
            return None
        try:
            model = load_checkpoint(cache_path)
        except CheckpointError as e:
            if self.verbose:
                print(f"⚠️ Cached checkpoint unreadable ({e}), will retrain")
            os.remove(cache_path)
            return None
        if self.verbose:
            print(f"📋 Loaded trained model from cache: {cache_path}")
        return model

    def save(self, train_config, model: SplitModel) -> str:
        cache_path = save_checkpoint(model, self.get_cache_path(self.get_cache_key(train_config)))
        if self.verbose:
            print(f"💾 Saved trained model to cache: {cache_path}")
        return cache_path
