#!/usr/bin/env python3
"""
Evaluation harness

- bench: time every (s, b) configuration and write a PerfTable
- static grid: average RTT per configuration on a fixed channel, sorted by RTT
- dynamic run: adaptive loopback over a walk trace, with per-frame oracle
- ablation grid: distillation loss for single vs ensemble encoders,
  quantized at 1-4 bits, trained with and without noise regularization
"""

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from adaptation_controller import (ChannelEstimate, ConfigPoint, DecisionRecord, PerfEntry, PerfTable,
                                   config_space, control_loop, load_desk_table, predict_rtt,
                                   select_config, write_decision_log)
from link_simulator import ChannelModel, load_walk_csv, walk_profile
from quant_codec import payload_size
from slimmable_model import SplitModel
from slimmable_training import TrainConfig, evaluate_distillation, evaluate_task_metric, train
from split_config import repo_path, section
from split_runtime import (FrameSource, LoopbackSimulation, RttBreakdown, RunConfig,
                           WallTimer, edge_pipeline, fit_table_to_model, link_scale, server_pipeline,
                           write_breakdown_csv)
from toy_dataset import ToyDataset, make_datasets

ABLATION_BITS: Tuple[Optional[int], ...] = (None, 4, 3, 2, 1)
GRID_COLUMNS = ("rtt_ms", "metric", "s", "b", "rtt_std_ms", "frames")


def _bits_label(bits: Optional[int]) -> str:
    return "fp" if bits is None else f"{bits}bit"


# ---------------------------------------------------------------------------
# Bench
# ---------------------------------------------------------------------------

def measure_metrics(model: SplitModel, dataset: ToyDataset, max_bits: int = 4) -> Dict[ConfigPoint, float]:
    """Task head accuracy per (s, b) on a validation set"""
    return {cfg: evaluate_task_metric(model, dataset, cfg.s, cfg.b)
            for cfg in config_space(model.max_size, max_bits)}


def bench(model: SplitModel, configs: Optional[Sequence[ConfigPoint]] = None, repeats: int = 3,
          frames: Optional[FrameSource] = None, metrics: Optional[Dict[ConfigPoint, float]] = None,
          verbose: bool = True) -> PerfTable:
    """Wall-clock encode (with quantize/pack) and decode time per configuration"""
    configs = list(configs or config_space(model.max_size, section('controller')['max_bits']))
    frames = frames or FrameSource(make_datasets(0, max(repeats, 1), model.meta.input_size)[1].images)
    numel = int(np.prod(model.bottleneck_shape()))
    timer = WallTimer()
    table = PerfTable()

    for cfg in configs:
        encode_times, decode_times = [], []
        for _ in range(repeats):
            encoded = edge_pipeline(model, frames.next(), cfg, timer=timer)
            encode_times.append(encoded.encode_ms + encoded.quantize_pack_ms)
            result = server_pipeline(model, encoded.header, encoded.payload, timer=timer)
            decode_times.append(result.decoder_time_us / 1000.0)
        metric = (metrics or {}).get(cfg, 0.0)
        table[cfg] = PerfEntry(float(np.median(encode_times)), float(np.median(decode_times)),
                               payload_size(numel, cfg.b), metric)
        if verbose:
            print(f"  {cfg}: encode {table[cfg].encode_ms:.1f} ms, decode {table[cfg].decode_ms:.1f} ms, "
                  f"{table[cfg].payload_bytes} B")
    return table


# ---------------------------------------------------------------------------
# Static grid
# ---------------------------------------------------------------------------

@dataclass
class GridRow:
    s: int
    b: int
    rtt_ms: float
    rtt_std_ms: float
    metric: float
    frames: int


def run_static_grid(model: SplitModel, run: RunConfig, table: Optional[PerfTable] = None,
                    channel: Optional[ChannelModel] = None, frames_per_config: Optional[int] = None,
                    verbose: bool = True) -> List[GridRow]:
    """Fixed-channel RTT for every configuration, fastest first"""
    if not model.meta.trained and verbose:
        print("⚠️  Checkpoint is untrained; metrics and timings are placeholders")
    table = table or load_desk_table(repo_path(run.perf_table) if run.perf_table else None)
    table = fit_table_to_model(model, table)
    numel = int(np.prod(model.bottleneck_shape()))
    channel = channel or run.channel_model()
    if run.full_scale_link:
        channel = replace(channel, rate_scale=link_scale(numel))
    count = frames_per_config or run.grid_frames

    rows = []
    for cfg in table.points():
        source = FrameSource.from_run(run, model.meta.input_size)
        with LoopbackSimulation(model, table, channel, source, sigma_mode=run.sigma_mode) as sim:
            rtts = [sim.edge.run_frame(cfg).measured_rtt_ms for _ in range(count)]
        rows.append(GridRow(cfg.s, cfg.b, float(np.mean(rtts)), float(np.std(rtts)), table[cfg].metric, count))
        if verbose:
            print(f"  {cfg}: {rows[-1].rtt_ms:.1f} ms over {count} frames")
    rows.sort(key=lambda r: (r.rtt_ms, r.s, r.b))
    return rows


def write_grid_csv(path: str, rows: Sequence[GridRow]):
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(GRID_COLUMNS)
        for r in rows:
            writer.writerow([f"{r.rtt_ms:.1f}", f"{r.metric:.6g}", r.s, r.b, f"{r.rtt_std_ms:.2f}", r.frames])


# ---------------------------------------------------------------------------
# Dynamic run
# ---------------------------------------------------------------------------

@dataclass
class DynamicResult:
    records: List[DecisionRecord]
    breakdowns: List[RttBreakdown]
    capture_ms: List[float]
    distances_m: List[float]
    true_rates_Bps: List[float]
    oracle: List[ConfigPoint]
    deadline_ms: float
    warmup_frames: int
    metrics: Dict[str, float] = field(default_factory=dict)

    @property
    def chosen(self) -> List[ConfigPoint]:
        return [ConfigPoint(r.s, r.b) for r in self.records]

    @property
    def miss_fraction(self) -> float:
        measured = self.records[self.warmup_frames:]
        if not measured:
            return 0.0
        return sum(1 for r in measured if r.measured_rtt_ms > self.deadline_ms) / len(measured)

    def switch_counts(self) -> Tuple[int, int]:
        """(b changes, s changes) along the chosen-config sequence"""
        chosen = self.chosen
        b_changes = sum(1 for a, c in zip(chosen, chosen[1:]) if a.b != c.b)
        s_changes = sum(1 for a, c in zip(chosen, chosen[1:]) if a.s != c.s)
        return b_changes, s_changes

    def switch_lags(self) -> List[int]:
        """Frames between each oracle change and the next change of the chosen configuration"""
        chosen, lags = self.chosen, []
        for i in range(1, len(self.oracle)):
            if self.oracle[i] == self.oracle[i - 1]:
                continue
            before = chosen[i - 1]
            lag = next((k for k in range(len(chosen) - i) if chosen[i + k] != before), None)
            if lag is not None:
                lags.append(lag)
        return lags

    def mean_metric(self, near_m: float = 3.0, far_m: float = 7.0) -> Tuple[float, float]:
        """Average chosen metric close to the server and far from it"""
        near = [b.metric for b, d in zip(self.breakdowns, self.distances_m) if d <= near_m]
        far = [b.metric for b, d in zip(self.breakdowns, self.distances_m) if d >= far_m]
        return (float(np.mean(near)) if near else float('nan'),
                float(np.mean(far)) if far else float('nan'))

    def summary(self) -> Dict:
        b_changes, s_changes = self.switch_counts()
        near, far = self.mean_metric()
        lags = self.switch_lags()
        return {
            "frames": len(self.records),
            "warmup_frames": self.warmup_frames,
            "deadline_ms": self.deadline_ms,
            "miss_fraction": self.miss_fraction,
            "b_changes": b_changes,
            "s_changes": s_changes,
            "max_switch_lag_frames": max(lags) if lags else 0,
            "switch_lags": lags,
            "metric_near": near,
            "metric_far": far,
            "mean_rtt_ms": float(np.mean([r.measured_rtt_ms for r in self.records])) if self.records else 0.0,
        }


def default_walk() -> List[Tuple[float, float]]:
    return load_walk_csv(repo_path(section('paths')['walk']))


def run_dynamic(model: SplitModel, run: RunConfig, walk: Optional[Sequence[Tuple[float, float]]] = None,
                table: Optional[PerfTable] = None, channel: Optional[ChannelModel] = None,
                verbose: bool = True) -> DynamicResult:
    """Adaptive run over a walk (or any channel), recording what an all-knowing selector would pick"""
    table = table or load_desk_table(repo_path(run.perf_table) if run.perf_table else None)
    table = fit_table_to_model(model, table)
    numel = int(np.prod(model.bottleneck_shape()))
    if channel is None:
        walk = list(walk or default_walk())
        channel = replace(walk_profile(walk, delay_ms=run.channel.get('delay_ms')),
                          jitter_pct=run.channel.get('jitter_pct', 0.0))
    if run.full_scale_link:
        channel = replace(channel, rate_scale=link_scale(numel))
    source = FrameSource.from_run(run, model.meta.input_size)

    with LoopbackSimulation(model, table, channel, source, sigma_mode=run.sigma_mode) as sim:
        controller = sim.controller(run.deadline_ms)
        records = [record for record, _ in control_loop(sim.edge, controller, run.frames)]
        breakdowns = list(sim.edge.breakdowns)
        capture_ms = list(sim.edge.capture_ms)

    walk = list(walk or [])
    times, dists = [t for t, _ in walk], [d for _, d in walk]
    oracle, rates = [], []
    for t in capture_ms:
        est = ChannelEstimate(channel.rate_at(t), channel.delay_ms)
        rates.append(est.rate_Bps / channel.rate_scale)
        oracle.append(select_config(
            table, est, run.deadline_ms,
            rtt_fn=lambda cfg, est=est: predict_rtt(cfg, table, est, controller.result_bytes,
                                                    controller.overhead_bytes)))
    distances = [float(np.interp(t, times, dists)) if walk else math.nan for t in capture_ms]
    result = DynamicResult(records, breakdowns, capture_ms, distances, rates, oracle, run.deadline_ms,
                           run.warmup_frames)
    if verbose:
        s = result.summary()
        print(f"📊 {s['frames']} frames: miss fraction {s['miss_fraction']:.1%}, "
              f"b changes {s['b_changes']}, s changes {s['s_changes']}")
    return result


def write_run_outputs(output_dir: str, name: str, records: Sequence[DecisionRecord],
                      breakdowns: Sequence[RttBreakdown], run: RunConfig,
                      results: Optional[Dict] = None) -> Dict[str, str]:
    """Decision JSONL, breakdown CSV and a summary JSON"""
    os.makedirs(output_dir, exist_ok=True)
    paths = {
        "decisions": os.path.join(output_dir, f"{name}_decisions.jsonl"),
        "breakdown": os.path.join(output_dir, f"{name}_breakdown.csv"),
        "summary": os.path.join(output_dir, f"{name}_summary.json"),
    }
    write_decision_log(paths["decisions"], records)
    write_breakdown_csv(paths["breakdown"], breakdowns)
    with open(paths["summary"], 'w') as f:
        json.dump({"timestamp": datetime.now().isoformat(), "run": asdict(run), "results": results or {}},
                  f, indent=2)
    return paths


# ---------------------------------------------------------------------------
# Ablation grid
# ---------------------------------------------------------------------------

@dataclass
class AblationGrid:
    """Rows: single encoder, then ensemble s=1..N. Columns: bits x (regularized, not)."""
    row_labels: List[str]
    column_labels: List[str]
    values: np.ndarray

    def cell(self, row: str, bits: Optional[int], regularized: bool) -> float:
        column = f"{_bits_label(bits)}_{'reg' if regularized else 'noreg'}"
        return float(self.values[self.row_labels.index(row), self.column_labels.index(column)])


def run_ablation_grid(config: Optional[TrainConfig] = None,
                      datasets: Optional[Tuple[ToyDataset, ToyDataset]] = None,
                      bits: Sequence[Optional[int]] = ABLATION_BITS,
                      verbose: bool = True) -> AblationGrid:
    """Train the four arms from scratch and evaluate validation distillation loss per cell"""
    config = config or TrainConfig.from_dict()
    datasets = datasets or make_datasets(config.num_samples, config.val_samples, config.input_size,
                                         config.num_classes, config.seed)
    val_images = datasets[1].images
    row_labels = ["single"] + [f"ensemble_s{s}" for s in range(1, config.max_size + 1)]
    column_labels = [f"{_bits_label(b)}_{arm}" for arm in ("reg", "noreg") for b in bits]
    values = np.zeros((len(row_labels), len(column_labels)))

    for regularize in (True, False):
        arm = "reg" if regularize else "noreg"
        arms = (("single", replace(config, max_size=1, sizes_per_step=2, regularize=regularize, log_path=None)),
                ("ensemble", replace(config, regularize=regularize, log_path=None)))
        for kind, arm_config in arms:
            if verbose:
                print(f"🚀 Ablation arm: {kind}, {arm}")
            model, _ = train(arm_config, datasets, verbose=False)
            sizes = [1] if kind == "single" else range(1, config.max_size + 1)
            for s in sizes:
                row = row_labels.index("single" if kind == "single" else f"ensemble_s{s}")
                for b in bits:
                    col = column_labels.index(f"{_bits_label(b)}_{arm}")
                    values[row, col] = evaluate_distillation(model, val_images, s, b)
    return AblationGrid(row_labels, column_labels, values)


def write_ablation_csv(path: str, grid: AblationGrid):
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(["encoder"] + grid.column_labels)
        for label, row in zip(grid.row_labels, grid.values):
            writer.writerow([label] + [f"{v:.6f}" for v in row])
