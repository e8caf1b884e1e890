#!/usr/bin/env python3
"""
slimsplit command line

    train       distill the slimmable ensemble and write a checkpoint
    eval-grid   static RTT grid (or the quantization ablation grid) as CSV
    serve       TCP decoder server plus the HTTP status API
    edge        adaptive edge client against a running server
    simulate    adaptive loopback run on the simulated link (virtual clock)
    bench       time every (s, b) and write a performance table CSV

Exit codes: 0 ok, 2 usage, 3 configuration, 4 protocol, 5 model/checkpoint,
1 any other failure.
"""

import argparse
import json
import os
import sys
from typing import Dict, List, Optional

from adaptation_controller import ConfigPoint, PerfTable, config_space, load_desk_table
from eval_harness import (bench, measure_metrics, run_ablation_grid, run_dynamic, run_static_grid,
                          write_ablation_csv, write_grid_csv, write_run_outputs)
from link_simulator import ChannelModel, load_trace_csv, load_walk_csv
from model_checkpoint import CheckpointCache, load_checkpoint, save_checkpoint
from run_validator import AdaptationRunValidator
from slimmable_model import SplitModel
from slimmable_training import TrainConfig, train
from split_config import load_config, repo_path, using_config
from split_errors import ConfigError, ModelError, ProtocolError, SplitError
from split_runtime import FrameSource, RunConfig, SplitServer, run_edge
from toy_dataset import make_datasets

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_PROTOCOL = 4
EXIT_MODEL = 5

TRAIN_FLAGS = {
    "seed": int, "epochs": int, "max_size": int, "sizes_per_step": int, "learning_rate": float,
    "lr_halving_period_epochs": float, "batch_size": int, "num_samples": int, "val_samples": int,
    "input_size": int, "num_classes": int, "ste_bits": int, "log_path": str,
}


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="JSON file merged over config/defaults.json")
    parser.add_argument("--quiet", action="store_true", help="suppress progress output")


def _add_train_flags(parser: argparse.ArgumentParser):
    group = parser.add_argument_group("training")
    for name, kind in TRAIN_FLAGS.items():
        group.add_argument(_flag(name), type=kind, dest=name, help=f"training.{name}")
    group.add_argument("--no-regularize", action="store_false", dest="regularize", default=None,
                       help="train without the uniform-noise quantization stand-in")


def _add_checkpoint(parser: argparse.ArgumentParser, required: bool = False):
    parser.add_argument("--checkpoint", required=required, help="model checkpoint (.ckpt)")


def _add_run_flags(parser: argparse.ArgumentParser, seed: bool = True):
    group = parser.add_argument_group("run")
    group.add_argument("--deadline-ms", type=float, dest="deadline_ms", help="RTT deadline per frame")
    group.add_argument("--frames", type=int, help="frames to process")
    group.add_argument("--warmup-frames", type=int, dest="warmup_frames", help="frames excluded from miss statistics")
    if seed:
        group.add_argument("--seed", type=int, help="seed for procedural input frames")
    group.add_argument("--input-dir", dest="input_dir", help="directory of .rgb8 frames (default: procedural)")
    group.add_argument("--perf-table", dest="perf_table", help="performance table CSV")
    group.add_argument("--output-dir", dest="output_dir", help="where logs and summaries are written")
    group.add_argument("--sigma-mode", dest="sigma_mode", choices=("side_info", "receiver_recompute"))


def _add_link_flags(parser: argparse.ArgumentParser):
    group = parser.add_argument_group("link")
    group.add_argument("--rate", type=float, dest="rate_Bps", help="constant link rate in bytes/s")
    group.add_argument("--delay-ms", type=float, dest="delay_ms", help="one-way delay")
    group.add_argument("--jitter-pct", type=float, dest="jitter_pct", help="serialization jitter, percent")
    group.add_argument("--trace", help="rate trace CSV (t_ms,rate_Bps)")
    group.add_argument("--walk", help="walk schedule CSV (t_ms,distance_m)")
    group.add_argument("--raw-link", action="store_false", dest="full_scale_link", default=None,
                       help="do not rescale the link to full-scale transfer times")


def _add_endpoint_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--host", help="server host")
    parser.add_argument("--port", type=int, help="binary session port")
    parser.add_argument("--http-port", type=int, dest="http_port", help="status API port")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slimsplit", description="Adaptive split-computing runtime")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="distill the slimmable ensemble and write a checkpoint")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--output", help="checkpoint path (default paths.checkpoint)")
    p.add_argument("--use-cache", action="store_true", help="reuse a cached checkpoint for identical settings")
    p.add_argument("--history", help="write the training history JSON here")

    p = sub.add_parser("eval-grid", help="static RTT grid or quantization ablation grid")
    _add_common(p)
    _add_checkpoint(p)
    _add_run_flags(p, seed=False)
    _add_link_flags(p)
    _add_train_flags(p)
    p.add_argument("--kind", choices=("static", "ablation"), default="static")
    p.add_argument("--frames-per-config", type=int, dest="frames_per_config")
    p.add_argument("--output", help="CSV path (default under --output-dir)")

    p = sub.add_parser("serve", help="decoder server with status API")
    _add_common(p)
    _add_checkpoint(p, required=True)
    _add_endpoint_flags(p)
    p.add_argument("--perf-table", dest="perf_table", help="performance table CSV")
    p.add_argument("--max-sessions", type=int, dest="max_sessions", help="exit after serving this many sessions")
    p.add_argument("--sigma-mode", dest="sigma_mode", choices=("side_info", "receiver_recompute"))

    p = sub.add_parser("edge", help="adaptive edge client")
    _add_common(p)
    _add_checkpoint(p, required=True)
    _add_endpoint_flags(p)
    _add_run_flags(p)
    p.add_argument("--rate", type=float, dest="rate_Bps", help="prior link rate in bytes/s")
    p.add_argument("--delay-ms", type=float, dest="delay_ms", help="prior one-way delay")

    p = sub.add_parser("simulate", help="adaptive loopback run on the simulated link")
    _add_common(p)
    _add_checkpoint(p)
    _add_run_flags(p)
    _add_link_flags(p)
    p.add_argument("--name", default="simulate", help="prefix for output files")
    p.add_argument("--validate", action="store_true", help="score the run and print a report")

    p = sub.add_parser("bench", help="time every configuration, write a performance table")
    _add_common(p)
    _add_checkpoint(p)
    p.add_argument("--configs", default="all", help="'all' or a list like 1:1,2:4")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--with-metrics", action="store_true", dest="with_metrics",
                   help="fill the metric column with validation accuracy")
    p.add_argument("--val-samples", type=int, dest="val_samples", default=64)
    p.add_argument("--output", required=True, help="performance table CSV to write")
    return parser


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def _given(args: argparse.Namespace, names) -> Dict:
    return {name: getattr(args, name) for name in names if getattr(args, name, None) is not None}


def train_config_from_args(args: argparse.Namespace, config: Dict) -> TrainConfig:
    overrides = dict(config['training'])
    overrides.update(_given(args, list(TRAIN_FLAGS) + ["regularize"]))
    return TrainConfig.from_dict(overrides)


def run_config_from_args(args: argparse.Namespace, config: Dict, role: str) -> RunConfig:
    data = _given(args, ["deadline_ms", "frames", "warmup_frames", "seed", "input_dir", "perf_table",
                         "output_dir", "sigma_mode", "host", "port", "http_port", "full_scale_link"])
    channel = {"rate_Bps": config['link']['rate_Bps'], "delay_ms": config['link']['delay_ms'],
               "jitter_pct": config['link']['jitter_pct']}
    channel.update(_given(args, ["rate_Bps", "delay_ms", "jitter_pct"]))
    data.update(role=role, channel=channel)
    if getattr(args, "checkpoint", None):
        data["checkpoint"] = args.checkpoint
    return RunConfig.from_dict(data, defaults=config)


def load_model(path: Optional[str], config: Dict, verbose: bool) -> SplitModel:
    """Checkpoint if it exists, otherwise an untrained model (timings are modeled anyway)"""
    path = path or repo_path(config['paths']['checkpoint'])
    if os.path.exists(path):
        return load_checkpoint(path)
    if verbose:
        print(f"⚠️  No checkpoint at {path}; using an untrained model")
    training = config['training']
    return SplitModel.build(max_size=training['max_size'], seed=training['seed'],
                            input_size=training['input_size'], num_classes=training['num_classes'])


def load_table(run: RunConfig, config: Dict) -> PerfTable:
    return load_desk_table(repo_path(run.perf_table or config['paths']['desk_perf_table']))


def parse_configs(text: str, max_size: int, max_bits: int) -> List[ConfigPoint]:
    if text == "all":
        return config_space(max_size, max_bits)
    try:
        points = [ConfigPoint(*(int(v) for v in item.split(":"))) for item in text.split(",") if item]
    except (TypeError, ValueError):
        raise ConfigError(f"--configs must be 'all' or s:b pairs like 1:1,2:4, got {text!r}")
    for cfg in points:
        if not (1 <= cfg.s <= max_size and 1 <= cfg.b <= max_bits):
            raise ConfigError(f"configuration {cfg} outside 1..{max_size} x 1..{max_bits}")
    return points


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_train(args, config, verbose) -> int:
    train_config = train_config_from_args(args, config)
    cache = CheckpointCache(repo_path(config['paths']['model_cache']), verbose=verbose) if args.use_cache else None
    model = cache.load(train_config) if cache else None
    history = None
    if model is None:
        model, history = train(train_config, verbose=verbose)
        if cache:
            cache.save(train_config, model)
    output = save_checkpoint(model, args.output or repo_path(config['paths']['checkpoint']))
    if verbose:
        print(f"💾 Checkpoint written: {output}")
    if args.history and history is not None:
        with open(args.history, 'w') as f:
            json.dump(history, f, indent=2)
    return EXIT_OK


def cmd_eval_grid(args, config, verbose) -> int:
    run = run_config_from_args(args, config, "loopback-sim")
    os.makedirs(run.output_dir, exist_ok=True)
    if args.kind == "ablation":
        grid = run_ablation_grid(train_config_from_args(args, config), verbose=verbose)
        output = args.output or os.path.join(run.output_dir, "ablation_grid.csv")
        write_ablation_csv(output, grid)
    else:
        model = load_model(args.checkpoint, config, verbose)
        channel = load_trace_csv(args.trace, run.channel.get('delay_ms')) if args.trace else None
        rows = run_static_grid(model, run, load_table(run, config), channel, args.frames_per_config, verbose)
        output = args.output or os.path.join(run.output_dir, "static_grid.csv")
        write_grid_csv(output, rows)
    if verbose:
        print(f"💾 Grid written: {output}")
    return EXIT_OK


def cmd_serve(args, config, verbose) -> int:
    run = run_config_from_args(args, config, "server")
    model = load_checkpoint(args.checkpoint)
    server = SplitServer(model, load_table(run, config), sigma_mode=run.sigma_mode, verbose=verbose)
    server.start_http(run.host, run.http_port)
    try:
        server.serve_tcp(run.host, run.port, args.max_sessions)
    except KeyboardInterrupt:
        if verbose:
            print("🛑 Server stopped")
    finally:
        server.stop()
    return EXIT_OK


def cmd_edge(args, config, verbose) -> int:
    run = run_config_from_args(args, config, "edge")
    model = load_checkpoint(args.checkpoint)
    records, breakdowns, controller = run_edge(model, run, load_table(run, config), verbose)
    paths = write_run_outputs(run.output_dir, "edge", records, breakdowns, run, controller.state())
    if verbose:
        print(f"💾 Decision log: {paths['decisions']}")
    return EXIT_OK


def cmd_simulate(args, config, verbose) -> int:
    run = run_config_from_args(args, config, "loopback-sim")
    model = load_model(args.checkpoint, config, verbose)
    walk, channel = None, None
    if args.walk:
        walk = load_walk_csv(args.walk)
    elif args.trace:
        channel = load_trace_csv(args.trace, run.channel.get('delay_ms'))
    elif args.rate_Bps is not None:
        channel = ChannelModel.from_dict(dict(run.channel))
    result = run_dynamic(model, run, walk, load_table(run, config), channel, verbose)
    summary = result.summary()
    paths = write_run_outputs(run.output_dir, args.name, result.records, result.breakdowns, run, summary)
    if verbose:
        print(f"💾 Decision log: {paths['decisions']}")
        print(f"💾 RTT breakdown: {paths['breakdown']}")
    if args.validate:
        validator = AdaptationRunValidator()
        report = validator.validate_run(summary, args.name)
        if verbose:
            validator.print_report(report)
        return EXIT_OK if report['passed'] else EXIT_FAILURE
    return EXIT_OK


def cmd_bench(args, config, verbose) -> int:
    model = load_model(args.checkpoint, config, verbose)
    configs = parse_configs(args.configs, model.max_size, config['controller']['max_bits'])
    metrics = None
    if args.with_metrics:
        _, val = make_datasets(0, args.val_samples, model.meta.input_size, model.meta.num_classes,
                               seed=model.meta.seed)
        metrics = measure_metrics(model, val, config['controller']['max_bits'])
    frames = FrameSource(make_datasets(0, max(args.repeats, 1), model.meta.input_size)[1].images)
    table = bench(model, configs, args.repeats, frames, metrics, verbose)
    table.save_csv(args.output)
    if verbose:
        print(f"💾 Performance table ({len(table)} rows): {args.output}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval-grid": cmd_eval_grid,
    "serve": cmd_serve,
    "edge": cmd_edge,
    "simulate": cmd_simulate,
    "bench": cmd_bench,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    verbose = not args.quiet
    try:
        config = load_config(args.config)
        with using_config(config):
            return COMMANDS[args.command](args, config, verbose)
    except ConfigError as e:
        print(f"❌ Configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ProtocolError as e:
        print(f"❌ Protocol error: {e}", file=sys.stderr)
        return EXIT_PROTOCOL
    except ModelError as e:
        print(f"❌ Model error: {e}", file=sys.stderr)
        return EXIT_MODEL
    except SplitError as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
