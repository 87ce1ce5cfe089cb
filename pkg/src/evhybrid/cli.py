"""Command-line surface tying the modules into reproducible pipelines.

Subcommands: gen, infer, train, quantize, profile, ablate, fidelity.
Global flags: --config PATH, --seed N, --out DIR, --deterministic.
Exit code 0 on success; nonzero with one categorized ``error[...]`` line on
failure. All commands run single-process; --deterministic additionally pins
sequential reductions (the numpy kernels used here are already sequential,
so the flag is recorded for provenance).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config, save_config
from .errors import ConfigError, EvHybridError
from .events import read_events, synthesize_moving_shapes, write_events
from .model import HybridModel, run_infer, stream_windows
from .profiling import EnergyModel, count_dense_macs, count_spike_acs, sparsity_report, write_profile
from .quantize import FidelityReport, run_quantize
from .snn import snn_backbone_forward
from .numerics import Tensor
from .train import ABLATION_VARIANTS, make_dataset, run_ablate, run_train_toy, _random_scene

_EXIT_CODES = {"config": 2, "data": 3, "shape": 4, "numeric": 5, "internal": 1}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evhybrid", description=__doc__)
    parser.add_argument("--config", help="INI run configuration (defaults when omitted)")
    parser.add_argument("--seed", type=int, help="override the training/scene seed")
    parser.add_argument("--out", help="output directory (default: io.out_dir)")
    parser.add_argument("--deterministic", action="store_true", help="force sequential reductions")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="synthesize a labeled event stream")
    p.add_argument("--duration-ms", type=int, default=None)
    p.add_argument("--format", choices=["csv", "evs"], default="evs")

    p = sub.add_parser("infer", help="windowed detection over an event file")
    p.add_argument("--events", required=True)
    p.add_argument("--checkpoint")

    sub.add_parser("train", help="train the toy detector on synthetic squares")

    p = sub.add_parser("quantize", help="quantize a checkpoint and report spike fidelity")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bits", type=int, default=None)

    p = sub.add_parser("profile", help="MAC/AC/energy profile (trace ACs when events given)")
    p.add_argument("--events")
    p.add_argument("--checkpoint")

    p = sub.add_parser("ablate", help="train and compare the bridge ablation variants")
    p.add_argument("--variants", default=",".join(ABLATION_VARIANTS))

    p = sub.add_parser("fidelity", help="float vs fixed-point spike agreement across bit widths")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bits", default="8,6,4,2")
    return parser


def _load(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig().validate()
    if args.seed is not None:
        cfg.training.seed = args.seed
    cfg.deterministic = bool(args.deterministic)
    return cfg


def _out_dir(args, cfg: RunConfig) -> Path:
    out = Path(args.out) if args.out else Path(cfg.io.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _eval_windows(cfg: RunConfig, model: HybridModel, n_scenes: int = 4, seed_offset: int = 104729):
    ds = make_dataset(cfg, n_scenes, seed=cfg.training.seed + seed_offset, stride=model.total_stride)
    return [s.counts for s in ds]


def cmd_gen(args, cfg: RunConfig) -> int:
    out = _out_dir(args, cfg)
    rng = np.random.default_rng(cfg.training.seed)
    scene = _random_scene(cfg, rng, seed=cfg.training.seed)
    duration = args.duration_ms or cfg.training.scene_duration_ms
    result = synthesize_moving_shapes(scene, duration, cfg.simulation.window_ms)
    ext = "evs" if args.format == "evs" else "csv"
    events_path = out / f"events.{ext}"
    write_events(result.stream, events_path)
    gt = {
        "boxes": [vars(b) for b in result.boxes],
        "warnings": result.warnings,
        "duration_ms": result.duration_ms,
        "deterministic": cfg.deterministic,
    }
    (out / "ground_truth.json").write_text(json.dumps(gt, indent=2, sort_keys=True))
    save_config(cfg, out / "config.ini")
    print(f"wrote {events_path} ({len(result.stream)} events, {len(result.boxes)} boxes)")
    return 0


def _build_model(cfg: RunConfig, checkpoint: str | None) -> HybridModel:
    model = HybridModel(cfg)
    if checkpoint:
        model.load_checkpoint(checkpoint)
    return model


def cmd_infer(args, cfg: RunConfig) -> int:
    out = _out_dir(args, cfg)
    sim = cfg.simulation
    stream = read_events(args.events, geometry=(sim.sensor_width, sim.sensor_height))
    model = _build_model(cfg, args.checkpoint)
    if not args.checkpoint:
        print("note: no checkpoint given, using seeded initial weights", file=sys.stderr)
    detections = run_infer(model, stream)
    (out / "detections.json").write_text(
        json.dumps([d.as_dict() for d in detections], indent=2, sort_keys=True)
    )
    counters = count_dense_macs(cfg)
    trace: list = []
    for _, counts in stream_windows(stream, cfg):
        snn_backbone_forward(Tensor(counts.astype(model.dtype)), model.snn_blocks, trace=trace)
    if trace:
        counters = counters.merge(count_spike_acs(trace))
    write_profile(counters, out)
    print(f"{len(detections)} detections over {len(stream)} events -> {out}")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    out = _out_dir(args, cfg)
    result = run_train_toy(cfg, out_dir=out)
    print(
        f"final loss {result.final_loss:.4f} (initial {result.initial_loss:.4f}); "
        f"eval hit rate {result.metrics.hit_rate:.2f}, "
        f"center err {result.metrics.mean_center_err:.2f} cells"
    )
    return 0


def cmd_quantize(args, cfg: RunConfig) -> int:
    out = _out_dir(args, cfg)
    bits = args.bits or cfg.quantization.bits
    model = _build_model(cfg, args.checkpoint)
    windows = _eval_windows(cfg, model)
    fpm, report = run_quantize(model, bits, windows, out_base=out / "quantized")
    (out / "fidelity.json").write_text(json.dumps(report.as_dict(), indent=2, sort_keys=True))
    print(
        f"int{bits}: match rate {report.match_rate:.4f} over {report.total_cells} cells, "
        f"first divergence t={report.first_divergence_t}, overflows {fpm.overflow_count}"
    )
    return 0


def cmd_profile(args, cfg: RunConfig) -> int:
    out = _out_dir(args, cfg)
    counters = count_dense_macs(cfg)
    sparsity = None
    if args.events:
        sim = cfg.simulation
        stream = read_events(args.events, geometry=(sim.sensor_width, sim.sensor_height))
        model = _build_model(cfg, args.checkpoint)
        trace: list = []
        for _, counts in stream_windows(stream, cfg):
            snn_backbone_forward(Tensor(counts.astype(model.dtype)), model.snn_blocks, trace=trace)
        if trace:
            counters = counters.merge(count_spike_acs(trace))
            sparsity = {e["name"]: sparsity_report(e["nonzero"]) for e in trace}
    write_profile(counters, out, EnergyModel(), sparsity)
    print((out / "profile.txt").read_text())
    return 0


def cmd_ablate(args, cfg: RunConfig) -> int:
    out = _out_dir(args, cfg)
    variants = tuple(v.strip() for v in args.variants.split(",") if v.strip())
    results = run_ablate(cfg, variants, out_dir=out, quiet=True)
    print(f"{'variant':<12} {'loss':>8} {'err':>8} {'hit':>6}")
    for name, m in results.items():
        print(f"{name:<12} {m.mean_loss:>8.4f} {m.mean_center_err:>8.3f} {m.hit_rate:>6.2f}")
    return 0


def cmd_fidelity(args, cfg: RunConfig) -> int:
    out = _out_dir(args, cfg)
    model = _build_model(cfg, args.checkpoint)
    windows = _eval_windows(cfg, model)
    sweep: dict[str, dict] = {}
    for bits_s in args.bits.split(","):
        bits = int(bits_s)
        _, report = run_quantize(model, bits, windows)
        sweep[f"int{bits}"] = report.as_dict()
        print(f"int{bits}: match rate {report.match_rate:.4f}")
    (out / "fidelity_sweep.json").write_text(json.dumps(sweep, indent=2, sort_keys=True))
    return 0


_COMMANDS = {
    "gen": cmd_gen,
    "infer": cmd_infer,
    "train": cmd_train,
    "quantize": cmd_quantize,
    "profile": cmd_profile,
    "ablate": cmd_ablate,
    "fidelity": cmd_fidelity,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load(args)
        return _COMMANDS[args.command](args, cfg)
    except EvHybridError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return _EXIT_CODES.get(exc.category, 1)
    except (OSError, ValueError) as exc:
        print(f"error[internal]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
