#!/usr/bin/env python3
"""Train all five bridge wirings on the same synthetic data and seed, then
compare held-out detection quality. Defaults to the desk-scale config used
by the acceptance suite; pass --seeds for a multi-seed direction check.

    python scripts/ablation_sweep.py --seeds 3
"""

import argparse

import numpy as np

from evhybrid.config import RunConfig
from evhybrid.train import ABLATION_VARIANTS, run_ablate


def sweep_config(seed):
    cfg = RunConfig()
    cfg.simulation.sensor_width = 32
    cfg.simulation.sensor_height = 32
    cfg.architecture.snn_layers = ["8c3p1s2", "16c3p1s2"]
    cfg.architecture.ann_layers = ["24c3p1s1"]
    cfg.architecture.lstm_positions = []
    cfg.architecture.bridge_kernel = 3
    cfg.training.seed = seed
    cfg.training.steps = 450
    cfg.training.batch = 3
    cfg.training.lr = 2.5e-3
    cfg.training.scenes = 48
    cfg.training.eval_scenes = 15
    cfg.training.scene_duration_ms = 100
    cfg.training.speed_min = 170.0
    cfg.training.speed_max = 260.0
    return cfg.validate()


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--seeds", type=int, default=1)
    parser.add_argument("--variants", default=",".join(ABLATION_VARIANTS))
    args = parser.parse_args()
    variants = tuple(v.strip() for v in args.variants.split(","))

    per_variant = {v: [] for v in variants}
    for seed in range(args.seeds):
        results = run_ablate(sweep_config(seed), variants, quiet=True)
        print(f"-- seed {seed}")
        print(f"{'variant':<12} {'eval loss':>10} {'center err':>11} {'hit rate':>9}")
        for name, m in results.items():
            print(f"{name:<12} {m.mean_loss:>10.4f} {m.mean_center_err:>11.3f} {m.hit_rate:>9.2f}")
            per_variant[name].append(m.mean_center_err)
    if args.seeds > 1:
        print("-- mean center error across seeds")
        for name, errs in per_variant.items():
            print(f"{name:<12} {np.mean(errs):.3f}")


if __name__ == "__main__":
    main()
