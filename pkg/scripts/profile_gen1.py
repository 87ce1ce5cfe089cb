#!/usr/bin/env python3
"""Analytic compute profile of the full-size default backbone (304x240
sensor, 10 bins): per-layer MACs and parameters, plus the dense vs
event-driven energy split on a synthetic stream.

    python scripts/profile_gen1.py [--trace]

--trace also runs the spiking stack on one synthetic window to count
event-driven accumulates (slower: the full-size forward pass runs on CPU).
"""

import argparse

import numpy as np

from evhybrid.config import RunConfig
from evhybrid.model import HybridModel
from evhybrid.numerics import Tensor
from evhybrid.profiling import (
    EnergyModel,
    count_dense_macs,
    count_spike_acs,
    energy_estimate,
    hybrid_energy,
    profile_text,
)
from evhybrid.snn import snn_backbone_forward


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--trace", action="store_true")
    args = parser.parse_args()

    cfg = RunConfig().validate()
    counters = count_dense_macs(cfg)
    if args.trace:
        model = HybridModel(cfg, seed=0)
        counts = np.random.default_rng(0).poisson(0.01, (10, 2, 304, 240)).astype(np.int64)
        trace = []
        snn_backbone_forward(Tensor(counts.astype(np.float32)), model.snn_blocks, trace=trace)
        counters = counters.merge(count_spike_acs(trace))
    model = EnergyModel()
    print(profile_text(counters, model))
    print(f"dense execution:  {energy_estimate(counters, model) * 1e3:.2f} mJ / window")
    print(f"hybrid execution: {hybrid_energy(counters, model) * 1e3:.2f} mJ / window")


if __name__ == "__main__":
    main()
