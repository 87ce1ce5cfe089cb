#!/usr/bin/env python3
"""Recover the per-operation energy constants from the published
complexity/energy datapoints and check them against the packaged defaults.

The model is E = MACs * e_mac + ACs * e_ac; the five reference points
(two spiking detectors with AC-only cost, three dense detectors with
MAC-only cost) pin both constants by least squares. Run:

    python scripts/fit_energy_constants.py
"""

import numpy as np

from evhybrid.profiling import (
    ENERGY_DATAPOINTS,
    HYBRID_REFERENCE_POINT,
    EnergyModel,
    fit_energy_constants,
)


def main():
    e_mac, e_ac = fit_energy_constants()
    defaults = EnergyModel()
    print(f"fitted   e_mac = {e_mac * 1e12:.4f} pJ   e_ac = {e_ac * 1e12:.4f} pJ")
    print(f"packaged e_mac = {defaults.e_mac * 1e12:.4f} pJ   e_ac = {defaults.e_ac * 1e12:.4f} pJ")
    print()
    print(f"{'model':<20} {'MACs':>10} {'ACs':>10} {'published':>10} {'fit':>10} {'error':>7}")
    for name, macs, acs, joules in ENERGY_DATAPOINTS + [HYBRID_REFERENCE_POINT]:
        est = macs * e_mac + acs * e_ac
        print(
            f"{name:<20} {macs / 1e9:>9.1f}G {acs / 1e9:>9.1f}G "
            f"{joules * 1e3:>8.1f}mJ {est * 1e3:>8.2f}mJ {abs(est - joules) / joules:>6.1%}"
        )
    resid = max(
        abs(macs * e_mac + acs * e_ac - joules) / joules
        for _, macs, acs, joules in ENERGY_DATAPOINTS
    )
    print(f"\nworst reference-point error: {resid:.1%}")


if __name__ == "__main__":
    main()
