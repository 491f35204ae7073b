"""Tabulate the truncated drift and its smoothed versions.

    python3 demos/drift_smoothing.py

Writes drift_delta_<delta>.csv files and prints the L2 gap for each delta.
"""

from thinlayer.drift import RegularizedDrift, p_delta_l2_distance, write_drift_samples

for delta in (0.2, 0.1, 0.05):
    drift = RegularizedDrift.from_config((0.0, 1.0, -1.0), delta)
    gap = p_delta_l2_distance(drift.poly, drift.moll)
    write_drift_samples(drift, f"drift_delta_{delta}.csv")
    print(f"delta={delta:<5g} ||P_delta - P||_L2 = {gap:.4e}  P_delta(0) = {drift(0.0):.4e}")
