"""Walk through one vanishing-width run: micro solves against the S1 limit.

Run from the repository root:

    python3 demos/s1_walkthrough.py [out_dir]

Prints the bulk errors per eps and writes report.csv / report.svg.
"""

import sys
from pathlib import Path

from thinlayer import load_config
from thinlayer.study import fit_rate, plot_report, study_eps

root = Path(__file__).resolve().parents[1]
out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("demo_s1")

config = load_config(root / "configs" / "s1.yaml")
print(f"classification: {config.classify()}, kappa = eps, obstacle {config.geometry.cell}")

eps_list = [0.25, 0.125, 0.0625]
report = study_eps(config, eps_list)
for eps, el, er, em in zip(eps_list, report.err_L, report.err_R, report.err_layer_avg):
    print(f"eps={eps:<7g} err_L={el:.4e}  err_R={er:.4e}  layer mean gap={em:.4e}")
print(f"fitted slope of err_L: {fit_rate(report.err_L, eps_list):.2f}")

csv_path = report.write(out)
plot_report(csv_path, out / "report.svg", "eps")
print(f"wrote {csv_path} and {out / 'report.svg'}")
