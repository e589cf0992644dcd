"""Fokker-Planck matching and pseudo-ML on dense and sparse pendulum observations.

A reduced budget (first argument, default 1000 iterations) keeps this to a few minutes.
"""

import sys

from dimwise.fpmatch import FpTrainConfig, fp_experiment

iters = int(sys.argv[1]) if len(sys.argv) > 1 else 1000
rows = fp_experiment(retentions=(1.0, 0.2, 0.04), seed=0, config=FpTrainConfig(iters=iters),
                     log=print)
print(f"{'method':<10} {'retention':>9} {'drift MAE':>10} {'diffusion MAE':>14}")
for r in rows:
    print(f"{r['method']:<10} {r['retention']:>9} {r['drift_mae']:>10.4f} "
          f"{r['diffusion_mae']:>14.4f}")
