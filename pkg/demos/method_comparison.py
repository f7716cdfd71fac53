"""Feature-rewrite methods head to head.

Runs the clean baseline and the three manipulation flavours (neuron-path,
random, static) over three seeds each, then prints the mean attack success
rate and the relative improvement over the baseline.  Under a minute.

    python3 demos/method_comparison.py
"""

import dataclasses

from vfgl_lab import harness

base = harness.RunConfig(dataset="sbm:300,3,0.05,0.005,32,1.0", K=2,
                         local_model="sgc", per_class_paths=True,
                         attack="fga", epochs=50, tau=15, gamma=0.05,
                         delta=1, targets=50, seeds=(0, 1, 2))

configs = [dataclasses.replace(base, manipulation=m)
           for m in ("none", "na2", "rfa", "sfa")]

rows, records = harness.compare_methods(configs, out_dir="runs/comparison")

print(f"\n{'method':<8}{'mean ASR':>10}{'mean AQ':>10}{'improvement':>14}")
for row in rows:
    impv = "-" if row["impv"] is None else f"{row['impv']:+.1f}%"
    print(f"{row['method']:<8}{row['asr']:>9.1f}%{row['aq']:>10.2f}"
          f"{impv:>14}")

print("\nper-seed ASR:")
for method in ("none", "na2", "rfa", "sfa"):
    vals = [r.asr for r in records if r.method == method]
    print(f"  {method:<5} " + "  ".join(f"{v:5.1f}" for v in vals))

print("\nfull table: runs/comparison/comparison.csv")
