"""Compare selection strategies on a reduced version of the standard task.

Run: python demos/02_learning_curves.py   (a few minutes on one core)
"""
import warnings
from dataclasses import replace

from ideal.alloop import ALConfig, run_active_learning, summarize

warnings.simplefilter("ignore")
base = ALConfig(seeds=[0, 1, 2], ae_epochs=60, probe_epochs=3)

curves = [run_active_learning(replace(base, strategy=s))
          for s in ("random", "kurtosis", "pyrad_1st", "deep_features")]

summary = summarize(curves)
print(f"full-pool reference AUC: {curves[0].fsl_reference():.3f}")
print(f"{'strategy':16s} {'crossing':>8s} {'final AUC':>9s} {'AULC':>7s}")
for c in curves:
    s = summary["strategies"][c.strategy]
    print(f"{c.strategy:16s} {s['crossing_fraction_mean']:8.2f} {s['final_auc']:9.3f} "
          f"{s['aulc']:7.4f}")
fr, auc = curves[-1].mean_curve()
print("deep_features mean curve:", ", ".join(f"{f:.1f}:{a:.3f}" for f, a in zip(fr, auc)))
