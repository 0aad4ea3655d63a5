"""Active learning for gland segmentation, guided by a proxy classifier's saliency.

Run: python demos/04_segmentation.py   (a few minutes on one core)
"""
import warnings
from dataclasses import replace

import numpy as np

from ideal.segharness import SegALConfig, dice_at, run_segmentation_al

warnings.simplefilter("ignore")
base = SegALConfig(seeds=[0, 1], max_fraction=0.5, ae_epochs=60, probe_epochs=3)
for strategy in ("random", "deep_features"):
    curve = run_segmentation_al(replace(base, strategy=strategy))
    fr, dice = curve.mean_curve()
    at_half = np.mean(list(dice_at(curve, 0.5).values()))
    print(f"{strategy:14s} Dice at 50% of the pool: {at_half:.3f}")
    print("   curve:", ", ".join(f"{f:.1f}:{d:.3f}" for f, d in zip(fr, dice)))
