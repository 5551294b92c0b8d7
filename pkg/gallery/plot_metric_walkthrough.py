"""
How the four metrics react to typical failure modes
===================================================

Start from a perfect map and degrade it: blur the edges, add speckle, shift
the object, and finally predict nothing at all.
"""
import numpy as np
from scipy import ndimage

from dqnet.data import SynthConfig, synth_sample
from dqnet.metrics import evaluate_pair

gt = synth_sample(SynthConfig(size=64, seed=1), 0).mask > 0
rng = np.random.default_rng(0)

cases = {
    "perfect": gt.astype(float),
    "blurred edges": ndimage.gaussian_filter(gt.astype(float), 2.0),
    "speckle": np.clip(gt + rng.normal(0, 0.25, gt.shape), 0, 1),
    "shifted 6px": np.roll(gt, 6, axis=1).astype(float),
    "all background": np.zeros(gt.shape),
}

print(f"{'prediction':<16} {'S':>6} {'E':>6} {'wF':>6} {'MAE':>6}")
for name, pred in cases.items():
    m = evaluate_pair(pred, gt)
    print(f"{name:<16} {m['s_measure']:6.3f} {m['e_measure']:6.3f} {m['weighted_f']:6.3f} {m['mae']:6.3f}")
