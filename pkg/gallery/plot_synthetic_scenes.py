"""
Synthetic camouflage scenes
===========================

Each scene is a band-limited colour texture with one blob whose interior is a
mirrored, shifted copy of the same texture.  ``delta`` blends between the
untouched background (0) and the full mirror (1).
"""
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from dqnet.data import SynthConfig, gen_synthetic, to_uint8

out = Path(__file__).parent / "_output"
out.mkdir(exist_ok=True)

# one row per camouflage strength, same seeds in every row
deltas = [0.1, 0.3, 0.5, 1.0]
rows = []
for delta in deltas:
    scenes = gen_synthetic(SynthConfig(size=96, delta=delta, seed=4), 4)
    tiles = []
    for s in scenes:
        edge = np.abs(np.diff(s.mask, axis=0, prepend=0)) + np.abs(np.diff(s.mask, axis=1, prepend=0))
        outlined = s.image.copy()
        outlined[0][edge > 0] = 1.0  # red outline marks the hidden object
        tiles.append(np.concatenate([s.image, outlined], axis=2))
    rows.append(np.concatenate(tiles, axis=2))
    # the mean colour is preserved by the mirror; what delta changes is the seam at the outline
    seams = []
    for s in scenes:
        m = s.mask > 0
        ring = ndimage.binary_dilation(m) & ~ndimage.binary_erosion(m)
        grad = sum(np.hypot(*np.gradient(c)) for c in s.image)
        seams.append(grad[ring].mean() / grad[~ring].mean())
    print(f"delta {delta:.1f}: gradient on the outline / elsewhere {np.mean(seams):.3f}")

sheet = np.concatenate(rows, axis=1)
Image.fromarray(to_uint8(sheet.transpose(1, 2, 0))).save(out / "synthetic_scenes.png")
print("wrote", out / "synthetic_scenes.png")
