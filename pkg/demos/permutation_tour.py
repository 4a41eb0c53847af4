"""Shuffle patches across a group of strips and undo it at the feature level.

    python3 demos/permutation_tour.py
"""

import numpy as np

from rclstr.permute import divide, permute_blocks, shuffle_groups, unshuffle_features
from rclstr.textgen import DataConfig, generate_strips

strips = generate_strips(DataConfig(), 7, 4)
images = np.stack([s.pixels for s in strips])
print("words:", [s.text for s in strips])

N, M = 2, 2
division = divide(images, N)
shuffled, record = shuffle_groups(division, M, rng_seed=3)
print(f"N={N} patches per strip, groups of M={M} strips")
for g, row in enumerate(record.pi):
    print(f"  group {g}: slot -> source patch {row.tolist()}")


def ascii_strip(img, width=64):
    cols = img.max(axis=0)[:width]
    return "".join("#" if c > 0.5 else ("+" if c > 0.25 else ".") for c in cols)


for before, after in zip(images, shuffled):
    print("  in ", ascii_strip(before))
    print("  out", ascii_strip(after))

# per-frame features of the shuffled strips, restored to the original order
T = 16
features = np.random.default_rng(0).normal(size=(len(images), 8, T))
restored = unshuffle_features(permute_blocks(features, record), record)
print("unshuffle(permute(features)) == features:", np.array_equal(restored, features))
