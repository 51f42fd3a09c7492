"""
Overlap and surface-distance metrics
====================================

Dice measures volume overlap; HD95 measures how far the two surfaces
stray from each other (95th percentile, in millimetres, so voxel
spacing matters).
"""

import numpy as np

from neuvol import dice_metric, hd95

# Ground truth: a 6x6x6 cube. Prediction: the same cube shifted by two
# voxels along the first axis.
truth = np.zeros((16, 16, 16), np.int32)
truth[4:10, 4:10, 4:10] = 1
pred = np.roll(truth, 2, axis=0)

print("dice:", round(dice_metric(pred, truth, class_id=1), 4))

# With isotropic 1 mm voxels the farthest surface points sit 2 mm apart.
print("hd95 @ 1 mm spacing:", hd95(pred == 1, truth == 1, (1.0, 1.0, 1.0)), "mm")

# The same voxel shift at 3 mm slice thickness is a 6 mm error: distances
# are computed in physical space.
print("hd95 @ 3 mm axis-0 spacing:",
      hd95(pred == 1, truth == 1, (3.0, 1.0, 1.0)), "mm")

# A single stray false-positive voxel far from the object barely moves the
# 95th percentile, while the classic (100th percentile) Hausdorff distance
# would jump to the outlier. That robustness is the point of HD95.
noisy = truth.copy()
noisy[15, 15, 15] = 1
print("hd95 with one distant stray voxel:",
      round(hd95(noisy == 1, truth == 1, (1.0, 1.0, 1.0)), 3), "mm")

# Empty predictions have no surface: the metric is undefined rather than 0.
print("hd95 with an empty prediction:",
      hd95(np.zeros_like(truth) == 1, truth == 1, (1.0, 1.0, 1.0)))
