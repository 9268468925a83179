"""How the evaluation metrics behave on small hand-made masks.

    python demos/metrics_walkthrough.py
"""

import numpy as np

from latentseg.evalharness import f_beta, iou, max_f_beta, pixel_accuracy, thresholds

gt = np.zeros((8, 8), np.uint8)
gt[2:6, 2:6] = 1  # a 4x4 square object

shifted = np.roll(gt, 1, axis=1)  # same object, one pixel to the right
print("one-pixel shift:")
print(f"  acc {pixel_accuracy(shifted, gt):.3f}  iou {iou(shifted, gt):.3f}  f_beta {f_beta(shifted, gt):.3f}")

# F-beta with beta^2 = 0.3 weights precision over recall: an under-segmentation
# scores better than an over-segmentation of the same pixel error.
under = gt.copy()
under[2, 2:6] = 0
over = gt.copy()
over[1, 2:6] = 1
print(f"missing a row: f_beta {f_beta(under, gt):.3f};  extra row: f_beta {f_beta(over, gt):.3f}")

# maxF-beta searches thresholds for a soft prediction. A blurred square peaks
# once the threshold sits between the blur levels.
soft = 0.3 * np.ones((8, 8))
soft[1:7, 1:7] = 0.6
soft[2:6, 2:6] = 0.9
print(f"soft map: f_beta at 0.5 {f_beta(soft >= 0.5, gt):.3f}, max over 255 thresholds "
      f"{max_f_beta([soft], [gt]):.3f}")
print(f"threshold grid runs {thresholds(255)[0]:.5f} ... {thresholds(255)[-1]:.5f}")
