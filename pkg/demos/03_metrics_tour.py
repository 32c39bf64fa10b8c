"""Tour of the segmentation metrics: confusion matrix, IoU, accuracies.

Conventions used throughout the package:
  * confusion-matrix rows are ground truth, columns are predictions;
  * IoU = TP / (TP + FP + FN) per class;
  * classes absent from both truth and prediction are excluded from
    averages rather than scored zero;
  * the 7-class report drops Unlabeled ground truth while still counting
    mispredictions into Unlabeled as errors.

Run:  python3 demos/03_metrics_tour.py
"""
import numpy as np

from fusionseg import (CLASS_NAMES, confusion, iou_per_class, miou, report)
from fusionseg.metrics import accuracies, mean_iou_of

rng = np.random.default_rng(0)

# A synthetic "prediction" that is right 85% of the time.
truth = rng.integers(0, 8, size=5000)
pred = truth.copy()
wrong = rng.random(5000) < 0.15
pred[wrong] = rng.integers(0, 8, size=int(wrong.sum()))

m = confusion(pred, truth)
print("confusion matrix (rows = truth):")
print(m.counts)

iou, present = iou_per_class(m)
for c in range(8):
    flag = "" if present[c] else "  (absent)"
    print(f"  IoU {CLASS_NAMES[c]:<13} {iou[c]:.3f}{flag}")

overall, per_class = accuracies(m)
print(f"\noverall accuracy  {overall:.3f}")
print(f"per-class accuracy {per_class:.3f}  (mean recall)")
print(f"mIoU               {miou(m):.3f}")

# Absent classes are flagged, not scored zero: here class 5 never occurs.
small_truth = np.array([0, 0, 1, 1])
small_pred = np.array([0, 1, 1, 1])
m2 = confusion(small_pred, small_truth, num_classes=6)
_, present2 = iou_per_class(m2)
print(f"\nabsent classes in a tiny example: "
      f"{[CLASS_NAMES[c] for c in range(6) if not present2[c]]}")
print(f"mIoU skips them: {miou(m2):.3f}")

# Averaging already-computed per-class IoU values.
print(f"\nplain mean of IoUs [0.9, 0.8, 0.7]: "
      f"{mean_iou_of([0.9, 0.8, 0.7]):.3f}")

# The standard reports: 8-class (with Unlabeled) and 7-class (without).
print("\n7-class report:")
print(report(m, classes=7).to_text())
