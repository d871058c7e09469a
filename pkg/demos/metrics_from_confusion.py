"""Score the reconstructed ResNet50V2 and Xception test-set predictions.

    python3 demos/metrics_from_confusion.py
"""
import numpy as np

from tumorbench import CLASS_NAMES, confusion_matrix, full_report

MATRICES = {
    "ResNet50V2": [[65, 0, 0], [1, 151, 0], [0, 0, 95]],
    "Xception": [[62, 0, 3], [2, 150, 0], [0, 0, 95]],
}


def labels(cm):
    cm = np.asarray(cm)
    t = np.repeat(np.repeat(np.arange(3), 3), cm.ravel())
    p = np.repeat(np.tile(np.arange(3), 3), cm.ravel())
    return t, p


for name, cm in MATRICES.items():
    y_true, y_pred = labels(cm)
    assert np.array_equal(confusion_matrix(y_true, y_pred, 3).counts, cm)
    prob = np.eye(3)[y_pred]
    r = full_report(y_true, prob, CLASS_NAMES)
    print(f"{name}: acc {100 * r.accuracy:.2f}  P {100 * r.macro_precision:.2f}  R {100 * r.macro_recall:.2f}  "
          f"F1 {100 * r.macro_f1:.2f}  MAE {100 * r.mae:.2f}  RMSE {100 * r.rmse:.2f}")
    print(f"    MCC {r.mcc}  kappa {r.kappa}  CSI {r.csi:.5f}")
