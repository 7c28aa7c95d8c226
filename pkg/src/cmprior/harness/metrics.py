from __future__ import annotations

import numpy as np

from ..errors import DimensionError


def miou(pred, gt, classes: int | None = None, ignore: int | None = None):
    """Per-class IoU and their mean over classes present in ``pred`` or ``gt``.

    Accepts raster maps or integer arrays. Returns ``(ious, mean)`` where
    ``ious[k]`` is NaN for classes absent from both inputs (or ignored).
    """
    p = np.asarray(getattr(pred, "data", pred)).ravel()
    g = np.asarray(getattr(gt, "data", gt)).ravel()
    if p.shape != g.shape:
        raise DimensionError("prediction and ground truth extents differ")
    if classes is None:
        classes = int(max(p.max(initial=0), g.max(initial=0))) + 1
    inter = np.bincount(g[p == g], minlength=classes)[:classes].astype(np.float64)
    count_p = np.bincount(p, minlength=classes)[:classes]
    count_g = np.bincount(g, minlength=classes)[:classes]
    union = (count_p + count_g - inter).astype(np.float64)
    ious = np.full(classes, np.nan)
    present = union > 0
    ious[present] = inter[present] / union[present]
    if ignore is not None:
        ious[ignore] = np.nan
    valid = ~np.isnan(ious)
    return ious, float(ious[valid].mean()) if valid.any() else float("nan")
