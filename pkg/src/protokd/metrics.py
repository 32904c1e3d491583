"""Dice overlap and region bookkeeping."""

from __future__ import annotations

from typing import Iterable, Mapping

import numpy as np


def default_regions(num_classes: int) -> dict[str, tuple[int, ...]]:
    """One region per foreground class plus their union, the whole-tumour analogue."""
    regions = {f"class{k}": (k,) for k in range(1, num_classes)}
    regions["whole"] = tuple(range(1, num_classes))
    return regions


def validate_regions(regions: Mapping[str, Iterable[int]], num_classes: int) -> dict[str, tuple[int, ...]]:
    out = {}
    for name, classes in regions.items():
        classes = tuple(int(c) for c in classes)
        if not classes:
            raise ValueError(f"region {name!r} is empty")
        if any(not 0 <= c < num_classes for c in classes):
            raise ValueError(f"region {name!r} has class indices outside [0, {num_classes})")
        out[name] = classes
    return out


def dice_score(pred, gt, region: Iterable[int]) -> float:
    """``2|P∩G| / (|P| + |G|)`` after binarising both maps by region membership.

    Returns 1.0 when both masks are empty.
    """
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    classes = list(region)
    p = np.isin(pred, classes)
    g = np.isin(gt, classes)
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / total


def region_dice(preds, gts, regions: Mapping[str, Iterable[int]]) -> dict[str, float]:
    """Per-region Dice averaged over samples (leading axis of ``preds``/``gts``)."""
    preds, gts = np.asarray(preds), np.asarray(gts)
    return {
        name: float(np.mean([dice_score(p, g, classes) for p, g in zip(preds, gts)]))
        for name, classes in regions.items()
    }


def mean_dice(per_region: Mapping[str, float]) -> float:
    return float(np.mean(list(per_region.values())))
