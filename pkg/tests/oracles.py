"""Independent brute-force reference implementations.

Deliberately written as plain per-pixel loops with no shared code with the
package, so agreement between the two routes is evidence, not tautology.
"""

import itertools
import math

import numpy as np


def brute_confusion(gt, pred, k):
    """Nested-loop confusion tally; gt pixels of 255 are skipped."""
    counts = [[0] * k for _ in range(k)]
    for g, p in zip(gt.reshape(-1).tolist(), pred.reshape(-1).tolist()):
        if g == 255:
            continue
        counts[g][p] += 1
    return np.array(counts, dtype=np.int64)


def brute_iou(counts):
    """Per-class IoU from a confusion matrix, dict of defined values only."""
    k = len(counts)
    out = {}
    for c in range(k):
        tp = int(counts[c][c])
        fp = sum(int(counts[g][c]) for g in range(k) if g != c)
        fn = sum(int(counts[c][p]) for p in range(k) if p != c)
        union = tp + fp + fn
        if union > 0:
            out[c] = tp / union
    return out


def brute_mean_iou(counts, subset=None):
    per_class = brute_iou(counts)
    classes = sorted(per_class if subset is None else set(subset) & set(per_class))
    return sum(per_class[c] for c in classes) / len(classes)


def brute_remap(ids, class_map, dataset_id):
    """Per-pixel dictionary application of the class mapping."""
    h, w = ids.shape
    out = np.zeros((h, w), dtype=np.uint8)
    for y in range(h):
        for x in range(w):
            value = int(ids[y, x])
            if value == 255:
                out[y, x] = 255
            else:
                out[y, x] = class_map.lookup(dataset_id, value)
    return out


def brute_best_divergence(histograms, fraction, validation_size):
    """Exhaustive optimum over all validation subsets of the target size."""
    keys = sorted(histograms)
    counts = np.array([histograms[k] for k in keys], dtype=np.float64)
    n = len(keys)
    n_val = validation_size(n, fraction)
    grand = counts.sum(axis=0)
    best = math.inf
    for combo in itertools.combinations(range(n), n_val):
        val = counts[list(combo)].sum(axis=0)
        train = grand - val
        if val.sum() <= 0 or train.sum() <= 0:
            continue
        best = min(
            best, float(np.abs(val / val.sum() - train / train.sum()).sum())
        )
    return best
