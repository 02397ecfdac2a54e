"""Class-balanced train/validation split selection.

The validation subset is chosen so its per-class pixel distribution
tracks the remaining training data. The objective is the L1 distance
between the two normalized distributions (range 0..2). Selection runs a
deterministic greedy construction followed by seeded hill-climbing swaps
that only accept strict improvements, so the result never falls behind
the greedy starting point.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from typing import Hashable, Mapping

import numpy as np

from .catalog import ClassHistogram
from .errors import SegmergeError

Key = Hashable


@dataclass(frozen=True)
class SplitPlan:
    val_records: frozenset
    train_records: frozenset
    divergence: float
    seed: int
    target_fraction: float


def split_divergence(h_val: ClassHistogram, h_train: ClassHistogram) -> float:
    """L1 distance between the normalized class distributions of the two
    sides, ignore pixels excluded."""
    if h_val.k != h_train.k:
        raise SegmergeError("histograms cover different class spaces")
    return _divergence(
        h_val.counts.astype(np.float64), h_train.counts.astype(np.float64)
    )


def _divergence(val_counts: np.ndarray, train_counts: np.ndarray) -> float:
    val_total = val_counts.sum()
    train_total = train_counts.sum()
    if val_total <= 0 or train_total <= 0:
        raise SegmergeError("zero evaluation pixels on one side of the split")
    return float(np.abs(val_counts / val_total - train_counts / train_total).sum())


def validation_size(n: int, target_fraction: float) -> int:
    """round(fraction * N), half-up, clamped to [1, N-1]."""
    size = math.floor(target_fraction * n + 0.5)
    return min(max(size, 1), n - 1)


def _check_inputs(histograms: Mapping, target_fraction: float) -> list:
    if len(histograms) < 2:
        raise SegmergeError("need at least 2 records to split")
    if not 0.0 < target_fraction < 1.0:
        raise SegmergeError(f"target fraction {target_fraction} outside (0, 1)")
    return sorted(histograms)


def _stack(histograms: Mapping, keys: list) -> np.ndarray:
    rows = [np.asarray(histograms[key], dtype=np.float64).reshape(-1) for key in keys]
    k = len(rows[0])
    if any(len(r) != k for r in rows):
        raise SegmergeError("per-record histograms cover different class spaces")
    return np.stack(rows)


def _plan(
    keys: list,
    in_val: np.ndarray,
    counts: np.ndarray,
    seed: int,
    target_fraction: float,
) -> SplitPlan:
    val_counts = counts[in_val].sum(axis=0)
    train_counts = counts[~in_val].sum(axis=0)
    return SplitPlan(
        val_records=frozenset(keys[i] for i in np.nonzero(in_val)[0]),
        train_records=frozenset(keys[i] for i in np.nonzero(~in_val)[0]),
        divergence=_divergence(val_counts, train_counts),
        seed=seed,
        target_fraction=target_fraction,
    )


def propose_split(
    histograms: Mapping[Key, np.ndarray],
    target_fraction: float,
    seed: int,
    sweeps: int = 3,
) -> SplitPlan:
    """Select a validation subset minimizing the class-distribution L1 gap.

    ``histograms`` maps each record key to its per-class evaluation-pixel
    counts. Greedy ties break toward the lowest record key; the seed only
    drives the order in which hill-climbing considers swaps, so identical
    inputs and seed give an identical plan.
    """
    keys = _check_inputs(histograms, target_fraction)
    counts = _stack(histograms, keys)
    n, _ = counts.shape
    n_val = validation_size(n, target_fraction)
    totals = counts.sum(axis=1)
    grand = counts.sum(axis=0)

    in_val = np.zeros(n, dtype=bool)
    val_counts = np.zeros_like(grand)

    # Greedy: add the candidate whose inclusion minimizes the divergence.
    for _ in range(n_val):
        cand = np.nonzero(~in_val)[0]
        new_val = val_counts + counts[cand]
        new_val_tot = new_val.sum(axis=1, keepdims=True)
        new_train = grand - new_val
        new_train_tot = new_train.sum(axis=1, keepdims=True)
        ok = (new_val_tot[:, 0] > 0) & (new_train_tot[:, 0] > 0)
        with np.errstate(divide="ignore", invalid="ignore"):
            div = np.abs(new_val / new_val_tot - new_train / new_train_tot).sum(axis=1)
        div = np.where(ok, div, np.inf)
        pick = cand[int(np.argmin(div))]  # argmin takes the first, lowest key wins ties
        in_val[pick] = True
        val_counts += counts[pick]

    # Hill-climbing: first-improving val<->train swap per member, seeded order.
    rng = random.Random(seed)
    for _ in range(max(sweeps, 0)):
        improved = False
        order = np.nonzero(in_val)[0].tolist()
        rng.shuffle(order)
        for i in order:
            if not in_val[i]:
                continue
            current = _swap_divergence(val_counts, grand)
            train_idx = np.nonzero(~in_val)[0]
            trial_val = val_counts - counts[i] + counts[train_idx]
            trial_tot = trial_val.sum(axis=1, keepdims=True)
            trial_train = grand - trial_val
            trial_train_tot = trial_train.sum(axis=1, keepdims=True)
            ok = (trial_tot[:, 0] > 0) & (trial_train_tot[:, 0] > 0)
            with np.errstate(divide="ignore", invalid="ignore"):
                div = np.abs(
                    trial_val / trial_tot - trial_train / trial_train_tot
                ).sum(axis=1)
            div = np.where(ok, div, np.inf)
            best = int(np.argmin(div))
            if div[best] < current:
                j = int(train_idx[best])
                in_val[i] = False
                in_val[j] = True
                val_counts = val_counts - counts[i] + counts[j]
                improved = True
        if not improved:
            break

    return _plan(keys, in_val, counts, seed, target_fraction)


def _swap_divergence(val_counts: np.ndarray, grand: np.ndarray) -> float:
    return _divergence(val_counts, grand - val_counts)


def random_split(
    histograms: Mapping[Key, np.ndarray], target_fraction: float, seed: int
) -> SplitPlan:
    """Uniformly random validation subset of the target size; the baseline
    the optimizer is judged against."""
    keys = _check_inputs(histograms, target_fraction)
    counts = _stack(histograms, keys)
    n = len(keys)
    n_val = validation_size(n, target_fraction)
    rng = np.random.default_rng(seed)
    chosen = rng.choice(n, size=n_val, replace=False)
    in_val = np.zeros(n, dtype=bool)
    in_val[chosen] = True
    return _plan(keys, in_val, counts, seed, target_fraction)
