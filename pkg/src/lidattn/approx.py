"""How closely performer attention tracks exact softmax attention as r grows."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .attention import FeatureMap, HeadTriplet, performer_attention, self_attention
from .numeric import subseed_rng


@dataclass
class ApproxRow:
    r: int
    seed: int
    error: float


def approx_inputs(seed, n, d_head, input_std=1.0):
    """Gaussian Q, K, V with standard deviation ``input_std`` for one trial."""
    rng = subseed_rng(seed, "approx-inputs")
    return HeadTriplet(*(input_std * rng.standard_normal((n, d_head)) for _ in range(3)))


def approximation_errors(r_grid, seeds, n, d_head, normalized=True, input_std=1.0):
    """Relative Frobenius error of performer vs exact context for every (r, seed).

    The inputs of a trial depend only on its seed, so every r sees the same
    Q, K, V; the random projection is drawn per (r, seed). The error grows
    quickly with ``input_std``: the variance of the positive-feature kernel
    estimate scales like ``exp(|q + k|^2)`` in the scaled inputs.
    """
    rows = []
    for seed in seeds:
        head = approx_inputs(seed, n, d_head, input_std)
        exact, _ = self_attention(head)
        norm = np.linalg.norm(exact)
        for r in r_grid:
            fm = FeatureMap.draw(subseed_rng(seed, f"approx-omega-{r}"), r, d_head)
            approx = performer_attention(head, fm, normalized=normalized)
            rows.append(ApproxRow(r, seed, float(np.linalg.norm(approx - exact) / norm)))
    return rows


def median_by_r(rows):
    out = {}
    for r in sorted({row.r for row in rows}):
        out[r] = float(np.median([row.error for row in rows if row.r == r]))
    return out


def write_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["r", "seed", "error"])
        for row in rows:
            w.writerow([row.r, row.seed, repr(row.error)])
