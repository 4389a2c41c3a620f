"""Binary STAPLE: EM estimate of a consensus mask and per-rater performance."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

# keeps sensitivities/specificities strictly inside (0, 1)
PROB_CLIP = 1e-10


@dataclass
class StapleResult:
    """``probability`` is the posterior of foreground per voxel (mask shape)."""

    probability: np.ndarray
    sensitivity: np.ndarray
    specificity: np.ndarray
    prior: float
    iterations: int
    converged: bool

    def consensus(self, threshold: float = 0.5) -> np.ndarray:
        return self.probability > threshold


def _stack(masks: Sequence) -> np.ndarray:
    if len(masks) == 0:
        raise ValueError("STAPLE needs at least one rater mask")
    arrays = [np.asarray(getattr(m, "data", m)) for m in masks]
    shape = arrays[0].shape
    for i, a in enumerate(arrays):
        if a.shape != shape:
            raise ValueError(f"rater {i} has shape {a.shape}, expected {shape}")
    ref = masks[0]
    for i, m in enumerate(masks):
        if hasattr(m, "same_geometry") and hasattr(ref, "same_geometry") and not m.same_geometry(ref):
            raise ValueError(f"rater {i} does not share the first rater's geometry")
    return np.stack([a.reshape(-1) != 0 for a in arrays]).astype(np.float64)


def staple(
    masks: Sequence,
    init_p: float = 0.99,
    init_q: float = 0.99,
    tol: float = 1e-6,
    max_iter: int = 100,
) -> StapleResult:
    """Run binary STAPLE on rater masks (LabelVolumes or arrays).

    The foreground prior is fixed to the mean rater foreground fraction.
    Each iteration is an E-step (voxel posteriors) followed by an M-step
    (sensitivity ``p`` and specificity ``q`` per rater, clipped to
    ``[PROB_CLIP, 1 - PROB_CLIP]``). Iteration stops when the largest change
    in the posterior drops below ``tol``; the first iteration never counts as
    converged. A rater parameter whose denominator is zero keeps its value.
    """
    if not 0 < init_p < 1 or not 0 < init_q < 1:
        raise ValueError("init_p and init_q must lie in (0, 1)")
    if max_iter < 1:
        raise ValueError("max_iter must be positive")
    d = _stack(masks)  # (raters, voxels)
    shape = np.asarray(getattr(masks[0], "data", masks[0])).shape
    n_raters = d.shape[0]
    prior = float(d.mean())
    p = np.full(n_raters, float(init_p))
    q = np.full(n_raters, float(init_q))

    w_old = None
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        a = prior * np.prod(np.where(d > 0, p[:, None], 1.0 - p[:, None]), axis=0)
        b = (1.0 - prior) * np.prod(np.where(d > 0, 1.0 - q[:, None], q[:, None]), axis=0)
        w = a / (a + b)

        fg, bg = w.sum(), (1.0 - w).sum()
        if fg > 0:
            p = (d * w).sum(axis=1) / fg
        if bg > 0:
            q = ((1.0 - d) * (1.0 - w)).sum(axis=1) / bg
        p = np.clip(p, PROB_CLIP, 1.0 - PROB_CLIP)
        q = np.clip(q, PROB_CLIP, 1.0 - PROB_CLIP)

        delta = np.inf if w_old is None else float(np.abs(w - w_old).max())
        w_old = w
        if delta < tol:
            converged = True
            break

    return StapleResult(w_old.reshape(shape), p, q, prior, it, converged)
