"""7-DoF discretized action space: tokenization, de-tokenization, discrepancy."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NUM_DOF = 7
DOF_NAMES = ("dPx", "dPy", "dPz", "dRx", "dRy", "dRz", "grip")
POSITION_DOFS = (0, 1, 2)


@dataclass(frozen=True)
class ActionSpec:
    """Per-DoF action range and bin count.

    ``low`` and ``high`` are length-7 tuples.  Defaults give the normalized
    [-1, 1] range with 256 bins, i.e. a bin width of 1/128.
    """

    low: tuple = (-1.0,) * NUM_DOF
    high: tuple = (1.0,) * NUM_DOF
    bins: int = 256

    def __post_init__(self):
        low = tuple(float(v) for v in self.low)
        high = tuple(float(v) for v in self.high)
        if len(low) != NUM_DOF or len(high) != NUM_DOF:
            raise ValueError(f"action range needs {NUM_DOF} entries per bound")
        if any(lo >= hi for lo, hi in zip(low, high)):
            raise ValueError("every DoF needs min < max")
        if self.bins < 2:
            raise ValueError("bin count must be at least 2")
        object.__setattr__(self, "low", low)
        object.__setattr__(self, "high", high)

    @property
    def lo(self):
        return np.asarray(self.low)

    @property
    def hi(self):
        return np.asarray(self.high)

    @property
    def width(self):
        return (self.hi - self.lo) / self.bins

    def centers(self):
        """Bin-center values, shape (7, J)."""
        return self.lo[:, None] + (np.arange(self.bins) + 0.5)[None, :] * self.width[:, None]

    def clamp(self, action):
        return np.clip(np.asarray(action, dtype=np.float64), self.lo, self.hi)


DEFAULT_SPEC = ActionSpec()


def as_mask(mask):
    """Normalize a DoF mask to a sorted tuple of 0-based indices.

    Accepts 0-based indices; use :func:`parse_dofs` for the 1-based
    ``"1-3"`` notation used in configs.
    """
    idx = tuple(sorted({int(i) for i in mask}))
    if not idx:
        raise ValueError("DoF mask must not be empty")
    if idx[0] < 0 or idx[-1] >= NUM_DOF:
        raise ValueError(f"DoF indices must lie in [0, {NUM_DOF - 1}]")
    return idx


def parse_dofs(text):
    """Parse ``"1"``, ``"1-3"`` or ``"1,2,5"`` (1-based) into a 0-based mask."""
    out = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            a, b = part.split("-", 1)
            out.extend(range(int(a), int(b) + 1))
        else:
            out.append(int(part))
    return as_mask(i - 1 for i in out)


def tokenize(action, spec=DEFAULT_SPEC):
    """Map continuous actions (..., 7) to integer bins (..., 7)."""
    y = spec.clamp(action)
    bins = np.floor((y - spec.lo) / spec.width).astype(np.int64)
    return np.minimum(bins, spec.bins - 1)


def detokenize(bins, spec=DEFAULT_SPEC):
    """Bin centers for integer labels (..., 7)."""
    bins = np.asarray(bins)
    if np.any(bins < 0) or np.any(bins >= spec.bins):
        raise ValueError("bin label out of range")
    return spec.lo + (bins + 0.5) * spec.width


def soft_expectation(probs):
    """Probability-weighted bin index ``sum_j j * p_j`` per DoF (0-based j)."""
    probs = np.asarray(probs, dtype=np.float64)
    return probs @ np.arange(probs.shape[-1], dtype=np.float64)


def d_max(gt, spec=DEFAULT_SPEC, dof=None):
    """Largest deviation reachable from ``gt`` inside the action range.

    With ``dof`` given, ``gt`` may be a full action or that DoF's scalar value.
    """
    gt = np.asarray(gt, dtype=np.float64)
    lo, hi = spec.lo, spec.hi
    if dof is not None:
        if gt.ndim:
            gt = gt[..., dof]
        lo, hi = lo[dof], hi[dof]
    return np.maximum(np.abs(gt - lo), np.abs(gt - hi))


def d_max_bins(gt_bin, bins=256):
    """Largest bin-index deviation from ``gt_bin``."""
    gt_bin = np.asarray(gt_bin)
    if np.any(gt_bin < 0) or np.any(gt_bin >= bins):
        raise ValueError("bin label out of range")
    return np.maximum(gt_bin, bins - 1 - gt_bin)


def nad(pred, gt, spec=DEFAULT_SPEC, mask=POSITION_DOFS):
    """Normalized action discrepancy averaged over the masked DoFs.

    Predictions are clamped into the action range first so the result stays
    in [0, 1].  Works on single actions (7,) or stacks (..., 7).
    """
    idx = list(as_mask(mask))
    pred = spec.clamp(pred)
    gt = spec.clamp(gt)
    ratio = np.abs(pred - gt)[..., idx] / d_max(gt, spec)[..., idx]
    return ratio.mean(axis=-1)


def l1_distance(pred, target, mask=POSITION_DOFS):
    idx = list(as_mask(mask))
    diff = np.abs(np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64))
    return diff[..., idx].mean(axis=-1)


def gripper_closed(action, spec=DEFAULT_SPEC):
    """Binary gripper command: closed when above the range midpoint."""
    mid = 0.5 * (spec.low[6] + spec.high[6])
    return bool(np.asarray(action)[6] > mid)
