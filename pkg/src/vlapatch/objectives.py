"""Differentiable attack losses on (N, 7, J) policy logits.

Each ``*_graph`` function records the loss on a tape and returns a scalar
tensor; the plain-named wrappers evaluate it for numpy logits.  All losses
are averaged over the batch and are meant to be minimized.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .actions import DEFAULT_SPEC, POSITION_DOFS, as_mask, d_max_bins, tokenize
from .autodiff import Tape

OBJECTIVES = ("uada", "upa", "tma", "untargeted")
EPS = 1e-6


@dataclass(frozen=True)
class ObjectiveSpec:
    kind: str = "uada"
    mask: tuple = (0,)
    alpha: float = 0.8
    beta: float = 0.2
    targets: tuple | None = None
    eps: float = EPS

    def __post_init__(self):
        kind = self.kind.lower()
        if kind not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.kind!r}; expected one of {OBJECTIVES}")
        object.__setattr__(self, "kind", kind)
        mask = as_mask(self.mask)
        if kind == "upa" and not set(POSITION_DOFS) <= set(mask):
            raise ValueError("UPA acts on the position DoFs 1-3; the mask must cover them")
        object.__setattr__(self, "mask", mask)
        if kind == "tma":
            if self.targets is None:
                raise ValueError("TMA needs one target value per masked DoF")
            targets = tuple(float(t) for t in np.broadcast_to(self.targets, (len(mask),)))
            object.__setattr__(self, "targets", targets)
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")


def _batched(tape, logits):
    if logits.value.ndim == 2:
        return tape.reshape(logits, (1,) + logits.shape)
    return logits


def uada_graph(tape, logits, gt_bins, mask=(0,), eps=EPS):
    """Reciprocal of the summed bin-unit discrepancy ratios."""
    logits = _batched(tape, logits)
    idx = list(as_mask(mask))
    n, _, bins = logits.shape
    gt = np.asarray(gt_bins, dtype=np.int64).reshape(n, -1)[:, idx].astype(np.float64)
    probs = tape.softmax(tape.take(logits, idx, axis=1))
    soft = tape.sum(tape.mul(probs, np.arange(bins, dtype=np.float64)), axis=-1)
    ratio = tape.mul(tape.abs(tape.sub(soft, gt)), 1.0 / d_max_bins(gt.astype(np.int64), bins))
    per_sample = tape.reciprocal(tape.maximum(tape.sum(ratio, axis=1), eps))
    return tape.mean(per_sample)


def upa_position_graph(tape, y_adv, y, alpha=0.8, beta=0.2, eps=EPS):
    """UPA on an (N, 3) position tensor ``y_adv`` against reference ``y``."""
    y = np.asarray(y, dtype=np.float64).reshape(y_adv.shape)
    y_norm = np.linalg.norm(y, axis=-1)
    # frames whose reference motion is ~zero only keep the distance term
    valid = (y_norm >= eps).astype(np.float64)
    inv_adv = tape.reciprocal(tape.maximum(tape.l2norm(y_adv), eps))
    cos = tape.mul(tape.mul(tape.dot(y_adv, tape.constant(y)), inv_adv),
                   valid / np.maximum(y_norm, eps))
    dist = tape.l2norm(tape.sub(y_adv, y))
    per_sample = tape.add(tape.scale(cos, alpha),
                          tape.scale(tape.reciprocal(tape.maximum(dist, eps)), beta))
    return tape.mean(per_sample)


def soft_position(tape, logits, spec=DEFAULT_SPEC):
    """Expected position delta over bin centers, (N, 3)."""
    pos = list(POSITION_DOFS)
    probs = tape.softmax(tape.take(logits, pos, axis=1))
    return tape.sum(tape.mul(probs, spec.centers()[pos]), axis=-1)


def upa_graph(tape, logits, gt_actions, spec=DEFAULT_SPEC, alpha=0.8, beta=0.2, eps=EPS):
    """Direction (cosine) plus inverse-distance loss on the soft position delta."""
    logits = _batched(tape, logits)
    n = logits.shape[0]
    y = np.asarray(gt_actions, dtype=np.float64).reshape(n, -1)[:, list(POSITION_DOFS)]
    return upa_position_graph(tape, soft_position(tape, logits, spec), y, alpha, beta, eps)


def tma_graph(tape, logits, targets, mask=(0,), spec=DEFAULT_SPEC):
    """Cross-entropy toward the bins of the target values, summed over the mask."""
    logits = _batched(tape, logits)
    idx = list(as_mask(mask))
    targets = np.broadcast_to(np.asarray(targets, dtype=np.float64), (len(idx),))
    lo, hi = spec.lo[idx], spec.hi[idx]
    if np.any(targets < lo) or np.any(targets > hi):
        raise ValueError(f"TMA targets {targets.tolist()} fall outside the action range")
    full = np.zeros(len(spec.low))
    full[idx] = targets
    tbins = tokenize(full, spec)[idx]
    n = logits.shape[0]
    logp = tape.log_softmax(tape.take(logits, idx, axis=1))
    nll = tape.pick(logp, np.broadcast_to(tbins, (n, len(idx))))
    return tape.scale(tape.sum(nll), -1.0 / n)


def untargeted_graph(tape, logits, gt_bins, mask=(0,)):
    """Negated cross-entropy of the ground-truth bins."""
    logits = _batched(tape, logits)
    idx = list(as_mask(mask))
    n = logits.shape[0]
    gt = np.asarray(gt_bins, dtype=np.int64).reshape(n, -1)[:, idx]
    logp = tape.log_softmax(tape.take(logits, idx, axis=1))
    return tape.scale(tape.sum(tape.pick(logp, gt)), 1.0 / n)


def objective_graph(obj, tape, logits, gt_actions, spec=DEFAULT_SPEC):
    """Dispatch on ``obj.kind``; ``gt_actions`` are continuous (N, 7)."""
    gt_actions = np.asarray(gt_actions, dtype=np.float64)
    if obj.kind == "uada":
        return uada_graph(tape, logits, tokenize(gt_actions, spec), obj.mask, obj.eps)
    if obj.kind == "upa":
        return upa_graph(tape, logits, gt_actions, spec, obj.alpha, obj.beta, obj.eps)
    if obj.kind == "tma":
        return tma_graph(tape, logits, obj.targets, obj.mask, spec)
    return untargeted_graph(tape, logits, tokenize(gt_actions, spec), obj.mask)


def _eval(graph, logits, *args, **kwargs):
    tape = Tape()
    return float(graph(tape, tape.constant(logits), *args, **kwargs).value)


def loss_uada(logits, gt_bins, mask=(0,), eps=EPS):
    return _eval(uada_graph, logits, gt_bins, mask, eps)


def loss_upa(logits, gt_actions, spec=DEFAULT_SPEC, alpha=0.8, beta=0.2, eps=EPS):
    return _eval(upa_graph, logits, gt_actions, spec, alpha, beta, eps)


def loss_tma(logits, targets, mask=(0,), spec=DEFAULT_SPEC):
    return _eval(tma_graph, logits, targets, mask, spec)


def loss_plain_untargeted(logits, gt_bins, mask=(0,)):
    return _eval(untargeted_graph, logits, gt_bins, mask)


def upa_value(y_adv, y, alpha=0.8, beta=0.2, eps=EPS):
    """UPA loss for explicit position vectors (N, 3) or (3,)."""
    tape = Tape()
    y_adv = np.atleast_2d(np.asarray(y_adv, dtype=np.float64))
    return float(upa_position_graph(tape, tape.constant(y_adv), y, alpha, beta, eps).value)
