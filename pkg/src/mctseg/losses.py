"""Training objectives, the Dice metric, and label/region bookkeeping.

Labels are integer volumes with 0 background, 1 necrosis/non-enhancing,
2 edema, 3 enhancing. Evaluation regions are nested unions of the
foreground classes.
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import tensor as T
from .errors import NonPositiveWeight, ShapeMismatch
from .model import mfd_loss
from .tensor import Tensor


class RegionId(Enum):
    ET = frozenset({3})
    TC = frozenset({1, 3})
    WT = frozenset({1, 2, 3})


REGIONS = (RegionId.ET, RegionId.TC, RegionId.WT)
FOREGROUND_CLASSES = (1, 2, 3)
DICE_EPS = 1e-5


def region_map(labels, region):
    """Boolean membership volume for one evaluation region."""
    labels = np.asarray(labels)
    out = np.zeros(labels.shape, dtype=bool)
    for c in region.value:
        out |= labels == c
    return out


def dice_score(pred, truth, region):
    """Hard Dice overlap 2|P∩T|/(|P|+|T|); 1.0 when both sets are empty."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeMismatch(f"pred {pred.shape} != truth {truth.shape}")
    p = region_map(pred, region)
    t = region_map(truth, region)
    denom = int(p.sum()) + int(t.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & t).sum()) / denom


def wce_loss(logits, target, weights):
    """Per-voxel weighted cross-entropy, averaged over voxels."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (logits.shape[0],):
        raise ShapeMismatch(f"need one weight per class, got {weights.shape}")
    if np.any(weights <= 0):
        raise NonPositiveWeight(f"class weights must be positive, got {weights}")
    target = np.asarray(target)
    if target.shape != logits.shape[1:]:
        raise ShapeMismatch(f"target {target.shape} != logits spatial {logits.shape[1:]}")
    logp = T.log_softmax(logits, axis=0)
    picked = np.zeros(logits.shape, dtype=logits.dtype)
    for c in range(logits.shape[0]):
        picked[c][target == c] = weights[c]
    nvox = target.size
    return T.scale(T.tsum(T.cmul(logp, picked)), -1.0 / nvox)


def dice_loss(logits, target, eps=DICE_EPS):
    """Soft Dice over the foreground classes: 1 - mean_c of the per-class
    overlap ratio. Classes absent from both prediction mass and target
    contribute ~eps/eps = 1, i.e. no loss."""
    target = np.asarray(target)
    if target.shape != logits.shape[1:]:
        raise ShapeMismatch(f"target {target.shape} != logits spatial {logits.shape[1:]}")
    p = T.softmax(logits, axis=0)
    terms = None
    for c in FOREGROUND_CLASSES:
        sel = np.zeros((logits.shape[0], 1, 1, 1), dtype=logits.dtype)
        sel[c, 0, 0, 0] = 1.0
        p_c = T.tsum(T.cmul(p, sel), axis=0)
        y_c = (target == c).astype(logits.dtype)
        inter = T.tsum(T.cmul(p_c, y_c))
        num = T.add(T.scale(inter, 2.0), Tensor(np.asarray(eps, dtype=logits.dtype)))
        den = T.add(T.tsum(p_c), Tensor(np.asarray(float(y_c.sum()) + eps, dtype=logits.dtype)))
        term = T.div(num, den)
        terms = term if terms is None else T.add(terms, term)
    mean_term = T.scale(terms, 1.0 / len(FOREGROUND_CLASSES))
    return T.sub(Tensor(np.asarray(1.0, dtype=logits.dtype)), mean_term)


def _halve_labels(labels):
    """One majority-vote downsampling step; block of 2 per even axis, ties
    broken toward the highest class (prefers tumor over background)."""
    shape = labels.shape
    blocks = tuple(2 if d % 2 == 0 and d > 1 else 1 for d in shape)
    onehot = np.eye(4, dtype=np.int32)[labels]
    d, h, w = shape
    bd, bh, bw = blocks
    counts = onehot.reshape(d // bd, bd, h // bh, bh, w // bw, bw, 4).sum(axis=(1, 3, 5))
    return 3 - np.argmax(counts[..., ::-1], axis=-1)


def downsample_labels(labels, times):
    """Repeated 2x majority downsampling (saturates at dim 1)."""
    out = np.asarray(labels)
    for _ in range(times):
        out = _halve_labels(out)
    return out


@dataclass
class LossBreakdown:
    l_um: Tensor
    l_mm: Tensor
    l_seg: Tensor
    l_layer: Tensor
    l_mfd: Tensor
    l_total: Tensor

    def as_floats(self):
        return {k: float(getattr(self, k).data) for k in
                ("l_um", "l_mm", "l_seg", "l_layer", "l_mfd", "l_total")}


def _seg_pair(logits, target, weights):
    return T.add(wce_loss(logits, target, weights), dice_loss(logits, target))


def branch_losses(outputs, target, weights=None, lambda_mfd=1.0, compute_mfd=True):
    """All training objectives from one train-mode forward pass.

    l_total = l_um + l_mm + l_seg + l_layer + lambda_mfd * l_mfd; with
    lambda_mfd = 0 the distillation term is computed but the update never
    sees its gradient, while compute_mfd=False (the distillation ablation)
    skips it entirely.
    """
    target = np.asarray(target)
    if weights is None:
        weights = np.ones(4)
    mask = outputs.mask

    l_um = None
    for m in mask.available:
        term = _seg_pair(outputs.uni_logits[m], target, weights)
        l_um = term if l_um is None else T.add(l_um, term)

    l_mm = _seg_pair(outputs.multi_logits, target, weights)
    l_seg = _seg_pair(outputs.seg_logits, target, weights)

    l_layer = None
    for l in (1, 2, 3, 4):
        aux = outputs.aux_logits[l]
        target_l = downsample_labels(target, l)
        if target_l.shape != aux.shape[1:]:
            raise ShapeMismatch(
                f"aux level {l}: target {target_l.shape} != logits {aux.shape[1:]}")
        term = _seg_pair(aux, target_l, weights)
        l_layer = term if l_layer is None else T.add(l_layer, term)

    if not compute_mfd or outputs.teacher_feats is None or not outputs.student_feats:
        l_mfd = Tensor(np.asarray(0.0, dtype=l_seg.dtype))
    else:
        l_mfd = mfd_loss(outputs.teacher_feats, outputs.student_feats, mask)

    l_total = T.add(T.add(T.add(l_um, l_mm), T.add(l_seg, l_layer)),
                    T.scale(l_mfd, lambda_mfd))
    return LossBreakdown(l_um=l_um, l_mm=l_mm, l_seg=l_seg, l_layer=l_layer,
                         l_mfd=l_mfd, l_total=l_total)
