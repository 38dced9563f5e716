"""Anchor-free localization head trained from mined pseudo-proposals.

Per segment the head emits C+1 class logits and two non-negative offsets
(distance back to the action start, distance forward to its end). Training
targets are proposals mined from the matching branch's suppressed
similarity track; the head alone runs at inference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .config import ModelConfig, ParamGroup, conv_param, const_param
from .ksm import LOG_FLOOR, label_targets
from .numerics import Tensor

MINING_THRESHOLDS = (0.3, 0.4, 0.5, 0.6)


@dataclass
class LocHeadParams(ParamGroup):
    cls_w: Tensor
    cls_b: Tensor
    reg_w: Tensor
    reg_b: Tensor

    @classmethod
    def init(cls, cfg: ModelConfig, n_classes: int, rng: np.random.Generator) -> "LocHeadParams":
        K, D = cfg.kernel, cfg.embed_dim
        return cls(cls_w=conv_param(rng, K, D, n_classes + 1, gain=1.0), cls_b=const_param(n_classes + 1),
                   reg_w=conv_param(rng, K, D, 2, gain=0.1), reg_b=const_param(2, 1.0))


@dataclass(frozen=True)
class PseudoProposal:
    cls: int
    start_seg: int
    end_seg: int  # exclusive
    confidence: float


def head_forward(F_e: Tensor, params: LocHeadParams) -> tuple[Tensor, Tensor]:
    """``(class_logits T x (C+1), offsets T x 2)``."""
    logits = nm.conv1d(F_e, params.cls_w, params.cls_b)
    offsets = nm.softplus(nm.conv1d(F_e, params.reg_w, params.reg_b))
    return logits, offsets


def runs_above(x: np.ndarray, thr: float) -> list[tuple[int, int]]:
    """Maximal ``[start, end)`` runs where ``x > thr``."""
    above = np.concatenate([[False], np.asarray(x) > thr, [False]])
    edges = np.flatnonzero(np.diff(above.astype(np.int8)))
    return [(int(s), int(e)) for s, e in zip(edges[0::2], edges[1::2])]


def interval_iou(a: tuple[float, float], b: tuple[float, float]) -> float:
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union if union > 0 else 0.0


def _merge(props: list[PseudoProposal], iou_thr: float) -> list[PseudoProposal]:
    props = sorted(props, key=lambda p: (-p.confidence, p.start_seg, p.end_seg))
    kept: list[PseudoProposal] = []
    for p in props:
        if all(k.cls != p.cls or interval_iou((k.start_seg, k.end_seg), (p.start_seg, p.end_seg)) <= iou_thr
               for k in kept):
            kept.append(p)
    return sorted(kept, key=lambda p: (p.cls, p.start_seg))


def mine_pseudo_proposals(A, M_hat, label, thresholds=MINING_THRESHOLDS, nms_iou: float = 0.7) -> list[PseudoProposal]:
    """Threshold ``A * minmax(M_hat[:, c])`` for every positive class ``c``."""
    A = np.asarray(A, dtype=np.float64).reshape(-1)
    M_hat = np.asarray(M_hat, dtype=np.float64)
    props = []
    for c in np.flatnonzero(np.asarray(label)):
        col = M_hat[:, c]
        span = col.max() - col.min()
        score = A * ((col - col.min()) / span if span > 0 else np.zeros_like(col))
        for thr in thresholds:
            for s, e in runs_above(score, thr):
                props.append(PseudoProposal(int(c), s, e, float(score[s:e].mean())))
    return _merge(props, nms_iou)


def pseudo_segment_labels(proposals: list[PseudoProposal], T: int, n_classes: int) -> np.ndarray:
    """Per-segment class ids; background is ``n_classes``. Where proposals
    of different classes overlap, the more confident one wins."""
    labels = np.full(T, n_classes, dtype=np.int64)
    conf = np.full(T, -np.inf)
    for p in proposals:
        sl = slice(p.start_seg, p.end_seg)
        win = p.confidence > conf[sl]
        labels[sl] = np.where(win, p.cls, labels[sl])
        conf[sl] = np.where(win, p.confidence, conf[sl])
    return labels


def regression_targets(proposals: list[PseudoProposal], T: int) -> tuple[np.ndarray, np.ndarray]:
    """Segments inside a proposal and the ``[start, end)`` of their proposal."""
    idx, bounds = [], []
    owner = np.full(T, -1)
    best = np.full(T, -np.inf)
    for i, p in enumerate(proposals):
        for t in range(p.start_seg, p.end_seg):
            if p.confidence > best[t]:
                owner[t], best[t] = i, p.confidence
    for t in np.flatnonzero(owner >= 0):
        p = proposals[owner[t]]
        idx.append(int(t))
        bounds.append((p.start_seg, p.end_seg))
    return np.array(idx, dtype=np.int64), np.array(bounds, dtype=np.float64).reshape(-1, 2)


def decode_intervals(offsets: Tensor, seg_idx: np.ndarray) -> Tensor:
    """Intervals ``[t + 0.5 - d_s, t + 0.5 + d_e]`` at the given segments."""
    centers = seg_idx.astype(np.float64)[:, None] + 0.5
    picked = offsets[seg_idx]
    return nm.concat([centers[:, :1] - picked[:, 0:1], centers[:, :1] + picked[:, 1:2]], axis=1)


def focal_loss(class_logits: Tensor, seg_labels, gamma: float = 2.0, alpha: float | None = 0.25) -> Tensor:
    """Mean over segments of ``-w (1 - p_t)^gamma log p_t``. ``alpha``
    weighs foreground segments and ``1 - alpha`` background ones (the last
    logit column); ``None`` weighs all segments 1."""
    seg_labels = np.asarray(seg_labels, dtype=np.int64)
    T, n_out = class_logits.shape
    logp = nm.log_softmax(class_logits, axis=1)[np.arange(T), seg_labels]
    if gamma == 0:
        per = -logp
    else:
        per = -nm.mul(nm.power(1.0 - nm.exp(logp), gamma), logp)
    if alpha is not None:
        per = nm.mul(per, np.where(seg_labels == n_out - 1, 1.0 - alpha, alpha))
    return nm.mean(per)


def diou_loss(pred: Tensor, target) -> Tensor:
    """Mean of ``1 - IoU + (center gap)^2 / (enclosure)^2`` over rows of
    ``[start, end]`` intervals."""
    target = np.asarray(target, dtype=np.float64).reshape(-1, 2)
    if target.shape[0] == 0:
        return Tensor(0.0)
    ps, pe = pred[:, 0], pred[:, 1]
    ts, te = target[:, 0], target[:, 1]
    inter = nm.relu(nm.minimum(pe, te) - nm.maximum(ps, ts))
    union = (pe - ps) + (te - ts) - inter
    iou = inter / union
    enclosure = nm.maximum(pe, te) - nm.minimum(ps, ts)
    gap = (ps + pe) * 0.5 - (ts + te) * 0.5
    return nm.mean(1.0 - iou + nm.square(gap) / nm.square(enclosure))


def mil_loss(class_logits: Tensor, label, k: int) -> Tensor:
    y, _ = label_targets(label)
    p = nm.softmax(nm.topk_mean(class_logits, k, axis=0), axis=0)
    return -nm.tsum(nm.mul(nm.log(p, LOG_FLOOR), y))


def suppressed_mil_loss(class_logits: Tensor, A: Tensor, label, k: int) -> Tensor:
    """MIL on attention-suppressed logits against the background-free
    target. This is the only signal the attention track gets when the
    text-matching branch is switched off."""
    _, y_hat = label_targets(label)
    cas = nm.mul(nm.reshape(A, (A.shape[0], 1)), class_logits)
    p_hat = nm.softmax(nm.topk_mean(cas, k, axis=0), axis=0)
    return -nm.tsum(nm.mul(nm.log(p_hat, LOG_FLOOR), y_hat))


@dataclass
class LocLoss:
    total: Tensor
    focal: Tensor
    diou: Tensor
    mil: Tensor


def loc_loss(class_logits: Tensor, offsets: Tensor, label, proposals: list[PseudoProposal] | None, k: int,
             gamma: float = 2.0, alpha: float | None = 0.25) -> LocLoss:
    """Unweighted sum of the three terms. With ``proposals=None`` (no
    pseudo-labels mined yet) only the MIL term is active."""
    mil = mil_loss(class_logits, label, k)
    if proposals is None:
        zero = Tensor(0.0)
        return LocLoss(mil, zero, zero, mil)
    T = class_logits.shape[0]
    n_classes = class_logits.shape[1] - 1
    focal = focal_loss(class_logits, pseudo_segment_labels(proposals, T, n_classes), gamma, alpha)
    idx, bounds = regression_targets(proposals, T)
    diou = diou_loss(decode_intervals(offsets, idx), bounds) if idx.size else Tensor(0.0)
    return LocLoss(focal + diou + mil, focal, diou, mil)
