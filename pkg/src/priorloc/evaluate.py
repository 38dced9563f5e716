"""Inference from the localization head and the detection metric stack."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .corpus import VideoSample
from .dpid import Localizer, fused
from .errors import ArgumentError
from .ksm import default_k, embed_video
from .lochead import head_forward, runs_above

IOU_THRESHOLDS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7)
SCORE_THRESHOLDS = tuple(round(0.1 * i, 1) for i in range(1, 10))
RANGES = (("0.1:0.5", 0.1, 0.5), ("0.3:0.7", 0.3, 0.7), ("0.1:0.7", 0.1, 0.7))


@dataclass(frozen=True)
class Proposal:
    cls: int
    q: float
    t_s: float
    t_e: float

    def __post_init__(self):
        if not self.t_s < self.t_e:
            raise ArgumentError(f"proposal interval [{self.t_s}, {self.t_e}] is empty")


def iou_1d(a, b) -> float:
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union if union > 0 else 0.0


def nms(proposals: list[Proposal], iou_threshold: float) -> list[Proposal]:
    """Greedy per-class suppression. A candidate is dropped when its IoU
    with a kept proposal of the same class reaches the threshold, so at 1.0
    only exact duplicates go."""
    order = sorted(proposals, key=lambda p: (-p.q, p.t_s, p.t_e, p.cls))
    kept: list[Proposal] = []
    for p in order:
        if all(k.cls != p.cls or iou_1d((k.t_s, k.t_e), (p.t_s, p.t_e)) < iou_threshold for k in kept):
            kept.append(p)
    return kept


# ------------------------------------------------------------ inference


def outer_inner_contrast(score: np.ndarray, s: int, e: int, flank: float = 0.25) -> float:
    """Mean of ``score[s:e]`` minus the mean over flanks of ``flank`` times
    the interval length on both sides (clipped to the video)."""
    T = score.shape[0]
    width = max(1, int(round(flank * (e - s))))
    outer = np.concatenate([score[max(0, s - width):s], score[e:min(T, e + width)]])
    inner = float(score[s:e].mean())
    return inner - (float(outer.mean()) if outer.size else 0.0)


def proposals_from_scores(fused_scores: np.ndarray, classes, offsets: np.ndarray | None = None,
                          thresholds=SCORE_THRESHOLDS, nms_iou: float = 0.5) -> list[tuple[int, float, int, int]]:
    """Segment-level proposals ``(class, q, start, end)`` from a ``T x C``
    fused score track. Every above-threshold run yields itself and, when
    offsets are given, the interval its segments' offsets agree on."""
    T = fused_scores.shape[0]
    cands = []
    for c in classes:
        track = fused_scores[:, c]
        seen = set()
        for thr in thresholds:
            for s, e in runs_above(track, thr):
                spans = [(s, e)]
                if offsets is not None:
                    centers = np.arange(s, e) + 0.5
                    rs = int(np.floor(np.median(centers - offsets[s:e, 0])))
                    re_ = int(np.ceil(np.median(centers + offsets[s:e, 1])))
                    rs, re_ = max(0, rs), min(T, re_)
                    if re_ > rs:
                        spans.append((rs, re_))
                for span in spans:
                    if span in seen:
                        continue
                    seen.add(span)
                    cands.append(Proposal(int(c), outer_inner_contrast(track, *span), float(span[0]), float(span[1])))
    return [(p.cls, p.q, int(p.t_s), int(p.t_e)) for p in nms(cands, nms_iou)]


@dataclass
class Inference:
    proposals: list[Proposal]
    A: np.ndarray
    class_probs: np.ndarray
    video_probs: np.ndarray
    fused: np.ndarray


def infer_tracks(video: VideoSample, model: Localizer, video_threshold: float = 0.1,
                 thresholds=SCORE_THRESHOLDS, nms_iou: float = 0.5) -> Inference:
    """Embedding, attention and head only; no description is requested."""
    with nm.no_grad():
        F = nm.Tensor(fused(video))
        F_e, A = embed_video(F, model.ksm, model.model_cfg, training=False)
        logits, offsets = head_forward(F_e, model.loc)
        probs = nm.softmax(logits, axis=1).data
        video_probs = nm.softmax(nm.topk_mean(logits, default_k(video.T), axis=0), axis=0).data
    C = model.n_classes
    a = A.data.reshape(-1)
    scores = probs[:, :C] * a[:, None]
    fg = video_probs[:C]
    classes = [c for c in range(C) if fg[c] >= video_threshold] or [int(np.argmax(fg))]
    segs = proposals_from_scores(scores, classes, offsets.data, thresholds, nms_iou)
    spp = video.seconds_per_segment
    props = [Proposal(c, q, s * spp, e * spp) for c, q, s, e in segs]
    return Inference(props, a, probs, video_probs, scores)


def infer(video: VideoSample, model: Localizer, **kwargs) -> list[Proposal]:
    return infer_tracks(video, model, **kwargs).proposals


# ------------------------------------------------------------ metrics


def average_precision(proposals, gt, iou_thr: float) -> float:
    """ActivityNet-style detection AP for one class.

    ``proposals``: ``(video_id, q, t_s, t_e)``; ``gt``: ``(video_id, t_s, t_e)``.
    Predictions are visited by descending ``q`` (stable for ties); each
    matches the highest-IoU unmatched ground truth in its video with
    IoU >= ``iou_thr``. AP is the area under the precision envelope.
    """
    if not gt:
        raise ArgumentError("average precision is undefined without ground truth")
    by_video: dict[str, list[int]] = {}
    for j, g in enumerate(gt):
        by_video.setdefault(g[0], []).append(j)
    order = sorted(range(len(proposals)), key=lambda i: -proposals[i][1])
    used = np.zeros(len(gt), dtype=bool)
    tp = np.zeros(len(order))
    for rank, i in enumerate(order):
        vid, _, ts, te = proposals[i]
        cand = by_video.get(vid, [])
        ious = [iou_1d((ts, te), (gt[j][1], gt[j][2])) for j in cand]
        for pos in np.argsort(-np.asarray(ious, dtype=np.float64), kind="stable"):
            if ious[pos] < iou_thr:
                break
            j = cand[pos]
            if used[j]:
                continue
            used[j] = True
            tp[rank] = 1.0
            break
    if not order:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / len(gt)
    precision = ctp / np.arange(1, len(order) + 1)
    return interpolated_ap(precision, recall)


def interpolated_ap(precision: np.ndarray, recall: np.ndarray) -> float:
    mprec = np.concatenate([[0.0], precision, [0.0]])
    mrec = np.concatenate([[0.0], recall, [1.0]])
    for i in range(len(mprec) - 2, -1, -1):
        mprec[i] = max(mprec[i], mprec[i + 1])
    idx = np.flatnonzero(mrec[1:] != mrec[:-1]) + 1
    return float(np.sum((mrec[idx] - mrec[idx - 1]) * mprec[idx]))


@dataclass
class EvalReport:
    thresholds: list[float]
    class_names: list[str]
    ap: np.ndarray  # classes x thresholds; NaN rows for classes without ground truth
    mean_ap: list[float]
    averages: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "thresholds": [float(t) for t in self.thresholds],
            "mAP": [float(v) for v in self.mean_ap],
            "averages": {k: float(v) for k, v in self.averages.items()},
            "per_class": {name: (None if np.isnan(row).any() else [float(v) for v in row])
                          for name, row in zip(self.class_names, self.ap)},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def to_text(self) -> str:
        head = ["mAP@IoU"] + [f"{t:.1f}" for t in self.thresholds] + [f"AVG({k})" for k in self.averages]
        vals = ["mAP"] + [f"{100 * v:.1f}" for v in self.mean_ap] + [f"{100 * v:.1f}" for v in self.averages.values()]
        widths = [max(len(a), len(b)) for a, b in zip(head, vals)]
        line = lambda cells: "  ".join(c.rjust(w) for c, w in zip(cells, widths))
        return line(head) + "\n" + line(vals) + "\n"


def map_table(per_video: dict[str, list[Proposal]], gt: dict[str, list[tuple[int, float, float]]],
              class_names: list[str], thresholds=IOU_THRESHOLDS) -> EvalReport:
    """Per-class AP at every IoU threshold; classes with no ground-truth
    instance are left out of the class mean."""
    C = len(class_names)
    ap = np.full((C, len(thresholds)), np.nan)
    for c in range(C):
        g = [(vid, ts, te) for vid in sorted(gt) for cls, ts, te in gt[vid] if cls == c]
        if not g:
            continue
        props = [(vid, p.q, p.t_s, p.t_e) for vid in sorted(per_video) for p in per_video[vid] if p.cls == c]
        props.sort(key=lambda r: (-r[1], r[0], r[2], r[3]))
        for j, thr in enumerate(thresholds):
            ap[c, j] = average_precision(props, g, thr)
    valid = ~np.isnan(ap).any(axis=1)
    mean_ap = [float(ap[valid, j].mean()) if valid.any() else 0.0 for j in range(len(thresholds))]
    averages = {}
    for name, lo, hi in RANGES:
        cols = [j for j, t in enumerate(thresholds) if lo - 1e-9 <= t <= hi + 1e-9]
        if cols:
            averages[name] = float(np.mean([mean_ap[j] for j in cols]))
    return EvalReport(list(thresholds), list(class_names), ap, mean_ap, averages)


def ground_truth(videos: list[VideoSample]) -> dict[str, list[tuple[int, float, float]]]:
    """Intervals in seconds, keyed by video id."""
    return {v.id: [(c, s * v.seconds_per_segment, e * v.seconds_per_segment) for c, s, e in v.gt_intervals]
            for v in videos}


def evaluate(model: Localizer, videos: list[VideoSample], **kwargs) -> tuple[EvalReport, dict[str, list[Proposal]]]:
    preds = {v.id: infer(v, model, **kwargs) for v in videos}
    return map_table(preds, ground_truth(videos), model.class_names), preds


def proposals_csv(preds: dict[str, list[Proposal]], class_names: list[str]) -> str:
    lines = ["video_id,class,q,t_s,t_e"]
    for vid in sorted(preds):
        for p in preds[vid]:
            lines.append(f"{vid},{class_names[p.cls]},{p.q!r},{p.t_s!r},{p.t_e!r}")
    return "\n".join(lines) + "\n"
