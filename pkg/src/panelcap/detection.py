"""Panel detection: box geometry, bipartite matching, set loss, decoder head, mAP.

Boxes are normalised ``(cx, cy, w, h)``; classes 0..25 are labels A..Z and
class 26 is "no object".
"""
from __future__ import annotations

import json
import logging
import string
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment
from torch import nn

from . import tensor_core as tc
from .layers import AttentionBlock, FeedForward, Linear, VisionEncoder
from .structured_io import normalize_label

log = logging.getLogger(__name__)

NUM_LABELS = 26
NO_OBJECT = 26
NUM_CLASSES = 27
COCO_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


def label_to_class(label: str) -> int:
    return ord(normalize_label(label)) - ord("A")


def class_to_label(idx: int) -> str:
    return string.ascii_uppercase[idx]


@dataclass(frozen=True)
class BoxN:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise ValueError(f"box centre outside [0, 1]: {self}")
        if not (0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise ValueError(f"box size outside (0, 1]: {self}")

    @classmethod
    def from_xyxy(cls, xyxy: Sequence[float]) -> "BoxN":
        x0, y0, x1, y1 = (float(v) for v in xyxy)
        return cls((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)

    def xyxy(self) -> tuple[float, float, float, float]:
        """Corners clipped to the unit square."""
        clip = lambda v: min(max(v, 0.0), 1.0)  # noqa: E731
        return (clip(self.cx - self.w / 2), clip(self.cy - self.h / 2),
                clip(self.cx + self.w / 2), clip(self.cy + self.h / 2))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h)


@dataclass
class Detection:
    box: BoxN
    class_probs: np.ndarray  # [27]

    def __post_init__(self):
        self.class_probs = np.asarray(self.class_probs, dtype=np.float64)
        if self.class_probs.shape != (NUM_CLASSES,) or abs(self.class_probs.sum() - 1.0) > 1e-6:
            raise ValueError("class_probs must be a 27-way distribution")

    @property
    def score(self) -> float:
        return float(self.class_probs[:NUM_LABELS].max())

    @property
    def label(self) -> str:
        return class_to_label(int(self.class_probs[:NUM_LABELS].argmax()))


@dataclass(frozen=True)
class PanelAnnotation:
    label: str
    box: BoxN
    caption: str = ""

    def __post_init__(self):
        object.__setattr__(self, "label", normalize_label(self.label))


@dataclass(frozen=True)
class DetLossWeights:
    lambda_cls: float = 2.0
    lambda_bbox: float = 5.0
    lambda_giou: float = 2.0

    def __post_init__(self):
        ws = (self.lambda_cls, self.lambda_bbox, self.lambda_giou)
        if min(ws) < 0 or max(ws) == 0:
            raise ValueError("detection loss weights must be nonnegative and not all zero")


# -- geometry ---------------------------------------------------------------

def _area(x0, y0, x1, y1):
    return max(x1 - x0, 0.0) * max(y1 - y0, 0.0)


def iou(a: BoxN, b: BoxN) -> float:
    ax0, ay0, ax1, ay1 = a.xyxy()
    bx0, by0, bx1, by1 = b.xyxy()
    inter = _area(max(ax0, bx0), max(ay0, by0), min(ax1, bx1), min(ay1, by1))
    union = _area(ax0, ay0, ax1, ay1) + _area(bx0, by0, bx1, by1) - inter
    return inter / union if union > 0 else 0.0


def giou(a: BoxN, b: BoxN) -> float:
    ax0, ay0, ax1, ay1 = a.xyxy()
    bx0, by0, bx1, by1 = b.xyxy()
    inter = _area(max(ax0, bx0), max(ay0, by0), min(ax1, bx1), min(ay1, by1))
    union = _area(ax0, ay0, ax1, ay1) + _area(bx0, by0, bx1, by1) - inter
    hull = _area(min(ax0, bx0), min(ay0, by0), max(ax1, bx1), max(ay1, by1))
    if hull <= 0:
        return 0.0
    return inter / union - (hull - union) / hull


def cxcywh_to_xyxy(boxes):
    cx, cy, w, h = boxes.unbind(-1)
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=-1).clamp(0.0, 1.0)


def pairwise_giou(a, b):
    """GIoU matrix ``[N, M]`` between cxcywh box tensors ``a[N, 4]`` and ``b[M, 4]``."""
    a, b = cxcywh_to_xyxy(a), cxcywh_to_xyxy(b)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = torch.maximum(a[:, None, :2], b[None, :, :2])
    rb = torch.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    lt_h = torch.minimum(a[:, None, :2], b[None, :, :2])
    rb_h = torch.maximum(a[:, None, 2:], b[None, :, 2:])
    wh_h = (rb_h - lt_h).clamp(min=0)
    hull = wh_h[..., 0] * wh_h[..., 1]
    return inter / union - (hull - union) / hull


# -- matching and loss -------------------------------------------------------

def hungarian_match(cost) -> list[tuple[int, int]]:
    """Minimum-cost one-to-one assignment; pairs sorted by prediction index."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.size == 0:
        return []
    if not np.isfinite(cost).all():
        raise ValueError("matching cost must be finite")
    rows, cols = linear_sum_assignment(cost)
    return sorted(zip(rows.tolist(), cols.tolist()))


def match_cost(probs, boxes, gt_classes, gt_boxes, w: DetLossWeights):
    """Cost ``[N_pred, N_gt]`` = -p(class) * l_cls + L1 * l_bbox + (1 - GIoU) * l_giou."""
    c_cls = -probs[:, gt_classes]
    c_box = torch.cdist(boxes, gt_boxes, p=1)
    c_giou = 1.0 - pairwise_giou(boxes, gt_boxes)
    return w.lambda_cls * c_cls + w.lambda_bbox * c_box + w.lambda_giou * c_giou


def detection_loss(pred_logits, pred_boxes, gt_classes, gt_boxes, w: DetLossWeights = DetLossWeights()):
    """Set loss for one figure.

    ``pred_logits [N_d, 27]``, ``pred_boxes [N_d, 4]`` cxcywh, ``gt_classes [G]``
    (long), ``gt_boxes [G, 4]``. Returns ``(total, components)`` where
    components holds ``cls``, ``bbox``, ``giou`` and the ``matches`` list.
    """
    n = pred_logits.shape[0]
    g = int(gt_classes.shape[0])
    if g:
        with torch.no_grad():
            cost = match_cost(pred_logits.softmax(-1), pred_boxes, gt_classes, gt_boxes, w)
        matches = hungarian_match(cost.cpu().numpy())
    else:
        matches = []
    target = torch.full((n,), NO_OBJECT, dtype=torch.long)
    for i, j in matches:
        target[i] = gt_classes[j]
    l_cls = tc.cross_entropy(pred_logits, target)
    if matches:
        pi = torch.tensor([i for i, _ in matches])
        gj = torch.tensor([j for _, j in matches])
        pb, gb = pred_boxes[pi], gt_boxes[gj]
        l_bbox = (pb - gb).abs().sum(-1).mean()
        l_giou = (1.0 - torch.diagonal(pairwise_giou(pb, gb))).mean()
    else:
        l_bbox = l_giou = pred_boxes.sum() * 0.0
    total = w.lambda_cls * l_cls + w.lambda_bbox * l_bbox + w.lambda_giou * l_giou
    return total, {"cls": l_cls, "bbox": l_bbox, "giou": l_giou, "matches": matches}


# -- decoder head ------------------------------------------------------------

class DecoderLayer(nn.Module):
    """Query self-attention (lets queries suppress duplicates), cross-attention to patches, FFN."""

    def __init__(self, d: int, n_heads: int):
        super().__init__()
        self.self_attn = AttentionBlock(d, n_heads)
        self.cross = AttentionBlock(d, n_heads)
        self.ffn = FeedForward(d, 2 * d)

    def forward(self, q, feats):
        return self.ffn(self.cross(self.self_attn(q, q), feats))


class DetectionHead(nn.Module):
    """Query-based panel detector: own patch backbone, learned queries, stacked decoder layers."""

    def __init__(self, d: int = 64, n_queries: int = 30, n_heads: int = 4, n_layers: int = 2,
                 image_size: int = 128, patch: int = 16, vision_layers: int = 0):
        super().__init__()
        self.backbone = VisionEncoder(d, image_size, patch, vision_layers, n_heads)
        self.queries = nn.Parameter(torch.randn(n_queries, d) * 0.1)
        self.layers = nn.ModuleList(DecoderLayer(d, n_heads) for _ in range(n_layers))
        self.class_head = Linear(d, NUM_CLASSES)
        self.box_hidden = Linear(d, d)
        self.box_out = Linear(d, 4)

    @property
    def n_queries(self) -> int:
        return self.queries.shape[0]

    def decode(self, image_feats, fused_queries):
        """``image_feats [B, P, d]``, ``fused_queries [B, N_d, d]`` -> logits, cxcywh boxes."""
        if image_feats.shape[-1] != fused_queries.shape[-1]:
            raise tc.ShapeError(
                f"decode: image feats {tuple(image_feats.shape)} vs queries {tuple(fused_queries.shape)}"
            )
        q = fused_queries
        for layer in self.layers:
            q = layer(q, image_feats)
        logits = self.class_head(q)
        boxes = tc.sigmoid(self.box_out(tc.relu(self.box_hidden(q))))
        return logits, boxes


def decode(head: DetectionHead, image_feats, fused_queries) -> list[list[Detection]]:
    with torch.no_grad():
        logits, boxes = head.decode(image_feats, fused_queries)
    return [to_detections(lg, bx) for lg, bx in zip(logits, boxes)]


def to_detections(logits, boxes) -> list[Detection]:
    probs = torch.softmax(logits.detach().double(), -1).cpu().numpy()
    bx = boxes.detach().double().cpu().numpy()
    out = []
    for p, (cx, cy, w, h) in zip(probs, bx):
        w, h = max(w, 1e-6), max(h, 1e-6)
        out.append(Detection(BoxN(float(cx), float(cy), float(min(w, 1.0)), float(min(h, 1.0))), p / p.sum()))
    return out


# -- evaluation --------------------------------------------------------------

@dataclass(frozen=True)
class ScoredBox:
    """A detection reduced to what evaluation needs."""

    label: str
    box: BoxN
    score: float


def _as_scored(d) -> ScoredBox:
    if isinstance(d, ScoredBox):
        return d
    return ScoredBox(d.label, d.box, d.score)


def _interp_ap(tp: np.ndarray, n_gt: int) -> float:
    if n_gt == 0:
        return 0.0
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, tp.size + 1)
    # precision envelope, non-increasing from the right
    for i in range(precision.size - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    ap = 0.0
    for r in np.linspace(0.0, 1.0, 101):
        idx = np.searchsorted(recall, r, side="left")
        ap += precision[idx] if idx < precision.size else 0.0
    return ap / 101


def average_precision(preds: Sequence[Sequence], gts: Sequence[Sequence[PanelAnnotation]],
                      label: str, threshold: float) -> float:
    """COCO-style 101-point AP of one class at one IoU threshold."""
    ranked = []
    for fig, dets in enumerate(preds):
        for k, d in enumerate(dets):
            if d.label == label:
                ranked.append((-d.score, fig, k, d))
    ranked.sort(key=lambda r: (r[0], r[1], r[2]))
    gt_by_fig = [[g for g in fig_gts if g.label == label] for fig_gts in gts]
    n_gt = sum(len(g) for g in gt_by_fig)
    used = [np.zeros(len(g), dtype=bool) for g in gt_by_fig]
    tp = np.zeros(len(ranked))
    for r, (_, fig, _, d) in enumerate(ranked):
        best, best_iou = -1, threshold
        for j, g in enumerate(gt_by_fig[fig]):
            if used[fig][j]:
                continue
            v = iou(d.box, g.box)
            if v >= best_iou and (best < 0 or v > best_iou):
                best, best_iou = j, v
        if best >= 0:
            used[fig][best] = True
            tp[r] = 1
    return _interp_ap(tp, n_gt)


def compute_map(all_preds: Sequence[Iterable], all_gts: Sequence[Sequence[PanelAnnotation]],
                thresholds: Sequence[float] = COCO_THRESHOLDS, max_dets: int = 100) -> tuple[float, float]:
    """Returns ``(mAP averaged over thresholds, mAP@0.5)``.

    Per threshold, AP is averaged over the classes present in the ground truth.
    With no ground truth at all the result is undefined; ``(0.0, 0.0)`` is
    returned and a warning raised.
    """
    if len(all_preds) != len(all_gts):
        raise ValueError("predictions and ground truth cover different numbers of figures")
    preds = []
    for dets in all_preds:
        dets = sorted((_as_scored(d) for d in dets), key=lambda d: -d.score)
        preds.append(dets[:max_dets])
    classes = sorted({g.label for fig in all_gts for g in fig})
    if not classes:
        warnings.warn("compute_map: no ground-truth panels; mAP undefined, reporting 0", stacklevel=2)
        return 0.0, 0.0
    per_t = {}
    for t in list(thresholds) + [0.5]:
        if t in per_t:
            continue
        per_t[t] = float(np.mean([average_precision(preds, all_gts, c, t) for c in classes]))
    return float(np.mean([per_t[t] for t in thresholds])), per_t[0.5]


# -- interchange -------------------------------------------------------------

def detections_to_json(dets: Iterable) -> list[dict]:
    return [
        {"label": d.label, "bbox_xyxy": [round(v, 6) for v in d.box.xyxy()], "score": round(float(d.score), 6)}
        for d in map(_as_scored, dets)
    ]


def detections_from_json(items: Sequence[dict]) -> list[ScoredBox]:
    out = []
    for it in items:
        out.append(ScoredBox(normalize_label(it["label"]), BoxN.from_xyxy(it["bbox_xyxy"]), float(it["score"])))
    return out


def convert_bbox_2d(raw: str | Sequence[dict], default_score: float = 1.0) -> list[dict]:
    """Map the prompt-style ``[{"class": 0..25, "bbox_2d": [0..1000]*4}]`` output to interchange dicts.

    Entries that are malformed or violate ``x_min < x_max``/``y_min < y_max``
    are dropped.
    """
    items = json.loads(raw) if isinstance(raw, str) else raw
    out = []
    for it in items:
        try:
            cls = int(it["class"])
            x0, y0, x1, y1 = (float(v) / 1000.0 for v in it["bbox_2d"])
        except (KeyError, TypeError, ValueError):
            continue
        if not (0 <= cls < NUM_LABELS) or not (x0 < x1 and y0 < y1):
            continue
        clip = lambda v: min(max(v, 0.0), 1.0)  # noqa: E731
        out.append({"label": class_to_label(cls),
                    "bbox_xyxy": [clip(x0), clip(y0), clip(x1), clip(y1)],
                    "score": float(it.get("score", default_score))})
    return out
