"""A miniature one-stage detector: anchors, matching, losses, NMS, and mAP.

The backbone is four stride-2 conv+ReLU stages from a 64x64x3 image; the
global-context block and saliency fusion sit after stage 2, and prediction
heads read stages 3 and 4. Classification is cosine-based throughout: both
the per-anchor feature and every classifier row are L2-normalized and their
dot product is scaled by a fixed temperature, so imprinted rows score on the
same footing as trained ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import attention as att
from . import tensor as T
from .tensor import Tensor

BACKGROUND = 0  # class id and classifier row reserved for background


@dataclass(frozen=True)
class Box:
    """An axis-aligned box in normalized image coordinates, center form."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box sides must be positive, got w={self.w} h={self.h}")

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2,
                self.cx + self.w / 2, self.cy + self.h / 2)

    def area(self) -> float:
        return self.w * self.h


def iou(a: Box, b: Box) -> float:
    """Intersection area over union area, in [0,1]."""
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (a.area() + b.area() - inter)


def boxes_to_array(boxes) -> np.ndarray:
    return np.array([[b.cx, b.cy, b.w, b.h] for b in boxes], dtype=np.float64) \
        if boxes else np.zeros((0, 4))


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of two [*,4] center-form box arrays -> [len(a), len(b)]."""
    if a.size == 0 or b.size == 0:
        return np.zeros((a.shape[0], b.shape[0]))
    ax0, ay0 = a[:, 0] - a[:, 2] / 2, a[:, 1] - a[:, 3] / 2
    ax1, ay1 = a[:, 0] + a[:, 2] / 2, a[:, 1] + a[:, 3] / 2
    bx0, by0 = b[:, 0] - b[:, 2] / 2, b[:, 1] - b[:, 3] / 2
    bx1, by1 = b[:, 0] + b[:, 2] / 2, b[:, 1] + b[:, 3] / 2
    iw = np.maximum(0.0, np.minimum(ax1[:, None], bx1) - np.maximum(ax0[:, None], bx0))
    ih = np.maximum(0.0, np.minimum(ay1[:, None], by1) - np.maximum(ay0[:, None], by0))
    inter = iw * ih
    union = (a[:, 2] * a[:, 3])[:, None] + b[:, 2] * b[:, 3] - inter
    return np.where(inter > 0, inter / union, 0.0)


# ---------------------------------------------------------------------------
# anchors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AnchorConfig:
    map_sizes: tuple[tuple[int, int], ...] = ((8, 8), (4, 4))
    scales: tuple[float, ...] = (0.2, 0.42)
    aspects: tuple[float, ...] = (1.0, 2.0, 0.5)


@dataclass
class AnchorSet:
    boxes: list[Box]
    array: np.ndarray       # [N,4] center form
    scale_index: np.ndarray  # [N] which feature map each anchor came from

    def __len__(self) -> int:
        return len(self.boxes)


def generate_anchors(cfg: AnchorConfig) -> AnchorSet:
    """Anchor grid: scale-major, then row-major over cells, aspect-minor.

    The anchor for cell (i,j) of an H'xW' map is centered at
    ((j+0.5)/W', (i+0.5)/H'); aspect a maps a base scale s to sides
    (s*sqrt(a), s/sqrt(a)).
    """
    if not cfg.map_sizes or not cfg.scales:
        raise ValueError("anchor config needs at least one feature map and scale")
    if len(cfg.map_sizes) != len(cfg.scales):
        raise ValueError("one scale per feature map required")
    boxes, scale_index = [], []
    for s_idx, ((fh, fw), scale) in enumerate(zip(cfg.map_sizes, cfg.scales)):
        for i in range(fh):
            for j in range(fw):
                for a in cfg.aspects:
                    r = math.sqrt(a)
                    boxes.append(Box(cx=(j + 0.5) / fw, cy=(i + 0.5) / fh,
                                     w=scale * r, h=scale / r))
                    scale_index.append(s_idx)
    return AnchorSet(boxes=boxes, array=boxes_to_array(boxes),
                     scale_index=np.array(scale_index, dtype=np.int64))


# ---------------------------------------------------------------------------
# matching and offset coding
# ---------------------------------------------------------------------------

@dataclass
class MatchResult:
    """Per-anchor assignment: positive class label (0 = none), matched
    ground-truth index (-1 = none), and hard-negative flags."""

    positive_class: np.ndarray  # [N] int64 class label, 0 when not positive
    matched_gt: np.ndarray      # [N] int64 gt index, -1 when not positive
    hard_negative: np.ndarray   # [N] bool

    @property
    def num_positives(self) -> int:
        return int(np.count_nonzero(self.positive_class))

    def validate(self) -> None:
        if np.any(self.hard_negative & (self.positive_class > 0)):
            raise ValueError("an anchor cannot be both positive and hard negative")


def match_anchors(anchors: AnchorSet, gt_boxes: list[Box], gt_labels,
                  pos_thr: float = 0.5) -> MatchResult:
    """Assign anchors to ground truth; hard negatives are filled later.

    Two passes: first every gt box claims its best-IoU still-unclaimed anchor
    (in gt order; IoU ties go to the lowest anchor index), which guarantees
    each gt at least one positive. Then every unclaimed anchor whose best gt
    IoU reaches pos_thr becomes positive for that gt (ties to the lowest gt
    index).
    """
    n = len(anchors)
    labels = np.asarray(gt_labels, dtype=np.int64)
    if labels.size and labels.min() < 1:
        raise ValueError("gt labels must be >= 1 (0 is background)")
    positive = np.zeros(n, dtype=np.int64)
    matched = np.full(n, -1, dtype=np.int64)
    result = MatchResult(positive, matched, np.zeros(n, dtype=bool))
    if not gt_boxes:
        return result
    if len(gt_boxes) > n:
        raise ValueError("more ground-truth boxes than anchors")

    m = iou_matrix(anchors.array, boxes_to_array(gt_boxes))  # [N, G]
    claimed = np.zeros(n, dtype=bool)
    for g in range(len(gt_boxes)):
        col = np.where(claimed, -1.0, m[:, g])
        best = int(np.argmax(col))  # argmax takes the lowest index on ties
        positive[best] = labels[g]
        matched[best] = g
        claimed[best] = True

    best_gt = np.argmax(m, axis=1)
    best_iou = m[np.arange(n), best_gt]
    eligible = ~claimed & (best_iou >= pos_thr)
    positive[eligible] = labels[best_gt[eligible]]
    matched[eligible] = best_gt[eligible]
    return result


VARIANCES = (0.1, 0.2)


def encode_box(gt: Box, anchor: Box, variances=VARIANCES) -> np.ndarray:
    """Offsets regressed against an anchor: scaled center deltas and log sizes."""
    v0, v1 = variances
    return np.array([
        (gt.cx - anchor.cx) / (v0 * anchor.w),
        (gt.cy - anchor.cy) / (v0 * anchor.h),
        math.log(gt.w / anchor.w) / v1,
        math.log(gt.h / anchor.h) / v1,
    ])


def decode_box(offsets, anchor: Box, variances=VARIANCES) -> Box:
    v0, v1 = variances
    tx, ty, tw, th = (float(o) for o in offsets)
    return Box(cx=anchor.cx + tx * v0 * anchor.w,
               cy=anchor.cy + ty * v0 * anchor.h,
               w=anchor.w * math.exp(tw * v1),
               h=anchor.h * math.exp(th * v1))


def decode_all(offsets: np.ndarray, anchor_array: np.ndarray,
               variances=VARIANCES) -> np.ndarray:
    """Vectorized decode of [N,4] offsets against [N,4] anchors."""
    v0, v1 = variances
    out = np.empty_like(offsets)
    out[:, 0] = anchor_array[:, 0] + offsets[:, 0] * v0 * anchor_array[:, 2]
    out[:, 1] = anchor_array[:, 1] + offsets[:, 1] * v0 * anchor_array[:, 3]
    out[:, 2] = anchor_array[:, 2] * np.exp(offsets[:, 2] * v1)
    out[:, 3] = anchor_array[:, 3] * np.exp(offsets[:, 3] * v1)
    return out


# ---------------------------------------------------------------------------
# model configuration and parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DetectorConfig:
    image_size: int = 64
    backbone_channels: tuple[int, ...] = (8, 16, 24, 32)
    feat_dim: int = 16
    bottleneck_ratio: int = 4
    anchors: AnchorConfig = field(default_factory=AnchorConfig)
    temperature: float = 10.0
    pos_thr: float = 0.5
    neg_pos_ratio: int = 3
    alpha: float = 1.0
    use_bottom_up: bool = True
    epsilon: float = math.e
    nms_iou: float = 0.45
    score_thr: float = 0.05
    top_k: int = 50

    @property
    def num_aspects(self) -> int:
        return len(self.anchors.aspects)

    def scaled(self, **overrides) -> "DetectorConfig":
        return replace(self, **overrides)


class DetectorParams:
    """Named parameter tensors plus the classifier's class-id row map.

    Classifier row 0 is background; row 1+i scores class_ids[i]. Checkpoints
    round-trip through the tensor-module array format.
    """

    def __init__(self, tensors: dict[str, Tensor], class_ids: list[int]):
        self.tensors = tensors
        self.class_ids = list(class_ids)

    @property
    def cls_rows(self) -> Tensor:
        return self.tensors["cls.rows"]

    def row_of(self, class_id: int) -> int:
        return 1 + self.class_ids.index(class_id)

    def gc_params(self) -> att.GcParams:
        t = self.tensors
        return att.GcParams(w_k=t["gc.w_k"], w_v1=t["gc.w_v1"],
                            ln_gain=t["gc.ln_gain"], ln_bias=t["gc.ln_bias"],
                            w_v2=t["gc.w_v2"])

    def set_requires_grad(self, flag: bool) -> None:
        for t in self.tensors.values():
            t.requires_grad = flag

    def zero_grads(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "DetectorParams":
        return DetectorParams(
            {k: Tensor(v.data.copy(), requires_grad=v.requires_grad)
             for k, v in self.tensors.items()},
            list(self.class_ids))

    def as_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.tensors.items()}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], class_ids: list[int],
                    requires_grad: bool = True) -> "DetectorParams":
        return cls({k: Tensor(v, requires_grad=requires_grad)
                    for k, v in sorted(arrays.items())}, class_ids)


def init_detector_params(cfg: DetectorConfig, class_ids: list[int],
                         rng: np.random.Generator) -> DetectorParams:
    """Fresh parameters; draw order is fixed so a seed pins every value."""
    if len(set(class_ids)) != len(class_ids) or BACKGROUND in class_ids:
        raise ValueError("class ids must be unique and nonzero")
    tensors: dict[str, Tensor] = {}

    def conv(name, cout, cin, k, bias_scale=0.0):
        fan_in = cin * k * k
        kernel = rng.standard_normal((cout, cin, k, k)) * math.sqrt(2.0 / fan_in)
        bias = rng.standard_normal(cout) * bias_scale if bias_scale else np.zeros(cout)
        tensors[f"{name}.kernel"] = Tensor(kernel, requires_grad=True)
        tensors[f"{name}.bias"] = Tensor(bias, requires_grad=True)

    chans = (3,) + tuple(cfg.backbone_channels)
    for i in range(4):
        conv(f"backbone.{i}", chans[i + 1], chans[i], 3)

    gc = att.init_gc_params(rng, cfg.backbone_channels[1], cfg.bottleneck_ratio)
    for name, t in gc.tensors().items():
        tensors[f"gc.{name}"] = t

    a, d = cfg.num_aspects, cfg.feat_dim
    for s, cin in enumerate(cfg.backbone_channels[2:]):
        # nonzero feature bias keeps per-anchor features away from zero norm
        conv(f"head.{s}.feat", a * d, cin, 3, bias_scale=0.1)
        conv(f"head.{s}.reg", a * 4, cin, 3)

    rows = rng.standard_normal((1 + len(class_ids), d))
    tensors["cls.rows"] = Tensor(rows, requires_grad=True)
    return DetectorParams(tensors, class_ids)


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------

@dataclass
class DetectorOutputs:
    logits: Tensor    # [N_anchors, 1 + n_classes]
    offsets: Tensor   # [N_anchors, 4]
    features: Tensor  # [N_anchors, feat_dim], pre-normalization
    topdown: Tensor | None = None  # [H,W] attention map, on request


def _flatten_head(x: Tensor, per_anchor: int, num_aspects: int) -> Tensor:
    """[A*K, H, W] conv output -> [H*W*A, K] in anchor order."""
    _, h, w = x.data.shape
    x = T.reshape(x, (num_aspects, per_anchor, h, w))
    x = T.transpose(x, (2, 3, 0, 1))
    return T.reshape(x, (h * w * num_aspects, per_anchor))


def forward(image, saliency, params: DetectorParams, cfg: DetectorConfig,
            want_topdown: bool = False) -> DetectorOutputs:
    """Run the detector on one image.

    ``saliency`` is an [H,W] numpy map or None; it is ignored unless
    cfg.use_bottom_up. Records on the active tape, if any.
    """
    x = image if isinstance(image, Tensor) else Tensor(image)
    if x.data.shape != (3, cfg.image_size, cfg.image_size):
        raise T.ShapeError(f"expected (3,{cfg.image_size},{cfg.image_size}) image, "
                           f"got {x.data.shape}")
    # center [0,1] pixels; zero-mean inputs decorrelate whole-channel bias
    # shifts in the first conv, which otherwise invite dead-ReLU collapse
    x = T.sub(T.scale(x, 2.0), Tensor(np.float64(1.0)))
    t = params.tensors

    topdown = None
    head_inputs = []
    for i in range(4):
        x = T.relu(T.conv2d(x, t[f"backbone.{i}.kernel"], t[f"backbone.{i}.bias"],
                            stride=2, padding=1))
        if i == 1:
            if want_topdown:
                topdown = att.topdown_map(x, t["gc.w_k"])
            x = att.gc_block(x, params.gc_params())
            if cfg.use_bottom_up and saliency is not None:
                x = att.fuse_bottom_up(x, saliency, cfg.epsilon)
        if i >= 2:
            head_inputs.append(x)

    a, d = cfg.num_aspects, cfg.feat_dim
    feats, offs = [], []
    for s, xs in enumerate(head_inputs):
        expect = cfg.anchors.map_sizes[s]
        if xs.data.shape[1:] != expect:
            raise T.ShapeError(f"head {s} feature map {xs.data.shape[1:]} does not "
                               f"match anchor layout {expect}")
        f = T.conv2d(xs, t[f"head.{s}.feat.kernel"], t[f"head.{s}.feat.bias"], padding=1)
        r = T.conv2d(xs, t[f"head.{s}.reg.kernel"], t[f"head.{s}.reg.bias"], padding=1)
        feats.append(_flatten_head(f, d, a))
        offs.append(_flatten_head(r, 4, a))

    features = T.concat(feats, axis=0)
    offsets = T.concat(offs, axis=0)
    fhat = T.l2_normalize(features, axis=1)
    what = T.l2_normalize(params.cls_rows, axis=1)
    logits = T.scale(T.matmul(fhat, T.transpose(what, (1, 0))), cfg.temperature)
    return DetectorOutputs(logits=logits, offsets=offsets, features=features,
                           topdown=topdown)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def background_ce(logits: np.ndarray) -> np.ndarray:
    """Per-anchor cross-entropy against the background class, for mining."""
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    return lse - logits[:, BACKGROUND]


def hard_negative_mining(cls_losses: np.ndarray, match: MatchResult,
                         neg_pos_ratio: int = 3) -> MatchResult:
    """Flag the highest-loss non-positive anchors as hard negatives.

    Keeps ratio * num_positives anchors (at least 1 when there are no
    positives at all), ties broken toward lower anchor indices.
    """
    if neg_pos_ratio < 0:
        raise ValueError("neg_pos_ratio must be >= 0")
    candidates = np.where(match.positive_class == 0)[0]
    n_pos = match.num_positives
    want = neg_pos_ratio * n_pos if n_pos else min(1, len(candidates))
    want = min(want, len(candidates))
    hard = np.zeros_like(match.hard_negative)
    if want:
        order = np.argsort(-cls_losses[candidates], kind="stable")
        hard[candidates[order[:want]]] = True
    out = MatchResult(match.positive_class, match.matched_gt, hard)
    out.validate()
    return out


def base_loss(outputs: DetectorOutputs, match: MatchResult, gt_boxes: list[Box],
              anchors: AnchorSet, params: DetectorParams,
              cfg: DetectorConfig) -> tuple[Tensor, dict[str, float]]:
    """Detection loss: (cross-entropy + alpha * smooth-L1) / max(N, 1).

    Classification covers positives (their class row) and mined hard
    negatives (the background row); regression covers positives only,
    against offsets encoded from their matched ground truth.
    """
    pos_idx = np.where(match.positive_class > 0)[0]
    neg_idx = np.where(match.hard_negative)[0]
    n = max(match.num_positives, 1)
    zero = {"loss_cls": 0.0, "loss_bbox": 0.0}
    if pos_idx.size == 0 and neg_idx.size == 0:
        return Tensor(0.0), zero

    sel = np.concatenate([pos_idx, neg_idx])
    rows = np.array([params.row_of(int(c)) for c in match.positive_class[pos_idx]]
                    + [BACKGROUND] * len(neg_idx), dtype=np.int64)
    l_cls = T.sum_all(T.softmax_cross_entropy(T.gather(outputs.logits, sel), rows))

    if pos_idx.size:
        targets = np.stack([encode_box(gt_boxes[match.matched_gt[i]], anchors.boxes[i])
                            for i in pos_idx])
        l_bbox = T.sum_all(T.smooth_l1(T.gather(outputs.offsets, pos_idx),
                                       Tensor(targets)))
        total = T.scale(T.add(l_cls, T.scale(l_bbox, cfg.alpha)), 1.0 / n)
        parts = {"loss_cls": float(l_cls.data) / n,
                 "loss_bbox": cfg.alpha * float(l_bbox.data) / n}
    else:
        total = T.scale(l_cls, 1.0 / n)
        parts = {"loss_cls": float(l_cls.data) / n, "loss_bbox": 0.0}
    return total, parts


# ---------------------------------------------------------------------------
# decoding, NMS, evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Detection:
    class_id: int
    score: float
    box: Box


def nms(boxes: np.ndarray, scores: np.ndarray, iou_thr: float,
        score_thr: float = 0.0, top_k: int | None = None) -> list[int]:
    """Greedy suppression over [M,4] center-form boxes; returns kept indices.

    Boxes below score_thr are dropped first. Processing order is score
    descending with the lower index winning ties; a kept box suppresses any
    later box with IoU strictly greater than iou_thr.
    """
    keep_mask = scores >= score_thr
    idx = np.where(keep_mask)[0]
    if idx.size == 0:
        return []
    order = idx[np.argsort(-scores[idx], kind="stable")]
    x0 = boxes[:, 0] - boxes[:, 2] / 2
    y0 = boxes[:, 1] - boxes[:, 3] / 2
    x1 = boxes[:, 0] + boxes[:, 2] / 2
    y1 = boxes[:, 1] + boxes[:, 3] / 2
    areas = boxes[:, 2] * boxes[:, 3]
    kept: list[int] = []
    for i in order:
        ok = True
        for j in kept:
            iw = min(x1[i], x1[j]) - max(x0[i], x0[j])
            ih = min(y1[i], y1[j]) - max(y0[i], y0[j])
            if iw > 0 and ih > 0:
                inter = iw * ih
                if inter / (areas[i] + areas[j] - inter) > iou_thr:
                    ok = False
                    break
        if ok:
            kept.append(int(i))
            if top_k is not None and len(kept) == top_k:
                break
    return kept


def _clip_box(row: np.ndarray) -> Box | None:
    x0 = max(0.0, row[0] - row[2] / 2)
    y0 = max(0.0, row[1] - row[3] / 2)
    x1 = min(1.0, row[0] + row[2] / 2)
    y1 = min(1.0, row[1] + row[3] / 2)
    if x1 - x0 <= 0 or y1 - y0 <= 0:
        return None
    return Box(cx=(x0 + x1) / 2, cy=(y0 + y1) / 2, w=x1 - x0, h=y1 - y0)


def detect(outputs: DetectorOutputs, anchors: AnchorSet, params: DetectorParams,
           cfg: DetectorConfig) -> list[Detection]:
    """Decode one image's outputs into per-class NMS-filtered detections."""
    logits = outputs.logits.data
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    probs = e / e.sum(axis=1, keepdims=True)
    decoded = decode_all(outputs.offsets.data, anchors.array)

    clipped: list[Box | None] = [_clip_box(row) for row in decoded]
    valid = np.array([b is not None for b in clipped])
    detections: list[Detection] = []
    for col, cid in enumerate(params.class_ids, start=1):
        scores = np.where(valid, probs[:, col], -1.0)
        arr = np.stack([[b.cx, b.cy, b.w, b.h] if b else [0.5, 0.5, 1.0, 1.0]
                        for b in clipped])
        for i in nms(arr, scores, cfg.nms_iou, cfg.score_thr, cfg.top_k):
            detections.append(Detection(class_id=cid, score=float(probs[i, col]),
                                        box=clipped[i]))
    return detections


def eleven_point_ap(scored_hits: list[tuple[float, bool]], n_gt: int) -> float:
    """VOC-style 11-point interpolated AP from (score, is_tp) pairs."""
    if n_gt == 0:
        return 0.0
    tp = fp = 0
    points = []
    for _, hit in scored_hits:
        tp += 1 if hit else 0
        fp += 0 if hit else 1
        points.append((tp / n_gt, tp / (tp + fp)))
    ap = 0.0
    for t in np.arange(0.0, 1.1, 0.1):
        precisions = [p for r, p in points if r >= t]
        ap += max(precisions) if precisions else 0.0
    return ap / 11.0


def evaluate_map(detections_per_image: list[list[Detection]],
                 gt_per_image: list[list[tuple[int, Box]]],
                 iou_thr: float = 0.5) -> tuple[dict[int, float], float]:
    """Per-class 11-point AP and mAP over the classes present in ground truth.

    Detections are matched greedily in descending score order; each ground
    truth can satisfy only one detection, and a detection whose best-IoU gt
    is already taken counts as a false positive.
    """
    classes = sorted({c for gts in gt_per_image for c, _ in gts})
    per_class: dict[int, float] = {}
    for c in classes:
        gts = [[box for cid, box in gts_i if cid == c] for gts_i in gt_per_image]
        n_gt = sum(len(g) for g in gts)
        matched = [np.zeros(len(g), dtype=bool) for g in gts]
        dets = sorted(
            ((d.score, img_i, d_i, d.box)
             for img_i, dets_i in enumerate(detections_per_image)
             for d_i, d in enumerate(dets_i) if d.class_id == c),
            key=lambda t: (-t[0], t[1], t[2]))
        scored_hits = []
        for score, img_i, _, box in dets:
            best, best_iou = -1, 0.0
            for g_i, gt_box in enumerate(gts[img_i]):
                v = iou(box, gt_box)
                if v > best_iou:
                    best, best_iou = g_i, v
            hit = best >= 0 and best_iou >= iou_thr and not matched[img_i][best]
            if hit:
                matched[img_i][best] = True
            scored_hits.append((score, hit))
        per_class[c] = eleven_point_ap(scored_hits, n_gt)
    mean_ap = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return per_class, mean_ap


def evaluate_detector(params: DetectorParams, cfg: DetectorConfig, scenes,
                      saliency_provider=None, novel_ids=(),
                      iou_thr: float = 0.5) -> dict:
    """Full test-set evaluation; returns per-class AP plus base/novel/all mAP.

    Ground truth uses every object regardless of its annotated flag: the
    benchmark's annotation gaps are a training-time condition only.
    """
    anchors = generate_anchors(cfg.anchors)
    all_dets, all_gts = [], []
    for scene in scenes:
        sal = saliency_provider(scene) if saliency_provider else None
        outputs = forward(scene.image, sal, params, cfg)
        all_dets.append(detect(outputs, anchors, params, cfg))
        all_gts.append([(o.class_id, o.box) for o in scene.objects])
    per_class, map_all = evaluate_map(all_dets, all_gts, iou_thr)
    novel = set(novel_ids)
    base_aps = [ap for c, ap in per_class.items() if c not in novel]
    novel_aps = [ap for c, ap in per_class.items() if c in novel]
    return {
        "per_class_ap": {int(c): float(ap) for c, ap in sorted(per_class.items())},
        "map_all": float(map_all),
        "map_base": float(np.mean(base_aps)) if base_aps else 0.0,
        "map_novel": float(np.mean(novel_aps)) if novel_aps else 0.0,
    }
