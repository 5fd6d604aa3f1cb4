"""Toy two-stage person-search network: backbone, proposal head, region head, ID head."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from . import numerics as nx

logger = logging.getLogger(__name__)

_DELTA_STD = (0.1, 0.1, 0.2, 0.2)
_MAX_LOG_SCALE = math.log(1000.0 / 16)


class BackboneSize(str, Enum):
    LARGE = "LARGE"
    SMALL = "SMALL"


@dataclass(frozen=True)
class BackboneSpec:
    size: BackboneSize
    widths: tuple[int, ...]  # output channels per conv layer
    strides: tuple[int, ...]
    rpn_channels: int
    roi_hidden: int

    @property
    def out_channels(self) -> int:
        return self.widths[-1]

    @property
    def stride(self) -> int:
        return int(np.prod(self.strides))

    @classmethod
    def of(cls, size) -> "BackboneSpec":
        size = BackboneSize(size)
        if size is BackboneSize.LARGE:
            return cls(size, (16, 32, 32, 64, 64), (2, 2, 1, 2, 1), 64, 128)
        return cls(size, (12, 24, 32, 32), (2, 2, 2, 1), 32, 96)


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 96
    channels: int = 3
    embed_dim: int = 32
    anchor_size: float = 22.0
    anchor_ratios: tuple[float, ...] = (2.0, 2.5)  # height / width
    pooled_size: int = 6
    num_proposals: int = 32
    proposal_nms: float = 0.7
    pre_nms_top: int = 100
    detection_nms: float = 0.4
    max_detections: int = 20
    min_score: float = 0.05


@dataclass
class Detection:
    box: tuple[float, float, float, float]
    score: float
    embedding: np.ndarray


# ---------------------------------------------------------------------------
# boxes

def make_anchors(feat_h: int, feat_w: int, stride: int, size: float, ratios) -> np.ndarray:
    """(H*W*A, 4) anchors ordered by (row, col, ratio)."""
    shapes = [(size / math.sqrt(r), size * math.sqrt(r)) for r in ratios]
    out = []
    for y in range(feat_h):
        for x in range(feat_w):
            cx, cy = (x + 0.5) * stride, (y + 0.5) * stride
            for w, h in shapes:
                out.append((cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2))
    return np.array(out, dtype=np.float64)


def box_iou(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = np.prod(np.clip(a[:, 2:] - a[:, :2], 0, None), axis=1)
    area_b = np.prod(np.clip(b[:, 2:] - b[:, :2], 0, None), axis=1)
    union = area_a[:, None] + area_b[None] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def encode_boxes(ref: np.ndarray, gt: np.ndarray) -> np.ndarray:
    rw, rh = ref[:, 2] - ref[:, 0], ref[:, 3] - ref[:, 1]
    rx, ry = ref[:, 0] + 0.5 * rw, ref[:, 1] + 0.5 * rh
    gw, gh = gt[:, 2] - gt[:, 0], gt[:, 3] - gt[:, 1]
    gx, gy = gt[:, 0] + 0.5 * gw, gt[:, 1] + 0.5 * gh
    d = np.stack([(gx - rx) / rw, (gy - ry) / rh, np.log(gw / rw), np.log(gh / rh)], axis=1)
    return d / np.array(_DELTA_STD)


def decode_boxes(ref: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    d = np.asarray(deltas, dtype=np.float64) * np.array(_DELTA_STD)
    rw, rh = ref[:, 2] - ref[:, 0], ref[:, 3] - ref[:, 1]
    rx, ry = ref[:, 0] + 0.5 * rw, ref[:, 1] + 0.5 * rh
    cx, cy = rx + d[:, 0] * rw, ry + d[:, 1] * rh
    w = rw * np.exp(np.minimum(d[:, 2], _MAX_LOG_SCALE))
    h = rh * np.exp(np.minimum(d[:, 3], _MAX_LOG_SCALE))
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)


def clip_boxes(boxes: np.ndarray, size: int) -> np.ndarray:
    return np.clip(boxes, 0.0, float(size))


def nms(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float,
        max_keep: int | None = None) -> np.ndarray:
    """Greedy NMS; order is score descending with lower index first on ties."""
    order = np.lexsort((np.arange(len(scores)), -np.asarray(scores)))
    iou = box_iou(boxes[order], boxes[order])
    alive = np.ones(len(order), dtype=bool)
    keep = []
    for i in range(len(order)):
        if alive[i]:
            keep.append(order[i])
            if max_keep is not None and len(keep) >= max_keep:
                break
            alive &= iou[i] <= iou_thresh
    return np.array(keep, dtype=np.int64)


# ---------------------------------------------------------------------------
# network

def _conv_param(gen: torch.Generator, cout: int, cin: int, k: int) -> nn.Parameter:
    std = math.sqrt(2.0 / (cin * k * k))
    return nn.Parameter(torch.randn(cout, cin, k, k, generator=gen) * std)


class Conv(nn.Module):
    def __init__(self, gen, cin, cout, k=3, stride=1, std: float | None = None):
        super().__init__()
        self.weight = _conv_param(gen, cout, cin, k)
        if std is not None:
            with torch.no_grad():
                self.weight.copy_(torch.randn(cout, cin, k, k, generator=gen) * std)
        self.bias = nn.Parameter(torch.zeros(cout))
        self.stride = stride
        self.padding = k // 2

    def forward(self, x):
        return nx.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Linear(nn.Module):
    def __init__(self, gen, cin, cout, std: float | None = None):
        super().__init__()
        std = math.sqrt(2.0 / cin) if std is None else std
        self.weight = nn.Parameter(torch.randn(cin, cout, generator=gen) * std)
        self.bias = nn.Parameter(torch.zeros(cout))

    def forward(self, x):
        return nx.matmul(x, self.weight) + self.bias


class Backbone(nn.Module):
    def __init__(self, spec: BackboneSpec, in_channels: int, gen: torch.Generator):
        super().__init__()
        layers, cin = [], in_channels
        for w, s in zip(spec.widths, spec.strides):
            layers.append(Conv(gen, cin, w, 3, s))
            cin = w
        self.layers = nn.ModuleList(layers)

    def forward(self, x):
        # group norm keeps units alive when the scale-invariant OIM gradient is large
        for layer in self.layers:
            x = nx.relu(nx.group_norm(layer(x), 4))
        return x


class PersonSearchModel(nn.Module):
    def __init__(self, spec: BackboneSpec, cfg: ModelConfig = ModelConfig(), seed: int = 0):
        super().__init__()
        self.spec = spec
        self.cfg = cfg
        gen = torch.Generator().manual_seed(int(seed))
        c = spec.out_channels
        na = len(cfg.anchor_ratios)
        self.backbone = Backbone(spec, cfg.channels, gen)
        self.rpn_conv = Conv(gen, c, spec.rpn_channels, 3)
        self.rpn_cls = Conv(gen, spec.rpn_channels, 2 * na, 1, std=0.01)
        self.rpn_reg = Conv(gen, spec.rpn_channels, 4 * na, 1, std=0.01)
        self.roi_fc = Linear(gen, c * cfg.pooled_size ** 2, spec.roi_hidden)
        self.cls_head = Linear(gen, spec.roi_hidden, 2, std=0.01)
        self.reg_head = Linear(gen, spec.roi_hidden, 4, std=0.001)
        # the identity head reads the same region hidden layer as the box heads
        self.id_head = Linear(gen, spec.roi_hidden, cfg.embed_dim)
        # without centering, the shared ReLU offset makes every embedding point the same way
        # and the LUT averages collapse onto it
        self.register_buffer("id_center", torch.zeros(cfg.embed_dim))
        fh = cfg.image_size // spec.stride
        self.feat_size = fh
        self.anchors = make_anchors(fh, fh, spec.stride, cfg.anchor_size, cfg.anchor_ratios)

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    # -- stages ------------------------------------------------------------
    def prepare(self, images) -> torch.Tensor:
        """uint8 (B, H, W, C) or (H, W, C) arrays -> float (B, C, H, W) in [-0.5, 0.5]."""
        arr = np.asarray(images)
        if arr.ndim == 3:
            arr = arr[None]
        if arr.shape[1:] != (self.cfg.image_size, self.cfg.image_size, self.cfg.channels):
            raise nx.ShapeError(f"image shape {arr.shape[1:]} does not match model config "
                                f"{(self.cfg.image_size, self.cfg.image_size, self.cfg.channels)}")
        x = torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).float() / 255.0 - 0.5
        return x.to(self.dtype)

    @property
    def dtype(self) -> torch.dtype:
        return self.rpn_conv.weight.dtype

    def backbone_forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.cfg.channels or x.shape[2] != self.cfg.image_size:
            raise nx.ShapeError(f"backbone_forward: unexpected input shape {tuple(x.shape)}")
        return self.backbone(x)

    def rpn_forward(self, feats: torch.Tensor):
        """Per-anchor (B, N, 2) objectness logits and (B, N, 4) box deltas."""
        h = nx.relu(self.rpn_conv(feats))
        b = feats.shape[0]
        logits = self.rpn_cls(h).permute(0, 2, 3, 1).reshape(b, -1, 2)
        deltas = self.rpn_reg(h).permute(0, 2, 3, 1).reshape(b, -1, 4)
        return logits, deltas

    def propose(self, logits: torch.Tensor, deltas: torch.Tensor) -> list[np.ndarray]:
        """Top-K proposals per image after NMS, sorted by objectness (ties by anchor index)."""
        out = []
        with torch.no_grad():
            scores = (logits[..., 1] - logits[..., 0]).double().numpy()
            d = deltas.double().numpy()
        for i in range(scores.shape[0]):
            order = np.lexsort((np.arange(scores.shape[1]), -scores[i]))[:self.cfg.pre_nms_top]
            boxes = clip_boxes(decode_boxes(self.anchors[order], d[i, order]), self.cfg.image_size)
            ok = ((boxes[:, 2] - boxes[:, 0]) >= 1.0) & ((boxes[:, 3] - boxes[:, 1]) >= 1.0)
            boxes, sc = boxes[ok], scores[i, order][ok]
            keep = nms(boxes, sc, self.cfg.proposal_nms, self.cfg.num_proposals)
            out.append(boxes[keep])
        return out

    def region_features(self, feats: torch.Tensor, rois: list[np.ndarray]) -> torch.Tensor:
        """Flattened (N, C * S * S) pooled features, shared by the box and identity heads."""
        pooled = crop_resize(feats, rois, self.cfg.pooled_size, 1.0 / self.spec.stride)
        return pooled.reshape(pooled.shape[0], -1)

    def rcn_forward(self, feats: torch.Tensor, rois: list[np.ndarray]):
        """Per-region (N, 2) person/background logits, (N, 4) deltas and the shared hidden features."""
        pooled = self.region_features(feats, rois)
        hidden = nx.relu(self.roi_fc(pooled))
        return self.cls_head(hidden), self.reg_head(hidden), hidden

    def idnet_forward(self, hidden: torch.Tensor) -> torch.Tensor:
        z = self.id_head(nx.layer_norm(hidden))
        if self.training:
            # a running mean rather than batch statistics: a batch holds a handful of
            # RoIs on the same few people, and batch stats would couple them
            with torch.no_grad():
                self.id_center.mul_(0.9).add_(0.1 * z.mean(0))
        return nx.l2_normalize(z - self.id_center, dim=1)

    # -- inference ---------------------------------------------------------
    @torch.no_grad()
    def detect(self, image: np.ndarray) -> list[Detection]:
        x = self.prepare(image)
        feats = self.backbone_forward(x)
        proposals = self.propose(*self.rpn_forward(feats))[0]
        proposals, dropped = drop_degenerate(proposals)
        if dropped:
            logger.debug("dropped %d degenerate proposals", dropped)
        if len(proposals) == 0:
            return []
        logits, deltas, _ = self.rcn_forward(feats, [proposals])
        scores = nx.softmax(logits.double(), dim=1)[:, 1].numpy()
        boxes = clip_boxes(decode_boxes(proposals, deltas.double().numpy()), self.cfg.image_size)
        boxes, ok = drop_degenerate(boxes, return_mask=True)
        scores = scores[ok]
        keep = nms(boxes, scores, self.cfg.detection_nms)
        keep = keep[scores[keep] >= self.cfg.min_score][:self.cfg.max_detections]
        if len(keep) == 0:
            return []
        boxes, scores = boxes[keep], scores[keep]
        emb = self.embed(feats, boxes)
        return [Detection(tuple(float(v) for v in b), float(s), e) for b, s, e in zip(boxes, scores, emb)]

    @torch.no_grad()
    def embed(self, feats: torch.Tensor, boxes: np.ndarray) -> np.ndarray:
        return self.idnet_forward(self.rcn_forward(feats, [boxes])[2]).double().numpy()

    @torch.no_grad()
    def embed_crop(self, image: np.ndarray, box) -> np.ndarray:
        feats = self.backbone_forward(self.prepare(image))
        return self.embed(feats, np.asarray(box, dtype=np.float64).reshape(1, 4))[0]


def crop_resize(feats: torch.Tensor, rois: list[np.ndarray], out: int, scale: float) -> torch.Tensor:
    """Bilinear crop-resize: one sample at each output bin center, zero outside the map.

    ``rois`` holds one (n_i, 4) box array per image, in image-pixel coordinates.
    Returns (sum n_i, C, out, out).
    """
    image_idx = torch.as_tensor(np.repeat(np.arange(len(rois)), [len(r) for r in rois]))
    boxes = torch.as_tensor(np.concatenate(rois).reshape(-1, 4) * scale, dtype=feats.dtype)
    h, w = feats.shape[2:]
    t = (torch.arange(out, dtype=feats.dtype) + 0.5) / out
    xs = boxes[:, 0:1] + (boxes[:, 2:3] - boxes[:, 0:1]) * t
    ys = boxes[:, 1:2] + (boxes[:, 3:4] - boxes[:, 1:2]) * t
    grid = torch.stack([(2 * xs / w - 1)[:, None, :].expand(-1, out, -1),
                        (2 * ys / h - 1)[:, :, None].expand(-1, -1, out)], dim=-1)
    return F.grid_sample(feats[image_idx], grid, mode="bilinear", padding_mode="zeros",
                         align_corners=False)


def drop_degenerate(boxes: np.ndarray, return_mask: bool = False):
    ok = ((boxes[:, 2] - boxes[:, 0]) > 0) & ((boxes[:, 3] - boxes[:, 1]) > 0)
    if return_mask:
        return boxes[ok], ok
    return boxes[ok], int((~ok).sum())


def parameter_ratio(small: BackboneSpec | None = None, large: BackboneSpec | None = None,
                    cfg: ModelConfig = ModelConfig()) -> float:
    small = small or BackboneSpec.of("SMALL")
    large = large or BackboneSpec.of("LARGE")
    return PersonSearchModel(small, cfg).num_parameters() / PersonSearchModel(large, cfg).num_parameters()


# ---------------------------------------------------------------------------
# ground-truth targets and losses

@dataclass
class HeadTargets:
    """Sampled training rows for one head over a batch (rows index the flattened batch)."""
    index: np.ndarray  # sampled rows
    labels: np.ndarray  # 1 person / 0 background, aligned with ``index``
    pos_index: np.ndarray  # rows of positives
    reg_targets: np.ndarray  # (npos, 4) encoded deltas
    pos_gt: np.ndarray  # (npos,) index of matched GT box within its image
    pos_image: np.ndarray  # (npos,) image index of each positive


def assign_targets(boxes: list[np.ndarray], gts: list[np.ndarray], rng: np.random.Generator,
                   batch_size: int = 16, fg_iou: float = 0.5, bg_iou: float = 0.3,
                   force_best: bool = True) -> HeadTargets:
    """Label boxes against GT (>= fg_iou positive, < bg_iou negative) and sample a balanced subset.

    Per image at most ``batch_size // 2`` positives are kept; negatives fill the
    remaining slots of the ``batch_size`` budget.
    """
    index, labels, pos_index, targets, pos_gt, pos_img = [], [], [], [], [], []
    offset = 0
    for im, (b, g) in enumerate(zip(boxes, gts)):
        n = len(b)
        lab = np.full(n, -1)
        matched = np.zeros(n, dtype=np.int64)
        if len(g):
            iou = box_iou(b, g)
            best = iou.max(axis=1)
            matched = iou.argmax(axis=1)
            lab[best < bg_iou] = 0
            lab[best >= fg_iou] = 1
            if force_best:
                for j in range(len(g)):
                    top = iou[:, j].max()
                    if top > 0:
                        hits = np.flatnonzero(iou[:, j] == top)
                        lab[hits] = 1
                        matched[hits] = j
        else:
            lab[:] = 0
        pos = np.flatnonzero(lab == 1)
        neg = np.flatnonzero(lab == 0)
        n_pos = min(len(pos), batch_size // 2)
        pos = np.sort(rng.choice(pos, size=n_pos, replace=False)) if n_pos < len(pos) else pos
        n_neg = min(len(neg), batch_size - n_pos)
        neg = np.sort(rng.choice(neg, size=n_neg, replace=False)) if n_neg < len(neg) else neg
        index += [pos + offset, neg + offset]
        labels += [np.ones(len(pos), dtype=np.int64), np.zeros(len(neg), dtype=np.int64)]
        pos_index.append(pos + offset)
        if len(pos):
            targets.append(encode_boxes(b[pos], g[matched[pos]]))
        pos_gt.append(matched[pos])
        pos_img.append(np.full(len(pos), im))
        offset += n
    cat = lambda xs, dt=np.int64: np.concatenate(xs).astype(dt) if xs else np.zeros(0, dt)  # noqa: E731
    return HeadTargets(cat(index), cat(labels), cat(pos_index),
                       np.concatenate(targets) if targets else np.zeros((0, 4)),
                       cat(pos_gt), cat(pos_img))


def classification_loss(logits: torch.Tensor, targets: HeadTargets) -> torch.Tensor:
    """Mean 2-class cross-entropy over the sampled rows."""
    if len(targets.index) == 0:
        return logits.sum() * 0.0
    rows = logits[torch.as_tensor(targets.index)]
    logp = nx.log_softmax(rows, dim=1)
    picked = logp.gather(1, torch.as_tensor(targets.labels).reshape(-1, 1))
    return -nx.mean(picked)


def regression_loss(deltas: torch.Tensor, targets: HeadTargets, beta: float = 1.0 / 9) -> torch.Tensor:
    """Smooth-L1 summed over coordinates, averaged over positives."""
    if len(targets.pos_index) == 0:
        return deltas.sum() * 0.0
    pred = deltas[torch.as_tensor(targets.pos_index)]
    diff = pred - torch.as_tensor(targets.reg_targets, dtype=pred.dtype)
    return nx.sum(nx.smooth_l1(diff, beta)) / len(targets.pos_index)


def detector_gt_losses(rpn_logits, rpn_deltas, rpn_targets: HeadTargets,
                       rcn_logits, rcn_deltas, rcn_targets: HeadTargets):
    """(L_rpn_cls, L_rpn_reg, L_rcn_cls, L_rcn_reg) against ground truth.

    RPN tensors are flattened over the batch, i.e. (B*N, 2) and (B*N, 4).
    """
    return (classification_loss(rpn_logits, rpn_targets), regression_loss(rpn_deltas, rpn_targets),
            classification_loss(rcn_logits, rcn_targets), regression_loss(rcn_deltas, rcn_targets))


def restrict_to_sampled(boxes: list[np.ndarray], targets: HeadTargets):
    """Keep only the sampled boxes (per image, in sample order) and re-index the targets to them."""
    sizes = [len(b) for b in boxes]
    flat = np.concatenate(boxes) if boxes else np.zeros((0, 4))
    image_of = np.repeat(np.arange(len(boxes)), sizes)
    kept = [flat[targets.index[image_of[targets.index] == i]] for i in range(len(boxes))]
    position = {int(r): k for k, r in enumerate(targets.index)}
    pos = np.array([position[int(r)] for r in targets.pos_index], dtype=np.int64)
    return kept, HeadTargets(np.arange(len(targets.index)), targets.labels, pos,
                             targets.reg_targets, targets.pos_gt, targets.pos_image)
