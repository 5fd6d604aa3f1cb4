"""Detection AP/recall and person-search mAP / CMC."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from .psmodel import box_iou

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ("det_map", "det_recall", "search_map", "cmc_top1", "n_queries", "n_skipped")
QUERY_COLUMNS = ("query", "identity", "ap", "hit_at_k")


class EvaluationError(ValueError):
    pass


def average_precision(hits: np.ndarray, n_positive: int) -> float:
    """All-points interpolated AP of a ranked hit/miss list, recall normalized by ``n_positive``."""
    hits = np.asarray(hits, dtype=bool)
    if n_positive <= 0 or not hits.any():
        return 0.0
    tp = np.cumsum(hits)
    precision = tp / np.arange(1, len(hits) + 1)
    # precision envelope: best precision at any recall level at least this high
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    return float(envelope[hits].sum() / n_positive)


def detection_ap_recall(detections: list, ground_truth: list, iou_thresh: float = 0.5):
    """Person-detection AP and recall over a set of images.

    ``detections[i]`` is a sequence of (box, score) for image i and
    ``ground_truth[i]`` an (n_i, 4) array. Returns None when there is no GT.
    """
    n_gt = sum(len(np.asarray(g).reshape(-1, 4)) for g in ground_truth)
    if n_gt == 0:
        return None
    rows = [(float(s), img, k, tuple(b)) for img, dets in enumerate(detections)
            for k, (b, s) in enumerate(dets)]
    if not rows:
        return 0.0, 0.0
    scores = np.array([r[0] for r in rows])
    order = np.lexsort((np.arange(len(rows)), -scores))
    taken = [np.zeros(len(np.asarray(g).reshape(-1, 4)), dtype=bool) for g in ground_truth]
    hits = np.zeros(len(rows), dtype=bool)
    for rank, r in enumerate(order):
        _, img, _, box = rows[r]
        gts = np.asarray(ground_truth[img], dtype=np.float64).reshape(-1, 4)
        if len(gts) == 0:
            continue
        iou = box_iou(np.array([box]), gts)[0]
        cand = np.where(~taken[img] & (iou >= iou_thresh), iou, -1.0)
        j = int(cand.argmax())
        if cand[j] >= iou_thresh:
            taken[img][j] = True
            hits[rank] = True
    return average_precision(hits, n_gt), float(hits.sum() / n_gt)


@dataclass
class GalleryScene:
    boxes: np.ndarray  # (n, 4) detections
    embeddings: np.ndarray  # (n, D) unit vectors
    query_gt: np.ndarray  # (m, 4) GT boxes of the query identity in this scene


@dataclass
class QueryCase:
    identity: int
    embedding: np.ndarray
    gallery: list[GalleryScene]


def query_ap(case: QueryCase, iou_thresh: float = 0.5, k: int = 1) -> tuple[float, bool] | None:
    """(AP, hit within top-k) for one query; None when the identity has no GT in its gallery."""
    n_gt = sum(len(g.query_gt) for g in case.gallery)
    if n_gt == 0:
        return None
    q = np.asarray(case.embedding, dtype=np.float64)
    q = q / max(np.linalg.norm(q), 1e-12)
    sims, scene_of, local = [], [], []
    for si, g in enumerate(case.gallery):
        if len(g.boxes) == 0:
            continue
        e = np.asarray(g.embeddings, dtype=np.float64)
        e = e / np.maximum(np.linalg.norm(e, axis=1, keepdims=True), 1e-12)
        sims.append(e @ q)
        scene_of.append(np.full(len(g.boxes), si))
        local.append(np.arange(len(g.boxes)))
    if not sims:
        return 0.0, False
    sims = np.concatenate(sims)
    scene_of = np.concatenate(scene_of)
    local = np.concatenate(local)
    order = np.lexsort((np.arange(len(sims)), -sims))
    hits = np.zeros(len(order), dtype=bool)
    claimed = {si: np.zeros(len(g.query_gt), dtype=bool) for si, g in enumerate(case.gallery)}
    for rank, i in enumerate(order):
        g = case.gallery[scene_of[i]]
        if len(g.query_gt) == 0:
            continue
        iou = box_iou(g.boxes[local[i]], g.query_gt)[0]
        taken = claimed[scene_of[i]]
        cand = np.where(~taken & (iou >= iou_thresh), iou, -1.0)
        j = int(cand.argmax())
        if cand[j] >= iou_thresh:
            taken[j] = True
            hits[rank] = True
    return average_precision(hits, n_gt), bool(hits[:k].any())


def search_map_cmc(queries: list[QueryCase], iou_thresh: float = 0.5, k: int = 1):
    """(mAP, CMC@k, per-query [(index, AP, hit)], skipped count)."""
    if not queries:
        raise EvaluationError("no queries to evaluate")
    per_query, skipped = [], 0
    for qi, case in enumerate(queries):
        res = query_ap(case, iou_thresh, k)
        if res is None:
            skipped += 1
            continue
        per_query.append((qi, res[0], res[1]))
    if not per_query:
        raise EvaluationError(f"all {len(queries)} queries lack their identity in the gallery")
    aps = np.array([r[1] for r in per_query])
    top = np.array([r[2] for r in per_query], dtype=float)
    return float(aps.mean()), float(top.mean()), per_query, skipped


@dataclass
class MetricsReport:
    det_map: float
    det_recall: float
    search_map: float
    cmc_top1: float
    n_queries: int
    n_skipped: int
    per_query: list = field(default_factory=list)  # (query index, identity, AP, hit)

    def row(self) -> dict:
        return {c: getattr(self, c) for c in METRIC_COLUMNS}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        w.writerow([repr(float(v)) if isinstance(v, float) else v for v in self.row().values()])
        return buf.getvalue()

    def per_query_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(QUERY_COLUMNS)
        for qi, ident, ap, hit in self.per_query:
            w.writerow([qi, ident, repr(float(ap)), int(hit)])
        return buf.getvalue()


def evaluate_model(model, split, iou_thresh: float = 0.5, k: int = 1) -> MetricsReport:
    """Detect on every gallery scene once, then score detection and every query."""
    if not split.gallery:
        raise EvaluationError("dataset has an empty gallery")
    if not split.queries:
        raise EvaluationError("dataset has no queries")
    detections = [model.detect(scene.image) for scene in split.gallery]
    det = detection_ap_recall([[(d.box, d.score) for d in dets] for dets in detections],
                              [scene.boxes() for scene in split.gallery], iou_thresh)
    det_map, det_recall = det if det is not None else (0.0, 0.0)
    dim = model.cfg.embed_dim
    cases = []
    for q in split.queries:
        emb = model.embed_crop(split.gallery[q.scene].image, q.box)
        gallery = []
        for si in q.gallery:
            dets = detections[si]
            gt = np.array([p.box for p in split.gallery[si].persons if p.identity == q.identity]).reshape(-1, 4)
            gallery.append(GalleryScene(np.array([d.box for d in dets]).reshape(-1, 4),
                                        np.array([d.embedding for d in dets]).reshape(-1, dim), gt))
        cases.append(QueryCase(q.identity, emb, gallery))
    smap, cmc, per_query, skipped = search_map_cmc(cases, iou_thresh, k)
    if skipped:
        logger.info("skipped %d queries whose identity is absent from their gallery", skipped)
    rows = [(qi, split.queries[qi].identity, ap, hit) for qi, ap, hit in per_query]
    return MetricsReport(det_map, det_recall, smap, cmc, len(per_query), skipped, rows)
