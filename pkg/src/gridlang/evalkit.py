"""Post-processing and metrics.

Decoded subsequences are parsed into structured detections (dropping
malformed ones), scored by the softmax probability of their first token,
deduplicated with class-wise NMS, and scored with COCO-style AP plus
semantic/cumulative/global IoU variants for the mask tasks.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .codec import CodecError, parse_response, undiscretize
from .decode import (SubsequenceResult, decode_grid, decode_single,
                     mask_query_hiddens, positive_rate)
from .model import GridSpec, Model
from .retrieval import assemble_mask, predict_depth, predict_normals
from .synth import BACKGROUND_ID, Sample, rle_decode

IOU_GRID = np.arange(0.50, 0.96, 0.05)


@dataclass
class Detection:
    class_id: int
    box: tuple[float, float, float, float]
    score: float
    mask: np.ndarray | None = None


@dataclass
class MetricReport:
    ap50: float = 0.0
    ap_coco: float = 0.0
    miou: float = 0.0
    ciou: float = 0.0
    giou: float = 0.0
    positive_prediction_rate: float = 0.0
    extras: dict = field(default_factory=dict)

    def validate(self) -> None:
        for k in ("ap50", "ap_coco", "miou", "ciou", "giou",
                  "positive_prediction_rate"):
            v = getattr(self, k)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{k}={v} outside [0, 1]")

    def to_json(self) -> str:
        d = {k: getattr(self, k) for k in
             ("ap50", "ap_coco", "miou", "ciou", "giou",
              "positive_prediction_rate")}
        d.update(self.extras)
        return json.dumps(d, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------

def box_iou(a, b) -> float:
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    ix = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    iy = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = ix * iy
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    if union <= 0:
        return 0.0
    return inter / union


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        return 1.0  # both empty: perfect agreement
    return int(np.logical_and(a, b).sum()) / union


def _det_iou(a: Detection, b: Detection, use_mask: bool) -> float:
    if use_mask and a.mask is not None and b.mask is not None:
        return mask_iou(a.mask, b.mask)
    return box_iou(a.box, b.box)


def nms(dets: list[Detection], threshold: float = 0.5,
        use_mask: bool = False) -> list[Detection]:
    """Greedy class-wise suppression; keeps the score order of survivors."""
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    keep: list[int] = []
    for i in order:
        ok = True
        for j in keep:
            if dets[j].class_id != dets[i].class_id:
                continue
            if _det_iou(dets[j], dets[i], use_mask) > threshold:
                ok = False
                break
        if ok:
            keep.append(i)
    return [dets[i] for i in keep]


# ---------------------------------------------------------------------------
# AP
# ---------------------------------------------------------------------------

def _class_ap(dets: list[tuple[int, Detection]], gts: dict[int, list],
              thr: float, use_mask: bool) -> float:
    """AP for one class at one IoU threshold; dets are (image_id, det)."""
    n_gt = sum(len(v) for v in gts.values())
    if n_gt == 0:
        return float("nan")
    dets = sorted(dets, key=lambda t: -t[1].score)
    matched: dict[int, set] = {}
    tp = np.zeros(len(dets))
    fp = np.zeros(len(dets))
    for di, (img, det) in enumerate(dets):
        best, best_g = 0.0, -1
        for gi, gt in enumerate(gts.get(img, [])):
            if gi in matched.get(img, set()):
                continue
            iou = _det_iou(det, gt, use_mask)
            if iou > best:
                best, best_g = iou, gi
        if best >= thr and best_g >= 0:
            matched.setdefault(img, set()).add(best_g)
            tp[di] = 1
        else:
            fp[di] = 1
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(fp)
    recall = cum_tp / n_gt
    precision = cum_tp / np.maximum(cum_tp + cum_fp, 1e-12)
    # 101-point interpolation
    ap = 0.0
    for r in np.linspace(0, 1, 101):
        mask = recall >= r - 1e-12
        ap += precision[mask].max() if mask.any() else 0.0
    return ap / 101


def average_precision(dets_per_image: list[list[Detection]],
                      gts_per_image: list[list[Detection]],
                      iou_thresholds=IOU_GRID,
                      use_mask: bool = False) -> dict[float, float]:
    """COCO-style AP: per class, per threshold, then class-mean."""
    classes = sorted({g.class_id for gts in gts_per_image for g in gts}
                     | {d.class_id for ds in dets_per_image for d in ds})
    out = {}
    for thr in np.atleast_1d(iou_thresholds):
        vals = []
        for c in classes:
            cdets = [(i, d) for i, ds in enumerate(dets_per_image)
                     for d in ds if d.class_id == c]
            cgts = {i: [g for g in gts if g.class_id == c]
                    for i, gts in enumerate(gts_per_image)}
            ap = _class_ap(cdets, cgts, float(thr), use_mask)
            if not np.isnan(ap):
                vals.append(ap)
        out[round(float(thr), 2)] = float(np.mean(vals)) if vals else 0.0
    return out


# ---------------------------------------------------------------------------
# segmentation metrics
# ---------------------------------------------------------------------------

def semantic_miou(pred_map: np.ndarray, gt_map: np.ndarray,
                  n_classes: int) -> float:
    """Class-mean IoU; classes absent from both maps are skipped."""
    if pred_map.shape != gt_map.shape:
        raise ValueError("semantic maps differ in shape")
    vals = []
    for c in range(n_classes):
        p = pred_map == c
        g = gt_map == c
        if not p.any() and not g.any():
            continue
        vals.append(mask_iou(p, g))
    return float(np.mean(vals)) if vals else 1.0


def ciou(pairs: list[tuple[np.ndarray, np.ndarray]]) -> float:
    """Cumulative IoU: summed intersections over summed unions."""
    inter = union = 0
    for p, g in pairs:
        p = np.asarray(p, dtype=bool)
        g = np.asarray(g, dtype=bool)
        inter += int((p & g).sum())
        union += int((p | g).sum())
    return inter / union if union else 1.0


def giou(pairs: list[tuple[np.ndarray, np.ndarray]]) -> float:
    """Global IoU: mean of per-sample mask IoUs."""
    if not pairs:
        return 1.0
    return float(np.mean([mask_iou(p, g) for p, g in pairs]))


# ---------------------------------------------------------------------------
# decode post-processing
# ---------------------------------------------------------------------------

@dataclass
class PostprocessResult:
    detections: list[Detection]
    malformed: int
    positive: float


def postprocess(model: Model, results: list[SubsequenceResult], prefix,
                nms_threshold: float = 0.5, use_mask: bool = False,
                expected_mask_tokens: int | None = None) -> PostprocessResult:
    """Parse decoded subsequences, score, build masks, run class-wise NMS."""
    cfg = model.cfg
    vocab = model.vocab
    h, w = cfg.image_size
    if expected_mask_tokens is None:
        expected_mask_tokens = cfg.mask_tokens_side ** 2
    dets: list[Detection] = []
    malformed = 0
    for res in results:
        try:
            pred = parse_response(res.tokens, expected_mask_tokens, vocab)
        except CodecError:
            malformed += 1
            continue
        if pred.kind == "empty":
            continue
        if pred.kind == "box":
            x1 = undiscretize(pred.quant_box[0], float(w))
            y1 = undiscretize(pred.quant_box[1], float(h))
            x2 = undiscretize(pred.quant_box[2], float(w))
            y2 = undiscretize(pred.quant_box[3], float(h))
            if x2 <= x1 or y2 <= y1:
                malformed += 1
                continue
            dets.append(Detection(pred.class_id, (x1, y1, x2, y2),
                                  res.first_prob))
        else:
            queries = mask_query_hiddens(res, pred.mask_positions)
            bm = assemble_mask(queries, prefix.h_v, (h, w))
            ys, xs = np.nonzero(bm.mask)
            if len(xs):
                box = (float(xs.min()), float(ys.min()),
                       float(xs.max() + 1), float(ys.max() + 1))
            else:
                box = (0.0, 0.0, 1.0, 1.0)
            dets.append(Detection(pred.class_id, box, res.first_prob,
                                  mask=bm.mask))
    kept = nms(dets, nms_threshold, use_mask=use_mask)
    return PostprocessResult(kept, malformed, positive_rate(results))


# ---------------------------------------------------------------------------
# end-to-end evaluation drivers
# ---------------------------------------------------------------------------

def _gt_detections(sample: Sample, with_masks: bool = False) -> list[Detection]:
    out = []
    for i, b in enumerate(sample.boxes):
        mask = rle_decode(sample.instance_masks[i]) if with_masks else None
        out.append(Detection(b.class_id, b.corners, 1.0, mask=mask))
    return out


def eval_detection(model: Model, samples: list[Sample], grid: GridSpec,
                   beam: int = 1, length_normalize: bool = True,
                   task_word: str = "detect", use_mask: bool = False) -> MetricReport:
    vocab = model.vocab
    prompt = vocab.encode_all([task_word])
    dets_all, gts_all, pos_rates = [], [], []
    malformed = 0
    t0 = time.perf_counter()
    for s in samples:
        results, prefix = decode_grid(model, prompt, s.image, grid,
                                      beam_width=beam,
                                      length_normalize=length_normalize)
        post = postprocess(model, results, prefix, use_mask=use_mask)
        dets_all.append(post.detections)
        gts_all.append(_gt_detections(s, with_masks=use_mask))
        pos_rates.append(post.positive)
        malformed += post.malformed
    elapsed = time.perf_counter() - t0
    aps = average_precision(dets_all, gts_all, use_mask=use_mask)
    report = MetricReport(
        ap50=aps[0.5],
        ap_coco=float(np.mean(list(aps.values()))),
        positive_prediction_rate=float(np.mean(pos_rates)),
        extras={"malformed": malformed, "images_per_second":
                len(samples) / max(elapsed, 1e-9)})
    return report


def eval_refer(model: Model, samples: list[Sample], beam: int = 1) -> MetricReport:
    """Referring segmentation on single-object scenes (mask IoU family)."""
    from .codec import CLASS_NAMES, COLOR_NAMES
    from .synth import instance_color
    vocab = model.vocab
    n_mask = model.cfg.mask_tokens_side ** 2
    h, w = model.cfg.image_size
    pairs = []
    malformed = 0
    t0 = time.perf_counter()
    for s in samples:
        idx = 0
        cid = s.boxes[idx].class_id
        color = instance_color(s, idx)
        prompt = vocab.encode_all(["refer", "the", COLOR_NAMES[color],
                                   CLASS_NAMES[cid]])
        res, prefix = decode_single(model, prompt, s.image, beam_width=beam)
        gt = rle_decode(s.instance_masks[idx])
        try:
            pred = parse_response(res.tokens, n_mask, vocab)
        except CodecError:
            malformed += 1
            pairs.append((np.zeros((h, w), dtype=bool), gt))
            continue
        if pred.kind != "mask":
            pairs.append((np.zeros((h, w), dtype=bool), gt))
            continue
        queries = mask_query_hiddens(res, pred.mask_positions)
        bm = assemble_mask(queries, prefix.h_v, (h, w))
        pairs.append((bm.mask, gt))
    elapsed = time.perf_counter() - t0
    return MetricReport(
        miou=giou(pairs), ciou=ciou(pairs), giou=giou(pairs),
        extras={"malformed": malformed,
                "images_per_second": len(samples) / max(elapsed, 1e-9)})


def eval_semseg(model: Model, samples: list[Sample]) -> MetricReport:
    """Per-class mask queries assembled into a semantic map, then mIoU."""
    from .codec import CLASS_NAMES
    vocab = model.vocab
    n_mask = model.cfg.mask_tokens_side ** 2
    h, w = model.cfg.image_size
    mious = []
    for s in samples:
        pred_map = np.full((h, w), BACKGROUND_ID, dtype=np.uint8)
        best = np.zeros((h, w))
        for cid, cname in enumerate(CLASS_NAMES):
            prompt = vocab.encode_all(["segment", cname])
            res, prefix = decode_single(model, prompt, s.image)
            try:
                pred = parse_response(res.tokens, n_mask, vocab)
            except CodecError:
                continue
            if pred.kind != "mask":
                continue
            queries = mask_query_hiddens(res, pred.mask_positions)
            bm = assemble_mask(queries, prefix.h_v, (h, w))
            win = bm.mask & (bm.probs > best)
            pred_map[win] = cid
            best = np.where(win, bm.probs, best)
        mious.append(semantic_miou(pred_map, s.semantic_map, len(CLASS_NAMES)))
    return MetricReport(miou=float(np.mean(mious)) if mious else 0.0)


def eval_depth_normals(model: Model, samples: list[Sample]) -> dict:
    """RMSE for depth and mean angular error (degrees) for normals."""
    from .synth import DEPTH_MAX, DEPTH_MIN
    vocab = model.vocab
    h, w = model.cfg.image_size
    sq_err, ang_err = [], []
    for s in samples:
        res, prefix = decode_single(model, vocab.encode_all(["depth"]), s.image)
        rows = [i + 1 for i, t in enumerate(res.tokens[:-1])
                if t == vocab.depth]
        q = res.hiddens[rows[0]] if rows and rows[0] < len(res.hiddens) else None
        if q is not None:
            pred = predict_depth(q, prefix.h_v, DEPTH_MIN, DEPTH_MAX,
                                 size=(h, w))
            sq_err.append(float(((pred - s.depth_map) ** 2).mean()))

        res, prefix = decode_single(model, vocab.encode_all(["normals"]),
                                    s.image)
        ids = vocab.normal_xyz
        rows = {t: i + 1 for i, t in enumerate(res.tokens[:-1]) if t in ids}
        if len(rows) == 3 and max(rows.values()) < len(res.hiddens):
            q = np.stack([res.hiddens[rows[t]] for t in ids])
            pred = predict_normals(q, prefix.h_v, size=(h, w))
            dot = np.clip((pred * s.normal_map).sum(axis=-1), -1.0, 1.0)
            ang_err.append(float(np.degrees(np.arccos(dot)).mean()))
    return {
        "depth_rmse": float(np.sqrt(np.mean(sq_err))) if sq_err else float("inf"),
        "normal_mean_angle_deg": float(np.mean(ang_err)) if ang_err else float("inf"),
    }


def write_report(report: MetricReport, path) -> None:
    report.validate()
    Path(path).write_text(report.to_json() + "\n", encoding="utf-8")
