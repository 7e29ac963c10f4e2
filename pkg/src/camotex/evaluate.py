"""Metrics and experiment runners.

Detection quality is measured on detection dumps (image id, class, box,
confidence) against one ground-truth box per image, with optional class
merging. Experiment helpers drive the optimizer across gamma values,
loss subsets, and initialization strategies.
"""

from __future__ import annotations

import logging
from dataclasses import replace
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from camotex import losses
from camotex.config import EvalConfig, LossConfig, RunConfig
from camotex.detector import DetectorModel, detect, nms
from camotex.render import TextureMap, retexture

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# metrics

def average_precision(detections, gt_boxes, iou_thresh=0.5,
                      merge_classes=(0,)):
    """All-point interpolated AP for one gt box per image.

    detections: iterable of (image_id, cls, box(4,), conf); gt_boxes:
    {image_id: box}. Detections of classes outside merge_classes are
    ignored; inside it they compete as one class. Greedy matching by
    descending confidence.
    """
    if not gt_boxes:
        raise ValueError("ground-truth manifest is empty")
    merge = set(merge_classes)
    rows = [(float(conf), idx, img, np.asarray(box, float))
            for idx, (img, cls, box, conf) in enumerate(detections)
            if cls in merge and img in gt_boxes]
    rows.sort(key=lambda r: (-r[0], r[1]))
    if not rows:
        return 0.0
    npos = len(gt_boxes)
    matched = set()
    flags = []
    for conf, _, img, box in rows:
        hit = img not in matched and \
            losses.iou(box, gt_boxes[img]) >= iou_thresh
        if hit:
            matched.add(img)
        flags.append(hit)
    # exact rational PR integration: counts are small integers, so the
    # envelope sum carries no float error
    tp = 0
    prs = []
    for k, hit in enumerate(flags, 1):
        tp += int(hit)
        prs.append((Fraction(tp, npos), Fraction(tp, k)))
    ap = Fraction(0)
    prev = Fraction(0)
    best = Fraction(0)
    env = []
    for r, p in reversed(prs):
        best = max(best, p)
        env.append((r, best))
    for r, p in reversed(env):
        if r > prev:
            ap += (r - prev) * p
            prev = r
    return float(ap)


def adr(detections, gt_boxes, conf_thresh=0.25, iou_thresh=0.5,
        merge_classes=(0,)):
    """Fraction of images holding at least one confident, well-placed
    detection of a merged class."""
    if not gt_boxes:
        return 0.0
    merge = set(merge_classes)
    found = set()
    for img, cls, box, conf in detections:
        if cls in merge and img in gt_boxes and conf >= conf_thresh and \
                img not in found and \
                losses.iou(np.asarray(box, float), gt_boxes[img]) >= iou_thresh:
            found.add(img)
    return len(found) / len(gt_boxes)


# ---------------------------------------------------------------------------
# running the detector over a test set

def detection_records(samples, model: DetectorModel, texture,
                      cfg: EvalConfig):
    """Post-suppression detection dump rows for a texture on a sample
    set, via the exact re-texturing path."""
    records = []
    for s in samples:
        img = retexture(s, texture)
        dets = detect(img, model, cfg.conf_floor)
        for sb in nms(dets, cfg.nms_iou, cfg.conf_floor):
            records.append((s.sample_id, sb.cls, tuple(float(x)
                                                       for x in sb.box),
                            float(sb.conf)))
    return records


def gt_map(samples) -> Dict[str, np.ndarray]:
    return {s.sample_id: np.asarray(s.b_gt, float) for s in samples}


def evaluate_texture(samples, model, texture, cfg: EvalConfig):
    """(AP, ADR, dump records) for one texture on one sample set."""
    records = detection_records(samples, model, texture, cfg)
    gts = gt_map(samples)
    merge = tuple(cfg.merge_classes)
    ap = average_precision(records, gts, cfg.ap_iou, merge)
    rate = adr(records, gts, cfg.adr_conf, cfg.ap_iou, merge)
    return ap, rate, records


def compare_textures(textures: Dict[str, TextureMap], samples, model,
                     cfg: EvalConfig):
    """AP/ADR table over named textures, in a fixed row order."""
    order = [n for n in ("base", "naive", "random", "adversarial")
             if n in textures]
    order += [n for n in textures if n not in order]
    rows = []
    for name in order:
        ap, rate, _ = evaluate_texture(samples, model, textures[name], cfg)
        rows.append({"texture": name, "ap50": ap, "adr": rate})
        log.info("texture %-12s AP@0.5 %.4f ADR %.4f", name, ap, rate)
    return rows


def rows_to_csv(rows: Sequence[dict], path=None) -> str:
    if not rows:
        return ""
    fields = list(rows[0].keys())
    lines = [",".join(fields)]
    for r in rows:
        lines.append(",".join(
            f"{r[f]:.6f}" if isinstance(r[f], float) else str(r[f])
            for f in fields))
    text = "\n".join(lines) + "\n"
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


# ---------------------------------------------------------------------------
# saliency

def ablation_saliency(image, model: DetectorModel, b_gt, grid=8, stage=2):
    """Confidence-drop heatmap from zeroing spatial blocks of a mid
    feature map.

    Baseline is the best truck confidence among cells whose center lies
    in the truth box; each block's saliency is the drop it causes.
    """
    size = image.shape[0]
    stride = model.stride
    S = size // stride

    def truck_conf(raw):
        from camotex.detector import decode
        _, confs = decode(raw, stride, model.classes)
        cx, cy, w, h = [float(v) for v in b_gt]
        centers = (np.arange(S) + 0.5) * stride
        in_x = (centers >= cx - w / 2) & (centers <= cx + w / 2)
        in_y = (centers >= cy - h / 2) & (centers <= cy + h / 2)
        sel = confs[0][np.ix_(in_y, in_x)]
        return float(sel[..., 0].max()) if sel.size else 0.0

    base_conf = truck_conf(model.forward(image[None]))
    feat_size = size // (2 ** (stage + 1))
    block = max(feat_size // grid, 1)
    nblk = feat_size // block
    heat = np.zeros((nblk, nblk), np.float32)
    for bi in range(nblk):
        for bj in range(nblk):
            mask = np.ones((feat_size, feat_size), np.float32)
            mask[bi * block:(bi + 1) * block,
                 bj * block:(bj + 1) * block] = 0.0
            raw = model.feature_forward(image[None], ablate_stage=stage,
                                        ablate_mask=mask)
            heat[bi, bj] = max(0.0, base_conf - truck_conf(raw))
    peak = heat.max()
    if peak > 0:
        heat = heat / peak
    up = size // nblk
    return np.kron(heat, np.ones((up, up), np.float32))


def saliency_overlay(image, heatmap):
    """Red-tinted overlay for a PPM dump."""
    out = image.copy()
    h = heatmap[..., None]
    red = np.zeros_like(out)
    red[..., 0] = 1.0
    return (out * (1.0 - 0.6 * h) + red * 0.6 * h).astype(np.float32)


# ---------------------------------------------------------------------------
# rank statistics

def rankdata(values):
    """Ranks starting at 1, ties averaged."""
    v = np.asarray(values, float)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(len(v), float)
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and v[order[j + 1]] == v[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(xs, ys):
    """Rank correlation coefficient."""
    rx = rankdata(xs)
    ry = rankdata(ys)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt((rx ** 2).sum() * (ry ** 2).sum())
    if denom == 0:
        return 0.0
    return float((rx * ry).sum() / denom)


# ---------------------------------------------------------------------------
# experiment runners (gamma sweep, loss ablation, init study)

def run_gamma_sweep(train_samples, test_samples, detector_model,
                    enhancer_model, run_cfg: RunConfig, loss_cfg: LossConfig,
                    eval_cfg: EvalConfig, gammas, seed, max_steps=None):
    """Optimize once per gamma; report final smoothness and test metrics."""
    from camotex.optim import optimize_texture

    rows = []
    for gamma in gammas:
        rc = replace(run_cfg, max_steps=max_steps or run_cfg.max_steps)
        lc = replace(loss_cfg, gamma=float(gamma))
        tex, _ = optimize_texture(train_samples, detector_model,
                                  enhancer_model, rc, lc, seed)
        smooth_v, _ = losses.smooth_loss(tex.values, loss_cfg.kernel_size,
                                         loss_cfg.eps_sqrt)
        ap, rate, _ = evaluate_texture(test_samples, detector_model, tex,
                                       eval_cfg)
        span = float((tex.values.max(axis=(0, 1)) -
                      tex.values.min(axis=(0, 1))).max())
        rows.append({"gamma": float(gamma), "final_smooth": smooth_v,
                     "ap50": ap, "adr": rate, "max_channel_span": span})
        log.info("gamma %g -> smooth %.5f AP %.4f", gamma, smooth_v, ap)
    return rows


def run_loss_ablation(train_samples, test_samples, detector_model,
                      enhancer_model, run_cfg: RunConfig,
                      loss_cfg: LossConfig, eval_cfg: EvalConfig, seed,
                      max_steps=None):
    """Attack with the class loss alone versus class + box-overlap loss."""
    from camotex.optim import optimize_texture

    rows = []
    for name, use_iou in (("cls_only", False), ("cls_plus_iou", True)):
        rc = replace(run_cfg, use_iou_loss=use_iou,
                     max_steps=max_steps or run_cfg.max_steps)
        tex, _ = optimize_texture(train_samples, detector_model,
                                  enhancer_model, rc, loss_cfg, seed)
        ap, rate, _ = evaluate_texture(test_samples, detector_model, tex,
                                       eval_cfg)
        rows.append({"scheme": name, "ap50": ap, "adr": rate})
        log.info("loss scheme %s -> AP %.4f ADR %.4f", name, ap, rate)
    return rows


def run_init_study(train_samples, test_samples, detector_model,
                   enhancer_model, run_cfg: RunConfig, loss_cfg: LossConfig,
                   eval_cfg: EvalConfig, seed, strategies=("zeros", "ones",
                                                           "random", "base"),
                   max_steps=None):
    """Optimize from each starting texture; report test metrics."""
    from camotex.optim import optimize_texture

    rows = []
    for strategy in strategies:
        rc = replace(run_cfg, init_strategy=strategy,
                     max_steps=max_steps or run_cfg.max_steps)
        tex, _ = optimize_texture(train_samples, detector_model,
                                  enhancer_model, rc, loss_cfg, seed)
        ap, rate, _ = evaluate_texture(test_samples, detector_model, tex,
                                       eval_cfg)
        rows.append({"init": strategy, "ap50": ap, "adr": rate})
        log.info("init %s -> AP %.4f ADR %.4f", strategy, ap, rate)
    return rows


def records_to_dump(records) -> List[Tuple]:
    """Adapt metric records to the detection-dump writer."""
    return [(img, cls, box[0], box[1], box[2], box[3], conf)
            for img, cls, box, conf in records]


def dump_to_records(rows) -> List[Tuple]:
    """Adapt parsed dump lines to metric records."""
    return [(img, cls, (cx, cy, w, h), conf)
            for img, cls, cx, cy, w, h, conf in rows]
