"""Attack objectives and smoothness penalties with analytic gradients.

Boxes are center format (cx, cy, w, h) in pixels. All functions are
pure and dtype-generic: float32 in the pipeline, float64 in the
finite-difference tests.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

log = logging.getLogger(__name__)

CONF_CEIL = 1.0 - 1e-7


# ---------------------------------------------------------------------------
# box geometry

def _corners(box):
    cx, cy, w, h = box[..., 0], box[..., 1], box[..., 2], box[..., 3]
    return cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2


def _intersection(a, b):
    ax1, ay1, ax2, ay2 = _corners(a)
    bx1, by1, bx2, by2 = _corners(b)
    ix = np.maximum(0.0, np.minimum(ax2, bx2) - np.maximum(ax1, bx1))
    iy = np.maximum(0.0, np.minimum(ay2, by2) - np.maximum(ay1, by1))
    return ix * iy


def iou(box_a, box_b):
    """Intersection over union of two center-format boxes."""
    box_a = np.asarray(box_a, dtype=float)
    box_b = np.asarray(box_b, dtype=float)
    if box_a[2] <= 0 or box_a[3] <= 0 or box_b[2] <= 0 or box_b[3] <= 0:
        raise ValueError("boxes must have positive width and height")
    inter = _intersection(box_a, box_b)
    union = box_a[2] * box_a[3] + box_b[2] * box_b[3] - inter
    return float(inter / union)


def iop(box_pred, box_gt):
    """Intersection area over the prediction's own area."""
    box_pred = np.asarray(box_pred, dtype=float)
    box_gt = np.asarray(box_gt, dtype=float)
    area = box_pred[2] * box_pred[3]
    if area <= 0:
        raise ValueError("prediction box must have positive area")
    return float(_intersection(box_pred, box_gt) / area)


def iou_many(boxes, gt):
    """IoU of each row of boxes (N, 4) against one gt box (4,)."""
    boxes = np.asarray(boxes)
    gt = np.asarray(gt, dtype=boxes.dtype)
    inter = _intersection(boxes, gt[None, :])
    union = boxes[:, 2] * boxes[:, 3] + gt[2] * gt[3] - inter
    return inter / union


def iop_many(boxes, gt):
    boxes = np.asarray(boxes)
    gt = np.asarray(gt, dtype=boxes.dtype)
    inter = _intersection(boxes, gt[None, :])
    return inter / (boxes[:, 2] * boxes[:, 3])


def iou_grad(boxes, gt):
    """IoU values and gradients wrt each predicted (cx, cy, w, h).

    boxes: (N, 4); gt: (4,). Piecewise-defined; at a configuration where
    an argmax/argmin switches sides the one-sided derivative is used.
    Returns (iou (N,), grad (N, 4)).
    """
    boxes = np.asarray(boxes)
    gt = np.asarray(gt, dtype=boxes.dtype)
    ax1, ay1, ax2, ay2 = _corners(boxes)
    bx1, by1, bx2, by2 = _corners(gt)

    ix = np.minimum(ax2, bx2) - np.maximum(ax1, bx1)
    iy = np.minimum(ay2, by2) - np.maximum(ay1, by1)
    pos = (ix > 0) & (iy > 0)
    ixc = np.maximum(ix, 0.0)
    iyc = np.maximum(iy, 0.0)
    inter = ixc * iyc
    area_p = boxes[:, 2] * boxes[:, 3]
    union = area_p + gt[2] * gt[3] - inter
    val = inter / union

    # d(ix)/d(corner): the clamp and the min/max select which corner moves.
    d_ix_ax1 = np.where(pos & (ax1 > bx1), -1.0, 0.0)
    d_ix_ax2 = np.where(pos & (ax2 < bx2), 1.0, 0.0)
    d_iy_ay1 = np.where(pos & (ay1 > by1), -1.0, 0.0)
    d_iy_ay2 = np.where(pos & (ay2 < by2), 1.0, 0.0)

    # corner derivatives wrt (cx, cy, w, h)
    # ax1 = cx - w/2, ax2 = cx + w/2, likewise in y.
    d_inter = np.empty_like(boxes)
    d_inter[:, 0] = iyc * (d_ix_ax1 + d_ix_ax2)
    d_inter[:, 1] = ixc * (d_iy_ay1 + d_iy_ay2)
    d_inter[:, 2] = iyc * (-0.5 * d_ix_ax1 + 0.5 * d_ix_ax2)
    d_inter[:, 3] = ixc * (-0.5 * d_iy_ay1 + 0.5 * d_iy_ay2)

    d_area = np.zeros_like(boxes)
    d_area[:, 2] = boxes[:, 3]
    d_area[:, 3] = boxes[:, 2]

    # IoU = I/U with U = A + B - I, dU = dA - dI.
    d_union = d_area - d_inter
    grad = (d_inter * union[:, None] - inter[:, None] * d_union) / \
        (union ** 2)[:, None]
    return val, grad


# ---------------------------------------------------------------------------
# attack losses

@dataclass
class LossReport:
    """Scalar loss values for one optimization step plus the index sets used."""

    cls_value: float = 0.0
    iou_value: float = 0.0
    attack_value: float = 0.0
    smooth_value: float = 0.0
    total_value: float = 0.0
    omega_iop: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    omega_iou: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))

    CSV_FIELDS = ("step", "cls_loss", "iou_loss", "attack_loss",
                  "smooth_loss", "total_loss", "texture_min", "texture_max")

    def csv_row(self, step, tmin, tmax):
        return (f"{step},{self.cls_value:.8f},{self.iou_value:.8f},"
                f"{self.attack_value:.8f},{self.smooth_value:.8f},"
                f"{self.total_value:.8f},{tmin:.8f},{tmax:.8f}")


def cls_loss(confs, boxes, gt_box, tau_iop):
    """Suppression loss on class confidences of well-placed predictions.

    confs: (N, C) in (0, 1); boxes: (N, 4); gt_box: (4,).
    Predictions whose IoP exceeds tau_iop contribute -log(1 - conf) for
    every class. Returns (value, dconf (N, C), omega indices).
    """
    confs = np.asarray(confs)
    boxes = np.asarray(boxes)
    dconf = np.zeros_like(confs)
    if confs.shape[0] == 0:
        return 0.0, dconf, np.zeros(0, np.int64)
    omega = np.nonzero(iop_many(boxes, gt_box) > tau_iop)[0]
    if omega.size == 0:
        return 0.0, dconf, omega
    sel = confs[omega]
    if np.any(sel >= 1.0):
        log.warning("confidence at 1.0 clamped to %g in cls loss", CONF_CEIL)
    sel = np.minimum(sel, confs.dtype.type(CONF_CEIL))
    value = -np.log1p(-sel).sum()
    dconf[omega] = 1.0 / (1.0 - sel)
    return float(value), dconf, omega


def iou_loss(boxes, gt_box, tau_iou):
    """Sum of IoU over predictions that still overlap the truth too much.

    Returns (value, dboxes (N, 4), omega indices). Membership of the
    index set is treated as constant during differentiation.
    """
    boxes = np.asarray(boxes)
    dboxes = np.zeros_like(boxes)
    if boxes.shape[0] == 0:
        return 0.0, dboxes, np.zeros(0, np.int64)
    vals, grads = iou_grad(boxes, np.asarray(gt_box))
    omega = np.nonzero(vals > tau_iou)[0]
    if omega.size == 0:
        return 0.0, dboxes, omega
    dboxes[omega] = grads[omega]
    return float(vals[omega].sum()), dboxes, omega


def attack_loss(cls_value, iou_value, beta):
    return cls_value + beta * iou_value


def total_loss(attack_value, smooth_value, gamma):
    return attack_value + gamma * smooth_value


# ---------------------------------------------------------------------------
# smoothness

def tv_loss(texture, eps=1e-8):
    """Total variation over pixels that have both a right and a down neighbor.

    texture: (H, W) or (H, W, C); channel differences are summed inside
    the square root. Returns (value, gradient like texture).
    """
    t = np.asarray(texture)
    squeeze = t.ndim == 2
    if squeeze:
        t = t[:, :, None]
    dv = t[:-1, :-1] - t[1:, :-1]   # down difference
    dh = t[:-1, :-1] - t[:-1, 1:]   # right difference
    s = np.sqrt((dv ** 2).sum(-1) + (dh ** 2).sum(-1) + eps)
    value = float(s.sum())
    grad = np.zeros_like(t)
    # subgradient 0 at exactly-flat pixels when eps is 0
    inv = np.where(s > 0, 1.0 / np.where(s > 0, s, 1.0), 0.0)
    gv = dv * inv[:, :, None]
    gh = dh * inv[:, :, None]
    grad[:-1, :-1] += gv + gh
    grad[1:, :-1] -= gv
    grad[:-1, 1:] -= gh
    if squeeze:
        grad = grad[:, :, 0]
    return value, grad


def _clamp_shift(t, n, m):
    H, W = t.shape[0], t.shape[1]
    ii = np.clip(np.arange(H) + n, 0, H - 1)
    jj = np.clip(np.arange(W) + m, 0, W - 1)
    return t[ii][:, jj]


def local_variation_bruteforce(texture, k):
    """Per-pixel sum of squared differences to every neighbor in a k x k
    window, edge pixels clamped; channels summed. Returns (H, W)."""
    t = np.asarray(texture)
    if t.ndim == 2:
        t = t[:, :, None]
    r = k // 2
    d = np.zeros(t.shape[:2], dtype=t.dtype)
    for n in range(-r, r + 1):
        for m in range(-r, r + 1):
            diff = t - _clamp_shift(t, n, m)
            d += (diff ** 2).sum(-1)
    return d


def boxsum(x, k):
    """Sum over a k x k window around each pixel with clamp-to-edge padding.

    x: (H, W) or (H, W, C); output has the same shape.
    """
    r = k // 2
    pad = ((r, r), (r, r)) + ((0, 0),) * (x.ndim - 2)
    xp = np.pad(x, pad, mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(0, 1))
    return win.sum(axis=(-2, -1))


def boxsum_adjoint(g, k):
    """Transpose of boxsum under the standard inner product.

    Window summation transposes to a zero-padded window sum; the
    replicate padding transposes to folding the border bands back in.
    """
    r = k // 2
    pad = ((k - 1, k - 1), (k - 1, k - 1)) + ((0, 0),) * (g.ndim - 2)
    gz = np.pad(g, pad)
    win = np.lib.stride_tricks.sliding_window_view(gz, (k, k), axis=(0, 1))
    y = win.sum(axis=(-2, -1))  # (H + 2r, W + 2r, ...)
    H = g.shape[0]
    W = g.shape[1]
    out = y[r:H + r].copy()
    if r:
        out[0] += y[:r].sum(0)
        out[H - 1] += y[H + r:].sum(0)
    out2 = out[:, r:W + r].copy()
    if r:
        out2[:, 0] += out[:, :r].sum(1)
        out2[:, W - 1] += out[:, W + r:].sum(1)
    return out2


def local_variation_fast(texture, k):
    """Equivalent to the brute-force window loss via two box sums:
    D = k^2 T^2 - 2 T (T box) + (T^2 box), summed over channels."""
    t = np.asarray(texture)
    if t.ndim == 2:
        t = t[:, :, None]
    bt = boxsum(t, k)
    bt2 = boxsum(t ** 2, k)
    d = (k * k) * (t ** 2) - 2.0 * t * bt + bt2
    # a sum of squares: cancellation must not leave it below zero, or
    # the square root downstream goes NaN on near-constant regions
    return np.maximum(d.sum(-1), 0.0)


def smooth_loss(texture, k, eps=1e-8):
    """Mean square-root local variation with gradient wrt the texture."""
    t = np.asarray(texture)
    squeeze = t.ndim == 2
    if squeeze:
        t = t[:, :, None]
    H, W = t.shape[:2]
    d = local_variation_fast(t, k)
    s = np.sqrt(d + eps)
    value = float(s.sum() / (H * W))

    # dL/dD, shared across channels of each pixel
    g = (0.5 / s) / (H * W)
    gc = g[:, :, None]
    bt = boxsum(t, k)
    grad = (2.0 * k * k) * gc * t
    grad -= 2.0 * (gc * bt + boxsum_adjoint(gc * t, k))
    grad += 2.0 * t * boxsum_adjoint(gc, k)
    if squeeze:
        grad = grad[:, :, 0]
    return value, grad
