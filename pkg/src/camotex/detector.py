"""Grid object detector with hand-written backprop.

Four stride-2 conv stages take a 128 px image to an 8 x 8 grid; a 3x3
head emits per-cell class logits and box parameters. Anchor free, no
objectness: each class carries its own logistic confidence.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from camotex import nn
from camotex.errors import NumericError

log = logging.getLogger(__name__)

RAW_SIZE_CLIP = 20.0  # |log-size| cap so exp stays finite in float32


@dataclass
class Detection:
    """One decoded grid cell: center-format box plus all class confidences."""

    box: np.ndarray     # (4,) cx, cy, w, h in pixels
    confs: np.ndarray   # (C,) in (0, 1)
    cell: int           # flat cell index, row major

    @property
    def best_class(self) -> int:
        return int(np.argmax(self.confs))

    @property
    def best_conf(self) -> float:
        return float(self.confs.max())


@dataclass
class ScoredBox:
    """A per-class detection record, the unit of dumps and evaluation."""

    box: np.ndarray
    cls: int
    conf: float
    cell: int = -1


class DetectorModel:
    """Conv stack parameters plus architecture constants."""

    def __init__(self, weights: Dict[str, np.ndarray], channels, classes,
                 leaky_slope=0.1):
        self.weights = weights
        self.channels = tuple(channels)
        self.classes = int(classes)
        self.leaky_slope = float(leaky_slope)

    STRIDE_STAGES = 4

    @property
    def stride(self) -> int:
        return 2 ** self.STRIDE_STAGES

    @classmethod
    def init(cls, rng, channels=(16, 32, 64, 64), classes=3, leaky_slope=0.1):
        weights = {}
        cin = 3
        for i, c in enumerate(channels):
            weights[f"w{i}"] = nn.he_init(rng, 3, 3, cin, c)
            weights[f"b{i}"] = np.zeros(c, np.float32)
            cin = c
        head_out = classes + 4
        # 3x3 head widens the receptive field past the stride stack alone,
        # which the box regressor needs for trucks wider than one cell
        weights["wh"] = nn.he_init(rng, 3, 3, cin, head_out)
        weights["bh"] = np.zeros(head_out, np.float32)
        # start detections small: negative class bias
        weights["bh"][:classes] = -2.0
        return cls(weights, channels, classes, leaky_slope)

    def params(self) -> Dict[str, np.ndarray]:
        return self.weights

    def param_count(self) -> int:
        return sum(int(p.size) for p in self.weights.values())

    def forward(self, images, want_cache=False):
        """images: (B, H, W, 3) -> raw head (B, S, S, C+4)."""
        h = images
        cache = {"inputs": [], "pre": []}
        for i in range(len(self.channels)):
            cache["inputs"].append(h)
            z = nn.conv2d(h, self.weights[f"w{i}"], self.weights[f"b{i}"],
                          stride=2)
            cache["pre"].append(z)
            h = nn.leaky_relu(z, self.leaky_slope)
        cache["head_in"] = h
        raw = nn.conv2d(h, self.weights["wh"], self.weights["bh"])
        if want_cache:
            return raw, cache
        return raw

    def backward(self, cache, draw, want_param_grads=True):
        """Backprop from head outputs to the input images (and params)."""
        dh, dwh, dbh = nn.conv2d_backward(cache["head_in"],
                                          self.weights["wh"], draw)
        grads = {"wh": dwh, "bh": dbh} if want_param_grads else None
        for i in reversed(range(len(self.channels))):
            dz = nn.leaky_relu_backward(cache["pre"][i], dh, self.leaky_slope)
            dh, dw, db = nn.conv2d_backward(cache["inputs"][i],
                                            self.weights[f"w{i}"], dz,
                                            stride=2)
            if want_param_grads:
                grads[f"w{i}"] = dw
                grads[f"b{i}"] = db
        return dh, grads

    def feature_forward(self, images, ablate_stage=None, ablate_mask=None):
        """Forward pass that can zero blocks of one stage's activations,
        for the ablation saliency map."""
        h = images
        for i in range(len(self.channels)):
            z = nn.conv2d(h, self.weights[f"w{i}"], self.weights[f"b{i}"],
                          stride=2)
            h = nn.leaky_relu(z, self.leaky_slope)
            if ablate_stage == i and ablate_mask is not None:
                h = h * ablate_mask[None, :, :, None]
        return nn.conv2d(h, self.weights["wh"], self.weights["bh"])


# ---------------------------------------------------------------------------
# decoding

def decode(raw, stride, classes):
    """Head outputs to (boxes, confs).

    Center = cell origin + logistic offset, scaled by stride; size =
    stride * exp(raw), raw clipped to keep exp finite.
    raw: (..., S, S, C+4) -> boxes (..., S, S, 4), confs (..., S, S, C).
    """
    S = raw.shape[-2]
    logits = raw[..., :classes]
    tb = raw[..., classes:]
    jj = np.arange(S, dtype=raw.dtype)
    ii = jj[:, None]
    confs = nn.sigmoid(logits)
    off = nn.sigmoid(tb[..., :2])
    boxes = np.empty(raw.shape[:-1] + (4,), dtype=raw.dtype)
    boxes[..., 0] = (jj[None, :] + off[..., 0]) * stride
    boxes[..., 1] = (ii + off[..., 1]) * stride
    boxes[..., 2:] = stride * np.exp(np.clip(tb[..., 2:], -RAW_SIZE_CLIP,
                                             RAW_SIZE_CLIP))
    return boxes, confs


def decode_backward(raw, stride, classes, dboxes, dconfs):
    """Chain upstream box/conf gradients back onto raw head outputs."""
    S = raw.shape[-2]
    draw = np.zeros_like(raw)
    logits = raw[..., :classes]
    sig = nn.sigmoid(logits)
    draw[..., :classes] = dconfs * sig * (1.0 - sig)
    tb = raw[..., classes:]
    soff = nn.sigmoid(tb[..., :2])
    draw[..., classes + 0] = dboxes[..., 0] * stride * soff[..., 0] * \
        (1.0 - soff[..., 0])
    draw[..., classes + 1] = dboxes[..., 1] * stride * soff[..., 1] * \
        (1.0 - soff[..., 1])
    tsz = np.clip(tb[..., 2:], -RAW_SIZE_CLIP, RAW_SIZE_CLIP)
    inside = (np.abs(tb[..., 2:]) < RAW_SIZE_CLIP)
    draw[..., classes + 2:] = dboxes[..., 2:] * stride * np.exp(tsz) * inside
    return draw


def encode(boxes, stride, classes, confs=None):
    """Inverse of decode for in-range values; used by the bijectivity
    check and to build training targets."""
    S = boxes.shape[-3]
    jj = np.arange(S, dtype=boxes.dtype)
    ii = jj[:, None]
    off_x = boxes[..., 0] / stride - jj[None, :]
    off_y = boxes[..., 1] / stride - ii

    def logit(p):
        p = np.clip(p, 1e-12, 1.0 - 1e-12)
        return np.log(p) - np.log1p(-p)

    raw = np.empty(boxes.shape[:-1] + (classes + 4,), dtype=boxes.dtype)
    if confs is not None:
        raw[..., :classes] = logit(confs)
    raw[..., classes + 0] = logit(off_x)
    raw[..., classes + 1] = logit(off_y)
    raw[..., classes + 2] = np.log(boxes[..., 2] / stride)
    raw[..., classes + 3] = np.log(boxes[..., 3] / stride)
    return raw


def detect(image, model: DetectorModel, conf_floor=0.0) -> List[Detection]:
    """Decode every cell of one image; keep cells whose best class
    confidence reaches conf_floor. Pre-suppression list."""
    if image.shape[-1] != 3:
        raise ValueError("expected an RGB image")
    raw = model.forward(image[None])
    boxes, confs = decode(raw, model.stride, model.classes)
    S = raw.shape[1]
    boxes = boxes.reshape(S * S, 4)
    confs = confs.reshape(S * S, model.classes)
    out = []
    for cell in range(S * S):
        if confs[cell].max() >= conf_floor:
            out.append(Detection(boxes[cell], confs[cell], cell))
    return out


def nms(detections: Sequence[Detection], iou_threshold,
        conf_floor=0.0) -> List[ScoredBox]:
    """Greedy per-class suppression by descending confidence; ties broken
    by cell index. Zero-confidence entries never survive."""
    from camotex.losses import iou as iou_fn

    cand = []
    for d in detections:
        for c in range(len(d.confs)):
            if d.confs[c] > conf_floor:
                cand.append(ScoredBox(d.box, c, float(d.confs[c]), d.cell))
    cand.sort(key=lambda s: (-s.conf, s.cell, s.cls))
    kept: List[ScoredBox] = []
    for s in cand:
        dup = any(k.cls == s.cls and iou_fn(k.box, s.box) >= iou_threshold
                  for k in kept)
        if not dup:
            kept.append(s)
    return kept


# ---------------------------------------------------------------------------
# training

def cell_targets(b_gt, S, stride, classes, dtype=np.float32):
    """Class and box targets for one image.

    Cells whose center lies inside the truth box are positive for class
    0; distractor classes stay negative everywhere.
    """
    cls_t = np.zeros((S, S, classes), dtype)
    pos = np.zeros((S, S), bool)
    box_t = np.zeros((S, S, 4), dtype)
    cx, cy, w, h = [float(x) for x in b_gt]
    centers = (np.arange(S) + 0.5) * stride
    in_x = (centers >= cx - w / 2) & (centers <= cx + w / 2)
    in_y = (centers >= cy - h / 2) & (centers <= cy + h / 2)
    pos[np.ix_(in_y, in_x)] = True
    cls_t[pos, 0] = 1.0
    if pos.any():
        jj = np.arange(S, dtype=dtype)
        box_t[..., 0] = np.clip(cx / stride - jj[None, :], 1e-4, 1 - 1e-4)
        box_t[..., 1] = np.clip(cy / stride - jj[:, None], 1e-4, 1 - 1e-4)
        box_t[..., 2] = np.log(max(w, 1e-3) / stride)
        box_t[..., 3] = np.log(max(h, 1e-3) / stride)
    return cls_t, pos, box_t


def _bce_with_logits(z, t):
    # log(1 + e^-|z|) + max(z,0) - z*t, elementwise stable form
    return np.logaddexp(0.0, -np.abs(z)) + np.maximum(z, 0.0) - z * t


def detection_train_loss(raw, targets, classes, box_weight=1.0):
    """Mean BCE over all cells and classes plus squared box error on
    positive cells. Returns (loss, draw)."""
    cls_t = np.stack([t[0] for t in targets])
    pos = np.stack([t[1] for t in targets])
    box_t = np.stack([t[2] for t in targets])
    logits = raw[..., :classes]
    n_cls = logits.size
    loss_cls = float(_bce_with_logits(logits, cls_t).sum() / n_cls)
    sig = nn.sigmoid(logits)
    draw = np.zeros_like(raw)
    draw[..., :classes] = (sig - cls_t) / n_cls

    tb = raw[..., classes:]
    off = nn.sigmoid(tb[..., :2])
    n_pos = max(int(pos.sum()), 1)
    d_off = off - box_t[..., :2]
    d_sz = tb[..., 2:] - box_t[..., 2:]
    posf = pos.astype(raw.dtype)[..., None]
    loss_box = float((((d_off ** 2) + (d_sz ** 2)) * posf).sum() / n_pos)
    scale = box_weight / n_pos
    draw[..., classes:classes + 2] = \
        2.0 * d_off * off * (1.0 - off) * posf * scale
    draw[..., classes + 2:] = 2.0 * d_sz * posf * scale
    return loss_cls + box_weight * loss_box, draw


def train_detector(samples, textures, epochs, lr, seed, batch_size=16,
                   channels=(16, 32, 64, 64), classes=3, leaky_slope=0.1,
                   box_weight=1.0, resume=None, log_every=0):
    """Train on stored views re-textured with the named base / naive /
    random body paints (rotating per sample and epoch).

    textures: dict with keys base, naive, random. Returns
    (model, history, state).
    """
    from camotex.optim import AdamState
    from camotex.render import retexture

    if not samples:
        raise ValueError("need at least one training sample")
    if resume is not None:
        model, state, start_epoch = resume
    else:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 4]))
        model = DetectorModel.init(rng, channels, classes, leaky_slope)
        state = AdamState.for_params(model.params(), lr)
        start_epoch = 0
    stride = model.stride
    S = samples[0].x_ref.shape[0] // stride
    rotation = ("base", "naive", "random")
    targets = [cell_targets(s.b_gt, S, stride, classes) for s in samples]
    history = []

    for epoch in range(start_epoch, epochs):
        order = np.random.default_rng(
            np.random.SeedSequence([seed, 4, 1, epoch])).permutation(
                len(samples))
        ep_loss = 0.0
        nb = 0
        for i in range(0, len(order), batch_size):
            idx = order[i:i + batch_size]
            images = np.stack([
                retexture(samples[j],
                          textures[rotation[(epoch + int(j)) % 3]])
                for j in idx])
            raw, cache = model.forward(images, want_cache=True)
            loss, draw = detection_train_loss(
                raw, [targets[j] for j in idx], classes, box_weight)
            if not np.isfinite(loss):
                raise NumericError(f"detector loss non-finite at epoch {epoch}")
            _, grads = model.backward(cache, draw)
            state.update(model.params(), grads)
            ep_loss += loss
            nb += 1
        history.append({"epoch": epoch, "train_loss": ep_loss / max(nb, 1)})
        if log_every and epoch % log_every == 0:
            log.info("detector epoch %d loss %.5f", epoch,
                     history[-1]["train_loss"])
    return model, history, state


# ---------------------------------------------------------------------------
# attack-side gradient

def detector_input_gradient(images, model: DetectorModel, dboxes, dconfs,
                            cache=None, raw=None):
    """Gradient of a loss on decoded boxes/confidences wrt the images.

    images: (B, H, W, 3); dboxes: (B, S, S, 4); dconfs: (B, S, S, C).
    """
    if raw is None or cache is None:
        raw, cache = model.forward(images, want_cache=True)
    draw = decode_backward(raw, model.stride, model.classes, dboxes, dconfs)
    dimg, _ = model.backward(cache, draw, want_param_grads=False)
    return dimg
