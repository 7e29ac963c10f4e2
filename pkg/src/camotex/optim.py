"""Constrained texture optimization.

The raw texture gradient is clamped so a plain descent step stays in
[0,1] (or to the looser bounds printed in the source method, kept for
comparison), then fed through adaptive-moment updates with a value
clamp as the final safety net.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from camotex import io, losses
from camotex.config import LossConfig, RunConfig
from camotex.detector import DetectorModel, decode, decode_backward
from camotex.errors import NumericError
from camotex.render import (EnhancerModel, TextureMap, enhance,
                            enhance_backward, render_raw)

log = logging.getLogger(__name__)

TAG_OPTIMIZE = 5


class AdamState:
    """Adaptive-moment accumulators for a dict of parameter arrays.

    update() mutates the parameter arrays in place.
    """

    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    @classmethod
    def for_params(cls, params, lr, **kw):
        state = cls(lr, **kw)
        for k, p in params.items():
            state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        return state

    def update(self, params, grads):
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for k, p in params.items():
            g = grads[k]
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)

    def tensors(self, prefix=""):
        out = {}
        for k in self.m:
            out[f"{prefix}m_{k}"] = self.m[k]
            out[f"{prefix}v_{k}"] = self.v[k]
        return out


@dataclass
class OptimizerState:
    """Moment accumulators and step counter for the texture itself."""

    m: np.ndarray
    v: np.ndarray
    lr: float
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, shape, lr, dtype=np.float32):
        return cls(np.zeros(shape, dtype), np.zeros(shape, dtype), float(lr))


def init_texture(strategy, dims, seed=0, base=None) -> TextureMap:
    """zeros | ones | random | base starting texture."""
    h, w = dims
    if strategy == "zeros":
        vals = np.zeros((h, w, 3), np.float32)
    elif strategy == "ones":
        vals = np.ones((h, w, 3), np.float32)
    elif strategy == "random":
        rng = np.random.default_rng(np.random.SeedSequence(
            [seed, TAG_OPTIMIZE, 0]))
        vals = rng.uniform(0.0, 1.0, (h, w, 3)).astype(np.float32)
    elif strategy == "base":
        if base is None:
            raise ValueError("base strategy needs a base texture")
        bvals = base.values if isinstance(base, TextureMap) else base
        if bvals.shape[:2] != (h, w):
            raise ValueError("base texture dimensions disagree")
        vals = bvals.astype(np.float32).copy()
    else:
        raise ValueError(f"unknown init strategy {strategy!r}")
    return TextureMap(vals, role="adversarial")


def grad_clamp(grad, texture, eta, mode="feasible"):
    """Project the gradient so the descent step respects the box.

    feasible: clamp to [(T-1)/eta, T/eta], making T - eta*g land in
    [0,1]; the bound is then nudged by ulps until the guarantee holds in
    float arithmetic exactly. paper-verbatim: clamp to [-T, 1-T] as
    printed in the source method (does not guarantee feasibility alone).
    """
    t = np.asarray(texture)
    g = np.asarray(grad)
    eta = float(eta)  # weak scalar: arithmetic stays in the texture dtype
    if mode == "paper-verbatim":
        return np.clip(g, -t, 1.0 - t)
    if mode != "feasible":
        raise ValueError(f"unknown clamp mode {mode!r}")
    out = np.clip(g, (t - 1.0) / eta, t / eta)
    # float roundoff in (t-1)/eta can leave t - eta*out a hair outside
    for _ in range(100):
        upd = t - eta * out
        over = upd > 1.0
        under = upd < 0.0
        if not (over.any() or under.any()):
            break
        out = np.where(over, np.nextafter(out, np.inf), out)
        out = np.where(under, np.nextafter(out, -np.inf), out)
    return out


def step(texture, grad, state: OptimizerState, clamp_mode="feasible"):
    """One constrained update; returns the new texture array.

    The clamp acts on the raw gradient before the moment update; the
    value clamp afterwards is the safety net for both modes.
    """
    if not np.all(np.isfinite(grad)):
        bad = int(np.count_nonzero(~np.isfinite(grad)))
        raise NumericError(
            f"non-finite texture gradient ({bad} entries) at step {state.t}")
    g = grad_clamp(grad, texture, state.lr, clamp_mode)
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    mhat = state.m / (1.0 - state.beta1 ** state.t)
    vhat = state.v / (1.0 - state.beta2 ** state.t)
    upd = texture - state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return np.clip(upd, 0.0, 1.0).astype(texture.dtype, copy=False)


# ---------------------------------------------------------------------------
# the optimization loop

def _batch_attack_grads(boxes, confs, gts, loss_cfg: LossConfig, conf_floor,
                        use_iou):
    """Per-batch attack losses and gradients on decoded outputs.

    boxes: (B, S, S, 4); confs: (B, S, S, C); gts: per-image truth boxes.
    Returns (cls value, iou value, dboxes, dconfs) with the values and
    gradients averaged over the batch.
    """
    B, S = boxes.shape[0], boxes.shape[1]
    C = confs.shape[-1]
    dboxes = np.zeros_like(boxes)
    dconfs = np.zeros_like(confs)
    cls_total = 0.0
    iou_total = 0.0
    for b in range(B):
        bx = boxes[b].reshape(-1, 4)
        cf = confs[b].reshape(-1, C)
        keep = np.nonzero(cf.max(axis=1) >= conf_floor)[0]
        if keep.size == 0:
            continue
        cval, dcf, _ = losses.cls_loss(cf[keep], bx[keep], gts[b],
                                       loss_cfg.tau_iop)
        cls_total += cval
        dc = np.zeros_like(cf)
        dc[keep] = dcf
        dconfs[b] = dc.reshape(S, S, C)
        if use_iou:
            ival, dbx, _ = losses.iou_loss(bx[keep], gts[b], loss_cfg.tau_iou)
            iou_total += ival
            db = np.zeros_like(bx)
            db[keep] = dbx
            dboxes[b] = db.reshape(S, S, 4)
    dconfs /= B
    dboxes *= loss_cfg.beta / B
    return cls_total / B, iou_total / B, dboxes, dconfs


def optimize_texture(samples, detector_model: DetectorModel,
                     enhancer_model: EnhancerModel, run_cfg: RunConfig,
                     loss_cfg: LossConfig, seed, out_dir=None):
    """Attack loop: render, enhance, composite, detect, descend.

    samples: the training views. Writes a CSV log and periodic texture
    snapshots when out_dir is given. Returns (TextureMap, history).
    """
    run_cfg.validate()
    loss_cfg.validate()
    if not samples:
        raise ValueError("need at least one sample to optimize against")
    tex_shape = samples[0].render_map.texture_shape
    base = None
    if run_cfg.init_strategy == "base":
        from camotex.scene import base_texture
        base = base_texture(tex_shape[0])
    texture = init_texture(run_cfg.init_strategy, tex_shape, seed, base)
    T = texture.values
    state = OptimizerState.fresh(T.shape, run_cfg.learning_rate)
    stride = detector_model.stride
    history: List[dict] = []
    csv_lines = ["step,cls_loss,iou_loss,attack_loss,smooth_loss,"
                 "total_loss,texture_min,texture_max"]
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    gamma = loss_cfg.gamma if run_cfg.use_smooth_loss else 0.0
    step_idx = 0
    masks = [s.mask for s in samples]
    gts = [s.b_gt for s in samples]

    def snapshot(tag):
        if out_dir is None:
            return
        io.write_tnsr(out_dir / f"texture_{tag}.tnsr", T)
        io.write_ppm(out_dir / f"texture_{tag}.ppm", T)

    def flush_csv():
        if out_dir is not None:
            (out_dir / "loss_log.csv").write_text("\n".join(csv_lines) + "\n",
                                                  encoding="utf-8")

    try:
        done = False
        for epoch in range(run_cfg.epochs):
            order = np.random.default_rng(np.random.SeedSequence(
                [seed, TAG_OPTIMIZE, 1, epoch])).permutation(len(samples))
            for bstart in range(0, len(order), run_cfg.batch_size):
                idx = [int(j) for j in order[bstart:bstart + run_cfg.batch_size]]
                batch = [samples[j] for j in idx]
                x_raw = np.stack([render_raw(s.render_map, T) for s in batch])
                x_gray = np.stack([s.x_gray for s in batch])
                x_d = np.stack([s.x_d for s in batch])
                m = np.stack([masks[j] for j in idx])[..., None]
                x_ref = np.stack([s.x_ref for s in batch])
                x_enh, ecache = enhance(x_raw, x_gray, x_d, enhancer_model,
                                        want_cache=True)
                x_adv = x_enh * m + x_ref * (1.0 - m)
                raw, dcache = detector_model.forward(x_adv, want_cache=True)
                boxes, confs = decode(raw, stride, detector_model.classes)
                cls_v, iou_v, dboxes, dconfs = _batch_attack_grads(
                    boxes, confs, [gts[j] for j in idx], loss_cfg,
                    run_cfg.conf_floor, run_cfg.use_iou_loss)

                draw = decode_backward(raw, stride, detector_model.classes,
                                       dboxes, dconfs)
                d_adv, _ = detector_model.backward(dcache, draw,
                                                   want_param_grads=False)
                d_raw, _ = enhance_backward(ecache, enhancer_model, d_adv * m)
                d_T = np.zeros_like(T)
                for bi, s in enumerate(batch):  # fixed order: deterministic
                    d_T += s.render_map.transpose_apply(d_raw[bi])

                smooth_v, d_smooth = losses.smooth_loss(
                    T, loss_cfg.kernel_size, loss_cfg.eps_sqrt)
                if gamma:
                    d_T = d_T + gamma * d_smooth
                atk_v = losses.attack_loss(cls_v, iou_v, loss_cfg.beta
                                           if run_cfg.use_iou_loss else 0.0)
                total_v = losses.total_loss(atk_v, smooth_v, gamma)

                T = step(T, d_T, state, run_cfg.clamp_mode)
                history.append({
                    "step": step_idx, "cls_loss": cls_v, "iou_loss": iou_v,
                    "attack_loss": atk_v, "smooth_loss": smooth_v,
                    "total_loss": total_v, "texture_min": float(T.min()),
                    "texture_max": float(T.max())})
                csv_lines.append(
                    f"{step_idx},{cls_v:.8f},{iou_v:.8f},{atk_v:.8f},"
                    f"{smooth_v:.8f},{total_v:.8f},{T.min():.8f},"
                    f"{T.max():.8f}")
                step_idx += 1
                if step_idx % run_cfg.snapshot_every == 0:
                    snapshot(f"step{step_idx:05d}")
                if run_cfg.max_steps is not None and \
                        step_idx >= run_cfg.max_steps:
                    done = True
                    break
            if done:
                break
    except NumericError:
        snapshot("abort")
        flush_csv()
        raise
    snapshot("final")
    flush_csv()
    log.info("optimize: %d steps, final total loss %.5f", step_idx,
             history[-1]["total_loss"] if history else float("nan"))
    return TextureMap(T, role="adversarial"), history
