"""Differentiable texture-to-image path.

Three stages: a sparse linear map from texels to body pixels (built by
the rasterizer, applied here), a small convolutional enhancer that adds
the shading the sparse map cannot carry, and mask compositing into the
reference scene. Every stage has a hand-derived backward pass.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from camotex import nn
from camotex.errors import NumericError

log = logging.getLogger(__name__)

GRAY = np.float32(127.0 / 255.0)


@dataclass
class TextureMap:
    """A texture grid in [0,1]^3 with a role tag."""

    values: np.ndarray  # (Ht, Wt, 3) float32
    role: str = "adversarial"  # base | naive | random | adversarial

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 3 or v.shape[2] != 3:
            raise ValueError("texture must be (H, W, 3)")
        if v.min() < 0.0 or v.max() > 1.0:
            raise ValueError("texture values must lie in [0, 1]")
        self.values = v


class RenderMap:
    """Sparse texel-to-pixel operator for one view.

    Per image pixel: a run of (texel index, weight) taps; background and
    auxiliary pixels have zero taps. Taps of one pixel sum to 1.
    """

    def __init__(self, counts, texel_indices, weights, image_shape,
                 texture_shape):
        self.counts = np.asarray(counts, dtype=np.int64)
        self.texel_indices = np.asarray(texel_indices, dtype=np.int64)
        self.weights = np.asarray(weights, dtype=np.float32)
        self.image_shape = tuple(image_shape)
        self.texture_shape = tuple(texture_shape)
        npix = self.image_shape[0] * self.image_shape[1]
        if self.counts.shape != (npix,):
            raise ValueError("tap counts must cover every image pixel")
        if self.counts.sum() != self.texel_indices.shape[0]:
            raise ValueError("tap counts disagree with tap array length")
        ntex = self.texture_shape[0] * self.texture_shape[1]
        if self.texel_indices.size and (self.texel_indices.min() < 0 or
                                        self.texel_indices.max() >= ntex):
            raise IndexError("texel index out of range")
        # tap -> owning pixel, fixed once; drives both apply directions
        self.pixel_of_tap = np.repeat(
            np.arange(npix, dtype=np.int64), self.counts)

    @classmethod
    def from_uv(cls, uv, body_mask, texture_shape):
        """Build bilinear 4-tap records from per-pixel UV coordinates.

        uv: (H, W, 2) with u, v in [0, 1]; body_mask: (H, W) bool.
        Texel centers sit on an (Ht-1, Wt-1) lattice so UV 0 and 1 hit
        the border texels exactly.
        """
        H, W = body_mask.shape
        Ht, Wt = texture_shape
        npix = H * W
        flat_mask = body_mask.reshape(-1)
        idx_pix = np.nonzero(flat_mask)[0]
        counts = np.zeros(npix, dtype=np.int64)
        if idx_pix.size == 0:
            return cls(counts, np.zeros(0, np.int64), np.zeros(0, np.float32),
                       (H, W), texture_shape)
        uvb = uv.reshape(-1, 2)[idx_pix].astype(np.float64)
        tx = np.clip(uvb[:, 0], 0.0, 1.0) * (Wt - 1)
        ty = np.clip(uvb[:, 1], 0.0, 1.0) * (Ht - 1)
        x0 = np.clip(np.floor(tx).astype(np.int64), 0, max(Wt - 2, 0))
        y0 = np.clip(np.floor(ty).astype(np.int64), 0, max(Ht - 2, 0))
        fx = tx - x0
        fy = ty - y0
        x1 = np.minimum(x0 + 1, Wt - 1)
        y1 = np.minimum(y0 + 1, Ht - 1)
        idx = np.stack([y0 * Wt + x0, y0 * Wt + x1,
                        y1 * Wt + x0, y1 * Wt + x1], axis=1)
        wts = np.stack([(1 - fy) * (1 - fx), (1 - fy) * fx,
                        fy * (1 - fx), fy * fx], axis=1)
        counts[idx_pix] = 4
        return cls(counts, idx.reshape(-1), wts.reshape(-1).astype(np.float32),
                   (H, W), texture_shape)

    @property
    def body_mask(self):
        H, W = self.image_shape
        return (self.counts > 0).reshape(H, W)

    def apply(self, texture):
        """X_raw = operator @ texture; zero off the body."""
        H, W = self.image_shape
        t = np.asarray(texture)
        tf = t.reshape(-1, t.shape[-1])
        contrib = self.weights[:, None].astype(t.dtype) * tf[self.texel_indices]
        npix = H * W
        out = np.empty((npix, t.shape[-1]), dtype=t.dtype)
        for c in range(t.shape[-1]):
            out[:, c] = np.bincount(self.pixel_of_tap, weights=contrib[:, c],
                                    minlength=npix)
        return out.reshape(H, W, t.shape[-1]).astype(t.dtype, copy=False)

    def transpose_apply(self, grad_image):
        """Operator transpose: pixel-space gradient to texel-space."""
        g = np.asarray(grad_image)
        C = g.shape[-1]
        gf = g.reshape(-1, C)
        taps = self.weights.astype(g.dtype)[:, None] * gf[self.pixel_of_tap]
        ntex = self.texture_shape[0] * self.texture_shape[1]
        out = np.empty((ntex, C), dtype=g.dtype)
        for c in range(C):
            out[:, c] = np.bincount(self.texel_indices, weights=taps[:, c],
                                    minlength=ntex)
        return out.reshape(self.texture_shape[0], self.texture_shape[1], C)


def render_raw(render_map: RenderMap, texture) -> np.ndarray:
    t = texture.values if isinstance(texture, TextureMap) else texture
    return render_map.apply(t)


# ---------------------------------------------------------------------------
# enhancer

@dataclass
class EnhancerModel:
    """Two conv layers mapping (X_raw, X_gray, X_d) to per-pixel gain and
    offset; X_enh = gain * X_raw + offset. Gain goes through softplus so
    it stays positive."""

    w1: np.ndarray  # (3, 3, 7, hidden)
    b1: np.ndarray
    w2: np.ndarray  # (3, 3, hidden, 6)
    b2: np.ndarray
    leaky_slope: float = 0.1

    # softplus(x) = 1 at this bias, so a fresh model starts near gain 1
    GAIN_ONE_BIAS = float(np.log(np.e - 1.0))

    @classmethod
    def init(cls, hidden, rng, leaky_slope=0.1):
        w1 = nn.he_init(rng, 3, 3, 7, hidden)
        w2 = nn.he_init(rng, 3, 3, hidden, 6)
        b2 = np.zeros(6, np.float32)
        b2[:3] = cls.GAIN_ONE_BIAS
        return cls(w1, np.zeros(hidden, np.float32), w2, b2, leaky_slope)

    @classmethod
    def identity(cls, hidden=4, leaky_slope=0.1):
        """Exact gain 1, offset 0 regardless of input."""
        b2 = np.zeros(6, np.float32)
        b2[:3] = cls.GAIN_ONE_BIAS
        return cls(np.zeros((3, 3, 7, hidden), np.float32),
                   np.zeros(hidden, np.float32),
                   np.zeros((3, 3, hidden, 6), np.float32), b2, leaky_slope)

    def params(self) -> Dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def param_count(self) -> int:
        return sum(int(p.size) for p in self.params().values())

    def forward(self, stack):
        """stack: (B, H, W, 7). Returns (gain, offset, cache)."""
        z1 = nn.conv2d(stack, self.w1, self.b1)
        a1 = nn.leaky_relu(z1, self.leaky_slope)
        z2 = nn.conv2d(a1, self.w2, self.b2)
        graw = z2[..., :3]
        gain = nn.softplus(graw)
        offset = z2[..., 3:]
        cache = {"stack": stack, "z1": z1, "a1": a1, "graw": graw,
                 "gain": gain}
        return gain, offset, cache

    def backward(self, cache, dgain, doffset):
        """Gradients wrt params and the input stack."""
        dgraw = nn.softplus_backward(cache["graw"], dgain)
        dz2 = np.concatenate([dgraw, doffset], axis=-1)
        da1, dw2, db2 = nn.conv2d_backward(cache["a1"], self.w2, dz2)
        dz1 = nn.leaky_relu_backward(cache["z1"], da1, self.leaky_slope)
        dstack, dw1, db1 = nn.conv2d_backward(cache["stack"], self.w1, dz1)
        grads = {"w1": dw1, "b1": db1, "w2": dw2, "b2": db2}
        return dstack, grads


def normalize_depth(x_d):
    """Per-image depth scaled to [0,1]; background stays 0."""
    x = np.asarray(x_d)
    axes = tuple(range(x.ndim - 2, x.ndim))
    peak = x.max(axis=axes, keepdims=True)
    return np.where(peak > 0, x / np.maximum(peak, 1e-12), 0.0).astype(x.dtype)


def enhancer_stack(x_raw, x_gray, x_d):
    """Input tensor for the enhancer: raw render, gray render, depth."""
    if x_raw.shape != x_gray.shape or x_raw.shape[:-1] != x_d.shape:
        raise ValueError("enhancer inputs must share spatial dimensions")
    dn = normalize_depth(x_d)
    return np.concatenate([x_raw, x_gray, dn[..., None]],
                          axis=-1).astype(x_raw.dtype)


def enhance(x_raw, x_gray, x_d, model: EnhancerModel, want_cache=False):
    """X_enh = gain (.) X_raw + offset, batched or single image."""
    single = x_raw.ndim == 3
    stack = enhancer_stack(x_raw, x_gray, x_d)
    if single:
        stack = stack[None]
    gain, offset, cache = model.forward(stack)
    xr = stack[..., :3]
    x_enh = gain * xr + offset
    if single:
        x_enh = x_enh[0]
    if not want_cache:
        return x_enh
    cache["x_raw"] = xr
    cache["single"] = single
    return x_enh, cache


def enhance_backward(cache, model: EnhancerModel, d_enh):
    """Backprop through enhance; returns (d_x_raw, param grads).

    X_raw feeds both the gain path (through the convs) and the product,
    so its gradient has two terms.
    """
    if cache.get("single"):
        d_enh = d_enh[None]
    dgain = d_enh * cache["x_raw"]
    doffset = d_enh
    dstack, grads = model.backward(cache, dgain, doffset)
    d_x_raw = dstack[..., :3] + cache["gain"] * d_enh
    if cache.get("single"):
        d_x_raw = d_x_raw[0]
    return d_x_raw, grads


# ---------------------------------------------------------------------------
# compositing and render loss

def composite(x_enh, x_ref, mask):
    """X_adv = X_enh on mask pixels, X_ref elsewhere."""
    if x_enh.shape != x_ref.shape:
        raise ValueError("image shapes differ")
    m = np.asarray(mask)
    vals = np.unique(m)
    if not np.all(np.isin(vals, (0, 1))):
        raise ValueError("mask must be binary")
    m = m.astype(x_enh.dtype)[..., None]
    return x_enh * m + x_ref * (1.0 - m)


def render_loss(x_adv, x_ref):
    """Mean absolute difference and its gradient wrt x_adv."""
    if x_adv.shape != x_ref.shape:
        raise ValueError("image shapes differ")
    diff = x_adv - x_ref
    value = float(np.abs(diff).mean())
    grad = np.sign(diff) / diff.size
    return value, grad.astype(x_adv.dtype, copy=False)


def shading_from_gray(x_gray, body_mask):
    """Recover the per-pixel shading factor from the gray render."""
    s = np.zeros(x_gray.shape[:-1], dtype=x_gray.dtype)
    s[body_mask] = x_gray[..., 0][body_mask] / GRAY
    return s


def retexture(sample, texture):
    """Re-render a stored view with a different body texture.

    Exact: the reference image was produced as shading * (render map
    applied to the original texture), so swapping the texture through
    the same operator reproduces the rasterizer bit for bit.
    """
    t = texture.values if isinstance(texture, TextureMap) else texture
    body = sample.render_map.body_mask
    albedo = sample.render_map.apply(t)
    s = shading_from_gray(sample.x_gray, body)
    out = sample.x_ref.copy()
    out[body] = (s[..., None] * albedo)[body]
    return out


def oracle_enhanced(x_raw, x_gray):
    """Analytic target for the enhancer on body pixels: reapply the
    shading that the gray render encodes."""
    return x_raw * (x_gray / GRAY)


# ---------------------------------------------------------------------------
# training

def train_enhancer(samples, textures, epochs, lr, seed, batch_size=8,
                   leaky_slope=0.1, hidden=16, holdout_fraction=0.1,
                   resume=None, log_every=0):
    """Fit the enhancer so composites of its output match references.

    samples: scene views; textures: texture pool indexed by each
    sample's texture id. Per-epoch shuffles derive from (seed, epoch),
    so resume=(model, adam state, start epoch) continues a run exactly.
    Returns (model, history, state).
    """
    from camotex.optim import AdamState  # local: optim imports this module

    if not samples:
        raise ValueError("need at least one training sample")
    if resume is not None:
        model, state, start_epoch = resume
    else:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
        model = EnhancerModel.init(hidden, rng, leaky_slope)
        state = None
        start_epoch = 0
    n_hold = max(1, int(round(len(samples) * holdout_fraction))) \
        if len(samples) > 1 else 0
    hold = samples[len(samples) - n_hold:]
    train = samples[:len(samples) - n_hold] or samples
    if state is None:
        state = AdamState.for_params(model.params(), lr)
    history = []

    def batch_arrays(batch):
        xr = np.stack([render_raw(s.render_map, textures[s.texture_index])
                       for s in batch])
        xg = np.stack([s.x_gray for s in batch])
        xd = np.stack([s.x_d for s in batch])
        ref = np.stack([s.x_ref for s in batch])
        m = np.stack([s.mask for s in batch])
        return xr, xg, xd, ref, m

    def holdout_l1():
        if not hold:
            return float("nan")
        tot = 0.0
        for i in range(0, len(hold), batch_size):
            xr, xg, xd, ref, m = batch_arrays(hold[i:i + batch_size])
            x_enh = enhance(xr, xg, xd, model)
            x_adv = x_enh * m[..., None] + ref * (1.0 - m[..., None])
            tot += float(np.abs(x_adv - ref).sum()) / ref[0].size
        return tot / len(hold)

    for epoch in range(start_epoch, epochs):
        order = np.random.default_rng(
            np.random.SeedSequence([seed, 3, 1, epoch])).permutation(len(train))
        ep_loss = 0.0
        nb = 0
        for i in range(0, len(train), batch_size):
            batch = [train[j] for j in order[i:i + batch_size]]
            xr, xg, xd, ref, m = batch_arrays(batch)
            x_enh, cache = enhance(xr, xg, xd, model, want_cache=True)
            mc = m[..., None]
            x_adv = x_enh * mc + ref * (1.0 - mc)
            value, d_adv = render_loss(x_adv, ref)
            if not np.isfinite(value):
                raise NumericError(f"enhancer loss non-finite at epoch {epoch}")
            _, grads = enhance_backward(cache, model, d_adv * mc)
            state.update(model.params(), grads)
            ep_loss += value
            nb += 1
        row = {"epoch": epoch, "train_loss": ep_loss / max(nb, 1),
               "holdout_l1": holdout_l1()}
        history.append(row)
        if log_every and epoch % log_every == 0:
            log.info("enhancer epoch %d train %.4f holdout %.4f",
                     epoch, row["train_loss"], row["holdout_l1"])
    return model, history, state
