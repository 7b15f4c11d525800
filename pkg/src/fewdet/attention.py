"""Global-context attention with saliency fusion at one backbone stage.

The top-down half is a lightweight global-context block: a 1x1 conv scores
every position, a spatial softmax turns the scores into an attention map, the
map pools the features into one context vector, and a bottleneck transform of
that vector is added back residually at every position.

The bottom-up half multiplies the features channel-wise by ln(eps + s), where
s is an externally computed saliency map. Saliency never carries gradients;
with eps = e and zero saliency the gate is exactly ln(e) = 1 and the features
pass through bit-identically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class GcParams:
    """Parameters of the global-context block for a C-channel stage.

    w_k scores positions (1x1 conv C->1); w_v1/w_v2 are the bottleneck down
    + up projections (1x1 convs C->C_b->C); ln_gain/ln_bias parameterize the
    normalization between them. All five participate in differentiation.
    """

    w_k: Tensor      # [1, C, 1, 1]
    w_v1: Tensor     # [C_b, C, 1, 1]
    ln_gain: Tensor  # [C_b]
    ln_bias: Tensor  # [C_b]
    w_v2: Tensor     # [C, C_b, 1, 1]

    def tensors(self) -> dict[str, Tensor]:
        return {"w_k": self.w_k, "w_v1": self.w_v1, "ln_gain": self.ln_gain,
                "ln_bias": self.ln_bias, "w_v2": self.w_v2}


@dataclass
class FusionConfig:
    epsilon: float = math.e


def bottleneck_width(channels: int, ratio: int = 4) -> int:
    return max(1, channels // ratio)


def init_gc_params(rng: np.random.Generator, channels: int,
                   bottleneck_ratio: int = 4) -> GcParams:
    """Fresh block parameters; w_v2 starts at zero so the block is an identity."""
    cb = bottleneck_width(channels, bottleneck_ratio)
    w_k = rng.standard_normal((1, channels, 1, 1)) / math.sqrt(channels)
    w_v1 = rng.standard_normal((cb, channels, 1, 1)) * math.sqrt(2.0 / channels)
    return GcParams(
        w_k=Tensor(w_k, requires_grad=True),
        w_v1=Tensor(w_v1, requires_grad=True),
        ln_gain=Tensor(np.ones(cb), requires_grad=True),
        ln_bias=Tensor(np.zeros(cb), requires_grad=True),
        w_v2=Tensor(np.zeros((channels, cb, 1, 1)), requires_grad=True),
    )


def topdown_map(features: Tensor, w_k: Tensor) -> Tensor:
    """Soft attention map over positions: spatial softmax of 1x1-conv scores."""
    if features.data.ndim != 3:
        raise T.ShapeError(f"expected [C,H,W] features, got {features.shape}")
    _, h, w = features.shape
    logits = T.conv2d(features, w_k)
    return T.softmax_spatial(T.reshape(logits, (h, w)))


def global_context(features: Tensor, h: Tensor) -> Tensor:
    """Attention-weighted spatial pooling: y'[c] = sum_ij y[c,i,j] * h[i,j]."""
    if features.data.shape[1:] != h.data.shape:
        raise T.ShapeError(
            f"feature map {features.shape} does not match attention map {h.shape}")
    return T.sum_axes(T.mul(features, h), (1, 2))


def gc_block(features: Tensor, params: GcParams, eps_ln: float = 1e-5) -> Tensor:
    """Residual global-context transform: z = y + W_v2 ReLU(LN(W_v1 y')).

    The bottleneck output is a single C-vector broadcast to every position,
    so with w_v2 = 0 the block returns the features unchanged.
    """
    c = features.data.shape[0]
    cb = params.w_v1.data.shape[0]
    h = topdown_map(features, params.w_k)
    y = global_context(features, h)
    t = T.reshape(T.matmul(T.reshape(params.w_v1, (cb, c)), T.reshape(y, (c, 1))), (cb,))
    t = T.relu(T.layer_norm(t, params.ln_gain, params.ln_bias, eps_ln=eps_ln))
    u = T.matmul(T.reshape(params.w_v2, (c, cb)), T.reshape(t, (cb, 1)))
    return T.add(features, T.reshape(u, (c, 1, 1)))


def pool_saliency(saliency: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Average-pool a saliency map to out_h x out_w, then re-min-max-normalize.

    Pooling requires integer downscale factors. A constant pooled map
    normalizes to all zeros.
    """
    s = np.asarray(saliency, dtype=np.float64)
    if s.ndim != 2:
        raise T.ShapeError(f"saliency must be 2-d, got shape {s.shape}")
    hs, ws = s.shape
    if (hs, ws) != (out_h, out_w):
        if hs % out_h or ws % out_w:
            raise T.ShapeError(
                f"cannot pool {hs}x{ws} saliency to {out_h}x{out_w}: "
                "non-integer factor")
        fh, fw = hs // out_h, ws // out_w
        s = s.reshape(out_h, fh, out_w, fw).mean(axis=(1, 3))
    lo, hi = s.min(), s.max()
    if hi > lo:
        return (s - lo) / (hi - lo)
    return np.zeros_like(s)


def fuse_bottom_up(z: Tensor, saliency: np.ndarray, epsilon: float = math.e) -> Tensor:
    """Gate features by saliency: z'[c,i,j] = z[c,i,j] * ln(eps + s[i,j]).

    The saliency map is pooled to the feature resolution and renormalized to
    [0,1] first. It enters as a constant: gradients flow into z only.
    """
    if epsilon <= 0.0:
        raise ValueError("epsilon must be positive")
    _, h, w = z.data.shape
    s = pool_saliency(saliency, h, w)
    gate = np.log(epsilon + s)
    return T.mul(z, Tensor(gate))


def upsample_nearest(map2d: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor upscale of a 2-d map for rendering."""
    h, w = map2d.shape
    if out_h % h or out_w % w:
        raise T.ShapeError(f"cannot upsample {h}x{w} to {out_h}x{out_w}")
    return np.repeat(np.repeat(map2d, out_h // h, axis=0), out_w // w, axis=1)
