"""Masked attention math: pixel-level masked cross-attention and masked
self-attention over a concatenated latent+instance-token sequence.

Two masking modes exist. ``post_softmax`` multiplies softmaxed weights by the
mask (rows may sum to less than 1). ``pre_softmax_renorm`` excludes masked
keys before the softmax, so allowed weights renormalize and outputs at a
query are exactly independent of every masked key.

Forward functions take single items shaped (h, w, c); the leading dims of
the underlying matmuls broadcast, which batched callers exploit.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import torch
from torch import Tensor


class MaskMode(str, enum.Enum):
    POST_SOFTMAX = "post_softmax"
    PRE_SOFTMAX_RENORM = "pre_softmax_renorm"


@dataclass
class ProjectionParams:
    """Learnable projections: w_q/w_k/w_v are (c_in, d), w_o is (d, c_out)."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    b_q: Tensor | None = None
    b_k: Tensor | None = None
    b_v: Tensor | None = None
    b_o: Tensor | None = None

    def __post_init__(self):
        if self.w_q.shape != self.w_k.shape or self.w_q.shape[0] != self.w_v.shape[0]:
            raise ValueError("projection shapes are inconsistent")
        if self.w_v.shape[1] != self.w_o.shape[0]:
            raise ValueError("w_o input dim must match w_v output dim")
        if self.w_q.shape[1] == 0:
            raise ValueError("projection dim d must be positive")
        for t in (self.w_q, self.w_k, self.w_v, self.w_o):
            if not torch.isfinite(t).all():
                raise ValueError("projection entries must be finite")

    @property
    def d(self) -> int:
        return self.w_q.shape[1]

    @staticmethod
    def identity(c: int, dtype=torch.float64) -> "ProjectionParams":
        eye = torch.eye(c, dtype=dtype)
        return ProjectionParams(eye.clone(), eye.clone(), eye.clone(), eye.clone())

    @staticmethod
    def random(c_in: int, d: int, c_out: int | None = None, *, generator=None,
               dtype=torch.float64, scale: float | None = None) -> "ProjectionParams":
        c_out = c_in if c_out is None else c_out
        scale = 1.0 / math.sqrt(c_in) if scale is None else scale
        def mk(r, co):
            return torch.randn(r, co, generator=generator, dtype=dtype) * scale
        return ProjectionParams(mk(c_in, d), mk(c_in, d), mk(c_in, d), mk(d, c_out))

    def tensors(self) -> dict[str, Tensor]:
        out = {"w_q": self.w_q, "w_k": self.w_k, "w_v": self.w_v, "w_o": self.w_o}
        for name in ("b_q", "b_k", "b_v", "b_o"):
            t = getattr(self, name)
            if t is not None:
                out[name] = t
        return out


@dataclass
class AttentionTape:
    """Forward intermediates cached for the analytic backward pass."""

    x: Tensor                 # query/key source rows (L_x, c)
    y: Tensor                 # value source rows (L_y, c)
    q: Tensor
    k: Tensor
    v: Tensor
    weights: Tensor           # row softmax before masking (post mode) or masked softmax
    masked_weights: Tensor    # weights actually applied to V
    mask: Tensor
    params: ProjectionParams
    mode: MaskMode
    shared_xy: bool           # self-attention: x and y are the same sequence
    out_rows: int             # rows kept in the output (l_x for self-attention)


@dataclass
class AttentionGrads:
    d_x: Tensor
    d_y: Tensor
    d_w_q: Tensor
    d_w_k: Tensor
    d_w_v: Tensor
    d_w_o: Tensor
    d_b_q: Tensor | None = None
    d_b_k: Tensor | None = None
    d_b_v: Tensor | None = None
    d_b_o: Tensor | None = None


def _as_mask_tensor(mask, like: Tensor) -> Tensor:
    m = torch.as_tensor(mask, dtype=like.dtype, device=like.device)
    return m


def masked_softmax(scores: Tensor, mask, mode: MaskMode = MaskMode.POST_SOFTMAX) -> Tensor:
    """Row softmax gated by a boolean mask.

    post_softmax: softmax then element-wise mask; a fully masked row is zero.
    pre_softmax_renorm: masked keys are excluded from the softmax support;
    a fully masked row is defined as zero.
    """
    if not torch.isfinite(scores).all():
        raise ValueError("attention scores must be finite")
    m = _as_mask_tensor(mask, scores)
    if m.shape[-2:] != scores.shape[-2:]:
        raise ValueError(f"mask shape {tuple(m.shape)} does not match scores {tuple(scores.shape)}")
    mode = MaskMode(mode)
    if mode is MaskMode.POST_SOFTMAX:
        return torch.softmax(scores, dim=-1) * m
    # Large finite negative keeps fully masked rows NaN-free; the final
    # multiply pins masked entries to exact zero.
    neg = torch.finfo(scores.dtype).min
    filled = scores.masked_fill(m == 0, neg)
    return torch.softmax(filled, dim=-1) * m


def _project(x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    out = x @ w
    return out if b is None else out + b


def _attend(x: Tensor, y: Tensor, mask, params: ProjectionParams, mode: MaskMode):
    """Shared core: rows of x give Q and K, rows of y give V."""
    q = _project(x, params.w_q, params.b_q)
    k = _project(x, params.w_k, params.b_k)
    v = _project(y, params.w_v, params.b_v)
    scores = q @ k.transpose(-2, -1) / math.sqrt(params.d)
    if not torch.isfinite(scores).all():
        raise ValueError("attention scores must be finite")
    m = _as_mask_tensor(mask, scores)
    if m.shape[-2:] != scores.shape[-2:]:
        raise ValueError(f"mask shape {tuple(m.shape)} does not match scores {tuple(scores.shape)}")
    mode = MaskMode(mode)
    if mode is MaskMode.POST_SOFTMAX:
        weights = torch.softmax(scores, dim=-1)
        masked = weights * m
    else:
        neg = torch.finfo(scores.dtype).min
        weights = torch.softmax(scores.masked_fill(m == 0, neg), dim=-1) * m
        masked = weights
    out = _project(masked @ v, params.w_o, params.b_o)
    return out, q, k, v, weights, masked, m


def attend_rows(x_rows: Tensor, y_rows: Tensor, mask, params: ProjectionParams,
                mode: MaskMode = MaskMode.POST_SOFTMAX) -> Tensor:
    """Row-sequence form of the shared core; leading batch dims broadcast.

    x_rows supply queries and keys, y_rows supply values; shapes
    (..., L_x, c) and (..., L_x, c) with mask (..., L_x, L_x).
    """
    out, *_ = _attend(x_rows, y_rows, mask, params, MaskMode(mode))
    return out


def masked_cross_attention(f_x: Tensor, f_y: Tensor, mask, params: ProjectionParams,
                           mode: MaskMode = MaskMode.POST_SOFTMAX) -> Tensor:
    """Pixel-level masked cross-attention.

    Queries and keys come from the latent grid f_x, values from the
    conditional grid f_y; the (h*w, h*w) mask gates which key pixels each
    query pixel may read. Returns a grid shaped like f_x.
    """
    out, _ = cross_attention_with_tape(f_x, f_y, mask, params, mode)
    return out


def cross_attention_with_tape(f_x: Tensor, f_y: Tensor, mask, params: ProjectionParams,
                              mode: MaskMode = MaskMode.POST_SOFTMAX):
    if f_x.shape != f_y.shape:
        raise ValueError(f"f_x {tuple(f_x.shape)} and f_y {tuple(f_y.shape)} must match")
    h, w, c = f_x.shape
    x = f_x.reshape(h * w, c)
    y = f_y.reshape(h * w, c)
    out, q, k, v, weights, masked, m = _attend(x, y, mask, params, MaskMode(mode))
    tape = AttentionTape(x=x, y=y, q=q, k=k, v=v, weights=weights, masked_weights=masked,
                         mask=m, params=params, mode=MaskMode(mode), shared_xy=False,
                         out_rows=h * w)
    return out.reshape(h, w, params.w_o.shape[1]), tape


def masked_self_attention(latent: Tensor, gamma: Tensor, mask, params: ProjectionParams,
                          mode: MaskMode = MaskMode.POST_SOFTMAX) -> Tensor:
    """Masked self-attention over concat(flatten(latent), instance tokens).

    Only the first h*w output rows (the latent part) are kept and reshaped
    back to a grid; instance-token rows never reach the output.
    """
    out, _ = self_attention_with_tape(latent, gamma, mask, params, mode)
    return out


def self_attention_with_tape(latent: Tensor, gamma: Tensor, mask, params: ProjectionParams,
                             mode: MaskMode = MaskMode.POST_SOFTMAX):
    h, w, c = latent.shape
    if gamma.ndim != 2 or gamma.shape[1] != c:
        raise ValueError(f"instance features must be (n, {c}), got {tuple(gamma.shape)}")
    n = gamma.shape[0]
    p = torch.cat([latent.reshape(h * w, c), gamma], dim=0)
    m = _as_mask_tensor(mask, p)
    if m.shape != (h * w + n, h * w + n):
        raise ValueError(f"mask must be ({h * w + n}, {h * w + n}), got {tuple(m.shape)}")
    out, q, k, v, weights, masked, m = _attend(p, p, m, params, MaskMode(mode))
    tape = AttentionTape(x=p, y=p, q=q, k=k, v=v, weights=weights, masked_weights=masked,
                         mask=m, params=params, mode=MaskMode(mode), shared_xy=True,
                         out_rows=h * w)
    return out[: h * w].reshape(h, w, params.w_o.shape[1]), tape


def attention_backward(tape: AttentionTape, upstream: Tensor) -> AttentionGrads:
    """Analytic gradients of the taped forward call.

    ``upstream`` matches the forward output: (h, w, c_out) or (rows, c_out);
    for self-attention it covers only the kept latent rows.
    """
    params = tape.params
    g = upstream.reshape(-1, params.w_o.shape[1])
    if g.shape[0] != tape.out_rows:
        raise ValueError(f"upstream has {g.shape[0]} rows, tape expects {tape.out_rows}")
    total_rows = tape.x.shape[0]
    if tape.out_rows != total_rows:
        # instance-token output rows were discarded; their gradient is zero
        pad = torch.zeros(total_rows - tape.out_rows, g.shape[1], dtype=g.dtype)
        g = torch.cat([g, pad], dim=0)

    h = tape.masked_weights @ tape.v                      # pre-w_o activations
    d_w_o = h.transpose(-2, -1) @ g
    d_b_o = g.sum(0) if params.b_o is not None else None
    d_h = g @ params.w_o.transpose(-2, -1)

    d_masked = d_h @ tape.v.transpose(-2, -1)
    d_v = tape.masked_weights.transpose(-2, -1) @ d_h

    if tape.mode is MaskMode.POST_SOFTMAX:
        d_weights = d_masked * tape.mask
    else:
        d_weights = d_masked
    # softmax rows: dS = W * (dW - sum(dW * W)); masked/zero rows vanish
    inner = (d_weights * tape.weights).sum(-1, keepdim=True)
    d_scores = tape.weights * (d_weights - inner) / math.sqrt(params.d)

    d_q = d_scores @ tape.k
    d_k = d_scores.transpose(-2, -1) @ tape.q

    d_w_q = tape.x.transpose(-2, -1) @ d_q
    d_w_k = tape.x.transpose(-2, -1) @ d_k
    d_w_v = tape.y.transpose(-2, -1) @ d_v
    d_b_q = d_q.sum(0) if params.b_q is not None else None
    d_b_k = d_k.sum(0) if params.b_k is not None else None
    d_b_v = d_v.sum(0) if params.b_v is not None else None

    d_x = d_q @ params.w_q.transpose(-2, -1) + d_k @ params.w_k.transpose(-2, -1)
    d_y = d_v @ params.w_v.transpose(-2, -1)
    if tape.shared_xy:
        d_x = d_x + d_y
        d_y = d_x
    return AttentionGrads(d_x=d_x, d_y=d_y, d_w_q=d_w_q, d_w_k=d_w_k, d_w_v=d_w_v,
                          d_w_o=d_w_o, d_b_q=d_b_q, d_b_k=d_b_k, d_b_v=d_b_v, d_b_o=d_b_o)
