"""Multi-scale deformable attention with hand-derived gradients.

Each query predicts, per head, a few sampling offsets around its reference
point on every pyramid level plus one attention logit per sample. Logits are
softmax-normalized jointly over (levels x points), the projected values are
bilinearly sampled with zero padding, and the weighted sum goes through an
output projection.

Coordinate conventions: reference points and offsets are normalized to
[0, 1] image coordinates; on a level of size (h, w) a normalized location
(u, v) lands at pixel-index coordinates (u * w - 0.5, v * h - 0.5), so pixel
``j`` has its center at index coordinate ``j``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .nn import Linear, Module

_CORNERS = ((0, 0), (1, 0), (0, 1), (1, 1))


@dataclass
class DeformAttnConfig:
    d_model: int = 256
    heads: int = 8
    points: int = 8
    levels: int = 1
    kernel: int = 4  # only enters complexity reporting

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if self.points < 1 or self.levels < 1:
            raise ValueError("points and levels must be >= 1")


@dataclass
class FeaturePyramid:
    """Levels stored channels-last as (B, h, w, c), finest first."""

    levels: list[Tensor]

    def __post_init__(self):
        if not self.levels:
            raise ValueError("a pyramid needs at least one level")
        chans = {lv.shape[-1] for lv in self.levels}
        if len(chans) != 1:
            raise ShapeError(f"pyramid levels disagree on channels: {sorted(chans)}")
        sizes = [lv.shape[1] * lv.shape[2] for lv in self.levels]
        if any(b >= a for a, b in zip(sizes, sizes[1:])):
            raise ShapeError(f"pyramid resolutions must strictly decrease: "
                             f"{[lv.shape[1:3] for lv in self.levels]}")

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return [(lv.shape[1], lv.shape[2]) for lv in self.levels]

    @property
    def channels(self) -> int:
        return self.levels[0].shape[-1]

    def flatten(self) -> Tensor:
        """Concatenate all levels into (B, S, c) with S = sum h*w."""
        b = self.levels[0].shape[0]
        flat = [ad.reshape(lv, (b, -1, lv.shape[-1])) for lv in self.levels]
        return flat[0] if len(flat) == 1 else ad.concat(flat, axis=1)

    @classmethod
    def unflatten(cls, x: Tensor, shapes: list[tuple[int, int]]) -> "FeaturePyramid":
        b, _, c = x.shape
        levels, start = [], 0
        for h, w in shapes:
            levels.append(ad.reshape(x[:, start:start + h * w], (b, h, w, c)))
            start += h * w
        return cls(levels)


def _corner_terms(x: np.ndarray, y: np.ndarray, h: int, w: int):
    """Yield (dx, dy, xi, yi, valid, fx, fy) for the four bilinear neighbours."""
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    for dx, dy in _CORNERS:
        xi = x0 + dx
        yi = y0 + dy
        valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        yield dx, dy, np.clip(xi, 0, w - 1), np.clip(yi, 0, h - 1), valid, fx, fy


def bilinear_sample(feature_map: np.ndarray, x, y) -> np.ndarray:
    """Sample an (h, w, c) map at pixel-index coordinates with zero padding.

    ``x`` indexes columns and ``y`` rows; both may be arrays of equal shape,
    in which case the result has shape ``x.shape + (c,)``.
    """
    fmap = np.asarray(feature_map, dtype=np.float64)
    if fmap.ndim == 2:
        fmap = fmap[:, :, None]
    if fmap.size == 0:
        raise ValueError("empty feature map")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if np.isnan(x).any() or np.isnan(y).any():
        raise ValueError("NaN sampling coordinate")
    h, w, c = fmap.shape
    # far-away coordinates would overflow the int cast; they sample zero anyway
    x = np.clip(x, -2.0, w + 1.0)
    y = np.clip(y, -2.0, h + 1.0)
    out = np.zeros(x.shape + (c,))
    for dx, dy, xi, yi, valid, fx, fy in _corner_terms(x, y, h, w):
        cw = (fx if dx else 1 - fx) * (fy if dy else 1 - fy) * valid
        out += cw[..., None] * fmap[yi, xi]
    return out


def ms_deform_sample(value: Tensor, shapes: list[tuple[int, int]], refs: Tensor,
                     offsets: Tensor, weights: Tensor) -> Tensor:
    """Weighted bilinear sampling of per-head values across pyramid levels.

    value   (B, S, H, dh)      projected values of all levels, flattened
    refs    (B, Nq, 2)         normalized reference points
    offsets (B, Nq, H, L, P, 2) normalized offsets
    weights (B, Nq, H, L, P)   attention weights (already normalized)
    returns (B, Nq, H, dh)

    The whole gather-and-blend is one sparse (B*Nq*H) x (B*S*H) matrix
    applied to the value rows, so the value gradient is its transpose.
    """
    B, S, H, dh = value.shape
    _, Nq, _, L, P, _ = offsets.shape
    if refs.shape != (B, Nq, 2) or weights.shape != (B, Nq, H, L, P) or len(shapes) != L:
        raise ShapeError(f"ms_deform_sample: value {value.shape}, refs {refs.shape}, "
                         f"offsets {offsets.shape}, weights {weights.shape}, levels {len(shapes)}")
    if sum(h * w for h, w in shapes) != S:
        raise ShapeError(f"ms_deform_sample: level sizes {shapes} do not cover S={S}")
    vflat = value.data.reshape(B * S * H, dh)
    hs = np.array([h for h, _ in shapes])[:, None]
    ws = np.array([w for _, w in shapes])[:, None]
    starts = np.concatenate([[0], np.cumsum([h * w for h, w in shapes])[:-1]])[:, None]
    loc = refs.data[:, :, None, None, None, :] + offsets.data      # (B,Nq,H,L,P,2)
    x = np.clip(loc[..., 0] * ws - 0.5, -2.0, ws + 1.0)
    y = np.clip(loc[..., 1] * hs - 0.5, -2.0, hs + 1.0)
    bidx = np.arange(B)[:, None, None, None, None]
    hidx = np.arange(H)[None, None, :, None, None]
    wd = weights.data
    out_rows = np.broadcast_to(np.arange(B * Nq * H).reshape(B, Nq, H, 1, 1), wd.shape)

    corners = []
    for dx, dy, xi, yi, valid, fx, fy in _corner_terms(x, y, hs, ws):
        rows = (bidx * S + starts + yi * ws + xi) * H + hidx
        cw = (fx if dx else 1 - fx) * (fy if dy else 1 - fy) * valid
        corners.append((dx, dy, rows, valid, cw, fx, fy))
    coef = np.concatenate([(c[4] * wd).ravel() for c in corners])
    mat = sp.coo_matrix(
        (coef, (np.tile(out_rows.ravel(), 4), np.concatenate([c[2].ravel() for c in corners]))),
        shape=(B * Nq * H, B * S * H))
    out = np.asarray(mat @ vflat).reshape(B, Nq, H, dh)

    def vjp(g):
        g2 = g.reshape(B * Nq * H, dh)
        gvalue = np.asarray(mat.T @ g2).reshape(value.shape)
        gq = g[:, :, :, None, None, :]
        gw = np.zeros(wd.shape)
        gx = np.zeros(wd.shape)
        gy = np.zeros(wd.shape)
        for dx, dy, rows, valid, cw, fx, fy in corners:
            dot = (vflat[rows] * gq).sum(-1) * valid
            gw += cw * dot
            gx += (1.0 if dx else -1.0) * (fy if dy else 1 - fy) * dot
            gy += (fx if dx else 1 - fx) * (1.0 if dy else -1.0) * dot
        goff = np.stack([gx * wd * ws, gy * wd * hs], axis=-1)
        return gvalue, goff.sum(axis=(2, 3, 4)), goff, gw

    return ad.custom_op("ms_deform_sample", out, (value, refs, offsets, weights), vjp)


class MSDeformAttn(Module):
    """Deformable attention module: projections plus :func:`ms_deform_sample`."""

    def __init__(self, cfg: DeformAttnConfig, rng: np.random.Generator, offset_scale: float = 0.02):
        self.cfg = cfg
        H, L, P = cfg.heads, cfg.levels, cfg.points
        d = cfg.d_model
        self.sampling_offsets = Linear(d, H * L * P * 2, rng, zero=True)
        # initial samples fan out on rings around the reference, one direction per head
        theta = np.arange(H) * (2.0 * math.pi / H)
        grid = np.stack([np.cos(theta), np.sin(theta)], -1)
        grid = grid / np.abs(grid).max(-1, keepdims=True)
        bias = np.tile(grid[:, None, None, :], (1, L, P, 1)) * offset_scale
        bias *= np.arange(1, P + 1)[None, None, :, None]
        self.sampling_offsets.bias.data[...] = bias.ravel()
        self.attention_weights = Linear(d, H * L * P, rng, zero=True)
        self.value_proj = Linear(d, d, rng)
        self.output_proj = Linear(d, d, rng)
        self._last_weights: np.ndarray | None = None

    def __call__(self, query: Tensor, refs: Tensor, value_input: Tensor,
                 shapes: list[tuple[int, int]]) -> Tensor:
        cfg = self.cfg
        B, Nq, d = query.shape
        if d != cfg.d_model or value_input.shape[-1] != cfg.d_model:
            raise ShapeError(f"d_model mismatch: queries {query.shape}, "
                             f"values {value_input.shape}, config {cfg.d_model}")
        if refs.shape != (B, Nq, 2):
            raise ShapeError(f"reference points {refs.shape} do not match queries {query.shape}")
        if len(shapes) != cfg.levels:
            raise ShapeError(f"{len(shapes)} pyramid levels, config expects {cfg.levels}")
        H, L, P = cfg.heads, cfg.levels, cfg.points
        S = value_input.shape[1]
        value = ad.reshape(self.value_proj(value_input), (B, S, H, d // H))
        offsets = ad.reshape(self.sampling_offsets(query), (B, Nq, H, L, P, 2))
        logits = ad.reshape(self.attention_weights(query), (B, Nq, H, L * P))
        weights = ad.reshape(ad.softmax(logits), (B, Nq, H, L, P))
        self._last_weights = weights.data
        sampled = ms_deform_sample(value, shapes, refs, offsets, weights)
        return self.output_proj(ad.reshape(sampled, (B, Nq, d)))


def deformable_attention(queries: Tensor, pyramid: FeaturePyramid, refs: Tensor,
                         cfg: DeformAttnConfig, params: MSDeformAttn) -> Tensor:
    if pyramid.channels != cfg.d_model:
        raise ShapeError(f"pyramid channels {pyramid.channels} != d_model {cfg.d_model}")
    return params(queries, refs, pyramid.flatten(), pyramid.shapes)


@dataclass
class ComplexityEstimate:
    guard_value: int
    guard_holds: bool
    encoder: float
    decoder: float
    general: float


def complexity_estimate(cfg: DeformAttnConfig, n_q: int, h: int, w: int) -> ComplexityEstimate:
    """Operation-count estimates for one deformable attention layer.

    ``general`` evaluates the full cost expression for the given ``n_q``;
    ``encoder`` sets n_q = h*w (pixels as queries) and ``decoder`` keeps
    ``n_q`` object queries, where the sampled-point term replaces the dense
    spatial term so the count does not depend on h and w.
    """
    if min(n_q, h, w, cfg.d_model, cfg.kernel, cfg.points) <= 0:
        raise ValueError("all counts must be positive")
    c, k, ps = cfg.d_model, cfg.kernel, cfg.points
    hw = h * w
    guard = 5 * k + 3 * ps * k

    def cost(nq: int) -> float:
        return float(nq * c * c + min(hw * c * c, nq * k * c * c) + 5 * nq * k * c
                     + 3 * nq * c * ps * k)

    return ComplexityEstimate(
        guard_value=guard,
        guard_holds=guard < c,
        encoder=float(2 * hw * c * c + hw * c * c),
        decoder=float(2 * n_q * c * c + n_q * k * c * c),
        general=cost(n_q),
    )
