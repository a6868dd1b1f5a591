"""Deformable-transformer detector: conv backbone, deformable encoder, query decoder, heads."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .deform_attn import DeformAttnConfig, FeaturePyramid, MSDeformAttn
from .nn import FFN, MLP, LayerNorm, Linear, Module, param


@dataclass
class ModelConfig:
    d_model: int = 32
    encoder_layers: int = 2
    decoder_layers: int = 2
    heads: int = 4
    points: int = 8
    pyramid_levels: int = 3
    num_queries: int = 30
    num_classes: int = 1
    ffn_dim: int = 64
    backbone_channels: tuple[int, int] = (16, 32)
    backbone_depth: int = 0           # extra stride-1 convs after each strided one
    offset_scale: float = 0.02
    box_from_reference: bool = True   # box centers predicted as offsets from decoder refs
    seed: int = 0

    def __post_init__(self):
        self.backbone_channels = tuple(self.backbone_channels)
        if self.backbone_depth < 0:
            raise ValueError("backbone_depth must be >= 0")
        if self.num_queries < 1:
            raise ValueError("num_queries must be >= 1")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if not 1 <= self.pyramid_levels <= 3:
            raise ValueError("pyramid_levels must be 1, 2 or 3")
        self.attn_config()  # validates head divisibility

    def attn_config(self) -> DeformAttnConfig:
        return DeformAttnConfig(d_model=self.d_model, heads=self.heads,
                                points=self.points, levels=self.pyramid_levels)

    @property
    def max_stride(self) -> int:
        return 8 * 2 ** (self.pyramid_levels - 1)


@dataclass
class DetectionOutput:
    logits: Tensor            # (B, N, C+1), no-object last
    boxes: Tensor             # (B, N, 4) normalized cx, cy, w, h
    aux: list["DetectionOutput"] = field(default_factory=list)

    def __len__(self) -> int:
        return self.logits.shape[0]

    def probs(self) -> np.ndarray:
        z = self.logits.data - self.logits.data.max(-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(-1, keepdims=True)


class _Conv(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, stride: int = 2):
        fan_in = 9 * c_in
        self.weight = param(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(3, 3, c_in, c_out)))
        self.bias = param(np.zeros(c_out))
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return ad.relu(ad.conv2d(x, self.weight, self.bias, stride=self.stride, pad=1))


class _Stage(Module):
    def __init__(self, c_in: int, c_out: int, depth: int, rng: np.random.Generator):
        self.convs = [_Conv(c_in, c_out, rng)] + [_Conv(c_out, c_out, rng, stride=1) for _ in range(depth)]

    def __call__(self, x: Tensor) -> Tensor:
        for conv in self.convs:
            x = conv(x)
        return x


class Backbone(Module):
    """Strided 3x3 convolutions: two stem stages then one stage per pyramid level."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        c1, c2 = cfg.backbone_channels
        k = cfg.backbone_depth
        self.stem = [_Stage(1, c1, k, rng), _Stage(c1, c2, k, rng)]
        chans = [c2] + [cfg.d_model] * cfg.pyramid_levels
        self.stages = [_Stage(a, b, k, rng) for a, b in zip(chans[:-1], chans[1:])]
        self.norms = [LayerNorm(cfg.d_model) for _ in range(cfg.pyramid_levels)]
        self._max_stride = cfg.max_stride

    def __call__(self, images: np.ndarray) -> FeaturePyramid:
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 2:
            images = images[None]
        _, H, W = images.shape
        if min(H, W) < max(32, self._max_stride):
            raise ShapeError(f"image {H}x{W} smaller than the largest stride {self._max_stride}")
        x = Tensor(images[..., None])
        for conv in self.stem:
            x = conv(x)
        levels = []
        for stage, norm in zip(self.stages, self.norms):
            x = stage(x)
            levels.append(norm(x))
        return FeaturePyramid(levels)


def sine_embedding(h: int, w: int, d: int, temperature: float = 10000.0) -> np.ndarray:
    """2-D sinusoidal embedding of pixel centers, (h*w, d); first half y, second half x."""
    if d % 4:
        raise ValueError("d_model must be divisible by 4 for the 2-D sine embedding")
    quarter = d // 4
    ys = (np.arange(h) + 0.5) / h * 2 * math.pi
    xs = (np.arange(w) + 0.5) / w * 2 * math.pi
    freqs = temperature ** (np.arange(quarter) / quarter)

    def enc(v):
        a = v[:, None] / freqs
        return np.concatenate([np.sin(a), np.cos(a)], axis=1)

    ey, ex = enc(ys), enc(xs)
    emb = np.concatenate([np.repeat(ey, w, axis=0), np.tile(ex, (h, 1))], axis=1)
    return emb


def encoder_reference_points(shapes: list[tuple[int, int]]) -> np.ndarray:
    pts = []
    for h, w in shapes:
        yy, xx = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
        pts.append(np.stack([xx.ravel(), yy.ravel()], -1))
    return np.concatenate(pts, 0)


class EncoderLayer(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.attn = MSDeformAttn(cfg.attn_config(), rng, cfg.offset_scale)
        self.norm1 = LayerNorm(cfg.d_model)
        self.ffn = FFN(cfg.d_model, cfg.ffn_dim, rng)
        self.norm2 = LayerNorm(cfg.d_model)

    def __call__(self, src, pos, refs, shapes):
        src = self.norm1(src + self.attn(src + pos, refs, src, shapes))
        return self.norm2(src + self.ffn(src))


class SelfAttention(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        self.heads = heads
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.out = Linear(d, d, rng)
        self._last_weights: np.ndarray | None = None

    def __call__(self, qk_in: Tensor, v_in: Tensor) -> Tensor:
        B, N, d = v_in.shape
        H = self.heads
        dh = d // H

        def split(t):
            return ad.transpose(ad.reshape(t, (B, N, H, dh)), (0, 2, 1, 3))

        q, k, v = split(self.q(qk_in)), split(self.k(qk_in)), split(self.v(v_in))
        scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
        attn = ad.softmax(scores)
        self._last_weights = attn.data
        mixed = ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3))
        return self.out(ad.reshape(mixed, (B, N, d)))


class DecoderLayer(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.self_attn = SelfAttention(cfg.d_model, cfg.heads, rng)
        self.norm1 = LayerNorm(cfg.d_model)
        self.cross_attn = MSDeformAttn(cfg.attn_config(), rng, cfg.offset_scale)
        self.norm2 = LayerNorm(cfg.d_model)
        self.ffn = FFN(cfg.d_model, cfg.ffn_dim, rng)
        self.norm3 = LayerNorm(cfg.d_model)

    def __call__(self, tgt, pos, refs, memory, shapes):
        q = tgt + pos
        tgt = self.norm1(tgt + self.self_attn(q, tgt))
        tgt = self.norm2(tgt + self.cross_attn(tgt + pos, refs, memory, shapes))
        return self.norm3(tgt + self.ffn(tgt))


class Detector(Module):
    def __init__(self, cfg: ModelConfig):
        self.config = cfg
        rng = np.random.default_rng(cfg.seed)
        d = cfg.d_model
        self.backbone = Backbone(cfg, rng)
        self.level_embed = param(rng.normal(0.0, 0.02, size=(cfg.pyramid_levels, d)))
        self.encoder = [EncoderLayer(cfg, rng) for _ in range(cfg.encoder_layers)]
        self.query_pos = param(rng.normal(0.0, 1.0, size=(cfg.num_queries, d)))
        self.query_tgt = param(rng.normal(0.0, 1.0, size=(cfg.num_queries, d)))
        self.ref_proj = Linear(d, 2, rng)
        self.decoder = [DecoderLayer(cfg, rng) for _ in range(cfg.decoder_layers)]
        self.class_head = Linear(d, cfg.num_classes + 1, rng)
        self.box_head = MLP([d, d, d, 4], rng)
        self.box_head.layers[-1].weight.data[...] = 0.0
        self.box_head.layers[-1].bias.data[...] = 0.0

    # -- stages -------------------------------------------------------------

    def backbone_forward(self, images: np.ndarray) -> FeaturePyramid:
        return self.backbone(images)

    def positional_embedding(self, shapes: list[tuple[int, int]]) -> Tensor:
        parts = []
        for lvl, (h, w) in enumerate(shapes):
            parts.append(Tensor._wrap(sine_embedding(h, w, self.config.d_model)) + self.level_embed[lvl])
        return parts[0] if len(parts) == 1 else ad.concat(parts, axis=0)

    def encoder_forward(self, pyramid: FeaturePyramid, pos_embed: Tensor | None = None) -> FeaturePyramid:
        if not self.encoder:
            return pyramid
        shapes = pyramid.shapes
        if pos_embed is None:
            pos_embed = self.positional_embedding(shapes)
        src = pyramid.flatten()
        B, S, _ = src.shape
        if pos_embed.shape != (S, self.config.d_model):
            raise ShapeError(f"positional embedding {pos_embed.shape} vs flattened pixels {(S, self.config.d_model)}")
        refs = Tensor._wrap(np.broadcast_to(encoder_reference_points(shapes), (B, S, 2)).copy())
        for layer in self.encoder:
            src = layer(src, pos_embed, refs, shapes)
        return FeaturePyramid.unflatten(src, shapes)

    def decoder_forward(self, memory: FeaturePyramid, query_pos: Tensor | None = None,
                        query_tgt: Tensor | None = None) -> list[Tensor]:
        """Run the decoder and return the states after every layer (last = final)."""
        query_pos = self.query_pos if query_pos is None else query_pos
        query_tgt = self.query_tgt if query_tgt is None else query_tgt
        if query_pos.shape != (self.config.num_queries, self.config.d_model):
            raise ShapeError(f"query embeddings {query_pos.shape} vs num_queries {self.config.num_queries}")
        B = memory.levels[0].shape[0]
        shapes = memory.shapes
        mem = memory.flatten()
        zeros = Tensor._wrap(np.zeros((B,) + query_tgt.shape))
        refs = Tensor._wrap(np.zeros((B, query_pos.shape[0], 2))) + self.query_references(query_pos)
        tgt = zeros + query_tgt
        states = []
        for layer in self.decoder:
            tgt = layer(tgt, query_pos, refs, mem, shapes)
            states.append(tgt)
        if not states:
            states.append(tgt)
        return states

    def reference_logits(self, query_pos: Tensor | None = None) -> Tensor:
        return self.ref_proj(self.query_pos if query_pos is None else query_pos)

    def query_references(self, query_pos: Tensor | None = None) -> Tensor:
        """Normalized (x, y) decoder reference point per query."""
        return ad.sigmoid(self.reference_logits(query_pos))

    def predict_heads(self, states: Tensor, ref_logits: Tensor | None = None) -> DetectionOutput:
        """Class logits and sigmoid boxes; ``ref_logits`` (N, 2) shift the center logits."""
        if states.shape[-1] != self.config.d_model:
            raise ShapeError(f"query states {states.shape} vs d_model {self.config.d_model}")
        raw = self.box_head(states)
        if ref_logits is not None:
            pad = Tensor._wrap(np.zeros(ref_logits.shape[:-1] + (2,)))
            raw = raw + ad.concat([ref_logits, pad], axis=-1)
        return DetectionOutput(self.class_head(states), ad.sigmoid(raw))

    def __call__(self, images: np.ndarray, aux: bool = False) -> DetectionOutput:
        pyramid = self.backbone_forward(images)
        memory = self.encoder_forward(pyramid)
        states = self.decoder_forward(memory)
        refs = self.reference_logits() if self.config.box_from_reference else None
        out = self.predict_heads(states[-1], refs)
        if aux:
            out.aux = [self.predict_heads(s, refs) for s in states[:-1]]
        return out

    forward = __call__


def model_forward(model: Detector, image: np.ndarray) -> DetectionOutput:
    return model(image)
