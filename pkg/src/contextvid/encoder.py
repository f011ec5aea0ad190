"""Dual-stream context encoder.

The semantic stream pools reference-image, text, and context tokens into a
global token set via learnable latent queries. The visual stream lets
pixel- and timestep-indexed learnable tokens attend over latent context
frames under an epipolar admissibility mask, then folds in a sinusoidal
frame-index embedding. A zero-initialized pointwise 3D convolution gates the
visual stream into the native per-pixel condition, so a freshly initialized
encoder is an exact no-op on the denoiser.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, concat
from .geometry import EpipolarMask
from .nn import (
    FeedForward,
    Linear,
    Module,
    PatchCodec,
    QueryTransformer,
    QueryTransformerConfig,
    QueryTransformerLayer,
    ShapeError,
    sinusoidal_embedding,
    uniform_init,
)

MAX_CONTEXT_FRAMES = 4


class MissingContextError(ValueError):
    pass


class ContextCountError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    latent_h: int = 16
    latent_w: int = 16
    latent_channels: int = 8
    frames: int = 16
    vis_dim: int = 32
    vis_layers: int = 1
    vis_heads: int = 2
    sem_dim: int = 32
    sem_queries: int = 16
    sem_layers: int = 2
    sem_heads: int = 2
    sem_patch: int = 16  # patch size for image tokens at image resolution
    image_size: int = 64
    vocab_size: int = 32
    temb_dim: int = 16
    ffn_expansion: int = 2
    max_context: int = MAX_CONTEXT_FRAMES


def check_context_count(n: int, max_context: int = MAX_CONTEXT_FRAMES) -> None:
    if n == 0:
        raise MissingContextError("at least one context frame is required")
    if n > max_context:
        raise ContextCountError(f"got {n} context frames, supported range is 1..{max_context}")


@dataclass
class SemanticTokens:
    """Token bundle for the semantic stream; all Tensors of shape (n, sem_dim)."""

    f_img: Tensor
    f_txt: Tensor
    f_ctx: Tensor | None  # None for the context-free baseline path
    num_context_frames: int = 0


def embed_context_frames(frames: np.ndarray, codec: PatchCodec) -> np.ndarray:
    """Stack codec latents of N context frames into (N, h, w, C)."""
    return np.stack([codec.encode(f) for f in np.asarray(frames, dtype=np.float64)])


class SemanticStream(Module):
    """Latent query tokens aggregate [image, text, context] tokens."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        d = cfg.sem_dim
        patch_dim = 3 * cfg.sem_patch * cfg.sem_patch
        self.cfg = cfg
        self.token_table = Tensor(uniform_init(rng, d, (cfg.vocab_size, d)), requires_grad=True)
        self.img_embed = Linear(patch_dim, d, rng)
        self.latent_queries = Tensor(uniform_init(rng, d, (cfg.sem_queries, d)), requires_grad=True)
        self.transformer = QueryTransformer(
            QueryTransformerConfig(layers=cfg.sem_layers, dim=d, heads=cfg.sem_heads,
                                   ffn_expansion=cfg.ffn_expansion), rng)

    def _patch_tokens(self, image: np.ndarray) -> Tensor:
        p = self.cfg.sem_patch
        H, W, c = image.shape
        if H % p or W % p:
            raise ShapeError(f"image {H}x{W} not divisible by semantic patch {p}")
        x = image.reshape(H // p, p, W // p, p, c).transpose(0, 2, 1, 3, 4)
        return self.img_embed(Tensor(x.reshape(-1, p * p * c)))

    def image_tokens(self, image: np.ndarray) -> Tensor:
        return self._patch_tokens(np.asarray(image, dtype=np.float64))

    def text_tokens(self, token_ids: np.ndarray) -> Tensor:
        return self.token_table[np.asarray(token_ids, dtype=np.intp)]

    def context_tokens(self, ctx_frames: np.ndarray, frame_indices: np.ndarray,
                       temporal: bool = True) -> Tensor:
        """Per-patch tokens of N context frames, tagged by source-frame index."""
        n = len(ctx_frames)
        check_context_count(n, self.cfg.max_context)
        parts = []
        for img, idx in zip(np.asarray(ctx_frames, dtype=np.float64), frame_indices):
            tok = self._patch_tokens(img)
            if temporal:
                tok = tok + Tensor(sinusoidal_embedding(int(idx), self.cfg.sem_dim))
            parts.append(tok)
        return concat(parts, axis=0)

    def encode(self, tokens: SemanticTokens) -> Tensor:
        """F_sem: latent queries attending over the concatenated token sets."""
        parts = [tokens.f_img, tokens.f_txt]
        if tokens.f_ctx is not None:
            check_context_count(tokens.num_context_frames, self.cfg.max_context)
            parts.append(tokens.f_ctx)
        return self.transformer(self.latent_queries, concat(parts, axis=0))


class VisualStream(Module):
    """Pixel- and timestep-wise tokens attend over latent context frames."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        d = cfg.vis_dim
        self.cfg = cfg
        thw = cfg.frames * cfg.latent_h * cfg.latent_w
        self.context_tokens = Tensor(uniform_init(rng, d, (thw, d)), requires_grad=True)
        self.kv_proj = Linear(cfg.latent_channels, d, rng)
        # context pixels need a positional identity: without it, attention is
        # permutation-invariant over context pixels and can only produce
        # content averages, never a learned geometric warp
        self.kv_pos = Tensor(uniform_init(rng, d, (cfg.latent_h * cfg.latent_w, d)),
                             requires_grad=True)
        self.layers = [
            QueryTransformerLayer(
                QueryTransformerConfig(layers=1, dim=d, heads=cfg.vis_heads,
                                       ffn_expansion=cfg.ffn_expansion), rng)
            for _ in range(cfg.vis_layers)
        ]
        self.time_ffn = FeedForward(d, cfg.ffn_expansion, rng, d_in=d + cfg.temb_dim)

    def encode(self, z_ctx: np.ndarray, mask: EpipolarMask | np.ndarray | None,
               frame_indices: np.ndarray, temporal: bool = True) -> Tensor:
        """F_vis of shape (T, h, w, vis_dim).

        ``mask`` gates which context pixels each query token may attend to;
        None means unrestricted. ``frame_indices`` are the video frame indices
        of the T generated frames, folded in as sinusoidal embeddings.
        """
        cfg = self.cfg
        T, h, w = cfg.frames, cfg.latent_h, cfg.latent_w
        z_ctx = np.asarray(z_ctx, dtype=np.float64)
        n = z_ctx.shape[0]
        check_context_count(n, cfg.max_context)
        if z_ctx.shape[1:] != (h, w, cfg.latent_channels):
            raise ShapeError(f"context latents {z_ctx.shape} do not match grid "
                             f"({h}, {w}, {cfg.latent_channels})")
        if len(frame_indices) != T:
            raise ShapeError(f"need {T} frame indices, got {len(frame_indices)}")

        dense_mask = None
        if mask is not None:
            dense_mask = mask.dense() if isinstance(mask, EpipolarMask) else np.asarray(mask, bool)
            if dense_mask.shape != (T * h * w, n * h * w):
                raise ShapeError(f"mask shape {dense_mask.shape} != {(T * h * w, n * h * w)}")

        kv = self.kv_proj(Tensor(z_ctx.reshape(n * h * w, cfg.latent_channels)))
        kv = kv + concat([self.kv_pos] * n, axis=0)
        x = self.context_tokens
        for layer in self.layers:
            x = layer(x, kv, dense_mask)

        temb = sinusoidal_embedding(np.asarray(frame_indices, dtype=np.float64), cfg.temb_dim)
        if not temporal:
            temb = np.zeros_like(temb)
        temb_px = np.repeat(temb, h * w, axis=0)  # (T*h*w, temb_dim)
        x = x + self.time_ffn(concat([x, Tensor(temb_px)], axis=-1))
        return x.reshape(T, h, w, cfg.vis_dim)


class FusionGate(Module):
    """Zero-initialized pointwise 3D convolution blending z_ref with F_vis."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.conv = Linear(cfg.latent_channels + cfg.vis_dim, cfg.latent_channels,
                           rng, zero_init=True)

    def fuse(self, z_ref: Tensor | np.ndarray, f_vis: Tensor) -> Tensor:
        """z_ref + ZeroConv3D([z_ref; F_vis]); exactly z_ref at initialization."""
        if not isinstance(z_ref, Tensor):
            z_ref = Tensor(z_ref)
        if z_ref.shape[:3] != f_vis.shape[:3]:
            raise ShapeError(f"z_ref {z_ref.shape} and F_vis {f_vis.shape} disagree")
        return z_ref + self.conv(concat([z_ref, f_vis], axis=-1))


class ContextEncoder(Module):
    """Semantic stream + visual stream + fusion gate, plus learned null tokens
    for the classifier-free unconditional branch."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.semantic = SemanticStream(cfg, rng)
        self.visual = VisualStream(cfg, rng)
        self.gate = FusionGate(cfg, rng)
        self.null_semantic = Tensor(uniform_init(rng, cfg.sem_dim,
                                                 (cfg.sem_queries, cfg.sem_dim)),
                                    requires_grad=True)
