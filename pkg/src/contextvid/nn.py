"""Deterministic neural kernels: masked attention, query transformers,
sinusoidal embeddings, a linear patch codec, Adam, and gradient checking.

Everything runs in float64 on the autodiff Tensor; an optional float32
forward path exists for inference (see ``cast_params``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff
from .autodiff import Tensor, as_tensor, concat, masked_softmax


class ShapeError(ValueError):
    pass


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Softmax / attention kernels
# ---------------------------------------------------------------------------

def stable_softmax(logits: np.ndarray) -> np.ndarray:
    """Max-subtracted softmax on a plain vector; -inf entries map to exact 0."""
    x = np.asarray(logits, dtype=np.float64)
    m = np.max(x)
    if not np.isfinite(m):
        raise ValueError("softmax needs at least one finite entry")
    e = np.exp(x - m)
    return e / e.sum()


def epi_cross_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None) -> Tensor:
    """Single-head masked cross-attention: softmax(q k^T / sqrt(D), mask) v.

    Masked key positions receive exactly zero attention weight (additive -inf
    before the softmax), so their values cannot influence the output.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"q/k feature dims differ: {q.shape[-1]} vs {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError("k and v must have the same number of rows")
    if mask is not None and mask.shape != (q.shape[-2], k.shape[-2]):
        raise ShapeError(f"mask shape {mask.shape} != {(q.shape[-2], k.shape[-2])}")
    d = q.shape[-1]
    logits = (q @ k.transpose(*range(k.ndim - 2), k.ndim - 1, k.ndim - 2)) * (1.0 / math.sqrt(d))
    return masked_softmax(logits, mask) @ v


def epi_cross_attention_blocked(
    q: np.ndarray, k: np.ndarray, v: np.ndarray, mask: np.ndarray | None, block: int = 256
) -> np.ndarray:
    """Forward-only blocked (online-softmax) masked attention.

    Streams over key blocks holding running max / normalizer, so the full
    logits matrix is never materialized. Matches epi_cross_attention within
    floating-point roundoff.
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    m_rows, d = q.shape
    scale = 1.0 / math.sqrt(d)

    acc = np.zeros((m_rows, v.shape[1]))
    run_max = np.full(m_rows, -np.inf)
    run_sum = np.zeros(m_rows)
    for start in range(0, k.shape[0], block):
        stop = min(start + block, k.shape[0])
        logits = q @ k[start:stop].T * scale
        if mask is not None:
            logits = np.where(mask[:, start:stop], logits, -np.inf)
        blk_max = logits.max(axis=1)
        new_max = np.maximum(run_max, blk_max)
        with np.errstate(invalid="ignore"):
            alpha = np.exp(run_max - new_max)
        alpha = np.where(np.isfinite(run_max), alpha, 0.0)
        e = np.exp(logits - new_max[:, None])
        if mask is not None:
            e = np.where(mask[:, start:stop], e, 0.0)
        acc = acc * alpha[:, None] + e @ v[start:stop]
        run_sum = run_sum * alpha + e.sum(axis=1)
        run_max = new_max
    if not (run_sum > 0).all():
        raise ValueError("attention row with no admissible keys")
    return acc / run_sum[:, None]


# ---------------------------------------------------------------------------
# Parameter containers and layers
# ---------------------------------------------------------------------------

def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Parameters live in a flat dict name -> Tensor(requires_grad=True)."""

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for name, val in vars(self).items():
            if isinstance(val, Tensor):
                out[name] = val
            elif isinstance(val, Module):
                for sub, p in val.parameters().items():
                    out[f"{name}.{sub}"] = p
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        for sub, p in item.parameters().items():
                            out[f"{name}.{i}.{sub}"] = p
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state dict mismatch: missing={sorted(missing)}, extra={sorted(extra)}")
        for k, p in params.items():
            if p.data.shape != state[k].shape:
                raise ShapeError(f"{k}: shape {state[k].shape} != {p.data.shape}")
            p.data = np.asarray(state[k], dtype=autodiff._default_dtype).copy()


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, zero_init: bool = False):
        if zero_init:
            w = np.zeros((d_in, d_out))
        else:
            w = uniform_init(rng, d_in, (d_in, d_out))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        return centered / (var + self.eps).sqrt() * self.gamma + self.beta


class MultiHeadAttention(Module):
    """Cross- (or self-) attention with optional boolean admissibility mask.

    The output projection is zero-initialized so a fresh residual branch is a
    no-op.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads != 0:
            raise ConfigError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.dim = dim
        self.q_proj = Linear(dim, dim, rng)
        self.k_proj = Linear(dim, dim, rng)
        self.v_proj = Linear(dim, dim, rng)
        self.out_proj = Linear(dim, dim, rng, zero_init=True)

    def __call__(self, queries: Tensor, context: Tensor, mask: np.ndarray | None = None) -> Tensor:
        m, l = queries.shape[-2], context.shape[-2]
        if mask is not None and mask.shape != (m, l):
            raise ShapeError(f"mask shape {mask.shape} != {(m, l)}")
        h, dh = self.heads, self.dim // self.heads
        q = self.q_proj(queries).reshape(m, h, dh).transpose(1, 0, 2)
        k = self.k_proj(context).reshape(l, h, dh).transpose(1, 0, 2)
        v = self.v_proj(context).reshape(l, h, dh).transpose(1, 0, 2)
        logits = (q @ k.transpose(0, 2, 1)) * (1.0 / math.sqrt(dh))
        attn = masked_softmax(logits, None if mask is None else mask[None, :, :])
        out = (attn @ v).transpose(1, 0, 2).reshape(m, self.dim)
        return self.out_proj(out)


class FeedForward(Module):
    """SiLU MLP; second projection zero-initialized for residual stacking."""

    def __init__(self, dim: int, expansion: int, rng: np.random.Generator, d_in: int | None = None):
        d_in = dim if d_in is None else d_in
        self.fc1 = Linear(d_in, dim * expansion, rng)
        self.fc2 = Linear(dim * expansion, dim, rng, zero_init=True)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(self.fc1(x).silu())


@dataclass(frozen=True)
class QueryTransformerConfig:
    layers: int = 4
    dim: int = 64
    heads: int = 4
    ffn_expansion: int = 2

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigError("need at least one layer")
        if self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")


class QueryTransformerLayer(Module):
    def __init__(self, cfg: QueryTransformerConfig, rng: np.random.Generator):
        self.norm_attn = LayerNorm(cfg.dim)
        self.attn = MultiHeadAttention(cfg.dim, cfg.heads, rng)
        self.norm_ffn = LayerNorm(cfg.dim)
        self.ffn = FeedForward(cfg.dim, cfg.ffn_expansion, rng)

    def __call__(self, queries: Tensor, context: Tensor, mask: np.ndarray | None = None) -> Tensor:
        queries = queries + self.attn(self.norm_attn(queries), context, mask)
        return queries + self.ffn(self.norm_ffn(queries))


class QueryTransformer(Module):
    """Stack of cross-attention + FFN layers; latent queries gather context."""

    def __init__(self, cfg: QueryTransformerConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.layers = [QueryTransformerLayer(cfg, rng) for _ in range(cfg.layers)]

    def __call__(self, queries: Tensor, context: Tensor, mask: np.ndarray | None = None) -> Tensor:
        queries = as_tensor(queries)
        context = as_tensor(context)
        if queries.shape[-1] != self.cfg.dim or context.shape[-1] != self.cfg.dim:
            raise ShapeError("feature dim does not match config")
        for layer in self.layers:
            queries = layer(queries, context, mask)
        return queries


# ---------------------------------------------------------------------------
# Sinusoidal embedding
# ---------------------------------------------------------------------------

def sinusoidal_embedding(index, dim: int, base: float = 10000.0) -> np.ndarray:
    """Interleaved sin/cos embedding over geometric frequencies.

    ``index`` may be a scalar or an integer array; the output gains a trailing
    ``dim`` axis.
    """
    if dim % 2 != 0:
        raise ConfigError(f"embedding dim must be even, got {dim}")
    idx = np.asarray(index, dtype=np.float64)
    freqs = base ** (-np.arange(dim // 2, dtype=np.float64) * 2.0 / dim)
    angles = idx[..., None] * freqs
    out = np.empty(idx.shape + (dim,))
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


# ---------------------------------------------------------------------------
# Patch codec
# ---------------------------------------------------------------------------

class PatchCodec(Module):
    """Linear patchify autoencoder standing in for a pretrained latent codec.

    encode: (H, W, 3) -> (H/p, W/p, C); decode inverts. With p=1, C=3 and
    identity weights the round-trip is exact.
    """

    def __init__(self, patch: int = 4, channels: int = 8,
                 rng: np.random.Generator | None = None, identity_init: bool = False):
        self.patch = patch
        self.channels = channels
        d = 3 * patch * patch
        if identity_init:
            if d != channels:
                raise ConfigError("identity init needs channels == 3 * patch**2")
            w_enc = np.eye(d)
            w_dec = np.eye(d)
        else:
            rng = np.random.default_rng(0) if rng is None else rng
            w_enc = uniform_init(rng, d, (d, channels))
            w_dec = uniform_init(rng, channels, (channels, d))
        self.w_enc = Tensor(w_enc, requires_grad=True)
        self.b_enc = Tensor(np.zeros(channels), requires_grad=True)
        self.w_dec = Tensor(w_dec, requires_grad=True)
        self.b_dec = Tensor(np.zeros(d), requires_grad=True)

    def _patchify(self, image: np.ndarray) -> np.ndarray:
        p = self.patch
        H, W, c = image.shape
        if H % p or W % p:
            raise ShapeError(f"image {H}x{W} not divisible by patch size {p}")
        x = image.reshape(H // p, p, W // p, p, c).transpose(0, 2, 1, 3, 4)
        return x.reshape(H // p, W // p, p * p * c)

    def _unpatchify(self, flat: np.ndarray, H: int, W: int) -> np.ndarray:
        p = self.patch
        x = flat.reshape(H // p, W // p, p, p, 3).transpose(0, 2, 1, 3, 4)
        return x.reshape(H, W, 3)

    def encode(self, image: np.ndarray) -> np.ndarray:
        return self._patchify(np.asarray(image, dtype=np.float64)) @ self.w_enc.data + self.b_enc.data

    def decode(self, latent: np.ndarray) -> np.ndarray:
        h, w, c = latent.shape
        if c != self.channels:
            raise ShapeError(f"latent has {c} channels, codec expects {self.channels}")
        flat = np.asarray(latent, dtype=np.float64) @ self.w_dec.data + self.b_dec.data
        return self._unpatchify(flat, h * self.patch, w * self.patch)

    def reconstruction_loss(self, images: np.ndarray) -> Tensor:
        """Mean squared round-trip error over a batch of images, on the tape."""
        patches = np.stack([self._patchify(img) for img in np.asarray(images, dtype=np.float64)])
        x = Tensor(patches)
        recon = ((x @ self.w_enc + self.b_enc) @ self.w_dec) + self.b_dec
        diff = recon - x
        return (diff * diff).mean()

    def train(self, images: np.ndarray, steps: int = 300, lr: float = 1e-2,
              batch: int = 16, seed: int = 0) -> list[float]:
        """Fit the codec to an image corpus; returns the loss trace."""
        rng = np.random.default_rng(seed)
        opt = Adam(self.parameters(), lr=lr)
        trace = []
        images = np.asarray(images, dtype=np.float64)
        for _ in range(steps):
            idx = rng.integers(0, len(images), size=min(batch, len(images)))
            loss = self.reconstruction_loss(images[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            trace.append(loss.item())
        return trace


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            p.data = p.data - self.lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)


# ---------------------------------------------------------------------------
# Gradient checking and precision casting
# ---------------------------------------------------------------------------

def grad_check(f, params: dict[str, Tensor], eps: float = 1e-5,
               max_entries_per_param: int | None = None, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps the params dict to a scalar Tensor. The error measure is
    |analytic - numeric| / max(1, |analytic|). When a parameter is large,
    ``max_entries_per_param`` subsamples coordinates deterministically.
    """
    for p in params.values():
        p.grad = None
    out = f(params)
    if not np.isfinite(out.data).all():
        raise FloatingPointError("function value is not finite")
    out.backward()

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in params.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        idxs = np.arange(flat.size)
        if max_entries_per_param is not None and flat.size > max_entries_per_param:
            idxs = rng.choice(flat.size, size=max_entries_per_param, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = f(params).item()
            flat[i] = orig - eps
            f_minus = f(params).item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2 * eps)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst


def cast_params(params: dict[str, Tensor], dtype) -> dict[str, Tensor]:
    """Round-trip parameters through ``dtype`` (e.g. float32 inference path)."""
    return {k: Tensor(p.data.astype(dtype).astype(np.float64)) for k, p in params.items()}
