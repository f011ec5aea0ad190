"""Toy latent video diffusion with camera and context conditioning.

Epsilon-prediction denoiser over (T, h, w, C) latent clips: pointwise input
projection over [noisy latent; fused pixel condition; ray embedding], then
blocks of spatial attention, temporal attention, cross-attention to the
semantic tokens, and an FFN. Deterministic DDIM (eta = 0) sampling with
classifier-free guidance.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, concat
from .encoder import ContextEncoder, SemanticTokens
from .geometry import EpipolarMask
from .nn import (
    Adam,
    ConfigError,
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    ShapeError,
    masked_softmax,
    sinusoidal_embedding,
    uniform_init,
)


class TrainingDivergedError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Noise schedule and forward process
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray  # index 0 is diffusion step t=1

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or len(b) < 1:
            raise ConfigError("schedule needs at least one beta")
        if not ((b > 0).all() and (b < 1).all() and (np.diff(b) >= 0).all()):
            raise ConfigError("betas must satisfy 0 < b_1 <= ... <= b_T < 1")
        object.__setattr__(self, "betas", b)

    @property
    def horizon(self) -> int:
        return len(self.betas)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    def alpha_bar(self, t: int) -> float:
        """Cumulative alpha at diffusion step t; t=0 means no noise."""
        if t == 0:
            return 1.0
        return float(self.alpha_bars[t - 1])


def build_schedule(t_diff: int = 1000, beta_start: float = 1e-4,
                   beta_end: float = 2e-2, spacing: str = "linear") -> NoiseSchedule:
    if spacing != "linear":
        raise ConfigError(f"unknown spacing {spacing!r}")
    if not (0 < beta_start <= beta_end < 1):
        raise ConfigError("need 0 < beta_start <= beta_end < 1")
    return NoiseSchedule(np.linspace(beta_start, beta_end, t_diff))


def forward_noising(z0: np.ndarray, t: int, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Closed-form marginal z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps."""
    if not (1 <= t <= schedule.horizon):
        raise ConfigError(f"t={t} outside [1, {schedule.horizon}]")
    if np.shape(z0) != np.shape(eps):
        raise ShapeError("noise shape must match the latent shape")
    ab = schedule.alpha_bar(t)
    return math.sqrt(ab) * np.asarray(z0) + math.sqrt(1.0 - ab) * np.asarray(eps)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def loss_uniform(eps, eps_hat):
    """Mean squared error over all entries; works on Tensors or arrays."""
    if isinstance(eps, Tensor) or isinstance(eps_hat, Tensor):
        diff = (eps_hat if isinstance(eps_hat, Tensor) else Tensor(eps_hat)) - \
            (eps if isinstance(eps, Tensor) else Tensor(eps))
        return (diff * diff).mean()
    diff = np.asarray(eps_hat) - np.asarray(eps)
    return float(np.mean(diff * diff))


def log_frame_weights(frames: int) -> np.ndarray:
    return np.log10(np.arange(frames, dtype=np.float64) + 1.0)


def loss_log_weighted(per_frame_sq_errors):
    """Normalized log10(k+1)-weighted mean of per-frame squared errors.

    Frame 0 has exactly zero weight; a single-frame input is rejected since
    its weight vector is all-zero.
    """
    n = per_frame_sq_errors.shape[0] if isinstance(per_frame_sq_errors, Tensor) \
        else len(per_frame_sq_errors)
    if n < 2:
        raise ConfigError("log-weighted loss needs at least two frames")
    w = log_frame_weights(n)
    norm = w.sum()
    if isinstance(per_frame_sq_errors, Tensor):
        return (per_frame_sq_errors * Tensor(w)).sum() * (1.0 / norm)
    return float(np.dot(np.asarray(per_frame_sq_errors, dtype=np.float64), w) / norm)


def per_frame_squared_error(eps: np.ndarray, eps_hat: Tensor) -> Tensor:
    """Mean squared error per frame, shape (T,), on the tape."""
    diff = eps_hat - Tensor(eps)
    t = diff.shape[0]
    return (diff * diff).reshape(t, -1).mean(axis=1)


def cfg_combine(eps_cond, eps_uncond, scale: float):
    """Classifier-free guidance: uncond + scale * (cond - uncond)."""
    return eps_uncond + scale * (eps_cond - eps_uncond)


# ---------------------------------------------------------------------------
# Denoiser
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DenoiserConfig:
    frames: int = 16
    latent_h: int = 16
    latent_w: int = 16
    channels: int = 8
    dim: int = 48
    heads: int = 2
    blocks: int = 2
    ffn_expansion: int = 2
    sem_dim: int = 32

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ConfigError("dim must be divisible by heads")


class BatchedSelfAttention(Module):
    """Self-attention over the middle axis of a (B, L, dim) tensor."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.dim, self.heads = dim, heads
        self.q_proj = Linear(dim, dim, rng)
        self.k_proj = Linear(dim, dim, rng)
        self.v_proj = Linear(dim, dim, rng)
        self.out_proj = Linear(dim, dim, rng, zero_init=True)

    def __call__(self, x: Tensor) -> Tensor:
        b, l, d = x.shape
        h, dh = self.heads, self.dim // self.heads
        q = self.q_proj(x).reshape(b, l, h, dh).transpose(0, 2, 1, 3)
        k = self.k_proj(x).reshape(b, l, h, dh).transpose(0, 2, 1, 3)
        v = self.v_proj(x).reshape(b, l, h, dh).transpose(0, 2, 1, 3)
        attn = masked_softmax((q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh)))
        out = (attn @ v).transpose(0, 2, 1, 3).reshape(b, l, d)
        return self.out_proj(out)


class DenoiserBlock(Module):
    def __init__(self, cfg: DenoiserConfig, rng: np.random.Generator):
        d = cfg.dim
        self.norm_spatial = LayerNorm(d)
        self.spatial = BatchedSelfAttention(d, cfg.heads, rng)
        self.norm_temporal = LayerNorm(d)
        self.temporal = BatchedSelfAttention(d, cfg.heads, rng)
        self.norm_cross = LayerNorm(d)
        self.cross = MultiHeadAttention(d, cfg.heads, rng)
        self.norm_ffn = LayerNorm(d)
        self.ffn = FeedForward(d, cfg.ffn_expansion, rng)

    def __call__(self, x: Tensor, sem: Tensor, frames: int, hw: int) -> Tensor:
        d = x.shape[-1]
        x = x.reshape(frames, hw, d)
        x = x + self.spatial(self.norm_spatial(x))
        x = x.transpose(1, 0, 2)
        x = x + self.temporal(self.norm_temporal(x))
        x = x.transpose(1, 0, 2).reshape(frames * hw, d)
        x = x + self.cross(self.norm_cross(x), sem)
        return x + self.ffn(self.norm_ffn(x))


class Denoiser(Module):
    """Epsilon predictor over latent video clips, conditioned pointwise on the
    fused pixel condition and ray embedding and globally on semantic tokens."""

    def __init__(self, cfg: DenoiserConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.dim
        hw = cfg.latent_h * cfg.latent_w
        self.in_proj = Linear(2 * cfg.channels + 6, d, rng)
        self.pos_spatial = Tensor(uniform_init(rng, d, (hw, d)), requires_grad=True)
        self.time_proj = Linear(d, d, rng)
        self.sem_proj = Linear(cfg.sem_dim, d, rng)
        self.blocks = [DenoiserBlock(cfg, rng) for _ in range(cfg.blocks)]
        self.norm_out = LayerNorm(d)
        self.head = Linear(d, cfg.channels, rng, zero_init=True)

    def __call__(self, z_t: np.ndarray | Tensor, t: int, pixel_cond: Tensor,
                 plucker: np.ndarray, sem_tokens: Tensor) -> Tensor:
        cfg = self.cfg
        T, h, w, C = cfg.frames, cfg.latent_h, cfg.latent_w, cfg.channels
        hw = h * w
        if not isinstance(z_t, Tensor):
            z_t = Tensor(z_t)
        if z_t.shape != (T, h, w, C):
            raise ShapeError(f"latent shape {z_t.shape} != {(T, h, w, C)}")
        if pixel_cond.shape != (T, h, w, C):
            raise ShapeError(f"pixel condition shape {pixel_cond.shape} != {(T, h, w, C)}")
        if plucker.shape != (T, h, w, 6):
            raise ShapeError(f"ray embedding shape {plucker.shape} != {(T, h, w, 6)}")

        x = concat([z_t, pixel_cond, Tensor(np.asarray(plucker, dtype=np.float64))], axis=-1)
        x = self.in_proj(x.reshape(T * hw, 2 * C + 6))

        temb = self.time_proj(Tensor(sinusoidal_embedding(t, cfg.dim).reshape(1, -1)))
        femb = sinusoidal_embedding(np.arange(T, dtype=np.float64), cfg.dim)
        x = x + temb + Tensor(np.repeat(femb, hw, axis=0))
        x = x + concat([self.pos_spatial] * T, axis=0)

        sem = self.sem_proj(sem_tokens)
        for block in self.blocks:
            x = block(x, sem, T, hw)
        eps = self.head(self.norm_out(x))
        return eps.reshape(T, h, w, C)


# ---------------------------------------------------------------------------
# Conditioning plumbing
# ---------------------------------------------------------------------------

@dataclass
class ClipSample:
    """One training/eval clip with everything the conditioning paths need."""

    z0: np.ndarray                  # (T, h, w, C) target latents
    ref_image: np.ndarray           # (H, W, 3)
    text_ids: np.ndarray
    plucker: np.ndarray             # (T, h, w, 6)
    frame_indices: np.ndarray       # (T,) video frame indices of the clip
    ctx_images: np.ndarray | None = None   # (N, H, W, 3)
    ctx_latents: np.ndarray | None = None  # (N, h, w, C)
    ctx_frame_indices: np.ndarray | None = None
    mask: EpipolarMask | None = None


@dataclass
class ConditionSet:
    """Inputs to one denoiser evaluation."""

    pixel_cond: Tensor              # (T, h, w, C)
    sem_tokens: Tensor              # (M, sem_dim)
    plucker: np.ndarray             # (T, h, w, 6)


class ContextDiffusionModel(Module):
    """Context encoder + denoiser, with the ablation switches of the study grid."""

    def __init__(self, encoder: ContextEncoder, denoiser: Denoiser,
                 use_context: bool = True, use_mask: bool = True,
                 temporal: bool = True, streams: str = "both"):
        if streams not in ("both", "semantic", "visual"):
            raise ConfigError(f"unknown stream selection {streams!r}")
        self.encoder = encoder
        self.denoiser = denoiser
        self.use_context = use_context
        self.use_mask = use_mask
        self.temporal = temporal
        self.streams = streams

    def _ref_latent_broadcast(self, sample: ClipSample) -> np.ndarray:
        z_ref = sample.z0[0]
        return np.broadcast_to(z_ref, sample.z0.shape).copy()

    def conditions(self, sample: ClipSample, unconditional: bool = False) -> ConditionSet:
        enc = self.encoder
        z_ref = self._ref_latent_broadcast(sample)
        if unconditional:
            return ConditionSet(Tensor(z_ref), enc.null_semantic, sample.plucker)

        sem = enc.semantic
        use_ctx = self.use_context and sample.ctx_latents is not None
        f_ctx = None
        n_ctx = 0
        if use_ctx and self.streams in ("both", "semantic"):
            f_ctx = sem.context_tokens(sample.ctx_images, sample.ctx_frame_indices,
                                       temporal=self.temporal)
            n_ctx = len(sample.ctx_images)
        tokens = SemanticTokens(
            f_img=sem.image_tokens(sample.ref_image),
            f_txt=sem.text_tokens(sample.text_ids),
            f_ctx=f_ctx,
            num_context_frames=n_ctx,
        )
        f_sem = sem.encode(tokens)

        if use_ctx and self.streams in ("both", "visual"):
            mask = sample.mask if self.use_mask else None
            f_vis = enc.visual.encode(sample.ctx_latents, mask, sample.frame_indices,
                                      temporal=self.temporal)
            pixel_cond = enc.gate.fuse(z_ref, f_vis)
        else:
            pixel_cond = Tensor(z_ref)
        return ConditionSet(pixel_cond, f_sem, sample.plucker)

    def predict(self, z_t: np.ndarray | Tensor, t: int, cond: ConditionSet) -> Tensor:
        return self.denoiser(z_t, t, cond.pixel_cond, cond.plucker, cond.sem_tokens)

    def predict_cfg(self, z_t: np.ndarray, t: int, cond: ConditionSet,
                    uncond: ConditionSet, scale: float) -> np.ndarray:
        eps_c = self.predict(z_t, t, cond).data
        if scale == 1.0:
            return eps_c
        eps_u = self.predict(z_t, t, uncond).data
        return cfg_combine(eps_c, eps_u, scale)


# ---------------------------------------------------------------------------
# DDIM sampling
# ---------------------------------------------------------------------------

def ddim_timesteps(horizon: int, steps: int) -> np.ndarray:
    """Uniformly strided descending sub-schedule of [1, horizon]."""
    if steps < 1:
        raise ConfigError("need at least one sampling step")
    if steps > horizon:
        raise ConfigError(f"steps {steps} exceeds diffusion horizon {horizon}")
    ts = np.unique(np.round(np.linspace(1, horizon, steps)).astype(int))
    return ts[::-1]


def ddim_sample(model_fn, shape: tuple, schedule: NoiseSchedule, steps: int,
                seed: int = 0, x_init: np.ndarray | None = None,
                t_start: int | None = None) -> np.ndarray:
    """Deterministic DDIM (eta=0). ``model_fn(x, t) -> eps_hat`` as ndarray.

    With ``x_init``/``t_start`` the walk starts from a given noisy state
    instead of a seeded Gaussian at the full horizon.
    """
    horizon = schedule.horizon
    if t_start is None:
        t_start = horizon
    if not (1 <= t_start <= horizon):
        raise ConfigError(f"t_start={t_start} outside [1, {horizon}]")
    if x_init is None:
        x = np.random.default_rng(seed).standard_normal(shape)
    else:
        x = np.asarray(x_init, dtype=np.float64).copy()
    ts = ddim_timesteps(horizon, steps)
    ts = ts[ts <= t_start]
    if len(ts) == 0 or ts[0] != t_start:
        ts = np.concatenate([[t_start], ts[ts < t_start]])
    for i, t in enumerate(ts):
        t_prev = int(ts[i + 1]) if i + 1 < len(ts) else 0
        eps = np.asarray(model_fn(x, int(t)))
        ab_t = schedule.alpha_bar(int(t))
        ab_p = schedule.alpha_bar(t_prev)
        x0 = (x - math.sqrt(1.0 - ab_t) * eps) / math.sqrt(ab_t)
        x = math.sqrt(ab_p) * x0 + math.sqrt(1.0 - ab_p) * eps
    return x


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 500
    batch: int = 4
    lr: float = 1e-4
    loss: str = "log"  # "log" or "uniform"
    cond_dropout: float = 0.1
    freeze_backbone: bool = False
    seed: int = 0
    # reuse one (t, eps) draw per dataset index: the single-clip overfit
    # smoke-test regime, where the memorization target is deterministic
    fixed_draw: bool = False

    def __post_init__(self):
        if self.loss not in ("log", "uniform"):
            raise ConfigError(f"unknown loss {self.loss!r}")


def trainable_parameters(model: ContextDiffusionModel, freeze_backbone: bool) -> dict:
    params = model.parameters()
    if freeze_backbone:
        params = {k: v for k, v in params.items() if k.startswith("encoder.")}
    return params


def train(model: ContextDiffusionModel, dataset: list[ClipSample], cfg: TrainConfig,
          schedule: NoiseSchedule, trace_path=None) -> list[tuple[int, float, float]]:
    """Optimize the model on clip samples; returns (step, loss, loss_weighted) rows.

    Aborts with TrainingDivergedError if the loss goes non-finite.
    """
    if not dataset:
        raise ConfigError("dataset is empty")
    rng = np.random.default_rng(cfg.seed)
    params = trainable_parameters(model, cfg.freeze_backbone)
    opt = Adam(params, lr=cfg.lr)
    fixed = None
    if cfg.fixed_draw:
        fixed = [(int(rng.integers(1, schedule.horizon + 1)),
                  rng.standard_normal(s.z0.shape)) for s in dataset]
    trace = []
    for step in range(cfg.steps):
        total = None
        uni_val = 0.0
        log_val = 0.0
        for _ in range(cfg.batch):
            i = int(rng.integers(0, len(dataset)))
            sample = dataset[i]
            if fixed is not None:
                t, eps = fixed[i]
            else:
                t = int(rng.integers(1, schedule.horizon + 1))
                eps = rng.standard_normal(sample.z0.shape)
            z_t = forward_noising(sample.z0, t, eps, schedule)
            drop = rng.random() < cfg.cond_dropout
            try:
                cond = model.conditions(sample, unconditional=drop)
                eps_hat = model.predict(z_t, t, cond)
            except FloatingPointError as exc:
                raise TrainingDivergedError(f"forward pass diverged at step {step}: {exc}")
            per_frame = per_frame_squared_error(eps, eps_hat)
            loss = loss_log_weighted(per_frame) if cfg.loss == "log" else per_frame.mean()
            total = loss if total is None else total + loss
            uni_val += per_frame.data.mean()
            log_val += loss_log_weighted(per_frame.data)
        total = total * (1.0 / cfg.batch)
        if not np.isfinite(total.data):
            raise TrainingDivergedError(f"loss became non-finite at step {step}")
        opt.zero_grad()
        total.backward()
        opt.step()
        trace.append((step, uni_val / cfg.batch, log_val / cfg.batch))
    if trace_path is not None:
        with open(trace_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss", "loss_weighted"])
            for row in trace:
                writer.writerow([row[0], repr(row[1]), repr(row[2])])
    return trace
