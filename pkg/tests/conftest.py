import numpy as np
import pytest

from contextvid.diffusion import ClipSample, ContextDiffusionModel, Denoiser, DenoiserConfig
from contextvid.encoder import ContextEncoder, EncoderConfig


TINY_ENC = EncoderConfig(
    latent_h=4, latent_w=4, latent_channels=4, frames=4,
    vis_dim=8, vis_layers=1, vis_heads=2,
    sem_dim=8, sem_queries=4, sem_layers=1, sem_heads=2,
    sem_patch=4, image_size=8, vocab_size=12, temb_dim=4,
)

TINY_DEN = DenoiserConfig(
    frames=4, latent_h=4, latent_w=4, channels=4,
    dim=8, heads=2, blocks=1, ffn_expansion=2, sem_dim=8,
)


def build_tiny_model(seed: int = 0, **flags) -> ContextDiffusionModel:
    rng = np.random.default_rng(seed)
    encoder = ContextEncoder(TINY_ENC, rng)
    denoiser = Denoiser(TINY_DEN, rng)
    return ContextDiffusionModel(encoder, denoiser, **flags)


def unzero_residuals(module, seed: int = 1000, scale: float = 0.2):
    """Give all zero-initialized residual projections real weights."""
    rng = np.random.default_rng(seed)
    for name, p in module.parameters().items():
        zeroish = ("out_proj.weight" in name or "fc2.weight" in name
                   or name.endswith("head.weight"))
        if zeroish and not np.any(p.data):
            p.data = rng.normal(size=p.data.shape) * scale


def make_clip_sample(seed: int = 0, n_ctx: int = 1) -> ClipSample:
    rng = np.random.default_rng(seed)
    T, h, w, C = TINY_DEN.frames, TINY_DEN.latent_h, TINY_DEN.latent_w, TINY_DEN.channels
    hw = h * w
    return ClipSample(
        z0=rng.standard_normal((T, h, w, C)),
        ref_image=rng.random((8, 8, 3)),
        text_ids=np.array([1, 3, 5]),
        plucker=rng.standard_normal((T, h, w, 6)),
        frame_indices=np.arange(T),
        ctx_images=rng.random((n_ctx, 8, 8, 3)),
        ctx_latents=rng.standard_normal((n_ctx, h, w, C)),
        ctx_frame_indices=np.arange(T, T + n_ctx),
        mask=None,
    )


@pytest.fixture
def tiny_model():
    return build_tiny_model(0)
