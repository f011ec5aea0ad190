"""Train the context-conditioned latent diffusion model on a few toy clips.

Renders a handful of orbiting-camera clips, fits the patch codec, trains for
a short while, then DDIM-samples one clip and writes the decoded frames as
PPM images. Expect blurry blobs — the point is the moving loss, not art.
"""

from pathlib import Path

import numpy as np

from contextvid.diffusion import (
    ContextDiffusionModel,
    Denoiser,
    DenoiserConfig,
    TrainConfig,
    build_schedule,
    ddim_sample,
    train,
)
from contextvid.encoder import ContextEncoder, EncoderConfig
from contextvid.harness import (
    build_dataset,
    default_intrinsics,
    write_ppm,
)
from contextvid.nn import PatchCodec

out = Path(__file__).parent / "out"
out.mkdir(exist_ok=True)

K = default_intrinsics(32, 32)
codec = PatchCodec(patch=4, channels=8, rng=np.random.default_rng(0))

print("building 6 clips (orbit trajectories, one context frame each)...")
dataset = build_dataset(range(6), codec, K, 8, 8, trajectory="orbit",
                        strategy="range_after_end", frames=8, delta=1.5)

enc_cfg = EncoderConfig(latent_h=8, latent_w=8, latent_channels=8, frames=8,
                        vis_dim=16, sem_dim=16, sem_queries=8, sem_patch=8,
                        image_size=32, temb_dim=8)
den_cfg = DenoiserConfig(frames=8, latent_h=8, latent_w=8, channels=8,
                         dim=32, heads=2, blocks=1, sem_dim=16)
rng = np.random.default_rng(0)
model = ContextDiffusionModel(ContextEncoder(enc_cfg, rng), Denoiser(den_cfg, rng))

schedule = build_schedule()
trace = train(model, dataset, TrainConfig(steps=120, batch=2, lr=1e-3),
              schedule=schedule)
print(f"loss: {trace[0][1]:.4f} -> {trace[-1][1]:.4f} over {len(trace)} steps")

sample = dataset[0]
cond = model.conditions(sample)
z = ddim_sample(lambda x, t: model.predict(x, t, cond).data,
                sample.z0.shape, schedule, steps=25, seed=0)
for i, zi in enumerate(z):
    write_ppm(np.clip(codec.decode(zi), 0, 1), out / f"sampled{i:02d}.ppm")
print(f"wrote {len(z)} sampled frames to {out}")
