"""
Latent codec
============

Images are compressed 4x per side into 4 latent channels.  The block codec is
a fixed orthonormal projection of each 4x4 cell; the learned codec is a small
conv autoencoder.
"""

# %%
import numpy as np
import torch

from objcompose import CodecConfig, fit_codec, synthesize
from objcompose.evaluation import psnr
from objcompose.training import images_to_tensor

scenes = synthesize(64, seed=0)
x = images_to_tensor([s.target_image for s in scenes])

# %% Block codec: nothing to optimise, only the latent scale is measured.
block = fit_codec(x, CodecConfig(mode="block"))
z = block.encode(x)
print("latent", tuple(z.shape), "std", round(z.std().item(), 3))

# %% Backgrounds are constant over each cell, so they survive the round trip exactly;
# the object interior loses detail.
r = ((block.decode(z).clamp(-1, 1) + 1) / 2).permute(0, 2, 3, 1).numpy()
print("block PSNR", np.mean([psnr(a, s.target_image) for a, s in zip(r, scenes)]))

# %% A short learned fit (the default 1500 steps reaches about 25 dB on held-out scenes).
learned = fit_codec(x, CodecConfig(mode="learned", steps=100))
with torch.no_grad():
    r = ((learned.decode(learned.encode(x)).clamp(-1, 1) + 1) / 2).permute(0, 2, 3, 1).numpy()
print("learned PSNR after 100 steps", np.mean([psnr(a, s.target_image) for a, s in zip(r, scenes)]))
