"""
Condition vector and masked denoiser
====================================

The conditions collector turns four inputs into one vector ``c``: source
latent patches, the box visualisation tokens, and source plus hint tokens.
The denoiser is a stack of adaLN-Zero blocks; during training a fraction of
its input tokens is hidden from the encoder and restored by a side
interpolator before the decoder blocks.
"""

# %%
import torch

from objcompose import CCNetConfig, ConditionsCollector, ModelConfig, build_denoiser, count_params

cc = ConditionsCollector(CCNetConfig())
print("fusion over", cc.config.fusion_length, "tokens")
c = cc(torch.randn(2, 4, 16, 16), torch.randn(2, 65, 64), torch.randn(2, 65, 64), torch.randn(2, 65, 64))
print("condition", tuple(c.shape))

# %% Zero-initialised gates make the untrained denoiser predict exactly zero.
net = build_denoiser(ModelConfig())
y = torch.randn(2, 8, 16, 16)
t = torch.tensor([10, 900])
print("max |eps| at init:", net.forward_full(y, t, c.detach()).abs().max().item())

# %% Masked pass: the encoder runs on 70% of the 64 tokens.
eps, spec = net.forward_masked(y, t, c.detach(), ratio=0.3, return_spec=True)
print("encoder tokens", net.last_encoder_length, "masked", spec.num_masked)

# %% Parameter budget at desk and at full scale.
print("desk", count_params(ModelConfig())["total"])
print("full", count_params(ModelConfig.paper_scale())["total"])
