"""
Training and evaluation
=======================

A few hundred steps on a small synthetic set, then guided sampling and
metrics against the step-0 model.  The full desk run (3000 steps on 1000
scenes) is what the acceptance tests use; this is the quick version.
"""

# %%
import logging
import sys

import numpy as np

from objcompose import TrainConfig, synthesize, train
from objcompose.evaluation import generate_images, l1_metric, outside_box_psnr
from objcompose.sampler import SamplerSchedule
from objcompose.training import init_state

logging.basicConfig(level=logging.INFO)
steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300

train_set = synthesize(200, seed=0)
eval_set = synthesize(8, seed=1)
cfg = TrainConfig(steps=steps, log_every=50)
state = train(cfg, samples=train_set)

# %% Compare the trained EMA weights with an untrained model on held-out scenes.
sched = SamplerSchedule(ddim_steps=25)
untrained = init_state(cfg, codec=state.codec)
for name, s in (("step 0", untrained), (f"step {steps}", state)):
    imgs = generate_images(s, eval_set, sched, seed=0)
    print(name,
          "outside-box PSNR %.2f" % np.mean([outside_box_psnr(g, e.hint_image, e.box) for g, e in zip(imgs, eval_set)]),
          "L1 %.4f" % np.mean([l1_metric(g, e.target_image) for g, e in zip(imgs, eval_set)]))
