"""
Training on four scenes
=======================

A short alternating run: D_L and D_R learn to spot warped views, G learns a
disparity map that makes the warps match the real side images.
"""

# %%
import tempfile

import numpy as np

from ygan.synthgen import SceneConfig, generate_records
from ygan.trainer import TrainConfig, load_checkpoint, train
from ygan.warp import CameraRig

rig = CameraRig.centered()
records = generate_records(4, rig, SceneConfig(), 1)

# %% 60 steps is enough to watch the reconstruction loss fall
out = tempfile.mkdtemp()
cfg = TrainConfig(steps=60, seed=1, out_dir=out, checkpoint_every=30, log_every=20)
ck, rows = train(cfg, records)

recon = np.array([r["loss_l"] + r["loss_r"] for r in rows])
print("L_L + L_R, first 10 steps:", recon[:10].mean().round(4), " last 10:", recon[-10:].mean().round(4))

# %% Everything needed to resume lives in the checkpoint
again = load_checkpoint(f"{out}/checkpoints/step_000030")
print("restored step", again.step, "adam t", again.opt.G.t, "rig", again.rig.width, "x", again.rig.height)

# %% Resuming for the remaining 30 steps reproduces the original losses
rest = TrainConfig.from_dict({**cfg.to_dict(), "steps": 30, "out_dir": None})
_, tail = train(rest, records, resume_from=f"{out}/checkpoints/step_000030")
print("max |difference|:", max(abs(a["loss_g"] - b["loss_g"]) for a, b in zip(tail, rows[30:])))
