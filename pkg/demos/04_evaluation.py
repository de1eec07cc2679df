"""
Depth metrics
=============

abs_rel, rmse and delta < 1.25 against ground truth, for toy predictions and
for an untrained generator.
"""

# %%
import numpy as np

from ygan.nets import init_params
from ygan.synthgen import SceneConfig, generate_records
from ygan.trainer import depth_metrics, evaluate, predict_depth
from ygan.warp import CameraRig

gt = np.arange(5.0, 51.0)

# %% Perfect, 25% too far (just outside delta1) and twice too far
for name, pred in (("perfect", gt), ("x1.25", 1.25 * gt), ("x2", 2 * gt)):
    m = depth_metrics(pred, gt)
    print(f"{name:8s} abs_rel {m['abs_rel']:.3f}  rmse {m['rmse']:.2f}  delta1 {m['delta1']:.2f}")

# %% An untrained generator is nowhere near the truth
rig = CameraRig.centered()
records = generate_records(4, rig, SceneConfig(), 2)
models = init_params(0)
depth = predict_depth(models, records[0].center, rig, d_max=0.2 * rig.width)
print("predicted depth range:", depth.min().round(2), depth.max().round(2))

# %% Full report, with and without the occlusion mask
for masked in (False, True):
    rep = evaluate(models, records, occlusion_masked=masked)
    print("masked" if masked else "full  ", {k: round(rep[k], 3) for k in ("abs_rel", "rmse", "delta1")}, "pixels", rep["n_pixels"])
