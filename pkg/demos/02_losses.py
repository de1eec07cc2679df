"""
The Y-GAN losses by hand
========================

Reconstruction (L1 + SSIM) and the adversarial terms, evaluated on small
arrays so the numbers can be checked with a pencil.
"""

# %%
import math

import numpy as np

from ygan.diffcore import Tensor, backward
from ygan.losses import LossConfig, discriminator_loss, generator_loss, reconstruction_loss, ssim

rng = np.random.default_rng(0)
a = Tensor(rng.random((1, 3, 8, 8)))
b = Tensor(rng.random((1, 3, 8, 8)))

# %% SSIM: 1 for identical images, near 0 for unrelated ones
print("ssim(a, a) =", ssim(a, a).item())
print("ssim(a, b) =", round(ssim(a, b).item(), 4))

# %% Two SSIM modes. dssim adds (1 - SSIM)/2 (zero at a perfect match),
# paper_literal adds SSIM itself exactly as the equation is written
for mode in ("dssim", "paper_literal"):
    cfg = LossConfig(ssim_mode=mode)
    print(mode, "identical:", reconstruction_loss(a, a, None, cfg).item(), " different:", round(reconstruction_loss(a, b, None, cfg).item(), 4))

# %% Generator adversarial term at D = 0.5
zero = Tensor(np.array(0.0))
half = Tensor(np.array(0.5))
print("paper:", generator_loss(half, half, zero, zero, LossConfig(gan_mode="paper")).item(), "=", 2 * math.log(0.5))
print("nonsaturating:", generator_loss(half, half, zero, zero, LossConfig(gan_mode="nonsaturating")).item())

# %% Discriminator loss is binary cross-entropy on real vs fake
print("confident D:", round(discriminator_loss(Tensor(np.array(0.9)), Tensor(np.array(0.1))).item(), 5))

# %% Every loss is differentiable; gradients land on the leaves
x = Tensor(rng.random((1, 3, 8, 8)), requires_grad=True)
loss = reconstruction_loss(a, x, None, LossConfig())
backward(loss)
print("grad norm:", float(np.linalg.norm(x.grad)))
