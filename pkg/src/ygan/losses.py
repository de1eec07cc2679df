"""Training objectives: SSIM, photometric reconstruction, generator and discriminator losses."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

SSIM_MODES = ("dssim", "paper_literal")
GAN_MODES = ("paper", "nonsaturating")


@dataclass(frozen=True)
class LossConfig:
    """Loss switches and constants.

    ``ssim_mode="dssim"`` adds (1 - SSIM) / 2 to the L1 term so that lower
    is better; ``"paper_literal"`` adds raw SSIM exactly as written in the
    original objective. ``gan_mode="paper"`` is the saturating
    log(1 - D(fake)) generator term, ``"nonsaturating"`` uses -log D(fake).
    """

    ssim_mode: str = "dssim"
    gan_mode: str = "nonsaturating"
    lambda_gan: float = 1.0
    c1: float = 0.01**2
    c2: float = 0.03**2
    prob_eps: float = 1e-6

    def __post_init__(self):
        if self.ssim_mode not in SSIM_MODES:
            raise ValueError(f"ssim_mode must be one of {SSIM_MODES}")
        if self.gan_mode not in GAN_MODES:
            raise ValueError(f"gan_mode must be one of {GAN_MODES}")
        if not np.isfinite(self.lambda_gan) or self.lambda_gan < 0:
            raise ValueError("lambda_gan must be finite and non-negative")
        if self.c1 <= 0 or self.c2 <= 0 or not 0 < self.prob_eps < 0.5:
            raise ValueError("loss constants must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def _const(value: float, like: Tensor) -> Tensor:
    return Tensor(np.full(like.shape, value, dtype=like.dtype))


def ssim_map(a: Tensor, b: Tensor, cfg: LossConfig = LossConfig()) -> Tensor:
    """Per-position SSIM from 3x3 box statistics, shape [B,C,H-2,W-2]."""
    if a.shape != b.shape:
        raise ValueError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if a.data.ndim != 4 or a.shape[2] < 3 or a.shape[3] < 3:
        raise ValueError(f"ssim: images must be [B,C,H,W] with H,W >= 3, got {a.shape}")
    pool = dc.avg_pool3x3_valid
    mu_a, mu_b = pool(a), pool(b)
    mu_aa, mu_bb, mu_ab = dc.mul(mu_a, mu_a), dc.mul(mu_b, mu_b), dc.mul(mu_a, mu_b)
    var_a = dc.sub(pool(dc.mul(a, a)), mu_aa)
    var_b = dc.sub(pool(dc.mul(b, b)), mu_bb)
    cov = dc.sub(pool(dc.mul(a, b)), mu_ab)
    num = dc.mul(dc.scale_shift(mu_ab, 2.0, cfg.c1), dc.scale_shift(cov, 2.0, cfg.c2))
    den = dc.mul(
        dc.scale_shift(dc.add(mu_aa, mu_bb), 1.0, cfg.c1),
        dc.scale_shift(dc.add(var_a, var_b), 1.0, cfg.c2),
    )
    return dc.div(num, den)


def _eroded(mask: Tensor) -> Tensor:
    """Positions whose whole 3x3 window is valid, on the valid-pooling grid."""
    win = np.lib.stride_tricks.sliding_window_view(mask.data, (3, 3), axis=(2, 3)).min(axis=(4, 5))
    return Tensor(win.astype(mask.dtype))


def ssim(a: Tensor, b: Tensor, cfg: LossConfig = LossConfig(), mask: Optional[Tensor] = None) -> Tensor:
    """Mean SSIM over channels and valid window positions (scalar in [-1, 1]).

    With ``mask``, both images are zeroed outside it and only windows lying
    entirely inside it are averaged.
    """
    if mask is None:
        return dc.reduce_mean(ssim_map(a, b, cfg))
    a = dc.mul(a, _broadcast_mask(mask, a))
    b = dc.mul(b, _broadcast_mask(mask, b))
    return dc.reduce_mean(ssim_map(a, b, cfg), _eroded(mask))


def _broadcast_mask(mask: Tensor, like: Tensor) -> Tensor:
    return Tensor(np.ascontiguousarray(np.broadcast_to(mask.data, like.shape)).astype(like.dtype))


def reconstruction_loss(real: Tensor, recon: Tensor, mask: Optional[Tensor] = None, cfg: LossConfig = LossConfig()) -> Tensor:
    """Masked per-pixel L1 plus an SSIM term, averaged over valid pixels and channels."""
    if real.shape != recon.shape:
        raise ValueError(f"reconstruction_loss: shape mismatch {real.shape} vs {recon.shape}")
    if mask is None:
        mask = Tensor(np.ones((real.shape[0], 1) + real.shape[2:], dtype=real.dtype))
    if not np.any(mask.data):
        raise ValueError("reconstruction_loss: empty mask")
    full = _broadcast_mask(mask, real)
    l1 = dc.reduce_mean(dc.abs_diff(dc.mul(real, full), dc.mul(recon, full)), mask)
    s = ssim(real, recon, cfg, mask)
    if cfg.ssim_mode == "dssim":
        term = dc.scale_shift(s, -0.5, 0.5)
    else:
        term = s
    return dc.add(l1, term)


def _safe_log(p: Tensor, cfg: LossConfig) -> Tensor:
    return dc.log(dc.clamp(p, cfg.prob_eps, 1.0 - cfg.prob_eps))


def _safe_log1m(p: Tensor, cfg: LossConfig) -> Tensor:
    return dc.log(dc.scale_shift(dc.clamp(p, cfg.prob_eps, 1.0 - cfg.prob_eps), -1.0, 1.0))


def generator_loss(dL_fake: Tensor, dR_fake: Tensor, recon_L: Tensor, recon_R: Tensor, cfg: LossConfig = LossConfig()) -> Tensor:
    """Adversarial terms for both discriminators plus both reconstruction losses.

    Probabilities may be per batch item; the adversarial terms are averaged
    over the batch.
    """
    if cfg.gan_mode == "paper":
        adv = dc.add(dc.reduce_mean(_safe_log1m(dL_fake, cfg)), dc.reduce_mean(_safe_log1m(dR_fake, cfg)))
        adv = dc.scale_shift(adv, cfg.lambda_gan, 0.0)
    else:
        adv = dc.add(dc.reduce_mean(_safe_log(dL_fake, cfg)), dc.reduce_mean(_safe_log(dR_fake, cfg)))
        adv = dc.scale_shift(adv, -cfg.lambda_gan, 0.0)
    return dc.add(adv, dc.add(recon_L, recon_R))


def discriminator_loss(d_real: Tensor, d_fake: Tensor, cfg: LossConfig = LossConfig()) -> Tensor:
    """Binary cross-entropy: -log D(real) - log(1 - D(fake)), batch-averaged."""
    real_term = dc.reduce_mean(_safe_log(d_real, cfg))
    fake_term = dc.reduce_mean(_safe_log1m(d_fake, cfg))
    return dc.scale_shift(dc.add(real_term, fake_term), -1.0, 0.0)
