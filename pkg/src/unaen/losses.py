"""Training objectives built from tape operations.

All image tensors are [N, C, H, W]. ``form`` selects between the literal
mean-of-sqrt-of-square adversarial terms (``"sqrt"``, i.e. mean |D - 1|) and
the least-squares reading (``"squared"``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor
from .metrics import gaussian_window_1d, ssim_constants, window_size_for

FORMS = ("sqrt", "squared")


@dataclass
class LossWeights:
    lambda_ssim: float = 0.5
    lambda_ge_adv: float = 0.1
    lambda_gr_adv: float = 0.1

    def __post_init__(self):
        for name in ("lambda_ssim", "lambda_ge_adv", "lambda_gr_adv"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


def _same_shape(x: Tensor, y: Tensor, name: str) -> None:
    if x.shape != y.shape:
        raise DimensionError(f"{name}: shape mismatch {x.shape} vs {y.shape}")


def l1_loss(x: Tensor, y: Tensor) -> Tensor:
    _same_shape(x, y, "l1_loss")
    return ad.reduce_abs_mean(x, y)


def _gauss_filter(t: Tensor, g: Tensor, gt: Tensor) -> Tensor:
    return ad.conv2d(ad.conv2d(t, g), gt)


def ssim_per_image(x: Tensor, y: Tensor, data_range: float = 1.0) -> Tensor:
    """Windowed SSIM of each image in the batch, shape [N].

    Uses the same Gaussian window and constants as :func:`metrics.ssim`;
    multi-channel images average their per-channel maps.
    """
    _same_shape(x, y, "ssim")
    if x.ndim != 4:
        raise DimensionError(f"ssim: expected [N, C, H, W], got {x.shape}")
    n, c, h, w = x.shape
    if c != 1:
        x = x.reshape(n * c, 1, h, w)
        y = y.reshape(n * c, 1, h, w)
    k = window_size_for(x.shape)
    win = gaussian_window_1d(k)
    g = Tensor(win.reshape(1, 1, k, 1), dtype=x.dtype)
    gt = Tensor(win.reshape(1, 1, 1, k), dtype=x.dtype)
    c1, c2 = ssim_constants(data_range)

    mx = _gauss_filter(x, g, gt)
    my = _gauss_filter(y, g, gt)
    mx2, my2, mxy = ad.square(mx), ad.square(my), mx * my
    vx = _gauss_filter(ad.square(x), g, gt) - mx2
    vy = _gauss_filter(ad.square(y), g, gt) - my2
    cxy = _gauss_filter(x * y, g, gt) - mxy
    num = (2.0 * mxy + c1) * (2.0 * cxy + c2)
    den = (mx2 + my2 + c1) * (vx + vy + c2)
    smap = ad.div(num, den)
    per = ad.reduce_mean(smap, axis=(1, 2, 3))
    if c != 1:
        per = ad.reduce_mean(per.reshape(n, c), axis=1)
    return per


def ssim_loss(x: Tensor, y: Tensor) -> Tensor:
    """mean over images of |1 - SSIM(x, y)^2|."""
    s = ssim_per_image(x, y)
    return ad.reduce_mean(ad.absolute(1.0 - ad.square(s)))


def _check_form(form: str) -> None:
    if form not in FORMS:
        raise ValueError(f"form must be one of {FORMS}, got {form!r}")


def _deviation(scores: Tensor, target: float, form: str) -> Tensor:
    diff = scores - target
    if form == "squared":
        return ad.reduce_mean(ad.square(diff))
    return ad.reduce_mean(ad.sqrt(ad.square(diff)))


def adv_loss_generator(scores: Tensor, form: str = "sqrt") -> Tensor:
    """Push discriminator scores on generated images towards 1."""
    _check_form(form)
    return _deviation(scores, 1.0, form)


def adv_loss_discriminator(real_scores: Tensor, fake_scores: Tensor, form: str = "squared") -> Tensor:
    """Least-squares style: 0.5 * (dev(D(real), 1) + dev(D(fake), 0))."""
    _check_form(form)
    return 0.5 * (_deviation(real_scores, 1.0, form) + _deviation(fake_scores, 0.0, form))


def cycle_loss(xa: Tensor, xa_restored: Tensor, w: LossWeights = LossWeights()) -> Tensor:
    _same_shape(xa, xa_restored, "cycle_loss")
    loss = l1_loss(xa, xa_restored)
    if w.lambda_ssim:
        loss = loss + w.lambda_ssim * ssim_loss(xa, xa_restored)
    return loss


def total_generator_loss(
    ge_scores: Tensor,
    gr_scores: Tensor,
    xa: Tensor,
    xa_restored: Tensor,
    w: LossWeights = LossWeights(),
    form: str = "sqrt",
) -> Tensor:
    """Weighted adversarial terms for both generators plus the cycle term."""
    loss = cycle_loss(xa, xa_restored, w)
    loss = loss + w.lambda_ge_adv * adv_loss_generator(ge_scores, form)
    loss = loss + w.lambda_gr_adv * adv_loss_generator(gr_scores, form)
    return loss
