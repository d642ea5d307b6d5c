"""Image-quality metrics: SSIM, PSNR and MSE on [0, 1] images."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence, Tuple

import numpy as np

K1, K2 = 0.01, 0.03
WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5


def ssim_constants(data_range: float = 1.0) -> Tuple[float, float]:
    return (K1 * data_range) ** 2, (K2 * data_range) ** 2


def window_size_for(shape: Sequence[int], size: int = WINDOW_SIZE) -> int:
    """Largest odd window <= ``size`` that fits inside the image."""
    side = min(size, *shape[-2:])
    return side if side % 2 else side - 1


def gaussian_window_1d(size: int = WINDOW_SIZE, sigma: float = WINDOW_SIGMA) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable Gaussian, valid region only
    k = g.size
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=-2) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=-1) @ g


def _check_pair(x, y, name: str):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"{name}: shape mismatch {x.shape} vs {y.shape}")
    return x, y


def ssim(x, y, windowed: bool = True, data_range: float = 1.0) -> float:
    """Structural similarity of two images.

    ``windowed=True`` averages the SSIM map over every position of an 11x11
    Gaussian window (sigma 1.5, shrunk for images smaller than 11 pixels);
    ``windowed=False`` applies the formula once with whole-image statistics.
    """
    x, y = _check_pair(x, y, "ssim")
    c1, c2 = ssim_constants(data_range)
    if not windowed:
        mx, my = x.mean(), y.mean()
        vx, vy = x.var(), y.var()
        cxy = ((x - mx) * (y - my)).mean()
        return float(
            ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2))
        )
    g = gaussian_window_1d(window_size_for(x.shape))
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    vx = _filter_valid(x * x, g) - mx * mx
    vy = _filter_valid(y * y, g) - my * my
    cxy = _filter_valid(x * y, g) - mx * my
    smap = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return float(smap.mean())


def mse(x, y) -> float:
    x, y = _check_pair(x, y, "mse")
    return float(np.mean((x - y) ** 2))


def psnr_from_mse(err: float, max_value: float = 1.0) -> float:
    if max_value <= 0:
        raise ValueError(f"max_value must be positive, got {max_value}")
    if err < 0:
        raise ValueError(f"mse must be non-negative, got {err}")
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(max_value**2 / err)


def psnr(x, y, max_value: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``math.inf`` when the images are identical."""
    return psnr_from_mse(mse(x, y), max_value)


@dataclass
class MetricReport:
    ssim: float
    psnr: float
    mse: float
    n_images: int
    n_psnr_infinite: int = 0

    def __post_init__(self):
        if (self.mse == 0.0) != math.isinf(self.psnr):
            raise ValueError("mse == 0 must coincide with an infinite psnr")

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    def to_json(self) -> str:
        d = asdict(self)
        # JSON has no infinity literal
        d["psnr"] = "inf" if math.isinf(self.psnr) else self.psnr
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        d = json.loads(text)
        d["psnr"] = math.inf if d["psnr"] == "inf" else float(d["psnr"])
        return cls(**d)


def evaluate_set(pairs: Iterable[Tuple[np.ndarray, np.ndarray]]) -> MetricReport:
    """Mean windowed SSIM, PSNR and MSE of (restored, reference) pairs.

    Infinite PSNRs are excluded from the PSNR mean and counted separately;
    if every pair is identical the mean PSNR is infinite.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("evaluate_set needs at least one (restored, reference) pair")
    ssims, psnrs, mses = [], [], []
    for restored, reference in pairs:
        ssims.append(ssim(restored, reference))
        mses.append(mse(restored, reference))
        psnrs.append(psnr(restored, reference))
    # fsum is exactly rounded, so the means do not depend on pair order
    finite = [p for p in psnrs if not math.isinf(p)]
    n_inf = len(psnrs) - len(finite)
    mean_psnr = math.fsum(finite) / len(finite) if finite else math.inf
    mean_mse = math.fsum(mses) / len(mses)
    if mean_mse == 0.0:
        mean_psnr = math.inf
    return MetricReport(
        ssim=math.fsum(ssims) / len(ssims),
        psnr=mean_psnr,
        mse=mean_mse,
        n_images=len(pairs),
        n_psnr_infinite=n_inf,
    )
