"""Motion-artifact simulation by k-space line splicing.

A clean image is rotated by a few small in-plane angles, every version is
moved to k-space, and blocks of phase-encode lines (rows) of the clean
k-space are periodically replaced with lines from the rotated versions,
walking outward from the centre. The inverse FFT of the spliced k-space is
the motion-corrupted image.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

CLEAN = -1  # provenance mask value for lines kept from the clean k-space


@dataclass(frozen=True)
class MotionSpec:
    """One simulated motion pattern.

    ``ts_eg`` motion-free echo groups alternate with ``corrupt_eg`` corrupted
    ones, so the corrupted line fraction tends to corrupt_eg / (corrupt_eg + ts_eg).

    ``onset`` places the first motion event. With ``"center"`` the first
    ``ts_eg`` echo groups around the k-space centre are always clean. With
    ``"random"`` the length of that first clean block is drawn per image from
    1..ts_eg, so the centre echo group stays clean while the expected
    corrupted fraction equals the nominal ratio even on short line counts.
    """

    ts_eg: int = 3
    eg_size: int = 10
    corrupt_eg: int = 9
    angles_deg: Tuple[float, ...] = (5.0, -5.0)
    ordering: str = "center-out"
    onset: str = "random"

    def __post_init__(self):
        if self.eg_size < 1 or self.ts_eg < 1 or self.corrupt_eg < 1:
            raise ValueError(
                f"eg_size, ts_eg and corrupt_eg must all be >= 1, got "
                f"{self.eg_size}, {self.ts_eg}, {self.corrupt_eg}"
            )
        if self.ordering != "center-out":
            raise ValueError(f"unsupported line ordering {self.ordering!r}")
        if self.onset not in ("random", "center"):
            raise ValueError(f"onset must be 'random' or 'center', got {self.onset!r}")
        object.__setattr__(self, "angles_deg", tuple(float(a) for a in self.angles_deg))
        if not self.angles_deg:
            raise ValueError("angles_deg must name at least one rotation")

    @property
    def asymptotic_fraction(self) -> float:
        return self.corrupt_eg / (self.corrupt_eg + self.ts_eg)

    def to_dict(self) -> dict:
        return {
            "ts_eg": self.ts_eg,
            "eg_size": self.eg_size,
            "corrupt_eg": self.corrupt_eg,
            "angles_deg": list(self.angles_deg),
            "ordering": self.ordering,
            "onset": self.onset,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MotionSpec":
        d = dict(d)
        if "angles_deg" in d:
            d["angles_deg"] = tuple(d["angles_deg"])
        return cls(**d)


# ---------------------------------------------------------------------------
# Fourier transforms
# ---------------------------------------------------------------------------


def fft2(img: np.ndarray) -> np.ndarray:
    """Centred, orthonormal 2-D DFT (DC lands at [H//2, W//2])."""
    img = np.asarray(img, dtype=np.complex128)
    return np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(img), norm="ortho"))


def ifft2(k: np.ndarray) -> np.ndarray:
    """Exact inverse of :func:`fft2`."""
    k = np.asarray(k, dtype=np.complex128)
    return np.fft.fftshift(np.fft.ifft2(np.fft.ifftshift(k), norm="ortho"))


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------


def rotate(img: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate about the array centre with bilinear interpolation and zero fill.

    Positive angles turn the image counter-clockwise as displayed (row 0 at
    the top).
    """
    img = np.asarray(img, dtype=np.float64)
    if angle_deg == 0:
        return img.copy()
    coords = _rotation_coords(img.shape[0], img.shape[1], float(angle_deg))
    return ndimage.map_coordinates(img, coords, order=1, mode="constant", cval=0.0)


@functools.lru_cache(maxsize=16)
def _rotation_coords(h: int, w: int, angle_deg: float) -> np.ndarray:
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    t = math.radians(angle_deg)
    c, s = math.cos(t), math.sin(t)
    # snap so that quarter turns land exactly on grid points
    c, s = round(c, 15), round(s, 15)
    # inverse map: output (r, q) samples input at R(-t) applied about the centre
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = rows - cy, cols - cx
    coords = np.stack([cy + c * dy + s * dx, cx - s * dy + c * dx])
    coords.flags.writeable = False
    return coords


def line_order_center_out(height: int) -> np.ndarray:
    """Row indices sorted by |row - height/2|, lower index first on ties."""
    if height < 1:
        raise ValueError(f"height must be >= 1, got {height}")
    # compare 2*|row - height/2| to stay in integers
    return np.array(sorted(range(height), key=lambda r: (abs(2 * r - height), r)), dtype=np.int64)


# ---------------------------------------------------------------------------
# splicing
# ---------------------------------------------------------------------------


def corruption_schedule(height: int, spec: MotionSpec, lead_eg: Optional[int] = None) -> np.ndarray:
    """Per-row corrupted-block number, or CLEAN.

    Echo groups are taken along the centre-out order. The first ``lead_eg``
    groups (default ``spec.ts_eg``) are clean, then the pattern
    [corrupt_eg corrupted, ts_eg clean] repeats towards the edge. Corrupted
    blocks are numbered 0, 1, 2, ... outward.
    """
    lead = spec.ts_eg if lead_eg is None else int(lead_eg)
    if not 1 <= lead <= spec.ts_eg:
        raise ValueError(f"lead_eg must lie in [1, {spec.ts_eg}], got {lead}")
    order = line_order_center_out(height)
    mask = np.full(height, CLEAN, dtype=np.int64)
    period = spec.ts_eg + spec.corrupt_eg
    offset = spec.ts_eg - lead
    for pos, row in enumerate(order):
        eg = pos // spec.eg_size + offset
        cycle, phase = divmod(eg, period)
        if phase >= spec.ts_eg:
            mask[row] = cycle
    return mask


def draw_lead_eg(spec: MotionSpec, seed) -> int:
    """Length of the central clean block for one image (see ``MotionSpec.onset``)."""
    if spec.onset == "center":
        return spec.ts_eg
    return int(np.random.default_rng(seed).integers(1, spec.ts_eg + 1))


def splice_kspace(
    clean: np.ndarray,
    corrupted_sources: Sequence[np.ndarray],
    spec: MotionSpec,
    lead_eg: Optional[int] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Replace corrupted echo-group rows of ``clean`` with rows of the sources.

    Corrupted blocks cycle through the sources round-robin. Returns the
    spliced k-space and the per-row provenance mask (CLEAN or the index into
    ``corrupted_sources``).
    """
    clean = np.asarray(clean)
    if not corrupted_sources:
        raise ValueError("need at least one corrupted k-space source")
    for i, src in enumerate(corrupted_sources):
        if np.shape(src) != clean.shape:
            raise ValueError(
                f"corrupted source {i} has shape {np.shape(src)}, clean k-space has {clean.shape}"
            )
    block = corruption_schedule(clean.shape[0], spec, lead_eg)
    mask = np.where(block == CLEAN, CLEAN, block % len(corrupted_sources))
    out = clean.copy()
    for i, src in enumerate(corrupted_sources):
        rows = mask == i
        out[rows] = np.asarray(src)[rows]
    return out, mask


def corrupted_fraction(mask: np.ndarray) -> float:
    mask = np.asarray(mask)
    return float(np.count_nonzero(mask != CLEAN)) / mask.size


def simulate_motion(
    clean: np.ndarray, spec: MotionSpec, seed: int = 0
) -> Tuple[np.ndarray, np.ndarray]:
    """Produce a motion-corrupted version of a clean [0, 1] image.

    Returns the corrupted magnitude image (clipped to [0, 1]) and the per-row
    provenance mask. The seed only drives the motion onset.
    """
    clean = np.asarray(clean, dtype=np.float64)
    if clean.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {clean.shape}")
    if clean.size and (clean.min() < 0 or clean.max() > 1):
        raise ValueError("clean image values must lie in [0, 1]")
    k_clean = fft2(clean)
    sources = [fft2(rotate(clean, a)) for a in spec.angles_deg]
    k, mask = splice_kspace(k_clean, sources, spec, draw_lead_eg(spec, seed))
    corrupted = np.clip(np.abs(ifft2(k)), 0.0, 1.0)
    return corrupted, mask


# ---------------------------------------------------------------------------
# phantoms
# ---------------------------------------------------------------------------

# (center_x, center_y, axis_a, axis_b, rotation_deg, intensity), modified Shepp-Logan
SHEPP_LOGAN = (
    (0.0, 0.0, 0.69, 0.92, 0.0, 1.0),
    (0.0, -0.0184, 0.6624, 0.874, 0.0, -0.8),
    (0.22, 0.0, 0.11, 0.31, -18.0, -0.2),
    (-0.22, 0.0, 0.16, 0.41, 18.0, -0.2),
    (0.0, 0.35, 0.21, 0.25, 0.0, 0.1),
    (0.0, 0.1, 0.046, 0.046, 0.0, 0.1),
    (0.0, -0.1, 0.046, 0.046, 0.0, 0.1),
    (-0.08, -0.605, 0.046, 0.023, 0.0, 0.1),
    (0.0, -0.605, 0.023, 0.023, 0.0, 0.1),
    (0.06, -0.605, 0.023, 0.046, 0.0, 0.1),
)


@dataclass
class PhantomSpec:
    """Ellipse phantom on [-1, 1]^2; y grows downward with the row index."""

    size: int = 64
    ellipses: List[Tuple[float, float, float, float, float, float]] = field(
        default_factory=lambda: list(SHEPP_LOGAN)
    )


def render_phantom(spec: PhantomSpec, seed=None, jitter: float = 0.05) -> np.ndarray:
    """Sum ellipse intensities per pixel and clip to [0, 1].

    With a seed every ellipse parameter is scaled by an independent factor in
    [1 - jitter, 1 + jitter] (angles and centres jitter the same way).
    """
    if spec.size < 16:
        raise ValueError(f"phantom size must be >= 16, got {spec.size}")
    n = spec.size
    coords = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    y, x = np.meshgrid(coords, coords, indexing="ij")
    img = np.zeros((n, n))
    rng = np.random.default_rng(seed) if seed is not None else None
    for ellipse in spec.ellipses:
        params = np.asarray(ellipse, dtype=np.float64)
        if rng is not None:
            params = params * rng.uniform(1.0 - jitter, 1.0 + jitter, size=6)
        cx, cy, a, b, rot, value = params
        t = math.radians(rot)
        u = (x - cx) * math.cos(t) + (y - cy) * math.sin(t)
        v = -(x - cx) * math.sin(t) + (y - cy) * math.cos(t)
        img[(u / a) ** 2 + (v / b) ** 2 <= 1.0] += value
    return np.clip(img, 0.0, 1.0)
