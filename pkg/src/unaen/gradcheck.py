"""Central finite-difference checks for tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence, Tuple

import numpy as np

from .autodiff import Tensor


def _scalar(fn, inputs) -> float:
    return float(fn(*inputs).data)


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    probes: int = 100,
    h: float = 1e-3,
    seed: int = 0,
) -> Tuple[float, np.ndarray, np.ndarray]:
    """Compare autodiff gradients of the scalar ``fn(*inputs)`` with central
    differences at ``probes`` randomly chosen input coordinates.

    Returns ``(rel_err, analytic, numeric)`` where ``rel_err`` is
    ||analytic - numeric|| / max(||analytic||, ||numeric||) over the probes.
    Inputs that do not require grad are left alone.
    """
    targets = [t for t in inputs if t.requires_grad]
    if not targets:
        raise ValueError("gradcheck needs at least one input with requires_grad=True")
    for t in targets:
        t.grad = None
    out = fn(*inputs)
    out.backward()
    analytic_full = [t.grad.copy() for t in targets]

    rng = np.random.default_rng(seed)
    sizes = np.array([t.size for t in targets])
    which = rng.choice(len(targets), size=probes, p=sizes / sizes.sum())
    analytic = np.empty(probes)
    numeric = np.empty(probes)
    for k, ti in enumerate(which):
        t = targets[ti]
        idx = np.unravel_index(rng.integers(t.size), t.shape)
        orig = t.data[idx].copy()
        t.data[idx] = orig + h
        fp = _scalar(fn, inputs)
        t.data[idx] = orig - h
        fm = _scalar(fn, inputs)
        t.data[idx] = orig
        numeric[k] = (fp - fm) / (2 * h)
        analytic[k] = analytic_full[ti][idx]
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale), analytic, numeric
