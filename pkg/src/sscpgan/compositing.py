"""Cut-and-paste compositing of a foreground onto a background through a mask."""

from __future__ import annotations

import numpy as np

from . import numerics as nx
from .numerics import ShapeError, Tensor


class MaskRangeError(ValueError):
    pass


def composite(fg, bg, mask):
    """Blend ``mask * fg + (1 - mask) * bg``.

    ``fg`` and ``bg`` are N x C x H x W, ``mask`` is N x 1 x H x W and is
    broadcast over channels. Accepts numpy arrays or :class:`Tensor` (the
    result is differentiable in all three when tensors are given).
    """
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    f = fg.data if isinstance(fg, Tensor) else np.asarray(fg)
    b = bg.data if isinstance(bg, Tensor) else np.asarray(bg)
    if f.shape != b.shape:
        raise ShapeError(f"foreground {f.shape} and background {b.shape} differ")
    if m.ndim != 4 or m.shape[1] != 1 or m.shape[0] != f.shape[0] or m.shape[2:] != f.shape[2:]:
        raise ShapeError(f"mask {m.shape} does not match images {f.shape} (expected N x 1 x H x W)")
    if m.size and (m.min() < 0 or m.max() > 1 or not np.all(np.isfinite(m))):
        raise MaskRangeError(f"mask values must lie in [0, 1], got [{m.min()}, {m.max()}]")

    if not any(isinstance(t, Tensor) for t in (fg, bg, mask)):
        return m * f + (1 - m) * b
    fg, bg, mask = nx.as_tensor(fg), nx.as_tensor(bg), nx.as_tensor(mask)
    return mask * fg + (1.0 - mask) * bg
