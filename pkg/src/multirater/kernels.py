"""Backend selection for the per-pixel kernels.

The Cython extension is used when it has been built; otherwise the numpy
fallback is loaded. Set ``MULTIRATER_PURE_PYTHON=1`` to force the fallback.
"""
from __future__ import annotations

import os

if os.environ.get("MULTIRATER_PURE_PYTHON", "") not in ("", "0"):
    from . import _pykernels as _impl
else:
    try:
        from . import _ckernels as _impl  # type: ignore[attr-defined]
    except ImportError:
        from . import _pykernels as _impl

BACKEND = "cython" if _impl.__name__.endswith("_ckernels") else "python"

disc_offsets = _impl.disc_offsets
erode = _impl.erode
dilate = _impl.dilate
pairwise_iou_distance = _impl.pairwise_iou_distance
level_index = _impl.level_index
staged_dice = _impl.staged_dice

__all__ = [
    "BACKEND",
    "disc_offsets",
    "erode",
    "dilate",
    "pairwise_iou_distance",
    "level_index",
    "staged_dice",
]
