"""Numpy implementations of the per-pixel kernels.

Used when the compiled extension is unavailable. Outputs match
:mod:`multirater._ckernels` exactly.
"""
from __future__ import annotations

import numpy as np


def disc_offsets(radius: int) -> list[tuple[int, int]]:
    """Offsets (dy, dx) of a discrete disc: Euclidean distance <= radius."""
    return [
        (dy, dx)
        for dy in range(-radius, radius + 1)
        for dx in range(-radius, radius + 1)
        if dy * dy + dx * dx <= radius * radius
    ]


def _shifted_views(mask: np.ndarray, radius: int, pad_value: int):
    h, w = mask.shape
    padded = np.pad(mask, radius, constant_values=pad_value)
    for dy, dx in disc_offsets(radius):
        yield padded[radius + dy : radius + dy + h, radius + dx : radius + dx + w]


def erode(mask, radius: int) -> np.ndarray:
    m = np.asarray(mask) != 0
    out = np.ones(m.shape, dtype=bool)
    # out-of-bounds pixels are ignored, i.e. padded with foreground
    for view in _shifted_views(m, radius, 1):
        out &= view
    return out.astype(np.uint8)


def dilate(mask, radius: int) -> np.ndarray:
    m = np.asarray(mask) != 0
    out = np.zeros(m.shape, dtype=bool)
    for view in _shifted_views(m, radius, 0):
        out |= view
    return out.astype(np.uint8)


def pairwise_iou_distance(a, b) -> np.ndarray:
    A = (np.asarray(a) != 0).astype(np.int64)
    B = (np.asarray(b) != 0).astype(np.int64)
    if A.shape[1] != B.shape[1]:
        raise ValueError("mask sets have different pixel counts")
    inter = A @ B.T
    union = A.sum(1)[:, None] + B.sum(1)[None, :] - inter
    out = np.zeros(inter.shape, dtype=np.float64)
    nz = union > 0
    out[nz] = 1.0 - inter[nz] / union[nz]
    return out


def level_index(q, levels: int) -> np.ndarray:
    v = np.asarray(q, dtype=np.float64)
    lv = np.clip(np.floor(v * levels), 0, levels - 1).astype(np.intp)
    # nudge entries whose product rounded across a band edge
    while True:
        up = (lv < levels - 1) & ((lv + 1) / levels <= v)
        if not up.any():
            break
        lv[up] += 1
    while True:
        down = (lv > 0) & (lv / levels > v)
        if not down.any():
            break
        lv[down] -= 1
    return lv


def staged_dice(pred, gt, levels: int) -> np.ndarray:
    lp = level_index(pred, levels).ravel()
    lg = level_index(gt, levels).ravel()
    sp = np.bincount(lp, minlength=levels)
    sg = np.bincount(lg, minlength=levels)
    inter = np.bincount(lp[lp == lg], minlength=levels)
    out = np.ones(levels, dtype=np.float64)
    nz = (sp + sg) > 0
    out[nz] = 2.0 * inter[nz] / (sp[nz] + sg[nz])
    return out
