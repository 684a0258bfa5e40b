"""Inter-rater evaluation metrics.

Q-score (staged Dice over ``L`` probability bands), the IoU-based
generalized energy distance, sample diversity and sample similarity, the
probability ground-truth map, and the cross-entropy error / gamma maps.

Pair conventions: cross expectations average over every ordered
(prediction, ground truth) pair; within-set expectations average over
ordered pairs ``i != j`` and are 0 for a singleton set.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import kernels

CE_EPS = 1e-6
METRIC_NAMES = ("q_score", "ged", "diversity", "similarity")


def _stack(masks, name="masks") -> np.ndarray:
    arr = np.asarray(masks)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    return arr


def _flat_binary(masks, name) -> np.ndarray:
    arr = _stack(masks, name)
    return (arr.reshape(arr.shape[0], -1) != 0).astype(np.uint8)


def probability_map(rater_masks) -> np.ndarray:
    """Pixelwise fraction of raters marking foreground."""
    arr = _stack(rater_masks, "rater_masks")
    return (arr != 0).mean(axis=0)


def level_mask(q, level: int, levels: int) -> np.ndarray:
    if levels < 1:
        raise ValueError(f"levels must be >= 1, got {levels}")
    if not 0 <= level < levels:
        raise ValueError(f"level {level} outside [0, {levels})")
    return (kernels.level_index(q, levels) == level).astype(np.uint8)


def q_score(pred, gt, levels: int) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if levels < 1:
        raise ValueError(f"levels must be >= 1, got {levels}")
    return float(kernels.staged_dice(pred, gt, levels).sum() / levels)


def mask_distance(a, b) -> float:
    """``1 - IoU(a, b)``; two empty masks are at distance 0."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(kernels.pairwise_iou_distance(a.reshape(1, -1) != 0, b.reshape(1, -1) != 0)[0, 0])


def distance_matrix(a, b) -> np.ndarray:
    A = _flat_binary(a, "first sample set")
    B = _flat_binary(b, "second sample set")
    if A.shape[1] != B.shape[1]:
        raise ValueError("sample sets have different mask shapes")
    return kernels.pairwise_iou_distance(A, B)


def _within_mean(d: np.ndarray) -> float:
    n = d.shape[0]
    if n < 2:
        return 0.0
    return float((d.sum() - np.trace(d)) / (n * (n - 1)))


def cross_expectation(pred, gt) -> float:
    return float(distance_matrix(pred, gt).mean())


def diversity(pred) -> float:
    return _within_mean(distance_matrix(pred, pred))


def similarity(pred, gt) -> float:
    return 1.0 - cross_expectation(pred, gt)


def ged(pred, gt) -> float:
    """Squared generalized energy distance; may be negative for finite sets."""
    return 2.0 * cross_expectation(pred, gt) - diversity(pred) - diversity(gt)


def _bce(target: np.ndarray, prob: np.ndarray) -> np.ndarray:
    p = np.clip(prob, CE_EPS, 1.0 - CE_EPS)
    return -(target * np.log(p) + (1.0 - target) * np.log(1.0 - p))


def error_map(gt_samples, pred_samples) -> np.ndarray:
    """Pixelwise mean CE(y, s) over all (rater mask, predicted sample) pairs."""
    gt = _stack(gt_samples, "gt_samples").astype(np.float64)
    pred = _stack(pred_samples, "pred_samples").astype(np.float64)
    total = np.zeros(gt.shape[1:])
    for s in pred:
        total += _bce(gt, s[None]).sum(axis=0)
    return total / (gt.shape[0] * pred.shape[0])


def gamma_map(pred_samples) -> np.ndarray:
    """Pixelwise mean CE(s_mean, s) of the mean prediction against each sample."""
    pred = _stack(pred_samples, "pred_samples").astype(np.float64)
    return _bce(pred.mean(axis=0)[None], pred).mean(axis=0)


@dataclass
class MetricsReport:
    q_score: float
    ged: float
    diversity: float
    similarity: float
    per_case: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_cases(cls, per_case: list[dict], meta: dict | None = None) -> "MetricsReport":
        if not per_case:
            raise ValueError("no cases to aggregate")
        agg = {k: float(np.mean([c[k] for c in per_case])) for k in METRIC_NAMES}
        return cls(per_case=per_case, meta=meta or {}, **agg)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "MetricsReport":
        data = json.loads(Path(path).read_text())
        missing = [k for k in (*METRIC_NAMES, "per_case") if k not in data]
        if missing:
            raise ValueError(f"{path}: missing fields {missing}")
        return cls(**{k: data[k] for k in (*METRIC_NAMES, "per_case")}, meta=data.get("meta", {}))


def case_metrics(pred_set, rater_masks, levels: int) -> dict:
    gt_map = probability_map(rater_masks)
    samples = pred_set.mc_samples
    return {
        "q_score": q_score(pred_set.fused, gt_map, levels),
        "ged": ged(samples, rater_masks),
        "diversity": diversity(samples),
        "similarity": similarity(samples, rater_masks),
    }


def evaluate(model, cases, n_mc: int = 50, levels: int | None = None, generator=None, seed: int = 0) -> MetricsReport:
    """Score ``model`` on ``cases`` (an iterable of MultiRaterCase).

    ``levels`` defaults to ``m + 1`` where ``m`` is the rater count.
    Deterministic models are predicted with a single draw.
    """
    import torch

    from .network import forward

    if generator is None:
        generator = torch.Generator().manual_seed(seed)
    draws = n_mc if model.is_bayesian else 1
    per_case = []
    used_levels = levels
    for case in cases:
        masks = np.asarray(case.rater_masks)
        lv = levels if levels is not None else masks.shape[0] + 1
        used_levels = lv
        pred = forward(model, case.image, generator, draws)
        row = {"case_id": case.case_id, **case_metrics(pred, masks, lv)}
        per_case.append(row)
    meta = {"variant": getattr(model, "variant", None), "n_mc": draws, "levels": used_levels}
    return MetricsReport.from_cases(per_case, meta)
