"""Per-branch variational objective and its branch average."""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .variational import SAMPLE, PriorSpec

KL_MODES = ("per_batch_count", "fixed")


@dataclass(frozen=True)
class LossConfig:
    dice_smooth: float = 1.0
    kl_weight_mode: str = "per_batch_count"
    kl_beta: float = 1.0
    mc_train_samples: int = 1
    prior_mean: float = 0.0
    prior_std: float = 1.0

    def __post_init__(self):
        if not self.dice_smooth > 0:
            raise ValueError("dice_smooth must be positive")
        if self.kl_weight_mode not in KL_MODES:
            raise ValueError(f"kl_weight_mode must be one of {KL_MODES}")
        if self.kl_beta < 0:
            raise ValueError("kl_beta must be non-negative")
        if self.mc_train_samples < 1:
            raise ValueError("mc_train_samples must be >= 1")

    @property
    def prior(self) -> PriorSpec:
        return PriorSpec(self.prior_mean, self.prior_std)

    def kl_scale(self, batches_per_epoch: int = 1) -> float:
        if self.kl_weight_mode == "per_batch_count":
            return self.kl_beta / max(1, batches_per_epoch)
        return self.kl_beta


@dataclass
class LossTerms:
    """A differentiable loss plus its detached components."""

    loss: torch.Tensor
    kl: float
    dice: float


def soft_dice_loss(pred: torch.Tensor, target: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    """Smoothed Dice loss of a single grid: ``1 - (2|p t| + s) / (|p| + |t| + s)``."""
    if pred.shape != target.shape:
        raise ValueError(f"pred shape {tuple(pred.shape)} != target shape {tuple(target.shape)}")
    inter = (pred * target).sum()
    return 1.0 - (2.0 * inter + smooth) / (pred.sum() + target.sum() + smooth)


def batch_dice_loss(pred: torch.Tensor, target: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    """Mean over the leading batch axis of per-case :func:`soft_dice_loss`."""
    if pred.shape != target.shape:
        raise ValueError(f"pred shape {tuple(pred.shape)} != target shape {tuple(target.shape)}")
    dims = tuple(range(1, pred.dim()))
    inter = (pred * target).sum(dims)
    per_case = 1.0 - (2.0 * inter + smooth) / (pred.sum(dims) + target.sum(dims) + smooth)
    return per_case.mean()


def _targets(batch, r: int) -> torch.Tensor:
    masks = batch["masks"]
    if r >= masks.shape[1]:
        raise IndexError(f"batch carries {masks.shape[1]} rater masks, branch {r} needs mask {r}")
    return masks[:, r : r + 1]


def branch_loss(model, batch, r: int, generator=None, config: LossConfig = LossConfig(), batches_per_epoch: int = 1) -> LossTerms:
    """KL(Q_r || prior) * kl_scale + E_w[Dice(branch r, rater r)]."""
    return _branch_terms(model, batch, [r], generator, config, batches_per_epoch)


def total_loss(model, batch, generator=None, config: LossConfig = LossConfig(), batches_per_epoch: int = 1) -> LossTerms:
    """Average of :func:`branch_loss` over all branches."""
    return _branch_terms(model, batch, list(range(model.num_branches)), generator, config, batches_per_epoch)


def _branch_terms(model, batch, branches, generator, config, batches_per_epoch) -> LossTerms:
    for r in branches:
        _targets(batch, r)
    images = batch["images"]
    bayes = model.is_bayesian
    n_draws = config.mc_train_samples if bayes else 1
    dice_sum = [torch.zeros(()) for _ in branches]
    for _ in range(n_draws):
        outs = model.branch_outputs(images, generator, SAMPLE, branches)
        for i, r in enumerate(branches):
            dice_sum[i] = dice_sum[i] + batch_dice_loss(outs[i], _targets(batch, r), config.dice_smooth)
    scale = config.kl_scale(batches_per_epoch)
    loss = torch.zeros(())
    kl_total, dice_total = 0.0, 0.0
    for i, r in enumerate(branches):
        dice = dice_sum[i] / n_draws
        kl = model.branch_kl(r, config.prior) if bayes else torch.zeros(())
        loss = loss + scale * kl + dice
        kl_total += float(kl.detach())
        dice_total += float(dice.detach())
    k = len(branches)
    return LossTerms(loss / k, kl_total / k, dice_total / k)
