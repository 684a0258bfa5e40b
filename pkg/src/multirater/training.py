"""Training loop: SGD/Adam with polynomial learning-rate decay."""
from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import metrics
from .data import MultiRaterCase
from .losses import LossConfig, LossTerms, total_loss
from .network import PredictionSet, UNetEnsemble, forward
from .variational import MEAN, SAMPLE

log = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "adam")


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "sgd"
    lr0: float = 1e-3
    epochs: int = 200
    batch_size: int = 4
    poly_power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 0.0
    n_mc_eval: int = 50
    seed: int = 0
    val_fraction: float = 0.2
    keep_best: bool = False
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if isinstance(self.loss, dict):
            object.__setattr__(self, "loss", LossConfig(**self.loss))
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must be in [0, 1)")


def default_train_config(variant: str, **overrides) -> TrainConfig:
    """Adam at 5e-3 for the Bayesian variant, SGD at 1e-3 otherwise."""
    base = {"optimizer": "adam", "lr0": 5e-3} if variant == "omba" else {"optimizer": "sgd", "lr0": 1e-3}
    base.update(overrides)
    return TrainConfig(**base)


def poly_lr(step: int, total_steps: int, lr0: float, power: float = 0.9) -> float:
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr0 * (1.0 - step / total_steps) ** power


def split_internal_val(cases: list, fraction: float, seed: int) -> tuple[list, list]:
    """Seeded hold-out of ``round(fraction * n)`` cases, always leaving one for training."""
    n = len(cases)
    n_val = min(int(round(fraction * n)), n - 1)
    if n_val <= 0:
        return list(cases), []
    order = np.random.default_rng([seed, 7]).permutation(n)
    val_idx = set(int(i) for i in order[:n_val])
    train = [c for i, c in enumerate(cases) if i not in val_idx]
    val = [c for i, c in enumerate(cases) if i in val_idx]
    return train, val


def _stack_batch(cases: list[MultiRaterCase]) -> dict:
    images = torch.from_numpy(np.stack([c.image for c in cases])[:, None].astype(np.float32))
    masks = torch.from_numpy(np.stack([c.rater_masks for c in cases]).astype(np.float32))
    return {"images": images, "masks": masks}


class _Unit:
    """One independently optimised network and the rater columns it trains on."""

    def __init__(self, model, rater: int | None, config: TrainConfig, soft_target: bool):
        self.model = model
        self.rater = rater
        self.soft_target = soft_target
        self.generator = torch.Generator().manual_seed(config.seed)
        self.order_rng = np.random.default_rng([config.seed, 11])
        params = list(model.parameters())
        if config.optimizer == "sgd":
            self.opt = torch.optim.SGD(params, lr=config.lr0, momentum=config.momentum, weight_decay=config.weight_decay)
        else:
            self.opt = torch.optim.Adam(params, lr=config.lr0, weight_decay=config.weight_decay)

    def targets(self, batch: dict) -> dict:
        masks = batch["masks"]
        if self.rater is not None:
            masks = masks[:, self.rater : self.rater + 1]
        if self.soft_target:
            masks = masks.mean(dim=1, keepdim=True)
        return {"images": batch["images"], "masks": masks}

    def loss(self, batch: dict, config: TrainConfig, batches_per_epoch: int) -> LossTerms:
        return total_loss(self.model, self.targets(batch), self.generator, config.loss, batches_per_epoch)


def _units(model, config: TrainConfig) -> list[_Unit]:
    if isinstance(model, UNetEnsemble):
        return [_Unit(member, r, config, soft_target=False) for r, member in enumerate(model.members)]
    soft = getattr(model, "variant", None) == "vanilla"
    return [_Unit(model, None, config, soft_target=soft)]


def check_rater_count(model, cases: list[MultiRaterCase]) -> None:
    counts = {c.num_raters for c in cases}
    if len(counts) != 1:
        raise ValueError(f"cases have differing rater counts: {sorted(counts)}")
    m = counts.pop()
    if getattr(model, "variant", None) == "vanilla":
        return
    if model.num_branches != m:
        raise ValueError(f"model has {model.num_branches} branches but the dataset has {m} raters")


def validation_q_score(model, cases: list[MultiRaterCase], levels: int | None = None) -> float | None:
    if not cases:
        return None
    mode = MEAN if model.is_bayesian else SAMPLE
    scores = []
    for c in cases:
        pred = forward(model, c.image, None, 1, mode=mode)
        lv = levels if levels is not None else c.num_raters + 1
        scores.append(metrics.q_score(pred.fused, metrics.probability_map(c.rater_masks), lv))
    return float(np.mean(scores))


def train(model, cases: list[MultiRaterCase], config: TrainConfig, log_path=None, verbose: bool = False):
    """Fit ``model`` to ``cases``; returns ``(model, records)``.

    A seeded ``val_fraction`` of the cases is held out for the per-epoch
    validation Q-score. Ensemble members are optimised independently, each
    against its own rater with its own identically seeded streams.
    """
    if not cases:
        raise ValueError("training set is empty")
    check_rater_count(model, cases)
    torch.manual_seed(config.seed)
    train_cases, val_cases = split_internal_val(cases, config.val_fraction, config.seed)
    units = _units(model, config)
    n = len(train_cases)
    batches_per_epoch = math.ceil(n / config.batch_size)
    total_steps = config.epochs * batches_per_epoch
    records = []
    best_q, best_state = -math.inf, None
    step = 0
    sink = open(log_path, "w") if log_path is not None else None
    try:
        for epoch in range(config.epochs):
            model.train()
            sums = {"loss": 0.0, "kl": 0.0, "dice": 0.0}
            lr = config.lr0
            for b in range(batches_per_epoch):
                lr = poly_lr(step, total_steps, config.lr0, config.poly_power)
                for unit in units:
                    if b == 0:
                        unit.order = unit.order_rng.permutation(n)
                    idx = unit.order[b * config.batch_size : (b + 1) * config.batch_size]
                    batch = _stack_batch([train_cases[int(i)] for i in idx])
                    for g in unit.opt.param_groups:
                        g["lr"] = lr
                    terms = unit.loss(batch, config, batches_per_epoch)
                    if not torch.isfinite(terms.loss):
                        raise FloatingPointError(
                            f"non-finite loss at epoch {epoch}, step {step}: kl={terms.kl}, dice={terms.dice}, lr={lr}"
                        )
                    unit.opt.zero_grad()
                    terms.loss.backward()
                    unit.opt.step()
                    sums["loss"] += float(terms.loss.detach()) / len(units)
                    sums["kl"] += terms.kl / len(units)
                    sums["dice"] += terms.dice / len(units)
                step += 1
            model.eval()
            val_q = validation_q_score(model, val_cases)
            rec = {"epoch": epoch, **{k: v / batches_per_epoch for k, v in sums.items()}, "lr": lr, "val_q_score": val_q}
            records.append(rec)
            if sink is not None:
                sink.write(json.dumps(rec, sort_keys=True) + "\n")
            if verbose:
                log.info("epoch %d loss %.4f dice %.4f kl %.1f val_q %s", epoch, rec["loss"], rec["dice"], rec["kl"], val_q)
            if config.keep_best and val_q is not None and val_q > best_q:
                best_q = val_q
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    finally:
        if sink is not None:
            sink.close()
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return model, records


def mc_predict(model, image, n_mc: int = 50, generator: torch.Generator | None = None) -> PredictionSet:
    if not model.is_bayesian and n_mc > 1:
        warnings.warn("deterministic model: n_mc collapsed to 1", stacklevel=2)
        n_mc = 1
    return forward(model, image, generator, n_mc)


def config_to_dict(config: TrainConfig) -> dict:
    return asdict(config)


def read_log(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
