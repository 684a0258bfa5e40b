"""Desk-scale ablation runs on the generated dataset.

Each run trains one variant from a seed, scores it on the held-out split and
records per-branch foreground areas. :func:`run_ladder` drives a list of runs
over one shared dataset and optionally appends every result to a JSON-lines file.
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .data import GenConfig, generate_dataset, load_dataset, shuffle_annotations
from .losses import LossConfig
from .metrics import evaluate, probability_map
from .network import NetworkConfig, build_model, forward
from .training import TrainConfig, train
from .variational import MEAN


@dataclass(frozen=True)
class ExperimentConfig:
    num_cases: int = 50
    image_size: int = 64
    se_radius: int = 2
    rater_ops: tuple[str, ...] = ("erode", "identity", "dilate")
    data_seed: int = 0
    depth: int = 2
    base_channels: int = 8
    epochs: int = 200
    batch_size: int = 4
    optimizer: str = "adam"
    lr0: float = 5e-3
    kl_beta: float = 1e-4
    n_mc: int = 50

    def gen_config(self) -> GenConfig:
        return GenConfig(
            num_cases=self.num_cases,
            image_size=self.image_size,
            se_radius=self.se_radius,
            rater_ops=self.rater_ops,
            seed=self.data_seed,
        )

    def network_config(self) -> NetworkConfig:
        return NetworkConfig(depth=self.depth, base_channels=self.base_channels, num_branches=len(self.rater_ops))

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(
            optimizer=self.optimizer,
            lr0=self.lr0,
            epochs=self.epochs,
            batch_size=self.batch_size,
            n_mc_eval=self.n_mc,
            seed=seed,
            loss=LossConfig(kl_beta=self.kl_beta),
        )


@dataclass
class RunResult:
    variant: str
    annotations: str
    seed: int
    q_score: float
    ged: float
    diversity: float
    similarity: float
    branch_areas: list[float]
    rater_areas: list[float]
    fused_mae: float
    final_loss: float
    seconds: float

    @property
    def key(self) -> tuple[str, str, int]:
        return self.variant, self.annotations, self.seed


def prepare_data(config: ExperimentConfig, root) -> tuple[list, list]:
    root = Path(root)
    if not (root / "manifest.json").exists():
        generate_dataset(config.gen_config(), root)
    train_cases = [c for c in load_dataset(root) if c.split != "test"]
    return train_cases, load_dataset(root, split="test")


def branch_areas(model, cases) -> np.ndarray:
    """Mean thresholded foreground area per branch (posterior mean weights for Bayesian decoders)."""
    areas = np.zeros(model.num_branches)
    for case in cases:
        pred = forward(model, case.image, None, 1, mode=MEAN)
        areas += (pred.branch_probs >= 0.5).reshape(model.num_branches, -1).sum(axis=1)
    return areas / len(cases)


def fused_mae(model, cases) -> float:
    errs = [np.abs(forward(model, c.image, None, 1, mode=MEAN).fused - probability_map(c.rater_masks)).mean() for c in cases]
    return float(np.mean(errs))


def run_one(config: ExperimentConfig, train_cases, test_cases, variant: str, seed: int, annotations: str = "aligned") -> RunResult:
    if annotations == "shuffled":
        train_cases = shuffle_annotations(train_cases, seed)
    elif annotations != "aligned":
        raise ValueError(f"annotations must be 'aligned' or 'shuffled', got {annotations!r}")
    start = time.perf_counter()
    model = build_model(variant, config.network_config(), seed=seed)
    model, records = train(model, train_cases, config.train_config(seed))
    report = evaluate(model, test_cases, n_mc=config.n_mc, generator=torch.Generator().manual_seed(seed))
    rater_areas = np.mean([c.rater_masks.reshape(c.num_raters, -1).sum(axis=1) for c in test_cases], axis=0)
    return RunResult(
        variant=variant,
        annotations=annotations,
        seed=seed,
        q_score=report.q_score,
        ged=report.ged,
        diversity=report.diversity,
        similarity=report.similarity,
        branch_areas=branch_areas(model, test_cases).tolist(),
        rater_areas=rater_areas.tolist(),
        fused_mae=fused_mae(model, test_cases),
        final_loss=records[-1]["loss"],
        seconds=time.perf_counter() - start,
    )


def run_ladder(config: ExperimentConfig, data_root, runs, results_path=None, progress=None) -> list[RunResult]:
    """Execute ``runs``, an iterable of ``(variant, annotations, seed)`` triples."""
    train_cases, test_cases = prepare_data(config, data_root)
    results = []
    for variant, mode, seed in runs:
        res = run_one(config, train_cases, test_cases, variant, seed, mode)
        results.append(res)
        if results_path is not None:
            with open(results_path, "a") as fh:
                fh.write(json.dumps(asdict(res), sort_keys=True) + "\n")
        if progress is not None:
            progress(res)
    return results
